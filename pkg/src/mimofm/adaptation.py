"""Site adaptation: environment fingerprints, retrieval, head deployment.

An environment's fingerprint is the mean over CSI samples of the encoder's
pooled final-layer features under an all-zero rate request. Deployment sites
are matched to training sites by cosine similarity between fingerprints.
Three modes produce a site head, and none of them touches the shared
encoder:

* zero_shot: hand back the pooled default head unchanged.
* few_shot: retrieve the top-N most similar training sites, then fine-tune a
  copy of the default head on the retrieved data plus the local samples
  weighted 10x, for 20% of the phase-2 epoch budget.
* full: fine-tune a copy of the default head on the local dataset alone for
  the full phase-2 epoch budget.
"""

from dataclasses import dataclass, field

import numpy as np

from .baselines import wmmse_rate_bound
from .channelgen import EnvironmentDataset, build_multiuser_csi
from .errors import PrerequisiteError
from .nn import extract_features
from .training import train_head

DEFAULT_HEAD = "__default__"


@dataclass
class DeployResult:
    """Outcome of one deployment: the head plus retrieval diagnostics."""

    mode: str
    head: object
    similarities: dict = field(default_factory=dict)
    selected: list = field(default_factory=list)
    local_rmax: float = None
    history: list = field(default_factory=list)


def feature_vector(params, samples):
    """Environment fingerprint: mean pooled feature over CSI samples."""
    if len(samples) == 0:
        raise ValueError("feature_vector needs at least one CSI sample")
    feats = extract_features(params, samples)
    return feats.mean(axis=0)


def env_feature_vector(params, dataset, sys_cfg, n_matrices=64, seed=0):
    """Fingerprint of a dataset via freshly assembled CSI matrices."""
    n_matrices = min(n_matrices, dataset.n_samples // sys_cfg.n_users)
    if n_matrices < 1:
        raise ValueError(
            f"dataset {dataset.env_id!r} too small for one CSI matrix"
        )
    samples = [
        build_multiuser_csi(dataset, sys_cfg.n_users, seed=[seed, 5, i])
        for i in range(n_matrices)
    ]
    return feature_vector(params, samples)


def cosine_similarity(a, b):
    """Cosine of the angle between two fingerprints."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a)
    nb = np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        raise ValueError("cosine similarity is undefined for a zero vector")
    return float(a @ b / (na * nb))


def select_similar_environments(target_psi, env_psis, n_select):
    """Rank training environments by similarity to the target fingerprint.

    Returns (selected_ids, similarities). Ordering is by descending
    similarity with ties broken by ascending env_id, so selection is
    deterministic.
    """
    if n_select < 1 or n_select > len(env_psis):
        raise ValueError(
            f"n_select must lie in [1, {len(env_psis)}], got {n_select}"
        )
    sims = {
        env_id: cosine_similarity(target_psi, psi) for env_id, psi in env_psis.items()
    }
    ranked = sorted(sims, key=lambda env_id: (-sims[env_id], env_id))
    return ranked[:n_select], sims


def _local_subset(local_dataset, matrices):
    rows = np.concatenate([m.rows for m in matrices], axis=0)
    return EnvironmentDataset(
        env_id=local_dataset.env_id + ":local",
        los=local_dataset.los,
        channels=rows.astype(np.complex64),
    )


def deploy(
    params,
    heads,
    mode,
    local_dataset,
    sys_cfg,
    train_cfg,
    train_datasets=None,
    rmax_map=None,
    n_select=5,
    n_local_csi=10,
    seed=0,
    adapt_epochs=None,
):
    """Produce a head for a deployment site; the encoder stays frozen.

    heads must contain the pooled default head. few_shot additionally needs
    the training datasets and their attainable-rate estimates for retrieval
    and request sampling. adapt_epochs overrides the head-only training
    length; the default floor of 6 matters because a head fine-tuned for
    only a pass or two is left mid-oscillation between the alternating
    max-rate and tracking objectives and can end up below the head it
    started from.
    """
    if DEFAULT_HEAD not in heads:
        raise PrerequisiteError(
            "no pooled default head in the checkpoint; run the train stage first"
        )
    if mode == "zero_shot":
        return DeployResult(mode=mode, head=heads[DEFAULT_HEAD])

    if local_dataset is None or local_dataset.n_samples == 0:
        raise ValueError(f"{mode} adaptation needs local CSI samples")

    if mode == "full":
        local_rmax = wmmse_rate_bound(
            local_dataset, sys_cfg, n_eval=min(50, local_dataset.n_samples), seed=seed
        )
        head = heads[DEFAULT_HEAD].copy()
        epochs = adapt_epochs if adapt_epochs is not None else max(6, train_cfg.epochs)
        history = train_head(
            params,
            head,
            [local_dataset],
            [local_rmax],
            sys_cfg,
            train_cfg,
            epochs=epochs,
            seed_tag=seed,
        )
        return DeployResult(
            mode=mode, head=head, local_rmax=local_rmax, history=history
        )

    if mode == "few_shot":
        if not train_datasets or rmax_map is None:
            raise PrerequisiteError(
                "few_shot adaptation needs training datasets and rate bounds"
            )
        if local_dataset.n_samples < sys_cfg.n_users:
            raise ValueError("too few local samples for one CSI matrix")
        n_local_csi = min(n_local_csi, local_dataset.n_samples // sys_cfg.n_users)
        local_matrices = [
            build_multiuser_csi(local_dataset, sys_cfg.n_users, seed=[seed, 6, i])
            for i in range(n_local_csi)
        ]
        target_psi = feature_vector(params, local_matrices)
        env_psis = {
            env_id: env_feature_vector(params, ds, sys_cfg, seed=seed)
            for env_id, ds in train_datasets.items()
        }
        selected, sims = select_similar_environments(
            target_psi, env_psis, min(n_select, len(env_psis))
        )
        local_subset = _local_subset(local_dataset, local_matrices)
        local_rmax = wmmse_rate_bound(
            local_subset, sys_cfg, n_eval=n_local_csi, seed=seed
        )
        datasets = [train_datasets[env_id] for env_id in selected] + [local_subset]
        rmax = [rmax_map[env_id] for env_id in selected] + [local_rmax]
        weights = [1.0] * len(selected) + [10.0]
        head = heads[DEFAULT_HEAD].copy()
        if adapt_epochs is not None:
            epochs = adapt_epochs
        else:
            epochs = max(2, int(np.ceil(0.2 * max(6, train_cfg.epochs))))
        history = train_head(
            params,
            head,
            datasets,
            rmax,
            sys_cfg,
            train_cfg,
            epochs=epochs,
            seed_tag=seed,
            sample_weights=weights,
        )
        return DeployResult(
            mode=mode,
            head=head,
            similarities=sims,
            selected=selected,
            local_rmax=local_rmax,
            history=history,
        )

    raise ValueError(f"unknown deploy mode {mode!r}")
