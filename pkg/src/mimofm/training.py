"""Two-phase training: site-weighted sum-rate pretraining, then joint
rate-tracking / energy optimization.

Phase 1 maximizes per-site sum rate with gradient weights
alpha_e = (ema_rate_e - rmax_e)^2 clamped to [1, clamp_threshold] and
normalized to sum 1, so sites far from their attainable rate (estimated by
the WMMSE bound) get more pull. Phase 2 minimizes
mu * mean_u (R_u - R*_u)^2 + (1 - mu) * E / (p_tx + n_tx * p_rf)
averaged over environments, with per-environment random rate requests whose
sum is a uniform fraction of the site's attainable rate.

All batch assembly, request sampling and dropout use RNG streams derived
from (seed, phase, epoch, batch, env), so a rerun with the same config and
seed reproduces parameter trajectories bit for bit.
"""

from dataclasses import dataclass, field

import numpy as np

from .autodiff import Tensor, as_tensor
from .core import sinr, user_rate
from .nn import SATURATING_REQUEST, FeatureExtractorParams, OutputHead, forward_batch

LN2 = float(np.log(2.0))


@dataclass
class RateRequest:
    """Per-user target rates in bit/s/Hz; entries are finite and >= 0."""

    targets: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.float64).reshape(-1)
        if not np.all(np.isfinite(self.targets)) or np.any(self.targets < 0):
            raise ValueError("rate targets must be finite and >= 0")


@dataclass
class TrainConfig:
    """Optimization knobs shared by both phases."""

    mu: float = 0.99
    clamp_threshold: float = 100.0
    learning_rate: float = 1e-4
    batch_size: int = 1000
    pretrain_epochs: int = 10
    epochs: int = 10
    default_head_epochs: int = None
    anchor_fraction: float = 0.25
    seed: int = 0

    def __post_init__(self):
        if not 0.0 < self.mu < 1.0:
            raise ValueError("mu must lie strictly in (0, 1)")
        if self.clamp_threshold < 1.0:
            raise ValueError("clamp_threshold must be >= 1")
        if self.learning_rate <= 0 or self.batch_size < 1:
            raise ValueError("learning_rate must be > 0 and batch_size >= 1")
        if self.pretrain_epochs < 0 or self.epochs < 0:
            raise ValueError("epoch counts must be >= 0")
        if not 0.0 <= self.anchor_fraction < 1.0:
            raise ValueError("anchor_fraction must lie in [0, 1)")


@dataclass
class SiteWeights:
    """Adaptive per-site gradient weights and their running-rate state."""

    rmax: np.ndarray
    rate_ema: np.ndarray
    alpha: np.ndarray

    def __post_init__(self):
        self.rmax = np.asarray(self.rmax, dtype=np.float64)
        self.rate_ema = np.asarray(self.rate_ema, dtype=np.float64)
        self.alpha = np.asarray(self.alpha, dtype=np.float64)


def site_weight_update(rate_ema, rmax, clamp_threshold):
    """alpha_e = (ema_e - rmax_e)^2, clamped to [1, T], normalized to sum 1.

    Returns (raw, clamped, normalized).
    """
    rate_ema = np.asarray(rate_ema, dtype=np.float64)
    rmax = np.asarray(rmax, dtype=np.float64)
    raw = (rate_ema - rmax) ** 2
    clamped = np.clip(raw, 1.0, clamp_threshold)
    return raw, clamped, clamped / clamped.sum()


def sample_rate_requirements(rmax_e, n_users, rng):
    """Draw one random per-user rate request for an environment.

    Draw order: n_users uniforms, then the load fraction beta; targets are
    the uniforms rescaled so their sum equals beta * rmax_e exactly.
    """
    rng = np.random.default_rng(rng)
    u = rng.random(n_users)
    beta = rng.random()
    return RateRequest(targets=u * (beta * rmax_e / u.sum()))


# -- differentiable rate / loss graph ---------------------------------------


def batch_rates_graph(out, Hr, Hi, cfg, use_mask=True):
    """Per-user rate tensor (B, n_users) from forward_batch outputs.

    With use_mask the radiated beams are sqrt(gamma) * (mask o w_u); without
    it the power-normalized precoder is evaluated as-is (phase-1 objective).
    """
    n_batch, n_users, _ = Hr.shape
    w_re, w_im = out["w_re"], out["w_im"]
    if use_mask:
        m = out["mask"].reshape(n_batch, -1, 1)
        amp = (out["gamma"] ** 0.5).reshape(n_batch, 1, 1)
        w_re = w_re * m * amp
        w_im = w_im * m * amp
    Hr_t = as_tensor(Hr)
    Hi_t = as_tensor(Hi)
    s_re = Hr_t @ w_re + Hi_t @ w_im
    s_im = Hr_t @ w_im - Hi_t @ w_re
    p = s_re * s_re + s_im * s_im
    eye = np.eye(n_users)
    signal = (p * Tensor(eye)).sum(axis=2)
    interference = (p * Tensor(1.0 - eye)).sum(axis=2)
    ratio = signal / (interference + cfg.noise_power)
    return ratio.log1p() * (1.0 / LN2)


def adaptive_rate_term(rates, targets):
    """Mean over users of squared rate error, per sample: (B,) tensor."""
    diff = rates - as_tensor(targets)
    return (diff * diff).mean(axis=1)


def energy_term(out, cfg):
    """Normalized energy per sample: (gamma p_tx + p_rf sum mask) / budget."""
    n_batch = out["mask"].shape[0]
    e = out["gamma"].reshape(n_batch) * cfg.p_tx + out["mask"].sum(axis=1) * cfg.p_rf
    return e * (1.0 / (cfg.p_tx + cfg.n_tx * cfg.p_rf))


def total_loss_graph(out, Hr, Hi, targets, cfg, mu):
    """mu * L_AR + (1 - mu) * normalized energy, averaged over the batch."""
    rates = batch_rates_graph(out, Hr, Hi, cfg, use_mask=True)
    l_ar = adaptive_rate_term(rates, targets)
    l_ec = energy_term(out, cfg)
    return (l_ar * mu + l_ec * (1.0 - mu)).mean(), rates


# -- scalar reference losses (used by reports and tests) ---------------------


def loss_adaptive_rate(H, solution, request, cfg):
    """Mean squared per-user rate error of a decoded solution."""
    rows = np.asarray(getattr(H, "rows", H), dtype=np.complex128)
    targets = request.targets if isinstance(request, RateRequest) else request
    targets = np.asarray(targets, dtype=np.float64)
    errs = [
        (user_rate(sinr(rows[u], solution, u, cfg)) - targets[u]) ** 2
        for u in range(cfg.n_users)
    ]
    return float(np.mean(errs))


def loss_total(H, solution, request, cfg, mu):
    """Blended objective on a decoded solution; mu=1 reduces to L_AR."""
    if not 0.0 < mu <= 1.0:
        raise ValueError("mu must lie in (0, 1]")
    from .core import energy

    l_ar = loss_adaptive_rate(H, solution, request, cfg)
    e_norm = energy(solution.mask, solution.gamma, cfg) / (
        cfg.p_tx + cfg.n_tx * cfg.p_rf
    )
    return float(mu * l_ar + (1.0 - mu) * e_norm)


# -- optimizer ----------------------------------------------------------------


class Adam:
    """Adam over an ordered list of parameter tensors."""

    def __init__(self, params, lr, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1.0 - self.beta1**self.t
        c2 = 1.0 - self.beta2**self.t
        for i, p in enumerate(self.params):
            if p.grad is None:
                continue
            g = p.grad
            self.m[i] = self.beta1 * self.m[i] + (1.0 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1.0 - self.beta2) * g * g
            p.data = p.data - self.lr * (self.m[i] / c1) / (
                np.sqrt(self.v[i] / c2) + self.eps
            )


# -- training state and epochs ------------------------------------------------


@dataclass
class TrainState:
    """Everything that evolves across epochs."""

    params: FeatureExtractorParams
    heads: dict
    env_ids: list
    site: SiteWeights
    optimizer: Adam
    phase1_epoch: int = 0
    phase2_epoch: int = 0
    history: list = field(default_factory=list)


def init_train_state(hyper, env_ids, rmax, train_cfg, init_seed=0, params=None, heads=None):
    """Build extractor, one head per environment, weights and optimizer.

    Pass ``params``/``heads`` to resume from checkpointed weights instead of
    fresh initialisation; the optimizer always starts with zeroed moments.
    """
    env_ids = list(env_ids)
    rmax = np.asarray(rmax, dtype=np.float64)
    if params is None:
        params = FeatureExtractorParams(hyper, rng=[init_seed, 0])
    if heads is None:
        heads = {
            env_id: OutputHead(hyper, rng=[init_seed, 1 + i])
            for i, env_id in enumerate(env_ids)
        }
    else:
        heads = dict(heads)
    _, _, alpha = site_weight_update(
        np.zeros(len(env_ids)), rmax, train_cfg.clamp_threshold
    )
    site = SiteWeights(rmax=rmax, rate_ema=np.zeros(len(env_ids)), alpha=alpha)
    param_list = [t for _, t in params.named()]
    for env_id in env_ids:
        param_list.extend(t for _, t in heads[env_id].named())
    optimizer = Adam(param_list, lr=train_cfg.learning_rate)
    return TrainState(
        params=params, heads=heads, env_ids=env_ids, site=site, optimizer=optimizer
    )


def _draw_batch(dataset, n_users, batch_size, rng):
    """Indices (batch_size, n_users), no repeats within a row."""
    n = dataset.n_samples
    if n < n_users:
        raise ValueError(
            f"dataset {dataset.env_id!r} has {n} samples, need >= {n_users}"
        )
    order = np.argsort(rng.random((batch_size, n)), axis=1)
    idx = order[:, :n_users]
    rows = dataset.channels[idx].astype(np.complex128)
    return rows.real.copy(), rows.imag.copy()


def _batches_per_epoch(datasets, batch_size):
    n = max(d.n_samples for d in datasets)
    return max(1, int(np.ceil(n / batch_size)))


def pretrain_epoch(state, datasets, sys_cfg, train_cfg):
    """One phase-1 epoch over all environments; returns per-batch metrics.

    Each batch does one optimizer step on the weighted sum over environments
    of the negated mean masked sum rate (antenna mask and gamma applied, so
    rate ascent also teaches the energy head its full-power operating point);
    site weights are refreshed from the running rate average after every
    batch.
    """
    epoch = state.phase1_epoch
    metrics = []
    n_batches = _batches_per_epoch(datasets, train_cfg.batch_size)
    for b in range(n_batches):
        state.optimizer.zero_grad()
        total = None
        batch_rates = np.zeros(len(state.env_ids))
        for e, (env_id, dataset) in enumerate(zip(state.env_ids, datasets)):
            rng_idx = np.random.default_rng([train_cfg.seed, 1, epoch, b, e, 0])
            rng_drop = np.random.default_rng([train_cfg.seed, 1, epoch, b, e, 1])
            Hr, Hi = _draw_batch(
                dataset, sys_cfg.n_users, train_cfg.batch_size, rng_idx
            )
            # rate ascent trains at the same request level the max-rate
            # evaluation protocol uses
            R = np.full((Hr.shape[0], sys_cfg.n_users), SATURATING_REQUEST)
            out = forward_batch(
                state.params,
                state.heads[env_id],
                Hr,
                Hi,
                R,
                sys_cfg,
                mode="train",
                rng=rng_drop,
            )
            rates = batch_rates_graph(out, Hr, Hi, sys_cfg, use_mask=True)
            env_loss = -rates.sum(axis=1).mean()
            weighted = env_loss * float(state.site.alpha[e])
            total = weighted if total is None else total + weighted
            batch_rates[e] = float(rates.data.sum(axis=1).mean())
        total.backward()
        state.optimizer.step()
        state.site.rate_ema = 0.9 * state.site.rate_ema + 0.1 * batch_rates
        _, _, state.site.alpha = site_weight_update(
            state.site.rate_ema, state.site.rmax, train_cfg.clamp_threshold
        )
        metrics.append(
            {
                "phase": 1,
                "epoch": epoch,
                "batch": b,
                "mean_rates": batch_rates.tolist(),
                "alpha": state.site.alpha.tolist(),
                "loss": float(total.data),
            }
        )
    state.phase1_epoch += 1
    state.history.extend(metrics)
    return metrics


def mixed_requests(rmax_e, n_users, n_batch, anchor_fraction, rng):
    """Per-sample request mixture for request-conditioned training.

    Most samples are tracking samples: targets drawn by
    sample_rate_requirements are both the model input and the loss target.
    With probability anchor_fraction a sample becomes an anchor sample whose
    model input is the saturating request; mixture_loss_graph trains anchor
    samples by rate ascent, so their target rows are only a placeholder (the
    bound split equally across users). Anchor samples keep the
    saturating-request input region on the max-rate policy, and because both
    kinds share every batch the request pathway receives a differential
    signal at every step.

    Draw order per batch: all tracking targets first, then one uniform per
    sample for the anchor choice. Returns (inputs, targets, anchor_mask).
    """
    targets = np.stack(
        [
            sample_rate_requirements(rmax_e, n_users, rng).targets
            for _ in range(n_batch)
        ]
    )
    anchored = rng.random(n_batch) < anchor_fraction
    inputs = targets.copy()
    inputs[anchored] = SATURATING_REQUEST
    targets[anchored] = rmax_e / n_users
    return inputs, targets, anchored


def mixture_loss_graph(out, Hr, Hi, targets, anchored, cfg, mu):
    """Blended loss for a mixed batch: tracking error plus anchored ascent.

    Tracking samples contribute the squared per-user rate error, anchor
    samples the phase-1 objective (negated masked sum rate), and every sample
    the energy term, blended by mu. Anchors re-apply rate ascent rather than
    a squared pull toward the equal-split bound because that split is not a
    feasible rate vector on interference-limited sites; a squared loss would
    drag the saturating-request policy toward an equalized compromise far
    below the bound instead of holding it at max rate.
    """
    rates = batch_rates_graph(out, Hr, Hi, cfg, use_mask=True)
    track_w = as_tensor(1.0 - np.asarray(anchored, dtype=np.float64))
    anchor_w = as_tensor(np.asarray(anchored, dtype=np.float64))
    l_ar = adaptive_rate_term(rates, targets) * track_w
    l_ar = l_ar + rates.sum(axis=1) * anchor_w * -1.0
    l_ec = energy_term(out, cfg)
    return (l_ar * mu + l_ec * (1.0 - mu)).mean(), rates


def multiobjective_epoch(state, datasets, sys_cfg, train_cfg):
    """One phase-2 epoch; the applied gradient is the mean over environments
    of the per-environment loss gradients.

    Every batch optimizes mixture_loss_graph on the per-sample request
    mixture of mixed_requests, so one update serves both operating regimes
    the checkpoint must support: tracking sampled requirements and
    sustaining max-rate behavior under saturating requests.
    """
    epoch = state.phase2_epoch
    metrics = []
    k = len(state.env_ids)
    n_batches = _batches_per_epoch(datasets, train_cfg.batch_size)
    for b in range(n_batches):
        state.optimizer.zero_grad()
        total = None
        losses = np.zeros(k)
        anchor_share = 0.0
        for e, (env_id, dataset) in enumerate(zip(state.env_ids, datasets)):
            rng_idx = np.random.default_rng([train_cfg.seed, 2, epoch, b, e, 0])
            rng_req = np.random.default_rng([train_cfg.seed, 2, epoch, b, e, 1])
            rng_drop = np.random.default_rng([train_cfg.seed, 2, epoch, b, e, 2])
            Hr, Hi = _draw_batch(
                dataset, sys_cfg.n_users, train_cfg.batch_size, rng_idx
            )
            inputs, targets, anchored = mixed_requests(
                state.site.rmax[e],
                sys_cfg.n_users,
                Hr.shape[0],
                train_cfg.anchor_fraction,
                rng_req,
            )
            out = forward_batch(
                state.params,
                state.heads[env_id],
                Hr,
                Hi,
                inputs,
                sys_cfg,
                mode="train",
                rng=rng_drop,
            )
            loss, _ = mixture_loss_graph(
                out, Hr, Hi, targets, anchored, sys_cfg, train_cfg.mu
            )
            scaled = loss * (1.0 / k)
            total = scaled if total is None else total + scaled
            losses[e] = float(loss.data)
            anchor_share += float(anchored.mean()) / k
        total.backward()
        state.optimizer.step()
        metrics.append(
            {
                "phase": 2,
                "epoch": epoch,
                "batch": b,
                "anchor_share": anchor_share,
                "env_losses": losses.tolist(),
                "loss": float(total.data),
            }
        )
    state.phase2_epoch += 1
    state.history.extend(metrics)
    return metrics


def train_head(
    params,
    head,
    datasets,
    rmax,
    sys_cfg,
    train_cfg,
    epochs,
    seed_tag,
    sample_weights=None,
):
    """Train one head on pooled datasets with the extractor frozen.

    Each batch draws equal slices from every dataset; sample_weights (one per
    dataset) scale each slice's contribution to the batch loss, normalized by
    the total weight. Every slice optimizes mixture_loss_graph on the
    per-sample request mixture of mixed_requests so the head serves both
    operating regimes: tracking sampled requirements and sustaining max-rate
    behavior under saturating requests. Used for the pooled default head and
    for site adaptation.
    """
    rmax = np.atleast_1d(np.asarray(rmax, dtype=np.float64))
    if sample_weights is None:
        sample_weights = np.ones(len(datasets))
    sample_weights = np.asarray(sample_weights, dtype=np.float64)

    frozen = [t for _, t in params.named()]
    saved = [t.requires_grad for t in frozen]
    for t in frozen:
        t.requires_grad = False
    optimizer = Adam([t for _, t in head.named()], lr=train_cfg.learning_rate)
    per_set = max(1, train_cfg.batch_size // len(datasets))
    n_batches = _batches_per_epoch(datasets, per_set)
    history = []
    try:
        for epoch in range(epochs):
            for b in range(n_batches):
                optimizer.zero_grad()
                total = None
                wsum = 0.0
                for e, dataset in enumerate(datasets):
                    rng_idx = np.random.default_rng(
                        [train_cfg.seed, 4, seed_tag, epoch, b, e, 0]
                    )
                    rng_req = np.random.default_rng(
                        [train_cfg.seed, 4, seed_tag, epoch, b, e, 1]
                    )
                    rng_drop = np.random.default_rng(
                        [train_cfg.seed, 4, seed_tag, epoch, b, e, 2]
                    )
                    Hr, Hi = _draw_batch(dataset, sys_cfg.n_users, per_set, rng_idx)
                    inputs, targets, anchored = mixed_requests(
                        rmax[min(e, len(rmax) - 1)],
                        sys_cfg.n_users,
                        Hr.shape[0],
                        train_cfg.anchor_fraction,
                        rng_req,
                    )
                    out = forward_batch(
                        params,
                        head,
                        Hr,
                        Hi,
                        inputs,
                        sys_cfg,
                        mode="train",
                        rng=rng_drop,
                    )
                    loss, _ = mixture_loss_graph(
                        out, Hr, Hi, targets, anchored, sys_cfg, train_cfg.mu
                    )
                    w = float(sample_weights[e])
                    total = loss * w if total is None else total + loss * w
                    wsum += w
                total = total * (1.0 / wsum)
                total.backward()
                optimizer.step()
                history.append(
                    {"epoch": epoch, "batch": b, "loss": float(total.data)}
                )
    finally:
        for t, flag in zip(frozen, saved):
            t.requires_grad = flag
    return history
