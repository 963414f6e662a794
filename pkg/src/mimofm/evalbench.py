"""Evaluation harness: protocols, complexity accounting, report files.

Protocols mirror the experiment suite: a max-rate evaluation (huge requested
rates, so the model should spend everything) compared against ZF and WMMSE on
identical instances, a rate/energy trade-off sweep over the requested load,
and a cross-site matrix of per-site heads evaluated on every site. Reports
are plain JSON/CSV carrying the config hash and seed in their file names;
plotting is out of scope.
"""

import csv
import hashlib
import json
from dataclasses import dataclass

import numpy as np

from .baselines import wmmse_precoder, zf_precoder
from .channelgen import build_multiuser_csi
from .core import energy, sum_rate, sinr, user_rate
from .nn import SATURATING_REQUEST, forward


def flop_count(algorithm, n_users, n_tx, wmmse_iters=16):
    """Closed-form real-flop counts for one precoding decision.

    algorithm is 'zf', 'wmmse' or 'model'; the model expression is for the
    published architecture (128-dim tokens, 4 blocks, 1024 FFN) and scales
    only with the system dimensions.
    """
    nu, nt = float(n_users), float(n_tx)
    if algorithm == "zf":
        return 7.0 * (2.0 / 3.0 * nu**3 + 2.0 * nu**2 * nt)
    if algorithm == "wmmse":
        return wmmse_iters * (
            14.0 / 3.0 * nu * nt**3
            + 12.0 * nu**2 * nt**2
            + 12.0 * nu**2 * nt
            + 9.0 * nu * nt**2
            + 8.0 * nu * nt
            + 5.0 * nu**2
            + 68.0 / 3.0 * nu
        )
    if algorithm == "model":
        return (2.0**19 + 2.0**21) * nu + 2048.0 * nu**2 + 1024.0 * nu * nt
    raise ValueError(f"unknown algorithm {algorithm!r}")


def round_sig(value, digits=2):
    """Round to a number of significant figures (display helper)."""
    if value == 0:
        return 0.0
    exponent = int(np.floor(np.log10(abs(value))))
    return float(round(value, digits - 1 - exponent))


def model_flop_audit(hyper):
    """Independent per-stage flop count of this implementation's forward.

    Counts 2 flops per multiply-accumulate in every affine map and attention
    contraction, per CSI snapshot. Reported next to the closed-form 'model'
    expression so the two can be compared; they need not match exactly since
    the closed form bakes in the published architecture.
    """
    d = hyper.embed_dim
    s = hyper.seq_len
    f = hyper.ffn_dim
    stages = {
        "csi_embedding": 2 * hyper.n_users * hyper.token_dim * d,
        "rate_embedding": 2 * d + 2 * hyper.n_users * d,
        "attention_qkv": hyper.n_layers * 3 * 2 * s * d * d,
        "attention_scores": hyper.n_layers * 2 * s * s * d,
        "attention_values": hyper.n_layers * 2 * s * s * d,
        "attention_out": hyper.n_layers * 2 * s * d * d,
        "ffn": hyper.n_layers * 2 * 2 * s * d * f,
        "precoder_head": 2 * hyper.n_users * d * 2 * hyper.n_tx,
        "energy_head": 2 * d * (hyper.n_tx + 1),
    }
    stages["total"] = int(sum(stages.values()))
    return stages


# -- evaluation protocols -----------------------------------------------------


def _draw_eval_matrices(dataset, sys_cfg, n_eval, seed):
    return [
        build_multiuser_csi(dataset, sys_cfg.n_users, seed=[seed, i])
        for i in range(n_eval)
    ]


def max_sum_rate_eval(
    params,
    head,
    dataset,
    sys_cfg,
    n_eval=100,
    seed=0,
    wmmse_max_iter=200,
    wmmse_tol=1e-4,
):
    """Mean sum rate under saturating rate requests, vs ZF and WMMSE.

    All three columns are evaluated on identical CSI draws; the WMMSE column
    therefore equals the attainable-rate bound for the same (seed, n_eval).
    """
    request = np.full(sys_cfg.n_users, SATURATING_REQUEST)
    totals = {"model": 0.0, "zf": 0.0, "wmmse": 0.0}
    for H in _draw_eval_matrices(dataset, sys_cfg, n_eval, seed):
        out = forward(params, head, H, request, sys_cfg)
        totals["model"] += sum_rate(H, out.solution, sys_cfg)
        totals["zf"] += sum_rate(H, zf_precoder(H, sys_cfg), sys_cfg)
        wm, _ = wmmse_precoder(H, sys_cfg, max_iter=wmmse_max_iter, tol=wmmse_tol)
        totals["wmmse"] += sum_rate(H, wm, sys_cfg)
    report = {name: val / n_eval for name, val in totals.items()}
    report["n_eval"] = n_eval
    report["seed"] = seed
    report["env_id"] = dataset.env_id
    return report


@dataclass
class TradeoffPoint:
    """One load level of the rate/energy sweep."""

    requested_sum: float
    achieved_sum: float
    mean_energy: float
    mean_relative_rate_error: float = None
    n_eval: int = 0


def tradeoff_sweep(
    params, head, dataset, sys_cfg, rmax, n_points=11, n_eval=50, seed=0
):
    """Sweep the requested load from 0 to the attainable bound.

    Point j requests a total of beta_j * rmax split randomly across users;
    relative rate error averages |R_u - R*_u| / R*_u over users with positive
    targets and is None when a point has none (beta = 0). Points come back
    ranked by achieved average sum rate.
    """
    matrices = _draw_eval_matrices(dataset, sys_cfg, n_eval, seed)
    points = []
    for j, beta in enumerate(np.linspace(0.0, 1.0, n_points)):
        achieved = 0.0
        energy_sum = 0.0
        rel_errors = []
        for i, H in enumerate(matrices):
            rng = np.random.default_rng([seed, 8, j, i])
            split = rng.random(sys_cfg.n_users)
            targets = split * (beta * rmax / split.sum())
            out = forward(params, head, H, targets, sys_cfg)
            rates = np.array(
                [
                    user_rate(sinr(H.rows[u], out.solution, u, sys_cfg))
                    for u in range(sys_cfg.n_users)
                ]
            )
            achieved += rates.sum()
            energy_sum += energy(out.solution.mask, out.solution.gamma, sys_cfg)
            positive = targets > 0
            if positive.any():
                rel_errors.append(
                    float(
                        np.mean(
                            np.abs(rates[positive] - targets[positive])
                            / targets[positive]
                        )
                    )
                )
        points.append(
            TradeoffPoint(
                requested_sum=float(beta * rmax),
                achieved_sum=achieved / n_eval,
                mean_energy=energy_sum / n_eval,
                mean_relative_rate_error=(
                    float(np.mean(rel_errors)) if rel_errors else None
                ),
                n_eval=n_eval,
            )
        )
    points.sort(key=lambda p: p.achieved_sum)
    return points


def cross_site_matrix(params, heads, datasets, sys_cfg, n_eval=50, seed=0):
    """Mean sum rate of every site head on every site's channels.

    Returns (env_ids, matrix) with matrix[i, j] the mean sum rate of head i
    evaluated on environment j; all heads see identical draws per column.
    """
    env_ids = sorted(datasets)
    request = np.full(sys_cfg.n_users, SATURATING_REQUEST)
    matrix = np.zeros((len(env_ids), len(env_ids)))
    for j, env_j in enumerate(env_ids):
        matrices = [
            build_multiuser_csi(datasets[env_j], sys_cfg.n_users, seed=[seed, 7, j, n])
            for n in range(n_eval)
        ]
        for i, env_i in enumerate(env_ids):
            total = 0.0
            for H in matrices:
                out = forward(params, heads[env_i], H, request, sys_cfg)
                total += sum_rate(H, out.solution, sys_cfg)
            matrix[i, j] = total / n_eval
    return env_ids, matrix


# -- report files --------------------------------------------------------------


def config_digest(mapping):
    """Short stable hash of a resolved configuration mapping."""
    canonical = json.dumps(mapping, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()[:12]


def report_path(report_dir, name, digest, seed, ext):
    return f"{report_dir}/{name}_{digest}_seed{seed}.{ext}"


def write_json_report(path, payload):
    with open(path, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
        fh.write("\n")


def write_tradeoff_csv(path, points):
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(
            [
                "requested_sum",
                "achieved_sum",
                "mean_energy",
                "mean_relative_rate_error",
                "n_eval",
            ]
        )
        for p in points:
            err = "" if p.mean_relative_rate_error is None else repr(
                p.mean_relative_rate_error
            )
            writer.writerow(
                [
                    repr(p.requested_sum),
                    repr(p.achieved_sum),
                    repr(p.mean_energy),
                    err,
                    p.n_eval,
                ]
            )


def read_tradeoff_csv(path):
    points = []
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        for row in reader:
            err = row["mean_relative_rate_error"]
            points.append(
                TradeoffPoint(
                    requested_sum=float(row["requested_sum"]),
                    achieved_sum=float(row["achieved_sum"]),
                    mean_energy=float(row["mean_energy"]),
                    mean_relative_rate_error=None if err == "" else float(err),
                    n_eval=int(row["n_eval"]),
                )
            )
    return points
