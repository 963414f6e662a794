"""Classical precoders: zero-forcing and iterative WMMSE.

Both return full-power solutions (all antennas on, gamma = 1); antenna
selection and power backoff are the learned model's job.
"""

from dataclasses import dataclass

import numpy as np

from .core import PrecodingSolution, normalize_precoder, _channel_rows
from .errors import SingularChannelError
from .kernels import wmmse_solve


@dataclass
class WmmseReport:
    """Convergence record of one WMMSE run.

    rate_trace[i] is the sum rate after i full update rounds (index 0 is the
    initialization), so the trace is non-decreasing up to numerical slack.
    """

    rate_trace: np.ndarray
    n_iterations: int
    converged: bool


def zf_precoder(H, cfg):
    """Zero-forcing precoder, scaled to the full power budget.

    Inverts the user Gram matrix so every beam lands in the null space of the
    other users' channels; inter-user leakage is zero up to conditioning.
    """
    rows = _channel_rows(H)
    if rows.shape != (cfg.n_users, cfg.n_tx):
        raise SingularChannelError(
            f"channel shape {rows.shape} != ({cfg.n_users}, {cfg.n_tx})"
        )
    gram = rows.conj() @ rows.T
    eigvals = np.linalg.eigvalsh(gram)
    if eigvals[0] <= 0 or eigvals[-1] / eigvals[0] > 1e12:
        cond = np.inf if eigvals[0] <= 0 else eigvals[-1] / eigvals[0]
        raise SingularChannelError(
            "channel rows are (near-)linearly dependent: Gram conditioning "
            f"{cond:.3e} exceeds 1e12; zero-forcing is not defined"
        )
    gram_inv = np.linalg.solve(gram, np.eye(cfg.n_users, dtype=np.complex128))
    W = rows.T @ gram_inv
    return PrecodingSolution(precoder=normalize_precoder(W, cfg.p_tx))


def wmmse_precoder(H, cfg, max_iter=200, tol=1e-4):
    """Weighted-MMSE sum-rate precoder.

    Alternates scalar MMSE receivers, inverse-MSE weights and a regularized
    precoder solve whose dual variable is bisected to meet the power budget.
    Initialized from zero-forcing at full power, so the returned solution
    never falls below ZF in sum rate; if the channel is too ill-conditioned
    for ZF, a matched-filter initialization is used instead.

    Returns (PrecodingSolution, WmmseReport).
    """
    rows = _channel_rows(H)
    try:
        W0 = zf_precoder(rows, cfg).precoder
    except SingularChannelError:
        W0 = normalize_precoder(rows.T.copy(), cfg.p_tx)
    W, trace, n_iter = wmmse_solve(
        rows, cfg.p_tx, cfg.noise_power, W0, max_iter, tol
    )
    converged = n_iter < max_iter and n_iter > 0
    report = WmmseReport(
        rate_trace=trace, n_iterations=n_iter, converged=converged
    )
    return PrecodingSolution(precoder=W), report


def wmmse_rate_bound(dataset, cfg, n_eval=100, seed=0, max_iter=200, tol=1e-4):
    """Mean WMMSE sum rate over CSI matrices drawn from a dataset.

    Used as the per-environment attainable-rate estimate that pretraining
    weights and rate-request sampling are scaled by. Deterministic for a
    fixed (dataset, seed, n_eval).
    """
    from .channelgen import build_multiuser_csi
    from .core import sum_rate

    total = 0.0
    for i in range(n_eval):
        H = build_multiuser_csi(dataset, cfg.n_users, seed=[seed, i])
        solution, _ = wmmse_precoder(H, cfg, max_iter=max_iter, tol=tol)
        total += sum_rate(H, solution, cfg)
    return total / n_eval
