"""System model primitives: SINR, rates, energy, power normalization.

Conventions used throughout the package:

* A multi-user channel is an (n_users, n_tx) complex array whose rows are the
  per-user channel vectors h_u.
* A precoder is an (n_tx, n_users) complex array whose columns are beams w_u.
* The beam that actually leaves the array for user u is
  sqrt(gamma) * (mask o w_u), so transmit power scales linearly in gamma and
  antennas removed by the mask radiate nothing.
* Rates are log2(1 + SINR) in bit/s/Hz.
"""

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError
from .kernels import mc_accumulate


@dataclass
class SystemConfig:
    """Physical downlink parameters.

    Attributes
    ----------
    n_tx : transmit antennas at the base station.
    n_users : single-antenna users served simultaneously.
    p_tx : total transmit power budget in watt.
    p_rf : per-antenna RF chain power draw in watt.
    noise_power : receiver noise power sigma^2 in watt.
    """

    n_tx: int = 64
    n_users: int = 4
    p_tx: float = 20.0
    p_rf: float = 1.0
    noise_power: float = 1e-13

    def __post_init__(self):
        if self.n_tx < 1 or self.n_users < 1:
            raise ValueError("n_tx and n_users must be positive")
        if self.n_users > self.n_tx:
            raise ValueError("n_users must not exceed n_tx")
        if self.p_tx <= 0 or self.p_rf < 0 or self.noise_power <= 0:
            raise ValueError("p_tx and noise_power must be positive, p_rf >= 0")


@dataclass
class ChannelMatrix:
    """Multi-user CSI snapshot; rows[u] is user u's channel vector."""

    rows: np.ndarray

    def __post_init__(self):
        self.rows = np.asarray(self.rows, dtype=np.complex128)
        if self.rows.ndim != 2:
            raise DimensionMismatchError(
                f"channel matrix must be 2-D, got shape {self.rows.shape}"
            )
        if not np.all(np.isfinite(self.rows.view(np.float64))):
            raise ValueError("channel matrix contains non-finite entries")

    @property
    def n_users(self):
        return self.rows.shape[0]

    @property
    def n_tx(self):
        return self.rows.shape[1]


@dataclass
class PrecodingSolution:
    """Joint precoder / antenna mask / power fraction decision.

    precoder : (n_tx, n_users) complex, columns are beams.
    mask : (n_tx,) float with entries in {0, 1}; 1 keeps the antenna on.
    gamma : fraction of p_tx actually spent, in [0, 1].
    """

    precoder: np.ndarray
    mask: np.ndarray = None
    gamma: float = 1.0

    def __post_init__(self):
        self.precoder = np.asarray(self.precoder, dtype=np.complex128)
        if self.precoder.ndim != 2:
            raise DimensionMismatchError(
                f"precoder must be 2-D, got shape {self.precoder.shape}"
            )
        n_tx = self.precoder.shape[0]
        if self.mask is None:
            self.mask = np.ones(n_tx)
        self.mask = np.asarray(self.mask, dtype=np.float64)
        if self.mask.shape != (n_tx,):
            raise DimensionMismatchError(
                f"mask shape {self.mask.shape} does not match n_tx={n_tx}"
            )
        if not np.all((self.mask == 0.0) | (self.mask == 1.0)):
            raise ValueError("mask entries must be exactly 0 or 1")
        self.gamma = float(self.gamma)
        if not 0.0 <= self.gamma <= 1.0:
            raise ValueError(f"gamma must lie in [0, 1], got {self.gamma}")

    def effective_precoder(self):
        """Beams as radiated: sqrt(gamma) * (mask o w_u) columnwise."""
        return np.sqrt(self.gamma) * (self.mask[:, None] * self.precoder)

    def transmit_power(self):
        eff = self.effective_precoder()
        return float(np.sum(np.abs(eff) ** 2))


@dataclass
class TransmissionSample:
    """One simulated downlink transmission.

    Symbol convention: unit-power symbols, independent uniform-phase
    unit-modulus draws, so E[x x^H] = I per transmission and all signal power
    is carried by the precoder. Noise is circularly-symmetric complex Gaussian
    with variance noise_power.
    """

    symbols: np.ndarray
    noise: complex
    received: complex


def _channel_rows(H):
    rows = H.rows if isinstance(H, ChannelMatrix) else np.asarray(H)
    return np.asarray(rows, dtype=np.complex128)


def sinr(h_u, solution, u, cfg):
    """Signal-to-interference-plus-noise ratio of user u.

    sinr = |h_u^H b_u|^2 / (sum_{j != u} |h_u^H b_j|^2 + noise_power) with
    b_j = sqrt(gamma) * (mask o w_j).
    """
    h = np.asarray(h_u, dtype=np.complex128).reshape(-1)
    if h.shape[0] != cfg.n_tx:
        raise DimensionMismatchError(
            f"channel length {h.shape[0]} != n_tx {cfg.n_tx}"
        )
    W = solution.precoder
    if W.shape != (cfg.n_tx, cfg.n_users):
        raise DimensionMismatchError(
            f"precoder shape {W.shape} != ({cfg.n_tx}, {cfg.n_users})"
        )
    if not 0 <= u < cfg.n_users:
        raise DimensionMismatchError(f"user index {u} out of range")
    eff = solution.effective_precoder()
    gains = np.abs(h.conj() @ eff) ** 2
    signal = float(gains[u])
    interference = float(np.sum(gains[np.arange(gains.size) != u]))
    return float(signal / (interference + cfg.noise_power))


def user_rate(sinr_value):
    """Achievable rate log2(1 + sinr) in bit/s/Hz."""
    if sinr_value < 0:
        raise ValueError(f"sinr must be non-negative, got {sinr_value}")
    return float(np.log2(1.0 + sinr_value))


def sum_rate(H, solution, cfg):
    """Sum over users of log2(1 + sinr_u) for one CSI snapshot."""
    rows = _channel_rows(H)
    if rows.shape != (cfg.n_users, cfg.n_tx):
        raise DimensionMismatchError(
            f"channel shape {rows.shape} != ({cfg.n_users}, {cfg.n_tx})"
        )
    return float(
        sum(user_rate(sinr(rows[u], solution, u, cfg)) for u in range(cfg.n_users))
    )


def energy(mask, gamma, cfg):
    """Power model: gamma * p_tx + p_rf * (number of active antennas)."""
    mask = np.asarray(mask, dtype=np.float64)
    if mask.shape != (cfg.n_tx,):
        raise DimensionMismatchError(
            f"mask shape {mask.shape} does not match n_tx={cfg.n_tx}"
        )
    if not 0.0 <= gamma <= 1.0:
        raise ValueError(f"gamma must lie in [0, 1], got {gamma}")
    return float(gamma * cfg.p_tx + cfg.p_rf * mask.sum())


def normalize_precoder(W_raw, p_tx):
    """Rescale a raw precoder to spend the full power budget.

    One global scale, so column directions and relative per-user power split
    are preserved. All-zero input has no direction to keep and is rejected.
    """
    W = np.asarray(W_raw, dtype=np.complex128)
    power = float(np.sum(np.abs(W) ** 2))
    if power == 0.0:
        raise ValueError("cannot normalize an all-zero precoder")
    return W * np.sqrt(p_tx / power)


def simulate_sinr(h_u, solution, u, cfg, n_symbols=1_000_000, rng=0):
    """Monte-Carlo SINR estimate from simulated transmissions.

    Independent of the closed form in `sinr`: draws unit-modulus symbols for
    every user plus Gaussian noise, measures the empirical signal,
    interference and noise powers at user u, and returns their ratio.
    """
    h = np.asarray(h_u, dtype=np.complex128).reshape(-1)
    if h.shape[0] != cfg.n_tx:
        raise DimensionMismatchError(
            f"channel length {h.shape[0]} != n_tx {cfg.n_tx}"
        )
    rng = np.random.default_rng(rng)
    eff = solution.effective_precoder()
    row = np.ascontiguousarray(h.conj() @ eff)

    sig_tot = 0.0
    interf_tot = 0.0
    noise_tot = 0.0
    remaining = int(n_symbols)
    chunk = 1 << 16
    scale = np.sqrt(cfg.noise_power / 2.0)
    while remaining > 0:
        m = min(chunk, remaining)
        phases = rng.random((m, cfg.n_users))
        symbols = np.exp(2j * np.pi * phases)
        noise = scale * (rng.standard_normal(m) + 1j * rng.standard_normal(m))
        s, i, n = mc_accumulate(symbols, noise, row, u)
        sig_tot += s
        interf_tot += i
        noise_tot += n
        remaining -= m
    return float(sig_tot / (interf_tot + noise_tot))


def simulate_transmission(h_u, solution, cfg, rng=0):
    """Draw one transmission through the system model, for inspection."""
    h = np.asarray(h_u, dtype=np.complex128).reshape(-1)
    rng = np.random.default_rng(rng)
    symbols = np.exp(2j * np.pi * rng.random(cfg.n_users))
    noise = complex(
        np.sqrt(cfg.noise_power / 2.0)
        * (rng.standard_normal() + 1j * rng.standard_normal())
    )
    received = complex(h.conj() @ solution.effective_precoder() @ symbols + noise)
    return TransmissionSample(symbols=symbols, noise=noise, received=received)
