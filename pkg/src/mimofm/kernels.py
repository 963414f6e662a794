"""Hot numeric kernels with a numba fast path and a pure-numpy fallback.

The jitted path is selected at import time: it is used whenever numba imports
cleanly and the environment variable ``MIMOFM_NUMBA`` is not set to ``0`` /
``false`` / ``off``. Every kernel is written as plain loop code so the
fallback is the very same function object, just not compiled. Both paths are
deterministic for fixed inputs; ``benchmarks/kernel_bench.py`` times them
against each other.

Kernels return status codes instead of raising so the compiled and plain
paths behave identically; the thin wrappers at the bottom translate codes
into package exceptions.
"""

import os

import numpy as np

from .errors import BisectionError

try:
    import numba

    NUMBA_AVAILABLE = True
except ImportError:
    NUMBA_AVAILABLE = False

_flag = os.environ.get("MIMOFM_NUMBA", "1").strip().lower()
USE_NUMBA = NUMBA_AVAILABLE and _flag not in ("0", "false", "off")


def _compile(fn):
    if USE_NUMBA:
        return numba.njit(cache=True, fastmath=False)(fn)
    return fn


def kernel_info():
    """Describe the active kernel path, for logs and benchmarks."""
    return {
        "numba_available": NUMBA_AVAILABLE,
        "numba_enabled": USE_NUMBA,
        "flag": os.environ.get("MIMOFM_NUMBA", ""),
    }


def _mc_accumulate_impl(symbols, noise, row, user):
    # symbols: (n, N_U) unit-modulus complex, noise: (n,) complex,
    # row[j] = sqrt(gamma) * h^H (mask o w_j). Accumulates empirical powers of
    # the signal, interference and noise components seen by `user`.
    n = symbols.shape[0]
    n_users = symbols.shape[1]
    sig = 0.0
    interf = 0.0
    noise_pow = 0.0
    for t in range(n):
        s = row[user] * symbols[t, user]
        sig += s.real * s.real + s.imag * s.imag
        acc = 0.0 + 0.0j
        for j in range(n_users):
            if j != user:
                acc += row[j] * symbols[t, j]
        interf += acc.real * acc.real + acc.imag * acc.imag
        eta = noise[t]
        noise_pow += eta.real * eta.real + eta.imag * eta.imag
    return sig, interf, noise_pow


def _sum_rates_impl(H, W, mask, gamma, noise_power, rates):
    # H: (B, N_U, N_T) rows h_u, W: (B, N_T, N_U), mask: (B, N_T),
    # gamma: (B,). Writes per-user rates (bit/s/Hz) into rates (B, N_U).
    n_batch, n_users, n_tx = H.shape
    for b in range(n_batch):
        g = np.sqrt(gamma[b])
        for u in range(n_users):
            sig = 0.0
            interf = 0.0
            for j in range(n_users):
                acc = 0.0 + 0.0j
                for i in range(n_tx):
                    acc += np.conj(H[b, u, i]) * (mask[b, i] * W[b, i, j] * g)
                p = acc.real * acc.real + acc.imag * acc.imag
                if j == u:
                    sig = p
                else:
                    interf += p
            rates[b, u] = np.log2(1.0 + sig / (interf + noise_power))
    return rates


def _wmmse_impl(H, p_tx, noise_power, W0, max_iter, tol, power_rtol):
    # Alternating scalar-MMSE / weight / precoder updates for the sum-rate
    # problem, one channel instance. Returns (W, trace, n_iter, status) where
    # trace[i] is the sum rate after i full update rounds and status is
    # 0 = ok, 1 = dual bracket not found, 2 = bisection stalled above the
    # feasibility tolerance.
    n_users, n_tx = H.shape
    W = W0.copy()
    trace = np.zeros(max_iter + 1)
    status = 0

    Hc = np.conj(H)
    S = Hc @ W
    rate = 0.0
    for k in range(n_users):
        sig = abs(S[k, k]) ** 2
        denom = noise_power
        for j in range(n_users):
            if j != k:
                denom += abs(S[k, j]) ** 2
        rate += np.log2(1.0 + sig / denom)
    trace[0] = rate

    n_done = 0
    for it in range(max_iter):
        # scalar MMSE receivers and MSE weights at the current precoder
        u = np.zeros(n_users, dtype=np.complex128)
        lam = np.zeros(n_users)
        for k in range(n_users):
            tot = noise_power
            for j in range(n_users):
                tot += abs(S[k, j]) ** 2
            u[k] = S[k, k] / tot
            e_k = 1.0 - abs(S[k, k]) ** 2 / tot
            lam[k] = 1.0 / e_k

        # quadratic term A = sum_j lam_j |u_j|^2 h_j h_j^H and targets
        # b_k = lam_k u_k h_k; the precoder solve is (A + mu I)^-1 b_k
        A = np.zeros((n_tx, n_tx), dtype=np.complex128)
        B = np.zeros((n_tx, n_users), dtype=np.complex128)
        for j in range(n_users):
            w_j = lam[j] * (u[j].real * u[j].real + u[j].imag * u[j].imag)
            hj = H[j]
            for a in range(n_tx):
                B[a, j] = lam[j] * np.conj(u[j]) * hj[a]
                for c in range(n_tx):
                    A[a, c] += w_j * hj[a] * np.conj(hj[c])

        d, V = np.linalg.eigh(A)
        d_max = d[n_tx - 1]
        cutoff = d_max * 1e-12
        lo_idx = 0
        while lo_idx < n_tx and d[lo_idx] <= cutoff:
            lo_idx += 1
        r = n_tx - lo_idx
        Vk = np.ascontiguousarray(V[:, lo_idx:])
        dk = np.empty(r)
        for i in range(r):
            dk[i] = max(d[lo_idx + i], 0.0)

        # project targets onto the retained eigenbasis; the perpendicular
        # residue is real only when some user weight vanishes from A
        coef = np.conj(Vk.T) @ B
        Bperp = B - Vk @ coef
        phi = (coef.real**2 + coef.imag**2)
        pperp = np.zeros(n_users)
        for k in range(n_users):
            acc = 0.0
            for a in range(n_tx):
                acc += abs(Bperp[a, k]) ** 2
            pperp[k] = acc
        pperp_tot = pperp.sum()

        p_pinv = 0.0
        for i in range(r):
            for k in range(n_users):
                p_pinv += phi[i, k] / (dk[i] * dk[i])

        if p_pinv <= p_tx:
            # power constraint inactive: truncated pseudo-inverse solution
            scale = np.empty(r)
            for i in range(r):
                scale[i] = 1.0 / dk[i]
            W = Vk @ (coef * scale.reshape(r, 1))
        else:
            mu_hi = 1.0
            found = False
            for _ in range(200):
                p_hi = pperp_tot / (mu_hi * mu_hi)
                for i in range(r):
                    den = dk[i] + mu_hi
                    for k in range(n_users):
                        p_hi += phi[i, k] / (den * den)
                if p_hi <= p_tx:
                    found = True
                    break
                mu_hi *= 2.0
            if not found:
                status = 1
                break
            mu_lo = 0.0
            mu = mu_hi
            for _ in range(500):
                mu = 0.5 * (mu_lo + mu_hi)
                p_mu = pperp_tot / (mu * mu) if pperp_tot > 0.0 else 0.0
                for i in range(r):
                    den = dk[i] + mu
                    for k in range(n_users):
                        p_mu += phi[i, k] / (den * den)
                if abs(p_mu - p_tx) <= power_rtol * p_tx:
                    break
                if p_mu > p_tx:
                    mu_lo = mu
                else:
                    mu_hi = mu
                if mu_hi - mu_lo <= 1e-17 * mu_hi:
                    break
            p_mu = pperp_tot / (mu * mu) if pperp_tot > 0.0 else 0.0
            for i in range(r):
                den = dk[i] + mu
                for k in range(n_users):
                    p_mu += phi[i, k] / (den * den)
            if abs(p_mu - p_tx) > 1e-9 * p_tx:
                status = 2
                break
            scale = np.empty(r)
            for i in range(r):
                scale[i] = 1.0 / (dk[i] + mu)
            W = Vk @ (coef * scale.reshape(r, 1)) + Bperp / mu

        S = Hc @ W
        rate = 0.0
        for k in range(n_users):
            sig = abs(S[k, k]) ** 2
            denom = noise_power
            for j in range(n_users):
                if j != k:
                    denom += abs(S[k, j]) ** 2
            rate += np.log2(1.0 + sig / denom)
        n_done = it + 1
        trace[n_done] = rate
        if abs(trace[n_done] - trace[n_done - 1]) < tol:
            break

    return W, trace[: n_done + 1], n_done, status


mc_accumulate = _compile(_mc_accumulate_impl)
sum_rates_kernel = _compile(_sum_rates_impl)
wmmse_kernel = _compile(_wmmse_impl)

# un-jitted twins, kept addressable for the benchmark
mc_accumulate_numpy = _mc_accumulate_impl
sum_rates_numpy = _sum_rates_impl
wmmse_numpy = _wmmse_impl


def batch_user_rates(H, W, mask=None, gamma=None, noise_power=1e-13):
    """Per-user rates for a batch of (channel, precoder) instances.

    Parameters
    ----------
    H : (B, N_U, N_T) complex ndarray, rows are user channels h_u.
    W : (B, N_T, N_U) complex ndarray, columns are beams.
    mask : (B, N_T) float ndarray or None for all-on.
    gamma : (B,) float ndarray or None for 1.

    Returns
    -------
    (B, N_U) float ndarray of rates in bit/s/Hz.
    """
    H = np.ascontiguousarray(H, dtype=np.complex128)
    W = np.ascontiguousarray(W, dtype=np.complex128)
    n_batch, n_users, _ = H.shape
    if mask is None:
        mask = np.ones((n_batch, H.shape[2]))
    if gamma is None:
        gamma = np.ones(n_batch)
    rates = np.empty((n_batch, n_users))
    sum_rates_kernel(
        H,
        W,
        np.ascontiguousarray(mask, dtype=np.float64),
        np.ascontiguousarray(gamma, dtype=np.float64),
        float(noise_power),
        rates,
    )
    return rates


def wmmse_solve(H, p_tx, noise_power, W0, max_iter, tol, power_rtol=1e-12):
    """Run the WMMSE iteration kernel and translate its status code."""
    W, trace, n_iter, status = wmmse_kernel(
        np.ascontiguousarray(H, dtype=np.complex128),
        float(p_tx),
        float(noise_power),
        np.ascontiguousarray(W0, dtype=np.complex128),
        int(max_iter),
        float(tol),
        float(power_rtol),
    )
    if status == 1:
        raise BisectionError(
            "dual bracket not found after 200 doublings "
            f"(p_tx={p_tx}, noise={noise_power})"
        )
    if status == 2:
        raise BisectionError(
            "dual bisection stalled above the 1e-9 relative power residual "
            f"(p_tx={p_tx}, noise={noise_power})"
        )
    return W, trace, n_iter
