"""Hot numeric kernels with numba and pure-NumPy implementations.

The numba path is used when available; set ``HIGSS_NUMBA=0`` to force the
NumPy fallback. Both paths implement identical math; the numba versions
parallelize over phenotypes only, with sequential per-phenotype reductions,
so results do not depend on thread count.

``benchmarks/bench_kernels.py`` compares the two paths.
"""

from __future__ import annotations

import math
import os

import numpy as np
from scipy.special import ndtr

_want_numba = os.environ.get("HIGSS_NUMBA", "1") != "0"

if _want_numba:
    try:
        from numba import njit, prange

        HAVE_NUMBA = True
    except Exception:  # pragma: no cover - environment without numba
        HAVE_NUMBA = False
else:
    HAVE_NUMBA = False

LOG_2PI = math.log(2.0 * math.pi)


# ---------------------------------------------------------------------------
# Spike/slab log-likelihood table for the direct-effect sampler


def _loglik_table_numpy(delta, sigma2, pi_atoms, phi2_atoms):
    s_snps, m_phen = delta.shape
    n_pi, n_phi = len(pi_atoms), len(phi2_atoms)
    out = np.empty((m_phen, n_pi, n_phi))
    shrink = phi2_atoms / (1.0 + phi2_atoms)
    half_log1p = 0.5 * np.log1p(phi2_atoms)
    with np.errstate(divide="ignore"):
        log_pi = np.log(pi_atoms)
        log_1mpi = np.log1p(-pi_atoms)
    for m in range(m_phen):
        z2 = delta[:, m] ** 2 / sigma2[m]
        base = -0.5 * z2.sum() - 0.5 * s_snps * (LOG_2PI + np.log(sigma2[m]))
        w = 0.5 * z2[:, None] * shrink[None, :] - half_log1p[None, :]
        for i in range(n_pi):
            if pi_atoms[i] == 0.0:
                out[m, i, :] = base
            else:
                out[m, i, :] = base + np.logaddexp(log_1mpi[i], log_pi[i] + w).sum(
                    axis=0
                )
    return out


if HAVE_NUMBA:

    @njit(cache=True)
    def _logaddexp(a, b):
        if a > b:
            return a + math.log1p(math.exp(b - a))
        return b + math.log1p(math.exp(a - b))

    @njit(parallel=True, cache=True)
    def _loglik_table_numba(delta, sigma2, pi_atoms, phi2_atoms):  # pragma: no cover
        s_snps, m_phen = delta.shape
        n_pi, n_phi = len(pi_atoms), len(phi2_atoms)
        out = np.empty((m_phen, n_pi, n_phi))
        shrink = phi2_atoms / (1.0 + phi2_atoms)
        half_log1p = np.empty(n_phi)
        for j in range(n_phi):
            half_log1p[j] = 0.5 * math.log1p(phi2_atoms[j])
        for m in prange(m_phen):
            z2 = np.empty(s_snps)
            tot = 0.0
            for s in range(s_snps):
                z2[s] = delta[s, m] * delta[s, m] / sigma2[m]
                tot += z2[s]
            base = -0.5 * tot - 0.5 * s_snps * (LOG_2PI + math.log(sigma2[m]))
            w = np.empty((s_snps, n_phi))
            for s in range(s_snps):
                for j in range(n_phi):
                    w[s, j] = 0.5 * z2[s] * shrink[j] - half_log1p[j]
            for i in range(n_pi):
                if pi_atoms[i] == 0.0:
                    for j in range(n_phi):
                        out[m, i, j] = base
                else:
                    lp = math.log(pi_atoms[i])
                    l1mp = math.log1p(-pi_atoms[i])
                    for j in range(n_phi):
                        acc = 0.0
                        for s in range(s_snps):
                            acc += _logaddexp(l1mp, lp + w[s, j])
                        out[m, i, j] = base + acc
        return out


def delta_loglik_table(
    delta: np.ndarray,
    sigma2: np.ndarray,
    pi_atoms: np.ndarray,
    phi2_atoms: np.ndarray,
) -> np.ndarray:
    """log P(residual column | pi, phi2) for every phenotype x atom pair.

    Returns an (M, n_pi, n_phi) table; the pi=0 rows are constant in phi2.
    """
    delta = np.ascontiguousarray(delta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    pi_atoms = np.asarray(pi_atoms, dtype=float)
    phi2_atoms = np.asarray(phi2_atoms, dtype=float)
    if HAVE_NUMBA:
        return _loglik_table_numba(delta, sigma2, pi_atoms, phi2_atoms)
    return _loglik_table_numpy(delta, sigma2, pi_atoms, phi2_atoms)


# ---------------------------------------------------------------------------
# Streaming accumulator for the entry-wise direct-effect posterior


def _accumulate_numpy(delta, sigma2, pi_m, phi2, acc):
    incl, mean, ppos, pneg = acc
    active = np.where(pi_m > 0.0)[0]
    if active.size == 0:
        return
    d = delta[:, active]
    s2 = sigma2[active][None, :]
    pi = pi_m[active][None, :]
    shrink = phi2 / (1.0 + phi2)
    log_odds = (
        np.log(pi)
        - np.log1p(-pi)
        - 0.5 * math.log1p(phi2)
        + 0.5 * d * d / s2 * shrink
    )
    w = 1.0 / (1.0 + np.exp(-log_odds))
    mu = d * shrink
    sd = np.sqrt(s2 * shrink)
    z = mu / sd
    incl[:, active] += w
    mean[:, active] += w * mu
    ppos[:, active] += w * ndtr(z)
    pneg[:, active] += w * ndtr(-z)


if HAVE_NUMBA:

    @njit(parallel=True, cache=True)
    def _accumulate_numba(delta, sigma2, pi_m, phi2, incl, mean, ppos, pneg):  # pragma: no cover
        s_snps, m_phen = delta.shape
        shrink = phi2 / (1.0 + phi2)
        half_log1p = 0.5 * math.log1p(phi2)
        inv_sqrt2 = 1.0 / math.sqrt(2.0)
        for m in prange(m_phen):
            pi = pi_m[m]
            if pi <= 0.0:
                continue
            base = math.log(pi) - math.log1p(-pi) - half_log1p
            sd = math.sqrt(sigma2[m] * shrink)
            for s in range(s_snps):
                d = delta[s, m]
                lo = base + 0.5 * d * d / sigma2[m] * shrink
                w = 1.0 / (1.0 + math.exp(-lo))
                mu = d * shrink
                z = mu / sd
                phi_pos = 0.5 * (1.0 + math.erf(z * inv_sqrt2))
                incl[s, m] += w
                mean[s, m] += w * mu
                ppos[s, m] += w * phi_pos
                pneg[s, m] += w * (1.0 - phi_pos)


def accumulate_delta_posterior(
    delta: np.ndarray,
    sigma2: np.ndarray,
    pi_m: np.ndarray,
    phi2: float,
    acc: tuple,
) -> None:
    """Add one hyperparameter sample's entry-wise posterior summaries to acc.

    acc is (inclusion, mean, p_positive, p_negative), each (S, M), updated
    in place; storage stays O(S*M) regardless of chain length.
    """
    delta = np.ascontiguousarray(delta, dtype=float)
    sigma2 = np.asarray(sigma2, dtype=float)
    pi_m = np.asarray(pi_m, dtype=float)
    if HAVE_NUMBA:
        incl, mean, ppos, pneg = acc
        _accumulate_numba(delta, sigma2, pi_m, float(phi2), incl, mean, ppos, pneg)
    else:
        _accumulate_numpy(delta, sigma2, pi_m, float(phi2), acc)
