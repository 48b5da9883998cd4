"""SVD-based estimation and empirical-Bayes inference.

Given standardized statistics, a rank-K truncated SVD yields the factor
estimates (g_hat = sqrt(S) U, l_hat = V Gamma / sqrt(S)), residuals and
per-phenotype noise variances. Spike-and-slab empirical Bayes on g_hat's
columns produces local false sign rates; residual z-statistics feed a
Benjamini-Hochberg step-up for the direct effects.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.special import ndtr

from .sumstats import SummaryStats
from .util import NumericalError, ValidationError

TIE_TOL = 1e-12


@dataclass
class FactorFit:
    """Rank-k decomposition of a summary-statistic matrix."""

    k: int
    g_hat: np.ndarray  # (S, K) = sqrt(S) * U, columns sign-fixed
    l_hat: np.ndarray  # (M, K) = V Gamma / sqrt(S)
    gamma_svals: np.ndarray  # (K,) singular values of b_hat, decreasing
    delta_hat: np.ndarray  # (S, M) residuals b_hat - g_hat l_hat'
    sigma2_hat: np.ndarray  # (M,) mean squared residual per phenotype
    n: int
    s: int
    m: int
    snp_ids: tuple = ()
    phenotype_ids: tuple = ()
    eigengap_warning: bool = False


@dataclass
class SpikeSlabPosterior:
    """Entry-wise spike-and-slab posterior for one estimated matrix."""

    inclusion: np.ndarray
    mean: np.ndarray  # posterior mean of the standardized effect D^(1/2) G
    mean_raw: np.ndarray  # posterior mean of G itself
    variance: np.ndarray
    lfsr: np.ndarray
    pi: np.ndarray  # per-column slab weights
    tau2: np.ndarray  # per-column slab variances (scale of D^(1/2) G)
    degenerate: np.ndarray  # per-column flag: all-spike fit


@dataclass
class DeltaTestTable:
    """Per-entry z tests of zero direct effect with BH step-up calls."""

    z: np.ndarray
    p: np.ndarray
    reject: np.ndarray
    q: float
    n_tests: int
    excluded_phenotypes: tuple = ()


def _gram_svd(b_hat: np.ndarray, k: int):
    """Top-k SVD via the smaller-dimension Gram matrix eigendecomposition."""
    s, m = b_hat.shape
    if m <= s:
        gram = b_hat.T @ b_hat
        evals, evecs = np.linalg.eigh(gram)
        evals = evals[::-1][:k]
        v = evecs[:, ::-1][:, :k]
        svals = np.sqrt(np.clip(evals, 0.0, None))
        u = (b_hat @ v) / svals[None, :]
    else:
        gram = b_hat @ b_hat.T
        evals, evecs = np.linalg.eigh(gram)
        evals = evals[::-1][:k]
        u = evecs[:, ::-1][:, :k]
        svals = np.sqrt(np.clip(evals, 0.0, None))
        v = (b_hat.T @ u) / svals[None, :]
    return u, svals, v


def decompose(stats: SummaryStats, k: int) -> FactorFit:
    """Rank-k truncated SVD estimates with deterministic column signs.

    Each left singular vector is sign-fixed so its largest-magnitude entry
    is positive; residuals and per-phenotype variances follow exactly.
    """
    s, m = stats.b_hat.shape
    if not 1 <= k <= min(stats.n_samples, s, m):
        raise ValidationError(f"k={k} outside [1, min(N,S,M)={min(stats.n_samples, s, m)}]")
    u, svals, v = _gram_svd(stats.b_hat, k)
    if np.any(svals <= 0):
        raise NumericalError("rank deficiency below requested k")
    signs = np.sign(u[np.argmax(np.abs(u), axis=0), np.arange(k)])
    signs[signs == 0] = 1.0
    u = u * signs[None, :]
    v = v * signs[None, :]
    gap_warn = bool(np.any(np.abs(np.diff(svals)) < TIE_TOL))
    if gap_warn:
        warnings.warn("singular-value tie within 1e-12; columns not identifiable")
    g_hat = np.sqrt(s) * u
    l_hat = v * (svals / np.sqrt(s))[None, :]
    delta_hat = stats.b_hat - g_hat @ l_hat.T
    sigma2_hat = np.mean(delta_hat**2, axis=0)
    return FactorFit(
        k=k,
        g_hat=g_hat,
        l_hat=l_hat,
        gamma_svals=svals,
        delta_hat=delta_hat,
        sigma2_hat=sigma2_hat,
        n=stats.n_samples,
        s=s,
        m=m,
        snp_ids=stats.snp_ids,
        phenotype_ids=stats.phenotype_ids,
        eigengap_warning=gap_warn,
    )


# ---------------------------------------------------------------------------
# Empirical-Bayes spike and slab for g_hat columns


def _norm_logpdf(x, var):
    return -0.5 * (x * x / var + np.log(2.0 * np.pi * var))


def fit_g_prior(g_col: np.ndarray, max_iters: int = 5000, tol: float = 1e-10,
                null_penalty: float = 10.0):
    """EM for the two-group marginal (1-pi) N(0,1) + pi N(0, 1+tau2).

    The x'x scaling cancels: the slab variance of the standardized effect
    is tau2 and g_hat's sampling variance is 1. ``null_penalty`` adds that
    many pseudo-null observations so the boundary ridge on null columns
    collapses to pi=0 instead of wandering; it is negligible against S.

    Returns (pi, tau2, objective_path, degenerate_flag).
    """
    x = np.asarray(g_col, dtype=float)
    s = len(x)
    if np.allclose(x, 0.0):
        return 0.0, 0.0, [0.0], True
    pi, tau2 = 0.1, 1.0
    path = []
    for _ in range(max_iters):
        l0 = _norm_logpdf(x, 1.0)
        l1 = _norm_logpdf(x, 1.0 + tau2)
        mix = np.logaddexp(np.log1p(-pi) + l0, np.log(pi) + l1)
        obj = mix.sum() + null_penalty * np.log1p(-pi)
        path.append(obj)
        if len(path) > 1 and path[-1] - path[-2] < tol:
            break
        r = np.exp(np.log(pi) + l1 - mix)
        r_sum = r.sum()
        pi = min(max(r_sum / (s + null_penalty), 1e-12), 1.0 - 1e-12)
        if r_sum > 0:
            tau2 = max((r @ (x * x)) / r_sum - 1.0, 1e-8)
    degenerate = pi < 1e-6 or tau2 <= 1e-8
    if degenerate:
        pi = 0.0
    return float(pi), float(tau2), path, degenerate


def posterior_g(fit: FactorFit, d_diag: np.ndarray,
                priors: list | None = None) -> SpikeSlabPosterior:
    """Closed-form spike-and-slab posterior for the standardized SNP effects.

    Likelihood: g_hat_sk ~ N(D_ss^(1/2) G_sk, 1); prior on D_ss^(1/2) G_sk
    is (1-pi_k) point mass at 0 plus pi_k N(0, tau2_k). The lfsr is
    1 - max(P(>0), P(<0)); all-spike columns report lfsr = 1 (no sign
    claim is possible).
    """
    g = fit.g_hat
    s, k = g.shape
    if priors is None:
        priors = [fit_g_prior(g[:, j]) for j in range(k)]
    pi = np.array([p[0] for p in priors])
    tau2 = np.array([p[1] for p in priors])
    degenerate = np.array([bool(p[3]) for p in priors])
    inclusion = np.zeros_like(g)
    mean_u = np.zeros_like(g)
    var_u = np.zeros_like(g)
    lfsr = np.ones_like(g)
    for j in range(k):
        if pi[j] == 0.0 or tau2[j] <= 0.0:
            continue  # point mass at zero: lfsr stays 1
        l0 = _norm_logpdf(g[:, j], 1.0)
        l1 = _norm_logpdf(g[:, j], 1.0 + tau2[j])
        w = 1.0 / (1.0 + np.exp(np.log1p(-pi[j]) + l0 - np.log(pi[j]) - l1))
        shrink = tau2[j] / (1.0 + tau2[j])
        mu = g[:, j] * shrink
        sd = np.sqrt(shrink)
        p_pos = w * ndtr(mu / sd)
        p_neg = w * ndtr(-mu / sd)
        inclusion[:, j] = w
        mean_u[:, j] = w * mu
        var_u[:, j] = w * (shrink + mu**2) - (w * mu) ** 2
        lfsr[:, j] = 1.0 - np.maximum(p_pos, p_neg)
    scale = np.sqrt(np.asarray(d_diag, dtype=float))[:, None]
    return SpikeSlabPosterior(
        inclusion=inclusion,
        mean=mean_u,
        mean_raw=mean_u / scale,
        variance=var_u,
        lfsr=lfsr,
        pi=pi,
        tau2=tau2,
        degenerate=degenerate,
    )


# ---------------------------------------------------------------------------
# Direct-effect z tests with BH control


def benjamini_hochberg(p: np.ndarray, q: float) -> np.ndarray:
    """Step-up BH rejection mask at level q."""
    p = np.asarray(p, dtype=float)
    flat = p.ravel()
    n = flat.size
    order = np.argsort(flat, kind="stable")
    thresholds = q * (np.arange(1, n + 1) / n)
    below = flat[order] <= thresholds
    if not below.any():
        return np.zeros_like(p, dtype=bool)
    cutoff = flat[order][np.nonzero(below)[0][-1]]
    return p <= cutoff


def delta_tests(fit: FactorFit, q: float) -> DeltaTestTable:
    """Two-sided normal p-values for zero direct effects, BH at level q.

    Phenotypes with exactly zero residual variance carry no test and are
    excluded with a warning.
    """
    ok = fit.sigma2_hat > 0.0
    excluded = tuple(
        fit.phenotype_ids[j] if fit.phenotype_ids else str(j)
        for j in np.nonzero(~ok)[0]
    )
    if excluded:
        warnings.warn(f"phenotypes with zero residual variance excluded: {excluded}")
    z = np.full_like(fit.delta_hat, np.nan)
    z[:, ok] = fit.delta_hat[:, ok] / np.sqrt(fit.sigma2_hat[ok])[None, :]
    p = np.ones_like(z)
    p[:, ok] = 2.0 * ndtr(-np.abs(z[:, ok]))
    reject = np.zeros(z.shape, dtype=bool)
    if ok.any():
        reject[:, ok] = benjamini_hochberg(p[:, ok], q)
    return DeltaTestTable(
        z=z, p=p, reject=reject, q=q, n_tests=int(ok.sum()) * fit.s,
        excluded_phenotypes=excluded,
    )


# ---------------------------------------------------------------------------
# Alignment and loading standard errors


def procrustes_align(g_hat: np.ndarray, g_ref: np.ndarray):
    """Orthogonal Q minimizing ||g_hat Q - g_ref||_F, from the SVD of g'g_ref.

    Returns (Q, rank_deficient_flag); a rank-deficient cross-product still
    yields a valid orthogonal Q but the alignment is not unique.
    """
    if g_hat.shape != g_ref.shape:
        raise ValidationError("procrustes inputs must share a shape")
    cross = g_hat.T @ g_ref
    u, svals, vt = np.linalg.svd(cross)
    q = u @ vt
    deficient = bool(np.any(svals < TIE_TOL * max(1.0, svals[0])))
    return q, deficient


def loading_se(fit: FactorFit, include_n_term: bool = True):
    """Standard errors for the loading estimates under the row-projected law.

    Returns (se_raw, se_scaled): se_raw (M,) applies to l_hat as defined in
    the decomposition, se_scaled (M, K) to the norm-sqrt(M) columns
    sqrt(M) V used by the pathway sampler. ``include_n_term=False`` gives
    the naive 1/S-only rate that ignores the projection through the N
    samples (for contrast experiments; it is badly anticonservative).
    """
    rate = (1.0 / fit.n + 1.0 / fit.s) if include_n_term else (1.0 / fit.s)
    se_raw = np.sqrt(rate * fit.sigma2_hat)
    col_scale = np.sqrt(fit.m * fit.s) / fit.gamma_svals
    se_scaled = se_raw[:, None] * col_scale[None, :]
    return se_raw, se_scaled
