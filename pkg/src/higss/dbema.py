"""Latent-factor count estimation by dependent bulk eigenvalue matching.

The bulk of the statistic matrix's spectrum is matched to a Monte-Carlo
null whose row covariance follows the Marchenko-Pastur law of the SNP
correlation matrix and whose column variances follow a fitted gamma law.
The factor count is the number of data eigenvalues above a tail quantile
of the null's top eigenvalue.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import gamma as gamma_dist

from .sumstats import SummaryStats
from .util import NumericalError, ValidationError, child_rng

GOLDEN = (math.sqrt(5.0) - 1.0) / 2.0


@dataclass(frozen=True)
class MpLaw:
    """Marchenko-Pastur law with aspect ratio gamma_s = S/N.

    Carries a point mass of 1 - 1/gamma_s at zero when gamma_s > 1; the
    continuous part lives on [(1-sqrt(g))^2, (1+sqrt(g))^2] and is tabled
    on a trigonometric grid for inverse-CDF sampling.
    """

    gamma_s: float
    n_grid: int = 8193
    _grid: np.ndarray = field(init=False, repr=False)
    _cdf: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        if self.gamma_s <= 0:
            raise ValidationError("aspect ratio must be positive")
        # substitution t = lam_minus + (lam_plus - lam_minus) sin^2(theta)
        # makes the edge singularities vanish from the integrand
        theta = np.linspace(0.0, np.pi / 2.0, self.n_grid)
        span = self.lambda_plus - self.lambda_minus
        t = self.lambda_minus + span * np.sin(theta) ** 2
        sincos = np.sin(theta) * np.cos(theta)
        with np.errstate(divide="ignore", invalid="ignore"):
            integrand = span**2 * sincos**2 / (np.pi * self.gamma_s * t)
        if t[0] == 0.0:  # gamma_s == 1: finite limit 4 cos^2 / pi
            integrand[0] = 4.0 * np.cos(theta[0]) ** 2 / np.pi
        cdf = np.concatenate(
            [[0.0], np.cumsum((integrand[1:] + integrand[:-1]) / 2.0 * np.diff(theta))]
        )
        object.__setattr__(self, "_grid", t)
        object.__setattr__(self, "_cdf", cdf / cdf[-1] * self.continuous_mass)

    @property
    def lambda_minus(self) -> float:
        return (1.0 - math.sqrt(self.gamma_s)) ** 2

    @property
    def lambda_plus(self) -> float:
        return (1.0 + math.sqrt(self.gamma_s)) ** 2

    @property
    def point_mass(self) -> float:
        return max(0.0, 1.0 - 1.0 / self.gamma_s)

    @property
    def continuous_mass(self) -> float:
        return 1.0 - self.point_mass

    def pdf(self, t):
        t = np.asarray(t, dtype=float)
        out = np.zeros_like(t)
        inside = (t > self.lambda_minus) & (t < self.lambda_plus) & (t > 0)
        ti = t[inside]
        out[inside] = np.sqrt(
            (self.lambda_plus - ti) * (ti - self.lambda_minus)
        ) / (2.0 * np.pi * self.gamma_s * ti)
        return out

    def cdf(self, t):
        """Distribution function including the point mass at zero."""
        t = np.asarray(t, dtype=float)
        cont = np.interp(t, self._grid, self._cdf, left=0.0, right=self.continuous_mass)
        return np.where(t >= 0.0, self.point_mass + cont, 0.0)

    def sample(self, rng, n_draws: int) -> np.ndarray:
        """iid draws; the point mass is sampled exactly, not approximated."""
        u = rng.uniform(size=n_draws)
        out = np.zeros(n_draws)
        cont = u >= self.point_mass
        v = (u[cont] - self.point_mass)
        out[cont] = np.interp(v, self._cdf, self._grid)
        return out


def mp_sample(law: MpLaw, n_draws: int, seed: int) -> np.ndarray:
    return law.sample(child_rng(seed, "mp"), n_draws)


@dataclass(frozen=True)
class NoiseVarianceModel:
    """Gamma(theta, theta/phi) model for the phenotype noise variances."""

    theta: float
    phi: float

    def __post_init__(self):
        if self.phi <= 0 or self.theta <= 0:
            raise ValidationError("gamma parameters must be positive")


@dataclass
class DbemaResult:
    k_hat: int
    theta: float
    phi: float
    threshold: float
    data_eigs: np.ndarray  # eigenvalues of B'B/N, descending
    null_top_eigs: np.ndarray  # B samples of the null top eigenvalue
    bulk_lo: int
    bulk_hi: int
    alpha: float
    beta: float


def gram_eigenvalues(b_hat: np.ndarray, n_samples: int, n_keep: int) -> np.ndarray:
    """Top eigenvalues of B'B/N via the smaller-side Gram matrix."""
    s, m = b_hat.shape
    gram = b_hat.T @ b_hat if m <= s else b_hat @ b_hat.T
    evals = np.linalg.eigvalsh(gram)[::-1] / n_samples
    return np.clip(evals[:n_keep], 0.0, None)


def bulk_index_range(n_tilde: int, alpha: float):
    """1-based inclusive range of bulk order statistics."""
    lo = int(math.floor(alpha / 2.0 * n_tilde))
    hi = int(math.floor((1.0 - alpha / 2.0) * n_tilde))
    lo = max(lo, 1)
    if hi < lo:
        raise ValidationError("alpha leaves no bulk eigenvalues")
    return lo, hi


class _NullSpectrumDraws:
    """Common random numbers for the null spectra across theta candidates.

    Per replicate, the row-scaled Gaussian's Gram matrix W'W is computed
    once; column scales enter as an outer product, so each theta
    evaluation costs one small eigendecomposition. Row scales are applied
    as per-row multipliers; the S x S covariance is never materialized.
    """

    def __init__(self, n, s, m, law: MpLaw, seed: int, n_reps: int, tag: str):
        self.n = n
        self.m = m
        self.grams = []
        self.u_gamma = []
        for r in range(n_reps):
            rng = child_rng(seed, tag, r)
            row_scale = np.sqrt(law.sample(rng, s))
            w = rng.normal(size=(s, m)) * row_scale[:, None]
            self.grams.append(w.T @ w)
            self.u_gamma.append(rng.uniform(size=m))

    def eigenvalues(self, theta: float, phi: float, rep: int) -> np.ndarray:
        scales = phi / theta * gamma_dist.ppf(self.u_gamma[rep], a=theta)
        root = np.sqrt(scales)
        gram = self.grams[rep] * np.outer(root, root)
        return np.linalg.eigvalsh(gram)[::-1] / self.n


def reference_quantiles(
    n: int,
    s: int,
    m: int,
    thetas,
    alpha: float = 0.4,
    b_quant: int = 20,
    seed: int = 0,
):
    """Mean bulk eigenvalues of the unit-mean null, per theta candidate.

    Returns (bulk 1-based indices, table of shape (n_bulk, n_theta)).
    """
    thetas = np.atleast_1d(np.asarray(thetas, dtype=float))
    n_tilde = min(n, s, m)
    lo, hi = bulk_index_range(n_tilde, alpha)
    law = MpLaw(s / n)
    draws = _NullSpectrumDraws(n, s, m, law, seed, b_quant, "quant")
    table = np.zeros((hi - lo + 1, len(thetas)))
    for j, theta in enumerate(thetas):
        acc = np.zeros(hi - lo + 1)
        for r in range(b_quant):
            eigs = draws.eigenvalues(theta, 1.0, r)
            acc += eigs[lo - 1 : hi]
        table[:, j] = acc / b_quant
    return np.arange(lo, hi + 1), table


def _phi_hat(q: np.ndarray, s2: np.ndarray) -> float:
    return float(q @ s2 / (q @ q))


def fit_noise_gamma(
    stats: SummaryStats,
    alpha: float = 0.4,
    b_quant: int = 20,
    seed: int = 0,
    bounds: tuple = (0.1, 5.0),
    iters: int = 30,
) -> NoiseVarianceModel:
    """Fit the gamma noise-variance law to the bulk of the data spectrum.

    For a candidate theta, bulk quantiles of the unit-mean null are
    simulated with shared random numbers; the scale phi has a closed-form
    least-squares solution and theta is found by golden-section over the
    bounded interval. The shared draws make the objective deterministic
    and smooth in theta.
    """
    s, m = stats.b_hat.shape
    n = stats.n_samples
    n_tilde = min(n, s, m)
    if n_tilde < 10:
        raise ValidationError("need at least 10 non-zero eigenvalues")
    data_eigs = gram_eigenvalues(stats.b_hat, n, n_tilde)
    lo, hi = bulk_index_range(n_tilde, alpha)
    s2_bulk = data_eigs[lo - 1 : hi]
    law = MpLaw(s / n)
    draws = _NullSpectrumDraws(n, s, m, law, seed, b_quant, "quant")

    cache: dict = {}

    def objective(theta: float) -> float:
        key = round(theta, 12)
        if key not in cache:
            acc = np.zeros(hi - lo + 1)
            for r in range(b_quant):
                acc += draws.eigenvalues(theta, 1.0, r)[lo - 1 : hi]
            q = acc / b_quant
            phi = _phi_hat(q, s2_bulk)
            val = float(np.sum((s2_bulk - phi * q) ** 2))
            if not np.isfinite(val):
                raise NumericalError("non-finite dBEMA objective")
            cache[key] = (val, phi)
        return cache[key][0]

    a, b = bounds
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    for _ in range(iters):
        if objective(c) < objective(d):
            b = d
        else:
            a = c
        c = b - GOLDEN * (b - a)
        d = a + GOLDEN * (b - a)
    candidates = [a, b, c, d, bounds[0], bounds[1]]
    theta = min(candidates, key=objective)
    phi = cache[round(theta, 12)][1]
    if phi <= 0:
        raise NumericalError("fitted phi is not positive")
    return NoiseVarianceModel(theta=float(theta), phi=float(phi))


def null_top_eigenvalues(
    n: int,
    s: int,
    m: int,
    model: NoiseVarianceModel,
    n_reps: int,
    seed: int,
) -> np.ndarray:
    """Top eigenvalue of E'E/N for n_reps null draws under the fitted model."""
    law = MpLaw(s / n)
    out = np.empty(n_reps)
    for r in range(n_reps):
        rng = child_rng(seed, "null", r)
        row_scale = np.sqrt(law.sample(rng, s))
        w = rng.normal(size=(s, m)) * row_scale[:, None]
        col = np.sqrt(
            model.phi / model.theta * gamma_dist.ppf(rng.uniform(size=m), a=model.theta)
        )
        gram = (w * col[None, :]).T @ (w * col[None, :])
        out[r] = np.linalg.eigvalsh(gram)[-1] / n
    return out


def estimate_num_factors(
    stats: SummaryStats,
    alpha: float = 0.4,
    beta: float = 0.1,
    b: int = 500,
    seed: int = 0,
    b_quant: int = 20,
    theta_bounds: tuple = (0.1, 5.0),
) -> DbemaResult:
    """Count data eigenvalues above the 1-beta null top-eigenvalue quantile."""
    s, m = stats.b_hat.shape
    n = stats.n_samples
    model = fit_noise_gamma(
        stats, alpha=alpha, b_quant=b_quant, seed=seed, bounds=theta_bounds
    )
    tops = null_top_eigenvalues(n, s, m, model, b, seed)
    order = np.sort(tops)
    threshold = float(order[int(math.ceil((1.0 - beta) * b)) - 1])
    n_tilde = min(n, s, m)
    data_eigs = gram_eigenvalues(stats.b_hat, n, n_tilde)
    k_hat = int(np.sum(data_eigs > threshold))
    lo, hi = bulk_index_range(n_tilde, alpha)
    return DbemaResult(
        k_hat=k_hat,
        theta=model.theta,
        phi=model.phi,
        threshold=threshold,
        data_eigs=data_eigs,
        null_top_eigs=tops,
        bulk_lo=lo,
        bulk_hi=hi,
        alpha=alpha,
        beta=beta,
    )
