"""Ground-truth simulation: genotypes, pathway archives, loadings, datasets.

The generative process produces everything the estimators are later scored
against: binomial genotypes with uniform allele frequencies, a
Poisson-grown pathway archive, loading columns drawn from the Chinese
restaurant franchise with spike dishes and uniform outliers, sparse direct
effects, and marginal-regression summary statistics with an explicit
intercept (equivalently projection onto the complement of the ones
vector).
"""

from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .loadings_hdp import BaseMeasureH
from .sumstats import (
    PathwayHierarchy,
    SummaryStats,
    read_matrix,
    write_matrix,
    write_pathways,
    write_summary_stats,
    write_vector,
)
from .util import NumericalError, ValidationError, child_rng


@dataclass
class LoadingSimParams:
    """Generative hyperparameters for loading columns."""

    global_shrinkage: float = 0.2  # horseshoe tau multiplying the slab scales
    pi_out: float = 0.01
    pi_00: float = 0.1
    pi0_beta: tuple = (2.0, 1.0)
    ig_shape: float = 2.0
    ig_scale: float = 1.0
    final_scale: float = 0.4
    outlier_sd_mult: float = 2.0
    outlier_bound: float = 8.0
    max_outlier_rejects: int = 10_000

    def __post_init__(self):
        for r in (self.pi_out, self.pi_00):
            if not 0.0 <= r <= 1.0:
                raise ValidationError("rates must lie in [0,1]")
        if self.ig_shape <= 0 or self.ig_scale <= 0:
            raise ValidationError("inverse-gamma shape/scale must be positive")


@dataclass
class SimConfig:
    """Full dataset simulation settings (defaults reproduce the benchmark scale)."""

    n: int = 500
    s: int = 5000
    m: int = 257
    k: int = 10
    pi_g: float = 1e-3
    g_var_numerator: float = 2.0  # slab variance of G entries is this / n
    pi_delta_zero: float = 0.3
    pi_delta_upper: float = 0.01
    pi_delta_mean: float = 0.005
    tau_delta_scale: float = 5.0  # slab sd of the standardized direct effect
    sigma2_shape: float = 1.0
    sigma2_scale: float = 1.0
    lambda_max: float = 3.35
    lambda_min: float = 0.25
    n_super: int = 3
    loading: LoadingSimParams = field(default_factory=LoadingSimParams)


@dataclass
class TruthSet:
    """Everything the acceptance suite scores against."""

    genotypes: np.ndarray  # (N, S) int8 in {0,1,2}
    allele_freqs: np.ndarray
    g: np.ndarray  # (S, K)
    g_tilde: np.ndarray  # (S, K) = D^(-1/2) Xc' C, the alignment reference
    l: np.ndarray  # (M, K)
    delta: np.ndarray  # (S, M)
    sigma2: np.ndarray  # (M,)
    factors: np.ndarray  # (N, K)
    spike_mask: np.ndarray  # (n_sub, K) bool
    outlier_mask: np.ndarray  # (M, K) bool
    pi_delta: np.ndarray  # (M,)
    tau2_delta: np.ndarray  # (S,)
    hierarchy: PathwayHierarchy
    lambda_realized: np.ndarray  # (K,) mean squared loading per column


def simulate_genotypes(n: int, s: int, rng) -> tuple:
    """Binomial(2, f_s) genotypes with f_s ~ U[0.05, 0.5] per SNP.

    Constant columns (which carry no regression information) have their
    frequency redrawn; at these sizes this is effectively a no-op.
    """
    if n < 1 or s < 1:
        raise ValidationError("n and s must be >= 1")
    f = rng.uniform(0.05, 0.5, size=s)
    x = rng.binomial(2, f[None, :], size=(n, s)).astype(np.int8)
    for _ in range(100):
        degenerate = np.nonzero(np.all(x == x[0, :], axis=0))[0]
        if degenerate.size == 0:
            break
        f[degenerate] = rng.uniform(0.05, 0.5, size=degenerate.size)
        x[:, degenerate] = rng.binomial(
            2, f[None, degenerate], size=(n, degenerate.size)
        ).astype(np.int8)
    else:
        raise NumericalError("could not draw non-degenerate genotype columns")
    return x, f


def simulate_pathway_structure(
    rng,
    n_super: int = 3,
    target_total: int | None = 257,
    subs_per_super_mean: float = 15.0,
    metabolites_per_sub_mean: float = 5.7,
    max_attempts: int = 200_000,
) -> PathwayHierarchy:
    """Poisson-grown archive of super/sub-pathways, resampled to the target.

    Counts and sizes are Poisson draws truncated to >= 1; draws repeat until
    the total metabolite count matches ``target_total`` exactly.
    """

    def truncated_poisson(lam, size):
        out = rng.poisson(lam, size=size)
        while np.any(out == 0):
            zero = out == 0
            out[zero] = rng.poisson(lam, size=int(zero.sum()))
        return out

    for _ in range(max_attempts):
        n_subs = truncated_poisson(subs_per_super_mean, n_super)
        sizes = [truncated_poisson(metabolites_per_sub_mean, nb) for nb in n_subs]
        total = int(sum(int(sz.sum()) for sz in sizes))
        if target_total is None or total == target_total:
            break
    else:
        raise NumericalError(
            f"could not hit {target_total} metabolites in {max_attempts} draws"
        )
    assignments = {}
    met = 0
    width = len(str(total))
    for p in range(n_super):
        sup = f"SP{p + 1}"
        for b in range(int(n_subs[p])):
            sub = f"SP{p + 1}.SUB{b + 1:02d}"
            for _ in range(int(sizes[p][b])):
                met += 1
                assignments[f"M{met:0{width}d}"] = (sup, sub)
    return PathwayHierarchy(assignments)


def _draw_dish(rng, base: BaseMeasureH, pi_00: float, pi_0: float, tau: float):
    """One draw from the base measure: (mu, phi2, is_spike)."""
    if rng.uniform() < pi_00:
        return 0.0, 0.0, True
    phi2 = base.phi2_atoms[rng.choice(len(base.phi2_atoms), p=base.phi2_weights)]
    if rng.uniform() < pi_0:
        return 0.0, float(phi2), False
    v = rng.choice(len(base.mu_scales), p=base.mu_weights)
    mu = rng.normal(0.0, tau * base.mu_scales[v])
    return float(mu), float(phi2), False


def simulate_loadings_hdp(
    hierarchy: PathwayHierarchy,
    k_factors: int,
    params: LoadingSimParams,
    rng,
    lambda_targets=None,
):
    """Draw loading columns from the CRF construction with tracked truth.

    Per column: concentrations gamma, alpha_0 ~ Gamma(1,1) and the
    mean-spike weight pi_0 ~ Beta(a,b) are drawn fresh; sub-pathways are
    seated through the franchise; outliers are rejection-sampled beyond
    ``outlier_sd_mult`` standard deviations of their dish but inside the
    (-bound, bound) box. All entries are finally multiplied by
    ``final_scale``. If ``lambda_targets`` is given, columns are sorted by
    realized mean square and rescaled to the targets before that
    multiplier.

    Returns (L, spike_mask over sub-pathways x factors, outlier_mask over
    metabolites x factors).
    """
    base = BaseMeasureH(params.ig_shape, params.ig_scale)
    groups = hierarchy.column_groups(
        [p for mem in hierarchy.members for p in mem]
    )
    restaurant = hierarchy.restaurant_of_sub()
    m_total = hierarchy.n_phenotypes
    n_sub = hierarchy.n_sub
    l_mat = np.zeros((m_total, k_factors))
    spike_mask = np.zeros((n_sub, k_factors), dtype=bool)
    outlier_mask = np.zeros((m_total, k_factors), dtype=bool)

    for k in range(k_factors):
        pi_0 = rng.beta(*params.pi0_beta)
        gamma = rng.gamma(1.0, 1.0)
        alpha0 = rng.gamma(1.0, 1.0)
        dishes = []  # (mu, phi2, is_spike)
        dish_counts = []  # tables serving each dish, across restaurants
        sub_dish = np.zeros(n_sub, dtype=int)
        for p in range(hierarchy.n_super):
            tables = []  # dish index per table
            table_counts = []
            for b in np.nonzero(restaurant == p)[0]:
                n_seated = sum(table_counts)
                probs = np.array(table_counts + [alpha0], dtype=float)
                choice = rng.choice(len(probs), p=probs / (n_seated + alpha0))
                if choice < len(tables):
                    table_counts[choice] += 1
                    sub_dish[b] = tables[choice]
                    continue
                # new table: pick its dish from the franchise menu
                menu = np.array(dish_counts + [gamma], dtype=float)
                pick = rng.choice(len(menu), p=menu / menu.sum())
                if pick == len(dishes):
                    dishes.append(
                        _draw_dish(rng, base, params.pi_00, pi_0,
                                   params.global_shrinkage)
                    )
                    dish_counts.append(0)
                dish_counts[pick] += 1
                tables.append(pick)
                table_counts.append(1)
                sub_dish[b] = pick
        for b in range(n_sub):
            mu, phi2, is_spike = dishes[sub_dish[b]]
            spike_mask[b, k] = is_spike
            sd = np.sqrt(phi2)
            for col in groups[b]:
                if rng.uniform() < params.pi_out:
                    bound = params.outlier_bound
                    for _ in range(params.max_outlier_rejects):
                        draw = rng.uniform(-bound, bound)
                        if abs(draw - mu) > params.outlier_sd_mult * sd:
                            break
                    else:
                        raise NumericalError(
                            f"outlier placement failed for dish mu={mu}, sd={sd}"
                        )
                    l_mat[col, k] = draw
                    outlier_mask[col, k] = True
                else:
                    l_mat[col, k] = mu + sd * rng.normal() if phi2 > 0 else mu
    if lambda_targets is not None:
        targets = np.asarray(lambda_targets, dtype=float)
        if targets.shape != (k_factors,):
            raise ValidationError("lambda_targets must have one entry per factor")
        realized = np.mean(l_mat**2, axis=0)
        order = np.argsort(-realized)
        l_mat = l_mat[:, order]
        spike_mask = spike_mask[:, order]
        outlier_mask = outlier_mask[:, order]
        realized = realized[order]
        with np.errstate(divide="ignore", invalid="ignore"):
            scale = np.where(realized > 1e-12, np.sqrt(targets / realized), 1.0)
        l_mat = l_mat * scale[None, :]
    return l_mat * params.final_scale, spike_mask, outlier_mask


def truncated_exponential_sampler(upper: float, mean: float):
    """Sampler for TruncExp(0, upper) with the given mean, rate solved numerically.

    A mean of exactly upper/2 is the rate->0 limit, i.e. uniform on (0, upper).
    """
    if not 0.0 < mean < upper:
        raise ValidationError("truncated-exponential mean must lie in (0, upper)")

    def trunc_mean(rate):
        z = rate * upper
        return upper * (1.0 / z - np.exp(-z) / (1.0 - np.exp(-z)))

    if mean >= upper / 2.0 - 1e-12 * upper:
        return lambda rng, size: rng.uniform(0.0, upper, size=size)
    rate = brentq(lambda r: trunc_mean(r) - mean, 1e-9 / upper, 1e4 / upper)

    def sample(rng, size):
        u = rng.uniform(size=size)
        return -np.log1p(-u * (1.0 - np.exp(-rate * upper))) / rate

    return sample


def simulate_dataset(config: SimConfig, seed: int):
    """Generate a full (TruthSet, SummaryStats) pair.

    Summary statistics are the slopes of each phenotype on each SNP with an
    intercept, scaled by the centered genotype norm; the same seed always
    yields the same bits.
    """
    c = config
    x, f = simulate_genotypes(c.n, c.s, child_rng(seed, "genotypes"))
    hierarchy = simulate_pathway_structure(
        child_rng(seed, "pathways"), n_super=c.n_super, target_total=c.m
    )
    if c.k > 1:
        ladder = np.geomspace(c.lambda_max, c.lambda_min, c.k)
    else:
        ladder = np.array([c.lambda_max])
    l_mat, spike_mask, outlier_mask = simulate_loadings_hdp(
        hierarchy, c.k, c.loading, child_rng(seed, "loadings"), lambda_targets=ladder
    )

    rng_g = child_rng(seed, "g")
    g = np.where(
        rng_g.uniform(size=(c.s, c.k)) < c.pi_g,
        rng_g.normal(0.0, np.sqrt(c.g_var_numerator / c.n), size=(c.s, c.k)),
        0.0,
    )

    xc = x.astype(float)
    xc -= xc.mean(axis=0, keepdims=True)
    d_diag = np.einsum("ns,ns->s", xc, xc)
    tau2_delta = c.tau_delta_scale**2 / d_diag

    rng_delta = child_rng(seed, "delta")
    pi_delta = np.zeros(c.m)
    nonzero = rng_delta.uniform(size=c.m) >= c.pi_delta_zero
    texp = truncated_exponential_sampler(c.pi_delta_upper, c.pi_delta_mean)
    pi_delta[nonzero] = texp(rng_delta, int(nonzero.sum()))
    delta = np.zeros((c.s, c.m))
    mask = rng_delta.uniform(size=(c.s, c.m)) < pi_delta[None, :]
    rows = np.nonzero(mask)[0]
    delta[mask] = rng_delta.normal(size=rows.size) * np.sqrt(tau2_delta[rows])

    rng_noise = child_rng(seed, "noise")
    sigma2 = rng_noise.gamma(c.sigma2_shape, c.sigma2_scale, size=c.m)
    factors = x @ g + rng_noise.normal(size=(c.n, c.k))
    y = factors @ l_mat.T + x @ delta
    y += rng_noise.normal(size=(c.n, c.m)) * np.sqrt(sigma2)[None, :]

    scale = 1.0 / np.sqrt(d_diag)
    b_hat = (xc.T @ y) * scale[:, None]
    g_tilde = (xc.T @ factors) * scale[:, None]

    width = len(str(c.s))
    snp_ids = tuple(f"s{i + 1:0{width}d}" for i in range(c.s))
    phen_ids = tuple(p for mem in hierarchy.members for p in mem)
    stats = SummaryStats(b_hat, d_diag, c.n, snp_ids, phen_ids)
    truth = TruthSet(
        genotypes=x,
        allele_freqs=f,
        g=g,
        g_tilde=g_tilde,
        l=l_mat,
        delta=delta,
        sigma2=sigma2,
        factors=factors,
        spike_mask=spike_mask,
        outlier_mask=outlier_mask,
        pi_delta=pi_delta,
        tau2_delta=tau2_delta,
        hierarchy=hierarchy,
        lambda_realized=np.mean(l_mat**2, axis=0),
    )
    return truth, stats


def write_truth(dir_path: str, truth: TruthSet, stats: SummaryStats):
    """Persist the score-relevant truth next to the summary statistics."""
    os.makedirs(dir_path, exist_ok=True)
    ks = [f"k{j + 1}" for j in range(truth.l.shape[1])]
    phen = stats.phenotype_ids
    snps = stats.snp_ids
    write_matrix(os.path.join(dir_path, "true_l.tsv"), truth.l, phen, ks)
    write_matrix(os.path.join(dir_path, "true_g.tsv"), truth.g, snps, ks)
    write_matrix(os.path.join(dir_path, "true_g_tilde.tsv"), truth.g_tilde, snps, ks)
    write_matrix(os.path.join(dir_path, "true_delta.tsv"), truth.delta, snps, phen)
    write_vector(os.path.join(dir_path, "true_sigma2.tsv"), truth.sigma2, phen, "sigma2")
    write_vector(os.path.join(dir_path, "true_pi_delta.tsv"), truth.pi_delta, phen, "pi")
    sub_names = [f"{sup}|{sub}" for sup, sub in truth.hierarchy.sub_ids]
    write_matrix(
        os.path.join(dir_path, "true_spikes.tsv"),
        truth.spike_mask.astype(float), sub_names, ks,
    )
    write_matrix(
        os.path.join(dir_path, "true_outliers.tsv"),
        truth.outlier_mask.astype(float), phen, ks,
    )


def write_simulated(dir_path: str, truth: TruthSet, stats: SummaryStats):
    write_summary_stats(dir_path, stats)
    write_pathways(os.path.join(dir_path, "pathways.tsv"), truth.hierarchy)
    write_truth(dir_path, truth, stats)


def load_truth_matrices(dir_path: str) -> dict:
    out = {}
    for stem in ("true_l", "true_g", "true_g_tilde", "true_delta",
                 "true_spikes", "true_outliers"):
        path = os.path.join(dir_path, f"{stem}.tsv")
        if os.path.exists(path):
            out[stem] = read_matrix(path)[0]
    return out
