"""Stage orchestration, scoring against simulated truth, and replication.

Each stage persists its artifacts plus a manifest and is skipped on rerun
when that manifest already exists, so interrupted pipelines resume from
the last completed stage. Stage artifacts are the only inter-stage
interface. Replicates run on independent child seeds and their aggregate
tables equal the concatenation of single-replicate tables.
"""

from __future__ import annotations

import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field

import numpy as np

from . import dbema, direct_hdp, inference, loadings_hdp, simulate
from .sumstats import (
    PathwayHierarchy,
    RunConfig,
    SummaryStats,
    load_pathways,
    load_summary_stats_dir,
    read_manifest,
    read_matrix,
    read_vector,
    write_manifest,
    write_matrix,
    write_vector,
)
from .util import ValidationError, child_seed, format_float


@dataclass
class PipelineReport:
    timings: dict = field(default_factory=dict)
    k_hat: int | None = None
    verdicts: dict = field(default_factory=dict)
    calibration: dict = field(default_factory=dict)


def _stage_done(out_dir: str, stage: str) -> bool:
    return os.path.exists(os.path.join(out_dir, stage, "manifest.txt"))


def _config_entries(config: RunConfig, stage: str) -> dict:
    entries = {f"config.{k}": v for k, v in vars(config).items()}
    entries["stage"] = stage
    return entries


# ---------------------------------------------------------------------------
# Stages


def stage_simulate(out_dir: str, sim_config: simulate.SimConfig, config: RunConfig):
    sim_dir = os.path.join(out_dir, "sim")
    if _stage_done(out_dir, "sim"):
        return sim_dir
    truth, stats = simulate.simulate_dataset(sim_config, config.seed)
    simulate.write_simulated(sim_dir, truth, stats)
    write_manifest(sim_dir, _config_entries(config, "sim"))
    return sim_dir


def _load_inputs(out_dir: str):
    sim_dir = os.path.join(out_dir, "sim")
    stats = load_summary_stats_dir(sim_dir)
    pathways_path = os.path.join(sim_dir, "pathways.tsv")
    hierarchy = load_pathways(pathways_path) if os.path.exists(pathways_path) else None
    return stats, hierarchy


def import_inputs(out_dir: str, stats: SummaryStats, hierarchy=None):
    """Stage external inputs into the pipeline's sim/ slot."""
    sim_dir = os.path.join(out_dir, "sim")
    if _stage_done(out_dir, "sim"):
        return sim_dir
    os.makedirs(sim_dir, exist_ok=True)
    from .sumstats import write_pathways, write_summary_stats

    write_summary_stats(sim_dir, stats)
    if hierarchy is not None:
        write_pathways(os.path.join(sim_dir, "pathways.tsv"), hierarchy)
    write_manifest(sim_dir, {"stage": "sim", "source": "imported"})
    return sim_dir


def stage_estimate_k(out_dir: str, config: RunConfig) -> int:
    stage_dir = os.path.join(out_dir, "estimate_k")
    if _stage_done(out_dir, "estimate_k"):
        return int(read_manifest(stage_dir)["k_hat"])
    stats, _ = _load_inputs(out_dir)
    result = dbema.estimate_num_factors(
        stats,
        alpha=config.dbema_alpha,
        beta=config.dbema_beta,
        b=config.dbema_b,
        seed=child_seed(config.seed, "estimate-k"),
        b_quant=config.dbema_b_quant,
        theta_bounds=config.dbema_theta_bounds,
    )
    os.makedirs(stage_dir, exist_ok=True)
    top = result.data_eigs[:50]
    write_vector(
        os.path.join(stage_dir, "data_eigenvalues.tsv"),
        top, [f"eig{i + 1}" for i in range(len(top))], "value",
    )
    null_sorted = np.sort(result.null_top_eigs)
    write_vector(
        os.path.join(stage_dir, "null_top_eigenvalues.tsv"),
        null_sorted, [f"b{i + 1}" for i in range(len(null_sorted))], "value",
    )
    entries = _config_entries(config, "estimate_k")
    entries.update(
        k_hat=result.k_hat,
        theta=format_float(result.theta),
        phi=format_float(result.phi),
        threshold=format_float(result.threshold),
        bulk_lo=result.bulk_lo,
        bulk_hi=result.bulk_hi,
    )
    write_manifest(stage_dir, entries)
    return result.k_hat


def stage_fit(out_dir: str, config: RunConfig, k: int) -> None:
    stage_dir = os.path.join(out_dir, "fit")
    if _stage_done(out_dir, "fit"):
        return
    stats, _ = _load_inputs(out_dir)
    fit = inference.decompose(stats, k)
    priors = [inference.fit_g_prior(fit.g_hat[:, j]) for j in range(k)]
    posterior = inference.posterior_g(fit, stats.d_diag, priors)
    tests = inference.delta_tests(fit, config.fdr_q)
    os.makedirs(stage_dir, exist_ok=True)
    ks = [f"k{j + 1}" for j in range(k)]
    write_matrix(os.path.join(stage_dir, "g_hat.tsv"), fit.g_hat, stats.snp_ids, ks)
    write_matrix(
        os.path.join(stage_dir, "l_hat.tsv"), fit.l_hat, stats.phenotype_ids, ks
    )
    write_matrix(
        os.path.join(stage_dir, "delta_hat.tsv"),
        fit.delta_hat, stats.snp_ids, stats.phenotype_ids,
    )
    write_vector(
        os.path.join(stage_dir, "sigma2_hat.tsv"),
        fit.sigma2_hat, stats.phenotype_ids, "sigma2",
    )
    write_vector(
        os.path.join(stage_dir, "gamma_svals.tsv"), fit.gamma_svals, ks, "gamma"
    )
    write_matrix(
        os.path.join(stage_dir, "g_lfsr.tsv"), posterior.lfsr, stats.snp_ids, ks
    )
    write_matrix(
        os.path.join(stage_dir, "g_inclusion.tsv"),
        posterior.inclusion, stats.snp_ids, ks,
    )
    write_matrix(
        os.path.join(stage_dir, "g_posterior_mean.tsv"),
        posterior.mean, stats.snp_ids, ks,
    )
    write_matrix(
        os.path.join(stage_dir, "g_priors.tsv"),
        np.column_stack([posterior.pi, posterior.tau2]), ks, ["pi", "tau2"],
    )
    write_matrix(
        os.path.join(stage_dir, "delta_z.tsv"),
        tests.z, stats.snp_ids, stats.phenotype_ids,
    )
    write_matrix(
        os.path.join(stage_dir, "delta_p.tsv"),
        tests.p, stats.snp_ids, stats.phenotype_ids,
    )
    write_matrix(
        os.path.join(stage_dir, "delta_reject.tsv"),
        tests.reject.astype(float), stats.snp_ids, stats.phenotype_ids,
    )
    entries = _config_entries(config, "fit")
    entries.update(k=k, n=stats.n_samples, q=config.fdr_q)
    write_manifest(stage_dir, entries)


def _load_fit(out_dir: str):
    stage_dir = os.path.join(out_dir, "fit")
    g_hat, snp_ids, ks = read_matrix(os.path.join(stage_dir, "g_hat.tsv"))
    l_hat, phen_ids, _ = read_matrix(os.path.join(stage_dir, "l_hat.tsv"))
    delta_hat, _, _ = read_matrix(os.path.join(stage_dir, "delta_hat.tsv"))
    sigma2, _ = read_vector(os.path.join(stage_dir, "sigma2_hat.tsv"))
    svals, _ = read_vector(os.path.join(stage_dir, "gamma_svals.tsv"))
    n = int(read_manifest(stage_dir)["n"])
    return inference.FactorFit(
        k=len(ks),
        g_hat=g_hat,
        l_hat=l_hat,
        gamma_svals=svals,
        delta_hat=delta_hat,
        sigma2_hat=sigma2,
        n=n,
        s=g_hat.shape[0],
        m=l_hat.shape[0],
        snp_ids=tuple(snp_ids),
        phenotype_ids=tuple(phen_ids),
    )


def scaled_loading_column(fit: inference.FactorFit, k: int):
    """Norm-sqrt(M) loading column and its standard errors for the sampler."""
    _, se_scaled = inference.loading_se(fit)
    col_scale = np.sqrt(fit.m * fit.s) / fit.gamma_svals[k]
    return fit.l_hat[:, k] * col_scale, se_scaled[:, k]


def stage_loadings_hdp(out_dir: str, config: RunConfig, factors=None) -> None:
    stage_dir = os.path.join(out_dir, "loadings_hdp")
    if _stage_done(out_dir, "loadings_hdp"):
        return
    _, hierarchy = _load_inputs(out_dir)
    if hierarchy is None:
        raise ValidationError("loadings-hdp requires a pathway file")
    fit = _load_fit(out_dir)
    base = loadings_hdp.BaseMeasureH()
    os.makedirs(stage_dir, exist_ok=True)
    factors = range(fit.k) if factors is None else factors
    sub_names = [f"{sup}|{sub}" for sup, sub in hierarchy.sub_ids]
    phen_order = [p for mem in hierarchy.members for p in mem]
    for k in factors:
        x, se = scaled_loading_column(fit, k)
        # the sampler indexes metabolites in hierarchy order
        order = [fit.phenotype_ids.index(p) for p in phen_order]
        state = loadings_hdp.init_chain(
            x[order], se[order], hierarchy, base,
            child_seed(config.seed, "loadings", k),
        )
        post = loadings_hdp.run_chain(
            state, config.iterations, config.burn_in, config.thinning
        )
        clusters = loadings_hdp.map_clustering(post)
        scores = loadings_hdp.cluster_scores(post, clusters)
        spikes, outliers = loadings_hdp.call_spikes_outliers(post)
        tag = f"factor_{k + 1}"
        rows = []
        for name in sorted(scores):
            sc = scores[name]
            rows.append([
                float(name), sc["size"], sc["enrichment"],
                sc["sign_score"], sc["signed_score"],
            ])
        write_matrix(
            os.path.join(stage_dir, f"{tag}_clusters.tsv"),
            np.array(rows),
            [f"c{int(r[0])}" for r in rows],
            ["cluster", "size", "enrichment", "sign_score", "signed_score"],
        )
        write_matrix(
            os.path.join(stage_dir, f"{tag}_subpathways.tsv"),
            np.column_stack([
                post.spike_prob, post.e_mu2_phi2, post.map_partition.astype(float),
            ]),
            sub_names,
            ["spike_prob", "e_mu2_phi2", "map_cluster"],
        )
        write_vector(
            os.path.join(stage_dir, f"{tag}_outlier_prob.tsv"),
            post.outlier_prob, phen_order, "outlier_prob",
        )
        write_matrix(
            os.path.join(stage_dir, f"{tag}_partition_samples.tsv"),
            np.column_stack([post.partitions.astype(float), post.log_joints]),
            [f"sample{i + 1}" for i in range(post.n_samples)],
            sub_names + ["log_joint"],
        )
        calls = np.zeros((len(sub_names), 1))
        calls[spikes, 0] = 1.0
        write_matrix(
            os.path.join(stage_dir, f"{tag}_spike_calls.tsv"),
            calls, sub_names, ["spike_call"],
        )
    entries = _config_entries(config, "loadings_hdp")
    entries["factors"] = ",".join(str(k + 1) for k in factors)
    entries["loading_scale"] = "column norm sqrt(M)"
    write_manifest(stage_dir, entries)


def stage_direct_hdp(out_dir: str, config: RunConfig) -> None:
    stage_dir = os.path.join(out_dir, "direct_hdp")
    if _stage_done(out_dir, "direct_hdp"):
        return
    stats, hierarchy = _load_inputs(out_dir)
    if hierarchy is None:
        raise ValidationError("direct-hdp requires a pathway file")
    fit = _load_fit(out_dir)
    pi_hat, phi2_hat, degen = direct_hdp.anchor_mle(fit.delta_hat, fit.sigma2_hat)
    grids = direct_hdp.build_grids(pi_hat, phi2_hat, fit.s)
    groups = hierarchy.column_groups(fit.phenotype_ids)
    table = direct_hdp.precompute_loglik(fit.delta_hat, fit.sigma2_hat, grids)
    state = direct_hdp.init_direct_chain(
        table, groups, grids, child_seed(config.seed, "direct")
    )
    post = direct_hdp.run_direct_chain(
        state, fit.delta_hat, fit.sigma2_hat,
        config.iterations, config.burn_in, config.thinning,
    )
    os.makedirs(stage_dir, exist_ok=True)
    write_matrix(
        os.path.join(stage_dir, "delta_inclusion.tsv"),
        post.inclusion, fit.snp_ids, fit.phenotype_ids,
    )
    write_matrix(
        os.path.join(stage_dir, "delta_lfsr.tsv"),
        post.lfsr, fit.snp_ids, fit.phenotype_ids,
    )
    write_matrix(
        os.path.join(stage_dir, "delta_posterior_mean.tsv"),
        post.mean, fit.snp_ids, fit.phenotype_ids,
    )
    sub_names = [f"{sup}|{sub}" for sup, sub in hierarchy.sub_ids]
    write_vector(os.path.join(stage_dir, "dhs.tsv"), post.dhs, sub_names, "dhs")
    write_vector(
        os.path.join(stage_dir, "grid_pi.tsv"),
        grids.pi_atoms,
        [f"atom{i}" for i in range(len(grids.pi_atoms))],
        "pi",
    )
    write_vector(
        os.path.join(stage_dir, "grid_phi2.tsv"),
        grids.phi2_atoms,
        [f"atom{i}" for i in range(len(grids.phi2_atoms))],
        "phi2",
    )
    entries = _config_entries(config, "direct_hdp")
    entries.update(
        anchor_phi2=format_float(phi2_hat),
        degenerate_anchor=str(degen or grids.degenerate_anchor),
        n_samples=post.n_samples,
    )
    write_manifest(stage_dir, entries)


# ---------------------------------------------------------------------------
# Scoring against truth


def signed_column_match(q: np.ndarray):
    """Round a Procrustes rotation to a signed column permutation.

    Estimate column k matches truth column perm[k] with the given sign;
    falls back to None when the rounding is not a permutation.
    """
    perm = np.argmax(np.abs(q), axis=1)
    if len(set(perm.tolist())) != q.shape[0]:
        return None, None
    signs = np.sign(q[np.arange(q.shape[0]), perm])
    return perm, signs


def lfsr_calibration_rows(
    posterior: inference.SpikeSlabPosterior,
    g_hat: np.ndarray,
    g_tilde: np.ndarray,
    g_true: np.ndarray,
    n_bins: int = 10,
):
    """Per-bin sign-call counts against the aligned truth.

    Returns rows (bin_lo, bin_hi, n_calls, n_wrong); pooled false sign
    rates are count ratios, so aggregation across replicates is additive.
    """
    q, _ = inference.procrustes_align(g_hat, g_tilde)
    perm, signs = signed_column_match(q)
    if perm is None:
        aligned = g_true @ q.T
    else:
        aligned = g_true[:, perm] * signs[None, :]
    claimed = np.where(posterior.mean > 0, 1, np.where(posterior.mean < 0, -1, 0))
    true_sign = np.sign(aligned)
    lfsr = posterior.lfsr
    edges = np.linspace(0.0, 0.5, n_bins + 1)
    rows = []
    callable_mask = lfsr < 0.5
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = callable_mask & (lfsr >= lo) & (lfsr < hi)
        n_calls = int(sel.sum())
        n_wrong = int((claimed[sel] != true_sign[sel]).sum())
        rows.append((float(lo), float(hi), n_calls, n_wrong))
    return rows


def delta_fdr_row(tests: inference.DeltaTestTable, true_delta: np.ndarray):
    n_rej = int(tests.reject.sum())
    false = int((tests.reject & (true_delta == 0.0)).sum())
    fdp = false / max(n_rej, 1)
    return n_rej, false, fdp


def stage_report(out_dir: str, config: RunConfig, timings: dict | None = None):
    stage_dir = os.path.join(out_dir, "report")
    report = PipelineReport(timings=dict(timings or {}))
    if _stage_done(out_dir, "report"):
        return report
    os.makedirs(stage_dir, exist_ok=True)
    manifest_entries = _config_entries(config, "report")
    k_manifest = os.path.join(out_dir, "estimate_k", "manifest.txt")
    if os.path.exists(k_manifest):
        report.k_hat = int(read_manifest(os.path.join(out_dir, "estimate_k"))["k_hat"])
        manifest_entries["k_hat"] = report.k_hat
    sim_dir = os.path.join(out_dir, "sim")
    truth = simulate.load_truth_matrices(sim_dir)
    if "true_g" in truth and _stage_done(out_dir, "fit"):
        stats, _ = _load_inputs(out_dir)
        fit = _load_fit(out_dir)
        priors = [
            inference.fit_g_prior(fit.g_hat[:, j]) for j in range(fit.k)
        ]
        posterior = inference.posterior_g(fit, stats.d_diag, priors)
        if truth["true_g"].shape[1] == fit.k:
            rows = lfsr_calibration_rows(
                posterior, fit.g_hat, truth["true_g_tilde"], truth["true_g"]
            )
            write_matrix(
                os.path.join(stage_dir, "lfsr_calibration.tsv"),
                np.array(rows),
                [f"bin{i + 1}" for i in range(len(rows))],
                ["bin_lo", "bin_hi", "n_calls", "n_wrong"],
            )
            report.calibration["lfsr"] = rows
        tests = inference.delta_tests(fit, config.fdr_q)
        n_rej, false, fdp = delta_fdr_row(tests, truth["true_delta"])
        write_matrix(
            os.path.join(stage_dir, "fdr.tsv"),
            np.array([[config.fdr_q, n_rej, false, fdp]]),
            ["rep"],
            ["nominal_q", "n_rejections", "n_false", "fdp"],
        )
        report.calibration["fdr"] = (n_rej, false, fdp)
        report.verdicts["fdr_controlled"] = fdp <= 1.5 * config.fdr_q
    write_manifest(stage_dir, manifest_entries)
    if timings:
        with open(os.path.join(out_dir, "timings.txt"), "w") as fh:
            for stage in sorted(timings):
                fh.write(f"{stage}={timings[stage]:.3f}\n")
    return report


# ---------------------------------------------------------------------------
# Orchestration


def run_pipeline(
    out_dir: str,
    config: RunConfig,
    sim_config: simulate.SimConfig | None = None,
    stages=("sim", "estimate_k", "fit", "loadings_hdp", "direct_hdp", "report"),
) -> PipelineReport:
    """Run the staged pipeline, resuming from persisted artifacts."""
    os.makedirs(out_dir, exist_ok=True)
    timings = {}

    def timed(name, fn, *args, **kwargs):
        t0 = time.perf_counter()
        result = fn(*args, **kwargs)
        timings[name] = time.perf_counter() - t0
        return result

    if "sim" in stages:
        if sim_config is None:
            raise ValidationError("pipeline simulation requires a SimConfig")
        timed("sim", stage_simulate, out_dir, sim_config, config)
    k = config.k_factors
    if "estimate_k" in stages:
        k_hat = timed("estimate_k", stage_estimate_k, out_dir, config)
        if k is None:
            k = k_hat
    if k is None:
        raise ValidationError("no factor count: run estimate-k or set k_factors")
    if "fit" in stages:
        timed("fit", stage_fit, out_dir, config, k)
    if "loadings_hdp" in stages:
        timed("loadings_hdp", stage_loadings_hdp, out_dir, config)
    if "direct_hdp" in stages:
        timed("direct_hdp", stage_direct_hdp, out_dir, config)
    report = stage_report(out_dir, config, timings)
    return report


def _one_replicate(args):
    out_root, rep, config, sim_config, stages = args
    rep_dir = os.path.join(out_root, f"rep_{rep:04d}")
    rep_config = config.with_overrides(seed=child_seed(config.seed, "replicate", rep))
    run_pipeline(rep_dir, rep_config, sim_config, stages=stages)
    return rep_dir


def replicate_experiment(
    out_root: str,
    config: RunConfig,
    sim_config: simulate.SimConfig,
    n_reps: int,
    stages=("sim", "estimate_k", "fit", "report"),
    threads: int = 1,
) -> dict:
    """Run independent replicates and aggregate Figure-3-style tables.

    Seeding is per replicate (not per worker), so any thread count yields
    identical outputs. Returns the aggregate tables as arrays and writes
    them under out_root.
    """
    if n_reps < 1:
        raise ValidationError("n_reps must be >= 1")
    os.makedirs(out_root, exist_ok=True)
    jobs = [(out_root, r, config, sim_config, stages) for r in range(n_reps)]
    if threads > 1:
        with ProcessPoolExecutor(max_workers=threads) as pool:
            rep_dirs = list(pool.map(_one_replicate, jobs))
    else:
        rep_dirs = [_one_replicate(j) for j in jobs]
    rep_dirs.sort()
    khat_rows, lfsr_rows, fdr_rows = [], [], []
    for rep, rep_dir in enumerate(rep_dirs):
        if os.path.exists(os.path.join(rep_dir, "estimate_k", "manifest.txt")):
            k_hat = int(read_manifest(os.path.join(rep_dir, "estimate_k"))["k_hat"])
            khat_rows.append((rep, k_hat, sim_config.k))
        cal_path = os.path.join(rep_dir, "report", "lfsr_calibration.tsv")
        if os.path.exists(cal_path):
            rows, _, _ = read_matrix(cal_path)
            for row in rows:
                lfsr_rows.append((rep, *row))
        fdr_path = os.path.join(rep_dir, "report", "fdr.tsv")
        if os.path.exists(fdr_path):
            rows, _, _ = read_matrix(fdr_path)
            fdr_rows.append((rep, *rows[0]))
    out = {
        "khat": np.array(khat_rows, dtype=float),
        "lfsr_bins": np.array(lfsr_rows, dtype=float),
        "fdr": np.array(fdr_rows, dtype=float),
    }
    if khat_rows:
        write_matrix(
            os.path.join(out_root, "khat.tsv"), out["khat"],
            [f"rep{int(r[0])}" for r in khat_rows], ["rep", "k_hat", "true_k"],
        )
    if lfsr_rows:
        write_matrix(
            os.path.join(out_root, "lfsr_bins.tsv"), out["lfsr_bins"],
            [f"row{i}" for i in range(len(lfsr_rows))],
            ["rep", "bin_lo", "bin_hi", "n_calls", "n_wrong"],
        )
    if fdr_rows:
        write_matrix(
            os.path.join(out_root, "fdr.tsv"), out["fdr"],
            [f"rep{int(r[0])}" for r in fdr_rows],
            ["rep", "nominal_q", "n_rejections", "n_false", "fdp"],
        )
    return out
