"""Command-line interface.

Every subcommand operates on a pipeline output directory (``--out``):
``simulate`` populates it, the analysis stages read what previous stages
persisted, and ``report``/``replicate`` aggregate. External data enters
through ``--matrix``/``--d-file``/``--n-samples``/``--pathways``.

Exit codes: 0 success, 2 validation error, 3 numerical failure.
"""

from __future__ import annotations

import argparse
import sys

from . import pipeline, simulate
from .sumstats import RunConfig, load_pathways, load_summary_stats
from .util import NumericalError, ValidationError


def _add_global_flags(p):
    p.add_argument("--config", help="JSON run-config file")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None)
    p.add_argument("--out", required=True, help="pipeline output directory")


def _add_input_flags(p):
    p.add_argument("--matrix", help="summary-statistic TSV (header=phenotypes)")
    p.add_argument("--d-file", help="two-column snp_id/xtx sidecar TSV")
    p.add_argument("--n-samples", type=int, help="GWAS sample size")
    p.add_argument("--pathways", help="phenotype/sub/super pathway TSV")


def _add_chain_flags(p):
    p.add_argument("--iterations", type=int, default=None)
    p.add_argument("--burn-in", type=int, default=None)
    p.add_argument("--thin", type=int, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="higss",
        description="Factor-model GWAS of high dimensional phenotypes "
        "from summary statistics",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a ground-truth dataset")
    _add_global_flags(p)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--s", type=int, default=5000)
    p.add_argument("--m", type=int, default=257)
    p.add_argument("--k", type=int, default=10)

    p = sub.add_parser("estimate-k", help="estimate the number of latent factors")
    _add_global_flags(p)
    _add_input_flags(p)
    p.add_argument("--alpha", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--b", type=int, default=None)

    p = sub.add_parser("fit", help="factor decomposition and entry-wise inference")
    _add_global_flags(p)
    _add_input_flags(p)
    p.add_argument("--k", default="auto", help="factor count or 'auto'")
    p.add_argument("--q", type=float, default=None, help="BH level for direct effects")
    p.add_argument("--lfsr-threshold", type=float, default=None)

    p = sub.add_parser("loadings-hdp", help="pathway sampler on loading columns")
    _add_global_flags(p)
    _add_chain_flags(p)
    group = p.add_mutually_exclusive_group()
    group.add_argument("--factor-index", type=int, help="1-based factor index")
    group.add_argument("--all-factors", action="store_true")

    p = sub.add_parser("direct-hdp", help="pathway sampler on direct effects")
    _add_global_flags(p)
    _add_chain_flags(p)

    p = sub.add_parser("report", help="calibration tables and run summary")
    _add_global_flags(p)

    p = sub.add_parser("replicate", help="run the simulation experiment n times")
    _add_global_flags(p)
    p.add_argument("--reps", type=int, default=1)
    p.add_argument("--n", type=int, default=500)
    p.add_argument("--s", type=int, default=5000)
    p.add_argument("--m", type=int, default=257)
    p.add_argument("--k", type=int, default=10)
    return parser


def _config_from_args(args) -> RunConfig:
    config = RunConfig.from_file(args.config) if args.config else RunConfig()
    overrides = {"seed": args.seed, "threads": args.threads}
    for attr, key in (
        ("alpha", "dbema_alpha"),
        ("beta", "dbema_beta"),
        ("b", "dbema_b"),
        ("q", "fdr_q"),
        ("lfsr_threshold", "lfsr_threshold"),
        ("iterations", "iterations"),
        ("burn_in", "burn_in"),
        ("thin", "thinning"),
    ):
        if getattr(args, attr, None) is not None:
            overrides[key] = getattr(args, attr)
    return config.with_overrides(**overrides)


def _maybe_import(args, out_dir):
    if getattr(args, "matrix", None):
        if not (args.d_file and args.n_samples):
            raise ValidationError("--matrix requires --d-file and --n-samples")
        stats = load_summary_stats(args.matrix, args.d_file, args.n_samples)
        hierarchy = load_pathways(args.pathways) if args.pathways else None
        pipeline.import_inputs(out_dir, stats, hierarchy)


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    config = _config_from_args(args)
    out = args.out

    if args.command == "simulate":
        sim = simulate.SimConfig(n=args.n, s=args.s, m=args.m, k=args.k)
        pipeline.stage_simulate(out, sim, config)
    elif args.command == "estimate-k":
        _maybe_import(args, out)
        k_hat = pipeline.stage_estimate_k(out, config)
        print(f"k_hat={k_hat}")
    elif args.command == "fit":
        _maybe_import(args, out)
        if args.k == "auto":
            k = pipeline.stage_estimate_k(out, config)
        else:
            k = int(args.k)
        pipeline.stage_fit(out, config, k)
    elif args.command == "loadings-hdp":
        factors = None
        if args.factor_index is not None:
            factors = [args.factor_index - 1]
        pipeline.stage_loadings_hdp(out, config, factors)
    elif args.command == "direct-hdp":
        pipeline.stage_direct_hdp(out, config)
    elif args.command == "report":
        report = pipeline.stage_report(out, config)
        for key, value in sorted(report.verdicts.items()):
            print(f"{key}={value}")
    elif args.command == "replicate":
        sim = simulate.SimConfig(n=args.n, s=args.s, m=args.m, k=args.k)
        pipeline.replicate_experiment(
            out, config, sim, args.reps, threads=config.threads
        )
    return 0


def main() -> None:
    try:
        sys.exit(run())
    except (ValidationError,) as exc:
        print(f"error: {exc}", file=sys.stderr)
        sys.exit(2)
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        sys.exit(3)


if __name__ == "__main__":
    main()
