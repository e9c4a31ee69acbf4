"""``ragdp`` command line: gen-data, train, build-db, eval, sweep, report, pipeline.

Exit codes: 0 success, 2 config error, 3 data/model mismatch, 4 runtime failure.
"""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

from ragdp.bench import pipeline
from ragdp.bench.config import ConfigError, RunConfig, load_config
from ragdp.bench.report import ReportError, cmd_report
from ragdp.errors import FormatError, MetadataMismatchError
from ragdp.nn import TrainingDiverged

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("ragdp")


def _config(args) -> RunConfig:
    cfg = load_config(args.config) if args.config else RunConfig().validate()
    if getattr(args, "workers", None) is not None:
        if args.workers < 1:
            raise ConfigError("--workers must be >= 1")
        cfg = cfg.replace(eval=dataclasses.replace(cfg.eval, workers=args.workers))
    return cfg


def cmd_gen_data(args) -> int:
    cfg = _config(args)
    path, digest = pipeline.cmd_gen_data(cfg, args.out, args.seed)
    print(f"dataset {path}")
    print(f"hash {digest}")
    return EXIT_OK


def cmd_train(args) -> int:
    cfg = _config(args)
    kinds = [args.model] if args.model else None
    seeds = [args.seed] if args.seed is not None else None
    for path, digest in pipeline.cmd_train(cfg, args.out, args.dataset, kinds, seeds):
        print(f"checkpoint {path} sha256 {digest}")
    return EXIT_OK


def cmd_build_db(args) -> int:
    cfg = _config(args)
    path, kb = pipeline.cmd_build_db(cfg, args.out, args.dataset)
    print(f"knowledge base {path}")
    print(f"N_data {len(kb)}")
    print(f"skipped_episodes {kb.meta['skipped_episodes']}")
    return EXIT_OK


def cmd_eval(args) -> int:
    cfg = _config(args)
    if args.seed is not None:
        cfg = cfg.replace(eval=dataclasses.replace(cfg.eval, policy_seed=args.seed))
    try:
        cell = pipeline.make_cell(cfg, args.mode, args.r, args.steps, args.model, args.sampler)
    except ValueError as exc:
        if isinstance(exc, MetadataMismatchError):
            raise
        raise ConfigError(str(exc)) from exc
    row = pipeline.cmd_eval(cfg, cell, args.out)
    print(", ".join(f"{k}={row[k]}" for k in pipeline.REPORT_COLUMNS))
    return EXIT_OK


def _print_rows(rows: list[dict]) -> None:
    cols = ["base_model", "mode", "sampler", "steps", "r", "network_evals", "success_rate", "recovery_rate"]
    print(" ".join(f"{c:>13}" for c in cols))
    for r in rows:
        print(" ".join(f"{r[c]:>13}" for c in cols))


def cmd_sweep(args) -> int:
    cfg = _config(args)
    _print_rows(pipeline.cmd_sweep(cfg, args.out))
    return EXIT_OK


def cmd_pipeline(args) -> int:
    cfg = _config(args)
    _print_rows(pipeline.run_all(cfg, args.out))
    paths = pipeline.paths_for(cfg, args.out)
    for notice in cmd_report(paths.report, paths.report_dir, paths.timing):
        print(f"notice: {notice}")
    return EXIT_OK


def cmd_report_(args) -> int:
    if args.report:
        report = Path(args.report)
        out = Path(args.out) if args.out else report.parent / "report"
    else:
        paths = pipeline.paths_for(_config(args), args.out)
        report, out = paths.report, paths.report_dir
    for notice in cmd_report(report, out, args.timing):
        print(f"notice: {notice}")
    print(f"report written to {out}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="ragdp", description="Retrieval-augmented diffusion policy benchmark")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, workers=False):
        sp.add_argument("--config", help="YAML run configuration (defaults built in)")
        sp.add_argument("--out", help="output directory (overrides output_dir)")
        if workers:
            sp.add_argument("--workers", type=int, help="parallel rollout workers")

    sp = sub.add_parser("gen-data", help="generate expert demonstrations")
    common(sp)
    sp.add_argument("--seed", type=int, help="dataset seed (overrides data.seed)")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train VP and/or VE denoisers")
    common(sp)
    sp.add_argument("--seed", type=int, help="train only this seed")
    sp.add_argument("--model", choices=["vp", "ve"], help="train only this model kind")
    sp.add_argument("--dataset", help="dataset path (default <out>/dataset.bin)")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("build-db", help="build the retrieval knowledge base")
    common(sp)
    sp.add_argument("--dataset", help="dataset path (default <out>/dataset.bin)")
    sp.set_defaults(func=cmd_build_db)

    sp = sub.add_parser("eval", help="evaluate one method and merge its row into report.csv")
    common(sp, workers=True)
    sp.add_argument("--mode", required=True, choices=["baseline-full", "baseline-fast", "ragdp-vp", "ragdp-ve"])
    sp.add_argument("--r", type=float, help="leap ratio for RAGDP modes")
    sp.add_argument("--steps", type=int, help="step count for baseline-fast")
    sp.add_argument("--model", choices=["vp", "ve"], help="base model kind (inferred from --mode when omitted)")
    sp.add_argument("--sampler", choices=["vp-ancestral", "vp-fast", "ve-euler"])
    sp.add_argument("--seed", type=int, help="policy seed (overrides eval.policy_seed)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("sweep", help="evaluate the configured grid, rewriting report.csv")
    common(sp, workers=True)
    sp.set_defaults(func=cmd_sweep)

    sp = sub.add_parser("report", help="tables and SVG plots from report.csv")
    common(sp)
    sp.add_argument("--report", help="report CSV (default <out>/report.csv)")
    sp.add_argument("--timing", help="timing CSV (default next to the report)")
    sp.set_defaults(func=cmd_report_)

    sp = sub.add_parser("pipeline", help="gen-data, train, build-db, sweep and report in one go")
    common(sp, workers=True)
    sp.set_defaults(func=cmd_pipeline)
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (MetadataMismatchError, FormatError, FileNotFoundError, ReportError) as exc:
        print(f"data/model mismatch: {exc}", file=sys.stderr)
        return EXIT_MISMATCH
    except (TrainingDiverged, RuntimeError, ValueError, OSError) as exc:
        print(f"runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
