"""Command-line driver: ``odil gen-data``, ``odil run``, ``odil report``.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import shutil
import sys
from dataclasses import replace
from pathlib import Path

from filelock import FileLock, Timeout

from . import checkpoint
from .config import ExperimentConfig, ManifestEntry
from .data import export_domain
from .errors import ConfigError, DataError, OdilError
from .report import (
    COMPARISON_COLUMNS,
    LONG_COLUMNS,
    check_digests,
    comparison_rows,
    format_table,
    load_report,
    long_rows,
    series_rows,
    table_rows,
    write_csv,
    write_report,
)
from .strategies import KINDS, Experiment, Strategy

log = logging.getLogger("odil")


def _load_config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    if getattr(args, "out", None):
        cfg.output_dir = args.out
    if getattr(args, "exclude_adaptation_samples", False):
        cfg.exclude_adaptation_samples = True
    return cfg


def _lock(out: Path) -> FileLock:
    out.mkdir(parents=True, exist_ok=True)
    lock = FileLock(str(out / ".lock"))
    try:
        lock.acquire(timeout=0)
    except Timeout:
        raise ConfigError(f"{out} is locked by another run") from None
    return lock


def _file_log(out: Path) -> logging.Handler:
    handler = logging.FileHandler(out / "run.log")
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("odil").addHandler(handler)
    return handler


# ---------------------------------------------------------------------------
# gen-data


def cmd_gen_data(args) -> int:
    cfg = _load_config(args)
    out = Path(cfg.output_dir)
    data_dir = out / "data" / f"seed{cfg.seed}"
    if data_dir.exists():
        if not args.force:
            raise ConfigError(f"{data_dir} already exists; pass --force to regenerate")
        shutil.rmtree(data_dir)
    try:
        data_dir.mkdir(parents=True)
    except OSError as err:
        raise DataError(f"cannot write to {data_dir}: {err}") from None
    digest = cfg.digest()
    entries, rows = [], []
    for i, domain in enumerate(cfg.domains()):
        sub = f"d{domain.domain_id}-{domain.spec.name}"
        export_domain(domain, data_dir / sub)
        spec = domain.spec
        entries.append(ManifestEntry(f"{sub}/manifest.csv", spec.domain_id, spec.name, spec.adapt_per_class,
                                     spec.adapt_from_test))
        train_n = len(domain.train) if domain.train is not None else "-"
        rows.append([spec.domain_id, spec.name, len(spec.classes), train_n, len(domain.test),
                     "-" if i == 0 else spec.k, cfg.seed])
    header = ["domain", "name", "classes", "train", "test", "K", "seed"]
    write_csv(data_dir / "stream_summary.csv", header, rows, digest)
    file_cfg = replace(cfg, stream=entries)
    file_cfg.save(data_dir / "config.json", include_output_dir=False)
    print(format_table(header, rows))
    print(f"\nwrote {data_dir} (config digest {digest})")
    return 0


# ---------------------------------------------------------------------------
# run


def _select_strategies(cfg: ExperimentConfig, names, budget) -> list[Strategy]:
    chosen = [Strategy.parse(s) for s in cfg.strategies]
    if names:
        wanted = {n.strip() for arg in names for n in arg.split(",") if n.strip()}
        for n in wanted:
            if n not in KINDS:
                Strategy.parse(n)
        extra = [Strategy.parse(n) for n in sorted(wanted) if n not in KINDS]
        chosen = [s for s in chosen if s.id in wanted or s.kind in wanted]
        chosen += [s for s in extra if s not in chosen]
    if budget:
        chosen = [s for s in chosen if s.budget in (None, budget)]
    if not chosen:
        raise ConfigError("no strategies selected")
    return chosen


def _base_model(cfg, exp_seed, init, domains, out: Path, no_train: bool, digest: str):
    path = out / "checkpoints" / f"base_seed{exp_seed}.ckpt.json"
    if path.exists():
        model, _, extra = checkpoint.load_checkpoint(path)
        if extra.get("config_digest") != digest:
            raise ConfigError(f"{path} was trained under a different config; remove it or use another output dir")
        log.info("loaded base checkpoint %s", path)
        return model
    if no_train:
        raise DataError(f"base checkpoint {path} is missing and --no-train was given")
    exp = Experiment(domains, init, cfg.train, cfg.odil, seed=exp_seed)
    model = exp.base_model
    path.parent.mkdir(parents=True, exist_ok=True)
    checkpoint.save_checkpoint(path, model, seed=exp_seed, strategy="base-training", config_digest=digest)
    return model


def cmd_run(args) -> int:
    cfg = _load_config(args)
    strategies = _select_strategies(cfg, args.strategy, args.budget)
    seeds = [cfg.seed + i for i in range(args.seeds)]
    if args.seeds < 1:
        raise ConfigError("--seeds must be >= 1")
    out = Path(cfg.output_dir)
    digest = cfg.digest()
    lock = _lock(out)
    handler = _file_log(out)
    try:
        reports_dir = out / "reports"
        reports_dir.mkdir(exist_ok=True)
        targets = {(s.id, seed): reports_dir / f"{s.id}_seed{seed}.json" for s in strategies for seed in seeds}
        existing = [str(p) for p in targets.values() if p.exists()]
        if existing and not args.force:
            raise ConfigError(f"reports already exist ({existing[0]}, ...); pass --force to overwrite")
        cfg.save(out / "config.json", include_output_dir=False)
        log.info("run: digest %s, seeds %s, strategies %s", digest, seeds, [s.id for s in strategies])
        for seed in seeds:
            domains = cfg.domains(seed)
            init = cfg.model.build(seed)
            base = _base_model(cfg, seed, init, domains, out, args.no_train, digest)
            exp = Experiment(domains, init, cfg.train, cfg.odil, seed=seed,
                             exclude_adaptation_samples=cfg.exclude_adaptation_samples, config_digest=digest,
                             checkpoint_dir=out / "checkpoints" / f"seed{seed}", base_model=base)
            for strategy in strategies:
                report = exp.run(strategy)
                write_report(report, targets[(strategy.id, seed)])
                log.info("%s seed %d: final avg acc %.4f, forgetting %.4f", strategy.id, seed,
                         report.avg_accuracy[-1], report.forgetting[-1])
        reports = [load_report(p) for p in sorted(reports_dir.glob("*.json"))]
        reports = [r for r in reports if r.config_digest == digest]
        _write_tables(reports, out, digest)
        header, rows = table_rows(reports)
        print(format_table(header, rows))
    finally:
        logging.getLogger("odil").removeHandler(handler)
        handler.close()
        lock.release()
    return 0


def _write_tables(reports, out: Path, digest: str) -> None:
    reports = sorted(reports, key=lambda r: (r.strategy, r.seed))
    write_csv(out / "results_long.csv", LONG_COLUMNS, [row for r in reports for row in long_rows(r)], digest)
    write_csv(out / "series.csv", LONG_COLUMNS, [row for r in reports for row in series_rows(r)], digest)
    write_csv(out / "comparison.csv", COMPARISON_COLUMNS, comparison_rows(reports), digest)
    header, rows = table_rows(reports)
    write_csv(out / "table_avg_accuracy.csv", header, rows, digest)


# ---------------------------------------------------------------------------
# report


def cmd_report(args) -> int:
    if not args.reports:
        raise ConfigError("need at least one report file")
    reports = [load_report(p) for p in args.reports]
    digest = check_digests(reports, args.allow_mixed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_tables(reports, out, digest)
    header, rows = table_rows(reports)
    print(format_table(header, rows))
    print()
    print(format_table(COMPARISON_COLUMNS, [[f"{v:.4f}" if isinstance(v, float) else v for v in r]
                                            for r in comparison_rows(reports)]))
    return 0


# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="odil", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="write the synthetic stream as feature files + manifests")
    p.add_argument("--config", help="experiment config JSON (defaults to the reference experiment)")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory (overrides the config)")
    p.add_argument("--force", action="store_true", help="overwrite existing data")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("run", help="train the base model and run strategies over the stream")
    p.add_argument("--config")
    p.add_argument("--strategy", action="append",
                   help="strategy kind or id, e.g. odil, ft, ft-offline (repeatable, comma-separated)")
    p.add_argument("--budget", choices=("online", "offline"))
    p.add_argument("--seed", type=int)
    p.add_argument("--seeds", type=int, default=1, help="sweep N consecutive seeds starting at --seed")
    p.add_argument("--out")
    p.add_argument("--force", action="store_true", help="overwrite existing reports")
    p.add_argument("--no-train", action="store_true", help="fail instead of training a missing base model")
    p.add_argument("--exclude-adaptation-samples", action="store_true",
                   help="drop adaptation samples drawn from a test split from that split's evaluation")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("report", help="combine report files into comparison tables")
    p.add_argument("reports", nargs="*")
    p.add_argument("--out", default="report")
    p.add_argument("--allow-mixed", action="store_true", help="combine reports from different configs")
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logger = logging.getLogger("odil")
    logger.setLevel(logging.INFO)
    stream = None
    if args.verbose:
        stream = logging.StreamHandler(sys.stderr)
        stream.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        logger.addHandler(stream)
    try:
        return args.func(args)
    except OdilError as err:
        print(f"odil: error: {err}", file=sys.stderr)
        return err.exit_code
    finally:
        if stream is not None:
            logger.removeHandler(stream)


if __name__ == "__main__":
    sys.exit(main())
