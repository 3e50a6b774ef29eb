"""Serialization of evaluation reports into JSON and CSV tables (strategy x step)."""

from __future__ import annotations

import csv
import io
import json
from collections import defaultdict
from pathlib import Path

import numpy as np

from .errors import ConfigError, DataError
from .metrics import summarize
from .strategies import EvalReport

LONG_COLUMNS = ["strategy", "step", "domain", "acc", "avg_acc", "forgetting", "seed"]
COMPARISON_COLUMNS = ["strategy", "step", "domain", "avg_acc", "avg_acc_std", "forgetting", "forgetting_std", "n_seeds"]


def _fmt(v) -> str:
    return f"{v:.6f}" if isinstance(v, float) else str(v)


def write_csv(path, header, rows, digest: str | None = None) -> Path:
    buf = io.StringIO()
    if digest is not None:
        buf.write(f"# config_digest={digest}\n")
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in rows:
        w.writerow([_fmt(v) for v in r])
    path = Path(path)
    path.write_text(buf.getvalue())
    return path


def read_csv(path) -> list[dict]:
    lines = [ln for ln in Path(path).read_text().splitlines() if not ln.startswith("#")]
    return list(csv.DictReader(lines))


def write_report(report: EvalReport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(report.to_dict(), indent=1, sort_keys=True) + "\n")
    return path


def load_report(path) -> EvalReport:
    path = Path(path)
    try:
        d = json.loads(path.read_text())
    except FileNotFoundError:
        raise DataError(f"report not found: {path}") from None
    except json.JSONDecodeError as err:
        raise DataError(f"{path}: not a JSON report ({err})") from None
    report = EvalReport.from_dict(d)
    avg, fr = summarize(report.matrix)
    if avg != list(report.avg_accuracy) or fr != list(report.forgetting):
        raise DataError(f"{path}: stored summaries do not match the accuracy matrix")
    return report


def long_rows(report: EvalReport) -> list[list]:
    """One row per (step, evaluated domain)."""
    rows = []
    for t in range(1, report.matrix.steps + 1):
        for s in range(1, t + 1):
            rows.append([report.strategy, t, report.domain_ids[s - 1], report.matrix[t, s],
                         report.avg_accuracy[t - 1], report.forgetting[t - 1], report.seed])
    return rows


def series_rows(report: EvalReport) -> list[list]:
    """Per-step accuracy on the current domain and average forgetting (figure data)."""
    return [[report.strategy, t, report.domain_ids[t - 1], report.matrix[t, t], report.avg_accuracy[t - 1],
             report.forgetting[t - 1], report.seed] for t in range(1, report.matrix.steps + 1)]


def check_digests(reports: list[EvalReport], allow_mixed: bool = False) -> str:
    digests = sorted({r.config_digest for r in reports})
    if len(digests) > 1 and not allow_mixed:
        raise ConfigError(f"reports come from different configs {digests}; pass --allow-mixed to combine them")
    return digests[0] if len(digests) == 1 else "mixed"


def _grouped(reports):
    groups = defaultdict(list)
    for r in reports:
        groups[r.strategy].append(r)
    return groups


def comparison_rows(reports: list[EvalReport]) -> list[list]:
    """One row per (strategy, step): mean and std over seeds of average accuracy and forgetting."""
    rows = []
    for strategy, group in sorted(_grouped(reports).items()):
        steps = {r.matrix.steps for r in group}
        if len(steps) != 1:
            raise DataError(f"{strategy}: reports disagree on the number of steps")
        for t in range(1, steps.pop() + 1):
            acc = np.array([r.avg_accuracy[t - 1] for r in group])
            fr = np.array([r.forgetting[t - 1] for r in group])
            rows.append([strategy, t, group[0].domain_ids[t - 1], float(acc.mean()), float(acc.std()),
                         float(fr.mean()), float(fr.std()), len(group)])
    return rows


def table_rows(reports: list[EvalReport]) -> tuple[list[str], list[list]]:
    """Strategy x domain table of average accuracy in percent, '-' where a
    strategy skipped a domain; 'mean±std' when several seeds are present."""
    domain_ids = sorted({d for r in reports for d in r.domain_ids})
    header = ["strategy"] + [f"d{d}" for d in domain_ids]
    rows = []
    for strategy, group in sorted(_grouped(reports).items()):
        row = [strategy]
        for d in domain_ids:
            if d not in group[0].domain_ids:
                row.append("-")
                continue
            t = group[0].domain_ids.index(d)
            vals = np.array([r.avg_accuracy[t] for r in group]) * 100
            row.append(f"{vals.mean():.1f}" if len(vals) == 1 else f"{vals.mean():.1f}±{vals.std():.1f}")
        rows.append(row)
    return header, rows


def format_table(header, rows) -> str:
    widths = [max(len(str(x)) for x in col) for col in zip(header, *rows)]
    line = lambda r: "  ".join(str(x).rjust(w) for x, w in zip(r, widths))
    return "\n".join([line(header)] + [line(r) for r in rows])

