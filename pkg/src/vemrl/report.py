"""Consolidated Markdown and CSV summary of a run directory, plus figures."""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

from . import plotting
from .evaluation import CSV_COLUMNS, EvalReport, write_summary_csv
from .pipeline import MANIFEST

log = logging.getLogger(__name__)

METRIC_COLUMNS = ("split", "precision", "recall", "f1", "accuracy", "n")


@dataclass
class ReportResult:
    markdown: Path
    csvs: list = field(default_factory=list)
    figures: list = field(default_factory=list)
    missing: list = field(default_factory=list)


def _load(path: Path):
    return json.loads(path.read_text(encoding="utf-8")) if path.is_file() else None


def _fmt(x) -> str:
    return f"{x:.4f}" if isinstance(x, float) else str(x)


def _table(header, rows) -> list[str]:
    out = ["| " + " | ".join(header) + " |", "|" + "---|" * len(header)]
    out += ["| " + " | ".join(_fmt(v) for v in row) + " |" for row in rows]
    return out


def write_report(run_dir, figures: bool = True) -> ReportResult:
    """Render ``report.md`` plus CSVs from whatever artifacts exist; missing pieces are listed."""
    d = Path(run_dir)
    if not (d / MANIFEST).is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {d}")
    manifest = json.loads((d / MANIFEST).read_text(encoding="utf-8"))
    res = ReportResult(d / "report.md")
    lines = ["# Run report", "", f"config hash `{manifest['config_hash']}`, seed {manifest['seed']}, "
             f"tool version {manifest['tool_version']}", ""]
    lines += _table(("stage", "cached", "seconds"),
                    [(s["name"], s["cached"], float(s["seconds"])) for s in manifest["stages"]])
    lines.append("")

    metrics = _load(d / "vem_metrics.json")
    lines += ["## Value model", ""]
    if metrics is None:
        res.missing.append("vem")
        lines += ["missing: vem_metrics.json", ""]
    else:
        rows = [(k, metrics[k]["precision"], metrics[k]["recall"], metrics[k]["f1"], metrics[k]["accuracy"],
                 metrics[k]["n"]) for k in ("train", "heldout") if metrics.get(k)]
        lines += _table(METRIC_COLUMNS, rows) + [""]
        with open(d / "report_vem_metrics.csv", "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(METRIC_COLUMNS)
            w.writerows(rows)
        res.csvs.append(d / "report_vem_metrics.csv")
        if figures and (d / "vem_curve.csv").is_file():
            res.figures.append(plotting.plot_vem_curve(d / "vem_curve.csv", d / "fig_vem_curve.png"))
    if figures and (d / "policy_diagnostics.csv").is_file():
        res.figures.append(plotting.plot_policy_diagnostics(d / "policy_diagnostics.csv", d / "fig_policy.png"))

    evals = _load(d / "eval.json")
    lines += ["## Evaluation", ""]
    if evals is None:
        res.missing.append("eval")
        lines += ["missing: eval.json", ""]
    else:
        for mode in ("offline", "online"):
            rows = [r for r in evals if r["mode"] == mode]
            if not rows:
                continue
            lines += [f"### {mode}", ""]
            lines += _table(CSV_COLUMNS, [[r[c] for c in CSV_COLUMNS] for r in rows]) + [""]
            path = d / f"report_{mode}.csv"
            write_summary_csv([EvalReport.from_dict(r) for r in rows], path)
            res.csvs.append(path)
        if figures:
            res.figures.append(plotting.plot_success_rates(evals, d / "fig_success.png"))

    bound = _load(d / "bound.json")
    lines += ["## Performance bound", ""]
    if bound is None:
        res.missing.append("theory")
        lines += ["missing: bound.json", ""]
    else:
        lines += _table(("c_fit", "c_theory", "cases", "excluded", "theory violations", "trend violations"),
                        [(bound["c_fit"], bound["c_theory"], len(bound["reports"]), len(bound["excluded"]),
                          len(bound["theory_violations"]), len(bound["trend_violations"]))]) + [""]
        if figures:
            res.figures.append(plotting.plot_bound(bound["reports"], bound["c_fit"], d / "fig_bound.png"))

    if res.missing:
        lines += ["## Missing", ""] + [f"- {m}" for m in res.missing] + [""]
    res.markdown.write_text("\n".join(lines), encoding="utf-8")
    log.info("report written to %s", res.markdown)
    return res
