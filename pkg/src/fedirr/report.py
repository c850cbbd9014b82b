"""Water-budget reports for a run directory and comparisons between runs."""

from __future__ import annotations

import csv
import math
from pathlib import Path

METRICS = ("applied_liters", "drained_from_irrigation_liters", "rain_preempted_liters",
           "rain_avoidable_liters", "wasted_liters", "baseline_applied_liters",
           "mean_moisture_deficit", "mean_stress_deficit", "ticks_below_target")
REPORT_HEADER = ("node_id",) + METRICS
TOTAL = "TOTAL"


def node_summary(node) -> dict:
    ledger = node.ledger
    return {
        "node_id": node.node_id,
        "applied_liters": ledger.applied_liters,
        "drained_from_irrigation_liters": ledger.drained_from_irrigation_liters,
        "rain_preempted_liters": ledger.rain_preempted_liters,
        "rain_avoidable_liters": ledger.rain_avoidable_liters,
        "wasted_liters": ledger.wasted_liters,
        "baseline_applied_liters": ledger.baseline_applied_liters,
        "mean_moisture_deficit": node.mean_moisture_deficit,
        "mean_stress_deficit": node.mean_stress_deficit,
        "ticks_below_target": node.ticks_below_target,
    }


def total_row(rows: list[dict]) -> dict:
    out = {"node_id": TOTAL}
    for m in METRICS:
        values = [float(r[m]) for r in rows]
        if m in ("mean_moisture_deficit", "mean_stress_deficit"):
            out[m] = math.fsum(values) / len(values) if values else 0.0
        else:
            out[m] = math.fsum(values)
    out["ticks_below_target"] = int(out["ticks_below_target"])
    return out


def _fmt(value) -> str:
    if isinstance(value, int):
        return str(value)
    if isinstance(value, float):
        return f"{value:.9g}" if math.isfinite(value) else str(value)
    return str(value)


def write_rows(path, header, rows) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(row[h]) for h in header])


def read_report(run_dir) -> dict[str, dict]:
    """Rows of ``report.csv`` keyed by node id (``TOTAL`` included)."""
    path = Path(run_dir) / "report.csv"
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.DictReader(fh))
    out = {}
    for row in rows:
        out[row["node_id"]] = {m: float(row[m]) for m in METRICS}
    return out


def write_report(run_dir, rows: list[dict], cfg, training=None, nodes=None) -> None:
    run_dir = Path(run_dir)
    rows = list(rows) + [total_row(rows)]
    write_rows(run_dir / "report.csv", REPORT_HEADER, rows)

    lines = [f"policy={cfg.policy} scenario={cfg.scenario} nodes={cfg.nodes} "
             f"ticks={cfg.ticks} seed={cfg.seed}"]
    if training is not None:
        last = training.history[-1].report if training.history else None
        lines.append(f"federated rounds={training.final.round} converged={training.converged}"
                     + (f" validation_loss={last.post_loss:.6g}"
                        if last is not None and last.post_loss is not None else ""))
    lines.append("")
    width = max(len(m) for m in METRICS)
    for row in rows:
        lines.append(f"[{row['node_id']}]")
        for m in METRICS:
            lines.append(f"  {m:<{width}}  {_fmt(row[m])}")
    (run_dir / "report.txt").write_text("\n".join(lines) + "\n", encoding="utf-8")

    if nodes:
        from .plotting import plot_run
        plot_run(nodes, cfg, run_dir / "moisture.png")


def pct_delta(a: float, b: float) -> float:
    if a == 0:
        return 0.0 if b == 0 else math.copysign(math.inf, b)
    return (b - a) / abs(a) * 100.0


def compare_runs(run_a, run_b) -> list[dict]:
    """Per-node and total deltas of every metric, b relative to a."""
    a, b = read_report(run_a), read_report(run_b)
    out = []
    for node_id in sorted(set(a) & set(b), key=lambda n: (n == TOTAL, n)):
        for m in METRICS:
            va, vb = a[node_id][m], b[node_id][m]
            out.append({"node_id": node_id, "metric": m, "a": va, "b": vb,
                        "delta_pct": pct_delta(va, vb)})
    return out


def format_comparison(rows: list[dict], run_a, run_b) -> str:
    lines = [f"a = {run_a}", f"b = {run_b}", ""]
    lines.append(f"{'node':<10} {'metric':<32} {'a':>14} {'b':>14} {'delta':>10}")
    for r in rows:
        delta = r["delta_pct"]
        d = f"{delta:+.2f}%" if math.isfinite(delta) else ("+inf%" if delta > 0 else "-inf%")
        lines.append(f"{r['node_id']:<10} {r['metric']:<32} {r['a']:>14.6g} {r['b']:>14.6g} {d:>10}")
    return "\n".join(lines) + "\n"


def write_comparison(rows, run_a, run_b, out_dir, figures: bool = True) -> str:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    text = format_comparison(rows, run_a, run_b)
    (out_dir / "compare.txt").write_text(text, encoding="utf-8")
    write_rows(out_dir / "compare.csv", ("node_id", "metric", "a", "b", "delta_pct"), rows)
    if figures:
        from .plotting import plot_comparison
        plot_comparison(rows, out_dir / "compare.png", labels=(Path(run_a).name, Path(run_b).name))
    return text
