"""Matplotlib figures for run and comparison reports (written to files only)."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

STYLE = {
    "font.size": 10,
    "axes.titlesize": 11,
    "axes.labelsize": 10,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "legend.frameon": False,
    "figure.dpi": 100,
    "savefig.dpi": 120,
}

# keep PNG bytes independent of the matplotlib build date
_METADATA = {"Software": None}


def plot_run(nodes, cfg, path) -> None:
    """Moisture trajectories with pump events, one panel per node."""
    with plt.rc_context(STYLE):
        fig, axes = plt.subplots(len(nodes), 1, figsize=(8, 2.2 * len(nodes)), sharex=True,
                                 squeeze=False)
        for ax, node in zip(axes[:, 0], nodes):
            ticks = [r.frame.tick for r in node.records]
            moisture = [r.moisture_true for r in node.records]
            ax.plot(ticks, moisture, lw=1.2, color="tab:blue", label="moisture")
            ax.axhline(cfg.node.dry_target, color="tab:red", ls="--", lw=0.8, label="dry target")
            ax.axhline(cfg.soil.field_capacity, color="0.5", ls=":", lw=0.8,
                       label="field capacity")
            pumped = [r.frame.tick for r in node.records if r.pump_on]
            if pumped:
                ax.plot(pumped, [cfg.soil.field_capacity * 1.05] * len(pumped), "|",
                        color="tab:green", ms=8, label="pump on")
            rain = [node.weather[t].rain_rate for t in ticks]
            ax2 = ax.twinx()
            ax2.bar(ticks, rain, color="tab:cyan", alpha=0.35, width=1.0)
            ax2.set_ylabel("rain / h")
            ax2.spines["top"].set_visible(False)
            ax.set_ylabel("moisture")
            ax.set_title(node.node_id, loc="left")
        axes[0, 0].legend(loc="upper right", ncol=4, fontsize=8)
        axes[-1, 0].set_xlabel(f"tick ({cfg.dt_hours:g} h)")
        fig.tight_layout()
        fig.savefig(path, metadata=_METADATA)
        plt.close(fig)


def plot_comparison(rows, path, labels=("a", "b")) -> None:
    """Grouped bars of the TOTAL liter metrics for two runs."""
    totals = [r for r in rows if r["node_id"] == "TOTAL" and r["metric"].endswith("_liters")]
    names = [r["metric"].replace("_liters", "").replace("_", " ") for r in totals]
    x = range(len(totals))
    with plt.rc_context(STYLE):
        fig, ax = plt.subplots(figsize=(8, 3.5))
        ax.bar([i - 0.2 for i in x], [r["a"] for r in totals], width=0.4, label=labels[0])
        ax.bar([i + 0.2 for i in x], [r["b"] for r in totals], width=0.4, label=labels[1])
        ax.set_xticks(list(x))
        ax.set_xticklabels(names, rotation=20, ha="right")
        ax.set_ylabel("liters (all nodes)")
        ax.legend()
        fig.tight_layout()
        fig.savefig(path, metadata=_METADATA)
        plt.close(fig)
