"""Plot rendering for metric reports and training logs."""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .metrics import MetricReport

_FORMATS = ("png", "svg")


def _save(fig, out_dir: Path, name: str) -> list[Path]:
    paths = []
    for fmt in _FORMATS:
        path = out_dir / f"{name}.{fmt}"
        fig.savefig(path, bbox_inches="tight")
        paths.append(path)
    plt.close(fig)
    return paths


def render_report(
    metrics_path: Path | str,
    out_dir: Path | str,
    log_path: Path | str | None = None,
) -> list[Path]:
    """Histogram + per-sample curve per metric; loss curves if a log is given."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    report = MetricReport.from_dict(json.loads(Path(metrics_path).read_text()))
    written: list[Path] = []

    for metric in MetricReport.METRICS:
        values = [row[metric] for row in report.per_sample]
        fig, (ax_hist, ax_curve) = plt.subplots(1, 2, figsize=(9, 3.2))
        ax_hist.hist(values, bins=min(20, max(5, len(values))), color="#4878cf")
        ax_hist.set_xlabel(metric)
        ax_hist.set_ylabel("count")
        ax_curve.plot(values, marker="o", ms=3, lw=1, color="#4878cf")
        ax_curve.set_xlabel("sample index")
        ax_curve.set_ylabel(metric)
        agg = report.aggregate.get(metric, {})
        if agg:
            ax_curve.axhline(agg["mean"], color="#d65f5f", lw=1, ls="--")
        fig.suptitle(f"{metric} (mean {agg.get('mean', float('nan')):.4g})")
        written += _save(fig, out_dir, f"metric_{metric}")

    if log_path is not None:
        series: dict[str, list[tuple[int, float]]] = {}
        for line in Path(log_path).read_text().splitlines():
            rec = json.loads(line)
            series.setdefault(rec["loss_name"], []).append((rec["step"], rec["value"]))
        fig, ax = plt.subplots(figsize=(7, 4))
        for name, pts in sorted(series.items()):
            steps, vals = zip(*pts)
            ax.plot(steps, vals, lw=1, label=name)
        ax.set_xlabel("step")
        ax.set_ylabel("value")
        ax.set_yscale("symlog", linthresh=1e-3)
        ax.legend(fontsize=7, ncols=2)
        written += _save(fig, out_dir, "training_curves")

    return written
