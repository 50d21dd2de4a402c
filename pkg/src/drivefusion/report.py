"""Rendering of run artifacts: loss curves and per-zone MSE bar charts.

Figures are written next to their machine-readable CSV counterparts so a run
directory is self-describing: loss_log.csv + loss_curve.png, metrics.csv +
zone_mse.png + metrics.txt.
"""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

from .evaluate import ZONE_LABELS, MetricReport, format_metric_table, write_metrics_csv
from .train import EpochLog


def plot_loss_curves(logs: list[EpochLog], out_path: Path) -> Path:
    """Angle/speed/total training loss as a function of epoch."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    epochs = [log.epoch for log in logs]
    fig, ax = plt.subplots(figsize=(6, 4))
    ax.plot(epochs, [log.angle_mse for log in logs], marker="o", label="angle MSE")
    ax.plot(epochs, [log.speed_mse for log in logs], marker="s", label="speed MSE")
    ax.plot(epochs, [log.total_loss for log in logs], marker="^", linestyle="--", label="total")
    ax.set_xlabel("epoch")
    ax.set_ylabel("training loss (normalized space)")
    ax.set_yscale("log")
    ax.legend()
    ax.grid(True, alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def plot_zone_mse(report: MetricReport, out_path: Path) -> Path:
    """Per-zone angle and speed MSE bars (zones without samples are skipped)."""
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    zones = [z for z in ZONE_LABELS if z in report.zones]
    fig, (ax_a, ax_s) = plt.subplots(1, 2, figsize=(10, 4))
    x = range(len(zones))
    ax_a.bar(x, [report.zones[z].mse_angle for z in zones], color="tab:blue")
    ax_a.axhline(report.mse_angle, color="black", linestyle="--", linewidth=1, label="overall")
    ax_a.set_title("MSE angle (deg$^2$)")
    ax_s.bar(x, [report.zones[z].mse_speed for z in zones], color="tab:orange")
    ax_s.axhline(report.mse_speed, color="black", linestyle="--", linewidth=1, label="overall")
    ax_s.set_title("MSE speed ((km/h)$^2$)")
    for ax in (ax_a, ax_s):
        ax.set_xticks(list(x))
        ax.set_xticklabels(zones, rotation=45, ha="right")
        ax.legend()
        ax.grid(True, axis="y", alpha=0.3)
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return out_path


def emit_report(
    out_dir: Path,
    report: MetricReport | None = None,
    logs: list[EpochLog] | None = None,
) -> list[Path]:
    """Write every artifact derivable from what is available; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    if logs:
        written.append(plot_loss_curves(logs, out_dir / "loss_curve.png"))
    if report is not None:
        written.append(write_metrics_csv(out_dir / "metrics.csv", report))
        table = format_metric_table(report)
        text_path = out_dir / "metrics.txt"
        text_path.write_text(table + "\n")
        written.append(text_path)
        if report.zones:
            written.append(plot_zone_mse(report, out_dir / "zone_mse.png"))
    return written
