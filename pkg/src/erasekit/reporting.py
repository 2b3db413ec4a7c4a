"""Figure and summary rendering for run artifacts.

The report path turns training logs, metric reports, and embedding
diagnostics into PNG figures next to the delimited output, so a run
directory can be inspected without any interactive tooling.
"""

from __future__ import annotations

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt

from .errors import ConfigurationError
from .evaluation import MetricReport, write_reports

_SAVE_KWARGS = {"dpi": 120, "metadata": {"Software": "erasekit"}}


def _read_jsonl(path: Path) -> list[dict]:
    records = []
    for line in path.read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if line:
            records.append(json.loads(line))
    return records


def plot_training_log(log_path: str | Path, out_png: str | Path) -> Path:
    """Loss curve over steps, with probe losses marked."""
    log_path = Path(log_path)
    if not log_path.exists():
        raise ConfigurationError(f"training log not found: {log_path}")
    records = _read_jsonl(log_path)
    steps = [r["step"] for r in records if "loss" in r and "event" not in r]
    losses = [r["loss"] for r in records if "loss" in r and "event" not in r]
    probes = [(r["step"], r["probe_loss"]) for r in records if r.get("event") == "probe"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    if steps:
        ax.plot(steps, losses, lw=0.8, label="step loss")
    if probes:
        ax.plot(*zip(*probes), "o--", color="tab:red", label="probe loss")
    ax.set_xlabel("step")
    ax.set_ylabel("erasure loss")
    ax.set_yscale("log")
    ax.legend(loc="best")
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, **_SAVE_KWARGS)
    plt.close(fig)
    return out_png


def plot_similarity_series(series: list[dict] | str | Path, out_png: str | Path) -> Path:
    """Mean cosine similarity against bank size, one line per temperature."""
    if isinstance(series, (str, Path)):
        payload = json.loads(Path(series).read_text(encoding="utf-8"))
        series = payload["series"] if isinstance(payload, dict) else payload
    by_tau: dict[float, list[dict]] = {}
    for record in series:
        by_tau.setdefault(float(record["tau"]), []).append(record)
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for tau in sorted(by_tau):
        points = sorted(by_tau[tau], key=lambda r: r["bank_size"])
        sizes = [p["bank_size"] for p in points]
        means = [p["mean_cosine"] for p in points]
        stds = [p.get("std_cosine", 0.0) for p in points]
        ax.errorbar(sizes, means, yerr=stds, marker="o", capsize=2, label=f"tau={tau:g}")
    ax.set_xlabel("prompt bank size")
    ax.set_ylabel("mean cosine similarity to target")
    ax.legend(loc="best")
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, **_SAVE_KWARGS)
    plt.close(fig)
    return out_png


def plot_category_counts(counts: dict[str, int], out_png: str | Path, title: str = "") -> Path:
    """Bar chart of per-category failure counts."""
    labels = list(counts.keys())
    values = [counts[k] for k in labels]
    fig, ax = plt.subplots(figsize=(7, 3.5))
    ax.bar(range(len(labels)), values, color="tab:blue")
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=45, ha="right", fontsize=7)
    ax.set_ylabel("failure count")
    if title:
        ax.set_title(title)
    fig.tight_layout()
    out_png = Path(out_png)
    out_png.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(out_png, **_SAVE_KWARGS)
    plt.close(fig)
    return out_png


def render_report_dir(run_dir: str | Path, out_dir: str | Path | None = None) -> list[Path]:
    """Render every recognized artifact in a run directory.

    Training logs (*.log.jsonl) become loss curves, eval reports
    (report.json) become a merged CSV plus category bar charts, and
    embedding diagnostics (*.series.json) become similarity curves.
    Returns the paths written.
    """
    run_dir = Path(run_dir)
    if not run_dir.is_dir():
        raise ConfigurationError(f"run directory not found: {run_dir}")
    out = Path(out_dir) if out_dir is not None else run_dir / "report"
    out.mkdir(parents=True, exist_ok=True)
    written: list[Path] = []
    for log_path in sorted(run_dir.glob("*.log.jsonl")):
        written.append(plot_training_log(log_path, out / f"{log_path.stem.replace('.log', '')}_loss.png"))
    for series_path in sorted(run_dir.glob("*.series.json")):
        written.append(
            plot_similarity_series(series_path, out / f"{series_path.stem.replace('.series', '')}_similarity.png")
        )
    report_path = run_dir / "report.json"
    if report_path.exists():
        doc = json.loads(report_path.read_text(encoding="utf-8"))
        reports = [MetricReport(**record) for record in doc.get("reports", [])]
        csv_path = out / "metrics.csv"
        write_reports(reports, out / "report.json", csv_path)
        written.extend([out / "report.json", csv_path])
        for report in reports:
            if isinstance(report.value, dict):
                fig_path = out / f"{report.concept}_{report.metric}.png"
                written.append(plot_category_counts(report.value, fig_path, title=report.metric))
    return written
