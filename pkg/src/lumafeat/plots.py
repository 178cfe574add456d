"""Static matplotlib plots for training records and evaluation reports."""

import json
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .training import TrainRecord  # noqa: E402


def loss_curves(record_path, out_path, title="training losses"):
    record = TrainRecord.load_jsonl(record_path)
    steps = [e["step"] for e in record.entries]
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(10, 4))
    ax1.plot(steps, [e["total"] for e in record.entries], label="total")
    ax1.plot(steps, [e["Lr"] for e in record.entries], label="repeatability")
    ax1.set_yscale("log")
    ax1.set_xlabel("step")
    ax1.set_title(title)
    ax1.legend()
    ax2.plot(steps, [e["Li"] for e in record.entries], label="similarity")
    ax2.plot(steps, [e["Ld"] for e in record.entries], label="disparity")
    ax2.set_xlabel("step")
    ax2.legend()
    if record.snapshots:
        snap_steps = [s["step"] for s in record.snapshots]
        ax2.plot(snap_steps, [s["sp_cs"] for s in record.snapshots], "o--",
                 label="SP cosine")
        ax2.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)


def metric_vs_illumination(report_path, out_path):
    payload = json.loads(Path(report_path).read_text())
    fig, ax = plt.subplots(figsize=(8, 4))
    width = 0.8 / max(len(payload["runs"]), 1)
    for k, (name, report) in enumerate(sorted(payload["runs"].items())):
        per = report.get("per_condition_repeatability", {})
        if not per:
            continue
        labels = list(per.keys())
        xs = [i + k * width for i in range(len(labels))]
        ax.bar(xs, list(per.values()), width=width, label=name)
    ax.set_xticks(range(len(labels)))
    ax.set_xticklabels(labels, rotation=30, ha="right")
    ax.set_ylabel(f"repeatability @ eps={payload.get('epsilon', 1.0)}")
    ax.set_title("repeatability per held-out illumination condition")
    ax.legend()
    fig.tight_layout()
    fig.savefig(out_path, dpi=120)
    plt.close(fig)
    return Path(out_path)
