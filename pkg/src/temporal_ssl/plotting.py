"""Report figures and the tab-separated summary table."""

from __future__ import annotations

import json
import math
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

RC = {
    "figure.dpi": 100,
    "savefig.dpi": 100,
    "font.size": 9,
    "axes.spines.top": False,
    "axes.spines.right": False,
    "axes.grid": True,
    "grid.alpha": 0.3,
    "legend.frameon": False,
}
# keep the PNG bytes stable between runs
PNG_META = {"Software": None}


def read_jsonl(path) -> list[dict]:
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def _save(fig, path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, format="png", metadata=PNG_META)
    plt.close(fig)
    return path


def loss_curves(metrics: list[dict], path) -> Path:
    steps = [m for m in metrics if "step" in m]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        x = [m["step"] for m in steps]
        for key, label in (("loss_total", "total"), ("loss_motion", "motion"), ("loss_speed", "speed")):
            ax.plot(x, [m[key] for m in steps], lw=1, label=label)
        ax.axhline(math.log(4), color="0.5", ls=":", lw=0.8)
        ax.set_xlabel("step")
        ax.set_ylabel("cross-entropy")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def pretext_accuracy(metrics: list[dict], path) -> Path:
    epochs = [m for m in metrics if "epoch" in m]
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(5, 3.2))
        x = [m["epoch"] + 1 for m in epochs]
        ax.plot(x, [m["acc_motion"] for m in epochs], marker="o", ms=3, label="motion type")
        ax.plot(x, [m["acc_speed"] for m in epochs], marker="s", ms=3, label="speed")
        ax.axhline(0.25, color="0.5", ls=":", lw=0.8)
        ax.set_ylim(0, 1)
        ax.set_xlabel("epoch")
        ax.set_ylabel("held-out accuracy")
        ax.legend()
        fig.tight_layout()
        return _save(fig, path)


def retrieval_bars(rows: list[dict], path) -> Path:
    with plt.rc_context(RC):
        fig, ax = plt.subplots(figsize=(4, 3))
        ks = [str(r["k"]) for r in rows]
        ax.bar(ks, [r["accuracy"] for r in rows], color="C0")
        ax.set_ylim(0, 1)
        ax.set_xlabel("k")
        ax.set_ylabel("top-k accuracy")
        fig.tight_layout()
        return _save(fig, path)


def write_summary(rows: list[tuple[str, str, object]], path) -> Path:
    """Rows of (source, metric, value) as a tab-separated table."""
    path = Path(path)
    with open(path, "w") as fh:
        fh.write("source\tmetric\tvalue\n")
        for source, metric, value in rows:
            if isinstance(value, float):
                value = f"{value:.6g}"
            fh.write(f"{source}\t{metric}\t{value}\n")
    return path
