"""Figures written next to the CSV outputs of the command-line tools."""
from __future__ import annotations

from pathlib import Path
from typing import Mapping, Sequence

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .market_math import OptionKind  # noqa: E402
from .train_eval import EpochLog, EvalReport  # noqa: E402

_SAVE_KW = dict(dpi=120, bbox_inches="tight", metadata={"Software": None})


def _finish(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.savefig(path, **_SAVE_KW)
    plt.close(fig)
    return path


def plot_gain_by_bucket(report: EvalReport, path: str | Path, title: str = "") -> Path:
    buckets = sorted(report.per_bucket)
    gains = [report.per_bucket[b].gain or 0.0 for b in buckets]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar([f"{b:.1f}" for b in buckets], gains, color="tab:blue")
    ax.axhline(0.0, color="k", lw=0.8)
    if report.overall.gain is not None:
        ax.axhline(report.overall.gain, color="tab:red", ls="--", lw=1,
                   label=f"overall {report.overall.gain:.4f}")
        ax.legend(loc="best", frameon=False)
    ax.set_xlabel("delta bucket")
    ax.set_ylabel("gain vs BS delta")
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def plot_hedge_ratio_curves(curves: Mapping[str, Sequence[tuple[float, float]]], kind: OptionKind,
                            path: str | Path, title: str = "") -> Path:
    fig, ax = plt.subplots(figsize=(5, 4))
    lo, hi = (0.0, 1.0) if kind is OptionKind.CALL else (-1.0, 0.0)
    ax.plot([lo, hi], [lo, hi], color="0.5", ls=":", lw=1, label="BS delta")
    for label, pts in curves.items():
        if pts:
            xs, ys = zip(*pts)
            ax.plot(xs, ys, marker="o", ms=3, label=label)
    ax.set_xlabel("BS delta")
    ax.set_ylabel("hedge ratio")
    ax.legend(loc="best", frameon=False)
    if title:
        ax.set_title(title)
    return _finish(fig, path)


def plot_training_log(log: Sequence[EpochLog], path: str | Path) -> Path:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    if log:
        ep = [e.epoch for e in log]
        ax.plot(ep, [e.train_loss for e in log], label="train")
        ax.plot(ep, [e.val_loss for e in log], label="validation")
        ax.set_yscale("log")
        ax.legend(frameon=False)
    ax.set_xlabel("epoch")
    ax.set_ylabel("hedging MSE")
    return _finish(fig, path)
