"""Figures for the report paths of the CLI. Everything is written to files."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

PNG_META = {"Software": None}  # keep output bytes independent of the matplotlib version


def _save(fig, path: str | Path) -> Path:
    path = Path(path)
    fig.tight_layout()
    fig.savefig(path, dpi=120, metadata=PNG_META)
    plt.close(fig)
    return path


def plot_scaling_curve(alphas, fractions, path, title: str = "Refusal under activation addition"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.plot(alphas, fractions, marker="o")
    ax.set_xlabel("alpha")
    ax.set_ylabel("refusal fraction (safe prompts)")
    ax.set_ylim(-0.05, 1.05)
    ax.set_title(title)
    return _save(fig, path)


def plot_cosine_profiles(profiles: dict[str, list[float]], path, title: str = "Cosine with the residual stream"):
    fig, ax = plt.subplots(figsize=(6, 4))
    for name in sorted(profiles):
        ax.plot(range(len(profiles[name])), profiles[name], marker="o", label=name)
    ax.axhline(0.0, color="black", linewidth=0.5)
    ax.set_xlabel("hook point")
    ax.set_ylabel("mean cosine (last prompt token)")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def plot_best_of_n(curves: dict[str, list[float]], path, title: str = "Best-of-N attack success"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for name in sorted(curves):
        c = curves[name]
        ax.plot(range(1, len(c) + 1), c, marker=".", label=name)
    ax.set_xscale("log")
    ax.set_xlabel("N")
    ax.set_ylabel("ASR")
    ax.set_ylim(-0.05, 1.05)
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def plot_cone_asr(asr_values: list[float], baseline: float, path, title: str = "ASR of sampled cone directions"):
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.hist(asr_values, bins=20, range=(0, 1))
    ax.axvline(baseline, color="red", linestyle="--", label=f"random baseline {baseline:.2f}")
    ax.set_xlabel("ASR")
    ax.set_ylabel("samples")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)


def plot_loss_history(history: list[dict], path, keys=("total", "ablation", "addition", "retain"), title: str = "Training loss"):
    fig, ax = plt.subplots(figsize=(6, 4))
    steps = [h["step"] for h in history]
    for k in keys:
        if history and k in history[0]:
            ax.plot(steps, [h[k] for h in history], label=k)
    if history and "loss" in history[0] and "total" not in history[0]:
        ax.plot(steps, [h["loss"] for h in history], label="loss")
    ax.set_yscale("log")
    ax.set_xlabel("step")
    ax.legend(fontsize=8)
    ax.set_title(title)
    return _save(fig, path)
