"""Figures for the report subcommands.  All rendering goes through the Agg backend."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402
import numpy as np  # noqa: E402

# no version/date chunks, so identical data gives identical files
_SAVE = {"dpi": 100, "metadata": {"Software": None}}


def _save(fig, path) -> None:
    fig.tight_layout()
    fig.savefig(path, format="png", **_SAVE)
    plt.close(fig)


def training_curve(steps, series: dict[str, list[float]], path, title: str = "training losses") -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    for name, ys in series.items():
        ax.plot(steps, ys, label=name, lw=1)
    ax.set_xlabel("step")
    ax.set_ylabel("loss")
    ax.set_title(title)
    ax.legend(fontsize=8)
    _save(fig, path)


def mse_curve(iterations, mse, path, title: str = "latent change between iterations") -> None:
    fig, ax = plt.subplots(figsize=(5, 3.5))
    ax.semilogy(iterations, mse, marker="o", ms=3)
    ax.set_xlabel("iteration t (h^(t) -> h^(t+1))")
    ax.set_ylabel("MSE over non-final tokens")
    ax.set_title(title)
    _save(fig, path)


def heatmap(matrix: np.ndarray, path, title: str, labels=None, cmap: str = "viridis") -> None:
    n = matrix.shape[0]
    size = min(12, 3 + 0.18 * n)
    fig, ax = plt.subplots(figsize=(size, size))
    im = ax.imshow(matrix, cmap=cmap)
    fig.colorbar(im, ax=ax, fraction=0.046)
    if labels is not None and n <= 80:
        ax.set_xticks(range(n))
        ax.set_yticks(range(n))
        ax.set_xticklabels(labels, rotation=90, fontsize=5)
        ax.set_yticklabels(labels, fontsize=5)
    ax.set_title(title)
    _save(fig, path)


def sweep_plot(summary: list[dict], path) -> None:
    fig, ax = plt.subplots(figsize=(6, 4))
    cs = sorted({r["c"] for r in summary if r["mode"] != "ccot"})
    for c in cs:
        pts = sorted((r["T"], r["mean"], r["std"]) for r in summary if r["c"] == c and r["mode"] != "ccot")
        T, m, s = zip(*pts)
        ax.errorbar(T, m, yerr=s, marker="o", capsize=3, label=f"c={c}")
    for r in summary:
        if r["mode"] == "ccot":
            ax.axhline(r["mean"], ls="--", lw=1, color="gray")
            ax.text(0, r["mean"], f" ccot c={r['c']}", fontsize=7, va="bottom")
    ax.set_xlabel("extra iterations T")
    ax.set_ylabel("test accuracy")
    ax.legend(fontsize=8)
    _save(fig, path)


def bench_bars(records, path) -> None:
    fig, ax = plt.subplots(figsize=(6, 3.5))
    x = np.arange(len(records))
    ax.bar(x - 0.2, [r.ccot_seconds * 1e3 for r in records], 0.4, label="sequential")
    ax.bar(x + 0.2, [r.pccot_seconds * 1e3 for r in records], 0.4, label="jacobi")
    ax.set_xticks(x)
    ax.set_xticklabels([f"c={r.c}\nT={r.T}" for r in records], fontsize=8)
    ax.set_ylabel("latent block, ms (median)")
    ax.legend(fontsize=8)
    _save(fig, path)
