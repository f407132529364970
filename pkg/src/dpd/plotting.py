"""Figure rendering for the report-emitting subcommands.

Every CSV report has a companion PNG written next to it (same stem) unless
the caller opts out. matplotlib is imported lazily with the Agg backend so
library use never requires a display.
"""

from __future__ import annotations

import numpy as np


def _pyplot():
    import matplotlib
    matplotlib.use("Agg", force=False)
    import matplotlib.pyplot as plt
    return plt


def png_sibling(csv_path: str) -> str:
    stem = csv_path[:-4] if csv_path.endswith(".csv") else csv_path
    return stem + ".png"


def render_schedule(schedule, kind: str, path: str) -> None:
    plt = _pyplot()
    t = np.arange(1, schedule.step_count + 1)
    fig, (ax1, ax2) = plt.subplots(1, 2, figsize=(8, 3.2))
    ax1.step(t, schedule.omegas, where="mid")
    ax1.set_xlabel("t")
    ax1.set_ylabel("step size $\\omega_t$ (rad)")
    ax1.set_title(f"{kind} schedule, T={schedule.step_count}")
    ax2.plot(t, schedule.deltas, marker=".", lw=1)
    ax2.set_xlabel("t")
    ax2.set_ylabel("anchor angle $\\delta_t$ (rad)")
    ax2.axhline(np.pi / 2, color="gray", lw=0.6, ls="--")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_loss_curve(losses, path: str, evals=None) -> None:
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(6, 3.2))
    steps = np.arange(1, len(losses) + 1)
    ax.plot(steps, losses, lw=0.6, alpha=0.5, label="loss")
    if len(losses) >= 20:
        w = max(10, len(losses) // 50)
        smooth = np.convolve(losses, np.ones(w) / w, mode="valid")
        ax.plot(np.arange(w, len(losses) + 1), smooth, lw=1.5, label=f"mean({w})")
    ax.set_xlabel("step")
    ax.set_ylabel("training loss")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    if evals:
        ax2 = ax.twinx()
        ax2.plot([s for s, _, _ in evals], [sn for _, _, sn in evals],
                 color="tab:red", marker="o", ms=3, lw=1)
        ax2.set_ylabel("held-out SI-SNRi (dB)", color="tab:red")
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)


def render_ablation(rows, path: str) -> None:
    """rows: (schedule, steps, latent_mse)."""
    plt = _pyplot()
    fig, ax = plt.subplots(figsize=(5, 3.2))
    by_kind = {}
    for kind, T, err in rows:
        by_kind.setdefault(kind, []).append((T, err))
    for kind, vals in sorted(by_kind.items()):
        vals.sort()
        ax.plot([t for t, _ in vals], [e for _, e in vals], marker="o", label=kind)
    ax.set_xlabel("sampling steps T")
    ax.set_ylabel("latent MSE vs reference")
    ax.set_yscale("log")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=110)
    plt.close(fig)
