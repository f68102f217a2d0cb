"""Static figures of run logs, written to image files (no interactive display)."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from .metrics import ERR_P, ERR_R, CsvLog  # noqa: E402

AXES = "xyz"


def plot_errors(logs: dict[str, CsvLog], out: Path) -> Path:
    """Position and rotation error components against time, one line per log."""
    fig, axes = plt.subplots(2, 3, figsize=(11, 5.5), sharex=True)
    for name, lg in logs.items():
        t = lg.data["t"]
        for a in range(3):
            axes[0, a].plot(t, lg.data[ERR_P[a]], lw=0.9, label=name)
            axes[1, a].plot(t, lg.data[ERR_R[a]], lw=0.9, label=name)
    for a in range(3):
        axes[0, a].set_title(f"position error {AXES[a]}")
        axes[1, a].set_title(f"rotation error {AXES[a]}")
        axes[1, a].set_xlabel("t (s)")
    axes[0, 0].set_ylabel("m")
    axes[1, 0].set_ylabel("rad")
    axes[0, 0].legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def plot_path(logs: dict[str, CsvLog], out: Path) -> Path:
    """Top view of the flown paths over the reference."""
    fig, ax = plt.subplots(figsize=(5.5, 5.5))
    first = next(iter(logs.values()))
    ax.plot(first.data["p_ref_x"], first.data["p_ref_y"], "k--", lw=1.0, label="reference")
    for name, lg in logs.items():
        ax.plot(lg.data["p_true_x"], lg.data["p_true_y"], lw=0.9, label=name)
    ax.set_aspect("equal")
    ax.set_xlabel("x (m)")
    ax.set_ylabel("y (m)")
    ax.legend(fontsize="small")
    fig.tight_layout()
    fig.savefig(out, dpi=120)
    plt.close(fig)
    return out


def render(logs: dict[str, CsvLog], out_dir, stem: str = "run") -> list[Path]:
    """Write ``<stem>_errors.png`` and ``<stem>_path.png`` into ``out_dir``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    return [plot_errors(logs, out_dir / f"{stem}_errors.png"),
            plot_path(logs, out_dir / f"{stem}_path.png")]
