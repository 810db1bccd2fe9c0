"""Training-curve figure: loss and validation Dice against epoch, learning rate below."""

from __future__ import annotations

from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402

from echoseg.dataset import ValidationError  # noqa: E402
from echoseg.trainer import read_curves  # noqa: E402


def plot_curves(run_dir, out) -> Path:
    run_dir = Path(run_dir)
    curves = run_dir / "curves.csv"
    if not curves.is_file():
        raise ValidationError(f"{run_dir} has no curves.csv")
    rows = read_curves(curves)
    if not rows:
        raise ValidationError(f"{curves} holds no completed epochs")
    out = Path(out)
    if out.suffix.lower() != ".png":
        out.mkdir(parents=True, exist_ok=True)
        out = out / "curves.png"
    else:
        out.parent.mkdir(parents=True, exist_ok=True)

    epochs = [int(r["epoch"]) for r in rows]
    fig, (ax, ax_lr) = plt.subplots(2, 1, figsize=(7, 6), sharex=True, height_ratios=(3, 1))
    ax.plot(epochs, [float(r["train_loss"]) for r in rows], color="tab:blue")
    ax.set_ylabel("training loss", color="tab:blue")
    ax_dice = ax.twinx()
    ax_dice.plot(epochs, [float(r["val_mean_dice"]) for r in rows], color="tab:red")
    ax_dice.set_ylabel("validation Dice", color="tab:red")
    ax_dice.set_ylim(0, 1)
    ax_lr.plot(epochs, [float(r["lr"]) for r in rows], color="tab:gray")
    ax_lr.set_ylabel("learning rate")
    ax_lr.set_xlabel("epoch")
    ax.set_title(run_dir.name)
    fig.tight_layout()
    fig.savefig(out, dpi=100)
    plt.close(fig)
    return out
