import os
import sys
import matplotlib.pyplot as plt
import pandas as pd  # type: ignore

from .colours import get_assignment_colour

from ..ablation import ASSIGNMENT_ORDER


def smooth(values: pd.Series, window: int) -> pd.Series:
    return values.rolling(window, min_periods=1).mean()


def plot_assignment_curves(out_dir: str = "output", window: int = 10) -> None:
    """Training IoU and evaluation AO against optimizer step, one colour per assignment mode."""
    curves = pd.read_csv(os.path.join(out_dir, "ablations", "assignment_curves.csv"))
    fig, (iou_ax, ao_ax) = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for assignment in ASSIGNMENT_ORDER:
        runs = curves.loc[curves["assignment"] == assignment]
        if runs.empty:
            continue
        colour = get_assignment_colour(assignment)
        mean_iou = runs.groupby("step")["iou"].mean()
        iou_ax.plot(mean_iou.index, smooth(mean_iou, window), color=colour, label=assignment)
        evaluated = runs.dropna(subset=["eval_ao"]).groupby("step")["eval_ao"]
        ao_ax.errorbar(
            evaluated.mean().index + 1,
            evaluated.mean(),
            yerr=evaluated.std().fillna(0),
            color=colour,
            marker="o",
            capsize=3,
            label=assignment,
        )
    iou_ax.set_xlabel("Optimizer step")
    iou_ax.set_ylabel(f"Training IoU (rolling mean over {window} steps)")
    ao_ax.set_xlabel("Optimizer step")
    ao_ax.set_ylabel("Validation AO")
    for ax in (iou_ax, ao_ax):
        ax.set_ylim(0, 1)
        ax.legend(title="Assignment")
    fig.tight_layout()
    save_dir = os.path.join("plots", "curves")
    os.makedirs(save_dir, exist_ok=True)
    fig.savefig(f"{save_dir}/assignment_iou_vs_step.pdf")
    plt.close(fig)


def plot_training_run(out_dir: str = "output", window: int = 10) -> None:
    curves = pd.read_csv(os.path.join(out_dir, "curves.csv"))
    fig, axes = plt.subplots(1, 2, figsize=(10, 4), sharex=True)
    for term in ["loss", "cls", "loc", "cls_dn", "loc_dn"]:
        if curves[term].abs().sum() > 0:
            axes[0].plot(
                curves["step"],
                smooth(curves[term], window),
                label=term,
                linestyle="-" if term == "loss" else "--",
            )
    axes[0].set_yscale("log")
    axes[0].set_ylabel("Loss")
    axes[0].legend()
    axes[1].plot(curves["step"], smooth(curves["iou"], window), label="training IoU")
    evaluated = curves.dropna(subset=["eval_ao"])
    if len(evaluated):
        axes[1].plot(evaluated["step"] + 1, evaluated["eval_ao"], marker="o", label="validation AO")
    axes[1].set_ylim(0, 1)
    axes[1].legend()
    for ax in axes:
        ax.set_xlabel("Optimizer step")
    fig.tight_layout()
    save_dir = os.path.join("plots", "curves")
    os.makedirs(save_dir, exist_ok=True)
    fig.savefig(f"{save_dir}/{os.path.basename(os.path.normpath(out_dir))}_training.pdf")
    plt.close(fig)


if __name__ == "__main__":
    out_dir_ = sys.argv[1] if len(sys.argv) > 1 else "output"
    if os.path.exists(os.path.join(out_dir_, "curves.csv")):
        plot_training_run(out_dir_)
    if os.path.exists(os.path.join(out_dir_, "ablations", "assignment_curves.csv")):
        plot_assignment_curves(out_dir_)
