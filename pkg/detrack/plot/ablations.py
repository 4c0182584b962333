import os
import sys
import matplotlib.pyplot as plt
import numpy as np
import pandas as pd  # type: ignore

from .colours import get_assignment_colour, get_denoising_colour, get_layers_cmap


def _error_bars(table: pd.DataFrame) -> np.ndarray:
    """(2, n) distances from the mean to the CI ends; zero where the CI is undefined."""
    return np.nan_to_num(
        np.vstack(
            [table["ao_mean"] - table["ao_ci_low"], table["ao_ci_high"] - table["ao_mean"]]
        )
    )


def _save(fig, name: str) -> None:
    fig.tight_layout()
    save_dir = os.path.join("plots", "ablations")
    os.makedirs(save_dir, exist_ok=True)
    fig.savefig(f"{save_dir}/{name}.pdf")
    plt.close(fig)


def plot_assignment_ablation(table: pd.DataFrame) -> None:
    budgets = [column for column in table.columns if column.startswith("ao_epoch_")]
    fig, ax = plt.subplots(figsize=(6, 4))
    width = 0.8 / len(table)
    for offset, (_, row) in enumerate(table.iterrows()):
        ax.bar(
            np.arange(len(budgets)) + offset * width,
            row[budgets].to_numpy(dtype=float),
            width=width,
            color=get_assignment_colour(row["assignment"]),
            label=row["assignment"],
        )
    ax.set_xticks(np.arange(len(budgets)) + 0.4 - width / 2)
    ax.set_xticklabels([f"{column.removeprefix('ao_epoch_')} epochs" for column in budgets])
    ax.set_ylabel("Validation AO")
    ax.set_ylim(0, 1)
    ax.legend(title="Assignment")
    _save(fig, "assignment")


def plot_denoising_ablation(table: pd.DataFrame) -> None:
    fig, ax = plt.subplots(figsize=(5, 4))
    ax.bar(
        table["denoising"],
        table["ao_mean"],
        yerr=_error_bars(table),
        capsize=4,
        color=[get_denoising_colour(variant) for variant in table["denoising"]],
    )
    ax.set_ylabel("Validation AO (mean, 95% CI)")
    ax.set_ylim(0, 1)
    _save(fig, "denoising")


def plot_layers_ablation(table: pd.DataFrame) -> None:
    layers_train = sorted(table["layers_train"].unique())
    cmap = plt.get_cmap(get_layers_cmap())
    fig, (ao_ax, flops_ax) = plt.subplots(1, 2, figsize=(10, 4))
    for index, trained in enumerate(layers_train):
        rows = table.loc[table["layers_train"] == trained]
        colour = cmap(0.4 + 0.6 * index / max(1, len(layers_train) - 1))
        ao_ax.errorbar(
            rows["layers_test"],
            rows["ao_mean"],
            yerr=_error_bars(rows),
            color=colour,
            marker="o",
            capsize=3,
            label=f"trained with {trained}",
        )
        flops_ax.plot(rows["layers_test"], rows["gflops"], color=colour, marker="o")
    ao_ax.set_ylabel("Validation AO (mean, 95% CI)")
    ao_ax.set_ylim(0, 1)
    ao_ax.legend(title="Decoder layers")
    flops_ax.set_ylabel("GFLOPs")
    for ax in (ao_ax, flops_ax):
        ax.set_xlabel("Decoder layers at test time")
        ax.set_xticks(range(1, max(layers_train) + 1))
    _save(fig, "layers")


PLOTTERS = {
    "assignment": plot_assignment_ablation,
    "denoising": plot_denoising_ablation,
    "layers": plot_layers_ablation,
}


def plot_ablations(out_dir: str = "output") -> None:
    for which, plotter in PLOTTERS.items():
        path = os.path.join(out_dir, "ablations", f"{which}.csv")
        if os.path.exists(path):
            plotter(pd.read_csv(path))


if __name__ == "__main__":
    plot_ablations(sys.argv[1] if len(sys.argv) > 1 else "output")
