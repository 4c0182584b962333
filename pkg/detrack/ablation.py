"""
Desk-scale ablation experiments:

    assignment  center / hungarian / hard / quality assignment, evaluation AO at several
                epoch budgets, and the Kaplan-Meier median of optimizer steps until
                the AO threshold is reached (runs that never reach it are censored)
    denoising   no denoising vs the embedding, center_corner and center_outside
                variants, seed mean of the final AO with a 95% t interval
    layers      models trained with 2, 3 and 4 decoder layers, evaluated at every
                valid number of test layers, with the pipeline GFLOPs at that depth
"""

import dataclasses
import os
import time
import numpy as np
import pandas as pd  # type: ignore
from lifelines import KaplanMeierFitter  # type: ignore
from statsmodels.stats.weightstats import DescrStatsW  # type: ignore

from .config import ConfigurationError, TrainConfig
from .data.synthetic import validation_sequences
from .flops import ArchSpec, decoder_gflops
from .track import evaluate
from .train import RunArtifacts, steps_to_threshold, train

ABLATIONS = ("assignment", "denoising", "layers")
ASSIGNMENT_ORDER = ("center", "hungarian", "hard", "quality")
DENOISING_ROWS = ("baseline", "embedding", "center_corner", "center_outside")
LAYER_COUNTS = (2, 3, 4)


def seed_summary(values: list[float]) -> dict[str, float]:
    """Mean with a 95% t confidence interval; the interval is NaN for a single value."""
    stats = DescrStatsW(np.asarray(values, dtype=float))
    low, high = stats.tconfint_mean(alpha=0.05) if len(values) > 1 else (np.nan, np.nan)
    return {"ao_mean": stats.mean, "ao_ci_low": low, "ao_ci_high": high, "n_seeds": len(values)}


def median_steps_to_threshold(durations: list[int], reached: list[bool]) -> float:
    """Kaplan-Meier median; inf when fewer than half of the runs reach the threshold."""
    fitter = KaplanMeierFitter()
    fitter.fit(durations, event_observed=reached)
    return float(fitter.median_survival_time_)


def epoch_budgets(epochs: int) -> list[int]:
    return sorted({max(1, epochs // 4), max(1, epochs // 2), epochs})


def _eval_set(config: TrainConfig):
    return validation_sequences(
        config.eval_sequences,
        config.eval_frames,
        config.difficulty,
        template_size=config.model.template_size,
        search_size=config.model.search_size,
    )


def _run(config: TrainConfig, verbose: bool) -> RunArtifacts:
    return train(config, out_dir=None, verbose=verbose)


def assignment_ablation(
    config: TrainConfig, seeds: list[int], verbose: bool = True
) -> tuple[pd.DataFrame, pd.DataFrame]:
    """
    Returns (summary, curves). summary has one row per mode with columns: assignment,
    ao_epoch_<e> for each budget, reached_fraction, median_steps_to_threshold.
    curves holds every run's per-step curve with assignment and seed columns.
    """
    config = dataclasses.replace(config, eval_every=config.eval_every or config.steps_per_epoch)
    budgets = epoch_budgets(config.epochs)
    summary, curves = [], []
    for mode in ASSIGNMENT_ORDER:
        durations, reached = [], []
        per_budget: dict[int, list[float]] = {budget: [] for budget in budgets}
        for seed in seeds:
            run = _run(dataclasses.replace(config, assignment=mode, seed=seed), verbose)
            evaluated = run.curves.dropna(subset=["eval_ao"])
            for budget in budgets:
                at_budget = evaluated[evaluated["step"] < budget * config.steps_per_epoch]
                per_budget[budget].append(
                    float(at_budget["eval_ao"].iloc[-1]) if len(at_budget) else np.nan
                )
            steps = steps_to_threshold(run.curves, config.iou_threshold)
            durations.append(steps if steps is not None else config.total_steps)
            reached.append(steps is not None)
            curves.append(run.curves.assign(assignment=mode, seed=seed))
        summary.append(
            {
                "assignment": mode,
                **{f"ao_epoch_{budget}": np.nanmean(per_budget[budget]) for budget in budgets},
                "reached_fraction": float(np.mean(reached)),
                "median_steps_to_threshold": median_steps_to_threshold(durations, reached),
            }
        )
    return pd.DataFrame(summary), pd.concat(curves, ignore_index=True)


def denoising_ablation(
    config: TrainConfig, seeds: list[int], verbose: bool = True
) -> pd.DataFrame:
    """One row per variant with columns: denoising, ao_mean, ao_ci_low, ao_ci_high, n_seeds."""
    eval_set = _eval_set(config)
    rows = []
    for variant in DENOISING_ROWS:
        dn = (
            dataclasses.replace(config.dn, enabled=False)
            if variant == "baseline"
            else dataclasses.replace(config.dn, enabled=True, variant=variant)
        )
        scores = [
            evaluate(_run(dataclasses.replace(config, dn=dn, seed=seed), verbose).model, eval_set)
            for seed in seeds
        ]
        rows.append({"denoising": variant, **seed_summary(scores)})
    return pd.DataFrame(rows)


def layers_ablation(
    config: TrainConfig,
    seeds: list[int],
    layer_counts: tuple[int, ...] = LAYER_COUNTS,
    verbose: bool = True,
) -> pd.DataFrame:
    """
    One row per (layers_train, layers_test) with columns: layers_train, layers_test,
    ao_mean, ao_ci_low, ao_ci_high, n_seeds, gflops.
    """
    eval_set = _eval_set(config)
    rows = []
    for layers_train in layer_counts:
        trained = dataclasses.replace(
            config, model=dataclasses.replace(config.model, decoder_layers=layers_train)
        )
        models = [_run(dataclasses.replace(trained, seed=seed), verbose).model for seed in seeds]
        spec = ArchSpec.from_model_config(trained.model)
        for layers_test in range(1, layers_train + 1):
            scores = [evaluate(model, eval_set, layers_test) for model in models]
            rows.append(
                {
                    "layers_train": layers_train,
                    "layers_test": layers_test,
                    **seed_summary(scores),
                    "gflops": decoder_gflops(spec, layers_test),
                }
            )
    return pd.DataFrame(rows)


def run_ablation(
    which: str,
    config: TrainConfig,
    seeds: list[int] | None = None,
    out_dir: str | None = "output",
    verbose: bool = True,
) -> pd.DataFrame:
    """Run one ablation; with an output directory the table goes to ablations/<which>.csv."""
    if which not in ABLATIONS:
        raise ConfigurationError(f"ablation must be one of {ABLATIONS}, got '{which}'")
    seeds = list(seeds) if seeds is not None else [config.seed, config.seed + 1, config.seed + 2]
    start_time = time.time()
    if verbose:
        print(f"-----{which} ablation over seeds {seeds}-----")
    curves = None
    if which == "assignment":
        table, curves = assignment_ablation(config, seeds, verbose)
    elif which == "denoising":
        table = denoising_ablation(config, seeds, verbose)
    else:
        table = layers_ablation(config, seeds, verbose=verbose)
    if out_dir is not None:
        save_dir = os.path.join(out_dir, "ablations")
        os.makedirs(save_dir, exist_ok=True)
        table.to_csv(os.path.join(save_dir, f"{which}.csv"), index=False)
        if curves is not None:
            curves.to_csv(os.path.join(save_dir, f"{which}_curves.csv"), index=False)
    if verbose:
        print(table.to_string(index=False))
        print(f"Time taken: {time.time() - start_time:.2f}s")
        print()
    return table
