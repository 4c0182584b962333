import itertools
import json
import os
import queue
import threading
import time
from dataclasses import dataclass
from typing import Iterator, TypeVar
import numpy as np
import pandas as pd  # type: ignore

from .autodiff import adamw_step
from .config import TrainConfig
from .data.synthetic import generate_batch, validation_sequences
from .encoder import ImagePair
from .flops import ArchSpec, compare, save_report
from .geometry import iou
from .model import Tracker, save_checkpoint
from .track import evaluate
from .training import compute_assignments, top_score_boxes, total_loss

CURVE_COLUMNS = [
    "step",
    "epoch",
    "loss",
    "cls",
    "loc",
    "cls_dn",
    "loc_dn",
    "iou",
    "lr_encoder",
    "lr_decoder",
    "eval_ao",
]

T = TypeVar("T")


class TrainingDivergedError(RuntimeError):
    pass


@dataclass
class RunArtifacts:
    """
    curves: one row per optimizer step with columns CURVE_COLUMNS; eval_ao is NaN
    except on evaluation steps.
    """

    curves: pd.DataFrame
    checkpoints: list[str]
    summary: dict
    flops: pd.DataFrame
    model: Tracker


Batch = tuple[ImagePair, np.ndarray]


def sample_batches(config: TrainConfig, rng: np.random.Generator) -> Iterator[Batch]:
    while True:
        templates, searches, gts = generate_batch(
            rng,
            config.batch_size,
            config.difficulty,
            config.model.template_size,
            config.model.search_size,
        )
        yield ImagePair(templates, searches), gts


def prefetched(items: Iterator[T], size: int, n_items: int) -> Iterator[T]:
    """
    Produce the first n_items of `items` on a background thread into a buffer of
    `size`; items come out in production order. Closing the consumer early stops the
    producer, even when it is blocked on a full buffer.
    """
    buffer: queue.Queue = queue.Queue(maxsize=size)
    stop = threading.Event()

    def put(entry: tuple) -> bool:
        while not stop.is_set():
            try:
                buffer.put(entry, timeout=0.1)
                return True
            except queue.Full:
                continue
        return False

    def produce():
        try:
            for item in itertools.islice(items, n_items):
                if not put((item, None)):
                    return
        except Exception as e:  # handed to the consumer
            put((None, e))

    producer = threading.Thread(target=produce, daemon=True)
    producer.start()
    try:
        for _ in range(n_items):
            item, error = buffer.get()
            if error is not None:
                raise error
            yield item
    finally:
        stop.set()
        producer.join()


def train_step(
    model: Tracker,
    pair: ImagePair,
    gt: np.ndarray,
    config: TrainConfig,
    step: int,
    rng: np.random.Generator,
) -> dict[str, float]:
    """One forward / backward / AdamW update; returns the step's metrics."""
    model.zero_grad()
    output, dn_batch = model.forward(pair, gt=gt, dn=config.dn, rng=rng)
    targets = compute_assignments(
        output,
        gt,
        model.encoder.search_grid,
        config.assignment,
        config.k_loc,
        config.loss,
        dn_batch,
    )
    loss, terms = total_loss(output, targets, config.loss)
    lr_encoder, lr_decoder = config.learning_rates(step)
    metrics = {
        "step": step,
        "epoch": step // config.steps_per_epoch,
        "loss": loss.item(),
        **terms,
        "iou": float(np.mean(iou(top_score_boxes(output), gt))),
        "lr_encoder": lr_encoder,
        "lr_decoder": lr_decoder,
    }
    if not np.isfinite(metrics["loss"]):
        raise TrainingDivergedError(f"non-finite loss at step {step}: {metrics}")
    loss.backward()
    groups = model.parameter_groups
    grads = {name: [param.grad for param in params] for name, params in groups.items()}
    if not all(
        np.isfinite(grad).all() for group in grads.values() for grad in group if grad is not None
    ):
        raise TrainingDivergedError(f"non-finite gradient at step {step}: {metrics}")
    for (name, params), lr in zip(groups.items(), [lr_encoder, lr_decoder]):
        adamw_step(params, grads[name], lr, config.betas, config.weight_decay)
    return metrics


def write_snapshot(model: Tracker, out_dir: str, step: int, metrics: dict) -> None:
    save_checkpoint(model, os.path.join(out_dir, "checkpoints", f"diverged_step_{step:06d}.pkl"))
    with open(os.path.join(out_dir, f"diverged_step_{step:06d}.json"), "w", encoding="utf-8") as f:
        json.dump(metrics, f, indent=2, default=str)


def steps_to_threshold(curves: pd.DataFrame, threshold: float) -> int | None:
    """Optimizer steps taken when evaluation AO first reached `threshold`, if ever."""
    reached = curves[curves["eval_ao"] >= threshold]
    return None if reached.empty else int(reached["step"].iloc[0]) + 1


def train(
    config: TrainConfig,
    out_dir: str | None = "output",
    verbose: bool = True,
    fixed_batch: Batch | None = None,
) -> RunArtifacts:
    """
    Train a fresh model. With `fixed_batch`, every step reuses that batch. With an
    output directory, writes checkpoints (initial and per epoch), curves.csv,
    summary.json and the FLOPs report.
    """
    config = config.validate()
    start_time = time.time()
    if verbose:
        print(
            f"-----training: assignment={config.assignment}, "
            f"dn={'on' if config.dn.enabled else 'off'}, seed={config.seed}-----"
        )
    model = Tracker(config.model, seed=config.seed)
    data_rng = np.random.default_rng([config.seed, 1])
    dn_rng = np.random.default_rng([config.seed, 2])
    eval_set = (
        validation_sequences(
            config.eval_sequences,
            config.eval_frames,
            config.difficulty,
            template_size=config.model.template_size,
            search_size=config.model.search_size,
        )
        if config.eval_every
        else []
    )
    checkpoints: list[str] = []

    def checkpoint(step: int) -> None:
        if out_dir is not None:
            path = os.path.join(out_dir, "checkpoints", f"step_{step:06d}.pkl")
            save_checkpoint(model, path)
            checkpoints.append(path)

    checkpoint(0)
    total_steps = config.total_steps
    batches = (
        itertools.repeat(fixed_batch)
        if fixed_batch is not None
        else sample_batches(config, data_rng)
    )
    if config.prefetch and fixed_batch is None:
        batches = prefetched(batches, config.prefetch, total_steps)

    rows = []
    for step in range(total_steps):
        pair, gt = next(batches)
        try:
            metrics = train_step(model, pair, gt, config, step, dn_rng)
        except TrainingDivergedError:
            if out_dir is not None:
                write_snapshot(
                    model,
                    out_dir,
                    step,
                    {"step": step, "lr": config.learning_rates(step), "assignment": config.assignment},
                )
            raise
        metrics["eval_ao"] = np.nan
        if config.eval_every and (step + 1) % config.eval_every == 0:
            metrics["eval_ao"] = evaluate(model, eval_set)
        rows.append(metrics)
        if (step + 1) % config.steps_per_epoch == 0 or step + 1 == total_steps:
            checkpoint(step + 1)
            if verbose:
                recent = pd.DataFrame(rows[-config.steps_per_epoch :])
                print(
                    f"epoch {metrics['epoch'] + 1}/{config.epochs}: "
                    f"loss {recent['loss'].mean():.4f}, iou {recent['iou'].mean():.4f}"
                    + (
                        f", eval AO {metrics['eval_ao']:.4f}"
                        if not np.isnan(metrics["eval_ao"])
                        else ""
                    )
                )

    curves = pd.DataFrame(rows, columns=CURVE_COLUMNS)
    evaluated = curves["eval_ao"].dropna()
    summary = {
        "steps": total_steps,
        "seed": config.seed,
        "assignment": config.assignment,
        "denoising": config.dn.variant if config.dn.enabled else "off",
        "decoder_layers": config.model.decoder_layers,
        "final_loss": float(curves["loss"].iloc[-1]) if total_steps else None,
        "final_iou": float(curves["iou"].tail(config.steps_per_epoch).mean()) if total_steps else None,
        "final_eval_ao": float(evaluated.iloc[-1]) if len(evaluated) else None,
        "iou_threshold": config.iou_threshold,
        "steps_to_threshold": steps_to_threshold(curves, config.iou_threshold),
    }
    flops = compare(
        ArchSpec.from_model_config(config.model, "conv"),
        ArchSpec.from_model_config(config.model, "decoder"),
    )
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        curves.to_csv(os.path.join(out_dir, "curves.csv"), index=False)
        with open(os.path.join(out_dir, "summary.json"), "w", encoding="utf-8") as f:
            json.dump(summary, f, indent=2)
        save_report({"model": flops}, out_dir)
    if verbose:
        print(f"Time taken: {time.time() - start_time:.2f}s")
        print()
    return RunArtifacts(curves, checkpoints, summary, flops, model)
