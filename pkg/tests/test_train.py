import dataclasses
import json
import os
import threading
import time
import numpy as np
import pandas as pd  # type: ignore
import pytest

from detrack import train as train_module
from detrack.autodiff import DiffArray
from detrack.config import DenoisingConfig, TrainConfig
from detrack.model import load_checkpoint
from detrack.train import (
    CURVE_COLUMNS,
    TrainingDivergedError,
    prefetched,
    sample_batches,
    steps_to_threshold,
    train,
)


@pytest.fixture
def tiny_train_config(tiny_config) -> TrainConfig:
    return TrainConfig(
        epochs=2,
        pairs_per_epoch=4,
        batch_size=2,
        model=tiny_config,
        dn=DenoisingConfig(n_groups=2),
    )


def test_train_writes_artifacts(tiny_train_config, tmp_path):
    run = train(tiny_train_config, out_dir=str(tmp_path), verbose=False)
    assert list(run.curves.columns) == CURVE_COLUMNS
    assert len(run.curves) == tiny_train_config.total_steps == 4
    assert [os.path.basename(path) for path in run.checkpoints] == [
        "step_000000.pkl",
        "step_000002.pkl",
        "step_000004.pkl",
    ]
    saved = pd.read_csv(tmp_path / "curves.csv")
    np.testing.assert_allclose(saved["loss"], run.curves["loss"])
    with open(tmp_path / "summary.json", encoding="utf-8") as f:
        summary = json.load(f)
    assert summary["steps"] == 4
    assert summary["denoising"] == "center_corner"
    assert (tmp_path / "flops_report.json").exists()
    restored = load_checkpoint(run.checkpoints[-1])
    for name, value in run.model.state_dict().items():
        np.testing.assert_array_equal(restored.state_dict()[name], value)


def test_train_is_deterministic(tiny_train_config, tmp_path):
    first = train(tiny_train_config, out_dir=str(tmp_path / "a"), verbose=False)
    second = train(tiny_train_config, out_dir=str(tmp_path / "b"), verbose=False)
    pd.testing.assert_frame_equal(first.curves, second.curves)
    for a, b in zip(first.checkpoints, second.checkpoints):
        with open(a, "rb") as fa, open(b, "rb") as fb:
            assert fa.read() == fb.read()


def test_prefetch_does_not_change_the_run(tiny_train_config):
    plain = train(tiny_train_config, out_dir=None, verbose=False)
    buffered = train(
        dataclasses.replace(tiny_train_config, prefetch=2), out_dir=None, verbose=False
    )
    pd.testing.assert_frame_equal(plain.curves, buffered.curves)


def test_loss_decreases_on_a_fixed_batch(tiny_train_config):
    batch = next(sample_batches(tiny_train_config, np.random.default_rng(0)))
    config = dataclasses.replace(
        tiny_train_config, epochs=20, pairs_per_epoch=2, dn=DenoisingConfig(enabled=False)
    )
    run = train(config, out_dir=None, verbose=False, fixed_batch=batch)
    assert run.curves["loss"].tail(3).mean() < run.curves["loss"].head(3).mean()


def test_divergence_writes_a_snapshot(tiny_train_config, tmp_path, monkeypatch):
    def diverging_loss(output, targets, weights):
        return DiffArray(np.nan), {"cls": np.nan, "loc": 0.0, "cls_dn": 0.0, "loc_dn": 0.0}

    monkeypatch.setattr(train_module, "total_loss", diverging_loss)
    with pytest.raises(TrainingDivergedError, match="step 0"):
        train(tiny_train_config, out_dir=str(tmp_path), verbose=False)
    with open(tmp_path / "diverged_step_000000.json", encoding="utf-8") as f:
        snapshot = json.load(f)
    assert snapshot["step"] == 0
    assert (tmp_path / "checkpoints" / "diverged_step_000000.pkl").exists()


def test_prefetched_preserves_order():
    assert list(prefetched(iter(range(10)), size=2, n_items=7)) == list(range(7))


def test_prefetched_forwards_errors():
    def failing():
        yield 1
        raise RuntimeError("producer failed")

    items = prefetched(failing(), size=1, n_items=3)
    assert next(items) == 1
    with pytest.raises(RuntimeError, match="producer failed"):
        next(items)


def test_prefetched_close_after_producer_error_on_full_buffer():
    def failing():
        yield 1
        yield 2
        raise RuntimeError("producer failed")

    items = prefetched(failing(), size=1, n_items=5)
    assert next(items) == 1
    # the producer refills the buffer with 2, then fails with the buffer full
    time.sleep(0.3)
    closer = threading.Thread(target=items.close)
    closer.start()
    closer.join(timeout=5.0)
    assert not closer.is_alive()


def test_steps_to_threshold():
    curves = pd.DataFrame({"step": [0, 1, 2, 3], "eval_ao": [np.nan, 0.4, np.nan, 0.8]})
    assert steps_to_threshold(curves, 0.7) == 4
    assert steps_to_threshold(curves, 0.3) == 2
    assert steps_to_threshold(curves, 0.9) is None


@pytest.mark.slow
def test_desk_model_overfits_one_batch():
    config = TrainConfig(epochs=60, pairs_per_epoch=4, batch_size=4, dn=DenoisingConfig(enabled=False))
    batch = next(sample_batches(config, np.random.default_rng(0)))
    run = train(config, out_dir=None, verbose=False, fixed_batch=batch)
    assert run.curves["iou"].tail(5).mean() > 0.7
