import numpy as np
import pytest

from detrack.data.synthetic import SyntheticSequence
from detrack.geometry import GridSpec, hanning_window_2d
from detrack.track import evaluate, predict, score_map, select_query, track


@pytest.fixture
def grid_3x3():
    return GridSpec(3, 3, 8)


def test_score_map_keeps_highest_score_per_cell(grid_3x3):
    boxes = np.array([[0.5, 0.5, 0.1, 0.1], [0.55, 0.45, 0.1, 0.1], [0.1, 0.1, 0.1, 0.1]])
    scores = np.array([0.3, 0.6, 0.2])
    expected = np.zeros((3, 3))
    expected[1, 1] = 0.6
    expected[0, 0] = 0.2
    np.testing.assert_allclose(score_map(boxes, scores, grid_3x3), expected)


def test_window_prefers_the_center(grid_3x3):
    boxes = np.array([[0.1, 0.1, 0.1, 0.1], [0.5, 0.5, 0.1, 0.1]])
    scores = np.array([0.9, 0.5])
    assert select_query(boxes, scores, grid_3x3) == 1
    assert select_query(boxes, scores, grid_3x3, window=np.ones((3, 3))) == 0


def test_zero_penalized_map_falls_back_to_raw_scores(grid_3x3):
    boxes = np.array([[0.1, 0.1, 0.1, 0.1], [0.9, 0.1, 0.1, 0.1]])
    assert hanning_window_2d(3, 3)[0, 0] == 0.0
    assert select_query(boxes, np.array([0.2, 0.7]), grid_3x3) == 1


def test_winning_cell_resolves_to_its_best_query(grid_3x3):
    boxes = np.array([[0.5, 0.5, 0.1, 0.1], [0.45, 0.55, 0.2, 0.2], [0.5, 0.5, 0.3, 0.3]])
    assert select_query(boxes, np.array([0.4, 0.8, 0.8]), grid_3x3) == 1


def test_predict_returns_valid_box(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    box, score = predict(tiny_model, pair.template[0], pair.search[0])
    assert 0.0 <= box.cx <= 1.0 and 0.0 <= box.cy <= 1.0
    assert 1e-3 <= box.w <= 1.0 and 1e-3 <= box.h <= 1.0
    assert 0.0 <= score <= 1.0


@pytest.fixture
def tiny_sequence(tiny_config):
    return SyntheticSequence.generate(
        3, n_frames=4, template_size=tiny_config.template_size, search_size=tiny_config.search_size
    )


def test_track_closed_loop(tiny_model, tiny_sequence):
    frames = track(tiny_model, tiny_sequence)
    assert list(frames.columns) == ["frame", "cx", "cy", "w", "h", "score", "iou"]
    assert frames["frame"].tolist() == [1, 2, 3]
    assert frames["iou"].between(0.0, 1.0).all()
    assert (frames[["w", "h"]] > 0).all().all()


def test_track_is_deterministic_and_truncatable(tiny_model, tiny_sequence):
    first = track(tiny_model, tiny_sequence, layers_test=1)
    second = track(tiny_model, tiny_sequence, layers_test=1)
    np.testing.assert_array_equal(first.to_numpy(), second.to_numpy())


def test_evaluate_is_mean_iou(tiny_model, tiny_sequence):
    ao = evaluate(tiny_model, [tiny_sequence, tiny_sequence], window=False)
    expected = track(tiny_model, tiny_sequence, window=False)["iou"].mean()
    assert ao == pytest.approx(expected)
    assert evaluate(tiny_model, []) == 0.0
