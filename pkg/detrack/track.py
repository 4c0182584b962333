"""
Inference: per frame, the final-layer query scores are reflected onto the search grid
at the cells of their box centers, multiplied by a Hanning window, and the box of the
query behind the highest penalized score is the estimate.
"""

import time
import numpy as np
import pandas as pd  # type: ignore

from .autodiff import no_grad
from .data.synthetic import SEARCH_FACTOR, SyntheticSequence, crop_around, crop_to_scene
from .encoder import ImagePair
from .geometry import BBox, GridSpec, clamp_boxes, grid_cells, hanning_window_2d, iou
from .model import Tracker


def score_map(boxes: np.ndarray, scores: np.ndarray, grid: GridSpec) -> np.ndarray:
    """
    (H, W) map holding at each cell the highest score of the queries whose box center
    falls in it; cells without a query hold 0.
    """
    cells = grid_cells(np.asarray(boxes)[:, :2], grid)
    flat = np.zeros(grid.n_tokens)
    np.maximum.at(flat, cells, np.asarray(scores, dtype=float))
    return flat.reshape(grid.height_tokens, grid.width_tokens)


def select_query(
    boxes: np.ndarray, scores: np.ndarray, grid: GridSpec, window: np.ndarray | None = None
) -> int:
    """
    Index of the selected query. `window` defaults to the Hanning window of the grid;
    pass all ones to select by raw score. If the penalized map is zero everywhere the
    raw map decides. Among queries sharing the winning cell the highest score wins,
    lowest index first.
    """
    boxes, scores = np.asarray(boxes), np.asarray(scores, dtype=float)
    assert len(scores) > 0, "cannot select from an empty query set"
    window = hanning_window_2d(grid.height_tokens, grid.width_tokens) if window is None else window
    raw = score_map(boxes, scores, grid)
    penalized = raw * window
    best_cell = int(np.argmax(penalized if penalized.max() > 0 else raw))
    candidates = np.flatnonzero(grid_cells(boxes[:, :2], grid) == best_cell)
    return int(candidates[np.argmax(scores[candidates])])


def predict(
    model: Tracker,
    template: np.ndarray,
    search: np.ndarray,
    layers_test: int | None = None,
    window: np.ndarray | None = None,
) -> tuple[BBox, float]:
    """Box (normalized to the search crop) and score of the selected query for one image pair."""
    with no_grad():
        output = model(ImagePair(template, search), layers_test)
    boxes, scores = output.final_boxes[0], output.final_scores[0]
    chosen = select_query(boxes, scores, model.encoder.search_grid, window)
    return BBox.from_array(clamp_boxes(boxes[chosen])), float(scores[chosen])


def track(
    model: Tracker,
    sequence: SyntheticSequence,
    layers_test: int | None = None,
    window: bool = True,
) -> pd.DataFrame:
    """
    Closed-loop tracking: each frame's search region is cropped around the previous
    estimate, starting from the first-frame GT.
    Returns a DataFrame with columns: frame, cx, cy, w, h, score, iou (scene units).
    """
    grid = model.encoder.search_grid
    flat_window = None if window else np.ones((grid.height_tokens, grid.width_tokens))
    estimate = sequence.init_box
    rows = []
    for frame in range(1, sequence.n_frames):
        crop = crop_around(estimate, SEARCH_FACTOR)
        box, score = predict(
            model, sequence.template, sequence.render_search(frame, crop), layers_test, flat_window
        )
        estimate = crop_to_scene(box.as_array(), crop)
        rows.append(
            {
                "frame": frame,
                "cx": estimate[0],
                "cy": estimate[1],
                "w": estimate[2],
                "h": estimate[3],
                "score": score,
                "iou": float(iou(estimate, sequence.boxes[frame])),
            }
        )
    return pd.DataFrame(rows, columns=["frame", "cx", "cy", "w", "h", "score", "iou"])


def evaluate(
    model: Tracker,
    sequences: list[SyntheticSequence],
    layers_test: int | None = None,
    window: bool = True,
    verbose: bool = False,
) -> float:
    """Average overlap: mean IoU over all tracked frames of all sequences."""
    start_time = time.time()
    ious = np.concatenate(
        [track(model, sequence, layers_test, window)["iou"].to_numpy() for sequence in sequences]
        or [np.zeros(0)]
    )
    average_overlap = float(ious.mean()) if ious.size else 0.0
    if verbose:
        print(f"AO over {len(sequences)} sequences: {average_overlap:.4f}")
        print(f"Time taken: {time.time() - start_time:.2f}s")
    return average_overlap
