"""
Box algebra, overlap metrics, coordinate transforms, window functions and positional
encodings shared by the rest of the package.

Boxes are normalized to the side length of the search region. Array-valued functions
take boxes with the four coordinates on the last axis, so a single box, a list of
boxes and a batch of box lists all go through the same code.
"""

from dataclasses import dataclass
import numpy as np

from .config import ConfigurationError

MIN_BOX_SIZE = 1e-3
POSITION_TEMPERATURE = 10_000.0


@dataclass(frozen=True)
class BBox:
    """Center-size box (cx, cy, w, h), normalized to the search-region side."""

    cx: float
    cy: float
    w: float
    h: float

    @classmethod
    def from_array(cls, values: np.ndarray | list[float]) -> "BBox":
        cx, cy, w, h = (float(v) for v in np.asarray(values, dtype=float).reshape(4))
        return cls(cx, cy, w, h)

    @classmethod
    def from_xyxy(cls, x0: float, y0: float, x1: float, y1: float) -> "BBox":
        return cls.from_array(xyxy_to_cxcywh(np.array([x0, y0, x1, y1], dtype=float)))

    def as_array(self) -> np.ndarray:
        return np.array([self.cx, self.cy, self.w, self.h], dtype=float)

    def to_xyxy(self) -> np.ndarray:
        return cxcywh_to_xyxy(self.as_array())

    def clamp(self) -> "BBox":
        return BBox.from_array(clamp_boxes(self.as_array()))

    @property
    def area(self) -> float:
        return self.w * self.h


@dataclass(frozen=True)
class GridSpec:
    """Token grid of the search region; one token per `patch_size`² pixel patch."""

    height_tokens: int
    width_tokens: int
    patch_size: int

    @classmethod
    def from_image(cls, height: int, width: int, patch_size: int) -> "GridSpec":
        if patch_size <= 0 or height % patch_size or width % patch_size:
            raise ConfigurationError(
                f"image of {height}x{width} pixels is not divisible into "
                f"{patch_size}x{patch_size} patches"
            )
        return cls(height // patch_size, width // patch_size, patch_size)

    @property
    def n_tokens(self) -> int:
        return self.height_tokens * self.width_tokens


def as_box_array(boxes: "BBox | np.ndarray | list[float]") -> np.ndarray:
    if isinstance(boxes, BBox):
        return boxes.as_array()
    boxes = np.asarray(boxes, dtype=float)
    assert boxes.shape[-1] == 4, f"boxes need 4 coordinates on the last axis, got {boxes.shape}"
    return boxes


def cxcywh_to_xyxy(boxes: "BBox | np.ndarray") -> np.ndarray:
    boxes = as_box_array(boxes)
    cx, cy, w, h = np.moveaxis(boxes, -1, 0)
    return np.stack([cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h], axis=-1)


def xyxy_to_cxcywh(boxes: np.ndarray) -> np.ndarray:
    boxes = as_box_array(boxes)
    x0, y0, x1, y1 = np.moveaxis(boxes, -1, 0)
    return np.stack([0.5 * (x0 + x1), 0.5 * (y0 + y1), x1 - x0, y1 - y0], axis=-1)


def clamp_boxes(boxes: np.ndarray) -> np.ndarray:
    """Clip centers to [0, 1] and sizes to [MIN_BOX_SIZE, 1]."""
    boxes = as_box_array(boxes)
    lower = np.array([0.0, 0.0, MIN_BOX_SIZE, MIN_BOX_SIZE])
    return np.clip(boxes, lower, 1.0)


def _scalar_or_array(values: np.ndarray) -> "float | np.ndarray":
    return float(values) if np.ndim(values) == 0 else values


def _areas_and_intersection(
    a_xyxy: np.ndarray, b_xyxy: np.ndarray
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    area_a = np.clip(a_xyxy[..., 2] - a_xyxy[..., 0], 0, None) * np.clip(
        a_xyxy[..., 3] - a_xyxy[..., 1], 0, None
    )
    area_b = np.clip(b_xyxy[..., 2] - b_xyxy[..., 0], 0, None) * np.clip(
        b_xyxy[..., 3] - b_xyxy[..., 1], 0, None
    )
    top_left = np.maximum(a_xyxy[..., :2], b_xyxy[..., :2])
    bottom_right = np.minimum(a_xyxy[..., 2:], b_xyxy[..., 2:])
    overlap = np.clip(bottom_right - top_left, 0, None)
    return area_a, area_b, overlap[..., 0] * overlap[..., 1]


def iou(a: "BBox | np.ndarray", b: "BBox | np.ndarray") -> "float | np.ndarray":
    """
    Intersection over union of center-size boxes, broadcast over leading axes.
    A zero-area box has IoU 0 with everything.
    """
    area_a, area_b, intersection = _areas_and_intersection(
        cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    )
    union = area_a + area_b - intersection
    valid = (area_a > 0) & (area_b > 0) & (union > 0)
    return _scalar_or_array(
        np.where(valid, intersection / np.where(valid, union, 1.0), 0.0)
    )


def giou(a: "BBox | np.ndarray", b: "BBox | np.ndarray") -> "float | np.ndarray":
    """
    Generalized IoU: IoU minus the share of the enclosing box not covered by the union.
    A degenerate box acts as a point, so its intersection is 0 and the union is the
    other box's area.
    """
    a_xyxy, b_xyxy = cxcywh_to_xyxy(a), cxcywh_to_xyxy(b)
    area_a, area_b, intersection = _areas_and_intersection(a_xyxy, b_xyxy)
    union = area_a + area_b - intersection
    plain_iou = np.where(
        (area_a > 0) & (area_b > 0) & (union > 0),
        intersection / np.where(union > 0, union, 1.0),
        0.0,
    )
    enclosing_wh = np.maximum(a_xyxy[..., 2:], b_xyxy[..., 2:]) - np.minimum(
        a_xyxy[..., :2], b_xyxy[..., :2]
    )
    enclosing = enclosing_wh[..., 0] * enclosing_wh[..., 1]
    penalty = np.where(
        enclosing > 0, (enclosing - union) / np.where(enclosing > 0, enclosing, 1.0), 0.0
    )
    return _scalar_or_array(plain_iou - penalty)


def points_in_box(points: np.ndarray, box: "BBox | np.ndarray") -> np.ndarray:
    """Mask of (x, y) points lying inside (or on the border of) a center-size box."""
    points = np.asarray(points, dtype=float)
    x0, y0, x1, y1 = np.moveaxis(cxcywh_to_xyxy(box)[..., None, :], -1, 0)
    return (
        (points[..., 0] >= x0)
        & (points[..., 0] <= x1)
        & (points[..., 1] >= y0)
        & (points[..., 1] <= y1)
    )


def hanning_window(n: int) -> np.ndarray:
    """
    w[i] = 0.5 - 0.5 cos(2 pi i / (n - 1)); a single-element window is [1.0] so the
    penalty is a no-op at degenerate sizes.
    """
    if n < 1:
        raise ConfigurationError(f"hanning window needs n >= 1, got {n}")
    return np.hanning(n)


def hanning_window_2d(height: int, width: int) -> np.ndarray:
    return np.outer(hanning_window(height), hanning_window(width))


def sincos_frequencies(dim: int, n_coordinates: int = 4) -> np.ndarray:
    """Angular frequencies used per coordinate: dim / (2 n_coordinates) of them."""
    if dim <= 0 or dim % (2 * n_coordinates):
        raise ConfigurationError(
            f"sin-cos embedding of {n_coordinates} coordinates needs a dim divisible "
            f"by {2 * n_coordinates}, got {dim}"
        )
    n_frequencies = dim // (2 * n_coordinates)
    return (
        2
        * np.pi
        / POSITION_TEMPERATURE ** (np.arange(n_frequencies, dtype=float) / n_frequencies)
    )


def sincos_box_embedding(boxes: "BBox | np.ndarray", dim: int) -> np.ndarray:
    """
    Embed each box coordinate with sin and cos at dim/8 frequencies. For every
    coordinate the block is [sin(f_0 c) .. sin(f_F c), cos(f_0 c) .. cos(f_F c)], and
    the four blocks are laid out in (cx, cy, w, h) order.
    """
    boxes = as_box_array(boxes)
    angles = boxes[..., :, None] * sincos_frequencies(dim)
    embedding = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return embedding.reshape(*boxes.shape[:-1], dim)


def sincos_grid_embedding(grid: GridSpec, dim: int) -> np.ndarray:
    """Fixed 2-D positional embedding of the token centers, shape (H*W, dim)."""
    centers = token_centers(grid)
    angles = centers[:, :, None] * sincos_frequencies(dim, n_coordinates=2)
    embedding = np.concatenate([np.sin(angles), np.cos(angles)], axis=-1)
    return embedding.reshape(len(centers), dim)


def token_centers(grid: GridSpec) -> np.ndarray:
    """
    Normalized centers of the grid tokens in row-major order; token (r, c) sits at
    ((c + 0.5) / W, (r + 0.5) / H).
    Returns an array of shape (H*W, 2) holding (x, y).
    """
    rows, cols = np.meshgrid(
        np.arange(grid.height_tokens), np.arange(grid.width_tokens), indexing="ij"
    )
    return np.stack(
        [
            (cols.ravel() + 0.5) / grid.width_tokens,
            (rows.ravel() + 0.5) / grid.height_tokens,
        ],
        axis=-1,
    )


def grid_cells(points: np.ndarray, grid: GridSpec) -> np.ndarray:
    """Row-major index of the grid cell containing each (x, y) point, clipped to the grid."""
    points = np.asarray(points, dtype=float)
    cols = np.clip(
        np.floor(points[..., 0] * grid.width_tokens), 0, grid.width_tokens - 1
    ).astype(int)
    rows = np.clip(
        np.floor(points[..., 1] * grid.height_tokens), 0, grid.height_tokens - 1
    ).astype(int)
    return rows * grid.width_tokens + cols


def nearest_index(point: np.ndarray, candidates: np.ndarray) -> int:
    """Index of the candidate (x, y) nearest to `point`; ties go to the lowest index."""
    distances = np.sum((np.asarray(candidates) - np.asarray(point)) ** 2, axis=-1)
    return int(np.argmin(distances))
