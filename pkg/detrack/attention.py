"""
Multi-head self attention with an additive mask, and single-scale deformable attention
with differentiable bilinear sampling.
"""

from dataclasses import dataclass
import numpy as np

from . import autodiff as ad
from .autodiff import DiffArray, Linear, Module
from .config import ConfigurationError
from .geometry import GridSpec

MASK_BLOCKED = -np.inf
BLOCKED_THRESHOLD = -1e9
BLOCKED_SCORE = -1e30


@dataclass(frozen=True)
class DeformAttnConfig:
    n_heads: int = 4
    n_points: int = 4
    model_dim: int = 32

    def __post_init__(self):
        if self.n_points < 1:
            raise ConfigurationError(f"n_points must be at least 1, got {self.n_points}")
        if self.n_heads < 1 or self.model_dim % self.n_heads:
            raise ConfigurationError(
                f"model_dim={self.model_dim} is not divisible by n_heads={self.n_heads}"
            )

    @property
    def value_dim(self) -> int:
        return self.model_dim // self.n_heads


@dataclass
class FeatureMap2D:
    """
    A C x H x W feature map stored as the rows that carry data: `values` (B, N, C) at
    row-major grid positions `index` (B, N). Positions without a row read as zeros.
    """

    values: DiffArray
    index: np.ndarray
    height: int
    width: int

    @classmethod
    def from_dense(cls, dense: "DiffArray | np.ndarray") -> "FeatureMap2D":
        """Build from a (C, H, W) or (B, C, H, W) array."""
        dense = ad.as_diff(dense)
        if dense.ndim == 3:
            dense = dense.reshape(1, *dense.shape)
        batch, channels, height, width = dense.shape
        values = dense.reshape(batch, channels, height * width).transpose(0, 2, 1)
        index = np.tile(np.arange(height * width), (batch, 1))
        return cls(values, index, height, width)

    @classmethod
    def from_tokens(
        cls, values: DiffArray, index: np.ndarray, grid: GridSpec
    ) -> "FeatureMap2D":
        return cls(values, np.asarray(index), grid.height_tokens, grid.width_tokens)

    @property
    def channels(self) -> int:
        return self.values.shape[-1]

    def dense_rows(self, values: DiffArray | None = None) -> DiffArray:
        """(B, H*W, C) rows with unoccupied positions zero-filled."""
        return ad.scatter_rows(
            self.values if values is None else values, self.index, self.height * self.width
        )


def _bilinear_rows(
    rows: DiffArray, points: DiffArray, height: int, width: int
) -> DiffArray:
    """
    Sample (B, H*W, C) rows at continuous pixel coordinates (B, P, 2); node (r, c)
    sits at (x, y) = (c, r) and everything outside the map reads as zero.
    """
    x, y = points[..., 0], points[..., 1]
    x0, y0 = np.floor(x.value), np.floor(y.value)
    fx, fy = x - x0, y - y0
    out = None
    for dx, dy, weight in [
        (0, 0, (1 - fx) * (1 - fy)),
        (1, 0, fx * (1 - fy)),
        (0, 1, (1 - fx) * fy),
        (1, 1, fx * fy),
    ]:
        cols, rows_ = x0 + dx, y0 + dy
        valid = (cols >= 0) & (cols < width) & (rows_ >= 0) & (rows_ < height)
        flat = (
            np.clip(rows_, 0, height - 1).astype(int) * width
            + np.clip(cols, 0, width - 1).astype(int)
        )
        corner = ad.gather_rows(rows, flat) * (weight * valid).reshape(*weight.shape, 1)
        out = corner if out is None else out + corner
    return out


def bilinear_sample(feature_map: FeatureMap2D, points: "DiffArray | np.ndarray") -> DiffArray:
    """
    Bilinearly interpolate the map at continuous pixel coordinates `points` (B, P, 2)
    or (P, 2) given as (x, y); returns one channel vector per point.
    """
    points = ad.as_diff(points)
    squeeze = points.ndim == 2
    if squeeze:
        points = points.reshape(1, *points.shape)
    out = _bilinear_rows(
        feature_map.dense_rows(), points, feature_map.height, feature_map.width
    )
    return out.reshape(*out.shape[1:]) if squeeze else out


class MultiHeadAttention(Module):
    def __init__(
        self, dim: int, n_heads: int, rng: np.random.Generator, dtype: str = "float64"
    ):
        if dim % n_heads:
            raise ConfigurationError(f"dim={dim} is not divisible by n_heads={n_heads}")
        self.n_heads = n_heads
        self.q_proj = Linear(dim, dim, rng, dtype)
        self.k_proj = Linear(dim, dim, rng, dtype)
        self.v_proj = Linear(dim, dim, rng, dtype)
        self.out_proj = Linear(dim, dim, rng, dtype)

    def __call__(
        self,
        queries: DiffArray,
        keys: DiffArray,
        values: DiffArray,
        additive_mask: np.ndarray | None = None,
    ) -> DiffArray:
        return self.forward(queries, keys, values, additive_mask)[0]

    def forward(
        self,
        queries: DiffArray,
        keys: DiffArray,
        values: DiffArray,
        additive_mask: np.ndarray | None = None,
    ) -> tuple[DiffArray, DiffArray]:
        """
        Returns (outputs (B, Nq, D), attention weights (B, heads, Nq, Nk)).
        Mask entries are 0 for allowed pairs and -inf (or <= -1e9) for blocked ones;
        a query whose keys are all blocked gets a zero output.
        """
        batch, n_queries, dim = queries.shape
        n_keys = keys.shape[1]
        head_dim = dim // self.n_heads
        q = self.q_proj(queries).reshape(batch, n_queries, self.n_heads, head_dim)
        k = self.k_proj(keys).reshape(batch, n_keys, self.n_heads, head_dim)
        v = self.v_proj(values).reshape(batch, n_keys, self.n_heads, head_dim)
        scores = ad.matmul(q.transpose(0, 2, 1, 3), k.transpose(0, 2, 3, 1)) * (
            1.0 / np.sqrt(head_dim)
        )
        fully_blocked = None
        if additive_mask is not None:
            mask = np.broadcast_to(
                np.asarray(additive_mask, dtype=float), (batch, n_queries, n_keys)
            )
            blocked = ~np.isfinite(mask) | (mask <= BLOCKED_THRESHOLD)
            scores = scores + np.where(blocked, 0.0, mask)[:, None]
            scores = ad.masked_fill(scores, blocked[:, None], BLOCKED_SCORE)
            fully_blocked = blocked.all(axis=-1)
        weights = ad.softmax(scores, axis=-1)
        if fully_blocked is not None and fully_blocked.any():
            weights = ad.masked_fill(weights, fully_blocked[:, None, :, None], 0.0)
        context = ad.matmul(weights, v.transpose(0, 2, 1, 3))
        out = self.out_proj(context.transpose(0, 2, 1, 3).reshape(batch, n_queries, dim))
        if fully_blocked is not None and fully_blocked.any():
            out = ad.masked_fill(out, fully_blocked[:, :, None], 0.0)
        return out, weights


@dataclass
class DeformAttnOutput:
    output: DiffArray
    weights: DiffArray
    locations: DiffArray


class DeformableAttention(Module):
    """
    Each query attends to n_points bilinearly sampled locations per head around its
    reference box. A sampling offset (dx, dy) moves the box center by (dx w/2, dy h/2),
    so offsets are measured in half box sizes.
    """

    def __init__(
        self, cfg: DeformAttnConfig, rng: np.random.Generator, dtype: str = "float64"
    ):
        self.cfg = cfg
        dim, heads, points = cfg.model_dim, cfg.n_heads, cfg.n_points
        self.sampling_offsets = Linear(dim, heads * points * 2, rng, dtype).zero_()
        self.attention_weights = Linear(dim, heads * points, rng, dtype).zero_()
        self.value_proj = Linear(dim, dim, rng, dtype)
        self.output_proj = Linear(dim, dim, rng, dtype)
        # initial pattern: one direction per head, points spread from center to edge
        thetas = np.arange(heads) * (2.0 * np.pi / heads)
        directions = np.stack([np.cos(thetas), np.sin(thetas)], axis=-1)
        directions /= np.abs(directions).max(axis=-1, keepdims=True)
        spread = (np.arange(points) + 1.0) / points
        self.sampling_offsets.bias.value[...] = (
            directions[:, None, :] * spread[None, :, None]
        ).reshape(-1)

    def __call__(
        self, query: DiffArray, reference: DiffArray, feature_map: FeatureMap2D
    ) -> DiffArray:
        return self.forward(query, reference, feature_map).output

    def forward(
        self, query: DiffArray, reference: "DiffArray | np.ndarray", feature_map: FeatureMap2D
    ) -> DeformAttnOutput:
        """
        query (B, Q, D) and reference boxes (B, Q, 4) in normalized cxcywh.
        Returns the attended features (B, Q, D), the per-head point weights
        (B, Q, M, K) and the normalized sampling locations (B, Q, M, K, 2).
        """
        reference = ad.as_diff(reference)
        batch, n_queries, dim = query.shape
        heads, points, head_dim = self.cfg.n_heads, self.cfg.n_points, self.cfg.value_dim
        height, width = feature_map.height, feature_map.width

        value = feature_map.dense_rows(self.value_proj(feature_map.values))
        value = (
            value.reshape(batch, height * width, heads, head_dim)
            .transpose(0, 2, 1, 3)
            .reshape(batch * heads, height * width, head_dim)
        )
        offsets = self.sampling_offsets(query).reshape(batch, n_queries, heads, points, 2)
        weights = ad.softmax(
            self.attention_weights(query).reshape(batch, n_queries, heads, points), axis=-1
        )
        centers = reference[..., :2].reshape(batch, n_queries, 1, 1, 2)
        half_sizes = (reference[..., 2:] * 0.5).reshape(batch, n_queries, 1, 1, 2)
        locations = centers + offsets * half_sizes
        pixels = locations * np.array([width, height], dtype=float) - 0.5
        pixels = pixels.transpose(0, 2, 1, 3, 4).reshape(
            batch * heads, n_queries * points, 2
        )
        samples = _bilinear_rows(value, pixels, height, width).reshape(
            batch, heads, n_queries, points, head_dim
        )
        mixed = ad.matmul(
            weights.transpose(0, 2, 1, 3).reshape(batch, heads, n_queries, 1, points),
            samples,
        )
        mixed = mixed.reshape(batch, heads, n_queries, head_dim).transpose(0, 2, 1, 3)
        output = self.output_proj(mixed.reshape(batch, n_queries, dim))
        return DeformAttnOutput(output, weights, locations)
