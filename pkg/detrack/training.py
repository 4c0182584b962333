"""
Label assignment, losses and the denoising branch.

Assignment modes:
    quality    every token whose center lies inside the GT box is positive, with soft
               target y = IoU(predicted box, GT); the top-k_loc positives by score get
               box supervision
    hard       as quality, with y = 1
    center     the single token nearest the GT center, y = 1
    hungarian  the single token of minimal matching cost, y = 1

Targets are plain arrays computed from prediction values, so no gradient flows
through the IoU used as a label.
"""

from dataclasses import dataclass, field
import numpy as np
from scipy.optimize import linear_sum_assignment  # type: ignore

from . import autodiff as ad
from .attention import MASK_BLOCKED
from .autodiff import DiffArray, ShapeError
from .config import DEFAULT_K_LOC, ConfigurationError, DenoisingConfig, LossWeights
from .encoder import TokenSet
from .geometry import (
    BBox,
    GridSpec,
    as_box_array,
    clamp_boxes,
    cxcywh_to_xyxy,
    iou,
    nearest_index,
    points_in_box,
    token_centers,
)
from .head import DecoderOutput

QFL_EPS = 1e-7


def qfl(scores: "DiffArray | np.ndarray | float", targets, beta: float = 2.0) -> DiffArray:
    """
    Quality focal loss, elementwise:
        -|y - s|^beta * ((1 - y) log(1 - s) + y log s)
    with s clamped to [QFL_EPS, 1 - QFL_EPS]. Zero, and minimal, at s = y.
    """
    scores = ad.clip(ad.as_diff(scores), QFL_EPS, 1 - QFL_EPS)
    targets = np.asarray(targets, dtype=float)
    modulating = ad.power(ad.abs_(targets - scores), beta)
    entropy = (1 - targets) * ad.log(1 - scores) + targets * ad.log(scores)
    return -(modulating * entropy)


def _corners(boxes: DiffArray) -> tuple[DiffArray, DiffArray, DiffArray, DiffArray]:
    cx, cy, w, h = boxes[..., 0], boxes[..., 1], boxes[..., 2], boxes[..., 3]
    return cx - 0.5 * w, cy - 0.5 * h, cx + 0.5 * w, cy + 0.5 * h


def box_giou(pred: "DiffArray | np.ndarray", gt: "DiffArray | np.ndarray") -> DiffArray:
    """Differentiable GIoU of center-size boxes with positive sizes, broadcast over leading axes."""
    px0, py0, px1, py1 = _corners(ad.as_diff(pred))
    gx0, gy0, gx1, gy1 = _corners(ad.as_diff(np.asarray(gt, dtype=float)))
    area_pred = (px1 - px0) * (py1 - py0)
    area_gt = (gx1 - gx0) * (gy1 - gy0)
    overlap_w = ad.maximum(ad.minimum(px1, gx1) - ad.maximum(px0, gx0), 0.0)
    overlap_h = ad.maximum(ad.minimum(py1, gy1) - ad.maximum(py0, gy0), 0.0)
    intersection = overlap_w * overlap_h
    union = area_pred + area_gt - intersection
    enclosing = (ad.maximum(px1, gx1) - ad.minimum(px0, gx0)) * (
        ad.maximum(py1, gy1) - ad.minimum(py0, gy0)
    )
    return intersection / union - (enclosing - union) / enclosing


def loc_loss(
    pred: "DiffArray | np.ndarray", gt: "BBox | np.ndarray", weights: LossWeights = LossWeights()
) -> DiffArray:
    """Per box: w_giou * (1 - GIoU) + w_l1 * sum |pred - gt| over cx, cy, w, h."""
    gt = as_box_array(gt)
    pred = ad.as_diff(pred)
    return weights.giou * (1 - box_giou(pred, gt)) + weights.l1 * ad.abs_(pred - gt).sum(axis=-1)


@dataclass
class AssignmentResult:
    """
    Per token or query of a batch, shape (B, N): soft target in [0, 1], positive mask,
    and the subset of positives whose boxes are supervised.
    """

    target: np.ndarray
    positive: np.ndarray
    loc_mask: np.ndarray

    @property
    def n_supervised(self) -> int:
        return int(self.loc_mask.sum())


def _batched(gt: "BBox | np.ndarray", batch: int) -> np.ndarray:
    return np.broadcast_to(np.atleast_2d(as_box_array(gt)), (batch, 4))


def _box_batch(boxes: np.ndarray) -> np.ndarray:
    boxes = as_box_array(boxes)
    return boxes[None] if boxes.ndim == 2 else boxes


def _centers_per_batch(centers: np.ndarray, batch: int) -> np.ndarray:
    centers = np.asarray(centers, dtype=float)
    return np.broadcast_to(centers, (batch,) + centers.shape[-2:])


def assign_one_to_many(
    centers: np.ndarray,
    pred_boxes: np.ndarray,
    gt: "BBox | np.ndarray",
    k_loc: int = DEFAULT_K_LOC,
    scores: np.ndarray | None = None,
    hard: bool = False,
) -> AssignmentResult:
    """
    centers (N, 2) or (B, N, 2) of the tokens, their predicted boxes (B, N, 4) and
    scores (B, N), and one GT box per batch element. Without scores the box
    supervision goes to the positives of highest target.
    If no center lies inside the GT box, the nearest-center token is the only positive.
    """
    pred_boxes = _box_batch(pred_boxes)
    batch, n_tokens = pred_boxes.shape[:2]
    gt = _batched(gt, batch)
    centers = _centers_per_batch(centers, batch)
    positive = np.zeros((batch, n_tokens), dtype=bool)
    for b in range(batch):
        positive[b] = points_in_box(centers[b], gt[b])
        if not positive[b].any():
            positive[b, nearest_index(gt[b, :2], centers[b])] = True
    quality = np.ones((batch, n_tokens)) if hard else iou(pred_boxes, gt[:, None, :])
    target = np.where(positive, quality, 0.0)
    ranking = target if scores is None else np.asarray(scores)
    loc_mask = np.zeros_like(positive)
    for b in range(batch):
        candidates = np.flatnonzero(positive[b])
        best = candidates[np.argsort(-ranking[b, candidates], kind="stable")][:k_loc]
        loc_mask[b, best] = True
    return AssignmentResult(target, positive, loc_mask)


def _single_positive(columns: list[int], n_tokens: int) -> AssignmentResult:
    positive = np.zeros((len(columns), n_tokens), dtype=bool)
    positive[np.arange(len(columns)), columns] = True
    return AssignmentResult(positive.astype(float), positive, positive.copy())


def assign_center(centers: np.ndarray, gt: "BBox | np.ndarray") -> AssignmentResult:
    """The token whose center is nearest the GT center is the single positive."""
    centers = np.asarray(centers, dtype=float)
    batch = centers.shape[0] if centers.ndim == 3 else np.atleast_2d(as_box_array(gt)).shape[0]
    gt = _batched(gt, batch)
    centers = _centers_per_batch(centers, batch)
    return _single_positive(
        [nearest_index(gt[b, :2], centers[b]) for b in range(batch)], centers.shape[1]
    )


def hungarian_match(cost: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Minimum-cost bipartite matching of a rectangular cost matrix: (rows, columns)."""
    cost = np.asarray(cost, dtype=float)
    if cost.ndim != 2:
        raise ShapeError(f"cost matrix must be 2-D, got shape {cost.shape}")
    if not np.isfinite(cost).all():
        raise ValueError("cost matrix contains non-finite entries")
    if cost.shape[0] == 1:
        # one row: lowest index among equal minima
        return np.zeros(1, dtype=int), np.array([int(np.argmin(cost[0]))])
    return linear_sum_assignment(cost)


def matching_cost(
    pred_boxes: np.ndarray,
    scores: np.ndarray,
    gt: "BBox | np.ndarray",
    weights: LossWeights = LossWeights(),
) -> np.ndarray:
    """Cost of making each prediction the positive: box loss plus the classification loss change."""
    with ad.no_grad():
        box_cost = loc_loss(np.asarray(pred_boxes), gt, weights).value
        class_cost = (qfl(scores, 1.0, weights.beta) - qfl(scores, 0.0, weights.beta)).value
    return box_cost + class_cost


def assign_hungarian(
    pred_boxes: np.ndarray,
    scores: np.ndarray,
    gt: "BBox | np.ndarray",
    weights: LossWeights = LossWeights(),
) -> AssignmentResult:
    pred_boxes = _box_batch(pred_boxes)
    scores = np.asarray(scores).reshape(pred_boxes.shape[:2])
    batch, n_tokens = scores.shape
    gt = _batched(gt, batch)
    columns = [
        int(hungarian_match(matching_cost(pred_boxes[b], scores[b], gt[b], weights)[None])[1][0])
        for b in range(batch)
    ]
    return _single_positive(columns, n_tokens)


@dataclass
class DenoisingBatch:
    """
    Denoising queries laid out as [positive, negative] per group: content (B, 2G, D),
    noised reference boxes (B, 2G, 4), group ids and positive flags (2G,), and the
    additive self-attention mask over the 2G + n_matching decoder queries.
    `token_rows` holds the kept-token row each content was taken from (-1 for label
    embeddings).
    """

    content: DiffArray
    boxes: np.ndarray
    group_ids: np.ndarray
    positive: np.ndarray
    attn_mask: np.ndarray
    token_rows: np.ndarray

    @property
    def n_queries(self) -> int:
        return len(self.group_ids)


def noise_boxes(
    gt: "BBox | np.ndarray",
    center_shift: float,
    box_scale: float,
    rng: np.random.Generator,
    n: int,
) -> np.ndarray:
    """
    n noised copies of gt: the center moves by less than center_shift * (w/2, h/2) and
    each side is scaled uniformly within [1 - box_scale, 1 + box_scale].
    """
    gt = as_box_array(gt)
    shifts = rng.uniform(-1.0, 1.0, size=(n, 2))
    scales = rng.uniform(-1.0, 1.0, size=(n, 2))
    centers = gt[:2] + shifts * center_shift * gt[2:] / 2
    sizes = gt[2:] * (1 + scales * box_scale)
    return clamp_boxes(np.concatenate([centers, sizes], axis=-1))


def build_dn_attention_mask(
    n_groups: int, queries_per_group: int, n_matching: int
) -> np.ndarray:
    """
    Additive mask over [denoising groups..., matching queries]: a pair may attend only
    within one denoising group or within the matching part.
    """
    ids = np.concatenate(
        [np.repeat(np.arange(n_groups), queries_per_group), np.full(n_matching, -1)]
    )
    return np.where(ids[:, None] == ids[None, :], 0.0, MASK_BLOCKED)


def gen_denoising_batch(
    gt: "BBox | np.ndarray",
    tokens: TokenSet,
    projected: DiffArray,
    cfg: DenoisingConfig,
    rng: np.random.Generator,
    n_matching: int,
    label_embedding: DiffArray | None = None,
) -> DenoisingBatch:
    """
    One positive and one negative query per group. The positive content is the kept
    token nearest the GT center. The negative content is the kept token nearest a
    randomly drawn GT corner, or a random kept token outside the GT box for the
    center_outside variant; the embedding variant uses two learned label vectors.
    """
    batch, n_groups = projected.shape[0], cfg.n_groups
    gt = _batched(gt, batch)
    centers = token_centers(tokens.grid)[tokens.search_index]
    rows = np.zeros((batch, 2 * n_groups), dtype=int)
    boxes = np.zeros((batch, 2 * n_groups, 4))
    for b in range(batch):
        positive_row = nearest_index(gt[b, :2], centers[b])
        corners = np.clip(cxcywh_to_xyxy(gt[b])[[0, 1, 2, 1, 0, 3, 2, 3]].reshape(4, 2), 0, 1)
        outside = np.flatnonzero(~points_in_box(centers[b], gt[b]))
        for g in range(n_groups):
            rows[b, 2 * g] = positive_row
            if cfg.variant == "center_outside" and outside.size:
                rows[b, 2 * g + 1] = outside[rng.integers(outside.size)]
            else:
                rows[b, 2 * g + 1] = nearest_index(corners[rng.integers(4)], centers[b])
        boxes[b, 0::2] = noise_boxes(gt[b], cfg.center_shift, cfg.box_scale, rng, n_groups)
        boxes[b, 1::2] = noise_boxes(
            gt[b], cfg.center_shift_negative, cfg.box_scale_negative, rng, n_groups
        )
    positive = np.tile([True, False], n_groups)
    if cfg.variant == "embedding":
        assert label_embedding is not None, "embedding denoising needs label embeddings"
        labels = ad.take(label_embedding, (~positive).astype(int))
        content = labels.reshape(1, *labels.shape) + np.zeros((batch, 1, 1))
        rows[:] = -1
    else:
        content = ad.gather_rows(projected, rows)
    return DenoisingBatch(
        content=content,
        boxes=boxes,
        group_ids=np.repeat(np.arange(n_groups), 2),
        positive=positive,
        attn_mask=build_dn_attention_mask(n_groups, 2, n_matching),
        token_rows=rows,
    )


def dn_targets(
    dn_batch: DenoisingBatch, refined_boxes: "DiffArray | np.ndarray", gt: "BBox | np.ndarray"
) -> AssignmentResult:
    """Positive queries target the IoU of their refined box with GT, negatives 0."""
    refined = refined_boxes.value if isinstance(refined_boxes, DiffArray) else refined_boxes
    refined = _box_batch(refined)
    gt = _batched(gt, refined.shape[0])
    positive = np.broadcast_to(dn_batch.positive, refined.shape[:2]).copy()
    target = np.where(positive, iou(refined, gt[:, None, :]), 0.0)
    return AssignmentResult(target, positive, positive.copy())


@dataclass
class Targets:
    gt: np.ndarray
    layers: list[AssignmentResult]
    dn: list[AssignmentResult] = field(default_factory=list)


def compute_assignments(
    output: DecoderOutput,
    gt: "BBox | np.ndarray",
    grid: GridSpec,
    mode: str = "quality",
    k_loc: int = DEFAULT_K_LOC,
    weights: LossWeights = LossWeights(),
    dn_batch: DenoisingBatch | None = None,
) -> Targets:
    """
    Assign every prediction stage. Decoder queries sit at the grid center of the token
    they were selected from.
    """
    batch = output.boxes[0].shape[0]
    gt = np.array(_batched(gt, batch))
    grid_centers = token_centers(grid)
    layers = []
    for layer, (boxes, scores) in enumerate(zip(output.boxes, output.scores)):
        index = output.token_grid_index if layer == 0 else output.query_grid_index
        centers = grid_centers[index]
        if mode in ["quality", "hard"]:
            result = assign_one_to_many(
                centers, boxes.value, gt, k_loc, scores.value, hard=mode == "hard"
            )
        elif mode == "center":
            result = assign_center(centers, gt)
        elif mode == "hungarian":
            result = assign_hungarian(boxes.value, scores.value, gt, weights)
        else:
            raise ConfigurationError(f"unknown assignment mode '{mode}'")
        layers.append(result)
    dn = []
    if dn_batch is not None:
        dn = [dn_targets(dn_batch, boxes, gt) for boxes in output.dn_boxes]
    return Targets(gt, layers, dn)


def _classification(scores: DiffArray, assignment: AssignmentResult, beta: float) -> DiffArray:
    return qfl(scores, assignment.target, beta).mean()


def _localization(
    boxes: DiffArray, assignment: AssignmentResult, gt: np.ndarray, weights: LossWeights
) -> DiffArray | None:
    if assignment.n_supervised == 0:
        return None
    per_box = loc_loss(boxes, gt[:, None, :], weights)
    return (per_box * assignment.loc_mask).sum() / assignment.n_supervised


def total_loss(
    output: DecoderOutput, targets: Targets, weights: LossWeights = LossWeights()
) -> tuple[DiffArray, dict[str, float]]:
    """
    Sum over stages l = 0..L of w_cls (L_cls + L_cls^DN) + w_loc (L_loc + L_loc^DN);
    denoising terms exist only for decoder layers. Classification is averaged over
    tokens or queries, localization over supervised boxes.
    Returns the scalar loss and its summed terms.
    """
    assert len(targets.layers) == len(output.boxes), "one assignment per prediction stage"
    total = ad.as_diff(0.0)
    terms = {"cls": 0.0, "loc": 0.0, "cls_dn": 0.0, "loc_dn": 0.0}
    parts = [
        ("", output.boxes, output.scores, targets.layers),
        ("_dn", output.dn_boxes, output.dn_scores, targets.dn),
    ]
    for suffix, all_boxes, all_scores, assignments in parts:
        for boxes, scores, assignment in zip(all_boxes, all_scores, assignments):
            cls = _classification(scores, assignment, weights.beta)
            total = total + weights.cls * cls
            terms["cls" + suffix] += cls.item()
            loc = _localization(boxes, assignment, targets.gt, weights)
            if loc is not None:
                total = total + weights.loc * loc
                terms["loc" + suffix] += loc.item()
    return total, terms


def top_score_boxes(output: DecoderOutput) -> np.ndarray:
    """Final-layer box of the highest-scoring query per batch element, (B, 4)."""
    best = np.argmax(output.final_scores, axis=1)
    return output.final_boxes[np.arange(len(best)), best]
