"""
Gradient suite and property checks run by the `gradcheck` and `selftest` commands.
Each check returns a row of a pass/fail table.
"""

import dataclasses
import itertools
import time
from typing import Callable
import numpy as np
import pandas as pd  # type: ignore

from . import autodiff as ad
from .attention import DeformableAttention, DeformAttnConfig, FeatureMap2D, MultiHeadAttention, bilinear_sample
from .autodiff import DiffArray, Parameter, count_macs, grad_check, no_grad
from .config import DenoisingConfig, LossWeights, ModelConfig
from .data.synthetic import generate_batch
from .encoder import EncoderLayer, ImagePair, TokenSet
from .flops import DESK_SCALE, VIT_BASE, ArchSpec, cost_conv_head, cost_pipeline
from .geometry import GridSpec, clamp_boxes, points_in_box
from .head import DecoderLayer
from .model import Tracker
from .training import (
    compute_assignments,
    gen_denoising_batch,
    hungarian_match,
    loc_loss,
    noise_boxes,
    qfl,
    total_loss,
)

OP_TOLERANCE = 1e-4
PIPELINE_TOLERANCE = 1e-3
ISOLATION_TOLERANCE = 1e-10

TINY_MODEL = ModelConfig(
    template_size=16,
    search_size=32,
    patch_size=8,
    encoder_dim=16,
    encoder_heads=2,
    encoder_layers=2,
    mlp_ratio=2,
    ce_layers=(1,),
    ce_keep_ratio=0.5,
    decoder_dim=16,
    decoder_heads=2,
    decoder_layers=2,
    decoder_points=2,
    decoder_ffn_dim=16,
    n_queries=4,
)


def _row(check: str, value: float, tolerance: float) -> dict:
    return {"check": check, "value": value, "tolerance": tolerance, "passed": bool(value < tolerance)}


def tiny_batch(
    cfg: ModelConfig = TINY_MODEL, batch_size: int = 1, seed: int = 0
) -> tuple[ImagePair, np.ndarray]:
    templates, searches, gts = generate_batch(
        np.random.default_rng(seed), batch_size, 0.3, cfg.template_size, cfg.search_size
    )
    return ImagePair(templates, searches), gts


def _param(rng: np.random.Generator, *shape: int, scale: float = 1.0) -> Parameter:
    return Parameter(rng.normal(0.0, scale, size=shape))


def op_gradient_checks(seed: int = 0) -> list[dict]:
    """Finite-difference checks of the individual differentiable building blocks."""
    rng = np.random.default_rng(seed)
    rows = []

    logits, targets = _param(rng, 6), rng.uniform(0, 1, size=6)
    rows.append(
        _row("qfl", grad_check(lambda x: qfl(ad.sigmoid(x), targets).sum(), logits), OP_TOLERANCE)
    )

    gt = np.array([0.5, 0.5, 0.3, 0.4])
    boxes = Parameter(clamp_boxes(gt + rng.normal(0, 0.05, size=(3, 4))))
    rows.append(
        _row("giou + l1", grad_check(lambda x: loc_loss(x, gt).sum(), boxes), OP_TOLERANCE)
    )

    dense = _param(rng, 1, 3, 4, 5)
    points = rng.uniform(0.2, 3.8, size=(7, 2)) + 0.013
    weights = rng.normal(size=(7, 3))
    rows.append(
        _row(
            "bilinear sampling (values)",
            grad_check(
                lambda x: (bilinear_sample(FeatureMap2D.from_dense(x), points) * weights).sum(), dense
            ),
            OP_TOLERANCE,
        )
    )
    point_param = Parameter(points.copy())
    fixed_map = FeatureMap2D.from_dense(rng.normal(size=(1, 3, 4, 5)))
    rows.append(
        _row(
            "bilinear sampling (points)",
            grad_check(lambda x: (bilinear_sample(fixed_map, x) * weights).sum(), point_param),
            OP_TOLERANCE,
        )
    )

    attention = MultiHeadAttention(8, 2, rng)
    tokens = _param(rng, 1, 5, 8)
    projection = rng.normal(size=(1, 5, 8))
    rows.append(
        _row(
            "multi-head self attention",
            grad_check(lambda x: (attention(x, x, x) * projection).sum(), tokens),
            OP_TOLERANCE,
        )
    )

    deformable = DeformableAttention(DeformAttnConfig(2, 3, 8), rng)
    for layer in [deformable.sampling_offsets, deformable.attention_weights]:
        layer.weight.value[...] = rng.normal(0, 0.1, size=layer.weight.shape)
    feature_map = FeatureMap2D.from_dense(rng.normal(size=(1, 8, 4, 4)))
    reference = np.array([[[0.4, 0.5, 0.5, 0.6], [0.6, 0.4, 0.3, 0.3]]])
    queries = _param(rng, 1, 2, 8)
    mix = rng.normal(size=(1, 2, 8))
    rows.append(
        _row(
            "deformable attention",
            grad_check(lambda x: (deformable(x, reference, feature_map) * mix).sum(), queries),
            OP_TOLERANCE,
        )
    )

    projections = [
        deformable.sampling_offsets,
        deformable.attention_weights,
        deformable.value_proj,
        deformable.output_proj,
    ]
    rows.append(
        _row(
            "deformable attention (projections)",
            max(
                grad_check(
                    lambda _: (deformable(queries, reference, feature_map) * mix).sum(),
                    layer.weight,
                )
                for layer in projections
            ),
            OP_TOLERANCE,
        )
    )

    decoder_cfg = dataclasses.replace(
        TINY_MODEL, decoder_dim=8, decoder_heads=2, decoder_points=2, decoder_ffn_dim=8
    )
    decoder_layer = DecoderLayer(decoder_cfg, rng)
    decoder_layer.cross_attn.sampling_offsets.weight.value[...] = rng.normal(
        0, 0.1, size=decoder_layer.cross_attn.sampling_offsets.weight.shape
    )
    rows.append(
        _row(
            "decoder layer",
            grad_check(
                lambda x: (decoder_layer(x, reference, feature_map) * mix).sum(), queries
            ),
            OP_TOLERANCE,
        )
    )

    encoder_layer = EncoderLayer(8, 2, 2, rng, "float64")
    rows.append(
        _row(
            "encoder layer",
            grad_check(
                lambda x: (encoder_layer(_token_set(x)).features * projection).sum(),
                tokens,
            ),
            OP_TOLERANCE,
        )
    )
    return rows


def _token_set(features: DiffArray) -> TokenSet:
    grid = GridSpec(2, 2, 8)
    return TokenSet(features, 1, np.arange(4)[None], grid)


def pipeline_gradient_check(
    cfg: ModelConfig = TINY_MODEL, entries_per_param: int = 2, seed: int = 0
) -> dict:
    """
    Full loss, denoising branch included, against a sample of entries of every
    parameter; targets are computed once and held fixed.
    """
    model = Tracker(cfg, seed=seed)
    pair, gt = tiny_batch(cfg, seed=seed)
    dn = DenoisingConfig(n_groups=2)
    weights = LossWeights()

    def forward():
        return model.forward(pair, gt=gt, dn=dn, rng=np.random.default_rng(seed))

    with no_grad():
        output, dn_batch = forward()
    targets = compute_assignments(output, gt, model.encoder.search_grid, dn_batch=dn_batch)
    rng = np.random.default_rng(seed + 1)
    worst = 0.0
    for _, param in model.named_parameters():
        indices = rng.choice(param.size, size=min(entries_per_param, param.size), replace=False)
        worst = max(
            worst,
            grad_check(lambda _: total_loss(forward()[0], targets, weights)[0], param, indices=indices),
        )
    return _row("full pipeline loss", worst, PIPELINE_TOLERANCE)


def brute_force_assignment_cost(cost: np.ndarray) -> float:
    """Minimum total cost over all injective row -> column maps."""
    rows, cols = cost.shape
    if rows > cols:
        return brute_force_assignment_cost(cost.T)
    return min(
        cost[np.arange(rows), list(columns)].sum()
        for columns in itertools.permutations(range(cols), rows)
    )


def matcher_check(n_instances: int = 1000, max_side: int = 6, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(n_instances):
        cost = rng.uniform(0, 1, size=tuple(rng.integers(1, max_side + 1, size=2)))
        rows, cols = hungarian_match(cost)
        worst = max(worst, abs(cost[rows, cols].sum() - brute_force_assignment_cost(cost)))
    return _row("matcher vs exhaustive search", worst, 1e-12)


def qfl_checks() -> list[dict]:
    targets = np.linspace(0, 1, 11)
    sigma = np.linspace(0.001, 0.999, 999)
    minimizers = np.array([sigma[np.argmin(qfl(sigma, y).value)] for y in targets[1:-1]])
    worked = max(
        abs(qfl(0.5, 0.0).item() - 0.25 * np.log(2)), abs(qfl(0.5, 1.0).item() - 0.25 * np.log(2))
    )
    return [
        _row("qfl zero at target", float(np.abs(qfl(targets, targets).value).max()), 1e-12),
        _row("qfl worked values", worked, 1e-9),
        _row("qfl minimum at target", float(np.abs(minimizers - targets[1:-1]).max()), 1.5e-3),
    ]


def dn_isolation_error(
    model: Tracker, pair: ImagePair, gt: np.ndarray, dn: DenoisingConfig, seed: int = 0
) -> float:
    """
    Largest change of any matching-query or other-group output, over all decoder
    layers, when a single denoising query's content and box are perturbed.
    """
    rng = np.random.default_rng(seed)
    head = model.head
    with no_grad():
        tokens = model.encoder(pair)
        projected = head.project_tokens(tokens)
        selection = head.query_select(projected, tokens.search_index, tokens.grid)
        feature_map = FeatureMap2D.from_tokens(projected, tokens.search_index, tokens.grid)
        dn_batch = gen_denoising_batch(
            gt, tokens, projected, dn, rng, selection.n_queries, head.dn_label_embedding
        )
        base = head.run_decoder(
            selection, feature_map, None, dn_batch.content, dn_batch.boxes, dn_batch.attn_mask
        )
        worst = 0.0
        for query in range(dn_batch.n_queries):
            content = dn_batch.content.value.copy()
            content[:, query] += rng.normal(size=content.shape[-1])
            boxes = dn_batch.boxes.copy()
            boxes[:, query] = clamp_boxes(boxes[:, query] + rng.normal(0, 0.05, size=4))
            out = head.run_decoder(
                selection, feature_map, None, DiffArray(content), boxes, dn_batch.attn_mask
            )
            others = dn_batch.group_ids != dn_batch.group_ids[query]
            for layer in range(1, base.n_layers + 1):
                worst = max(
                    worst,
                    np.abs(out.boxes[layer].value - base.boxes[layer].value).max(),
                    np.abs(out.scores[layer].value - base.scores[layer].value).max(),
                    np.abs(
                        out.dn_boxes[layer - 1].value[:, others]
                        - base.dn_boxes[layer - 1].value[:, others]
                    ).max(initial=0.0),
                )
    return float(worst)


def dn_isolation_check(seed: int = 0) -> dict:
    model = Tracker(TINY_MODEL, seed=seed)
    pair, gt = tiny_batch(TINY_MODEL, seed=seed)
    return _row(
        "denoising mask isolation",
        dn_isolation_error(model, pair, gt, DenoisingConfig(n_groups=3), seed),
        ISOLATION_TOLERANCE,
    )


def noise_containment_check(n_samples: int = 10_000, seed: int = 0) -> dict:
    rng = np.random.default_rng(seed)
    gt = np.array([0.5, 0.5, 0.3, 0.2])
    outside = 0
    for center_shift in [0.2, 0.4, 0.8]:
        noised = noise_boxes(gt, center_shift, 0.4, rng, n_samples)
        outside += int((~points_in_box(noised[:, :2], gt)).sum())
    return _row("positive noised centers inside GT", float(outside), 0.5)


def prefix_check(seed: int = 0) -> dict:
    cfg = dataclasses.replace(TINY_MODEL, decoder_layers=3)
    model = Tracker(cfg, seed=seed)
    pair, _ = tiny_batch(cfg, seed=seed)
    with no_grad():
        full = model(pair)
        mismatches = sum(
            not np.array_equal(model(pair, layers_test).boxes[layer].value, full.boxes[layer].value)
            for layers_test in range(1, 4)
            for layer in range(layers_test + 1)
        )
    return _row("truncated decoder equals prefix of full run", float(mismatches), 0.5)


def measured_macs(cfg: ModelConfig, seed: int = 0) -> int:
    """Multiply-accumulates executed by one batch-1 forward pass."""
    model = Tracker(cfg, seed=seed)
    pair, _ = tiny_batch(cfg, seed=seed)
    with no_grad(), count_macs() as counter:
        model(pair)
    return counter.total


def flops_checks() -> list[dict]:
    dense = dataclasses.replace(DESK_SCALE, ce_keep_ratio=1.0)
    conv_change = abs(
        cost_conv_head(dataclasses.replace(DESK_SCALE, head="conv")).flops
        - cost_conv_head(dataclasses.replace(dense, head="conv")).flops
    )
    ce_saving = cost_pipeline(dense).flops - cost_pipeline(DESK_SCALE).flops
    violations = 0
    for keep_ratio in [1.0, VIT_BASE.ce_keep_ratio]:
        spec = dataclasses.replace(VIT_BASE, ce_keep_ratio=keep_ratio)
        conv = cost_pipeline(dataclasses.replace(spec, head="conv"))
        decoder = cost_pipeline(spec)
        violations += (decoder.params >= conv.params) + (decoder.flops >= conv.flops)
    analytic = cost_pipeline(ArchSpec.from_model_config(ModelConfig())).flops
    measured = measured_macs(ModelConfig())
    return [
        _row("conv head FLOPs independent of keep ratio", float(conv_change), 0.5),
        _row("candidate elimination lowers decoder pipeline FLOPs", float(ce_saving <= 0), 0.5),
        _row("decoder head cheaper than conv head at ViT-Base scale", float(violations), 0.5),
        _row("analytic FLOPs vs executed MACs (relative)", abs(analytic - measured) / measured, 0.01),
    ]


def run_checks(checks: list[Callable[[], "dict | list[dict]"]], verbose: bool = True) -> pd.DataFrame:
    rows = []
    for check in checks:
        start_time = time.time()
        result = check()
        rows += result if isinstance(result, list) else [result]
        if verbose:
            print(f"{check.__name__}: {time.time() - start_time:.2f}s")
    table = pd.DataFrame(rows, columns=["check", "value", "tolerance", "passed"])
    if verbose:
        print(table.to_string(index=False))
    return table


def selftest(verbose: bool = True) -> pd.DataFrame:
    return run_checks(
        [qfl_checks, matcher_check, dn_isolation_check, noise_containment_check, prefix_check, flops_checks],
        verbose,
    )


def gradcheck(verbose: bool = True) -> pd.DataFrame:
    return run_checks([op_gradient_checks, pipeline_gradient_check], verbose)


if __name__ == "__main__":
    gradcheck()
    selftest()
