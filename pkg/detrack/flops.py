"""
Analytic parameter and FLOPs model of the tracking pipeline.

FLOPs are counted as multiply-accumulates (MACs) of linear layers, attention products
and convolutions; nonlinearities, norms, softmax and bilinear interpolation are not
counted. A convolutional head runs over the full search grid, with dropped tokens
padded back in, while the decoder head reads only kept tokens and K queries.
"""

import dataclasses
import json
import os
from dataclasses import dataclass, field
import pandas as pd  # type: ignore

from .config import ConfigurationError, ModelConfig, kept_token_count

HEAD_KINDS = ("conv", "decoder")
STAGES = ("encoder", "projection", "query_selection", "head")
CONVENTION = (
    "FLOPs are multiply-accumulates of linear, attention and convolution ops at batch "
    "size 1; nonlinearities, norms and softmax are excluded."
)


@dataclass(frozen=True)
class ArchSpec:
    encoder_layers: int = 2
    encoder_dim: int = 64
    encoder_heads: int = 4
    mlp_ratio: int = 2
    patch_size: int = 8
    template_side: int = 4
    search_side: int = 8
    ce_layers: tuple[int, ...] = (1,)
    ce_keep_ratio: float = 0.5
    head: str = "decoder"
    decoder_layers: int = 3
    decoder_dim: int = 32
    decoder_heads: int = 4
    decoder_points: int = 4
    decoder_ffn_dim: int = 64
    n_queries: int = 16
    conv_channels: tuple[int, ...] = (64, 32, 16, 8)
    conv_kernel: int = 3
    conv_outputs: tuple[int, ...] = (1, 2, 2)

    def __post_init__(self):
        for item in dataclasses.fields(self):
            value = getattr(self, item.name)
            values = value if isinstance(value, tuple) else (value,)
            if item.name in ["head", "ce_layers"]:
                continue
            if any(v <= 0 for v in values):
                raise ConfigurationError(f"{item.name} must be positive, got {value}")
        if self.head not in HEAD_KINDS:
            raise ConfigurationError(f"head must be one of {HEAD_KINDS}, got {self.head}")
        if not 0.0 < self.ce_keep_ratio <= 1.0:
            raise ConfigurationError(f"ce_keep_ratio must lie in (0, 1], got {self.ce_keep_ratio}")

    @property
    def n_template_tokens(self) -> int:
        return self.template_side**2

    @property
    def n_search_tokens(self) -> int:
        return self.search_side**2

    @property
    def ce_enabled(self) -> bool:
        return bool(self.ce_layers) and self.ce_keep_ratio < 1.0

    def search_tokens_after(self, layer: int) -> int:
        """Search tokens left once encoder layer `layer` has run."""
        kept = self.n_search_tokens
        if self.ce_enabled:
            for ce_layer in self.ce_layers:
                if ce_layer <= layer:
                    kept = kept_token_count(kept, self.ce_keep_ratio)
        return kept

    @property
    def n_kept_tokens(self) -> int:
        return self.search_tokens_after(self.encoder_layers - 1)

    @classmethod
    def from_model_config(
        cls, cfg: ModelConfig, head: str = "decoder", conv_channels: tuple[int, ...] | None = None
    ) -> "ArchSpec":
        dim = cfg.encoder_dim
        return cls(
            encoder_layers=cfg.encoder_layers,
            encoder_dim=dim,
            encoder_heads=cfg.encoder_heads,
            mlp_ratio=cfg.mlp_ratio,
            patch_size=cfg.patch_size,
            template_side=cfg.template_grid_side,
            search_side=cfg.search_grid_side,
            ce_layers=cfg.ce_layers,
            ce_keep_ratio=cfg.ce_keep_ratio,
            head=head,
            decoder_layers=cfg.decoder_layers,
            decoder_dim=cfg.decoder_dim,
            decoder_heads=cfg.decoder_heads,
            decoder_points=cfg.decoder_points,
            decoder_ffn_dim=cfg.decoder_ffn_dim,
            n_queries=cfg.n_queries,
            conv_channels=conv_channels or (dim, dim // 2, dim // 4, dim // 8),
        )


# ViT-B/16 with candidate elimination at layers 4, 7 and 10, 128/256 pixel crops
VIT_BASE = ArchSpec(
    encoder_layers=12,
    encoder_dim=768,
    encoder_heads=12,
    mlp_ratio=4,
    patch_size=16,
    template_side=8,
    search_side=16,
    ce_layers=(3, 6, 9),
    ce_keep_ratio=0.7,
    decoder_layers=3,
    decoder_dim=256,
    decoder_heads=8,
    decoder_points=4,
    decoder_ffn_dim=1024,
    n_queries=64,
    conv_channels=(256, 128, 64, 32),
)
DESK_SCALE = ArchSpec.from_model_config(ModelConfig())


@dataclass(frozen=True)
class Cost:
    params: int = 0
    flops: int = 0

    def __add__(self, other: "Cost") -> "Cost":
        return Cost(self.params + other.params, self.flops + other.flops)


@dataclass
class CostReport:
    """Cost per pipeline stage; totals are the sums over stages."""

    stages: dict[str, Cost] = field(default_factory=lambda: {stage: Cost() for stage in STAGES})

    @property
    def params(self) -> int:
        return sum(cost.params for cost in self.stages.values())

    @property
    def flops(self) -> int:
        return sum(cost.flops for cost in self.stages.values())

    def __add__(self, other: "CostReport") -> "CostReport":
        return CostReport(
            {
                stage: self.stages.get(stage, Cost()) + other.stages.get(stage, Cost())
                for stage in STAGES
            }
        )


def cost_linear(n_tokens: int, d_in: int, d_out: int) -> Cost:
    return Cost(params=d_in * d_out + d_out, flops=n_tokens * d_in * d_out)


def cost_mlp(n_tokens: int, dims: list[int]) -> Cost:
    total = Cost()
    for d_in, d_out in zip(dims[:-1], dims[1:]):
        total = total + cost_linear(n_tokens, d_in, d_out)
    return total


def cost_layer_norm(dim: int) -> Cost:
    return Cost(params=2 * dim)


def cost_self_attention(n_tokens: int, dim: int) -> Cost:
    """Four projections plus the score and context products."""
    return Cost(
        params=4 * (dim * dim + dim),
        flops=4 * n_tokens * dim * dim + 2 * n_tokens * n_tokens * dim,
    )


def cost_conv(height: int, width: int, c_in: int, c_out: int, kernel: int) -> Cost:
    return Cost(
        params=kernel * kernel * c_in * c_out + c_out,
        flops=height * width * kernel * kernel * c_in * c_out,
    )


def _only(stage: str, cost: Cost) -> CostReport:
    report = CostReport()
    report.stages[stage] = cost
    return report


def cost_encoder(spec: ArchSpec) -> CostReport:
    """
    Patch embedding plus the transformer layers. Attention in a candidate-elimination
    layer runs before the drop; its MLP runs on the reduced token set.
    """
    dim, patch_in = spec.encoder_dim, 3 * spec.patch_size**2
    n_template = spec.n_template_tokens
    total = cost_linear(n_template + spec.n_search_tokens, patch_in, dim)
    total = total + Cost(params=2 * dim)
    for layer in range(spec.encoder_layers):
        n_before = n_template + spec.search_tokens_after(layer - 1)
        n_after = n_template + spec.search_tokens_after(layer)
        total = (
            total
            + cost_layer_norm(dim)
            + cost_self_attention(n_before, dim)
            + cost_layer_norm(dim)
            + cost_mlp(n_after, [dim, dim * spec.mlp_ratio, dim])
        )
    total = total + cost_layer_norm(dim)
    return _only("encoder", total)


def cost_conv_head(spec: ArchSpec) -> CostReport:
    """
    Center, offset and size branches, each a stack of k x k convolutions followed by a
    1 x 1 output convolution, over the full padded search grid.
    """
    side = spec.search_side
    total = Cost()
    for n_outputs in spec.conv_outputs:
        channels = [spec.encoder_dim, *spec.conv_channels]
        for c_in, c_out in zip(channels[:-1], channels[1:]):
            total = total + cost_conv(side, side, c_in, c_out, spec.conv_kernel)
        total = total + cost_conv(side, side, channels[-1], n_outputs, 1)
    return _only("head", total)


def cost_decoder_layer(spec: ArchSpec, n_queries: int, n_kept: int) -> Cost:
    dim, heads, points = spec.decoder_dim, spec.decoder_heads, spec.decoder_points
    deformable = (
        cost_linear(n_queries, dim, heads * points * 2)
        + cost_linear(n_queries, dim, heads * points)
        + cost_linear(n_kept, dim, dim)
        + cost_linear(n_queries, dim, dim)
        + Cost(flops=n_queries * points * dim)
    )
    return (
        cost_self_attention(n_queries, dim)
        + cost_layer_norm(dim)
        + deformable
        + cost_layer_norm(dim)
        + cost_mlp(n_queries, [dim, spec.decoder_ffn_dim, dim])
        + cost_layer_norm(dim)
    )


def cost_decoder_head(spec: ArchSpec) -> CostReport:
    """
    Token projection, query selection and the decoder. Everything past the projection
    depends only on the kept-token count and the number of queries. Parameters include
    the denoising label embedding, which only training reads.
    """
    dim, n_kept = spec.decoder_dim, spec.n_kept_tokens
    n_queries = min(spec.n_queries, n_kept)
    box_mlp = [dim, dim, dim, 4]
    report = CostReport()
    report.stages["projection"] = cost_linear(n_kept, spec.encoder_dim, dim)
    report.stages["query_selection"] = cost_mlp(n_kept, box_mlp) + cost_linear(n_kept, dim, 1)
    # positive and negative denoising label embeddings
    head = Cost(params=2 * dim)
    for _ in range(spec.decoder_layers):
        head = head + cost_decoder_layer(spec, n_queries, n_kept)
        head = head + Cost(
            flops=cost_mlp(n_queries, box_mlp).flops + cost_linear(n_queries, dim, 1).flops
        )
    # refinement heads are shared by all layers
    head = head + Cost(params=cost_mlp(0, box_mlp).params + cost_linear(0, dim, 1).params)
    report.stages["head"] = head
    return report


def cost_pipeline(spec: ArchSpec) -> CostReport:
    head = cost_conv_head(spec) if spec.head == "conv" else cost_decoder_head(spec)
    return cost_encoder(spec) + head


def compare(spec_conv: ArchSpec, spec_dec: ArchSpec) -> pd.DataFrame:
    """
    Four rows: each head with and without candidate elimination. The sparse rows use
    the specs' own keep ratios; the dense rows set the keep ratio to 1.
    Returns a DataFrame with columns: head, candidate_elimination, keep_ratio, params,
    flops, params_M, gflops, and one flops column per stage.
    """
    rows = []
    for spec, head in [(spec_conv, "conv"), (spec_dec, "decoder")]:
        for sparse in [False, True]:
            variant = dataclasses.replace(
                spec, head=head, ce_keep_ratio=spec.ce_keep_ratio if sparse else 1.0
            )
            report = cost_pipeline(variant)
            rows.append(
                {
                    "head": head,
                    "candidate_elimination": sparse,
                    "keep_ratio": variant.ce_keep_ratio,
                    "params": report.params,
                    "flops": report.flops,
                    "params_M": report.params / 1e6,
                    "gflops": report.flops / 1e9,
                    **{f"{stage}_flops": cost.flops for stage, cost in report.stages.items()},
                }
            )
    return (
        pd.DataFrame(rows)
        .sort_values(["candidate_elimination", "head"], kind="stable")
        .reset_index(drop=True)
    )


def format_report(table: pd.DataFrame, title: str = "") -> str:
    lines = [title] if title else []
    lines += [CONVENTION, "", table.to_string(index=False)]
    return "\n".join(lines) + "\n"


def save_report(tables: dict[str, pd.DataFrame], out_dir: str) -> None:
    """
    Writes flops_report.txt (aligned text) and flops_report.json with schema
    {"convention": str, "tables": {name: [row, ...]}}.
    """
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "flops_report.txt"), "w", encoding="utf-8") as f:
        f.write("\n".join(format_report(table, f"-----{name}-----") for name, table in tables.items()))
    with open(os.path.join(out_dir, "flops_report.json"), "w", encoding="utf-8") as f:
        json.dump(
            {
                "convention": CONVENTION,
                "tables": {
                    name: json.loads(table.to_json(orient="records"))
                    for name, table in tables.items()
                },
            },
            f,
            indent=2,
        )


def decoder_gflops(spec: ArchSpec, layers_test: int) -> float:
    """Pipeline GFLOPs of the decoder head when only `layers_test` layers run."""
    return cost_pipeline(
        dataclasses.replace(spec, head="decoder", decoder_layers=layers_test)
    ).flops / 1e9


def reference_tables() -> dict[str, pd.DataFrame]:
    return {
        "vit_base": compare(VIT_BASE, VIT_BASE),
        "desk_scale": compare(DESK_SCALE, DESK_SCALE),
    }


if __name__ == "__main__":
    for name, table in reference_tables().items():
        print(format_report(table, f"-----{name}-----"))
