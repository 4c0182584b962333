"""
Query selection over encoder tokens and the deformable transformer decoder with
layer-wise box refinement.

Every kept search token predicts a proposal box and a foreground score; the top-K
tokens become content queries with their proposals as reference boxes. Each decoder
layer adds a sin-cos embedding of the current reference box to the content, runs self
attention, deformable cross attention and an FFN, and refines the box by adding the
offset predicted by a box MLP that all layers share.
"""

from dataclasses import dataclass, field
import numpy as np

from . import autodiff as ad
from .attention import DeformableAttention, DeformAttnConfig, FeatureMap2D, MultiHeadAttention
from .autodiff import MLP, DiffArray, LayerNorm, Linear, Module, Parameter
from .config import ConfigurationError, ModelConfig
from .encoder import TokenSet
from .geometry import MIN_BOX_SIZE, BBox, GridSpec, sincos_frequencies, token_centers

BOX_LOWER = np.array([0.0, 0.0, MIN_BOX_SIZE, MIN_BOX_SIZE])
BOX_UPPER = np.ones(4)
LOGIT_EPS = 1e-5


@dataclass(frozen=True)
class QuerySelectionConfig:
    n_queries: int = 16

    def __post_init__(self):
        if self.n_queries < 1:
            raise ConfigurationError(f"n_queries must be at least 1, got {self.n_queries}")


@dataclass(frozen=True)
class Query:
    content: np.ndarray
    reference: BBox


@dataclass
class QuerySelection:
    """
    Top-K queries per batch element: content (B, K, D), reference boxes (B, K, 4),
    and where each query came from, both as a row of the kept-token list and as a
    search-grid position. `token_boxes` / `token_scores` are the layer-0 predictions of
    every kept token.
    """

    content: DiffArray
    reference: DiffArray
    token_row: np.ndarray
    grid_index: np.ndarray
    token_boxes: DiffArray
    token_scores: DiffArray

    @property
    def n_queries(self) -> int:
        return self.content.shape[1]

    def queries(self, batch_index: int = 0) -> list[Query]:
        return [
            Query(self.content.value[batch_index, q], BBox.from_array(self.reference.value[batch_index, q]))
            for q in range(self.n_queries)
        ]


@dataclass
class DecoderOutput:
    """
    Predictions per stage: index 0 holds the query-selection predictions of every kept
    token, index l >= 1 those of decoder layer l for the K matching queries. Denoising
    predictions, when present, are listed per decoder layer (index l - 1).
    """

    boxes: list[DiffArray]
    scores: list[DiffArray]
    token_grid_index: np.ndarray
    query_grid_index: np.ndarray
    dn_boxes: list[DiffArray] = field(default_factory=list)
    dn_scores: list[DiffArray] = field(default_factory=list)

    @property
    def n_layers(self) -> int:
        return len(self.boxes) - 1

    @property
    def final_boxes(self) -> np.ndarray:
        return self.boxes[-1].value

    @property
    def final_scores(self) -> np.ndarray:
        return self.scores[-1].value


def clamp_box_array(boxes: DiffArray) -> DiffArray:
    return ad.clip(boxes, BOX_LOWER, BOX_UPPER)


def inverse_sigmoid(values: np.ndarray) -> np.ndarray:
    values = np.clip(values, LOGIT_EPS, 1 - LOGIT_EPS)
    return np.log(values / (1 - values))


def box_position_embedding(boxes: "DiffArray | np.ndarray", dim: int) -> DiffArray:
    """Differentiable form of geometry.sincos_box_embedding for (B, Q, 4) boxes."""
    boxes = ad.as_diff(boxes)
    angles = boxes.reshape(*boxes.shape, 1) * sincos_frequencies(dim)
    embedding = ad.concat([ad.sin(angles), ad.cos(angles)], axis=-1)
    return embedding.reshape(*boxes.shape[:-1], dim)


def top_k_rows(scores: np.ndarray, k: int) -> np.ndarray:
    """Row positions of the k highest scores per batch element, highest first; ties by position."""
    return np.argsort(-scores, axis=-1, kind="stable")[:, : min(k, scores.shape[-1])]


class DecoderLayer(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        dim, dtype = cfg.decoder_dim, cfg.dtype
        self.dim = dim
        self.self_attn = MultiHeadAttention(dim, cfg.decoder_heads, rng, dtype)
        self.norm1 = LayerNorm(dim, dtype)
        self.cross_attn = DeformableAttention(
            DeformAttnConfig(cfg.decoder_heads, cfg.decoder_points, dim), rng, dtype
        )
        self.norm2 = LayerNorm(dim, dtype)
        self.ffn = MLP([dim, cfg.decoder_ffn_dim, dim], rng, dtype)
        self.norm3 = LayerNorm(dim, dtype)

    def __call__(
        self,
        content: DiffArray,
        reference: DiffArray,
        feature_map: FeatureMap2D,
        attn_mask: np.ndarray | None = None,
    ) -> DiffArray:
        position = box_position_embedding(reference, self.dim)
        query = content + position
        content = self.norm1(content + self.self_attn(query, query, content, attn_mask))
        content = self.norm2(
            content + self.cross_attn(content + position, reference, feature_map)
        )
        return self.norm3(content + self.ffn(content))


class Head(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dim, dtype = cfg.decoder_dim, cfg.dtype
        self.selection = QuerySelectionConfig(cfg.n_queries)
        self.input_proj = Linear(cfg.encoder_dim, dim, rng, dtype)
        self.proposal_box = MLP([dim, dim, dim, 4], rng, dtype)
        self.proposal_box.layers[-1].zero_()
        self.proposal_score = Linear(dim, 1, rng, dtype)
        self.layers = [DecoderLayer(cfg, rng) for _ in range(cfg.decoder_layers)]
        self.box_head = MLP([dim, dim, dim, 4], rng, dtype)
        self.box_head.layers[-1].zero_()
        self.score_head = Linear(dim, 1, rng, dtype)
        # static positive / negative label content for the embedding denoising variant
        self.dn_label_embedding = Parameter(
            rng.normal(0.0, 1.0, size=(2, dim)).astype(dtype)
        )

    @property
    def n_layers(self) -> int:
        return len(self.layers)

    def project_tokens(self, tokens: TokenSet) -> DiffArray:
        """Map every kept search token to the decoder width: (B, N_kept, D_dec)."""
        return self.input_proj(tokens.search_features)

    def query_select(
        self, projected: DiffArray, search_index: np.ndarray, grid: GridSpec
    ) -> QuerySelection:
        """
        Each token predicts a box around its own grid cell (anchor of side
        `anchor_size`) and a foreground score; the top-K tokens by score are selected.
        """
        anchors = np.concatenate(
            [
                token_centers(grid)[search_index],
                np.full(search_index.shape + (2,), self.cfg.anchor_size),
            ],
            axis=-1,
        )
        token_boxes = clamp_box_array(
            ad.sigmoid(self.proposal_box(projected) + inverse_sigmoid(anchors))
        )
        token_scores = ad.sigmoid(self.proposal_score(projected)).reshape(
            *projected.shape[:2]
        )
        rows = top_k_rows(token_scores.value, self.selection.n_queries)
        return QuerySelection(
            content=ad.gather_rows(projected, rows),
            reference=ad.gather_rows(token_boxes, rows),
            token_row=rows,
            grid_index=np.take_along_axis(search_index, rows, axis=1),
            token_boxes=token_boxes,
            token_scores=token_scores,
        )

    def refine(self, content: DiffArray, reference: DiffArray) -> tuple[DiffArray, DiffArray]:
        """Shared prediction heads: refined box = clamp(reference + offset), and a score."""
        boxes = clamp_box_array(reference + self.box_head(content))
        scores = ad.sigmoid(self.score_head(content)).reshape(*content.shape[:2])
        return boxes, scores

    def run_decoder(
        self,
        selection: QuerySelection,
        feature_map: FeatureMap2D,
        layers_test: int | None = None,
        dn_content: DiffArray | None = None,
        dn_boxes: np.ndarray | None = None,
        dn_mask: np.ndarray | None = None,
    ) -> DecoderOutput:
        """
        Run the first `layers_test` decoder layers (all by default). Denoising queries,
        when given, are placed before the matching queries and isolated by `dn_mask`.
        """
        layers_test = self.n_layers if layers_test is None else layers_test
        if not 1 <= layers_test <= self.n_layers:
            raise ConfigurationError(
                f"layers_test must lie in 1..{self.n_layers}, got {layers_test}"
            )
        content, reference = selection.content, selection.reference
        n_dn = 0
        if dn_content is not None:
            n_dn = dn_content.shape[1]
            content = ad.concat([dn_content, content], axis=1)
            reference = ad.concat([ad.as_diff(dn_boxes), reference], axis=1)
        output = DecoderOutput(
            boxes=[selection.token_boxes],
            scores=[selection.token_scores],
            token_grid_index=np.asarray(feature_map.index),
            query_grid_index=selection.grid_index,
        )
        for layer in self.layers[:layers_test]:
            content = layer(content, reference, feature_map, dn_mask)
            reference, scores = self.refine(content, reference)
            output.boxes.append(reference[:, n_dn:])
            output.scores.append(scores[:, n_dn:])
            if n_dn:
                output.dn_boxes.append(reference[:, :n_dn])
                output.dn_scores.append(scores[:, :n_dn])
        return output

    def __call__(
        self,
        tokens: TokenSet,
        layers_test: int | None = None,
    ) -> DecoderOutput:
        projected = self.project_tokens(tokens)
        selection = self.query_select(projected, tokens.search_index, tokens.grid)
        feature_map = FeatureMap2D.from_tokens(projected, tokens.search_index, tokens.grid)
        return self.run_decoder(selection, feature_map, layers_test)
