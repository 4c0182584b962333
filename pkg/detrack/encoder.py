"""
Joint ViT encoder over concatenated template and search tokens, with candidate
elimination dropping search tokens that the template barely attends to.
"""

from dataclasses import dataclass, replace
import numpy as np

from . import autodiff as ad
from .attention import MultiHeadAttention
from .autodiff import DiffArray, LayerNorm, Linear, Module, Parameter
from .config import ConfigurationError, ModelConfig, kept_token_count
from .geometry import GridSpec, sincos_grid_embedding


@dataclass
class ImagePair:
    """Template (B, 3, Hz, Wz) and search (B, 3, Hx, Wx) images; a missing batch axis is added."""

    template: np.ndarray
    search: np.ndarray

    def __post_init__(self):
        self.template = np.asarray(self.template)
        self.search = np.asarray(self.search)
        if self.template.ndim == 3:
            self.template = self.template[None]
        if self.search.ndim == 3:
            self.search = self.search[None]
        assert (
            self.template.shape[0] == self.search.shape[0]
        ), "template and search batches differ in size"

    @property
    def batch_size(self) -> int:
        return self.search.shape[0]


@dataclass
class TokenSet:
    """
    Encoder tokens: template rows first, then the kept search rows in grid order.
    `search_index` (B, N_kept) holds the row-major grid position of each kept search row.
    """

    features: DiffArray
    n_template: int
    search_index: np.ndarray
    grid: GridSpec

    @property
    def n_kept(self) -> int:
        return self.search_index.shape[1]

    @property
    def search_features(self) -> DiffArray:
        return self.features[:, self.n_template :]

    @property
    def template_features(self) -> DiffArray:
        return self.features[:, : self.n_template]

    @property
    def kept_mask(self) -> np.ndarray:
        mask = np.zeros((self.search_index.shape[0], self.grid.n_tokens), dtype=bool)
        np.put_along_axis(mask, self.search_index, True, axis=1)
        return mask


def patchify(images: np.ndarray, patch_size: int) -> np.ndarray:
    """(B, C, H, W) -> (B, H/p * W/p, C*p*p), patches in row-major order."""
    batch, channels, height, width = images.shape
    if height % patch_size or width % patch_size:
        raise ConfigurationError(
            f"image of {height}x{width} pixels is not divisible into "
            f"{patch_size}x{patch_size} patches"
        )
    rows, cols = height // patch_size, width // patch_size
    return (
        images.reshape(batch, channels, rows, patch_size, cols, patch_size)
        .transpose(0, 2, 4, 1, 3, 5)
        .reshape(batch, rows * cols, channels * patch_size * patch_size)
    )


def candidate_scores(attn_weights: np.ndarray, n_template: int) -> np.ndarray:
    """Mean attention each search token receives from the template tokens, over heads."""
    return attn_weights[:, :, :n_template, n_template:].mean(axis=(1, 2))


def select_kept(scores: np.ndarray, keep_ratio: float) -> np.ndarray:
    """
    Positions of the top ceil(keep_ratio * N) scores per row, returned in ascending
    position order; equal scores keep the lower position first.
    """
    n_keep = kept_token_count(scores.shape[-1], keep_ratio)
    order = np.argsort(-scores, axis=-1, kind="stable")[:, :n_keep]
    return np.sort(order, axis=-1)


def candidate_eliminate(
    tokens: TokenSet, attn_weights: "DiffArray | np.ndarray", keep_ratio: float
) -> TokenSet:
    """
    Remove the search tokens least attended by the template. Dropped rows leave the
    sequence entirely; kept rows are copied unchanged.
    """
    weights = attn_weights.value if isinstance(attn_weights, DiffArray) else attn_weights
    keep = select_kept(candidate_scores(weights, tokens.n_template), keep_ratio)
    features = ad.concat(
        [tokens.template_features, ad.gather_rows(tokens.search_features, keep)], axis=1
    )
    return replace(
        tokens,
        features=features,
        search_index=np.take_along_axis(tokens.search_index, keep, axis=1),
    )


class EncoderLayer(Module):
    """Pre-norm transformer layer: x + MHSA(LN(x)), then x + MLP(LN(x))."""

    def __init__(
        self, dim: int, n_heads: int, mlp_ratio: int, rng: np.random.Generator, dtype: str
    ):
        self.norm1 = LayerNorm(dim, dtype)
        self.attn = MultiHeadAttention(dim, n_heads, rng, dtype)
        self.norm2 = LayerNorm(dim, dtype)
        self.fc1 = Linear(dim, dim * mlp_ratio, rng, dtype)
        self.fc2 = Linear(dim * mlp_ratio, dim, rng, dtype)

    def __call__(self, tokens: TokenSet, keep_ratio: float | None = None) -> TokenSet:
        normed = self.norm1(tokens.features)
        attended, weights = self.attn.forward(normed, normed, normed)
        tokens = replace(tokens, features=tokens.features + attended)
        if keep_ratio is not None:
            tokens = candidate_eliminate(tokens, weights, keep_ratio)
        hidden = ad.gelu(self.fc1(self.norm2(tokens.features)))
        return replace(tokens, features=tokens.features + self.fc2(hidden))


class Encoder(Module):
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator):
        self.cfg = cfg
        dim, dtype = cfg.encoder_dim, cfg.dtype
        self.template_grid = GridSpec.from_image(
            cfg.template_size, cfg.template_size, cfg.patch_size
        )
        self.search_grid = GridSpec.from_image(cfg.search_size, cfg.search_size, cfg.patch_size)
        self.patch_embed = Linear(3 * cfg.patch_size**2, dim, rng, dtype)
        self.template_type = Parameter(np.zeros(dim, dtype=dtype))
        self.search_type = Parameter(np.zeros(dim, dtype=dtype))
        self.pos_template = sincos_grid_embedding(self.template_grid, dim).astype(dtype)
        self.pos_search = sincos_grid_embedding(self.search_grid, dim).astype(dtype)
        self.layers = [
            EncoderLayer(dim, cfg.encoder_heads, cfg.mlp_ratio, rng, dtype)
            for _ in range(cfg.encoder_layers)
        ]
        self.norm = LayerNorm(dim, dtype)

    def __call__(self, pair: ImagePair) -> TokenSet:
        return self.encode(self.patchify_and_embed(pair))

    def patchify_and_embed(self, pair: ImagePair) -> TokenSet:
        """Linear patch projection plus fixed sin-cos positions and a learned type embedding."""
        dtype = self.cfg.dtype
        template = self.patch_embed(patchify(pair.template.astype(dtype), self.cfg.patch_size))
        search = self.patch_embed(patchify(pair.search.astype(dtype), self.cfg.patch_size))
        if template.shape[1] != self.template_grid.n_tokens or (
            search.shape[1] != self.search_grid.n_tokens
        ):
            raise ConfigurationError(
                f"images of {pair.template.shape[-2:]} / {pair.search.shape[-2:]} pixels "
                f"do not match the configured {self.cfg.template_size} / "
                f"{self.cfg.search_size}"
            )
        features = ad.concat(
            [
                template + self.pos_template + self.template_type,
                search + self.pos_search + self.search_type,
            ],
            axis=1,
        )
        return TokenSet(
            features=features,
            n_template=self.template_grid.n_tokens,
            search_index=np.tile(np.arange(self.search_grid.n_tokens), (pair.batch_size, 1)),
            grid=self.search_grid,
        )

    def encode(self, tokens: TokenSet) -> TokenSet:
        for i, layer in enumerate(self.layers):
            eliminate = self.cfg.ce_enabled and i in self.cfg.ce_layers
            tokens = layer(tokens, self.cfg.ce_keep_ratio if eliminate else None)
        return replace(tokens, features=self.norm(tokens.features))
