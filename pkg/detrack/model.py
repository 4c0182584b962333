import dataclasses
import os
import pickle
import numpy as np

from .autodiff import Module, Parameter
from .attention import FeatureMap2D
from .config import DenoisingConfig, ModelConfig, model_config_from_dict
from .encoder import Encoder, ImagePair
from .geometry import BBox
from .head import DecoderOutput, Head
from .training import DenoisingBatch, gen_denoising_batch

CHECKPOINT_FORMAT = "detrack-checkpoint"
CHECKPOINT_VERSION = 1


class Tracker(Module):
    """Joint ViT encoder with candidate elimination followed by the query decoder head."""

    def __init__(self, cfg: ModelConfig, seed: int = 0):
        self.cfg = cfg.validate()
        rng = np.random.default_rng(seed)
        self.encoder = Encoder(cfg, rng)
        self.head = Head(cfg, rng)

    @property
    def parameter_groups(self) -> dict[str, list[Parameter]]:
        """Encoder and decoder parameters, trained with separate learning rates."""
        return {"encoder": self.encoder.parameters(), "decoder": self.head.parameters()}

    def forward(
        self,
        pair: ImagePair,
        layers_test: int | None = None,
        gt: "BBox | np.ndarray | None" = None,
        dn: DenoisingConfig | None = None,
        rng: np.random.Generator | None = None,
    ) -> tuple[DecoderOutput, DenoisingBatch | None]:
        """
        Full forward pass. With a GT box, an enabled denoising config and an rng, the
        denoising queries are built from the projected tokens and run through the
        decoder alongside the matching queries.
        """
        tokens = self.encoder(pair)
        projected = self.head.project_tokens(tokens)
        selection = self.head.query_select(projected, tokens.search_index, tokens.grid)
        feature_map = FeatureMap2D.from_tokens(projected, tokens.search_index, tokens.grid)
        dn_batch = None
        if gt is not None and dn is not None and dn.enabled and dn.n_groups > 0:
            assert rng is not None, "denoising needs an explicit rng"
            dn_batch = gen_denoising_batch(
                gt,
                tokens,
                projected,
                dn,
                rng,
                selection.n_queries,
                self.head.dn_label_embedding,
            )
            output = self.head.run_decoder(
                selection,
                feature_map,
                layers_test,
                dn_batch.content,
                dn_batch.boxes,
                dn_batch.attn_mask,
            )
        else:
            output = self.head.run_decoder(selection, feature_map, layers_test)
        return output, dn_batch

    def __call__(self, pair: ImagePair, layers_test: int | None = None) -> DecoderOutput:
        return self.forward(pair, layers_test)[0]


def save_checkpoint(model: Tracker, path: str) -> None:
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "wb") as f:
        pickle.dump(
            {
                "format": CHECKPOINT_FORMAT,
                "version": CHECKPOINT_VERSION,
                "model_config": dataclasses.asdict(model.cfg),
                "params": model.state_dict(),
            },
            f,
        )


def load_checkpoint(path: str) -> Tracker:
    with open(path, "rb") as f:
        checkpoint = pickle.load(f)
    assert (
        checkpoint.get("format") == CHECKPOINT_FORMAT
    ), f"{path} is not a detrack checkpoint"
    assert (
        checkpoint.get("version") == CHECKPOINT_VERSION
    ), f"unsupported checkpoint version {checkpoint.get('version')}"
    model = Tracker(model_config_from_dict(checkpoint["model_config"]))
    model.load_state_dict(checkpoint["params"])
    return model
