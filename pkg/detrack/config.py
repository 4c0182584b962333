"""
Configuration dataclasses and the line-oriented `key = value` config file format.

Keys without a prefix set TrainConfig fields; `model.`, `dn.` and `loss.` prefixes set
the nested ModelConfig, DenoisingConfig and LossWeights. Lines starting with `#` and
blank lines are ignored, e.g.

    epochs = 20
    assignment = quality
    model.decoder_layers = 3
    model.ce_layers = 1
    dn.n_groups = 5
"""

import dataclasses
import math
import types
import typing
from dataclasses import dataclass, field

DEFAULT_K_LOC = 8
ASSIGNMENT_MODES = ("quality", "hard", "center", "hungarian")
DENOISING_VARIANTS = ("embedding", "center_corner", "center_outside")


class ConfigurationError(ValueError):
    pass


@dataclass(frozen=True)
class ModelConfig:
    template_size: int = 32
    search_size: int = 64
    patch_size: int = 8
    encoder_dim: int = 64
    encoder_heads: int = 4
    encoder_layers: int = 2
    mlp_ratio: int = 2
    ce_layers: tuple[int, ...] = (1,)
    ce_keep_ratio: float = 0.5
    decoder_dim: int = 32
    decoder_heads: int = 4
    decoder_layers: int = 3
    decoder_points: int = 4
    decoder_ffn_dim: int = 64
    n_queries: int = 16
    anchor_size: float = 0.25
    dtype: str = "float64"

    @property
    def template_grid_side(self) -> int:
        return self.template_size // self.patch_size

    @property
    def search_grid_side(self) -> int:
        return self.search_size // self.patch_size

    @property
    def n_search_tokens(self) -> int:
        return self.search_grid_side**2

    @property
    def ce_enabled(self) -> bool:
        return bool(self.ce_layers) and self.ce_keep_ratio < 1.0

    @property
    def n_kept_search_tokens(self) -> int:
        kept = self.n_search_tokens
        if self.ce_enabled:
            for _ in self.ce_layers:
                kept = kept_token_count(kept, self.ce_keep_ratio)
        return kept

    def validate(self) -> "ModelConfig":
        for name in ["template_size", "search_size"]:
            if getattr(self, name) % self.patch_size or getattr(self, name) <= 0:
                raise ConfigurationError(
                    f"{name}={getattr(self, name)} is not divisible by "
                    f"patch_size={self.patch_size}"
                )
        for dim, heads in [
            ("encoder_dim", "encoder_heads"),
            ("decoder_dim", "decoder_heads"),
        ]:
            if getattr(self, dim) % getattr(self, heads):
                raise ConfigurationError(
                    f"{dim}={getattr(self, dim)} is not divisible by "
                    f"{heads}={getattr(self, heads)}"
                )
        if self.encoder_dim % 4:
            raise ConfigurationError("encoder_dim must be divisible by 4")
        if self.decoder_dim % 8:
            raise ConfigurationError("decoder_dim must be divisible by 8")
        if not 0.0 < self.ce_keep_ratio <= 1.0:
            raise ConfigurationError(
                f"ce_keep_ratio must lie in (0, 1], got {self.ce_keep_ratio}"
            )
        if any(not 0 <= layer < self.encoder_layers for layer in self.ce_layers):
            raise ConfigurationError(
                f"ce_layers {self.ce_layers} outside 0..{self.encoder_layers - 1}"
            )
        for name in ["encoder_layers", "decoder_layers", "decoder_points", "n_queries"]:
            if getattr(self, name) < 1:
                raise ConfigurationError(f"{name} must be at least 1")
        if self.dtype not in ["float32", "float64"]:
            raise ConfigurationError(f"dtype must be float32 or float64, got {self.dtype}")
        return self


@dataclass(frozen=True)
class DenoisingConfig:
    enabled: bool = True
    n_groups: int = 5
    center_shift: float = 0.4
    box_scale: float = 0.4
    center_shift_negative: float = 0.6
    box_scale_negative: float = 0.6
    variant: str = "center_corner"

    def validate(self) -> "DenoisingConfig":
        for name in ["center_shift", "box_scale"]:
            if not 0.0 < getattr(self, name) < 1.0:
                raise ConfigurationError(f"dn.{name} must lie in (0, 1)")
        if self.center_shift_negative < self.center_shift:
            raise ConfigurationError("negative center shift must be >= positive")
        if self.box_scale_negative < self.box_scale:
            raise ConfigurationError("negative box scale must be >= positive")
        if self.n_groups < 0:
            raise ConfigurationError("dn.n_groups must be >= 0")
        if self.variant not in DENOISING_VARIANTS:
            raise ConfigurationError(
                f"dn.variant must be one of {DENOISING_VARIANTS}, got {self.variant}"
            )
        return self


@dataclass(frozen=True)
class LossWeights:
    giou: float = 2.0
    l1: float = 5.0
    beta: float = 2.0
    cls: float = 1.0
    loc: float = 1.0

    def validate(self) -> "LossWeights":
        for item in dataclasses.fields(self):
            if getattr(self, item.name) < 0:
                raise ConfigurationError(f"loss.{item.name} must be nonnegative")
        return self


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 10
    pairs_per_epoch: int = 200
    batch_size: int = 8
    lr_encoder: float = 3e-4
    lr_decoder: float | None = None
    weight_decay: float = 1e-4
    betas: tuple[float, ...] = (0.9, 0.999)
    lr_drop_fraction: float = 0.8
    lr_drop_factor: float = 0.1
    assignment: str = "quality"
    k_loc: int = DEFAULT_K_LOC
    difficulty: float = 0.3
    seed: int = 0
    eval_every: int = 0
    eval_sequences: int = 4
    eval_frames: int = 8
    iou_threshold: float = 0.7
    prefetch: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    dn: DenoisingConfig = field(default_factory=DenoisingConfig)
    loss: LossWeights = field(default_factory=LossWeights)

    @property
    def decoder_lr(self) -> float:
        return self.lr_decoder if self.lr_decoder is not None else 10 * self.lr_encoder

    @property
    def steps_per_epoch(self) -> int:
        return math.ceil(self.pairs_per_epoch / self.batch_size)

    @property
    def total_steps(self) -> int:
        return self.epochs * self.steps_per_epoch

    def learning_rates(self, step: int) -> tuple[float, float]:
        """(encoder, decoder) learning rates, dropped for the last 20% of epochs."""
        factor = (
            self.lr_drop_factor
            if step >= self.lr_drop_fraction * self.total_steps
            else 1.0
        )
        return self.lr_encoder * factor, self.decoder_lr * factor

    def validate(self) -> "TrainConfig":
        if self.epochs < 0 or self.batch_size < 1 or self.pairs_per_epoch < 1:
            raise ConfigurationError("epochs >= 0, batch_size >= 1, pairs_per_epoch >= 1")
        if self.assignment not in ASSIGNMENT_MODES:
            raise ConfigurationError(
                f"assignment must be one of {ASSIGNMENT_MODES}, got {self.assignment}"
            )
        if self.k_loc < 1:
            raise ConfigurationError("k_loc must be at least 1")
        if len(self.betas) != 2 or not all(0.0 <= b < 1.0 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")
        self.model.validate()
        self.dn.validate()
        self.loss.validate()
        return self


def kept_token_count(n_tokens: int, keep_ratio: float) -> int:
    if not 0.0 < keep_ratio <= 1.0:
        raise ConfigurationError(f"keep ratio must lie in (0, 1], got {keep_ratio}")
    return math.ceil(keep_ratio * n_tokens)


def _parse_value(raw: str, annotation: object) -> object:
    if annotation is bool:
        if raw.lower() in ["true", "yes", "on", "1"]:
            return True
        if raw.lower() in ["false", "no", "off", "0"]:
            return False
        raise ValueError(f"not a boolean: {raw}")
    if annotation in [int, float, str]:
        return annotation(raw)  # type: ignore[operator]
    origin = typing.get_origin(annotation)
    if origin is tuple:
        element = typing.get_args(annotation)[0]
        return tuple(element(value) for value in raw.replace(",", " ").split())
    if origin in [types.UnionType, typing.Union]:
        if raw.lower() == "none":
            return None
        inner = [arg for arg in typing.get_args(annotation) if arg is not type(None)]
        return _parse_value(raw, inner[0])
    raise ValueError(f"unsupported config type {annotation}")


SECTIONS = {"model": ModelConfig, "dn": DenoisingConfig, "loss": LossWeights}


def parse_config_lines(
    lines: typing.Iterable[str], base: TrainConfig | None = None
) -> TrainConfig:
    updates: dict[str, dict[str, object]] = {"": {}, **{name: {} for name in SECTIONS}}
    for line_number, line in enumerate(lines, start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {line_number}: expected 'key = value'")
        key, raw = (part.strip() for part in line.split("=", 1))
        section, _, name = key.rpartition(".")
        cls = SECTIONS.get(section, TrainConfig) if section else TrainConfig
        if section and section not in SECTIONS:
            raise ConfigurationError(f"line {line_number}: unknown section '{section}'")
        hints = typing.get_type_hints(cls)
        if name not in hints or name in SECTIONS:
            raise ConfigurationError(f"line {line_number}: unknown key '{key}'")
        try:
            updates[section][name] = _parse_value(raw, hints[name])
        except ValueError as e:
            raise ConfigurationError(
                f"line {line_number}: cannot parse '{raw}' for '{key}'"
            ) from e
    return apply_overrides(base or TrainConfig(), updates)


def apply_overrides(
    config: TrainConfig, updates: dict[str, dict[str, object]]
) -> TrainConfig:
    nested = {
        name: dataclasses.replace(getattr(config, name), **updates.get(name, {}))
        for name in SECTIONS
    }
    return dataclasses.replace(config, **updates.get("", {}), **nested)


def load_config(path: str, base: TrainConfig | None = None) -> TrainConfig:
    with open(path, "r", encoding="utf-8") as f:
        return parse_config_lines(f, base)


def model_config_from_dict(values: dict[str, object]) -> ModelConfig:
    return ModelConfig(
        **{
            key: tuple(value) if isinstance(value, list) else value
            for key, value in values.items()
        }
    )
