import pytest

from detrack.config import (
    ConfigurationError,
    DenoisingConfig,
    ModelConfig,
    TrainConfig,
    apply_overrides,
    kept_token_count,
    load_config,
    model_config_from_dict,
    parse_config_lines,
)


def test_defaults_validate():
    config = TrainConfig().validate()
    assert config.model.n_search_tokens == 64
    assert config.model.n_kept_search_tokens == 32
    assert config.decoder_lr == pytest.approx(10 * config.lr_encoder)


def test_parse_config_lines():
    config = parse_config_lines(
        [
            "# desk run",
            "epochs = 3",
            "assignment = hungarian  # baseline",
            "",
            "model.decoder_layers = 2",
            "model.ce_layers = 0, 1",
            "dn.enabled = off",
            "loss.giou = 1.5",
            "lr_decoder = none",
        ]
    )
    assert config.epochs == 3
    assert config.assignment == "hungarian"
    assert config.model.decoder_layers == 2
    assert config.model.ce_layers == (0, 1)
    assert config.dn.enabled is False
    assert config.loss.giou == 1.5
    assert config.lr_decoder is None


@pytest.mark.parametrize(
    "line, message",
    [
        ("epochs 3", "line 1"),
        ("colour = red", "unknown key"),
        ("optimizer.lr = 1", "unknown section"),
        ("epochs = many", "cannot parse"),
        ("model = 3", "unknown key"),
    ],
)
def test_parse_config_errors(line, message):
    with pytest.raises(ConfigurationError, match=message):
        parse_config_lines([line])


def test_load_config_from_file(tmp_path):
    path = tmp_path / "desk.cfg"
    path.write_text("seed = 7\nmodel.n_queries = 8\n", encoding="utf-8")
    config = load_config(str(path))
    assert config.seed == 7
    assert config.model.n_queries == 8


def test_apply_overrides_keeps_other_fields():
    base = parse_config_lines(["epochs = 4", "dn.n_groups = 2"])
    config = apply_overrides(base, {"": {"seed": 3}, "dn": {"enabled": False}})
    assert (config.epochs, config.seed) == (4, 3)
    assert (config.dn.n_groups, config.dn.enabled) == (2, False)


@pytest.mark.parametrize(
    "overrides",
    [
        {"patch_size": 7},
        {"encoder_heads": 3},
        {"decoder_dim": 36, "decoder_heads": 4},
        {"ce_keep_ratio": 0.0},
        {"ce_layers": (5,)},
        {"decoder_layers": 0},
        {"dtype": "float16"},
    ],
)
def test_invalid_model_config(overrides):
    with pytest.raises(ConfigurationError):
        ModelConfig(**overrides).validate()


def test_invalid_denoising_config():
    with pytest.raises(ConfigurationError):
        DenoisingConfig(center_shift=0.5, center_shift_negative=0.4).validate()
    with pytest.raises(ConfigurationError):
        DenoisingConfig(variant="random").validate()


def test_invalid_assignment():
    with pytest.raises(ConfigurationError):
        TrainConfig(assignment="greedy").validate()


def test_kept_token_count():
    assert kept_token_count(64, 0.5) == 32
    assert kept_token_count(10, 0.25) == 3
    assert kept_token_count(5, 1.0) == 5
    with pytest.raises(ConfigurationError):
        kept_token_count(10, 1.5)


def test_learning_rate_drop():
    config = TrainConfig(epochs=10, pairs_per_epoch=8, batch_size=8, lr_encoder=1e-3)
    assert config.total_steps == 10
    assert config.learning_rates(7) == pytest.approx((1e-3, 1e-2))
    assert config.learning_rates(8) == pytest.approx((1e-4, 1e-3))


def test_model_config_from_dict():
    config = model_config_from_dict({"ce_layers": [0], "decoder_layers": 2})
    assert config.ce_layers == (0,)
    assert config.decoder_layers == 2
