import dataclasses
import numpy as np
import pytest

from detrack.autodiff import DiffArray, no_grad
from detrack.config import ConfigurationError, ModelConfig
from detrack.encoder import (
    Encoder,
    ImagePair,
    TokenSet,
    candidate_eliminate,
    candidate_scores,
    patchify,
    select_kept,
)
from detrack.geometry import GridSpec


def test_patchify_row_major():
    images = np.arange(16.0).reshape(1, 1, 4, 4)
    patches = patchify(images, 2)
    assert patches.shape == (1, 4, 4)
    np.testing.assert_array_equal(patches[0, 0], [0, 1, 4, 5])
    np.testing.assert_array_equal(patches[0, 1], [2, 3, 6, 7])
    with pytest.raises(ConfigurationError):
        patchify(np.zeros((1, 3, 6, 8)), 4)


def test_patchify_and_embed_token_count(rng):
    encoder = Encoder(ModelConfig(), rng)
    pair = ImagePair(rng.normal(size=(3, 32, 32)), rng.normal(size=(3, 64, 64)))
    tokens = encoder.patchify_and_embed(pair)
    assert tokens.features.shape == (1, 80, 64)
    assert tokens.n_template == 16
    np.testing.assert_array_equal(tokens.search_index[0], np.arange(64))


def test_identical_images_give_identical_tokens(rng):
    encoder = Encoder(ModelConfig(), rng)
    search = rng.normal(size=(3, 64, 64))
    template = rng.normal(size=(3, 32, 32))
    pair = ImagePair(np.stack([template, template]), np.stack([search, search]))
    features = encoder(pair).features.value
    np.testing.assert_allclose(features[0], features[1], atol=1e-12)


def test_desk_encoder_keeps_half_the_search_tokens(rng):
    cfg = ModelConfig()
    tokens = Encoder(cfg, rng)(
        ImagePair(rng.normal(size=(2, 3, 32, 32)), rng.normal(size=(2, 3, 64, 64)))
    )
    assert tokens.n_kept == 32 == cfg.n_kept_search_tokens
    assert tokens.features.shape == (2, 16 + 32, 64)
    assert tokens.kept_mask.sum(axis=1).tolist() == [32, 32]
    assert np.all(np.diff(tokens.search_index, axis=1) > 0)


@pytest.mark.parametrize("overrides", [{"ce_layers": ()}, {"ce_keep_ratio": 1.0}])
def test_encoder_without_elimination_keeps_everything(rng, overrides):
    cfg = dataclasses.replace(ModelConfig(), **overrides)
    tokens = Encoder(cfg, rng)(
        ImagePair(rng.normal(size=(3, 32, 32)), rng.normal(size=(3, 64, 64)))
    )
    assert tokens.n_kept == 64
    assert tokens.kept_mask.all()


def test_encoder_without_elimination_is_permutation_equivariant(tiny_config, rng):
    encoder = Encoder(dataclasses.replace(tiny_config, ce_layers=()), rng)
    for seed in range(5):
        images = np.random.default_rng(seed)
        pair = ImagePair(images.normal(size=(3, 16, 16)), images.normal(size=(3, 32, 32)))
        with no_grad():
            tokens = encoder.patchify_and_embed(pair)
            n_template = tokens.n_template
            order = images.permutation(tokens.search_index.shape[1])
            permuted = TokenSet(
                DiffArray(
                    np.concatenate(
                        [
                            tokens.features.value[:, :n_template],
                            tokens.features.value[:, n_template + order],
                        ],
                        axis=1,
                    )
                ),
                n_template=n_template,
                search_index=tokens.search_index[:, order],
                grid=tokens.grid,
            )
            original, shuffled = encoder.encode(tokens), encoder.encode(permuted)
        np.testing.assert_allclose(
            shuffled.template_features.value, original.template_features.value, atol=1e-12
        )
        np.testing.assert_allclose(
            shuffled.search_features.value,
            original.search_features.value[:, order],
            atol=1e-12,
        )
        np.testing.assert_array_equal(shuffled.search_index, original.search_index[:, order])


def test_patch_embedding_is_local(tiny_config, rng):
    encoder = Encoder(tiny_config, rng)
    p = tiny_config.patch_size
    template, search = rng.normal(size=(3, 16, 16)), rng.normal(size=(3, 32, 32))
    with no_grad():
        before = encoder.patchify_and_embed(ImagePair(template, search)).features.value
        for row, col in [(0, 0), (1, 2), (3, 3)]:
            changed = search.copy()
            changed[:, row * p : (row + 1) * p, col * p : (col + 1) * p] += rng.normal(
                size=(3, p, p)
            )
            after = encoder.patchify_and_embed(ImagePair(template, changed)).features.value
            moved = np.flatnonzero(np.abs(after - before).max(axis=-1)[0] > 0)
            assert moved.tolist() == [4 + row * 4 + col]


def test_encoder_output_finite_over_seeds(tiny_config):
    encoder = Encoder(tiny_config, np.random.default_rng(0))
    for seed in range(1000):
        images = np.random.default_rng(seed)
        scale = 10.0 ** images.uniform(-3, 3)
        pair = ImagePair(
            scale * images.normal(size=(3, 16, 16)), scale * images.normal(size=(3, 32, 32))
        )
        with no_grad():
            tokens = encoder(pair)
        assert np.isfinite(tokens.features.value).all(), seed


def test_mismatched_image_size_is_rejected(rng):
    encoder = Encoder(ModelConfig(), rng)
    with pytest.raises(ConfigurationError):
        encoder(ImagePair(rng.normal(size=(3, 32, 32)), rng.normal(size=(3, 48, 48))))


def test_select_kept():
    np.testing.assert_array_equal(select_kept(np.array([[0.9, 0.1, 0.5, 0.4]]), 0.5), [[0, 2]])
    np.testing.assert_array_equal(select_kept(np.ones((1, 5)), 0.5), [[0, 1, 2]])
    np.testing.assert_array_equal(select_kept(np.array([[0.3, 0.2]]), 1.0), [[0, 1]])


def _toy_tokens() -> tuple[TokenSet, np.ndarray]:
    grid = GridSpec(2, 2, 8)
    features = DiffArray(np.arange(18.0).reshape(1, 6, 3))
    tokens = TokenSet(features, n_template=2, search_index=np.arange(4)[None], grid=grid)
    weights = np.zeros((1, 1, 6, 6))
    weights[0, 0, :2, 2:] = [[0.9, 0.1, 0.5, 0.4], [0.9, 0.1, 0.5, 0.4]]
    return tokens, weights


def test_candidate_scores_average_template_rows():
    tokens, weights = _toy_tokens()
    np.testing.assert_allclose(candidate_scores(weights, 2), [[0.9, 0.1, 0.5, 0.4]])


def test_candidate_eliminate_copies_kept_rows():
    tokens, weights = _toy_tokens()
    kept = candidate_eliminate(tokens, weights, 0.5)
    np.testing.assert_array_equal(kept.search_index, [[0, 2]])
    np.testing.assert_array_equal(kept.features.value[0], tokens.features.value[0, [0, 1, 2, 4]])
    np.testing.assert_array_equal(kept.kept_mask, [[True, False, True, False]])
    with pytest.raises(ConfigurationError):
        candidate_eliminate(tokens, weights, 0.0)
