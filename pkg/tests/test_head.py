import dataclasses
import numpy as np
import pytest

from detrack.attention import FeatureMap2D
from detrack.autodiff import DiffArray, Parameter, grad_check, no_grad
from detrack.config import ConfigurationError
from detrack.geometry import (
    MIN_BOX_SIZE,
    BBox,
    GridSpec,
    clamp_boxes,
    sincos_box_embedding,
    token_centers,
)
from detrack.head import (
    DecoderLayer,
    Head,
    QuerySelectionConfig,
    box_position_embedding,
    inverse_sigmoid,
    top_k_rows,
)


def test_top_k_rows():
    np.testing.assert_array_equal(top_k_rows(np.array([[0.9, 0.1, 0.5]]), 2), [[0, 2]])
    np.testing.assert_array_equal(top_k_rows(np.array([[0.2, 0.7, 0.5]]), 5), [[1, 2, 0]])
    np.testing.assert_array_equal(top_k_rows(np.array([[0.5, 0.5, 0.5]]), 2), [[0, 1]])


def test_query_selection_config():
    with pytest.raises(ConfigurationError):
        QuerySelectionConfig(0)


def test_inverse_sigmoid_round_trip():
    values = np.array([0.1, 0.25, 0.5, 0.9])
    np.testing.assert_allclose(1 / (1 + np.exp(-inverse_sigmoid(values))), values)


def test_box_position_embedding_matches_geometry():
    boxes = np.random.default_rng(0).uniform(size=(2, 3, 4))
    np.testing.assert_allclose(
        box_position_embedding(boxes, 16).value, sincos_box_embedding(boxes, 16), atol=1e-12
    )


def test_identity_projection_keeps_tokens(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    head = tiny_model.head
    assert head.cfg.encoder_dim == head.cfg.decoder_dim
    head.input_proj.weight.value[...] = np.eye(head.cfg.decoder_dim)
    tokens = tiny_model.encoder(pair)
    np.testing.assert_array_equal(head.project_tokens(tokens).value, tokens.search_features.value)


def test_query_select_starts_from_token_anchors(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    tokens = tiny_model.encoder(pair)
    head = tiny_model.head
    selection = head.query_select(head.project_tokens(tokens), tokens.search_index, tokens.grid)
    assert selection.n_queries == head.cfg.n_queries
    centers = token_centers(tokens.grid)[tokens.search_index]
    np.testing.assert_allclose(selection.token_boxes.value[..., :2], centers, atol=1e-9)
    np.testing.assert_allclose(selection.token_boxes.value[..., 2:], head.cfg.anchor_size, atol=1e-9)
    scores = selection.token_scores.value
    for b in range(scores.shape[0]):
        chosen = scores[b, selection.token_row[b]]
        assert np.all(np.diff(chosen) <= 0)
        assert chosen[-1] >= np.max(np.delete(scores[b], selection.token_row[b]), initial=0.0)
    np.testing.assert_array_equal(
        selection.grid_index, np.take_along_axis(tokens.search_index, selection.token_row, axis=1)
    )
    queries = selection.queries(0)
    assert len(queries) == head.cfg.n_queries
    assert isinstance(queries[0].reference, BBox)


def test_query_select_with_fewer_tokens_than_queries(tiny_config, tiny_pair):
    cfg = dataclasses.replace(tiny_config, n_queries=100)
    head = Head(cfg, np.random.default_rng(0))
    projected = DiffArray(np.random.default_rng(1).normal(size=(1, 5, cfg.decoder_dim)))
    grid = GridSpec(4, 4, 8)
    selection = head.query_select(projected, np.array([[0, 3, 5, 9, 15]]), grid)
    assert selection.n_queries == 5
    np.testing.assert_array_equal(
        selection.token_row[0], np.argsort(-selection.token_scores.value[0], kind="stable")
    )


def test_zero_box_offsets_keep_references(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    output = tiny_model(pair)
    reference = output.boxes[1].value
    for later in output.boxes[2:]:
        np.testing.assert_allclose(later.value, reference)
    assert output.n_layers == tiny_model.cfg.decoder_layers


def test_refinement_telescopes_over_layers(tiny_model, tiny_pair, monkeypatch):
    pair, _ = tiny_pair
    head = tiny_model.head
    rng = np.random.default_rng(3)
    last = head.box_head.layers[-1]
    last.weight.value[...] = rng.normal(scale=0.002, size=last.weight.shape)
    last.bias.value[...] = [0.01, -0.01, 0.005, 0.002]
    box_head, offsets = head.box_head, []

    def recording_box_head(content):
        out = box_head(content)
        offsets.append(out.value.copy())
        return out

    monkeypatch.setattr(head, "box_head", recording_box_head)
    with no_grad():
        tokens = tiny_model.encoder(pair)
        projected = head.project_tokens(tokens)
        selection = head.query_select(projected, tokens.search_index, tokens.grid)
        feature_map = FeatureMap2D.from_tokens(projected, tokens.search_index, tokens.grid)
        output = head.run_decoder(selection, feature_map)

    proposal = selection.reference.value
    partial_sums = proposal + np.cumsum(offsets, axis=0)
    assert len(offsets) == head.n_layers
    assert np.abs(offsets).max() > 0
    # no intermediate box touches the clamp
    assert np.all((partial_sums[..., :2] > 0) & (partial_sums[..., :2] < 1))
    assert np.all((partial_sums[..., 2:] > MIN_BOX_SIZE) & (partial_sums[..., 2:] < 1))
    for layer in range(head.n_layers):
        np.testing.assert_allclose(
            output.boxes[layer + 1].value, clamp_boxes(partial_sums[layer]), atol=1e-12
        )


def test_decoder_layer_gradients(tiny_config):
    cfg = dataclasses.replace(
        tiny_config, decoder_dim=8, decoder_heads=2, decoder_points=2, decoder_ffn_dim=8
    )
    rng = np.random.default_rng(4)
    layer = DecoderLayer(cfg, rng)
    offsets = layer.cross_attn.sampling_offsets.weight
    offsets.value[...] = rng.normal(scale=0.1, size=offsets.shape)
    feature_map = FeatureMap2D.from_dense(rng.normal(size=(1, 8, 4, 4)))
    content = Parameter(rng.normal(size=(1, 3, 8)))
    reference = np.array([[[0.4, 0.5, 0.5, 0.6], [0.6, 0.4, 0.3, 0.3], [0.3, 0.6, 0.4, 0.2]]])
    mix = rng.normal(size=(1, 3, 8))

    def loss(x):
        return (layer(x, reference, feature_map) * mix).sum()

    assert grad_check(loss, content) < 1e-4
    for weight in [layer.self_attn.q_proj.weight, layer.ffn.layers[0].weight, offsets]:
        assert grad_check(lambda _: loss(content), weight) < 1e-4


def test_output_shapes(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    output = tiny_model(pair)
    kept = tiny_model.cfg.n_kept_search_tokens
    assert output.boxes[0].shape == (2, kept, 4)
    assert output.scores[0].shape == (2, kept)
    assert output.final_boxes.shape == (2, tiny_model.cfg.n_queries, 4)
    assert output.final_scores.shape == (2, tiny_model.cfg.n_queries)
    assert output.token_grid_index.shape == (2, kept)
    assert output.dn_boxes == []


def test_layer_truncation_is_a_prefix(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    rng = np.random.default_rng(2)
    for layer in tiny_model.head.layers:
        layer.ffn.layers[-1].weight.value[...] = rng.normal(scale=0.1, size=layer.ffn.layers[-1].weight.shape)
    tiny_model.head.box_head.layers[-1].weight.value[...] = rng.normal(
        scale=0.05, size=tiny_model.head.box_head.layers[-1].weight.shape
    )
    full = tiny_model(pair)
    for layers_test in range(1, tiny_model.cfg.decoder_layers + 1):
        truncated = tiny_model(pair, layers_test)
        assert truncated.n_layers == layers_test
        for a, b in zip(truncated.boxes, full.boxes[: layers_test + 1]):
            np.testing.assert_array_equal(a.value, b.value)
        for a, b in zip(truncated.scores, full.scores[: layers_test + 1]):
            np.testing.assert_array_equal(a.value, b.value)


@pytest.mark.parametrize("layers_test", [0, 3])
def test_invalid_layers_test(tiny_model, tiny_pair, layers_test):
    pair, _ = tiny_pair
    with pytest.raises(ConfigurationError):
        tiny_model(pair, layers_test)


def test_decoder_reads_only_kept_tokens(tiny_model, tiny_pair):
    pair, _ = tiny_pair
    tokens = tiny_model.encoder(pair)
    head = tiny_model.head
    projected = head.project_tokens(tokens)
    fmap = FeatureMap2D.from_tokens(projected, tokens.search_index, tokens.grid)
    dense = fmap.dense_rows().value
    dropped = ~tokens.kept_mask
    assert dropped.any()
    np.testing.assert_array_equal(dense[dropped], 0.0)
