import numpy as np
import pytest

from detrack.data.synthetic import (
    SEARCH_FACTOR,
    SyntheticSequence,
    box_in_crop,
    crop_around,
    crop_to_scene,
    generate_batch,
    generate_pair,
    random_scene,
    random_target_box,
    validation_sequences,
)


def test_generate_pair_shapes_and_range():
    pair = generate_pair(np.random.default_rng(0), 0.5, template_size=32, search_size=64)
    assert pair.template.shape == (3, 32, 32)
    assert pair.search.shape == (3, 64, 64)
    x0, y0, x1, y1 = pair.gt.to_xyxy()
    assert 0.0 <= x0 < x1 <= 1.0
    assert 0.0 <= y0 < y1 <= 1.0


def test_zero_difficulty_centers_the_target():
    pair = generate_pair(np.random.default_rng(1), 0.0)
    assert (pair.gt.cx, pair.gt.cy) == pytest.approx((0.5, 0.5))
    assert np.sqrt(pair.gt.w * pair.gt.h) == pytest.approx(1 / SEARCH_FACTOR)


def test_generate_batch_is_deterministic():
    first = generate_batch(np.random.default_rng(2), 3)
    second = generate_batch(np.random.default_rng(2), 3)
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a, b)
    assert first[2].shape == (3, 4)


def test_crop_round_trip():
    box = np.array([0.3, -0.2, 0.15, 0.1])
    crop = crop_around(box, SEARCH_FACTOR, center=np.array([0.25, -0.1]))
    np.testing.assert_allclose(crop_to_scene(box_in_crop(box, crop), crop), box)
    np.testing.assert_allclose(box_in_crop(box, crop_around(box, 4.0))[:2], [0.5, 0.5])


def test_random_scene_distractor_count():
    rng = np.random.default_rng(3)
    box = random_target_box(rng)
    assert len(random_scene(rng, 0.0, box).distractors) == 0
    assert len(random_scene(rng, 1.0, box).distractors) == 4
    with pytest.raises(AssertionError):
        random_scene(rng, 1.5, box)


def test_target_is_visible_in_render():
    rng = np.random.default_rng(4)
    box = np.array([0.0, 0.0, 0.2, 0.2])
    scene = random_scene(rng, 0.0, box)
    image = scene.render(crop_around(box, 4.0), 32, rng)
    assert image.shape == (3, 32, 32)
    inside = scene.target.mask(*np.meshgrid((np.arange(32) + 0.5) / 32 * 0.8 - 0.4, (np.arange(32) + 0.5) / 32 * 0.8 - 0.4))
    assert inside.sum() > 0
    assert not np.allclose(image[:, inside].mean(axis=1), image[:, ~inside].mean(axis=1))


def test_sequence_renders_identically():
    sequence = SyntheticSequence.generate(5, n_frames=4)
    assert sequence.n_frames == 4
    crop = crop_around(sequence.boxes[2], SEARCH_FACTOR)
    np.testing.assert_array_equal(sequence.render_search(2, crop), sequence.render_search(2, crop))
    again = SyntheticSequence.generate(5, n_frames=4)
    np.testing.assert_array_equal(sequence.template, again.template)
    np.testing.assert_array_equal(sequence.boxes, again.boxes)


def test_sequence_frames_normalized_to_previous_crop():
    sequence = SyntheticSequence.generate(6, n_frames=5)
    frames = sequence.frames()
    assert len(frames) == 4
    image, gt = frames[0]
    assert image.shape == (3, 64, 64)
    assert 0.0 < gt.cx < 1.0 and 0.0 < gt.cy < 1.0


def test_validation_sequences_are_fixed():
    first = validation_sequences(2, n_frames=3)
    second = validation_sequences(2, n_frames=3)
    assert [s.seed for s in first] == [10_000, 10_001]
    for a, b in zip(first, second):
        np.testing.assert_array_equal(a.boxes, b.boxes)
