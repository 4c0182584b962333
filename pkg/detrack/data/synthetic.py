"""
Synthetic tracking data: a striped target shape over a textured background with
distractor shapes and pixel noise. Scenes are continuous, so any crop can be rendered
on demand at any resolution; boxes are center-size, in scene units unless stated
otherwise.

Crops follow the usual tracking convention: the template covers 2x the target side
sqrt(w * h) around the target, the search region 4x around the previous estimate.
"""

from dataclasses import dataclass, field, replace
from typing import NamedTuple
import numpy as np

from ..geometry import BBox

TEMPLATE_FACTOR = 2.0
SEARCH_FACTOR = 4.0
TARGET_SIDE_RANGE = (0.1, 0.2)
MAX_ASPECT = 2.0
MAX_DISTRACTORS = 4
TRANSLATION_JITTER = 0.25
SCALE_JITTER = 0.2
BRIGHTNESS_JITTER = 0.2
NOISE_STD = 0.1
MIN_COLOUR_DISTANCE = 0.4


@dataclass(frozen=True)
class Shape:
    kind: str
    box: np.ndarray
    colour: np.ndarray
    stripe_frequency: float
    stripe_phase: float
    stripe_angle: float

    def mask(self, xs: np.ndarray, ys: np.ndarray) -> np.ndarray:
        cx, cy, w, h = self.box
        u, v = (xs - cx) / (w / 2), (ys - cy) / (h / 2)
        if self.kind == "ellipse":
            return u**2 + v**2 <= 1
        return (np.abs(u) <= 1) & (np.abs(v) <= 1)

    def paint(self, image: np.ndarray, xs: np.ndarray, ys: np.ndarray) -> None:
        mask = self.mask(xs, ys)
        cx, cy, w, h = self.box
        along = ((xs - cx) * np.cos(self.stripe_angle) + (ys - cy) * np.sin(self.stripe_angle)) / max(w, h)
        pattern = 0.75 + 0.25 * np.sin(2 * np.pi * self.stripe_frequency * along + self.stripe_phase)
        image[:, mask] = self.colour[:, None] * pattern[mask]


@dataclass(frozen=True)
class Scene:
    background: np.ndarray
    texture_frequency: np.ndarray
    target: Shape
    distractors: tuple[Shape, ...] = ()
    noise_std: float = 0.0
    brightness: float = 1.0

    def render(self, crop: np.ndarray, size: int, rng: np.random.Generator) -> np.ndarray:
        """
        Render the square crop (cx, cy, side) at size x size pixels.
        Returns a (3, size, size) image centered around zero.
        """
        cx, cy, side = crop
        offsets = (np.arange(size) + 0.5) / size * side - side / 2
        xs, ys = np.meshgrid(cx + offsets, cy + offsets, indexing="xy")
        texture = 0.1 * np.sin(2 * np.pi * (self.texture_frequency[0] * xs + self.texture_frequency[1] * ys))
        image = self.background[:, None, None] + texture[None]
        for shape in self.distractors:
            shape.paint(image, xs, ys)
        self.target.paint(image, xs, ys)
        if self.noise_std > 0:
            image = image + rng.normal(0.0, self.noise_std, size=image.shape)
        return self.brightness * image - 0.5

    def with_target_box(self, box: np.ndarray) -> "Scene":
        return replace(self, target=replace(self.target, box=np.asarray(box, dtype=float)))


def target_side(box: np.ndarray) -> float:
    return float(np.sqrt(box[2] * box[3]))


def crop_around(box: np.ndarray, factor: float, center: np.ndarray | None = None) -> np.ndarray:
    """Square crop (cx, cy, side) of side factor * sqrt(w * h), centered on `center` or the box."""
    center = box[:2] if center is None else center
    return np.array([center[0], center[1], factor * target_side(box)])


def box_in_crop(box: np.ndarray, crop: np.ndarray) -> np.ndarray:
    """Scene box -> box normalized to the crop."""
    cx, cy, side = crop
    return np.array(
        [(box[0] - cx) / side + 0.5, (box[1] - cy) / side + 0.5, box[2] / side, box[3] / side]
    )


def crop_to_scene(box: np.ndarray, crop: np.ndarray) -> np.ndarray:
    """Box normalized to the crop -> scene box."""
    cx, cy, side = crop
    return np.array(
        [cx + (box[0] - 0.5) * side, cy + (box[1] - 0.5) * side, box[2] * side, box[3] * side]
    )


def _random_colour(rng: np.random.Generator, avoid: np.ndarray | None = None) -> np.ndarray:
    colour = rng.uniform(0.0, 1.0, size=3)
    if avoid is not None and np.linalg.norm(colour - avoid) < MIN_COLOUR_DISTANCE:
        colour = 1.0 - colour
    return colour


def _random_shape(
    rng: np.random.Generator, box: np.ndarray, avoid_colour: np.ndarray | None = None
) -> Shape:
    return Shape(
        kind=["rect", "ellipse"][rng.integers(2)],
        box=box,
        colour=_random_colour(rng, avoid_colour),
        stripe_frequency=rng.uniform(1.0, 3.0),
        stripe_phase=rng.uniform(0.0, 2 * np.pi),
        stripe_angle=rng.uniform(0.0, np.pi),
    )


def random_target_box(rng: np.random.Generator, center: np.ndarray | None = None) -> np.ndarray:
    side = rng.uniform(*TARGET_SIDE_RANGE)
    aspect = np.exp(rng.uniform(-np.log(MAX_ASPECT), np.log(MAX_ASPECT)))
    center = np.zeros(2) if center is None else center
    return np.array([center[0], center[1], side * np.sqrt(aspect), side / np.sqrt(aspect)])


def random_scene(rng: np.random.Generator, difficulty: float, target_box: np.ndarray) -> Scene:
    """A scene around `target_box` with round(4 * difficulty) distractors near the target."""
    assert 0.0 <= difficulty <= 1.0, "difficulty must lie in [0, 1]"
    target = _random_shape(rng, target_box)
    side = target_side(target_box)
    distractors = []
    for _ in range(int(round(MAX_DISTRACTORS * difficulty))):
        center = target_box[:2] + rng.uniform(-1.0, 1.0, size=2) * SEARCH_FACTOR * side / 2
        size = side * rng.uniform(0.6, 1.2, size=2)
        distractors.append(_random_shape(rng, np.concatenate([center, size]), target.colour))
    return Scene(
        background=rng.uniform(0.2, 0.8, size=3),
        texture_frequency=rng.uniform(-1.0, 1.0, size=2) / side,
        target=target,
        distractors=tuple(distractors),
        noise_std=NOISE_STD * difficulty,
    )


class TrainingPair(NamedTuple):
    template: np.ndarray
    search: np.ndarray
    gt: BBox


def generate_pair(
    rng: np.random.Generator,
    difficulty: float = 0.3,
    template_size: int = 32,
    search_size: int = 64,
) -> TrainingPair:
    """
    Template crop (2x target side, centered) and search crop (4x target side, scaled
    and translated by up to difficulty-scaled jitter) of one random scene, each with
    its own brightness jitter. The GT box is normalized to the search crop and lies
    fully inside it.
    """
    box = random_target_box(rng)
    scene = random_scene(rng, difficulty, box)
    template_scene = replace(
        scene, brightness=1 + rng.uniform(-1, 1) * BRIGHTNESS_JITTER * difficulty
    )
    template = template_scene.render(crop_around(box, TEMPLATE_FACTOR), template_size, rng)

    crop = crop_around(box, SEARCH_FACTOR)
    crop[2] *= np.exp(rng.uniform(-1, 1) * SCALE_JITTER * difficulty)
    max_shift = 0.5 - 0.5 * box[2:].max() / crop[2]
    shift = rng.uniform(-1, 1, size=2) * min(TRANSLATION_JITTER * difficulty, max_shift)
    crop[:2] = box[:2] - shift * crop[2]
    search_scene = replace(
        scene, brightness=1 + rng.uniform(-1, 1) * BRIGHTNESS_JITTER * difficulty
    )
    search = search_scene.render(crop, search_size, rng)
    return TrainingPair(template, search, BBox.from_array(box_in_crop(box, crop)))


def generate_batch(
    rng: np.random.Generator,
    batch_size: int,
    difficulty: float = 0.3,
    template_size: int = 32,
    search_size: int = 64,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Stacked (templates, searches, gt boxes (B, 4))."""
    pairs = [
        generate_pair(rng, difficulty, template_size, search_size) for _ in range(batch_size)
    ]
    return (
        np.stack([pair.template for pair in pairs]),
        np.stack([pair.search for pair in pairs]),
        np.stack([pair.gt.as_array() for pair in pairs]),
    )


@dataclass
class SyntheticSequence:
    """
    A target moving smoothly through a fixed scene. `boxes` holds the scene-space GT
    box of every frame; frames are rendered on demand, with noise seeded by
    (seed, frame) so any crop of a frame renders identically every time.
    """

    seed: int
    scene: Scene
    boxes: np.ndarray
    template: np.ndarray
    search_size: int = 64
    difficulty: float = 0.3
    _cache: dict = field(default_factory=dict, repr=False)

    @classmethod
    def generate(
        cls,
        seed: int,
        n_frames: int = 8,
        difficulty: float = 0.3,
        template_size: int = 32,
        search_size: int = 64,
    ) -> "SyntheticSequence":
        assert n_frames >= 1, "a sequence needs at least one frame"
        rng = np.random.default_rng(seed)
        box = random_target_box(rng)
        scene = random_scene(rng, difficulty, box)
        side = target_side(box)
        velocity = rng.uniform(-1, 1, size=2) * 0.3 * side * (difficulty + 0.2)
        boxes = [box]
        for _ in range(n_frames - 1):
            velocity = velocity + rng.normal(0.0, 0.1 * side, size=2)
            velocity = np.clip(velocity, -0.4 * side, 0.4 * side)
            scale = np.exp(rng.normal(0.0, 0.03 * difficulty))
            previous = boxes[-1]
            boxes.append(
                np.concatenate([previous[:2] + velocity, previous[2:] * scale])
            )
        template = scene.render(
            crop_around(box, TEMPLATE_FACTOR), template_size, np.random.default_rng([seed, 0, 0])
        )
        return cls(seed, scene, np.array(boxes), template, search_size, difficulty)

    @property
    def n_frames(self) -> int:
        return len(self.boxes)

    @property
    def init_box(self) -> np.ndarray:
        return self.boxes[0]

    def render_search(self, frame: int, crop: np.ndarray) -> np.ndarray:
        assert 0 <= frame < self.n_frames, f"frame {frame} out of range"
        return self.scene.with_target_box(self.boxes[frame]).render(
            crop, self.search_size, np.random.default_rng([self.seed, frame, 1])
        )

    def frames(self) -> list[tuple[np.ndarray, BBox]]:
        """
        Search images of frames 1.. cropped around the previous GT box, with the GT box
        normalized to each crop.
        """
        if "frames" not in self._cache:
            frames = []
            for frame in range(1, self.n_frames):
                crop = crop_around(self.boxes[frame - 1], SEARCH_FACTOR)
                frames.append(
                    (self.render_search(frame, crop), BBox.from_array(box_in_crop(self.boxes[frame], crop)))
                )
            self._cache["frames"] = frames
        return self._cache["frames"]


def validation_sequences(
    n_sequences: int,
    n_frames: int = 8,
    difficulty: float = 0.3,
    seed: int = 10_000,
    template_size: int = 32,
    search_size: int = 64,
) -> list[SyntheticSequence]:
    return [
        SyntheticSequence.generate(
            seed + i, n_frames, difficulty, template_size, search_size
        )
        for i in range(n_sequences)
    ]


if __name__ == "__main__":
    pair = generate_pair(np.random.default_rng(0), difficulty=0.5)
    print(f"template {pair.template.shape}, search {pair.search.shape}, gt {pair.gt}")
    sequence = SyntheticSequence.generate(0)
    print(f"sequence of {sequence.n_frames} frames, first box {sequence.init_box}")
