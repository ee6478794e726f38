"""Synthetic multi-scale detection scenes and the scene repository interface."""
from __future__ import annotations

from abc import ABCMeta, abstractmethod
from dataclasses import asdict, dataclass
import logging
from typing import (
    Any,
    Dict,
    Final,
    Iterator,
    List,
    NamedTuple,
    Sequence,
    Tuple,
)

import numpy as np

from fadpy.utils import derive_rng


logger = logging.getLogger(__name__)


# Constants
NOISE_STD: Final[float] = 0.1
MIN_OBJECTS: Final[int] = 1


# ======
# Config
# ======


@dataclass(frozen=True)
class DataConfig:
    num_scenes: int = 64
    eval_scenes: int = 32
    image_size: int = 64
    channels: int = 1
    min_scale: float = 6.0
    max_scale: float = 48.0
    num_classes: int = 3
    max_objects: int = 4
    stride: int = 4

    def __post_init__(self) -> None:
        for name in ("num_scenes", "eval_scenes", "image_size", "channels",
                     "num_classes", "max_objects", "stride"):
            if getattr(self, name) < 1:
                raise ValueError(f"'{name}' must be at least 1 ({getattr(self, name)})")
        validate_scale_range(self.min_scale, self.max_scale, self.image_size)
        if self.image_size % self.stride:
            raise ValueError(
                f"stride ({self.stride}) must divide image_size ({self.image_size})"
            )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


def validate_scale_range(min_scale: float, max_scale: float, image_size: int) -> None:
    if not 2 <= min_scale < max_scale:
        raise ValueError(f"Degenerate scale range [{min_scale}, {max_scale}]")
    if max_scale > image_size:
        raise ValueError(f"Scale {max_scale} does not fit a {image_size}px image")


# ======
# Scenes
# ======


class SceneObject(NamedTuple):
    label: int
    box: Tuple[float, float, float, float]  # x1, y1, x2, y2 in pixels

    @property
    def scale(self) -> float:
        x1, y1, x2, y2 = self.box
        return float(np.sqrt((x2 - x1) * (y2 - y1)))


@dataclass(frozen=True, eq=False)
class SyntheticScene:
    image: np.ndarray  # (channels, H, W) float32
    objects: Tuple[SceneObject, ...]
    seed: int

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, SyntheticScene):
            return NotImplemented
        return (
            self.seed == other.seed
            and self.objects == other.objects
            and np.array_equal(self.image, other.image)
        )

    @property
    def size(self) -> int:
        return self.image.shape[-1]


def scene_seed(seed: int, index: int) -> int:
    return int(np.random.SeedSequence([seed, index]).generate_state(1)[0])


def class_texture(label: int, height: int, width: int) -> np.ndarray:
    """Class-dependent fill: flat for class 0, stripes of growing frequency after."""
    if label == 0:
        return np.ones((height, width), dtype=np.float32)
    rows = np.arange(height)[:, None]
    cols = np.arange(width)[None, :]
    period = 2 + label % 4
    along = cols if label % 2 else rows
    stripes = ((along // (period // 2 + 1)) % 2).astype(np.float32)
    return 0.5 + stripes * (0.5 + 0.1 * label)


def shape_mask(label: int, height: int, width: int) -> np.ndarray:
    """Rectangles for even classes, ellipses for odd ones."""
    if label % 2 == 0:
        return np.ones((height, width), dtype=bool)
    ys = (np.arange(height) + 0.5) / height - 0.5
    xs = (np.arange(width) + 0.5) / width - 0.5
    return ys[:, None] ** 2 + xs[None, :] ** 2 <= 0.25


def paint_object(image: np.ndarray, label: int, x1: int, y1: int, w: int, h: int) -> None:
    fill = class_texture(label, h, w) * shape_mask(label, h, w)
    region = image[:, y1:y1 + h, x1:x1 + w]
    image[:, y1:y1 + h, x1:x1 + w] = np.where(fill > 0, fill, region)


def generate_scene(seed: int, config: DataConfig) -> SyntheticScene:
    rng = np.random.default_rng(seed)
    size = config.image_size
    image = rng.normal(0.0, NOISE_STD, (config.channels, size, size)).astype(np.float32)
    objects = []
    for _ in range(int(rng.integers(MIN_OBJECTS, config.max_objects + 1))):
        label = int(rng.integers(config.num_classes))
        log_scale = rng.uniform(np.log(config.min_scale), np.log(config.max_scale))
        scale = float(np.exp(log_scale))
        aspect = float(np.exp(rng.uniform(np.log(0.75), np.log(4 / 3))))
        w = int(np.clip(round(scale * np.sqrt(aspect)), 2, size))
        h = int(np.clip(round(scale / np.sqrt(aspect)), 2, size))
        x1 = int(rng.integers(0, size - w + 1))
        y1 = int(rng.integers(0, size - h + 1))
        paint_object(image, label, x1, y1, w, h)
        box = (float(x1), float(y1), float(x1 + w), float(y1 + h))
        objects.append(SceneObject(label, box))
    return SyntheticScene(image, tuple(objects), seed)


def generate_detection_dataset(
        seed: int,
        n: int,
        config: DataConfig,
) -> List[SyntheticScene]:
    """`n` scenes, scene i generated from `scene_seed(seed, i)`."""
    if n < 1:
        raise ValueError(f"Dataset needs at least one scene ({n})")
    return [generate_scene(scene_seed(seed, i), config) for i in range(n)]


def scale_octaves(scenes: Sequence[SyntheticScene]) -> Dict[int, int]:
    """Histogram of object scales over octaves floor(log2(scale))."""
    histogram: Dict[int, int] = {}
    for scene in scenes:
        for obj in scene.objects:
            octave = int(np.floor(np.log2(obj.scale)))
            histogram[octave] = histogram.get(octave, 0) + 1
    return histogram


def split_scenes(
        scenes: Sequence[SyntheticScene],
        val_fraction: float,
        seed: int,
) -> Tuple[List[SyntheticScene], List[SyntheticScene]]:
    """Disjoint random (train, val) halves; neither is empty."""
    if len(scenes) < 2:
        raise ValueError("Splitting needs at least two scenes")
    order = derive_rng(seed, "sampling").permutation(len(scenes))
    num_val = min(max(1, int(round(len(scenes) * val_fraction))), len(scenes) - 1)
    val = [scenes[i] for i in sorted(order[:num_val])]
    train = [scenes[i] for i in sorted(order[num_val:])]
    return train, val


def batches(
        items: Sequence[Any],
        batch_size: int,
        rng: np.random.Generator,
) -> Iterator[List[Any]]:
    """Endless batches from reshuffled epochs over `items`."""
    if not items:
        raise ValueError("Can not batch an empty sequence")
    while True:
        order = rng.permutation(len(items))
        for start in range(0, len(order), batch_size):
            chunk = order[start:start + batch_size]
            if len(chunk) < min(batch_size, len(items)):
                break
            yield [items[i] for i in chunk]


# ==========
# Repository
# ==========


class SceneRepo(metaclass=ABCMeta):
    """Cache of generated scenes keyed by their generation parameters."""

    @abstractmethod
    def load(self) -> List[SyntheticScene]:
        """All cached scenes in generation order."""

    @abstractmethod
    def save(self, scenes: Sequence[SyntheticScene], config: DataConfig) -> None:
        """Replace the cache content."""

    @abstractmethod
    def cached_config(self) -> Any:
        """Generation config of the cached scenes, or None when empty."""

    @abstractmethod
    def seeds(self) -> List[int]:
        ...

    def matches(self, seed: int, n: int, config: DataConfig) -> bool:
        expected = [scene_seed(seed, i) for i in range(n)]
        return self.cached_config() == config and self.seeds() == expected

    def get_or_generate(
            self,
            seed: int,
            n: int,
            config: DataConfig,
    ) -> List[SyntheticScene]:
        if self.matches(seed, n, config):
            logger.debug("using %d cached scenes", n)
            return self.load()
        scenes = generate_detection_dataset(seed, n, config)
        self.save(scenes, config)
        logger.info("generated %d scenes (seed %d)", n, seed)
        return scenes
