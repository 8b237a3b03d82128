"""Squares / NoisySquares scene generation with per-object ground truth.

Backgrounds come from CIFAR-10 binary batches, a procedural clutter
generator (when CIFAR-10 is not available) or a solid palette colour
(the tiny EasySquares smoke-test set).
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field, replace
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, ParseError
from .imaging import load_image, load_mask, save_image, save_mask

logger = logging.getLogger(__name__)

CIFAR_RECORD_BYTES = 3073
CIFAR_SIDE = 32

_PRIMARIES = [(r, g, b) for r in (0, 255) for g in (0, 255) for b in (0, 255)]
_MIDTONES = [
    (128, 0, 0), (0, 128, 0), (0, 0, 128), (128, 128, 0),
    (128, 0, 128), (0, 128, 128), (192, 192, 192), (128, 128, 128),
]
PALETTE: tuple[tuple[int, int, int], ...] = tuple(_PRIMARIES + _MIDTONES)

BACKGROUND_SOURCES = ("cifar10", "procedural", "solid")

Seed = int | Sequence[int]


@dataclass(frozen=True)
class DatasetConfig:
    image_size: int = 32
    square_side: int = 9
    count_range: tuple[int, int] = (1, 5)
    palette: tuple[tuple[int, int, int], ...] = PALETTE
    noise_prob: float = 0.0
    background_source: str = "procedural"
    cifar_path: str | None = None

    def __post_init__(self):
        lo, hi = self.count_range
        if not 1 <= lo <= hi <= 16:
            raise ConfigError(f"count_range must satisfy 1 <= min <= max <= 16, got {self.count_range}")
        if not 0 < self.square_side < self.image_size:
            raise ConfigError("square_side must be positive and smaller than image_size")
        if self.image_size < 8:
            raise ConfigError("image_size must be at least 8")
        if len(self.palette) != 16:
            raise ConfigError("palette must hold exactly 16 colours")
        if not 0.0 <= self.noise_prob <= 1.0:
            raise ConfigError("noise_prob must lie in [0, 1]")
        if self.background_source not in BACKGROUND_SOURCES:
            raise ConfigError(f"unknown background source {self.background_source!r}")

    @classmethod
    def from_dict(cls, d: dict) -> "DatasetConfig":
        """Inverse of ``dataclasses.asdict`` (JSON turns tuples into lists)."""
        d = dict(d)
        if "count_range" in d:
            d["count_range"] = tuple(d["count_range"])
        if "palette" in d:
            d["palette"] = tuple(tuple(int(v) for v in c) for c in d["palette"])
        return cls(**d)


PRESETS = {
    "squares": DatasetConfig(image_size=32, square_side=9, count_range=(1, 5), background_source="cifar10"),
    "noisy_squares": DatasetConfig(
        image_size=32, square_side=9, count_range=(1, 5), noise_prob=0.3, background_source="cifar10"
    ),
    "easy_squares": DatasetConfig(image_size=24, square_side=7, count_range=(1, 3), background_source="solid"),
}


def preset(name: str, **overrides) -> DatasetConfig:
    """Named dataset config. Without CIFAR-10 files the cifar presets fall back to procedural clutter."""
    try:
        cfg = PRESETS[name]
    except KeyError:
        raise ConfigError(f"unknown dataset {name!r}; choose from {sorted(PRESETS)}") from None
    cfg = replace(cfg, **overrides)
    if cfg.background_source == "cifar10" and cfg.cifar_path is None:
        cfg = replace(cfg, background_source="procedural")
    return cfg


@dataclass
class Scene:
    image: np.ndarray
    object_masks: list[np.ndarray]
    background_id: str
    colours: list[tuple[int, int, int]] = field(default_factory=list)
    boxes: list[tuple[int, int]] = field(default_factory=list)  # top-left (y, x) per square


# -- backgrounds --------------------------------------------------------------

def parse_cifar10_batch(data: bytes) -> np.ndarray:
    """Decode a CIFAR-10 binary batch into an (N, 32, 32, 3) array in [0, 1]."""
    n, rem = divmod(len(data), CIFAR_RECORD_BYTES)
    if rem:
        raise ParseError(
            f"CIFAR-10 batch length {len(data)} is not a multiple of {CIFAR_RECORD_BYTES}", n * CIFAR_RECORD_BYTES
        )
    if n == 0:
        return np.zeros((0, CIFAR_SIDE, CIFAR_SIDE, 3))
    records = np.frombuffer(data, dtype=np.uint8).reshape(n, CIFAR_RECORD_BYTES)
    planes = records[:, 1:].reshape(n, 3, CIFAR_SIDE, CIFAR_SIDE)
    return planes.transpose(0, 2, 3, 1).astype(np.float64) / 255.0


def load_cifar10_backgrounds(path: str | Path) -> np.ndarray:
    """Load every ``*.bin`` batch under ``path`` (or the single file ``path``); labels are dropped."""
    path = Path(path)
    if path.is_dir():
        files = sorted(path.glob("*.bin"))
        if not files:
            raise FileNotFoundError(f"no CIFAR-10 .bin batches found in {path}")
    elif path.is_file():
        files = [path]
    else:
        raise FileNotFoundError(f"CIFAR-10 path {path} does not exist")
    pools = []
    for f in files:
        pool = parse_cifar10_batch(f.read_bytes())
        if len(pool) == 0:
            logger.warning("CIFAR-10 batch %s is empty", f)
        pools.append(pool)
    return np.concatenate(pools, axis=0)


@lru_cache(maxsize=4)
def _cached_pool(path: str) -> np.ndarray:
    return load_cifar10_backgrounds(path)


def procedural_background(image_size: int, rng_seed: Seed) -> np.ndarray:
    """Cluttered colour-noise stand-in for a natural background image."""
    rng = np.random.default_rng(rng_seed)
    yy, xx = np.mgrid[0:image_size, 0:image_size] / image_size
    img = np.zeros((image_size, image_size, 3))
    for c in range(3):
        for _ in range(4):
            freq = rng.uniform(0.5, 6.0)
            theta = rng.uniform(0, 2 * np.pi)
            phase = rng.uniform(0, 2 * np.pi)
            amp = rng.uniform(0.3, 1.0)
            img[..., c] += amp * np.sin(2 * np.pi * freq * (np.cos(theta) * xx + np.sin(theta) * yy) + phase)
        img[..., c] += rng.normal(0.0, 0.35, size=(image_size, image_size))
    lo, hi = img.min(), img.max()
    return (img - lo) / (hi - lo)


def _background(config: DatasetConfig, rng: np.random.Generator) -> tuple[np.ndarray, str, int | None]:
    size = config.image_size
    if config.background_source == "solid":
        idx = int(rng.integers(len(config.palette)))
        colour = np.array(config.palette[idx], dtype=np.float64) / 255.0
        return np.broadcast_to(colour, (size, size, 3)).copy(), f"solid:{idx}", idx
    if config.background_source == "procedural":
        bg_seed = int(rng.integers(2**63))
        return procedural_background(size, bg_seed), f"procedural:{bg_seed}", None
    if config.cifar_path is None:
        raise FileNotFoundError("background_source='cifar10' requires cifar_path")
    pool = _cached_pool(str(config.cifar_path))
    if len(pool) == 0:
        raise FileNotFoundError(f"no CIFAR-10 images available under {config.cifar_path}")
    idx = int(rng.integers(len(pool)))
    bg = pool[idx]
    if bg.shape[0] != size:
        bg = _resize_nearest(bg, size)
    return bg.copy(), f"cifar10:{idx}", None


def _resize_nearest(image: np.ndarray, size: int) -> np.ndarray:
    src = image.shape[0]
    idx = (np.arange(size) * src / size).astype(int)
    return image[idx][:, idx]


# -- scenes -------------------------------------------------------------------

def sample_scene(config: DatasetConfig, rng_seed: Seed) -> Scene:
    """Draw one scene: background plus 1..k palette-coloured squares; later squares occlude earlier ones."""
    rng = np.random.default_rng(rng_seed)
    image, bg_id, bg_colour = _background(config, rng)
    size, side = config.image_size, config.square_side
    lo, hi = config.count_range
    k = int(rng.integers(lo, hi + 1))
    choices = [i for i in range(len(config.palette)) if i != bg_colour]

    owner = np.full((size, size), -1, dtype=np.int64)
    colours, boxes = [], []
    for obj in range(k):
        y, x = (int(v) for v in rng.integers(0, size - side + 1, size=2))
        colour = config.palette[choices[int(rng.integers(len(choices)))]]
        image[y:y + side, x:x + side] = np.array(colour) / 255.0
        owner[y:y + side, x:x + side] = obj
        colours.append(colour)
        boxes.append((y, x))
    masks = [(owner == obj).astype(np.float64) for obj in range(k)]
    scene = Scene(image=image, object_masks=masks, background_id=bg_id, colours=colours, boxes=boxes)
    if config.noise_prob > 0:
        scene = apply_salt_pepper(scene, config.noise_prob, rng.integers(2**63))
    return scene


def apply_salt_pepper(scene: Scene, noise_prob: float, rng_seed: Seed) -> Scene:
    """Replace object pixels by pure black/white with probability ``noise_prob``."""
    if not 0.0 <= noise_prob <= 1.0:
        raise ConfigError("noise_prob must lie in [0, 1]")
    rng = np.random.default_rng(rng_seed)
    h, w = scene.image.shape[:2]
    inside = np.zeros((h, w), dtype=bool)
    for m in scene.object_masks:
        inside |= m > 0.5
    hit = inside & (rng.random((h, w)) < noise_prob)
    white = rng.random((h, w)) < 0.5
    image = scene.image.copy()
    image[hit & white] = 1.0
    image[hit & ~white] = 0.0
    return replace(scene, image=image)


def scene_seed(base_seed: int, index: int) -> tuple[int, int]:
    return (int(base_seed), int(index))


def sample_scenes(config: DatasetConfig, base_seed: int, n: int, start: int = 0) -> list[Scene]:
    return [sample_scene(config, scene_seed(base_seed, i)) for i in range(start, start + n)]


# -- on-disk datasets ---------------------------------------------------------

def write_dataset(root: str | Path, config: DatasetConfig, n: int, base_seed: int) -> Path:
    """Materialize ``n`` scenes as PNGs plus ``index.jsonl``."""
    root = Path(root)
    (root / "images").mkdir(parents=True, exist_ok=True)
    (root / "masks").mkdir(parents=True, exist_ok=True)
    with open(root / "index.jsonl", "w") as index:
        for i in range(n):
            seed = scene_seed(base_seed, i)
            scene = sample_scene(config, seed)
            img_rel = f"images/{i:06d}.png"
            save_image(root / img_rel, scene.image)
            mask_rels = []
            for j, m in enumerate(scene.object_masks):
                rel = f"masks/{i:06d}_{j}.png"
                save_mask(root / rel, m)
                mask_rels.append(rel)
            index.write(json.dumps({"image": img_rel, "masks": mask_rels, "seed": list(seed)}) + "\n")
    return root


def read_dataset(root: str | Path) -> list[Scene]:
    root = Path(root)
    index = root / "index.jsonl"
    if not index.exists():
        raise FileNotFoundError(f"{root} has no index.jsonl")
    scenes = []
    with open(index) as fh:
        for line in fh:
            if not line.strip():
                continue
            rec = json.loads(line)
            image = load_image(root / rec["image"])
            masks = [(load_mask(root / p) > 0.5).astype(np.float64) for p in rec["masks"]]
            scenes.append(Scene(image=image, object_masks=masks, background_id=f"file:{rec['image']}"))
    return scenes
