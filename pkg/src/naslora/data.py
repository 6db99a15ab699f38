"""Deterministic synthetic segmentation data.

Each sample is a textured value-noise background with 1..3 geometric shapes
(ellipse, rectangle, triangle) at seeded positions. In multi-class mode the
shape kind encodes the class; binary mode draws kinds at random. Foreground
and background mean intensities are kept at least 0.2 apart so the task is
learnable. Every pixel is a pure function of (master seed, split, index).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ShapeError, ValueCheckError

SPLIT_BASES = {"train": 0, "val": 1_000_000, "test": 2_000_000}

_SAMPLE_STREAM = 7
_SHUFFLE_STREAM = 8
_FLIP_STREAM = 9

# per-shape target area fraction; union of <= 3 shapes stays within the
# census bounds [0.05, 0.6] asserted on the foreground fraction
_AREA_LO, _AREA_HI = 0.06, 0.18
_FG_LO, _FG_HI = 0.05, 0.55
_MIN_CONTRAST = 0.22


@dataclass
class DataConfig:
    image_size: int = 64
    num_classes: int = 1
    shapes_min: int = 1
    shapes_max: int = 3
    noise_amp: float = 0.12
    train_size: int = 200
    val_size: int = 40
    test_size: int = 40
    seed: int = 0

    def __post_init__(self):
        if not 1 <= self.num_classes <= 4:
            raise ValueCheckError("DataConfig: num_classes must be 1..4")
        if not 1 <= self.shapes_min <= self.shapes_max <= 3:
            raise ValueCheckError("DataConfig: shapes per image must be 1..3")

    def split_size(self, split: str) -> int:
        try:
            return {"train": self.train_size, "val": self.val_size,
                    "test": self.test_size}[split]
        except KeyError:
            raise ValueCheckError(f"DataConfig: unknown split {split!r}") from None


@dataclass
class SegSample:
    image: np.ndarray      # (3, S, S) in [0, 1]
    labels: np.ndarray     # (S, S) ints in {0..K}
    sample_id: int


def _value_noise(rng, s: int, amp: float) -> np.ndarray:
    """Bilinearly upsampled coarse noise in [-amp, amp], zero-ish mean."""
    coarse = rng.uniform(-1.0, 1.0, size=(9, 9))
    xs = np.linspace(0, 8, s)
    i0 = np.floor(xs).astype(int)
    i1 = np.minimum(i0 + 1, 8)
    f = xs - i0
    rows = coarse[i0][:, i1] * f[None, :] + coarse[i0][:, i0] * (1 - f[None, :])
    rows1 = coarse[i1][:, i1] * f[None, :] + coarse[i1][:, i0] * (1 - f[None, :])
    return (rows * (1 - f[:, None]) + rows1 * f[:, None]) * amp


def _shape_mask(kind: int, rng, s: int) -> np.ndarray:
    """Boolean mask for one shape with seeded geometry and exact target area."""
    area = rng.uniform(_AREA_LO, _AREA_HI) * s * s
    cx = rng.uniform(0.28, 0.72) * s
    cy = rng.uniform(0.28, 0.72) * s
    theta = rng.uniform(0, math.pi)
    ct, st = math.cos(theta), math.sin(theta)
    yy, xx = np.mgrid[0:s, 0:s]
    xr = (xx - cx) * ct + (yy - cy) * st
    yr = -(xx - cx) * st + (yy - cy) * ct
    if kind == 0:                                   # ellipse
        aspect = rng.uniform(0.5, 2.0)
        a = math.sqrt(area * aspect / math.pi)
        b = area / (math.pi * a)
        return (xr / a) ** 2 + (yr / b) ** 2 <= 1.0
    if kind == 1:                                   # rectangle
        aspect = rng.uniform(0.5, 2.0)
        a = math.sqrt(area * aspect) / 2
        b = area / (4 * a)
        return (np.abs(xr) <= a) & (np.abs(yr) <= b)
    # triangle: three vertices around the center, scaled to the target area
    ang = np.sort(rng.uniform(0, 2 * math.pi, size=3))
    rad = rng.uniform(0.7, 1.0, size=3)
    vx, vy = rad * np.cos(ang), rad * np.sin(ang)
    raw = 0.5 * abs((vx[1] - vx[0]) * (vy[2] - vy[0])
                    - (vx[2] - vx[0]) * (vy[1] - vy[0]))
    if raw < 1e-6:
        raw, vx, vy = 0.5, np.array([0.0, 1.0, 0.5]), np.array([0.0, 0.0, 1.0])
    sc = math.sqrt(area / raw)
    vx, vy = vx * sc, vy * sc
    inside = np.ones((s, s), dtype=bool)
    for i in range(3):
        ex, ey = vx[(i + 1) % 3] - vx[i], vy[(i + 1) % 3] - vy[i]
        cross = ex * (yr - vy[i]) - ey * (xr - vx[i])
        inside &= cross >= 0
    return inside


def _render(rng, cfg: DataConfig):
    s, k = cfg.image_size, cfg.num_classes
    n_shapes = int(rng.integers(cfg.shapes_min, cfg.shapes_max + 1))
    if k == 1:
        classes = [1] * n_shapes
        kinds = [int(rng.integers(0, 3)) for _ in range(n_shapes)]
    else:
        replace = n_shapes > k
        classes = sorted(rng.choice(np.arange(1, k + 1), size=n_shapes,
                                    replace=replace).tolist())
        kinds = [(c - 1) % 3 for c in classes]

    labels = np.zeros((s, s), dtype=np.int64)
    for kind, c in zip(kinds, classes):
        labels[_shape_mask(kind, rng, s)] = c

    bg_level = rng.uniform(0.22, 0.42)
    fg_level = bg_level + rng.uniform(0.28, 0.5)
    fg = labels > 0
    image = np.empty((3, s, s))
    for ch in range(3):
        plane = np.full((s, s), bg_level + rng.uniform(-0.03, 0.03))
        for c in np.unique(labels[fg]):
            plane[labels == c] = fg_level + rng.uniform(-0.04, 0.04)
        image[ch] = plane + _value_noise(rng, s, cfg.noise_amp)
    image = np.clip(image, 0.0, 1.0)
    return image, labels


def generate_sample(cfg: DataConfig, split: str, index: int) -> SegSample:
    """Fully deterministic sample for (cfg.seed, split, index)."""
    if index < 0 or index >= cfg.split_size(split):
        raise ValueCheckError(f"generate_sample: index {index} outside "
                              f"{split} split")
    sample_id = SPLIT_BASES[split] + index
    rng = np.random.default_rng([cfg.seed, _SAMPLE_STREAM, sample_id])
    for _ in range(20):
        image, labels = _render(rng, cfg)
        lum = image.mean(axis=0)
        fg = labels > 0
        frac = fg.mean()
        if not _FG_LO <= frac <= _FG_HI:
            continue
        if lum[fg].mean() - lum[~fg].mean() < _MIN_CONTRAST:
            continue
        return SegSample(image=image, labels=labels, sample_id=sample_id)
    # deterministic fallback: single centered ellipse, flat levels
    s = cfg.image_size
    yy, xx = np.mgrid[0:s, 0:s]
    mask = ((xx - s / 2) / (0.25 * s)) ** 2 + ((yy - s / 2) / (0.2 * s)) ** 2 <= 1
    labels = np.where(mask, 1, 0).astype(np.int64)
    image = np.where(mask[None], 0.75, 0.3) * np.ones((3, s, s))
    return SegSample(image=image, labels=labels, sample_id=sample_id)


class SynthProvider:
    """Batch iterator over the synthetic splits.

    Training batches are shuffled by a key derived from (seed, epoch, stage)
    and horizontally flipped with probability 1/2 per sample; val/test order
    is fixed and unaugmented. Stateless: any epoch can be replayed exactly.
    """

    def __init__(self, cfg: DataConfig):
        self.cfg = cfg

    def size(self, split: str) -> int:
        return self.cfg.split_size(split)

    def num_classes(self) -> int:
        return self.cfg.num_classes

    def batches(self, split: str, batch: int, epoch: int = 0, stage: int = 0,
                augment: bool | None = None):
        if batch < 1:
            raise ValueCheckError("batches: batch size must be >= 1")
        n = self.size(split)
        cfg = self.cfg
        if augment is None:
            augment = split == "train"
        order = np.arange(n)
        if split == "train":
            shuffle_rng = np.random.default_rng(
                [cfg.seed, _SHUFFLE_STREAM, epoch, stage])
            order = shuffle_rng.permutation(n)
        flip_rng = np.random.default_rng([cfg.seed, _FLIP_STREAM, epoch, stage])
        flips = flip_rng.random(n) < 0.5 if augment else np.zeros(n, dtype=bool)
        for start in range(0, n, batch):
            idx = order[start:start + batch]
            images = np.empty((len(idx), 3, cfg.image_size, cfg.image_size))
            labels = np.empty((len(idx), cfg.image_size, cfg.image_size),
                              dtype=np.int64)
            for j, i in enumerate(idx):
                smp = generate_sample(cfg, split, int(i))
                if flips[i]:
                    images[j] = smp.image[:, :, ::-1]
                    labels[j] = smp.labels[:, ::-1]
                else:
                    images[j] = smp.image
                    labels[j] = smp.labels
            yield images, labels


def write_pgm(path, array: np.ndarray) -> None:
    """Binary PGM (P5, maxval 255) from a 2-D array scaled to [0, 255]."""
    if array.ndim != 2:
        raise ShapeError(f"write_pgm: need a 2-D array, got {array.shape}")
    a = np.asarray(array, dtype=float)
    lo, hi = a.min(), a.max()
    scaled = np.zeros_like(a) if hi <= lo else (a - lo) / (hi - lo)
    data = (scaled * 255).round().astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{a.shape[1]} {a.shape[0]}\n255\n".encode())
        fh.write(data.tobytes())


def dump_sample(sample: SegSample, out_dir, prefix: str) -> list[str]:
    """One PGM per channel plus the label map; returns written paths."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    paths = []
    for ch in range(3):
        p = out / f"{prefix}_ch{ch}.pgm"
        write_pgm(p, sample.image[ch])
        paths.append(str(p))
    p = out / f"{prefix}_labels.pgm"
    write_pgm(p, sample.labels.astype(float))
    paths.append(str(p))
    return paths
