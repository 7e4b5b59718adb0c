"""Synthetic lane/obstacle dataset and its on-disk layout."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..errors import FormatError

MAX_ANGLE = math.pi / 4  # steering = +-1
MANIFEST = "manifest.csv"


@dataclass(frozen=True, eq=False)
class Sample:
    image: np.ndarray  # (1, H, W) float32 in [0, 1]
    steering: float
    collision: int

    def __post_init__(self):
        if not np.all(np.isfinite(self.image)):
            raise ValueError("image contains non-finite values")
        if not -1.0 <= self.steering <= 1.0:
            raise ValueError(f"steering {self.steering} outside [-1, 1]")
        if self.collision not in (0, 1):
            raise ValueError(f"collision label must be 0 or 1, got {self.collision}")


def render_lane(size: int, steering: float, width: float = 1.5) -> np.ndarray:
    """Mask of a line leaving the bottom centre at ``steering * 45deg`` from vertical."""
    theta = steering * MAX_ANGLE
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64) + 0.5
    # direction (sin, -cos) from the anchor (size/2, size); perpendicular distance
    dx, dy = xx - size / 2, yy - size
    dist = np.abs(dx * math.cos(theta) + dy * math.sin(theta))
    ahead = dx * math.sin(theta) - dy * math.cos(theta) >= 0
    return (dist <= width) & ahead


def synth_dataset(n: int, seed: int = 0, image_size: int = 200) -> list[Sample]:
    """Deterministic samples: a lane line sets steering, a large box sets collision.

    Collision flags are the first ``n`` draws of the generator (fair coin)
    and steering the next ``n`` (uniform).  Collision-free images may still
    hold a small, distant box so the classifier has to judge size.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = np.random.default_rng(seed)
    collisions = rng.random(n) < 0.5
    steerings = rng.uniform(-1.0, 1.0, n)
    samples = []
    for i in range(n):
        img = rng.uniform(0.0, 0.2, (image_size, image_size))
        img[render_lane(image_size, steerings[i])] = 0.9
        if collisions[i]:
            side = rng.uniform(0.3, 0.5)
        elif rng.random() < 0.5:
            side = rng.uniform(0.08, 0.2)
        else:
            side = 0.0
        if side:
            h = max(1, int(round(side * image_size * rng.uniform(0.8, 1.2))))
            w = max(1, int(round(side * image_size)))
            top = int(rng.integers(0, image_size - h + 1))
            left = int(rng.integers(0, image_size - w + 1))
            img[top:top + h, left:left + w] = rng.uniform(0.4, 1.0)
        samples.append(Sample(img[None].astype(np.float32), float(steerings[i]), int(collisions[i])))
    return samples


def split_dataset(samples: list[Sample], seed: int = 0, val_fraction: float = 0.1):
    """Deterministic shuffled train/val split."""
    n = len(samples)
    n_val = min(n - 1, max(1, int(round(n * val_fraction)))) if n > 1 else 0
    perm = np.random.default_rng(seed).permutation(n)
    val = [samples[i] for i in sorted(perm[:n_val])]
    train = [samples[i] for i in sorted(perm[n_val:])]
    return train, val


def as_arrays(samples: list[Sample]):
    images = np.stack([s.image for s in samples]).astype(np.float32)
    steering = np.array([s.steering for s in samples], dtype=np.float64)
    collision = np.array([s.collision for s in samples], dtype=np.float64)
    return images, steering, collision


def save_dataset(samples: list[Sample], directory) -> None:
    """Raw 8-bit grayscale files plus ``manifest.csv`` (path, steering, collision)."""
    root = Path(directory)
    (root / "images").mkdir(parents=True, exist_ok=True)
    with open(root / MANIFEST, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["path", "steering", "collision"])
        for i, sample in enumerate(samples):
            rel = f"images/{i:06d}.raw"
            pixels = np.clip(np.rint(sample.image[0] * 255.0), 0, 255).astype(np.uint8)
            (root / rel).write_bytes(pixels.tobytes())
            writer.writerow([rel, repr(sample.steering), sample.collision])


def load_dataset(directory) -> list[Sample]:
    root = Path(directory)
    try:
        with open(root / MANIFEST, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise FormatError(f"cannot read dataset manifest: {exc}") from exc
    samples = []
    for row in rows:
        try:
            raw = (root / row["path"]).read_bytes()
            size = math.isqrt(len(raw))
            if size * size != len(raw) or size == 0:
                raise FormatError(f"{row['path']}: {len(raw)} bytes is not a square image")
            img = np.frombuffer(raw, dtype=np.uint8).reshape(1, size, size).astype(np.float32) / 255.0
            samples.append(Sample(img, float(row["steering"]), int(row["collision"])))
        except (OSError, KeyError, ValueError) as exc:
            if isinstance(exc, FormatError):
                raise
            raise FormatError(f"bad dataset entry {row}: {exc}") from exc
    if not samples:
        raise FormatError("dataset is empty")
    return samples
