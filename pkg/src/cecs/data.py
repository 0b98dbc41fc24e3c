"""Datasets: synthetic leaf cultivars, image-folder loading, and the per-category 1:1 split.

The synthetic generator only uses IEEE basic arithmetic (no libm calls), so a
given spec renders bit-identical images on any platform: sine and cosine come
from a fixed Taylor polynomial and noise is uniform rather than Gaussian.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path
from typing import List, Sequence, Tuple, Union

import numpy as np

from .codec import CodecError, read_image, write_image

logger = logging.getLogger(__name__)

IMAGE_SUFFIXES = (".ppm", ".pgm", ".rawt")


class DatasetError(ValueError):
    pass


class EmptyCategoryError(DatasetError):
    pass


class DecodeError(DatasetError):
    pass


class OddCategoryCountError(DatasetError):
    pass


@dataclass
class Dataset:
    images: np.ndarray  # N x H x W x C, float64
    labels: np.ndarray  # N, int64
    names: List[str]

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.images.ndim != 4 or len(self.images) != len(self.labels):
            raise DatasetError(f"images {self.images.shape} do not match {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.names)):
            raise DatasetError("label outside the category range")

    @property
    def category_count(self) -> int:
        return len(self.names)

    @property
    def samples(self) -> List[Tuple[np.ndarray, int]]:
        return [(img, int(lab)) for img, lab in zip(self.images, self.labels)]

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, index: Sequence[int]) -> "Dataset":
        index = np.asarray(index, dtype=np.int64)
        return Dataset(self.images[index], self.labels[index], list(self.names))

    def counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.category_count)


# -- deterministic trig ----------------------------------------------------------

_HALF_PI = 1.5707963267948966


def _sin_series(x):
    x2 = x * x
    term, acc = x, x
    for k in range(1, 8):
        term = -term * x2 / ((2 * k) * (2 * k + 1))
        acc = acc + term
    return acc


def _cos_series(x):
    x2 = x * x
    term, acc = np.ones_like(x), np.ones_like(x)
    for k in range(1, 8):
        term = -term * x2 / ((2 * k - 1) * (2 * k))
        acc = acc + term
    return acc


def poly_sincos(x) -> Tuple[np.ndarray, np.ndarray]:
    """sin and cos from degree-15 Taylor polynomials after quadrant reduction (|err| < 1e-14)."""
    x = np.asarray(x, dtype=np.float64)
    quadrant = np.floor(x / _HALF_PI + 0.5)
    r = x - quadrant * _HALF_PI
    s, c = _sin_series(r), _cos_series(r)
    qm = np.mod(quadrant, 4)
    sin = np.select([qm == 0, qm == 1, qm == 2], [s, c, -s], -c)
    cos = np.select([qm == 0, qm == 1, qm == 2], [c, -s, -c], s)
    return sin, cos


# -- synthetic leaves --------------------------------------------------------------


@dataclass(frozen=True)
class SynthSpec:
    k: int = 20
    m: int = 6
    side: int = 56
    class_delta: float = 25.0  # degrees, max per-category vein angle offset
    noise: float = 0.03  # max absolute uniform pixel noise
    seed: int = 0
    max_rotation: float = 5.0  # degrees
    max_shift: int = 2  # pixels
    supersample: int = 2
    vein_width: float = 0.08  # fraction of side

    def validate(self) -> None:
        if self.k < 2 or self.m < 2:
            raise DatasetError(f"need k >= 2 and m >= 2, got k={self.k}, m={self.m}")
        if self.class_delta < 0 or self.noise < 0 or self.max_rotation < 0 or self.max_shift < 0:
            raise DatasetError("class_delta, noise, max_rotation and max_shift must be non-negative")
        if self.side < 8 or self.supersample < 1:
            raise DatasetError(f"side must be >= 8 and supersample >= 1, got {self.side}, {self.supersample}")


BACKGROUND = np.array([0.18, 0.40, 0.16])
LEAF = np.array([0.24, 0.50, 0.20])
VEIN = np.array([0.62, 0.78, 0.48])
# secondary veins: (attachment point along midrib as a fraction of the half-length, side)
VEIN_LAYOUT = ((-0.45, -1), (-0.45, 1), (0.0, -1), (0.0, 1), (0.45, -1), (0.45, 1))
VEIN_BASE_ANGLE = 50.0  # degrees between a secondary vein and the midrib, towards the tip
VEIN_LENGTH = 1.05  # in units of the blade half-width; veins are clipped at the blade edge
LEAF_AXES = (0.60, 0.48)  # semi-axes (along, across) as fractions of the side


def _segment_distance(px, py, x0, y0, x1, y1):
    dx, dy = x1 - x0, y1 - y0
    t = ((px - x0) * dx + (py - y0) * dy) / (dx * dx + dy * dy)
    t = np.clip(t, 0.0, 1.0)
    ex, ey = px - (x0 + t * dx), py - (y0 + t * dy)
    return np.sqrt(ex * ex + ey * ey)


def render_leaf(
    side: int,
    vein_angles: Sequence[float],
    rotation: float = 0.0,
    shift: Tuple[int, int] = (0, 0),
    supersample: int = 2,
    vein_width: float = 0.08,
) -> np.ndarray:
    """Render one noiseless leaf as a side x side x 3 image in [0, 1].

    ``vein_angles`` are the six secondary-vein angles (degrees from the midrib),
    ``rotation`` is in degrees and ``shift`` is an integer (dx, dy).
    """
    ss = supersample
    n = side * ss
    coords = (np.arange(n, dtype=np.float64) + 0.5) / ss
    py, px = np.meshgrid(coords, coords, indexing="ij")
    cx, cy = side / 2.0 + shift[0], side / 2.0 + shift[1]
    sin_r, cos_r = poly_sincos(rotation * (math.pi / 180.0))
    dx, dy = px - cx, py - cy
    # leaf frame: u across the blade, v along the midrib (negative v towards the tip)
    u = cos_r * dx + sin_r * dy
    v = -sin_r * dx + cos_r * dy
    a, b = LEAF_AXES[0] * side, LEAF_AXES[1] * side
    inside = (u / b) ** 2 + (v / a) ** 2 <= 1.0
    width = vein_width * side
    vein = np.abs(u) <= width * 0.6
    sins, coss = poly_sincos(np.asarray(vein_angles, dtype=np.float64) * (math.pi / 180.0))
    length = VEIN_LENGTH * b
    for (frac, side_sign), s, c in zip(VEIN_LAYOUT, sins, coss):
        v0 = frac * a
        u1, v1 = side_sign * s * length, v0 - c * length
        vein |= _segment_distance(u, v, 0.0, v0, u1, v1) <= width * 0.5
    img = np.where(inside[..., None], np.where(vein[..., None], VEIN, LEAF), BACKGROUND)
    if ss > 1:
        img = img.reshape(side, ss, side, ss, 3).mean(axis=(1, 3))
    return img


def generate_synthetic(spec: SynthSpec = SynthSpec()) -> Dataset:
    """k categories of m leaves that differ only in their secondary-vein angles."""
    spec.validate()
    rng = np.random.default_rng(spec.seed)
    offsets = rng.uniform(-spec.class_delta, spec.class_delta, size=(spec.k, len(VEIN_LAYOUT)))
    images = np.empty((spec.k * spec.m, spec.side, spec.side, 3))
    labels = np.repeat(np.arange(spec.k), spec.m)
    for i, label in enumerate(labels):
        rotation = rng.uniform(-spec.max_rotation, spec.max_rotation)
        shift = tuple(int(s) for s in rng.integers(-spec.max_shift, spec.max_shift + 1, size=2))
        img = render_leaf(
            spec.side, VEIN_BASE_ANGLE + offsets[label], rotation, shift, spec.supersample, spec.vein_width
        )
        img = img + rng.uniform(-spec.noise, spec.noise, size=img.shape)
        # snap to the 8-bit grid so the PPM export is lossless
        images[i] = np.rint(np.clip(img, 0.0, 1.0) * 255.0) / 255.0
    names = [f"cultivar{j:03d}" for j in range(spec.k)]
    return Dataset(images, labels, names)


# -- folders -------------------------------------------------------------------------


def load_image_folder(root: Union[str, Path]) -> Dataset:
    """root/<category>/<image>.{ppm,pgm,rawt}; categories are labelled in sorted name order."""
    root = Path(root)
    if not root.is_dir():
        raise DatasetError(f"{root} is not a directory")
    cat_dirs = sorted(p for p in root.iterdir() if p.is_dir() and not p.name.startswith("."))
    if not cat_dirs:
        raise DatasetError(f"{root} has no category subdirectories")
    images, labels = [], []
    for label, d in enumerate(cat_dirs):
        files = sorted(p for p in d.iterdir() if p.is_file() and not p.name.startswith("."))
        if not files:
            raise EmptyCategoryError(f"category directory {d} contains no images")
        for path in files:
            if path.suffix.lower() not in IMAGE_SUFFIXES:
                raise DecodeError(f"cannot decode {path}: unsupported format")
            try:
                img = read_image(path)
            except (CodecError, OSError) as exc:
                raise DecodeError(f"cannot decode {path}: {exc}") from exc
            if images and img.shape != images[0].shape:
                raise DatasetError(f"{path} has shape {img.shape}, expected {images[0].shape}")
            images.append(img)
            labels.append(label)
    return Dataset(np.stack(images), np.array(labels), [d.name for d in cat_dirs])


def save_image_folder(dataset: Dataset, root: Union[str, Path], fmt: str = "ppm") -> None:
    root = Path(root)
    counters = [0] * dataset.category_count
    for img, label in zip(dataset.images, dataset.labels):
        d = root / dataset.names[label]
        d.mkdir(parents=True, exist_ok=True)
        write_image(d / f"{counters[label]:04d}.{fmt}", img)
        counters[label] += 1


# -- splits and statistics -------------------------------------------------------------


def split_half(dataset: Dataset, seed: int) -> Tuple[Dataset, Dataset]:
    """Random per-category halves; sample order within each half follows the source order."""
    counts = dataset.counts()
    odd = [dataset.names[i] for i, c in enumerate(counts) if c < 2 or c % 2]
    if odd:
        raise OddCategoryCountError(f"categories without an even sample count >= 2: {odd}")
    rng = np.random.default_rng(seed)
    train, test = [], []
    for label in range(dataset.category_count):
        idx = np.flatnonzero(dataset.labels == label)
        perm = rng.permutation(idx)
        half = len(idx) // 2
        train.extend(perm[:half])
        test.extend(perm[half:])
    return dataset.subset(np.sort(train)), dataset.subset(np.sort(test))


def channel_stats(images: np.ndarray) -> Tuple[np.ndarray, np.ndarray]:
    """Per-channel mean and population standard deviation over N x H x W."""
    images = np.asarray(images, dtype=np.float64)
    return images.mean(axis=(0, 1, 2)), images.std(axis=(0, 1, 2))
