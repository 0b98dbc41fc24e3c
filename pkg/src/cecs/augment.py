"""Grid-region replacement and masking, plus resize/flip/normalize preprocessing.

An image is split into an n x n grid; a q x q block of cells is chosen at
random. The replaced image takes that block from a donor image of another
category, the masked image zeroes it. Labels never change.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence, Tuple

import numpy as np


class InvalidRegionError(ValueError):
    pass


class NoDonorError(ValueError):
    pass


@dataclass(frozen=True)
class GridSpec:
    n: int
    cell_h: int
    cell_w: int

    @classmethod
    def for_image(cls, height: int, width: int, n: int) -> "GridSpec":
        if n < 1:
            raise ValueError(f"grid count n must be >= 1, got {n}")
        if height % n or width % n:
            raise ValueError(f"image {height}x{width} cannot be split into a uniform {n}x{n} grid")
        return cls(n, height // n, width // n)

    @property
    def height(self) -> int:
        return self.n * self.cell_h

    @property
    def width(self) -> int:
        return self.n * self.cell_w


@dataclass(frozen=True)
class Region:
    r: int
    c: int
    q: int

    def pixel_slices(self, grid: GridSpec) -> Tuple[slice, slice]:
        rows = slice(self.r * grid.cell_h, (self.r + self.q) * grid.cell_h)
        cols = slice(self.c * grid.cell_w, (self.c + self.q) * grid.cell_w)
        return rows, cols


@dataclass(frozen=True)
class OneHotMaskPair:
    m_f: np.ndarray  # 1 outside the region, 0 inside
    m_s: np.ndarray  # exact complement


@dataclass(frozen=True)
class AugmentedTriplet:
    original: np.ndarray
    replaced: np.ndarray
    masked: np.ndarray
    label: int
    region: Region
    donor_label: int


def _check_q(n: int, q: int) -> None:
    if not 1 <= q <= n:
        raise InvalidRegionError(f"q must satisfy 1 <= q <= n={n}, got q={q}")


def sample_region(n: int, q: int, rng: np.random.Generator) -> Region:
    """Top-left cell drawn uniformly from {0..n-q}^2."""
    _check_q(n, q)
    r, c = rng.integers(0, n - q + 1, size=2)
    return Region(int(r), int(c), q)


def build_masks(region: Region, grid: GridSpec, channels: int) -> OneHotMaskPair:
    _check_q(grid.n, region.q)
    if not (0 <= region.r <= grid.n - region.q and 0 <= region.c <= grid.n - region.q):
        raise InvalidRegionError(f"{region} does not fit a {grid.n}x{grid.n} grid")
    m_s = np.zeros((grid.height, grid.width, channels))
    rows, cols = region.pixel_slices(grid)
    m_s[rows, cols, :] = 1.0
    return OneHotMaskPair(m_f=1.0 - m_s, m_s=m_s)


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise ValueError(f"shape mismatch: {sorted(shapes)}")


def compose_replace(f: np.ndarray, s: np.ndarray, masks: OneHotMaskPair) -> np.ndarray:
    """f * m_f + s * m_s."""
    _same_shape(f, s, masks.m_f, masks.m_s)
    return f * masks.m_f + s * masks.m_s


def compose_mask(f: np.ndarray, masks: OneHotMaskPair) -> np.ndarray:
    """f * m_f."""
    _same_shape(f, masks.m_f)
    return f * masks.m_f


# donor_sampler(label, rng) -> (image, donor_label)
DonorSampler = Callable[[int, np.random.Generator], Tuple[np.ndarray, int]]


def dataset_donor_sampler(images: np.ndarray, labels: np.ndarray) -> DonorSampler:
    """Uniform draw over every stored sample whose label differs from the query."""
    labels = np.asarray(labels)
    by_label = {int(k): np.flatnonzero(labels != k) for k in np.unique(labels)}

    def sample(label: int, rng: np.random.Generator):
        pool = by_label.get(int(label))
        if pool is None:
            pool = np.arange(len(labels))
        if pool.size == 0:
            raise NoDonorError("no sample from a different category is available")
        j = int(pool[rng.integers(pool.size)])
        return images[j], int(labels[j])

    return sample


def augment_triplet(
    f: np.ndarray, label: int, donor_sampler: DonorSampler, n: int, q: int, rng: np.random.Generator
) -> AugmentedTriplet:
    """One shared region for both variants; the donor comes from another category."""
    donor, donor_label = donor_sampler(label, rng)
    if donor_label == label:
        raise NoDonorError(f"donor sampler returned the query's own category {label}")
    grid = GridSpec.for_image(f.shape[0], f.shape[1], n)
    region = sample_region(n, q, rng)
    masks = build_masks(region, grid, f.shape[2])
    return AugmentedTriplet(
        original=f,
        replaced=compose_replace(f, donor, masks),
        masked=compose_mask(f, masks),
        label=int(label),
        region=region,
        donor_label=donor_label,
    )


def resize_bilinear(image: np.ndarray, height: int, width: int) -> np.ndarray:
    """Bilinear resize with half-pixel centres; a same-size resize is the identity."""
    h, w = image.shape[:2]
    if (h, w) == (height, width):
        return image.astype(np.float64, copy=True)

    def axis(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0, n_in - 1)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, src - lo

    r0, r1, fr = axis(h, height)
    c0, c1, fc = axis(w, width)
    img = image.astype(np.float64)
    top = img[r0][:, c0] * (1 - fc)[None, :, None] + img[r0][:, c1] * fc[None, :, None]
    bot = img[r1][:, c0] * (1 - fc)[None, :, None] + img[r1][:, c1] * fc[None, :, None]
    return top * (1 - fr)[:, None, None] + bot * fr[:, None, None]


def hflip(image: np.ndarray) -> np.ndarray:
    return image[:, ::-1, :]


def normalize(image: np.ndarray, mean: Sequence[float], std: Sequence[float]) -> np.ndarray:
    std = np.asarray(std, dtype=np.float64)
    if np.any(std <= 0):
        raise ValueError(f"std entries must be positive, got {std}")
    return (image - np.asarray(mean, dtype=np.float64)) / std


def preprocess(
    f: np.ndarray,
    target_side: int,
    flip_prob: float,
    mean: Sequence[float],
    std: Sequence[float],
    rng: np.random.Generator,
) -> np.ndarray:
    """Resize to target_side^2, mirror with probability flip_prob, then normalize."""
    img = resize_bilinear(f, target_side, target_side)
    if rng.random() < flip_prob:
        img = hflip(img)
    return normalize(img, mean, std)
