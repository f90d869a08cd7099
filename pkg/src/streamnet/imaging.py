"""Pixel-space transforms: normalization, intensity-band slicing, zero-noise.

Corruption masks come from a SplitMix64 stream per image driving a partial
Fisher-Yates shuffle of the H*W spatial locations. At step ``j`` the next
64-bit output ``x`` selects position ``j + (((x >> 32) * (L - j)) >> 32)``
where ``L = H*W``; the first ``floor(ratio * L)`` shuffled positions are
zeroed across every channel. The scheme is plain integer arithmetic so the
same masks can be regenerated anywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ConfigError

GOLDEN_GAMMA = 0x9E3779B97F4A7C15
_MASK64 = (1 << 64) - 1
FULL_BAND_HI = 1.1


@dataclass(frozen=True)
class SliceBand:
    """Half-open intensity interval ``[lo, hi)``; ``hi`` may reach 1.1 to include 1.0."""

    lo: float
    hi: float

    def __post_init__(self):
        if not (0.0 <= self.lo <= 1.0):
            raise ConfigError(f"band lower bound {self.lo} outside [0, 1]")
        if not (0.0 < self.hi <= FULL_BAND_HI):
            raise ConfigError(f"band upper bound {self.hi} outside (0, 1.1]")
        if not self.lo < self.hi:
            raise ConfigError(f"empty band [{self.lo}, {self.hi})")

    def contains(self, v):
        return (v >= self.lo) & (v < self.hi)

    @property
    def is_full(self) -> bool:
        """True when the band keeps every normalized value."""
        return self.lo == 0.0 and self.hi > 1.0

    def to_list(self) -> list[float]:
        return [self.lo, self.hi]


FULL_BAND = SliceBand(0.0, FULL_BAND_HI)


@dataclass(frozen=True)
class NoiseSpec:
    ratio: float
    seed: int = 0

    def __post_init__(self):
        if not (0.0 <= self.ratio <= 1.0):
            raise ConfigError(f"noise ratio {self.ratio} outside [0, 1]")

    def count(self, height: int, width: int) -> int:
        return math.floor(self.ratio * height * width)


def normalize(raw) -> np.ndarray:
    """Map 8-bit intensities to float64 in [0, 1] as ``v / 255``."""
    return np.asarray(raw, dtype=np.float64) / 255.0


def to_bytes(image) -> np.ndarray:
    """Inverse of :func:`normalize` (round to nearest, clip to 0..255)."""
    return np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)


def make_bands(n: int) -> list[SliceBand]:
    """Split [0, 1] into ``n`` equal bands; the last one is widened to 1.1 so 1.0 is kept."""
    if n < 1:
        raise ConfigError("band count must be >= 1")
    return [SliceBand(k / n, (k + 1) / n if k < n - 1 else FULL_BAND_HI) for k in range(n)]


def is_partition(bands: Sequence[SliceBand]) -> bool:
    """Whether the bands are pairwise disjoint and cover [0, 1] exactly."""
    if not bands:
        return False
    ordered = sorted(bands, key=lambda b: b.lo)
    if ordered[0].lo != 0.0 or ordered[-1].hi <= 1.0:
        return False
    return all(a.hi == b.lo for a, b in zip(ordered, ordered[1:]))


def slice_image(image, band: SliceBand) -> np.ndarray:
    """Keep values inside ``band`` unchanged and zero the rest (per channel value)."""
    image = np.asarray(image, dtype=np.float64)
    return np.where(band.contains(image), image, 0.0)


# seeded zero-noise ---------------------------------------------------------

def _mix64(z: np.ndarray) -> np.ndarray:
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def derive_seed(seed: int, index) -> np.ndarray:
    """Independent 64-bit sub-seed(s) for stream ``index`` under a master ``seed``."""
    idx = np.asarray(index, dtype=np.uint64)
    with np.errstate(over="ignore"):
        base = np.uint64(seed & _MASK64) + (idx + np.uint64(1)) * np.uint64(GOLDEN_GAMMA)
        return _mix64(base)


def noise_locations(seeds, height: int, width: int, count: int) -> np.ndarray:
    """Flat location indices (shape ``(len(seeds), count)``) picked per seed."""
    seeds = np.atleast_1d(np.asarray(seeds, dtype=np.uint64))
    total = height * width
    if not 0 <= count <= total:
        raise ValueError(f"cannot corrupt {count} of {total} locations")
    n = seeds.shape[0]
    perm = np.tile(np.arange(total, dtype=np.int64), (n, 1))
    state = seeds.copy()
    rows = np.arange(n)
    gamma = np.uint64(GOLDEN_GAMMA)
    with np.errstate(over="ignore"):
        for j in range(count):
            state = state + gamma
            x = _mix64(state)
            span = np.uint64(total - j)
            r = j + ((x >> np.uint64(32)) * span >> np.uint64(32)).astype(np.int64)
            picked = perm[rows, r]
            perm[rows, r] = perm[:, j]
            perm[:, j] = picked
    return perm[:, :count]


def noise_mask(seeds, height: int, width: int, count: int) -> np.ndarray:
    """Boolean ``(N, H, W)`` masks, True where a location is zeroed."""
    locs = noise_locations(seeds, height, width, count)
    mask = np.zeros((locs.shape[0], height * width), dtype=bool)
    np.put_along_axis(mask, locs, True, axis=1)
    return mask.reshape(-1, height, width)


def apply_mask(images: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Zero every channel at masked locations; ``images`` is (N,C,H,W), mask (N,H,W)."""
    return np.where(mask[:, None, :, :], np.zeros((), dtype=images.dtype), images)


def corrupt_zero_noise(image, spec: NoiseSpec) -> np.ndarray:
    """Zero ``floor(ratio*H*W)`` spatial locations of one (C,H,W) image, seeded by ``spec.seed``."""
    image = np.asarray(image)
    if image.ndim != 3:
        raise ValueError(f"expected a (C,H,W) image, got shape {image.shape}")
    _, h, w = image.shape
    mask = noise_mask([spec.seed & _MASK64], h, w, spec.count(h, w))
    return apply_mask(image[None], mask)[0]


def corrupt_batch(images, spec: NoiseSpec, ids) -> np.ndarray:
    """Corrupt an (N,C,H,W) batch; image ``i`` uses the sub-seed ``derive_seed(spec.seed, ids[i])``."""
    images = np.asarray(images)
    if images.ndim != 4:
        raise ValueError(f"expected an (N,C,H,W) batch, got shape {images.shape}")
    _, _, h, w = images.shape
    count = spec.count(h, w)
    if count == 0:
        return images.copy()
    mask = noise_mask(derive_seed(spec.seed, ids), h, w, count)
    return apply_mask(images, mask)
