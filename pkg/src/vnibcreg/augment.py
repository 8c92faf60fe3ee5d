"""Crop triplets (reference, neighbour, non-neighbour) and sensor channel-pair sampling.

Positions are left-edge column offsets of each crop; distances between offsets equal
distances between crop centres.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


class AugmentationError(ValueError):
    pass


@dataclass(frozen=True)
class CropPolicy:
    crop_width_fraction: float = 0.10
    neighborhood_radius_crops: float = 2.0
    neighbor_sigma_crops: float = 1.0
    exclusion_radius_crops: float = 4.0

    def __post_init__(self) -> None:
        if not 0.0 < self.crop_width_fraction < 0.5:
            raise ValueError("crop_width_fraction must lie in (0, 0.5)")
        if self.exclusion_radius_crops < self.neighborhood_radius_crops:
            raise ValueError("exclusion radius must be >= neighbourhood radius")
        if self.neighbor_sigma_crops < 0:
            raise ValueError("neighbour sigma must be >= 0")

    def crop_width(self, spec_width: int) -> int:
        return int(np.floor(self.crop_width_fraction * spec_width))


@dataclass
class CropTriplet:
    w_t: np.ndarray
    w_l: np.ndarray
    w_k: np.ndarray
    centers: Tuple[int, int, int]
    policy: CropPolicy
    source_channels: Tuple[int, int]


def sample_channel_pair(n_channels: int, rng: np.random.Generator) -> Tuple[int, int]:
    """Uniform ordered pair of distinct channels."""
    if n_channels < 2:
        raise ValueError(f"need at least 2 channels, got {n_channels}")
    m = int(rng.integers(n_channels))
    n = int(rng.integers(n_channels - 1))
    if n >= m:
        n += 1
    return m, n


def _cut(spec: np.ndarray, start: int, width: int) -> np.ndarray:
    return spec[:, start : start + width]


def _check_pair(spec_m: np.ndarray, spec_n: np.ndarray) -> None:
    if spec_m.shape != spec_n.shape:
        raise AugmentationError(f"channel spectrograms differ in shape: {spec_m.shape} vs {spec_n.shape}")


def nc_feasible(spec_width: int, policy: CropPolicy) -> bool:
    """A reference slot exists whose full neighbourhood fits and which has a non-neighbour slot."""
    w = policy.crop_width(spec_width)
    if w < 1:
        return False
    last = spec_width - w
    radius = int(np.floor(policy.neighborhood_radius_crops * w))
    excl = policy.exclusion_radius_crops * w
    if last < 2 * radius:
        return False
    return last - radius > excl


def neighboring_crop(
    spec_m: np.ndarray,
    spec_n: np.ndarray,
    policy: CropPolicy,
    rng: np.random.Generator,
    channels: Tuple[int, int] = (0, 1),
) -> CropTriplet:
    """Reference crop from ``spec_m``; neighbour and non-neighbour crops from ``spec_n``.

    The reference offset t is uniform over slots whose whole neighbourhood [t - R*w,
    t + R*w] lies inside the spectrogram and that admit at least one non-neighbour.
    The neighbour offset is t + round(delta) with delta ~ N(0, (sigma*w)^2) truncated
    to |delta| <= R*w (rejection sampling). The non-neighbour offset is uniform over
    slots with |k - t| > R_excl * w.
    """
    _check_pair(spec_m, spec_n)
    width = spec_m.shape[1]
    if not nc_feasible(width, policy):
        raise AugmentationError(f"spectrogram width {width} too narrow for neighbouring crop policy {policy}")
    w = policy.crop_width(width)
    last = width - w
    radius = int(np.floor(policy.neighborhood_radius_crops * w))
    excl = policy.exclusion_radius_crops * w

    slots = np.arange(radius, last - radius + 1)
    # keep reference slots that have a non-neighbour slot on either side
    slots = slots[(slots > excl) | (last - slots > excl)]
    t = int(rng.choice(slots))

    sigma = policy.neighbor_sigma_crops * w
    if sigma == 0:
        delta = 0
    else:
        while True:
            delta = int(np.rint(rng.normal(0.0, sigma)))
            if abs(delta) <= radius:
                break
    l = t + delta

    far = np.arange(0, last + 1)
    far = far[np.abs(far - t) > excl]
    k = int(rng.choice(far))

    return CropTriplet(
        _cut(spec_m, t, w), _cut(spec_n, l, w), _cut(spec_n, k, w), (t, l, k), policy, channels
    )


def random_crop(
    spec_m: np.ndarray,
    spec_n: np.ndarray,
    policy: CropPolicy,
    rng: np.random.Generator,
    channels: Tuple[int, int] = (0, 1),
) -> CropTriplet:
    """Three independent uniform crops: reference from ``spec_m``, the others from ``spec_n``."""
    _check_pair(spec_m, spec_n)
    width = spec_m.shape[1]
    w = policy.crop_width(width)
    if w < 1 or width < w:
        raise AugmentationError(f"spectrogram width {width} too narrow for crop width {w}")
    t, l, k = (int(x) for x in rng.integers(0, width - w + 1, size=3))
    return CropTriplet(
        _cut(spec_m, t, w), _cut(spec_n, l, w), _cut(spec_n, k, w), (t, l, k), policy, channels
    )


def widest_feasible_exclusion(spec_width: int, policy: CropPolicy) -> float:
    """Largest exclusion radius (in crop widths) for which the policy is feasible, or 0."""
    w = policy.crop_width(spec_width)
    if w < 1:
        return 0.0
    last = spec_width - w
    radius = int(np.floor(policy.neighborhood_radius_crops * w))
    if last < 2 * radius:
        return 0.0
    # strict inequality: back off by one column
    return max(0.0, (last - radius - 1) / w)
