"""Waveform channel -> log/min-max scaled spectrogram resized to a fixed height."""
from __future__ import annotations

import hashlib
import json
import os
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Optional, Tuple

import numpy as np
from scipy.signal import get_window

from .matrix_io import SPEC_MAGIC, read_matrix, write_matrix


@dataclass(frozen=True)
class SpectrogramParams:
    window_seconds: float = 0.08
    overlap_fraction: float = 0.125
    target_height: int = 128
    log_epsilon: float = 1e-12
    window_shape: Tuple[str, float] = ("tukey", 0.25)

    def __post_init__(self) -> None:
        if not 0.0 < self.overlap_fraction < 1.0:
            raise ValueError(f"overlap_fraction must lie in (0, 1), got {self.overlap_fraction}")
        if self.target_height < 2:
            raise ValueError("target_height must be >= 2")

    def window_samples(self, sample_rate_hz: float) -> int:
        n = self.window_seconds * sample_rate_hz
        if n < 1 or abs(n - round(n)) > 1e-9:
            raise ValueError(f"window of {self.window_seconds}s at {sample_rate_hz} Hz is not a whole number of samples")
        return int(round(n))

    def hop_samples(self, sample_rate_hz: float) -> int:
        nperseg = self.window_samples(sample_rate_hz)
        return nperseg - int(nperseg * self.overlap_fraction)

    def digest(self) -> str:
        payload = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(payload).hexdigest()[:16]


@dataclass
class Spectrogram:
    values: np.ndarray  # (H, W)
    provenance: Optional[Tuple[str, int, SpectrogramParams]] = field(default=None, compare=False)

    @property
    def height(self) -> int:
        return self.values.shape[0]

    @property
    def width(self) -> int:
        return self.values.shape[1]


def compute_spectrogram(
    waveform_channel: np.ndarray,
    sample_rate_hz: float,
    params: SpectrogramParams = SpectrogramParams(),
) -> Spectrogram:
    """One-sided power spectral density per frame, shape (nperseg//2 + 1, n_frames).

    Each frame has its mean removed and is tapered before the FFT; density scaling is
    1 / (fs * sum(window**2)) with non-DC, non-Nyquist bins doubled.
    """
    x = np.asarray(waveform_channel, dtype=np.float64)
    if x.ndim != 1:
        raise ValueError("expected a single channel")
    if not np.all(np.isfinite(x)):
        raise ValueError("waveform channel contains non-finite samples")
    nperseg = params.window_samples(sample_rate_hz)
    hop = params.hop_samples(sample_rate_hz)
    if nperseg > x.size:
        raise ValueError(f"window of {nperseg} samples exceeds signal length {x.size}")

    frames = np.lib.stride_tricks.sliding_window_view(x, nperseg)[::hop]
    frames = frames - frames.mean(axis=1, keepdims=True)
    window = get_window(params.window_shape, nperseg)
    spec = np.abs(np.fft.rfft(frames * window, axis=1)) ** 2
    spec /= sample_rate_hz * np.sum(window**2)
    if nperseg % 2 == 0:
        spec[:, 1:-1] *= 2
    else:
        spec[:, 1:] *= 2
    return Spectrogram(spec.T)


def log_minmax_scale(raw: Spectrogram, log_epsilon: float = 1e-12) -> Spectrogram:
    logged = np.log(raw.values + log_epsilon)
    lo, hi = logged.min(), logged.max()
    if hi == lo:
        return Spectrogram(np.zeros_like(logged), raw.provenance)
    return Spectrogram((logged - lo) / (hi - lo), raw.provenance)


def _linear_resample_axis(values: np.ndarray, out_len: int, axis: int) -> np.ndarray:
    # half-pixel-centre convention: src = (dst + 0.5) * in/out - 0.5, clamped at the borders
    in_len = values.shape[axis]
    src = (np.arange(out_len) + 0.5) * (in_len / out_len) - 0.5
    src = np.clip(src, 0.0, in_len - 1)
    lo = np.floor(src).astype(np.int64)
    hi = np.minimum(lo + 1, in_len - 1)
    frac = src - lo
    a = np.take(values, lo, axis=axis)
    b = np.take(values, hi, axis=axis)
    shape = [1, 1]
    shape[axis] = out_len
    frac = frac.reshape(shape)
    return a * (1.0 - frac) + b * frac


def resize_to_height(spec: Spectrogram, target_height: int = 128) -> Spectrogram:
    """Bilinear resize to ``target_height`` rows, width scaled by the same ratio."""
    h, w = spec.values.shape
    if h < 2 or w < 2:
        raise ValueError(f"spectrogram {h}x{w} is too small to resize")
    out_w = int(round(w * target_height / h))
    values = _linear_resample_axis(spec.values, target_height, axis=0)
    values = _linear_resample_axis(values, out_w, axis=1)
    return Spectrogram(values, spec.provenance)


def spectrogram_pipeline(
    waveform_channel: np.ndarray,
    sample_rate_hz: float,
    params: SpectrogramParams = SpectrogramParams(),
) -> np.ndarray:
    """Full per-channel transform; returns float32 (target_height, W) spanning [0, 1].

    Interpolation can pull the extremes inwards, so the resized matrix is min-max
    rescaled once more (a monotone affine map) to keep the exact [0, 1] span.
    """
    raw = compute_spectrogram(waveform_channel, sample_rate_hz, params)
    scaled = log_minmax_scale(raw, params.log_epsilon)
    values = resize_to_height(scaled, params.target_height).values
    lo, hi = values.min(), values.max()
    if hi > lo:
        values = (values - lo) / (hi - lo)
    else:
        values = np.zeros_like(values)
    return np.clip(values, 0.0, 1.0).astype(np.float32)


class SpectrogramCache:
    """Per-(event, channel) spectrograms, optionally persisted under ``cache_root``.

    Disk layout is ``<cache_root>/<params digest>/<event_id>_<channel>.bin``. An
    in-memory layer avoids re-reading during a run.
    """

    def __init__(
        self,
        params: SpectrogramParams = SpectrogramParams(),
        cache_root: Optional[str | os.PathLike] = None,
        keep_in_memory: bool = True,
    ) -> None:
        self.params = params
        self.root = Path(cache_root) / params.digest() if cache_root is not None else None
        self.keep_in_memory = keep_in_memory
        self._memory: dict = {}

    def path_for(self, event_id: str, channel: int) -> Optional[Path]:
        if self.root is None:
            return None
        return self.root / f"{event_id}_{channel}.bin"

    def get(self, event, channel: int) -> np.ndarray:
        key = (event.id, channel)
        hit = self._memory.get(key)
        if hit is not None:
            return hit
        path = self.path_for(event.id, channel)
        if path is not None and path.is_file():
            values = read_matrix(path, SPEC_MAGIC)
        else:
            values = spectrogram_pipeline(event.waveform[channel], event.sample_rate_hz, self.params)
            if path is not None:
                write_matrix(path, values, SPEC_MAGIC)
        if self.keep_in_memory:
            self._memory[key] = values
        return values

    def event_stack(self, event) -> np.ndarray:
        """All channels of one event as (channels, H, W)."""
        return np.stack([self.get(event, ch) for ch in range(event.n_channels)])
