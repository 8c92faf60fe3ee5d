"""Event ingestion, synthetic event generation, and stratified splitting."""
from __future__ import annotations

import csv
import math
import os
from collections import Counter
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path
from typing import Callable, Dict, Iterable, Iterator, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from .matrix_io import EVENT_MAGIC, MatrixFormatError, read_matrix, write_matrix

N_CHANNELS = 24
N_SAMPLES = 16000
SAMPLE_RATE_HZ = 1000

LABELS: Tuple[str, ...] = (
    "Noise",
    "Regional",
    "Rockfall",
    "SlopeHF",
    "SlopeLF",
    "SlopeMulti",
    "SlopeTremor",
    "Spike",
    "Unlabeled",
)
UNLABELED = "Unlabeled"
LABELED_CLASSES: Tuple[str, ...] = LABELS[:-1]

# Published class sizes of the Åknes geophone event catalogue.
AKNES_CLASS_COUNTS: Dict[str, int] = {
    "Noise": 8,
    "Regional": 292,
    "Rockfall": 215,
    "SlopeHF": 448,
    "SlopeLF": 218,
    "SlopeMulti": 207,
    "SlopeTremor": 212,
    "Spike": 218,
    "Unlabeled": 1611,
}


class IngestionError(ValueError):
    pass


class SplitError(ValueError):
    pass


@dataclass
class EventRecord:
    id: str
    waveform: np.ndarray  # (channels, samples) float32
    label: str
    sample_rate_hz: int = SAMPLE_RATE_HZ

    def __post_init__(self) -> None:
        if self.label not in LABELS:
            raise IngestionError(f"event {self.id}: unknown label {self.label!r}")
        if self.waveform.ndim != 2:
            raise IngestionError(f"event {self.id}: waveform must be 2-d, got {self.waveform.shape}")
        if not np.all(np.isfinite(self.waveform)):
            raise IngestionError(f"event {self.id}: waveform has non-finite samples")

    @property
    def n_channels(self) -> int:
        return self.waveform.shape[0]

    def __eq__(self, other: object) -> bool:
        if not isinstance(other, EventRecord):
            return NotImplemented
        return (
            self.id == other.id
            and self.label == other.label
            and self.sample_rate_hz == other.sample_rate_hz
            and self.waveform.shape == other.waveform.shape
            and np.array_equal(self.waveform, other.waveform)
        )


@dataclass
class EventCollection:
    events: List[EventRecord] = field(default_factory=list)
    class_counts: Dict[str, int] = field(init=False)

    def __post_init__(self) -> None:
        self.events = list(self.events)
        seen = set()
        for ev in self.events:
            if ev.id in seen:
                raise IngestionError(f"duplicate event id {ev.id!r}")
            seen.add(ev.id)
        counts = Counter(ev.label for ev in self.events)
        self.class_counts = {label: counts[label] for label in LABELS if counts[label]}

    def __len__(self) -> int:
        return len(self.events)

    def __iter__(self) -> Iterator[EventRecord]:
        return iter(self.events)

    def __getitem__(self, idx: int) -> EventRecord:
        return self.events[idx]

    @property
    def ids(self) -> List[str]:
        return [ev.id for ev in self.events]

    @property
    def labels(self) -> List[str]:
        return [ev.label for ev in self.events]

    def labeled(self) -> "EventCollection":
        """Drop Unlabeled events (supervised phases never see them)."""
        return EventCollection([ev for ev in self.events if ev.label != UNLABELED])

    def class_names(self) -> List[str]:
        """Labeled classes present, in vocabulary order; index = class id."""
        return [label for label in LABELED_CLASSES if self.class_counts.get(label)]

    def select(self, ids: Iterable[str]) -> "EventCollection":
        wanted = set(ids)
        return EventCollection([ev for ev in self.events if ev.id in wanted])


@dataclass(frozen=True)
class SplitSpec:
    train_fraction: float = 0.8
    seed: int = 0
    min_test_per_class: int = 1

    def __post_init__(self) -> None:
        if not 0.0 < self.train_fraction < 1.0:
            raise ValueError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        if self.min_test_per_class < 1:
            raise ValueError("min_test_per_class must be >= 1")


# ---------------------------------------------------------------------------
# file ingestion


def event_path(root: Path, event_id: str) -> Path:
    return root / "events" / f"{event_id}.bin"


def write_events(collection: EventCollection, out_dir: str | os.PathLike) -> Path:
    """Write ``manifest.csv`` plus one binary file per event; returns the manifest path."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    manifest = out_dir / "manifest.csv"
    rows = []
    for ev in collection:
        path = event_path(out_dir, ev.id)
        write_matrix(path, ev.waveform, EVENT_MAGIC)
        rows.append((ev.id, ev.label, path.relative_to(out_dir).as_posix()))
    with open(manifest, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(("id", "label", "path"))
        writer.writerows(rows)
    return manifest


def load_events(
    manifest_path: str | os.PathLike,
    n_channels: int = N_CHANNELS,
    n_samples: int = N_SAMPLES,
) -> EventCollection:
    """Load every event listed in a ``id,label,path`` manifest.

    Relative paths are resolved against the manifest's directory. Any problem with a
    row raises :class:`IngestionError` naming the event id.
    """
    manifest_path = Path(manifest_path)
    if not manifest_path.is_file():
        raise IngestionError(f"manifest not found: {manifest_path}")
    root = manifest_path.parent
    with open(manifest_path, newline="") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or not {"id", "label", "path"} <= set(reader.fieldnames):
            raise IngestionError(f"{manifest_path}: header must contain id,label,path")
        rows = list(reader)

    events = []
    for row in rows:
        event_id = row["id"]
        label = row["label"]
        if label not in LABELS:
            raise IngestionError(f"event {event_id}: unknown label {label!r}")
        path = Path(row["path"])
        if not path.is_absolute():
            path = root / path
        if not path.is_file():
            raise IngestionError(f"event {event_id}: missing file {path}")
        try:
            waveform = read_matrix(path, EVENT_MAGIC)
        except MatrixFormatError as exc:
            raise IngestionError(f"event {event_id}: malformed file {path}: {exc}") from exc
        if waveform.shape != (n_channels, n_samples):
            raise IngestionError(
                f"event {event_id}: expected {n_channels} channels x {n_samples} samples, "
                f"got {waveform.shape[0]} x {waveform.shape[1]}"
            )
        events.append(EventRecord(event_id, waveform, label))
    return EventCollection(events)


def ingest_npz(npz_path: str | os.PathLike, out_dir: str | os.PathLike) -> Path:
    """Convert an ``.npz`` drop (``waveforms`` [N, C, L], ``labels`` [N], optional ``ids``)."""
    with np.load(npz_path, allow_pickle=False) as data:
        if "waveforms" not in data or "labels" not in data:
            raise IngestionError(f"{npz_path}: expected arrays 'waveforms' and 'labels'")
        waveforms = np.asarray(data["waveforms"], dtype=np.float32)
        labels = [str(x) for x in data["labels"]]
        ids = [str(x) for x in data["ids"]] if "ids" in data else [f"ev{i:05d}" for i in range(len(labels))]
    if waveforms.ndim != 3 or waveforms.shape[0] != len(labels) or len(ids) != len(labels):
        raise IngestionError(f"{npz_path}: inconsistent array shapes")
    events = [EventRecord(i, w, lab) for i, w, lab in zip(ids, waveforms, labels)]
    return write_events(EventCollection(events), out_dir)


# ---------------------------------------------------------------------------
# splitting


def _by_class(collection: EventCollection) -> Dict[str, List[str]]:
    groups: Dict[str, List[str]] = {}
    for ev in collection:
        if ev.label == UNLABELED:
            raise SplitError(f"event {ev.id} is Unlabeled; supervised splits take labeled events only")
        groups.setdefault(ev.label, []).append(ev.id)
    return {label: groups[label] for label in LABELED_CLASSES if label in groups}


def _round_half_up(x: Fraction) -> int:
    return math.floor(x + Fraction(1, 2))


def stratified_split(
    collection: EventCollection, spec: SplitSpec
) -> Tuple[EventCollection, EventCollection]:
    """Per-class random split; train count per class is round(train_fraction * size),
    lowered when needed so the test side keeps ``min_test_per_class`` events."""
    rng = np.random.default_rng(spec.seed)
    fraction = Fraction(str(spec.train_fraction))
    train_ids: List[str] = []
    test_ids: List[str] = []
    for label, ids in _by_class(collection).items():
        n = len(ids)
        if n < spec.min_test_per_class + 1:
            raise SplitError(
                f"class {label} has {n} events; needs at least {spec.min_test_per_class + 1}"
            )
        n_train = min(_round_half_up(fraction * n), n - spec.min_test_per_class)
        order = rng.permutation(n)
        train_ids.extend(ids[i] for i in order[:n_train])
        test_ids.extend(ids[i] for i in order[n_train:])
    return collection.select(train_ids), collection.select(test_ids)


def subset_fraction(
    collection: EventCollection,
    n_percent: float,
    seed: int,
    reference_counts: Optional[Mapping[str, int]] = None,
) -> EventCollection:
    """Stratified subset with ceil(n_percent% of each class) events, at least one per class.

    ``reference_counts`` sizes the subset relative to a larger parent collection (e.g.
    n% of the whole dataset drawn from its training split); draws are capped at what
    ``collection`` holds.
    """
    if not 0 < n_percent <= 100:
        raise ValueError(f"n_percent must lie in (0, 100], got {n_percent}")
    pct = Fraction(str(n_percent))
    rng = np.random.default_rng(seed)
    keep: List[str] = []
    for label, ids in _by_class(collection).items():
        base = len(ids) if reference_counts is None else reference_counts[label]
        k = max(1, math.ceil(pct * base / 100))
        k = min(k, len(ids))
        order = rng.permutation(len(ids))
        keep.extend(ids[i] for i in order[:k])
    return collection.select(keep)


def class_indices(collection: EventCollection, class_names: Sequence[str]) -> np.ndarray:
    lookup = {name: i for i, name in enumerate(class_names)}
    return np.array([lookup[ev.label] for ev in collection], dtype=np.int64)


# ---------------------------------------------------------------------------
# synthetic events


def _band_noise(rng: np.random.Generator, n: int, fs: float, lo: float, hi: float) -> np.ndarray:
    spectrum = np.fft.rfft(rng.standard_normal(n))
    freqs = np.fft.rfftfreq(n, 1.0 / fs)
    spectrum[(freqs < lo) | (freqs > hi)] = 0.0
    out = np.fft.irfft(spectrum, n)
    return out / (np.abs(out).max() + 1e-12)


def _burst_envelope(t: np.ndarray, onset: float, decay: float, rise: float = 0.05) -> np.ndarray:
    dt = t - onset
    env = np.where(dt < 0, 0.0, np.where(dt < rise, dt / rise, np.exp(-(dt - rise) / decay)))
    return env


def _recipe_chirp(rng: np.random.Generator, t: np.ndarray, fs: float) -> np.ndarray:
    duration = t[-1] + 1.0 / fs
    f0 = rng.uniform(5.0, 15.0)
    f1 = rng.uniform(60.0, 100.0)
    phase = 2 * np.pi * (f0 * t + (f1 - f0) * t**2 / (2 * duration))
    return np.sin(phase + rng.uniform(0, 2 * np.pi))


def _recipe_burst(rng: np.random.Generator, t: np.ndarray, fs: float) -> np.ndarray:
    centre = rng.uniform(25.0, 60.0)
    carrier = _band_noise(rng, t.size, fs, centre - 10.0, centre + 10.0)
    onset = rng.uniform(1.0, 12.0)
    return carrier * _burst_envelope(t, onset, rng.uniform(0.3, 0.6))


def _recipe_multiburst(rng: np.random.Generator, t: np.ndarray, fs: float) -> np.ndarray:
    out = np.zeros_like(t)
    onsets = np.sort(rng.uniform(0.5, 14.0, size=rng.integers(3, 6)))
    for onset in onsets:
        centre = rng.uniform(25.0, 60.0)
        carrier = _band_noise(rng, t.size, fs, centre - 10.0, centre + 10.0)
        out += carrier * _burst_envelope(t, onset, rng.uniform(0.15, 0.3))
    return out / (np.abs(out).max() + 1e-12)


def _recipe_tremor(rng: np.random.Generator, t: np.ndarray, fs: float) -> np.ndarray:
    carrier = _band_noise(rng, t.size, fs, 2.0, 10.0)
    mod = 0.6 + 0.4 * np.sin(2 * np.pi * rng.uniform(0.2, 0.5) * t + rng.uniform(0, 2 * np.pi))
    return carrier * mod


def _recipe_noise(rng: np.random.Generator, t: np.ndarray, fs: float) -> np.ndarray:
    return np.zeros_like(t)


REGIME_BANDS: Dict[str, Tuple[float, float]] = {
    "low": (3.0, 12.0),
    "mid": (30.0, 60.0),
    "high": (120.0, 220.0),
}


def _regime_transition(first: str, second: str):
    """Band-limited noise in one band, switching to another band at a random time."""

    def recipe(rng: np.random.Generator, t: np.ndarray, fs: float) -> np.ndarray:
        a = _band_noise(rng, t.size, fs, *REGIME_BANDS[first])
        b = _band_noise(rng, t.size, fs, *REGIME_BANDS[second])
        switch = rng.uniform(4.0, 12.0)
        fade = np.clip((t - switch) / 0.3 + 0.5, 0.0, 1.0)
        return (1.0 - fade) * a + fade * b

    return recipe


RECIPES: Dict[str, Callable[[np.random.Generator, np.ndarray, float], np.ndarray]] = {
    "chirp": _recipe_chirp,
    "burst": _recipe_burst,
    "multiburst": _recipe_multiburst,
    "tremor": _recipe_tremor,
    "noise": _recipe_noise,
    "low_to_mid": _regime_transition("low", "mid"),
    "mid_to_high": _regime_transition("mid", "high"),
    "high_to_low": _regime_transition("high", "low"),
}


@dataclass
class SyntheticSpec:
    """Recipe per class label plus channel-variation knobs.

    Every channel of an event is the same source signal with its own gain, delay and
    additive noise, so all channels share the class. The default classes are band
    transitions (each band occurs in two classes, so only the combination of regimes
    identifies the class) under a class-independent stationary hum of random lines.
    """

    n_per_class: int = 50
    recipes: Dict[str, str] = field(
        default_factory=lambda: {"Regional": "low_to_mid", "Rockfall": "mid_to_high", "Spike": "high_to_low"}
    )
    noise_level: float = 0.2
    n_channels: int = N_CHANNELS
    n_samples: int = N_SAMPLES
    sample_rate_hz: int = SAMPLE_RATE_HZ
    gain_range: Tuple[float, float] = (0.5, 2.0)
    max_delay_s: float = 0.3
    # class-independent stationary hum shared by all channels of an event
    background_lines: Tuple[int, int] = (2, 5)
    background_amplitude: Tuple[float, float] = (0.3, 1.0)
    background_band: Tuple[float, float] = (5.0, 200.0)


def _delay(signal: np.ndarray, shift: int) -> np.ndarray:
    out = np.zeros_like(signal)
    if shift >= 0:
        out[shift:] = signal[: signal.size - shift]
    else:
        out[:shift] = signal[-shift:]
    return out


def generate_synthetic(spec: SyntheticSpec, seed: int) -> EventCollection:
    if len(spec.recipes) < 2:
        raise ValueError("synthetic collections need at least 2 classes")
    for label, recipe in spec.recipes.items():
        if recipe not in RECIPES:
            raise ValueError(f"unknown recipe {recipe!r} for class {label}")
        if label not in LABELS:
            raise ValueError(f"unknown label {label!r}")

    rng = np.random.default_rng(seed)
    fs = float(spec.sample_rate_hz)
    t = np.arange(spec.n_samples) / fs
    max_shift = int(round(spec.max_delay_s * fs))
    events = []
    for label, recipe in spec.recipes.items():
        for i in range(spec.n_per_class):
            source = RECIPES[recipe](rng, t, fs)
            n_lines = int(rng.integers(spec.background_lines[0], spec.background_lines[1] + 1))
            for _ in range(n_lines):
                freq = rng.uniform(*spec.background_band)
                amp = rng.uniform(*spec.background_amplitude)
                source = source + amp * np.sin(2 * np.pi * freq * t + rng.uniform(0, 2 * np.pi))
            waveform = np.empty((spec.n_channels, spec.n_samples), dtype=np.float32)
            for ch in range(spec.n_channels):
                gain = rng.uniform(*spec.gain_range)
                shift = int(rng.integers(-max_shift, max_shift + 1))
                noise = spec.noise_level * rng.standard_normal(spec.n_samples)
                waveform[ch] = gain * (_delay(source, shift) + noise)
            events.append(EventRecord(f"syn-{label}-{i:04d}", waveform, label, spec.sample_rate_hz))
    return EventCollection(events)
