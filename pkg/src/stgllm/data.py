"""Loading, splitting and windowing of spatial-temporal datasets.

A dataset lives in a directory with a ``meta.json`` descriptor and either a
``data.bin`` payload (row-major little-endian float32, T x N x F) or a
``data.csv`` payload (T rows, N*F columns, optional header).
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Sequence

import numpy as np

from .errors import (
    DatasetError,
    MissingPayloadError,
    NonFiniteValueError,
    ShapeMismatchError,
    SplitError,
    TruncatedPayloadError,
)

MINUTES_PER_DAY = 1440
DAYS_PER_WEEK = 7
WEEKDAYS = ("Monday", "Tuesday", "Wednesday", "Thursday", "Friday", "Saturday", "Sunday")

_META_FIELDS = (
    "name",
    "num_nodes",
    "num_features",
    "num_steps",
    "interval_minutes",
    "first_step_day_of_week",
    "first_step_index_in_day",
)


def steps_per_day_for(interval_minutes: int) -> int:
    """Number of time-of-day slots; 1 when the sampling has no intra-day cycle."""
    if interval_minutes < MINUTES_PER_DAY and MINUTES_PER_DAY % interval_minutes == 0:
        return MINUTES_PER_DAY // interval_minutes
    return 1


@dataclass
class SeriesDataset:
    values: np.ndarray  # (T, N, F) float32
    interval_minutes: int
    first_step_day_of_week: int = 0
    first_step_index_in_day: int = 0
    name: str = "dataset"
    edges: list[tuple[int, int]] | None = None

    def __post_init__(self):
        values = np.asarray(self.values)
        if values.ndim == 2:
            values = values[:, :, None]
        if values.ndim != 3:
            raise ShapeMismatchError(f"values must be T x N x F, got shape {values.shape}")
        if not np.all(np.isfinite(values)):
            bad = np.argwhere(~np.isfinite(values))[0]
            raise NonFiniteValueError(f"non-finite value at (t, node, feature) = {tuple(int(i) for i in bad)}")
        self.values = np.ascontiguousarray(values, dtype=np.float32)
        if self.interval_minutes <= 0:
            raise DatasetError("interval_minutes must be positive")
        if not 0 <= self.first_step_day_of_week < DAYS_PER_WEEK:
            raise DatasetError("first_step_day_of_week must lie in [0, 7)")
        if not 0 <= self.first_step_index_in_day < self.steps_per_day:
            raise DatasetError(f"first_step_index_in_day must lie in [0, {self.steps_per_day})")
        if self.edges is not None:
            self.edges = [(int(a), int(b)) for a, b in self.edges]
            for a, b in self.edges:
                if not (0 <= a < self.num_nodes and 0 <= b < self.num_nodes):
                    raise DatasetError(f"edge ({a}, {b}) references a node outside [0, {self.num_nodes})")

    @property
    def num_steps(self) -> int:
        return self.values.shape[0]

    @property
    def num_nodes(self) -> int:
        return self.values.shape[1]

    @property
    def num_features(self) -> int:
        return self.values.shape[2]

    @property
    def steps_per_day(self) -> int:
        return steps_per_day_for(self.interval_minutes)

    def calendar(self) -> "Calendar":
        return Calendar(
            steps_per_day=self.steps_per_day,
            interval_minutes=self.interval_minutes,
            first_step_day_of_week=self.first_step_day_of_week,
            first_step_index_in_day=self.first_step_index_in_day,
        )

    def meta(self) -> dict:
        meta = {
            "name": self.name,
            "num_nodes": self.num_nodes,
            "num_features": self.num_features,
            "num_steps": self.num_steps,
            "interval_minutes": self.interval_minutes,
            "first_step_day_of_week": self.first_step_day_of_week,
            "first_step_index_in_day": self.first_step_index_in_day,
        }
        if self.edges is not None:
            meta["edges"] = [list(e) for e in self.edges]
        return meta


@dataclass(frozen=True)
class Calendar:
    steps_per_day: int
    interval_minutes: int
    first_step_day_of_week: int = 0
    first_step_index_in_day: int = 0

    def indices(self, t_last):
        """Time-of-day and day-of-week slot of absolute step(s) ``t_last``."""
        offset = self.first_step_index_in_day + np.asarray(t_last)
        tod = offset % self.steps_per_day
        dow = (self.first_step_day_of_week + offset // self.steps_per_day) % DAYS_PER_WEEK
        if tod.ndim == 0:
            return int(tod), int(dow)
        return tod.astype(np.int64), dow.astype(np.int64)


def calendar_indices(t_last: int, ds: SeriesDataset) -> tuple[int, int]:
    return ds.calendar().indices(t_last)


def load_dataset(path) -> SeriesDataset:
    path = Path(path)
    meta_path = path / "meta.json"
    if not meta_path.is_file():
        raise MissingPayloadError(f"{meta_path} not found")
    meta = json.loads(meta_path.read_text())
    missing = [k for k in _META_FIELDS if k not in meta]
    if missing:
        raise DatasetError(f"meta.json lacks fields {missing}")
    t, n, f = int(meta["num_steps"]), int(meta["num_nodes"]), int(meta["num_features"])

    bin_path, csv_path = path / "data.bin", path / "data.csv"
    if bin_path.is_file():
        raw = bin_path.read_bytes()
        step_bytes = n * f * 4
        if len(raw) % step_bytes:
            raise TruncatedPayloadError(
                f"data.bin holds {len(raw)} bytes, not a whole number of {step_bytes}-byte steps"
            )
        values = np.frombuffer(raw, dtype="<f4")
        if values.size != t * n * f:
            raise ShapeMismatchError(
                f"meta.json declares {t} steps but data.bin holds {values.size // (n * f)}"
            )
        values = values.reshape(t, n, f)
    elif csv_path.is_file():
        values = _read_csv(csv_path, n * f)
        if values.shape[0] != t:
            raise ShapeMismatchError(f"meta.json declares {t} steps but data.csv holds {values.shape[0]} rows")
        values = values.reshape(t, n, f)
    else:
        raise MissingPayloadError(f"neither data.bin nor data.csv found in {path}")

    if not np.all(np.isfinite(values)):
        bad = np.argwhere(~np.isfinite(values))[0]
        raise NonFiniteValueError(f"non-finite value at (t, node, feature) = {tuple(int(i) for i in bad)}")
    return SeriesDataset(
        values=values,
        interval_minutes=int(meta["interval_minutes"]),
        first_step_day_of_week=int(meta["first_step_day_of_week"]),
        first_step_index_in_day=int(meta["first_step_index_in_day"]),
        name=str(meta["name"]),
        edges=meta.get("edges"),
    )


def _read_csv(path: Path, n_cols: int) -> np.ndarray:
    with open(path, encoding="utf-8") as fh:
        first = fh.readline()
    try:
        [float(v) for v in first.strip().split(",")]
        skip = 0
    except ValueError:
        skip = 1
    values = np.loadtxt(path, delimiter=",", skiprows=skip, dtype=np.float64, ndmin=2)
    if values.shape[1] != n_cols:
        raise ShapeMismatchError(f"data.csv has {values.shape[1]} columns, expected {n_cols}")
    return values.astype(np.float32)


def save_dataset(ds: SeriesDataset, path, fmt: str = "bin") -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    (path / "meta.json").write_text(json.dumps(ds.meta(), indent=2))
    if fmt == "bin":
        (path / "data.bin").write_bytes(ds.values.astype("<f4").tobytes(order="C"))
    elif fmt == "csv":
        flat = ds.values.reshape(ds.num_steps, -1)
        np.savetxt(path / "data.csv", flat, delimiter=",", fmt="%.9g")
    else:
        raise ValueError(f"unknown dataset format {fmt!r}")
    return path


@dataclass(frozen=True)
class SplitSpec:
    train_ratio: float = 0.6
    val_ratio: float = 0.2
    test_ratio: float = 0.2
    input_len: int = 12
    horizon: int = 12

    def __post_init__(self):
        total = self.train_ratio + self.val_ratio + self.test_ratio
        if abs(total - 1.0) > 1e-9:
            raise SplitError(f"split ratios sum to {total}, not 1")
        if min(self.train_ratio, self.val_ratio, self.test_ratio) < 0:
            raise SplitError("split ratios must be non-negative")
        if self.input_len < 1 or self.horizon < 1:
            raise SplitError("input_len and horizon must be positive")

    def segment_lengths(self, num_steps: int) -> tuple[int, int, int]:
        n_train = math.floor(num_steps * self.train_ratio + 1e-9)
        n_val = math.floor(num_steps * self.val_ratio + 1e-9)
        return n_train, n_val, num_steps - n_train - n_val


@dataclass(frozen=True)
class Scaler:
    mean: float
    std: float

    def __post_init__(self):
        if not self.std > 0:
            raise DatasetError(f"scaler std must be positive, got {self.std}")

    @classmethod
    def fit(cls, values: np.ndarray) -> "Scaler":
        v = np.asarray(values, dtype=np.float64)
        return cls(float(v.mean()), float(v.std()))

    def transform(self, x):
        return (x - self.mean) / self.std

    def inverse(self, x):
        return x * self.std + self.mean


@dataclass(frozen=True)
class WindowSample:
    x: np.ndarray  # (L, N, F)
    y: np.ndarray  # (P, N), feature 0
    t_last: int
    tod_index: int
    dow_index: int


@dataclass
class WindowSet(Sequence):
    """Lazily materialised windows over a shared value tensor.

    Window ``k`` covers input steps ``starts[k] .. starts[k]+L-1`` and target
    steps ``starts[k]+L .. starts[k]+L+P-1``.
    """

    values: np.ndarray
    starts: np.ndarray
    input_len: int
    horizon: int
    calendar: Calendar
    segment: tuple[int, int] = field(default=(0, 0))

    def __len__(self) -> int:
        return len(self.starts)

    def __getitem__(self, k):
        if isinstance(k, slice):
            return self.subset(np.arange(len(self))[k])
        k = int(k)
        if k < 0:
            k += len(self)
        if not 0 <= k < len(self):
            raise IndexError(k)
        s = int(self.starts[k])
        t_last = s + self.input_len - 1
        tod, dow = self.calendar.indices(t_last)
        return WindowSample(
            x=self.values[s : s + self.input_len],
            y=self.values[t_last + 1 : t_last + 1 + self.horizon, :, 0],
            t_last=t_last,
            tod_index=tod,
            dow_index=dow,
        )

    def __iter__(self) -> Iterator[WindowSample]:
        for k in range(len(self)):
            yield self[k]

    @property
    def t_last(self) -> np.ndarray:
        return self.starts + self.input_len - 1

    def subset(self, indices) -> "WindowSet":
        return WindowSet(
            self.values,
            self.starts[np.asarray(indices, dtype=np.int64)],
            self.input_len,
            self.horizon,
            self.calendar,
            self.segment,
        )

    def arrays(self, indices=None):
        """Stacked ``(x, y, tod, dow)`` with shapes (B,L,N,F), (B,P,N), (B,), (B,)."""
        starts = self.starts if indices is None else self.starts[np.asarray(indices, dtype=np.int64)]
        x = self.values[starts[:, None] + np.arange(self.input_len)]
        t_last = starts + self.input_len - 1
        y = self.values[t_last[:, None] + 1 + np.arange(self.horizon), :, 0]
        tod, dow = self.calendar.indices(t_last)
        return x, y, np.atleast_1d(tod), np.atleast_1d(dow)


def split_and_window(ds: SeriesDataset, spec: SplitSpec = SplitSpec()):
    """Cut the timeline into contiguous train/val/test segments and window each.

    The scaler is fit on feature 0 of the training segment only.
    """
    lengths = spec.segment_lengths(ds.num_steps)
    need = spec.input_len + spec.horizon
    sets = []
    start = 0
    for name, length in zip(("train", "val", "test"), lengths):
        count = length - need + 1
        if count < 1:
            raise SplitError(
                f"{name} segment has {length} steps, fewer than input_len + horizon = {need}"
            )
        sets.append(
            WindowSet(
                ds.values,
                np.arange(start, start + count, dtype=np.int64),
                spec.input_len,
                spec.horizon,
                ds.calendar(),
                (start, start + length),
            )
        )
        start += length
    scaler = Scaler.fit(ds.values[: lengths[0], :, 0])
    return sets[0], sets[1], sets[2], scaler


def sample_few_shot(train: WindowSet, n: int, seed: int) -> WindowSet:
    """Uniform sample of ``n`` windows without replacement."""
    if n < 0 or n > len(train):
        raise SplitError(f"cannot draw {n} windows from a set of {len(train)}")
    rng = np.random.default_rng(seed)
    idx = np.sort(rng.choice(len(train), size=n, replace=False))
    return train.subset(idx)


def generate_synthetic(
    n_nodes: int,
    n_steps: int,
    coupling: float,
    seed: int,
    *,
    interval_minutes: int = 5,
    n_neighbors: int = 3,
    base_level: float = 200.0,
    daily_amplitude: float = 80.0,
    weekend_factor: float = 0.6,
    noise_std: float = 15.0,
    first_step_day_of_week: int = 0,
    first_step_index_in_day: int = 0,
    name: str = "synthetic",
) -> SeriesDataset:
    """Traffic-like series: daily sinusoid, weekend damping, neighbour coupling, noise.

    Each node ``i`` follows ``x[t, i] = s[t, i] + d[t, i]`` where ``s`` is the
    seasonal profile and the deviation obeys
    ``d[t, i] = coupling * mean(d[t-1, nbr(i)]) + noise``. The neighbour sets
    are drawn once per seed and recorded as the edge list.
    """
    if not 0.0 <= coupling <= 1.0:
        raise ValueError("coupling must lie in [0, 1]")
    k1 = steps_per_day_for(interval_minutes)
    if n_nodes < 1:
        raise ValueError("n_nodes must be positive")
    if n_steps < 2 * k1:
        raise ValueError(f"n_steps must cover at least two days ({2 * k1} steps)")
    rng = np.random.default_rng(seed)

    phase = rng.uniform(0.0, 2 * np.pi, n_nodes)
    amp = daily_amplitude * rng.uniform(0.5, 1.5, n_nodes)
    base = base_level * rng.uniform(0.7, 1.3, n_nodes)
    k = min(n_neighbors, n_nodes - 1)
    nbrs = np.array(
        [rng.choice(np.delete(np.arange(n_nodes), i), size=k, replace=False) for i in range(n_nodes)],
        dtype=np.int64,
    ).reshape(n_nodes, k)

    cal = Calendar(k1, interval_minutes, first_step_day_of_week, first_step_index_in_day)
    tod, dow = cal.indices(np.arange(n_steps))
    angle = 2 * np.pi * tod / k1
    week = np.where(dow >= 5, weekend_factor, 1.0)
    seasonal = base + amp * np.sin(angle[:, None] + phase) * week[:, None]

    noise = rng.normal(0.0, noise_std, size=(n_steps, n_nodes))
    dev = np.empty_like(noise)
    dev[0] = noise[0]
    for t in range(1, n_steps):
        lagged = dev[t - 1][nbrs].mean(axis=1) if k else 0.0
        dev[t] = coupling * lagged + noise[t]

    edges = [(int(j), i) for i in range(n_nodes) for j in nbrs[i]]
    return SeriesDataset(
        values=(seasonal + dev)[:, :, None].astype(np.float32),
        interval_minutes=interval_minutes,
        first_step_day_of_week=first_step_day_of_week,
        first_step_index_in_day=first_step_index_in_day,
        name=name,
        edges=edges,
    )
