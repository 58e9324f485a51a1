"""Forecast metrics, naive baselines, ablation variants and report files."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import SeriesDataset, WindowSample, WindowSet
from .errors import STGError, VariantError
from .pipeline import VARIANTS, ModelConfig

TRAFFIC_MAPE_THRESHOLD = 1e-1
EXCHANGE_MAPE_THRESHOLD = 1e-4


@dataclass
class MetricsReport:
    mae: float
    rmse: float
    mape: float | None  # None when every target is masked
    count: int
    mape_count: int
    mask_threshold: float
    per_horizon: dict = field(default_factory=dict)
    fingerprint: str | None = None

    def to_dict(self) -> dict:
        return asdict(self)


class MetricsAccumulator:
    """Per-horizon sufficient statistics; merging is exact summation."""

    def __init__(self, horizon: int, mask_threshold: float = TRAFFIC_MAPE_THRESHOLD):
        self.mask_threshold = mask_threshold
        self.count = np.zeros(horizon, dtype=np.int64)
        self.sum_abs = np.zeros(horizon)
        self.sum_sq = np.zeros(horizon)
        self.sum_ape = np.zeros(horizon)
        self.ape_count = np.zeros(horizon, dtype=np.int64)

    def update(self, pred, target):
        """``pred``/``target`` are (..., P); the last axis is the horizon."""
        pred = np.asarray(pred, dtype=np.float64)
        target = np.asarray(target, dtype=np.float64)
        if pred.shape != target.shape:
            raise ValueError(f"pred shape {pred.shape} != target shape {target.shape}")
        p = pred.reshape(-1, pred.shape[-1])
        y = target.reshape(-1, target.shape[-1])
        err = p - y
        self.count += p.shape[0]
        self.sum_abs += np.abs(err).sum(axis=0)
        self.sum_sq += (err**2).sum(axis=0)
        mask = np.abs(y) > self.mask_threshold
        safe = np.where(mask, y, 1.0)
        self.sum_ape += np.where(mask, np.abs(err / safe), 0.0).sum(axis=0)
        self.ape_count += mask.sum(axis=0)
        return self

    def merge(self, other: "MetricsAccumulator") -> "MetricsAccumulator":
        for name in ("count", "sum_abs", "sum_sq", "sum_ape", "ape_count"):
            setattr(self, name, getattr(self, name) + getattr(other, name))
        return self

    def report(self, fingerprint: str | None = None) -> MetricsReport:
        n = int(self.count.sum())
        if n == 0:
            raise STGError("no samples accumulated")
        m = int(self.ape_count.sum())
        with np.errstate(invalid="ignore", divide="ignore"):
            h_mape = np.where(self.ape_count > 0, 100.0 * self.sum_ape / self.ape_count, np.nan)
        return MetricsReport(
            mae=float(self.sum_abs.sum() / n),
            rmse=math.sqrt(self.sum_sq.sum() / n),
            mape=float(100.0 * self.sum_ape.sum() / m) if m else None,
            count=n,
            mape_count=m,
            mask_threshold=self.mask_threshold,
            per_horizon={
                "mae": (self.sum_abs / self.count).tolist(),
                "rmse": np.sqrt(self.sum_sq / self.count).tolist(),
                "mape": [None if np.isnan(v) else float(v) for v in h_mape],
            },
            fingerprint=fingerprint,
        )


def compute_metrics(pred, target, mask_threshold: float = TRAFFIC_MAPE_THRESHOLD, fingerprint=None) -> MetricsReport:
    """MAE, RMSE and masked MAPE(%) over all entries of (W, N, P) arrays.

    MAPE averages only entries with ``|target| > mask_threshold``.
    """
    pred = np.asarray(pred)
    return MetricsAccumulator(pred.shape[-1], mask_threshold).update(pred, target).report(fingerprint)


# -- baselines ----------------------------------------------------------------

class HistoricalAverage:
    """Train-segment mean of feature 0 per (time-of-day slot, node)."""

    def __init__(self, table: np.ndarray, calendar):
        self.table = table  # (K1, N)
        self.calendar = calendar

    @classmethod
    def fit(cls, ds: SeriesDataset, train_steps: int) -> "HistoricalAverage":
        cal = ds.calendar()
        tod, _ = cal.indices(np.arange(train_steps))
        vals = ds.values[:train_steps, :, 0].astype(np.float64)
        sums = np.zeros((cal.steps_per_day, ds.num_nodes))
        counts = np.zeros(cal.steps_per_day)
        np.add.at(sums, tod, vals)
        np.add.at(counts, tod, 1)
        overall = vals.mean(axis=0)
        table = np.where(counts[:, None] > 0, sums / np.maximum(counts, 1)[:, None], overall)
        return cls(table, cal)

    def forecast(self, t_last: int, horizon: int) -> np.ndarray:
        tod, _ = self.calendar.indices(t_last + 1 + np.arange(horizon))
        return self.table[tod].T  # (N, P)


def baseline_forecast(kind: str, window: WindowSample, history: HistoricalAverage | None = None) -> np.ndarray:
    horizon = window.y.shape[0]
    if kind == "persistence":
        return np.repeat(np.asarray(window.x)[-1, :, 0][:, None], horizon, axis=1)
    if kind == "historical-average":
        if history is None:
            raise STGError("historical-average needs a fitted HistoricalAverage (calendar metadata)")
        return history.forecast(window.t_last, horizon)
    raise STGError(f"unknown baseline {kind!r}")


def baseline_predictions(kind: str, windows: WindowSet, history: HistoricalAverage | None = None) -> np.ndarray:
    """Vectorised baseline over a window set -> (W, N, P)."""
    if kind == "persistence":
        last = windows.values[windows.t_last, :, 0]
        return np.repeat(last[:, :, None], windows.horizon, axis=2)
    if kind == "historical-average":
        if history is None:
            raise STGError("historical-average needs a fitted HistoricalAverage (calendar metadata)")
        steps = windows.t_last[:, None] + 1 + np.arange(windows.horizon)
        tod, _ = history.calendar.indices(steps)
        return np.transpose(history.table[tod], (0, 2, 1))
    raise STGError(f"unknown baseline {kind!r}")


def window_targets(windows: WindowSet) -> np.ndarray:
    """Targets arranged (W, N, P)."""
    _, y, _, _ = windows.arrays()
    return np.transpose(y, (0, 2, 1))


# -- ablation variants ----------------------------------------------------------

def build_variant(name: str, base: ModelConfig) -> ModelConfig:
    """Model configuration for one ablation variant of ``base``.

    ``full`` is the base itself; ``no-llm`` drops the backbone; ``no-pe``
    freezes positional embeddings; ``no-tokenizer`` swaps in per-node time
    patches; ``no-adapter`` zero-pads tokens to the backbone width and reads
    out with a single linear layer.
    """
    if name not in VARIANTS:
        raise VariantError(f"unknown variant {name!r}; expected one of {VARIANTS}")
    kw = {"variant": name}
    if name == "no-llm":
        kw["use_prompt"] = False
    return base.replace(**kw)


# -- report files ---------------------------------------------------------------

def write_json(path, obj) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, default=_jsonable))
    return path


def _jsonable(o):
    if isinstance(o, (np.integer,)):
        return int(o)
    if isinstance(o, (np.floating,)):
        return float(o)
    if isinstance(o, np.ndarray):
        return o.tolist()
    if hasattr(o, "to_dict"):
        return o.to_dict()
    raise TypeError(f"cannot serialise {type(o).__name__}")


CSV_FIELDS = ("dataset", "variant", "seed", "mae", "rmse", "mape", "count", "mask_threshold")


def metrics_row(dataset: str, variant: str, seed, report: MetricsReport, **extra) -> dict:
    row = {
        "dataset": dataset,
        "variant": variant,
        "seed": seed,
        "mae": report.mae,
        "rmse": report.rmse,
        "mape": "" if report.mape is None else report.mape,
        "count": report.count,
        "mask_threshold": report.mask_threshold,
    }
    row.update(extra)
    return row


def write_csv(path, rows: list[dict]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fields = list(CSV_FIELDS)
    for row in rows:
        fields += [k for k in row if k not in fields]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=fields)
        writer.writeheader()
        writer.writerows(rows)
    return path
