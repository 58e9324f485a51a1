import csv
import json

import numpy as np
import pytest

from stgllm.data import split_and_window
from stgllm.errors import STGError, VariantError
from stgllm.evaluation import (
    HistoricalAverage,
    MetricsAccumulator,
    baseline_forecast,
    baseline_predictions,
    build_variant,
    compute_metrics,
    metrics_row,
    window_targets,
    write_csv,
    write_json,
)
from stgllm.params import build_for_accounting, count_parameters
from stgllm.pipeline import ForecastModel, ModelConfig


def test_hand_worked_example():
    r = compute_metrics(np.array([[5.0, 90.0]]), np.array([[0.0, 100.0]]), mask_threshold=0.1)
    assert r.mae == pytest.approx(7.5)
    assert r.rmse == pytest.approx(np.sqrt(62.5))
    assert r.mape == pytest.approx(10.0)
    assert (r.count, r.mape_count) == (2, 1)


def test_fully_masked_mape_is_none():
    r = compute_metrics(np.ones((2, 3)), np.zeros((2, 3)))
    assert r.mape is None
    assert r.mae == 1.0


def test_per_horizon_breakdown():
    pred = np.zeros((4, 3, 2))
    target = np.zeros((4, 3, 2))
    target[..., 1] = 2.0
    r = compute_metrics(pred, target)
    assert r.per_horizon["mae"] == [0.0, 2.0]
    assert r.per_horizon["mape"] == [None, 100.0]


def test_accumulator_merge_is_exact():
    rng = np.random.default_rng(0)
    p, y = rng.normal(size=(10, 4, 3)), rng.normal(size=(10, 4, 3))
    whole = compute_metrics(p, y)
    merged = MetricsAccumulator(3).update(p[:4], y[:4]).merge(MetricsAccumulator(3).update(p[4:], y[4:])).report()
    assert merged.mae == pytest.approx(whole.mae, rel=1e-14)
    assert merged.rmse == pytest.approx(whole.rmse, rel=1e-14)
    assert merged.mape == pytest.approx(whole.mape, rel=1e-14)


def test_shape_mismatch():
    with pytest.raises(ValueError):
        compute_metrics(np.zeros((2, 3)), np.zeros((3, 2)))


def test_metric_ordering_holds():
    rng = np.random.default_rng(1)
    for _ in range(20):
        p, y = rng.normal(size=(5, 3, 4)), rng.normal(size=(5, 3, 4))
        r = compute_metrics(p, y)
        assert r.mae <= r.rmse + 1e-12


def test_persistence_baseline(small_split):
    _, _, te, _ = small_split
    pred = baseline_predictions("persistence", te)
    w = te[7]
    np.testing.assert_array_equal(pred[7], baseline_forecast("persistence", w))
    np.testing.assert_array_equal(pred[7][:, 0], w.x[-1, :, 0])
    assert pred.shape == window_targets(te).shape == (len(te), 6, 12)


def test_historical_average(small_ds, small_split):
    tr, _, te, _ = small_split
    history = HistoricalAverage.fit(small_ds, tr.segment[1])
    vals = small_ds.values[: tr.segment[1], :, 0].astype(np.float64)
    # slot 10 appears at steps 10, 298, 586, ... inside the training segment
    np.testing.assert_allclose(history.table[10], vals[10::288].mean(axis=0), rtol=1e-12)
    pred = baseline_predictions("historical-average", te, history)
    np.testing.assert_allclose(pred[3], baseline_forecast("historical-average", te[3], history))
    with pytest.raises(STGError):
        baseline_forecast("historical-average", te[3])
    with pytest.raises(STGError):
        baseline_predictions("oracle", te)


def test_variant_partitions_at_reference_scale():
    base = ModelConfig.reference()
    full = count_parameters(build_for_accounting(build_variant("full", base)))
    no_pe = count_parameters(build_for_accounting(build_variant("no-pe", base)))
    assert full["trainable"] - no_pe["trainable"] == 786_432
    assert full["total"] == no_pe["total"]
    no_llm = count_parameters(build_for_accounting(build_variant("no-llm", base)))
    assert no_llm["total"] == no_llm["trainable"] == 18_880 + 217_640


def test_variant_token_counts(small_config):
    tok = ForecastModel(build_variant("no-tokenizer", small_config))
    assert tok.config.n_patches == 5
    assert tok.sequence_length(170) == 5 * 170
    assert ForecastModel(small_config).sequence_length(170) == 170


def test_no_adapter_needs_tokens_narrower_than_the_backbone():
    with pytest.raises(VariantError):
        build_variant("no-adapter", ModelConfig.desk(td_dim=64, dw_dim=64))
    assert build_variant("no-adapter", ModelConfig.desk()).token_width == 44
    with pytest.raises(VariantError):
        build_variant("bogus", ModelConfig.desk())


def test_no_llm_drops_the_prompt():
    cfg = build_variant("no-llm", ModelConfig.desk(use_prompt=True))
    assert not cfg.use_prompt and ForecastModel(cfg).backbone is None


def test_report_files(tmp_path):
    r = compute_metrics(np.array([[1.0]]), np.array([[0.0]]))
    row = metrics_row("d", "full", 0, r, trainable=5)
    assert row["mape"] == ""
    write_csv(tmp_path / "m.csv", [row])
    with open(tmp_path / "m.csv") as fh:
        rows = list(csv.DictReader(fh))
    assert rows[0]["trainable"] == "5" and rows[0]["mae"] == "1.0"
    write_json(tmp_path / "m.json", {"report": r, "n": np.int64(3)})
    assert json.loads((tmp_path / "m.json").read_text())["report"]["mae"] == 1.0
