"""Acceptance criteria, one test (or group of tests) per criterion.

Long-running criteria (4, 5, 6) train desk-scale models for several minutes.
A summary line per criterion is printed at the end of the session.
"""
import math
import os
import statistics
import time
from pathlib import Path

import numpy as np
import pytest
import torch

from stgllm.data import SeriesDataset, SplitSpec, generate_synthetic, load_dataset, split_and_window
from stgllm.evaluation import (
    EXCHANGE_MAPE_THRESHOLD,
    baseline_predictions,
    build_variant,
    compute_metrics,
    window_targets,
)
from stgllm.experiments import ExperimentConfig, run_count_params
from stgllm.params import save_checkpoint
from stgllm.pipeline import VARIANTS, ForecastModel, ModelConfig, predict_batch
from stgllm.training import (
    TrainConfig,
    Trainer,
    evaluate,
    few_shot_finetune,
    gradient_check_suite,
    train,
)

criterion = pytest.mark.criterion


def _persistence_mae(windows, threshold=0.1):
    return compute_metrics(baseline_predictions("persistence", windows), window_targets(windows), threshold).mae


# -- 1 ---------------------------------------------------------------------------------

@criterion(1, "exact parameter accounting at the reference config")
def test_c1_reference_parameter_ledger(tmp_path, measured):
    t0 = time.perf_counter()
    ledger = run_count_params(ExperimentConfig(backbone="reference"), tmp_path)
    elapsed = time.perf_counter() - t0
    groups = {k: v["count"] for k, v in ledger["groups"].items()}
    measured(f"accounting took {elapsed:.3f} s")
    assert groups["stg_tokenizer"] == 18_880
    assert groups["stg_adapter"] == 217_640
    assert groups["position_embeddings"] == 786_432
    assert groups["layer_norm"] == 10_752
    assert ledger["trainable"] == 1_033_704
    assert f"{ledger['trainable_percent']:.2f}" == "1.70"
    assert ledger["total"] == 60_885_480
    assert elapsed < 1.0


# -- 2 ---------------------------------------------------------------------------------

@criterion(2, "analytic gradients match central differences")
def test_c2_gradient_check(measured):
    result = gradient_check_suite(seed=0, points=20, h=1e-3)
    measured(f"max relative error {result['max_rel_error']:.3e} over {result['points']} points "
          f"(worst tensor {result['worst']})")
    assert result["points"] == 21
    assert result["max_rel_error"] < 1e-4


# -- 3 ---------------------------------------------------------------------------------

@criterion(3, "frozen tensors are bit-identical after 100 optimizer steps")
@pytest.mark.parametrize("variant", VARIANTS)
def test_c3_freezing_invariant(variant):
    ds = generate_synthetic(n_nodes=8, n_steps=4 * 288, coupling=0.7, seed=0)
    tr, _, _, scaler = split_and_window(ds)
    model = ForecastModel(build_variant(variant, ModelConfig.desk()), scaler, seed=0)
    frozen = {n: p.detach().clone() for n, p in model.named_parameters() if not p.requires_grad}
    trainable = {n: p.detach().clone() for n, p in model.named_parameters() if p.requires_grad}
    expected_frozen = {
        "full": {"backbone.wte"},
        "no-pe": {"backbone.wte", "backbone.wpe"},
        "no-llm": set(),
    }
    if variant in expected_frozen:
        assert expected_frozen[variant] <= set(frozen)
    if variant == "no-llm":
        assert not frozen
    trainer = Trainer(model, tr, None, TrainConfig(epochs=1, patience=1, batch_size=16))
    rng = np.random.default_rng(0)
    for _ in range(100):
        trainer.step(rng.choice(len(tr), size=16, replace=False))
    assert trainer.state.step == 100
    params = dict(model.named_parameters())
    for name, before in frozen.items():
        assert torch.equal(params[name], before), name
    moved = [n for n, v in trainable.items() if not torch.equal(params[n], v)]
    assert set(moved) == set(trainable)


# -- 4 ---------------------------------------------------------------------------------

@criterion(4, "desk model beats persistence by at least 20% on synthetic data")
def test_c4_learning_on_synthetic(measured):
    ds = generate_synthetic(n_nodes=20, n_steps=28 * 288, coupling=0.7, seed=0)
    tr, va, te, scaler = split_and_window(ds)
    persistence = _persistence_mae(te)
    maes = []
    t0 = time.perf_counter()
    for seed in (0, 1, 2):
        model = ForecastModel(ModelConfig.desk(), scaler, seed=seed)
        train(model, tr, va, TrainConfig(epochs=50, patience=50, seed=seed))
        maes.append(evaluate(model, te).mae)
    elapsed = time.perf_counter() - t0
    median = statistics.median(maes)
    gain = 1.0 - median / persistence
    measured(f"test MAE per seed {[round(m, 3) for m in maes]}, median {median:.3f}; "
          f"persistence {persistence:.3f}; improvement {100 * gain:.1f}%; {elapsed:.0f} s")
    assert gain >= 0.20


# -- 5 ---------------------------------------------------------------------------------

def _exchange_rate_dataset():
    """Locate ExchangeRate: a dataset directory, or the raw 7588 x 8 comma-separated file."""
    candidates = [os.environ.get("STGLLM_EXCHANGE_RATE"), Path(__file__).parents[1] / "data" / "exchange_rate"]
    for c in candidates:
        if not c:
            continue
        p = Path(c)
        if (p / "meta.json").is_file():
            return load_dataset(p)
        raw = p if p.is_file() else next((p / n for n in ("exchange_rate.txt", "exchange_rate.csv")
                                          if (p / n).is_file()), None)
        if raw is not None:
            values = np.loadtxt(raw, delimiter=",", dtype=np.float64, ndmin=2)
            return SeriesDataset(values[:, :, None], interval_minutes=1440, name="ExchangeRate")
    return None


@criterion(5, "ExchangeRate desk run: MAE <= 0.0192 and better than persistence")
def test_c5_exchange_rate(measured):
    ds = _exchange_rate_dataset()
    if ds is None:
        measured("ExchangeRate data not available; nothing was trained")
        pytest.fail(
            "ExchangeRate data not found; set STGLLM_EXCHANGE_RATE to the raw exchange_rate.txt "
            "(or a dataset directory) or place it under data/exchange_rate/. "
            "The sandbox has no copy and the package does not download datasets."
        )
    assert ds.num_nodes == 8
    tr, va, te, scaler = split_and_window(ds)
    model = ForecastModel(ModelConfig.desk(steps_per_day=ds.steps_per_day, interval_minutes=ds.interval_minutes),
                          scaler, seed=0)
    train(model, tr, va, TrainConfig(epochs=50, patience=50, mape_threshold=EXCHANGE_MAPE_THRESHOLD))
    mae = evaluate(model, te, mask_threshold=EXCHANGE_MAPE_THRESHOLD).mae
    persistence = _persistence_mae(te, EXCHANGE_MAPE_THRESHOLD)
    measured(f"ExchangeRate test MAE {mae:.5f}; persistence {persistence:.5f}")
    assert mae <= 3 * 0.0064
    assert mae < persistence


# -- 6 ---------------------------------------------------------------------------------

FEW_SHOT_GRID = (0, 20, 50, 100, 200, 500, 1000, 2000)


@criterion(6, "few-shot MAE: zero-shot worst, n=2000 better than n=20")
def test_c6_few_shot_trend(tmp_path, measured):
    per_n = {n: [] for n in FEW_SHOT_GRID}
    t0 = time.perf_counter()
    for seed in (0, 1, 2):
        source = generate_synthetic(20, 28 * 288, 0.7, seed=100 + seed)
        target = generate_synthetic(20, 28 * 288, 0.3, seed=200 + seed, base_level=300.0,
                                    daily_amplitude=120.0, noise_std=20.0, weekend_factor=0.4)
        tr, va, _, scaler = split_and_window(source)
        model = ForecastModel(ModelConfig.desk(), scaler, seed=seed)
        cfg = TrainConfig(epochs=20, patience=20, seed=seed)
        train(model, tr, va, cfg)
        ckpt = save_checkpoint(model, tmp_path / f"source_{seed}")
        ttr, tva, tte, tscaler = split_and_window(target)
        for row in few_shot_finetune(ckpt, ttr, tva, tte, tscaler, FEW_SHOT_GRID, cfg, sample_seed=seed):
            per_n[row["n"]].append(row["mae"])
    median = {n: statistics.median(v) for n, v in per_n.items()}
    measured(f"median MAE by n: {', '.join(f'{n}: {m:.3f}' for n, m in median.items())}; "
          f"{time.perf_counter() - t0:.0f} s")
    assert median[0] == max(median.values())
    assert median[2000] < median[20]


# -- 7 ---------------------------------------------------------------------------------

def _oracle(pred, target, threshold):
    abs_sum = sq_sum = ape_sum = 0.0
    count = ape_count = 0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            e = float(pred[i, j]) - float(target[i, j])
            abs_sum += abs(e)
            sq_sum += e * e
            count += 1
            if abs(float(target[i, j])) > threshold:
                ape_sum += abs(e / float(target[i, j]))
                ape_count += 1
    return abs_sum / count, math.sqrt(sq_sum / count), (100.0 * ape_sum / ape_count if ape_count else None)


@criterion(7, "compute_metrics equals a double-loop oracle")
def test_c7_metric_oracle():
    rng = np.random.default_rng(2024)
    for _ in range(100):
        rows, horizon = rng.integers(1, 40), rng.integers(1, 13)
        target = rng.normal(0, rng.uniform(0.1, 300), size=(rows, horizon))
        target[rng.random(target.shape) < 0.2] = rng.uniform(-0.2, 0.2)
        pred = target + rng.normal(0, rng.uniform(0.01, 50), size=target.shape)
        threshold = float(rng.choice([1e-4, 0.1, 1.0]))
        mae, rmse, mape = _oracle(pred, target, threshold)
        r = compute_metrics(pred, target, threshold)
        assert abs(r.mae - mae) <= 1e-10 * abs(mae)
        assert abs(r.rmse - rmse) <= 1e-10 * abs(rmse)
        if mape is None:
            assert r.mape is None
        else:
            assert abs(r.mape - mape) <= 1e-10 * abs(mape)


# -- 8 ---------------------------------------------------------------------------------

@criterion(8, "split lengths, window counts and the reference shape chain")
def test_c8_split_protocol():
    ds = SeriesDataset(np.arange(17_856 * 2, dtype=np.float32).reshape(17_856, 2, 1), interval_minutes=5)
    sets = split_and_window(ds, SplitSpec())[:3]
    lengths = [s.segment[1] - s.segment[0] for s in sets]
    assert lengths == [10_713, 3_571, 3_572]
    assert [len(s) for s in sets] == [n - 23 for n in lengths]


@criterion(8, "split lengths, window counts and the reference shape chain")
def test_c8_reference_shape_chain():
    model = ForecastModel(ModelConfig.reference(), seed=0)
    x = torch.randn(12, 170, 1)
    with torch.no_grad():
        out, parts = model.forward_normalized(x, torch.tensor(142), torch.tensor(0), return_tokens=True)
    assert tuple(parts["tokens"].t_e.shape) == (170, 140)
    assert tuple(parts["encoded"].shape) == (170, 768)
    assert tuple(out.shape) == (170, 12)


# -- 9 ---------------------------------------------------------------------------------

@criterion(9, "prompt pathway changes forecasts and toggles off exactly")
def test_c9_prompt_pathway():
    ds = generate_synthetic(n_nodes=8, n_steps=4 * 288, coupling=0.7, seed=5)
    _, _, te, scaler = split_and_window(ds)
    windows = te.subset(np.arange(0, len(te), 25))
    cfg = ModelConfig.desk(use_temporal_embeddings=False, use_prompt=False)

    plain = ForecastModel(cfg, scaler, seed=7)
    baseline = predict_batch(plain, windows)

    model = ForecastModel(cfg, scaler, seed=7).set_use_prompt(True)
    with_prompt = predict_batch(model, windows)
    assert not np.allclose(with_prompt, baseline)

    x, _, tod, dow = windows.arrays(np.arange(3))
    with torch.no_grad():
        _, parts = model.forward_normalized(model.normalize(torch.from_numpy(x)), tod, dow, return_tokens=True)
    m = parts["prompt_len"]
    assert m > 0
    assert parts["combined"].shape[-2] == m + ds.num_nodes == model.sequence_length(ds.num_nodes)
    ids = model.prompt_table(ds.num_nodes).lookup(torch.from_numpy(tod), torch.from_numpy(dow))
    assert torch.equal(parts["combined"][:, :m], model.backbone.wte[ids])
    assert torch.equal(parts["combined"][:, m:], parts["encoded"])

    model.set_use_prompt(False)
    assert model.sequence_length(ds.num_nodes) == ds.num_nodes
    assert np.array_equal(predict_batch(model, windows), baseline)


@criterion(9, "prompt pathway changes forecasts and toggles off exactly")
def test_c9_prompt_effect_is_recorded(measured):
    """Trains with and without the prompt and reports the MAE pair; the direction is not gated."""
    ds = generate_synthetic(n_nodes=10, n_steps=7 * 288, coupling=0.7, seed=6)
    tr, va, te, scaler = split_and_window(ds)
    maes = {}
    for use_prompt in (False, True):
        model = ForecastModel(ModelConfig.desk(use_temporal_embeddings=False, use_prompt=use_prompt), scaler, seed=0)
        train(model, tr, va, TrainConfig(epochs=5, patience=5))
        maes[use_prompt] = evaluate(model, te).mae
    measured(f"test MAE without prompt {maes[False]:.3f}, with prompt {maes[True]:.3f} "
          f"({'improves' if maes[True] < maes[False] else 'does not improve'})")
    assert all(math.isfinite(v) for v in maes.values())
