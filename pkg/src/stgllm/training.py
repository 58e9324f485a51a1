"""Fine-tuning of the trainable partition with Adam and a Huber loss."""
from __future__ import annotations

import json
import logging
import math
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import WindowSet, sample_few_shot
from .errors import ConfigError, NonFiniteLossError, TrainingError
from .evaluation import MetricsAccumulator, MetricsReport, TRAFFIC_MAPE_THRESHOLD
from .pipeline import ForecastModel, _is_layer_norm

log = logging.getLogger(__name__)

FEW_SHOT_GRID = (0, 20, 50, 100, 200, 500, 1000, 2000)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 200
    patience: int = 50
    batch_size: int = 64
    lr: float = 1e-3
    weight_decay: float = 0.05
    huber_delta: float = 1.0
    seed: int = 0
    eval_batch_size: int = 256
    mape_threshold: float = TRAFFIC_MAPE_THRESHOLD

    def __post_init__(self):
        for name in ("epochs", "patience", "batch_size", "lr", "huber_delta", "eval_batch_size"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive")
        if self.weight_decay < 0:
            raise ConfigError("weight_decay must be non-negative")
        if self.patience > self.epochs:
            raise ConfigError("patience may not exceed epochs")

    def to_dict(self) -> dict:
        return asdict(self)


def huber_loss(pred: torch.Tensor, target: torch.Tensor, delta: float = 1.0) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValueError(f"pred shape {tuple(pred.shape)} != target shape {tuple(target.shape)}")
    err = (pred - target).abs()
    quad = 0.5 * err**2
    lin = delta * (err - 0.5 * delta)
    return torch.where(err <= delta, quad, lin).mean()


def decays(name: str) -> bool:
    """Weight decay applies to weights and embedding tables, never to biases or layer norms."""
    if _is_layer_norm(name):
        return False
    return name.rsplit(".", 1)[-1] not in ("b", "b1", "b2", "b3")


def make_optimizer(model: ForecastModel, cfg: TrainConfig) -> torch.optim.Adam:
    decay, plain = [], []
    for name, p in model.named_parameters():
        if p.requires_grad:
            (decay if decays(name) else plain).append(p)
    groups = [
        {"params": decay, "weight_decay": cfg.weight_decay},
        {"params": plain, "weight_decay": 0.0},
    ]
    return torch.optim.Adam([g for g in groups if g["params"]], lr=cfg.lr, betas=(0.9, 0.999), eps=1e-8)


def batch_tensors(windows: WindowSet, idx, dtype=torch.float32):
    x, y, tod, dow = windows.arrays(idx)
    return (
        torch.as_tensor(x, dtype=dtype),
        torch.as_tensor(np.transpose(y, (0, 2, 1)), dtype=dtype),  # (B, N, P)
        torch.from_numpy(tod),
        torch.from_numpy(dow),
    )


def batch_loss(model: ForecastModel, batch, delta: float) -> torch.Tensor:
    x, y, tod, dow = batch
    return huber_loss(model(x, tod, dow), y, delta)


def compute_gradients(model: ForecastModel, batch, delta: float = 1.0, batch_index: int = 0) -> dict:
    """Exact gradients of the batch Huber loss for every trainable tensor."""
    model.zero_grad(set_to_none=True)
    loss = batch_loss(model, batch, delta)
    if not torch.isfinite(loss):
        raise NonFiniteLossError(batch_index, loss.item())
    loss.backward()
    return {n: p.grad.detach().clone() for n, p in model.named_parameters() if p.requires_grad}


@torch.no_grad()
def evaluate(model: ForecastModel, windows: WindowSet, batch_size: int = 256,
             mask_threshold: float = TRAFFIC_MAPE_THRESHOLD) -> MetricsReport:
    was_training = model.training
    model.eval()
    acc = MetricsAccumulator(windows.horizon, mask_threshold)
    for lo in range(0, len(windows), batch_size):
        x, y, tod, dow = batch_tensors(windows, np.arange(lo, min(lo + batch_size, len(windows))), model.dtype)
        acc.update(model(x, tod, dow).numpy(), y.numpy())
    model.train(was_training)
    return acc.report()


@dataclass
class TrainState:
    step: int = 0
    epoch: int = 0
    best_val: float = math.inf
    best_epoch: int = -1
    epochs_since_improvement: int = 0
    rng: np.random.Generator = field(default_factory=np.random.default_rng)


@dataclass
class TrainResult:
    log: list[dict]
    best_epoch: int
    best_val_mae: float
    stopped_early: bool


class Trainer:
    def __init__(self, model: ForecastModel, train_set: WindowSet, val_set: WindowSet | None, cfg: TrainConfig):
        if len(train_set) == 0:
            raise TrainingError("empty training set")
        self.model = model
        self.train_set = train_set
        self.val_set = val_set
        self.cfg = cfg
        torch.manual_seed(cfg.seed)
        self.optimizer = make_optimizer(model, cfg)
        self.state = TrainState(rng=np.random.default_rng(cfg.seed))

    def step(self, idx) -> float:
        self.model.train()
        batch = batch_tensors(self.train_set, idx, self.model.dtype)
        self.optimizer.zero_grad(set_to_none=True)
        loss = batch_loss(self.model, batch, self.cfg.huber_delta)
        if not torch.isfinite(loss):
            raise NonFiniteLossError(self.state.step, loss.item())
        loss.backward()
        self.optimizer.step()
        self.state.step += 1
        return loss.item()

    def run_epoch(self) -> float:
        perm = self.state.rng.permutation(len(self.train_set))
        total, seen = 0.0, 0
        for lo in range(0, len(perm), self.cfg.batch_size):
            idx = perm[lo : lo + self.cfg.batch_size]
            total += self.step(idx) * len(idx)
            seen += len(idx)
        self.state.epoch += 1
        return total / seen

    def _snapshot(self) -> dict:
        return {n: p.detach().clone() for n, p in self.model.named_parameters() if p.requires_grad}

    def fit(self, log_path=None) -> TrainResult:
        cfg, st = self.cfg, self.state
        records: list[dict] = []
        best = self._snapshot()
        stopped_early = False
        fh = open(log_path, "w", encoding="utf-8") if log_path else None
        try:
            for _ in range(cfg.epochs):
                t0 = time.perf_counter()
                train_loss = self.run_epoch()
                rec = {"epoch": st.epoch, "train_loss": train_loss}
                if self.val_set is not None and len(self.val_set):
                    rep = evaluate(self.model, self.val_set, cfg.eval_batch_size, cfg.mape_threshold)
                    rec.update(val_mae=rep.mae, val_rmse=rep.rmse, val_mape=rep.mape)
                    score = rep.mae
                else:
                    rec.update(val_mae=None, val_rmse=None, val_mape=None)
                    score = train_loss
                rec.update(lr=cfg.lr, seconds=time.perf_counter() - t0)
                records.append(rec)
                if fh:
                    fh.write(json.dumps(rec) + "\n")
                    fh.flush()
                log.debug("epoch %d loss %.5f val_mae %s", st.epoch, train_loss, rec["val_mae"])
                if score < st.best_val:
                    st.best_val, st.best_epoch = score, st.epoch
                    st.epochs_since_improvement = 0
                    best = self._snapshot()
                else:
                    st.epochs_since_improvement += 1
                    if st.epochs_since_improvement >= cfg.patience:
                        stopped_early = True
                        break
        finally:
            if fh:
                fh.close()
        with torch.no_grad():
            params = dict(self.model.named_parameters())
            for n, v in best.items():
                params[n].copy_(v)
        return TrainResult(records, st.best_epoch, st.best_val, stopped_early)


def train(model: ForecastModel, train_set: WindowSet, val_set: WindowSet | None, cfg: TrainConfig,
          out_dir=None) -> TrainResult:
    """Fit ``model`` in place and leave it holding the best-validation parameters.

    With ``out_dir`` the JSON-lines log goes to ``train_log.jsonl`` and the
    best parameters to the ``checkpoint`` archive.
    """
    log_path = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        log_path = out_dir / "train_log.jsonl"
    result = Trainer(model, train_set, val_set, cfg).fit(log_path)
    if out_dir is not None:
        from .params import save_checkpoint

        save_checkpoint(model, out_dir / "checkpoint", extra={"train": cfg.to_dict(), "best_epoch": result.best_epoch})
    return result


# -- finite-difference gradient check ---------------------------------------------

def gradient_check(model: ForecastModel, batch, delta: float = 1.0, h: float = 1e-3) -> dict:
    """Compare analytic gradients with central differences for every trainable coordinate.

    Runs in float64. Each trainable tensor gets the relative error
    ``||a - n|| / max(||a||, ||n||)`` (0 when both vanish); the result reports
    the worst tensor plus the largest per-coordinate absolute error.
    """
    model = model.double()
    batch = tuple(t.double() if t.is_floating_point() else t for t in batch)
    grads = compute_gradients(model, batch, delta)
    params = dict(model.named_parameters())
    per_tensor, max_abs, n_coords = {}, 0.0, 0
    with torch.no_grad():
        for name, g in grads.items():
            flat = params[name].view(-1)
            numeric = torch.empty_like(flat)
            for i in range(flat.numel()):
                orig = flat[i].item()
                flat[i] = orig + h
                up = batch_loss(model, batch, delta).item()
                flat[i] = orig - h
                down = batch_loss(model, batch, delta).item()
                flat[i] = orig
                numeric[i] = (up - down) / (2 * h)
            analytic = g.view(-1)
            scale = max(analytic.norm().item(), numeric.norm().item())
            diff = (analytic - numeric).norm().item()
            per_tensor[name] = diff / scale if scale > 0 else 0.0
            max_abs = max(max_abs, (analytic - numeric).abs().max().item())
            n_coords += flat.numel()
    worst = max(per_tensor, key=per_tensor.get)
    return {"max_rel_error": per_tensor[worst], "worst": worst, "per_tensor": per_tensor,
            "max_abs_error": max_abs, "coordinates": n_coords}


def tiny_config() -> "ModelConfig":
    from .backbone import BackboneConfig
    from .pipeline import ModelConfig

    return ModelConfig(
        input_len=2, horizon=2, num_features=1, steps_per_day=4, td_dim=2, dw_dim=2,
        backbone=BackboneConfig(n_layers=1, d_model=8, n_heads=2, context_len=8, vocab_size=16),
    )


def smooth_batch(model: ForecastModel, n_nodes: int, batch: int, delta: float, gen: torch.Generator):
    """Random batch whose residuals stay clear of the Huber kink at +-delta.

    Targets are placed at offsets drawn from [0.1, 0.6]*delta (quadratic
    branch) or [1.5, 3]*delta (linear branch) around the current forecast,
    so a 1e-3 parameter step cannot move any residual across the kink.
    """
    cfg = model.config
    x = model.scaler.mean + model.scaler.std * torch.randn(
        batch, cfg.input_len, n_nodes, cfg.num_features, generator=gen, dtype=torch.float64)
    tod = torch.randint(0, cfg.steps_per_day, (batch,), generator=gen)
    dow = torch.randint(0, cfg.days_per_week, (batch,), generator=gen)
    with torch.no_grad():
        pred = model.double()(x, tod, dow)
    u = torch.rand(pred.shape, generator=gen, dtype=torch.float64)
    linear = torch.rand(pred.shape, generator=gen) < 0.5
    mag = torch.where(linear, 1.5 + 1.5 * u, 0.1 + 0.5 * u) * delta
    sign = torch.where(torch.rand(pred.shape, generator=gen) < 0.5, -1.0, 1.0).double()
    return x, pred + sign * mag, tod, dow


def gradient_check_suite(seed: int = 0, points: int = 20, h: float = 1e-3, delta: float = 1.0,
                         perturb: float = 0.1) -> dict:
    """Finite-difference check on the tiny config at init and at ``points`` random parameter points."""
    from .data import Scaler

    gen = torch.Generator().manual_seed(seed)
    results = []
    for k in range(points + 1):
        # point 0 is the initialization; later points redraw every tensor from
        # the init distribution and move the trainable ones off their init values
        model = ForecastModel(tiny_config(), Scaler(1.0, 2.0), seed=seed + k).double()
        if k:
            with torch.no_grad():
                for p in model.parameters():
                    if p.requires_grad:
                        p.add_(perturb * torch.randn(p.shape, generator=gen, dtype=p.dtype))
        batch = smooth_batch(model, n_nodes=2, batch=3, delta=delta, gen=gen)
        results.append(gradient_check(model, batch, delta, h))
    worst = max(results, key=lambda r: r["max_rel_error"])
    return {"max_rel_error": worst["max_rel_error"], "worst": worst["worst"], "points": len(results),
            "per_point": [r["max_rel_error"] for r in results]}


# -- few-shot transfer ---------------------------------------------------------------

def few_shot_finetune(source_ckpt, target_train: WindowSet, target_val: WindowSet, target_test: WindowSet,
                      target_scaler, grid=FEW_SHOT_GRID, cfg: TrainConfig = TrainConfig(),
                      sample_seed: int = 0, refit_scaler: bool = True) -> list[dict]:
    """One row per sample size: reload the source model, fine-tune on ``n`` windows, test.

    ``n = 0`` evaluates the source model unchanged (zero-shot).
    """
    from .params import load_checkpoint

    rows = []
    for n in grid:
        model = load_checkpoint(source_ckpt)
        if refit_scaler:
            model.scaler = target_scaler
        if n:
            subset = sample_few_shot(target_train, n, sample_seed)
            train(model, subset, target_val, cfg)
        rep = evaluate(model, target_test, cfg.eval_batch_size, cfg.mape_threshold)
        rows.append({"n": n, "mae": rep.mae, "rmse": rep.rmse, "mape": rep.mape})
    return rows
