"""Experiment protocols driven by a single JSON configuration."""
from __future__ import annotations

import json
import logging
import statistics
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import SeriesDataset, SplitSpec, generate_synthetic, load_dataset, save_dataset, split_and_window
from .errors import ConfigError
from .evaluation import (
    TRAFFIC_MAPE_THRESHOLD,
    HistoricalAverage,
    baseline_predictions,
    build_variant,
    compute_metrics,
    metrics_row,
    window_targets,
    write_csv,
    write_json,
)
from .params import build_for_accounting, count_parameters, format_ledger, load_checkpoint, save_checkpoint
from .pipeline import VARIANTS, ForecastModel, ModelConfig
from .training import FEW_SHOT_GRID, TrainConfig, evaluate, few_shot_finetune, gradient_check_suite, train

log = logging.getLogger(__name__)

PRESETS = ("desk", "reference")


@dataclass
class ExperimentConfig:
    dataset: str | None = None
    target_dataset: str | None = None
    variant: str = "full"
    backbone: str = "desk"
    model: dict = field(default_factory=dict)
    train: TrainConfig = field(default_factory=TrainConfig)
    split: SplitSpec = field(default_factory=SplitSpec)
    few_shot_grid: list = field(default_factory=lambda: list(FEW_SHOT_GRID))
    refit_scaler: bool = True
    variants: list = field(default_factory=lambda: list(VARIANTS))
    seeds: list = field(default_factory=lambda: [0])
    out: str = "runs/default"
    mape_threshold: float = TRAFFIC_MAPE_THRESHOLD
    synth: dict = field(default_factory=lambda: {"n_nodes": 20, "n_steps": 28 * 288, "coupling": 0.7, "seed": 0})
    checkpoint: str | None = None

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        known = {f.name for f in fields(cls)}
        unknown = sorted(set(d) - known)
        if unknown:
            raise ConfigError(f"unknown config fields {unknown}")
        d = dict(d)
        if isinstance(d.get("train"), dict):
            d["train"] = TrainConfig(**d["train"])
        if isinstance(d.get("split"), dict):
            d["split"] = SplitSpec(**d["split"])
        return cls(**d)

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        return cls.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["train"] = self.train.to_dict()
        d["split"] = asdict(self.split)
        return d

    def validate(self, needs: tuple[str, ...] = ()):
        """Check everything a subcommand needs before any compute starts."""
        if not self.seeds:
            raise ConfigError("seeds must be non-empty")
        if self.backbone not in PRESETS:
            raise ConfigError(f"backbone must be one of {PRESETS}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        bad = [v for v in self.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"unknown variants {bad}")
        for key in needs:
            value = getattr(self, key)
            if value is None:
                raise ConfigError(f"{key} is required for this subcommand")
            if key in ("dataset", "target_dataset", "checkpoint") and not Path(value).exists():
                raise ConfigError(f"{key} path {value!r} does not exist")
        template = self.model.get("prompt_template")
        if template and not Path(template).is_file():
            raise ConfigError(f"prompt template {template!r} does not exist")
        if any(int(n) < 0 for n in self.few_shot_grid):
            raise ConfigError("few-shot sample sizes must be non-negative")


def model_config_for(cfg: ExperimentConfig, ds: SeriesDataset | None = None, **overrides) -> ModelConfig:
    kw = dict(cfg.model)
    template = kw.pop("prompt_template", None)
    if template:
        kw["prompt_template"] = Path(template).read_text(encoding="utf-8")
    kw.update(input_len=cfg.split.input_len, horizon=cfg.split.horizon, variant=cfg.variant)
    if ds is not None:
        kw.update(num_features=ds.num_features, steps_per_day=ds.steps_per_day, interval_minutes=ds.interval_minutes)
    kw.update(overrides)
    if cfg.backbone == "reference":
        return ModelConfig.reference(**kw)
    return ModelConfig.desk(**kw)


def _train_cfg(cfg: ExperimentConfig, seed: int) -> TrainConfig:
    return TrainConfig(**{**cfg.train.to_dict(), "seed": seed, "mape_threshold": cfg.mape_threshold})


def _median(values):
    values = [v for v in values if v is not None]
    return statistics.median(values) if values else None


def _summarise(rows: list[dict], keys=("mae", "rmse", "mape")) -> dict:
    return {k: _median([r[k] if r[k] != "" else None for r in rows]) for k in keys}


def baseline_reports(ds: SeriesDataset, split: SplitSpec, mape_threshold: float) -> dict:
    tr, _, te, _ = split_and_window(ds, split)
    target = window_targets(te)
    out = {"persistence": compute_metrics(baseline_predictions("persistence", te), target, mape_threshold)}
    history = HistoricalAverage.fit(ds, tr.segment[1])
    out["historical-average"] = compute_metrics(
        baseline_predictions("historical-average", te, history), target, mape_threshold
    )
    return out


def train_one(cfg: ExperimentConfig, ds: SeriesDataset, seed: int, out_dir=None, **model_overrides):
    """Train one model on ``ds``; returns (model, test report, train result)."""
    tr, va, te, scaler = split_and_window(ds, cfg.split)
    mcfg = model_config_for(cfg, ds, **model_overrides)
    model = ForecastModel(mcfg, scaler, seed=seed)
    result = train(model, tr, va, _train_cfg(cfg, seed), out_dir)
    report = evaluate(model, te, cfg.train.eval_batch_size, cfg.mape_threshold)
    return model, report, result


# -- subcommands ----------------------------------------------------------------

def run_synth(cfg: ExperimentConfig, out: Path) -> dict:
    params = dict(cfg.synth)
    ds = generate_synthetic(**params)
    save_dataset(ds, out)
    return {"dataset": str(out), "num_steps": ds.num_steps, "num_nodes": ds.num_nodes}


def run_train(cfg: ExperimentConfig, out: Path) -> dict:
    ds = load_dataset(cfg.dataset)
    rows = []
    for seed in cfg.seeds:
        seed_dir = out / f"seed_{seed}"
        _, report, result = train_one(cfg, ds, seed, seed_dir)
        write_json(seed_dir / "metrics.json", {"test": report, "best_epoch": result.best_epoch})
        rows.append(metrics_row(ds.name, cfg.variant, seed, report))
    baselines = baseline_reports(ds, cfg.split, cfg.mape_threshold)
    for name, rep in baselines.items():
        rows.append(metrics_row(ds.name, name, "", rep))
    write_csv(out / "metrics.csv", rows)
    summary = {
        "median": _summarise([r for r in rows if r["variant"] == cfg.variant]),
        "baselines": {k: v.to_dict() for k, v in baselines.items()},
    }
    write_json(out / "metrics.json", summary)
    return summary


def run_eval(cfg: ExperimentConfig, out: Path) -> dict:
    ds = load_dataset(cfg.dataset)
    model = load_checkpoint(cfg.checkpoint)
    _, _, te, _ = split_and_window(ds, cfg.split)
    report = evaluate(model, te, cfg.train.eval_batch_size, cfg.mape_threshold)
    baselines = baseline_reports(ds, cfg.split, cfg.mape_threshold)
    rows = [metrics_row(ds.name, model.config.variant, "", report)]
    rows += [metrics_row(ds.name, k, "", v) for k, v in baselines.items()]
    write_csv(out / "metrics.csv", rows)
    summary = {"test": report.to_dict(), "baselines": {k: v.to_dict() for k, v in baselines.items()}}
    write_json(out / "metrics.json", summary)
    return summary


def run_few_shot(cfg: ExperimentConfig, out: Path) -> dict:
    target = load_dataset(cfg.target_dataset)
    ttr, tva, tte, tscaler = split_and_window(target, cfg.split)
    rows = []
    for seed in cfg.seeds:
        if cfg.checkpoint:
            source = Path(cfg.checkpoint)
        else:
            source_ds = load_dataset(cfg.dataset)
            model, _, _ = train_one(cfg, source_ds, seed)
            source = save_checkpoint(model, out / f"seed_{seed}" / "source_checkpoint")
        for row in few_shot_finetune(
            source, ttr, tva, tte, tscaler, [int(n) for n in cfg.few_shot_grid], _train_cfg(cfg, seed),
            sample_seed=seed, refit_scaler=cfg.refit_scaler,
        ):
            rows.append({"seed": seed, **row})
    median = []
    for n in cfg.few_shot_grid:
        sel = [r for r in rows if r["n"] == int(n)]
        median.append({"n": int(n), **_summarise(sel)})
    write_csv(out / "few_shot.csv", [{"dataset": target.name, "variant": cfg.variant, **r} for r in rows])
    summary = {"rows": rows, "median": median}
    write_json(out / "few_shot.json", summary)
    return summary


def run_ablate(cfg: ExperimentConfig, out: Path) -> dict:
    ds = load_dataset(cfg.dataset)
    rows = []
    for name in cfg.variants:
        vcfg = ExperimentConfig.from_dict({**cfg.to_dict(), "variant": name})
        for seed in cfg.seeds:
            model, report, _ = train_one(vcfg, ds, seed)
            ledger = count_parameters(model)
            rows.append(metrics_row(ds.name, name, seed, report, trainable=ledger["trainable"], total=ledger["total"]))
    write_csv(out / "ablation.csv", rows)
    median = {name: _summarise([r for r in rows if r["variant"] == name]) for name in cfg.variants}
    write_json(out / "ablation.json", {"rows": rows, "median": median})
    return {"median": median}


def run_prompt_compare(cfg: ExperimentConfig, out: Path) -> dict:
    """Temporal embeddings off; the time prompt on versus off."""
    ds = load_dataset(cfg.dataset)
    rows = []
    for seed in cfg.seeds:
        for use_prompt in (True, False):
            model, report, _ = train_one(cfg, ds, seed, use_temporal_embeddings=False, use_prompt=use_prompt)
            label = "with-prompt" if use_prompt else "without-prompt"
            rows.append(metrics_row(ds.name, label, seed, report, tokens=model.sequence_length(ds.num_nodes)))
    write_csv(out / "prompt_compare.csv", rows)
    median = {k: _summarise([r for r in rows if r["variant"] == k]) for k in ("with-prompt", "without-prompt")}
    w, wo = median["with-prompt"]["mae"], median["without-prompt"]["mae"]
    summary = {"rows": rows, "median": median, "prompt_improves_mae": bool(w < wo)}
    write_json(out / "prompt_compare.json", summary)
    return summary


def run_count_params(cfg: ExperimentConfig, out: Path) -> dict:
    mcfg = model_config_for(cfg)
    if cfg.backbone == "reference" and "steps_per_day" not in cfg.model:
        mcfg = mcfg.replace(steps_per_day=288)
    ledger = count_parameters(build_for_accounting(mcfg))
    print(format_ledger(ledger))
    write_json(out / "param_ledger.json", ledger)
    return ledger


def run_grad_check(cfg: ExperimentConfig, out: Path, tolerance: float = 1e-4) -> dict:
    seed = int(cfg.seeds[0])
    result = gradient_check_suite(seed)
    result["tolerance"] = tolerance
    result["passed"] = result["max_rel_error"] < tolerance
    print(f"max relative error {result['max_rel_error']:.3e} (worst tensor {result['worst']})")
    write_json(out / "grad_check.json", result)
    return result


SUBCOMMANDS = {
    "synth": (run_synth, ()),
    "train": (run_train, ("dataset",)),
    "eval": (run_eval, ("dataset", "checkpoint")),
    "few-shot": (run_few_shot, ("target_dataset",)),
    "ablate": (run_ablate, ("dataset",)),
    "prompt-compare": (run_prompt_compare, ("dataset",)),
    "count-params": (run_count_params, ()),
    "grad-check": (run_grad_check, ()),
}
