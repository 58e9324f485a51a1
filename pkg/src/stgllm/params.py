"""Parameter ledger and the named-tensor checkpoint archive.

Archive layout (a directory)::

    index.json   {"config": {...}, "<tensor name>": {"dtype": "f32", "shape": [...],
                                                    "byte_offset": int, "byte_len": int}, ...}
    tensors.bin  little-endian row-major float32 payloads, concatenated

Backbone tensors are stored without the ``backbone.`` module prefix
(``wte``, ``wpe``, ``h.0.ln1.g``, ..., ``ln_f.b``); tokenizer, adapter and
variant tensors keep theirs (``tokenizer.B_td``, ``adapter.W1``, ...).
"""
from __future__ import annotations

import json
from collections import OrderedDict
from pathlib import Path

import numpy as np
import torch

from .data import Scaler
from .errors import CheckpointError, MissingTensorError
from .pipeline import ForecastModel, ModelConfig

GROUPS = (
    ("stg_tokenizer", "STG tokenizer"),
    ("stg_adapter", "STG adapter"),
    ("patch_tokenizer", "patch tokenizer"),
    ("output_head", "output head"),
    ("position_embeddings", "position embeddings"),
    ("layer_norm", "layer norm"),
    ("token_embeddings", "token embeddings"),
    ("attention", "attention"),
    ("feed_forward", "feed-forward"),
)
_MODULE_PREFIXES = ("tokenizer.", "adapter.", "patcher.", "head.")


def parameter_group(name: str) -> str:
    if name.startswith("tokenizer."):
        return "stg_tokenizer"
    if name.startswith("adapter."):
        return "stg_adapter"
    if name.startswith("patcher."):
        return "patch_tokenizer"
    if name.startswith("head."):
        return "output_head"
    short = name.removeprefix("backbone.")
    if short == "wpe":
        return "position_embeddings"
    if short == "wte":
        return "token_embeddings"
    parts = short.split(".")
    if any(p in ("ln1", "ln2", "ln_f") for p in parts):
        return "layer_norm"
    if "attn" in parts:
        return "attention"
    if "ffn" in parts:
        return "feed_forward"
    raise KeyError(f"parameter {name!r} belongs to no group")


def count_parameters(model: ForecastModel) -> dict:
    """Exact per-group counts plus trainable/frozen totals.

    A group is reported trainable only if every tensor in it is trainable.
    """
    groups: dict[str, dict] = OrderedDict()
    trainable = frozen = 0
    for name, p in model.named_parameters():
        g = parameter_group(name)
        entry = groups.setdefault(g, {"count": 0, "trainable": True, "tensors": 0})
        entry["count"] += p.numel()
        entry["tensors"] += 1
        entry["trainable"] = entry["trainable"] and p.requires_grad
        if p.requires_grad:
            trainable += p.numel()
        else:
            frozen += p.numel()
    total = trainable + frozen
    ordered = OrderedDict((k, groups[k]) for k, _ in GROUPS if k in groups)
    for entry in ordered.values():
        entry["ratio_percent"] = 100.0 * entry["count"] / total if total else 0.0
    return {
        "groups": ordered,
        "trainable": trainable,
        "frozen": frozen,
        "total": total,
        "trainable_percent": 100.0 * trainable / total if total else 0.0,
    }


def build_for_accounting(config: ModelConfig) -> ForecastModel:
    """Instantiate on the meta device: shapes only, no storage."""
    return ForecastModel(config, device="meta")


def format_ledger(ledger: dict) -> str:
    lines = [f"{'group':<22}{'count':>14}  {'trainable':<9}{'ratio(%)':>9}"]
    labels = dict(GROUPS)
    for key, entry in ledger["groups"].items():
        lines.append(
            f"{labels[key]:<22}{entry['count']:>14,}  {'yes' if entry['trainable'] else 'no':<9}"
            f"{entry['ratio_percent']:>9.2f}"
        )
    lines.append(f"{'trainable total':<22}{ledger['trainable']:>14,}  {'':<9}{ledger['trainable_percent']:>9.2f}")
    lines.append(f"{'grand total':<22}{ledger['total']:>14,}")
    return "\n".join(lines)


# -- checkpoint archive ------------------------------------------------------

def archive_name(module_name: str) -> str:
    return module_name.removeprefix("backbone.")


def module_name(archive_key: str) -> str:
    if archive_key.startswith(_MODULE_PREFIXES):
        return archive_key
    return "backbone." + archive_key


def write_archive(tensors: "OrderedDict[str, np.ndarray]", config: dict, path) -> Path:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    index: dict = {"config": config}
    offset = 0
    with open(path / "tensors.bin", "wb") as fh:
        for name, arr in tensors.items():
            if name == "config":
                raise CheckpointError("'config' is reserved in index.json")
            blob = np.ascontiguousarray(arr, dtype="<f4").tobytes()
            fh.write(blob)
            index[name] = {"dtype": "f32", "shape": list(arr.shape), "byte_offset": offset, "byte_len": len(blob)}
            offset += len(blob)
    (path / "index.json").write_text(json.dumps(index, indent=1))
    return path


def read_archive(path) -> tuple["OrderedDict[str, np.ndarray]", dict]:
    path = Path(path)
    try:
        index = json.loads((path / "index.json").read_text())
        payload = (path / "tensors.bin").read_bytes()
    except FileNotFoundError as exc:
        raise CheckpointError(f"incomplete checkpoint archive at {path}: {exc.filename} missing") from exc
    config = index.pop("config", None)
    if config is None:
        raise CheckpointError("index.json has no 'config' entry")
    tensors = OrderedDict()
    for name, entry in index.items():
        if entry.get("dtype") != "f32":
            raise CheckpointError(f"{name}: unsupported dtype {entry.get('dtype')!r}")
        shape = tuple(int(s) for s in entry["shape"])
        lo, n = int(entry["byte_offset"]), int(entry["byte_len"])
        if n != 4 * int(np.prod(shape, dtype=np.int64)):
            raise CheckpointError(f"{name}: byte_len {n} does not match shape {shape}")
        if lo < 0 or lo + n > len(payload):
            raise CheckpointError(f"{name}: payload truncated (needs bytes {lo}..{lo + n}, file has {len(payload)})")
        tensors[name] = np.frombuffer(payload, dtype="<f4", count=n // 4, offset=lo).reshape(shape).copy()
    return tensors, config


def save_checkpoint(model: ForecastModel, path, extra: dict | None = None) -> Path:
    config = {
        "model": model.config.to_dict(),
        "scaler": {"mean": model.scaler.mean, "std": model.scaler.std},
        "trainable": model.trainable_names(),
    }
    if extra:
        config["extra"] = extra
    tensors = OrderedDict(
        (archive_name(n), p.detach().cpu().numpy()) for n, p in model.named_parameters()
    )
    return write_archive(tensors, config, path)


def load_state(model: ForecastModel, tensors: dict):
    """Copy archive tensors into ``model``; names and shapes must match exactly."""
    expected = OrderedDict((archive_name(n), p) for n, p in model.named_parameters())
    for name in expected:
        if name not in tensors:
            raise MissingTensorError(name)
    unknown = sorted(set(tensors) - set(expected))
    if unknown:
        raise CheckpointError(f"checkpoint has tensors the model does not: {unknown}")
    with torch.no_grad():
        for name, p in expected.items():
            arr = tensors[name]
            if tuple(arr.shape) != tuple(p.shape):
                raise CheckpointError(f"{name}: shape {tuple(arr.shape)} != expected {tuple(p.shape)}")
            p.copy_(torch.from_numpy(np.asarray(arr)))


def load_checkpoint(path, **overrides) -> ForecastModel:
    tensors, config = read_archive(path)
    model_cfg = config["model"]
    if overrides:
        model_cfg = {**model_cfg, **overrides}
    model = ForecastModel(ModelConfig.from_dict(model_cfg), Scaler(**config["scaler"]))
    load_state(model, tensors)
    return model
