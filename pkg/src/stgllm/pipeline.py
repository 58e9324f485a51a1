"""The composed forecaster: tokenize -> encode -> [prompt ++] -> backbone -> decode.

The edge list of a dataset is never consumed here; node relationships are
left to the backbone's attention over node tokens.
"""
from __future__ import annotations

import contextlib
from dataclasses import asdict, dataclass, field, replace

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .adapter import STGAdapter, combine
from .backbone import BackboneConfig, GPT2Backbone, Linear
from .data import Scaler, WindowSample
from .errors import ConfigError, ContextOverflowError, StageError, VariantError
from .prompt import PromptTable, default_template, make_vocab
from .tokenizer import GraphTokens, STGTokenizer, flatten_window

VARIANTS = ("full", "no-llm", "no-pe", "no-tokenizer", "no-adapter")


@dataclass(frozen=True)
class ModelConfig:
    input_len: int = 12
    horizon: int = 12
    num_features: int = 1
    steps_per_day: int = 288
    days_per_week: int = 7
    td_dim: int = 64
    dw_dim: int = 64
    interval_minutes: int = 5
    use_temporal_embeddings: bool = True
    use_prompt: bool = False
    prompt_template: str | None = None
    vocab: object = None  # None -> byte-level; list of strings or path -> external
    variant: str = "full"
    patch_len: int = 4
    patch_stride: int = 2
    backbone: BackboneConfig = field(default_factory=BackboneConfig.desk)

    def __post_init__(self):
        if isinstance(self.backbone, dict):
            object.__setattr__(self, "backbone", BackboneConfig(**self.backbone))
        if self.variant not in VARIANTS:
            raise VariantError(f"unknown variant {self.variant!r}; expected one of {VARIANTS}")
        if min(self.input_len, self.horizon, self.num_features, self.steps_per_day, self.days_per_week) < 1:
            raise ConfigError("input_len, horizon, num_features and calendar sizes must be positive")
        if self.variant == "no-tokenizer" and self.patch_len > self.input_len:
            raise ConfigError("patch_len exceeds input_len")
        if self.variant == "no-adapter" and self.token_width > self.backbone.d_model:
            raise VariantError(
                f"no-adapter pads tokens of width {self.token_width} up to d_model "
                f"{self.backbone.d_model}; the token is wider"
            )
        if self.variant == "no-llm" and self.use_prompt:
            raise VariantError("the no-llm variant has no token embedding table for prompts")

    @classmethod
    def desk(cls, **kw) -> "ModelConfig":
        kw.setdefault("td_dim", 16)
        kw.setdefault("dw_dim", 16)
        return cls(backbone=BackboneConfig.desk(), **kw)

    @classmethod
    def reference(cls, **kw) -> "ModelConfig":
        return cls(backbone=BackboneConfig.reference(), **kw)

    @property
    def series_width(self) -> int:
        return self.input_len * self.num_features

    @property
    def token_width(self) -> int:
        if self.use_temporal_embeddings:
            return self.series_width + self.td_dim + self.dw_dim
        return self.series_width

    @property
    def n_patches(self) -> int:
        return (self.input_len - self.patch_len) // self.patch_stride + 1

    def tokens_per_node(self) -> int:
        return self.n_patches if self.variant == "no-tokenizer" else 1

    def replace(self, **kw) -> "ModelConfig":
        return replace(self, **kw)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["backbone"] = self.backbone.to_dict()
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        d = dict(d)
        d["backbone"] = BackboneConfig(**d["backbone"])
        return cls(**d)


def _is_layer_norm(name: str) -> bool:
    parts = name.split(".")
    return any(p in ("ln1", "ln2", "ln_f") for p in parts)


def is_trainable_name(name: str, variant: str) -> bool:
    """Freeze regime: everything outside the backbone trains; inside it only wpe and layer norms."""
    if not name.startswith("backbone."):
        return True
    if name == "backbone.wpe":
        return variant != "no-pe"
    return _is_layer_norm(name)


class ForecastModel(nn.Module):
    def __init__(self, config: ModelConfig, scaler: Scaler | None = None, seed: int = 0, device=None):
        super().__init__()
        self.config = config
        self.scaler = scaler or Scaler(0.0, 1.0)
        variant = config.variant
        bcfg = config.backbone
        factory = torch.device(device) if device is not None else contextlib.nullcontext()
        with factory:
            c1 = config.td_dim if config.use_temporal_embeddings else 0
            c2 = config.dw_dim if config.use_temporal_embeddings else 0
            self.tokenizer = None
            self.patcher = None
            self.head = None
            if variant == "no-tokenizer":
                self.patcher = Linear(config.patch_len * config.num_features, bcfg.d_model)
                self.adapter = STGAdapter(config.series_width, bcfg.d_model, config.horizon, with_encoder=False)
            else:
                self.tokenizer = STGTokenizer(config.steps_per_day, config.days_per_week, c1, c2)
                if variant == "no-adapter":
                    self.adapter = None
                    self.head = Linear(bcfg.d_model, config.horizon)
                else:
                    self.adapter = STGAdapter(config.token_width, bcfg.d_model, config.horizon)
            self.backbone = None if variant == "no-llm" else GPT2Backbone(bcfg)

        self.vocab = make_vocab(config.vocab) if config.use_prompt else None
        if self.vocab is not None and self.vocab.vocab_size > bcfg.vocab_size:
            raise ConfigError(f"prompt vocabulary ({self.vocab.vocab_size}) exceeds wte rows ({bcfg.vocab_size})")
        self._prompt_tables: dict[int, PromptTable] = {}
        if next(self.parameters()).device.type != "meta":  # meta tensors have no values to draw
            self.reset_parameters(seed)
        for name, p in self.named_parameters():
            p.requires_grad_(is_trainable_name(name, variant))

    # -- parameters -------------------------------------------------------
    @torch.no_grad()
    def reset_parameters(self, seed: int = 0):
        gen = torch.Generator().manual_seed(seed)
        if self.tokenizer is not None:
            self.tokenizer.reset_parameters(gen)
        if self.adapter is not None:
            self.adapter.reset_parameters(gen)
        for lin in (self.patcher, self.head):
            if lin is not None:
                bound = 1.0 / np.sqrt(lin.w.shape[0])
                lin.w.uniform_(-bound, bound, generator=gen)
                lin.b.zero_()
        if self.backbone is not None:
            self.backbone.reset_parameters(gen)

    def trainable_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if p.requires_grad]

    def frozen_names(self) -> list[str]:
        return [n for n, p in self.named_parameters() if not p.requires_grad]

    # -- prompt -----------------------------------------------------------
    def set_use_prompt(self, enabled: bool):
        """Toggle the prompt pathway; parameters are untouched (prompts only read ``wte``)."""
        if enabled and self.backbone is None:
            raise VariantError("the no-llm variant has no token embedding table for prompts")
        self.config = self.config.replace(use_prompt=enabled)
        if enabled and self.vocab is None:
            self.vocab = make_vocab(self.config.vocab)
        return self

    def prompt_table(self, n_nodes: int) -> PromptTable:
        table = self._prompt_tables.get(n_nodes)
        if table is None:
            cfg = self.config
            table = PromptTable(
                cfg.prompt_template or default_template(cfg.interval_minutes),
                self.vocab,
                n_nodes=n_nodes,
                input_len=cfg.input_len,
                horizon=cfg.horizon,
                interval_minutes=cfg.interval_minutes,
                steps_per_day=cfg.steps_per_day,
            )
            self._prompt_tables[n_nodes] = table
        return table

    def prompt_tokens(self, tod, dow, n_nodes: int) -> torch.Tensor:
        ids = self.prompt_table(n_nodes).lookup(tod, dow)
        return self.backbone.embed_ids(ids)

    def sequence_length(self, n_nodes: int) -> int:
        m = self.prompt_table(n_nodes).length if self.config.use_prompt else 0
        return m + n_nodes * self.config.tokens_per_node()

    # -- forward ----------------------------------------------------------
    def normalize(self, x: torch.Tensor) -> torch.Tensor:
        first = (x[..., :1] - self.scaler.mean) / self.scaler.std
        return torch.cat([first, x[..., 1:]], dim=-1) if x.shape[-1] > 1 else first

    def denormalize(self, y: torch.Tensor) -> torch.Tensor:
        return y * self.scaler.std + self.scaler.mean

    def forward_normalized(self, x, tod, dow, return_tokens: bool = False, _stage=None):
        """``x`` (B, L, N, F) already normalized -> (B, N, P) in normalized units."""
        stage = _stage or (lambda name: contextlib.nullcontext())
        cfg = self.config
        n = x.shape[-2]
        tod = torch.as_tensor(tod, dtype=torch.long)
        dow = torch.as_tensor(dow, dtype=torch.long)

        with stage("tokenize"):
            if self.patcher is not None:
                series = x.movedim(-2, -3)  # (B, N, L, F)
                patches = series.unfold(-2, cfg.patch_len, cfg.patch_stride)  # (B, N, np, F, p)
                patches = patches.transpose(-1, -2).reshape(*series.shape[:-2], cfg.n_patches, -1)
                tokens = GraphTokens(flatten_window(x), None)
            else:
                tokens = self.tokenizer(x, tod, dow)
        with stage("encode"):
            if self.patcher is not None:
                q = self.patcher(patches).reshape(*patches.shape[:-3], n * cfg.n_patches, -1)
            elif self.adapter is None:
                q = F.pad(tokens.t_e, (0, cfg.backbone.d_model - cfg.token_width))
            else:
                q = self.adapter.encode(tokens.t_e)
        with stage("prompt"):
            if cfg.use_prompt:
                p = self.prompt_tokens(tod, dow, n)
                if p.dim() < q.dim():
                    p = p.expand(*q.shape[:-2], *p.shape[-2:])
            else:
                p = q.new_zeros((*q.shape[:-2], 0, q.shape[-1]))
            limit = self.backbone.cfg.context_len if self.backbone is not None else None
            seq = combine(p, q, limit)
        with stage("backbone"):
            m = seq.shape[-2] - q.shape[-2]
            h = seq if self.backbone is None else self.backbone(seq, graph_start=m)
        with stage("decode"):
            if self.patcher is not None:
                hg = h[..., m:, :].reshape(*h.shape[:-2], n, cfg.n_patches, -1).mean(dim=-2)
                out = self.adapter.decode(hg, tokens.t_g)
            elif self.adapter is None:
                out = self.head(h[..., m:, :])
            else:
                out = self.adapter.decode(h, tokens.t_e)
        if return_tokens:
            return out, {"tokens": tokens, "encoded": q, "combined": seq, "hidden": h, "prompt_len": m}
        return out

    def forward(self, x, tod, dow):
        """Raw-unit window(s) (B, L, N, F) -> de-normalized forecast (B, N, P)."""
        x = torch.as_tensor(x, dtype=self.dtype)
        return self.denormalize(self.forward_normalized(self.normalize(x), tod, dow))

    @property
    def dtype(self) -> torch.dtype:
        return next(self.parameters()).dtype


def _tagging_stage(name):
    @contextlib.contextmanager
    def cm():
        try:
            yield
        except StageError:
            raise
        except Exception as exc:
            raise StageError(name, exc) from exc

    return cm()


@torch.no_grad()
def predict(model: ForecastModel, window: WindowSample) -> np.ndarray:
    """De-normalized (N, P) forecast for one window; errors carry the failing stage."""
    with _tagging_stage("normalize"):
        x = model.normalize(torch.as_tensor(np.asarray(window.x), dtype=model.dtype))
    out = model.forward_normalized(x, window.tod_index, window.dow_index, _stage=_tagging_stage)
    with _tagging_stage("denormalize"):
        return model.denormalize(out).cpu().numpy()


@torch.no_grad()
def predict_batch(model: ForecastModel, windows, batch_size: int = 256) -> np.ndarray:
    """Forecasts (W, N, P) for a ``WindowSet``."""
    was_training = model.training
    model.eval()
    outs = []
    for lo in range(0, len(windows), batch_size):
        x, _, tod, dow = windows.arrays(np.arange(lo, min(lo + batch_size, len(windows))))
        outs.append(model(torch.from_numpy(x), torch.from_numpy(tod), torch.from_numpy(dow)).cpu().numpy())
    model.train(was_training)
    if not outs:
        return np.zeros((0, 0, model.config.horizon))
    return np.concatenate(outs, axis=0)


def check_fits_context(model: ForecastModel, n_nodes: int):
    if model.backbone is None:
        return
    total = model.sequence_length(n_nodes)
    if total > model.backbone.cfg.context_len:
        raise ContextOverflowError(
            f"{total} tokens (prompt + graph) exceed the context length {model.backbone.cfg.context_len}"
        )
