"""GPT-2 style decoder-only transformer.

Parameter names follow the checkpoint layout: ``wte``, ``wpe``,
``h.{i}.ln1.{g,b}``, ``h.{i}.attn.qkv.{w,b}``, ``h.{i}.attn.proj.{w,b}``,
``h.{i}.ln2.{g,b}``, ``h.{i}.ffn.fc.{w,b}``, ``h.{i}.ffn.proj.{w,b}``,
``ln_f.{g,b}``. Linear weights are stored input-major (in, out), as in the
original GPT-2 ``Conv1D`` layers.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ConfigError, ContextOverflowError


@dataclass(frozen=True)
class BackboneConfig:
    n_layers: int = 2
    d_model: int = 64
    n_heads: int = 4
    context_len: int = 256
    vocab_size: int = 257
    ffn_mult: int = 4
    bidirectional_graph: bool = False
    layer_norm_eps: float = 1e-5

    def __post_init__(self):
        if self.d_model % self.n_heads:
            raise ConfigError(f"d_model {self.d_model} is not divisible by n_heads {self.n_heads}")
        if min(self.n_layers, self.d_model, self.n_heads, self.context_len, self.vocab_size) < 0:
            raise ConfigError("backbone dimensions must be non-negative")

    @classmethod
    def desk(cls) -> "BackboneConfig":
        return cls(n_layers=2, d_model=64, n_heads=4, context_len=256, vocab_size=257)

    @classmethod
    def reference(cls) -> "BackboneConfig":
        return cls(n_layers=3, d_model=768, n_heads=12, context_len=1024, vocab_size=50257)

    def to_dict(self) -> dict:
        return asdict(self)


class LayerNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-5):
        super().__init__()
        self.eps = eps
        self.g = nn.Parameter(torch.ones(dim))
        self.b = nn.Parameter(torch.zeros(dim))

    def forward(self, x):
        return F.layer_norm(x, (x.shape[-1],), self.g, self.b, self.eps)


class Linear(nn.Module):
    def __init__(self, d_in: int, d_out: int):
        super().__init__()
        self.w = nn.Parameter(torch.empty(d_in, d_out))
        self.b = nn.Parameter(torch.zeros(d_out))

    def forward(self, x):
        return x @ self.w + self.b


class SelfAttention(nn.Module):
    def __init__(self, d_model: int, n_heads: int):
        super().__init__()
        self.n_heads = n_heads
        self.qkv = Linear(d_model, 3 * d_model)
        self.proj = Linear(d_model, d_model)

    def forward(self, x, allowed: torch.Tensor, return_probs: bool = False):
        *lead, s, d = x.shape
        hd = d // self.n_heads
        q, k, v = self.qkv(x).split(d, dim=-1)
        q, k, v = (t.reshape(*lead, s, self.n_heads, hd).transpose(-2, -3) for t in (q, k, v))
        scores = (q @ k.transpose(-1, -2)) / math.sqrt(hd)
        scores = scores.masked_fill(~allowed, float("-inf"))
        probs = torch.softmax(scores, dim=-1)
        out = (probs @ v).transpose(-2, -3).reshape(*lead, s, d)
        out = self.proj(out)
        return (out, probs) if return_probs else (out, None)


class FeedForward(nn.Module):
    def __init__(self, d_model: int, mult: int = 4):
        super().__init__()
        self.fc = Linear(d_model, mult * d_model)
        self.proj = Linear(mult * d_model, d_model)

    def forward(self, x):
        return self.proj(F.gelu(self.fc(x), approximate="tanh"))


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.ln1 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.attn = SelfAttention(cfg.d_model, cfg.n_heads)
        self.ln2 = LayerNorm(cfg.d_model, cfg.layer_norm_eps)
        self.ffn = FeedForward(cfg.d_model, cfg.ffn_mult)

    def forward(self, x, allowed, return_probs=False):
        a, probs = self.attn(self.ln1(x), allowed, return_probs)
        x = x + a
        x = x + self.ffn(self.ln2(x))
        return x, probs


class GPT2Backbone(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        self.cfg = cfg
        self.wte = nn.Parameter(torch.empty(cfg.vocab_size, cfg.d_model))
        self.wpe = nn.Parameter(torch.empty(cfg.context_len, cfg.d_model))
        self.h = nn.ModuleList(Block(cfg) for _ in range(cfg.n_layers))
        self.ln_f = LayerNorm(cfg.d_model, cfg.layer_norm_eps)

    @torch.no_grad()
    def reset_parameters(self, generator=None):
        std = 0.02
        self.wte.normal_(0.0, std, generator=generator)
        self.wpe.normal_(0.0, 0.01, generator=generator)
        resid_std = std / math.sqrt(2 * max(self.cfg.n_layers, 1))
        for block in self.h:
            for ln in (block.ln1, block.ln2):
                ln.g.fill_(1.0)
                ln.b.zero_()
            block.attn.qkv.w.normal_(0.0, std, generator=generator)
            block.ffn.fc.w.normal_(0.0, std, generator=generator)
            block.attn.proj.w.normal_(0.0, resid_std, generator=generator)
            block.ffn.proj.w.normal_(0.0, resid_std, generator=generator)
            for lin in (block.attn.qkv, block.attn.proj, block.ffn.fc, block.ffn.proj):
                lin.b.zero_()
        self.ln_f.g.fill_(1.0)
        self.ln_f.b.zero_()

    def attention_mask(self, seq_len: int, graph_start: int | None = None, device=None) -> torch.Tensor:
        """Boolean (S, S) matrix; True where query row may attend to key column."""
        allowed = torch.ones(seq_len, seq_len, dtype=torch.bool, device=device).tril()
        if self.cfg.bidirectional_graph and graph_start is not None:
            allowed[graph_start:, graph_start:] = True
        return allowed

    def embed_ids(self, ids: torch.Tensor) -> torch.Tensor:
        return self.wte[ids]

    def forward(self, tokens: torch.Tensor, graph_start: int | None = None, return_attention: bool = False):
        """Map input embeddings (..., S, D) to the last hidden state (..., S, D)."""
        s = tokens.shape[-2]
        if s > self.cfg.context_len:
            raise ContextOverflowError(f"{s} tokens exceed the context length {self.cfg.context_len}")
        x = tokens + self.wpe[:s]
        allowed = self.attention_mask(s, graph_start, device=tokens.device)
        probs = []
        for block in self.h:
            x, p = block(x, allowed, return_attention)
            probs.append(p)
        x = self.ln_f(x)
        return (x, probs) if return_attention else x
