"""Linear encoder into the backbone width and residual two-layer decoder."""
from __future__ import annotations

import math

import torch
from torch import nn

from .errors import ContextOverflowError, WidthMismatchError


def _uniform_(w: torch.Tensor, fan_in: int, generator=None):
    bound = 1.0 / math.sqrt(fan_in) if fan_in else 0.0
    w.uniform_(-bound, bound, generator=generator)


class STGAdapter(nn.Module):
    """Encoder ``T_q = T_e W1 + b1`` and decoder ``((H W2 + b2) + T_e) W3 + b3``.

    Weights are stored input-major, i.e. ``W1`` is (token_width, D).
    ``with_encoder=False`` builds the decoder only (used when a different
    tokenizer supplies the backbone inputs).
    """

    def __init__(self, token_width: int, d_model: int, horizon: int, with_encoder: bool = True):
        super().__init__()
        self.token_width = token_width
        self.d_model = d_model
        self.horizon = horizon
        if with_encoder:
            self.W1 = nn.Parameter(torch.empty(token_width, d_model))
            self.b1 = nn.Parameter(torch.empty(d_model))
        else:
            self.W1 = self.b1 = None
        self.W2 = nn.Parameter(torch.empty(d_model, token_width))
        self.b2 = nn.Parameter(torch.empty(token_width))
        self.W3 = nn.Parameter(torch.empty(token_width, horizon))
        self.b3 = nn.Parameter(torch.empty(horizon))

    @torch.no_grad()
    def reset_parameters(self, generator=None):
        for w in (self.W1, self.W2, self.W3):
            if w is not None:
                _uniform_(w, w.shape[0], generator)
        for b in (self.b1, self.b2, self.b3):
            if b is not None:
                b.zero_()

    def encode(self, t_e: torch.Tensor) -> torch.Tensor:
        if t_e.shape[-1] != self.token_width:
            raise WidthMismatchError(f"token width {t_e.shape[-1]} != encoder input width {self.token_width}")
        return t_e @ self.W1 + self.b1

    def decode(self, h: torch.Tensor, t_e: torch.Tensor) -> torch.Tensor:
        """Forecast (..., N, P) from the last N rows of the hidden state ``h``."""
        n = t_e.shape[-2]
        if h.shape[-1] != self.d_model:
            raise WidthMismatchError(f"hidden width {h.shape[-1]} != {self.d_model}")
        if t_e.shape[-1] != self.token_width:
            raise WidthMismatchError(f"token width {t_e.shape[-1]} != {self.token_width}")
        if h.shape[-2] < n:
            raise WidthMismatchError(f"hidden state has {h.shape[-2]} rows, fewer than {n} graph tokens")
        h_graph = h[..., h.shape[-2] - n :, :]
        return ((h_graph @ self.W2 + self.b2) + t_e) @ self.W3 + self.b3


def combine(prompt_tokens: torch.Tensor, graph_tokens: torch.Tensor, context_len: int | None = None) -> torch.Tensor:
    """Prompt rows first, then graph rows."""
    if prompt_tokens.shape[-1] != graph_tokens.shape[-1]:
        raise WidthMismatchError(
            f"prompt width {prompt_tokens.shape[-1]} != graph token width {graph_tokens.shape[-1]}"
        )
    total = prompt_tokens.shape[-2] + graph_tokens.shape[-2]
    if context_len is not None and total > context_len:
        raise ContextOverflowError(f"{total} tokens exceed the context length {context_len}")
    if prompt_tokens.shape[-2] == 0:
        return graph_tokens
    return torch.cat([prompt_tokens.to(graph_tokens.dtype), graph_tokens], dim=-2)
