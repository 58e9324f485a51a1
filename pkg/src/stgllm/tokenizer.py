"""Node-as-token graph tokenizer with time-of-day / day-of-week embeddings."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
from torch import nn

from .errors import CalendarIndexError


class GraphTokens(NamedTuple):
    t_g: torch.Tensor  # (..., N, L*F)
    t_e: torch.Tensor  # (..., N, L*F + C1 + C2)


def flatten_window(x: torch.Tensor) -> torch.Tensor:
    """(..., L, N, F) -> (..., N, L*F); node ``i`` gets its own L*F history."""
    *lead, L, N, F = x.shape
    return x.movedim(-2, -3).reshape(*lead, N, L * F)


class STGTokenizer(nn.Module):
    """Appends a TD row and a DW row, selected by the window's last step, to every node token."""

    def __init__(self, steps_per_day: int, days_per_week: int = 7, td_dim: int = 64, dw_dim: int = 64):
        super().__init__()
        self.steps_per_day = steps_per_day
        self.days_per_week = days_per_week
        self.B_td = nn.Parameter(torch.empty(steps_per_day, td_dim))
        self.B_dw = nn.Parameter(torch.empty(days_per_week, dw_dim))

    @property
    def extra_width(self) -> int:
        return self.B_td.shape[1] + self.B_dw.shape[1]

    @torch.no_grad()
    def reset_parameters(self, generator: torch.Generator | None = None):
        for table in (self.B_td, self.B_dw):
            if table.numel():
                bound = 1.0 / math.sqrt(table.shape[1])
                table.uniform_(-bound, bound, generator=generator)

    def _check(self, tod: torch.Tensor, dow: torch.Tensor):
        if tod.numel() and (int(tod.min()) < 0 or int(tod.max()) >= self.steps_per_day):
            raise CalendarIndexError(f"tod_index outside [0, {self.steps_per_day})")
        if dow.numel() and (int(dow.min()) < 0 or int(dow.max()) >= self.days_per_week):
            raise CalendarIndexError(f"dow_index outside [0, {self.days_per_week})")

    def forward(self, x: torch.Tensor, tod, dow) -> GraphTokens:
        """``x`` is (B, L, N, F) or (L, N, F); ``tod``/``dow`` have the batch shape."""
        tod = torch.as_tensor(tod, dtype=torch.long)
        dow = torch.as_tensor(dow, dtype=torch.long)
        self._check(tod, dow)
        t_g = flatten_window(x)
        n = t_g.shape[-2]
        e_td = self.B_td[tod].unsqueeze(-2).expand(*tod.shape, n, self.B_td.shape[1])
        e_dw = self.B_dw[dow].unsqueeze(-2).expand(*dow.shape, n, self.B_dw.shape[1])
        return GraphTokens(t_g, torch.cat([t_g, e_td.to(t_g.dtype), e_dw.to(t_g.dtype)], dim=-1))


def tokenize(x, tod_index: int, dow_index: int, params: STGTokenizer) -> GraphTokens:
    """Tokenize a single (L, N, F) window."""
    x = torch.as_tensor(x, dtype=params.B_td.dtype)
    return params(x, tod_index, dow_index)
