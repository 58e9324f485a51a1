"""Text prompts: rendering calendar templates and embedding them through ``wte``."""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .data import MINUTES_PER_DAY, WEEKDAYS, SeriesDataset, WindowSample
from .errors import ContextOverflowError, STGError

CLOCK_TEMPLATE = (
    "Historical traffic values for {n_nodes} nodes from {start} to {end} on {weekday}. "
    "Predict the traffic values for the next {horizon}."
)
DAILY_TEMPLATE = (
    "Historical daily values for {n_nodes} nodes from {start} to {end}. "
    "Predict the values for the next {horizon}."
)

_NUMBER_WORDS = {1: "one", 2: "two", 3: "three", 4: "four", 5: "five", 6: "six"}


class ByteVocab:
    """256 byte tokens plus one padding token (id 256)."""

    mode = "byte"
    vocab_size = 257
    pad_id = 256

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids) -> str:
        return bytes(int(i) for i in ids if i != self.pad_id).decode("utf-8", errors="replace")

    def to_json(self):
        return None


@dataclass
class ExternalVocab:
    """Vocabulary read from a JSON list of token strings; greedy longest-match encoding.

    The last id is reserved for padding unless the list already provides ``pad_token``.
    """

    tokens: list[str]
    pad_token: str = "<|pad|>"
    mode: str = field(default="external", init=False)

    def __post_init__(self):
        if self.pad_token not in self.tokens:
            self.tokens = list(self.tokens) + [self.pad_token]
        self._ids = {t: i for i, t in enumerate(self.tokens)}
        self._max_len = max(len(t) for t in self.tokens)

    @classmethod
    def from_file(cls, path) -> "ExternalVocab":
        tokens = json.loads(Path(path).read_text(encoding="utf-8"))
        if not isinstance(tokens, list) or not all(isinstance(t, str) for t in tokens):
            raise STGError(f"{path}: vocab file must be a JSON list of strings")
        return cls(tokens)

    @property
    def vocab_size(self) -> int:
        return len(self.tokens)

    @property
    def pad_id(self) -> int:
        return self._ids[self.pad_token]

    def encode(self, text: str) -> list[int]:
        ids, i = [], 0
        while i < len(text):
            for j in range(min(len(text), i + self._max_len), i, -1):
                tid = self._ids.get(text[i:j])
                if tid is not None and tid != self.pad_id:
                    ids.append(tid)
                    i = j
                    break
            else:
                raise STGError(f"character {text[i]!r} at offset {i} is not covered by the vocabulary")
        return ids

    def decode(self, ids) -> str:
        return "".join(self.tokens[int(i)] for i in ids if i != self.pad_id)

    def to_json(self):
        return self.tokens


def make_vocab(spec) -> ByteVocab | ExternalVocab:
    if spec is None or spec == "byte":
        return ByteVocab()
    if isinstance(spec, list):
        return ExternalVocab(spec)
    return ExternalVocab.from_file(spec)


def encode_prompt(text: str, vocab, wte: torch.Tensor, max_tokens: int | None = None) -> torch.Tensor:
    """Embed ``text`` as an (M, D) matrix of ``wte`` rows."""
    ids = vocab.encode(text)
    if max_tokens is not None and len(ids) > max_tokens:
        raise ContextOverflowError(f"prompt has {len(ids)} tokens, only {max_tokens} fit")
    return wte[torch.tensor(ids, dtype=torch.long)] if ids else wte.new_zeros((0, wte.shape[1]))


def _clock(tod: int, interval_minutes: int) -> str:
    minutes = (tod * interval_minutes) % MINUTES_PER_DAY
    return f"{minutes // 60:02d}:{minutes % 60:02d}"


def _span(minutes: int) -> str:
    for unit, size in (("day", MINUTES_PER_DAY), ("hour", 60), ("minute", 1)):
        if minutes % size == 0:
            k = minutes // size
            if k == 1:
                return f"one {unit}"
            return f"{_NUMBER_WORDS.get(k, k)} {unit}s"
    raise AssertionError("unreachable")


def default_template(interval_minutes: int) -> str:
    return DAILY_TEMPLATE if interval_minutes >= MINUTES_PER_DAY else CLOCK_TEMPLATE


def render_prompt_fields(
    tod: int, dow: int, *, n_nodes: int, input_len: int, horizon: int, interval_minutes: int
) -> dict:
    if interval_minutes >= MINUTES_PER_DAY:
        days_back = (input_len - 1) * interval_minutes // MINUTES_PER_DAY
        start, end = WEEKDAYS[(dow - days_back) % 7], WEEKDAYS[dow]
    else:
        start = _clock(tod - (input_len - 1), interval_minutes)
        end = _clock(tod, interval_minutes)
    return {
        "n_nodes": n_nodes,
        "start": start,
        "end": end,
        "weekday": WEEKDAYS[dow],
        "horizon": _span(horizon * interval_minutes),
    }


def render_time_prompt(window: WindowSample, ds: SeriesDataset, template: str | None = None) -> str:
    template = template or default_template(ds.interval_minutes)
    fields = render_prompt_fields(
        window.tod_index,
        window.dow_index,
        n_nodes=ds.num_nodes,
        input_len=window.x.shape[0],
        horizon=window.y.shape[0],
        interval_minutes=ds.interval_minutes,
    )
    return template.format(**fields)


class PromptTable:
    """Token ids for every (time-of-day, day-of-week) slot, right-padded to one length.

    A fixed length keeps the graph tokens at the same positions for every
    window, so batched and single-window forecasts agree.
    """

    def __init__(self, template: str, vocab, *, n_nodes, input_len, horizon, interval_minutes, steps_per_day):
        rows = {}
        for dow in range(7):
            for tod in range(steps_per_day):
                text = template.format(
                    **render_prompt_fields(
                        tod, dow, n_nodes=n_nodes, input_len=input_len,
                        horizon=horizon, interval_minutes=interval_minutes,
                    )
                )
                rows[tod, dow] = vocab.encode(text)
        self.length = max(len(r) for r in rows.values())
        ids = np.full((steps_per_day, 7, self.length), vocab.pad_id, dtype=np.int64)
        for (tod, dow), r in rows.items():
            ids[tod, dow, : len(r)] = r
        self.ids = torch.from_numpy(ids)

    def lookup(self, tod, dow) -> torch.Tensor:
        return self.ids[torch.as_tensor(tod, dtype=torch.long), torch.as_tensor(dow, dtype=torch.long)]
