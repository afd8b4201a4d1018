"""Token-sequence containers and preference datasets.

Responses are stored column-wise: a padded token matrix (EOS after the end),
per-row lengths and the prompt id each row answers. Single-record types exist
for the per-item APIs and for file IO.
"""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import ConfigError
from .numerics import EOS

log = logging.getLogger(__name__)

SOURCES = ("original", "adversarial", "rrm_augmented")


@dataclass(frozen=True)
class Prompt:
    id: int
    tokens: tuple


@dataclass(frozen=True)
class Response:
    tokens: tuple
    ended: bool = True

    def __len__(self):
        return len(self.tokens)


@dataclass
class ResponseBatch:
    prompt_ids: np.ndarray
    tokens: np.ndarray
    lengths: np.ndarray

    def __post_init__(self):
        self.prompt_ids = np.asarray(self.prompt_ids, dtype=np.int64)
        self.tokens = np.asarray(self.tokens, dtype=np.int64)
        self.lengths = np.asarray(self.lengths, dtype=np.int64)

    def __len__(self):
        return len(self.lengths)

    @property
    def max_len(self):
        return self.tokens.shape[1]

    def take(self, idx) -> "ResponseBatch":
        return ResponseBatch(self.prompt_ids[idx], self.tokens[idx], self.lengths[idx])

    def response(self, i) -> Response:
        n = int(self.lengths[i])
        return Response(tuple(int(t) for t in self.tokens[i, :n]), ended=n < self.max_len)

    def keys(self):
        """Hashable identity of each (prompt, response) row."""
        return [(int(p), self.tokens[i, :n].tobytes()) for i, (p, n) in enumerate(zip(self.prompt_ids, self.lengths))]

    @classmethod
    def concat(cls, batches) -> "ResponseBatch":
        batches = list(batches)
        return cls(np.concatenate([b.prompt_ids for b in batches]),
                   np.concatenate([b.tokens for b in batches]),
                   np.concatenate([b.lengths for b in batches]))

    @classmethod
    def from_responses(cls, prompt_ids, responses, max_len) -> "ResponseBatch":
        n = len(responses)
        tok = np.full((n, max_len), EOS, dtype=np.int64)
        lens = np.zeros(n, dtype=np.int64)
        for i, r in enumerate(responses):
            if len(r.tokens) > max_len:
                raise ConfigError(f"response longer than max_len={max_len}")
            tok[i, :len(r.tokens)] = r.tokens
            lens[i] = len(r.tokens)
        return cls(np.asarray(prompt_ids, dtype=np.int64), tok, lens)

    @classmethod
    def empty(cls, max_len) -> "ResponseBatch":
        return cls(np.zeros(0, np.int64), np.zeros((0, max_len), np.int64), np.zeros(0, np.int64))


def response_lists(batch: ResponseBatch):
    return [batch.tokens[i, :n].tolist() for i, n in enumerate(batch.lengths)]


@dataclass
class PreferenceDataset:
    """Column-wise (prompt, chosen, rejected, source) records.

    ``extra`` holds optional float columns (attack scores, round index);
    concatenation fills columns a part lacks with NaN.
    """

    chosen: ResponseBatch
    rejected: ResponseBatch
    source: np.ndarray
    gold_chosen: np.ndarray = None
    gold_rejected: np.ndarray = None
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        n = len(self.chosen)
        if len(self.rejected) != n or not np.array_equal(self.chosen.prompt_ids, self.rejected.prompt_ids):
            raise ConfigError("chosen and rejected must align on prompt ids")
        self.source = np.asarray(self.source, dtype=object)
        if self.gold_chosen is None:
            self.gold_chosen = np.full(n, np.nan)
        if self.gold_rejected is None:
            self.gold_rejected = np.full(n, np.nan)
        self.gold_chosen = np.asarray(self.gold_chosen, dtype=np.float64)
        self.gold_rejected = np.asarray(self.gold_rejected, dtype=np.float64)
        bad = set(self.source.tolist()) - set(SOURCES)
        if bad:
            raise ConfigError(f"unknown source tags {sorted(bad)}")

    def __len__(self):
        return len(self.chosen)

    @property
    def prompt_ids(self):
        return self.chosen.prompt_ids

    def take(self, idx) -> "PreferenceDataset":
        return PreferenceDataset(self.chosen.take(idx), self.rejected.take(idx), self.source[idx],
                                 self.gold_chosen[idx], self.gold_rejected[idx],
                                 {k: np.asarray(v)[idx] for k, v in self.extra.items()})

    @classmethod
    def concat(cls, parts) -> "PreferenceDataset":
        parts = [p for p in parts if len(p)]
        if not parts:
            raise ConfigError("nothing to concatenate")
        keys = sorted(set().union(*[set(p.extra) for p in parts]))

        def column(p, k):
            return np.asarray(p.extra[k], dtype=np.float64) if k in p.extra else np.full(len(p), np.nan)

        return cls(ResponseBatch.concat(p.chosen for p in parts),
                   ResponseBatch.concat(p.rejected for p in parts),
                   np.concatenate([p.source for p in parts]),
                   np.concatenate([p.gold_chosen for p in parts]),
                   np.concatenate([p.gold_rejected for p in parts]),
                   {k: np.concatenate([column(p, k) for p in parts]) for k in keys})

    def count(self, source) -> int:
        return int(np.sum(self.source == source))


# ---------------------------------------------------------------------------
# line-delimited files
# ---------------------------------------------------------------------------
#
# One JSON object per line:
#   {"prompt_id": int, "chosen_tokens": [int], "rejected_tokens": [int],
#    "source": "original"|"adversarial"|"rrm_augmented",
#    "gold_chosen": float|null, "gold_rejected": float|null}
# Adversarial datasets add "r1", "r2", "u", "z".

def _num(x):
    x = float(x)
    return None if np.isnan(x) else x


def write_jsonl(path, rows):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "w") as fh:
        for row in rows:
            fh.write(json.dumps(row, sort_keys=True) + "\n")
    tmp.replace(path)


def read_jsonl(path):
    with open(path) as fh:
        return [json.loads(line) for line in fh if line.strip()]


def save_dataset(path, ds: PreferenceDataset):
    ch, rj = response_lists(ds.chosen), response_lists(ds.rejected)
    rows = []
    for i in range(len(ds)):
        row = {"prompt_id": int(ds.prompt_ids[i]), "chosen_tokens": ch[i], "rejected_tokens": rj[i],
               "source": str(ds.source[i]), "gold_chosen": _num(ds.gold_chosen[i]),
               "gold_rejected": _num(ds.gold_rejected[i])}
        for k, v in ds.extra.items():
            row[k] = _num(v[i])
        rows.append(row)
    write_jsonl(path, rows)


def load_dataset(path, max_len) -> PreferenceDataset:
    rows = read_jsonl(path)
    pids = [r["prompt_id"] for r in rows]
    chosen = ResponseBatch.from_responses(pids, [Response(tuple(r["chosen_tokens"])) for r in rows], max_len)
    rejected = ResponseBatch.from_responses(pids, [Response(tuple(r["rejected_tokens"])) for r in rows], max_len)
    nan = float("nan")
    gc = [nan if r.get("gold_chosen") is None else r["gold_chosen"] for r in rows]
    gr = [nan if r.get("gold_rejected") is None else r["gold_rejected"] for r in rows]
    extra_keys = sorted(set().union(*[set(r) for r in rows]) - {
        "prompt_id", "chosen_tokens", "rejected_tokens", "source", "gold_chosen", "gold_rejected"}) if rows else []
    extra = {k: np.array([nan if r.get(k) is None else r[k] for r in rows], dtype=np.float64) for k in extra_keys}
    return PreferenceDataset(chosen, rejected, np.array([r["source"] for r in rows], dtype=object), gc, gr, extra)
