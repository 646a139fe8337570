"""Discretizing entropy-model PMFs into range-coder frequency tables."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..entropy import EntropyModel

PRECISION = 16
TOTAL = 1 << PRECISION


@dataclass(frozen=True)
class FrequencyTable:
    freqs: np.ndarray  # int64 (S,), each >= 1
    cum: np.ndarray  # int64 (S + 1,), cum[0] = 0, cum[-1] = TOTAL

    def __post_init__(self):
        if self.freqs.min() < 1 or int(self.cum[-1]) != TOTAL:
            raise ValueError("frequency table must have counts >= 1 summing to 2**16")

    @property
    def alphabet_size(self) -> int:
        return self.freqs.size

    def probabilities(self) -> np.ndarray:
        return self.freqs / TOTAL


def table_from_pmf(p: np.ndarray) -> FrequencyTable:
    """Counts proportional to ``p``, each at least 1, summing exactly to 2**16.

    Every symbol first gets one count; the remaining ``2**16 - S`` counts are
    shared in proportion to ``p`` by the largest-remainder method, breaking
    ties toward the smaller symbol. A pmf with no mass yields the uniform table.
    """
    p = np.asarray(p, dtype=np.float64)
    s = p.size
    if s < 1 or s > TOTAL:
        raise ValueError(f"alphabet size must be in [1, {TOTAL}], got {s}")
    if not np.all(np.isfinite(p)) or p.min() < 0:
        raise ValueError("pmf must be finite and nonnegative")
    mass = p.sum()
    # no mass at all: every symbol equally likely
    p = p / mass if mass > 0 else np.full(s, 1.0 / s)
    spare = TOTAL - s
    raw = p * spare
    base = np.floor(raw)
    counts = base.astype(np.int64) + 1
    leftover = spare - int(base.sum())
    if leftover:
        order = np.lexsort((np.arange(s), -(raw - base)))
        counts[order[:leftover]] += 1
    cum = np.zeros(s + 1, dtype=np.int64)
    np.cumsum(counts, out=cum[1:])
    return FrequencyTable(counts, cum)


def channel_pmfs(model: EntropyModel, alphabet_size: int, min_q: int) -> np.ndarray:
    """PMF of every channel at the integers ``min_q .. min_q + S - 1``, shape (channels, S)."""
    m = model if model.log_weights[0].dtype == torch.float64 else model.clone(torch.float64)
    ks = torch.arange(alphabet_size, dtype=torch.float64) + min_q
    with torch.no_grad():
        y = ks.reshape(1, 1, -1).expand(m.channels, 1, -1)
        return m._pmf(y).squeeze(1).numpy()


def build_freq_table(model: EntropyModel, channel: int, alphabet_size: int, min_q: int) -> FrequencyTable:
    return table_from_pmf(channel_pmfs(model, alphabet_size, min_q)[channel])


def build_channel_tables(model: EntropyModel, alphabet_size: int, min_q: int) -> list[FrequencyTable]:
    return [table_from_pmf(p) for p in channel_pmfs(model, alphabet_size, min_q)]
