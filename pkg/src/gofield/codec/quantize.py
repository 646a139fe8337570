"""Integer quantization with a per-grid minimum shift.

``symbols = round(q*x) - round(q*min(x))`` so every symbol is nonnegative,
and ``x_hat = (symbols + min_q) / q``. Rounding is half away from zero
everywhere in the package.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from ..errors import AlphabetOverflowError, StructuralError
from ..field import Bounds, FeatureGrid

MAX_ALPHABET = 1 << 16


def round_half_away(v: np.ndarray) -> np.ndarray:
    a = np.abs(v)
    r = np.floor(a)
    r += (a - r) >= 0.5
    return np.copysign(r, v)


@dataclass(frozen=True)
class QuantizedGrid:
    symbols: np.ndarray  # int64, (nx, ny, nz, channels), all >= 0
    q: float
    min_q: int
    bounds: Bounds
    model_index: int = 0

    def __post_init__(self):
        if self.symbols.ndim != 4:
            raise StructuralError("symbols must be (nx, ny, nz, channels)")
        if self.symbols.size and self.symbols.min() < 0:
            raise StructuralError("symbols must be nonnegative")

    @property
    def shape(self) -> tuple[int, ...]:
        return self.symbols.shape

    @property
    def alphabet_size(self) -> int:
        return int(self.symbols.max()) + 1 if self.symbols.size else 1


def quantize_values(values: np.ndarray, q: float) -> np.ndarray:
    return round_half_away(np.asarray(values, dtype=np.float64) * float(q)).astype(np.int64)


def quantize_grid(grid: FeatureGrid, q: float, max_alphabet: int = MAX_ALPHABET, model_index: int = 0) -> QuantizedGrid:
    if q <= 0:
        raise ValueError(f"q must be positive, got {q}")
    ints = quantize_values(grid.data.detach().cpu().double().numpy(), q)
    min_q = int(ints.min())
    symbols = ints - min_q
    alphabet = int(symbols.max()) + 1
    if alphabet > max_alphabet:
        raise AlphabetOverflowError(
            f"grid needs {alphabet} symbols at q={q} (values span [{ints.min() / q:.4g}, {ints.max() / q:.4g}]) "
            f"but the alphabet limit is {max_alphabet}; lower q or raise the limit"
        )
    return QuantizedGrid(symbols, float(q), min_q, grid.bounds, model_index)


def dequantize_grid(g: QuantizedGrid, dtype: torch.dtype = torch.float32) -> FeatureGrid:
    values = (g.symbols + g.min_q).astype(np.float64) / g.q
    return FeatureGrid(torch.from_numpy(values).to(dtype), g.bounds)


def fake_quantize(x: torch.Tensor, q: float) -> torch.Tensor:
    """Round-trip a tensor through quantization (what a decoder reconstructs)."""
    ints = quantize_values(x.detach().cpu().double().numpy(), q)
    return torch.from_numpy(ints.astype(np.float64) / q).to(x.dtype)
