"""32-bit range coder with carry propagation over 16-bit frequency tables.

The encoder keeps ``low`` in 33 bits; a carry out of bit 32 is pushed into
the byte held back in ``cache`` and into any run of pending 0xFF bytes
(the scheme used by LZMA). Interval bounds are ``low + range*cum // 2**16``
with the full 48-bit product, so no precision is lost to pre-dividing the
range. The encoder's first byte is always zero and is not written;
``finish`` flushes the four bytes of ``low``, so an empty message encodes to
exactly four bytes.
"""

from __future__ import annotations

from bisect import bisect_right
from typing import Iterable, Sequence

import numpy as np

from ..errors import CorruptStreamError
from .tables import PRECISION, FrequencyTable

_TOP = 1 << 24
_MASK32 = 0xFFFFFFFF
FLUSH_BYTES = 4


class RangeEncoder:
    def __init__(self):
        self.low = 0
        self.range = _MASK32
        self.cache = 0
        self.cache_size = 1
        self.out = bytearray()
        self._lead = True

    def _shift_low(self):
        low = self.low
        if low < 0xFF000000 or low > _MASK32:
            carry = low >> 32
            temp = self.cache
            while True:
                if self._lead:
                    self._lead = False  # the interval never reaches 2**32, so this byte is 0
                else:
                    self.out.append((temp + carry) & 0xFF)
                temp = 0xFF
                self.cache_size -= 1
                if not self.cache_size:
                    break
            self.cache = (low >> 24) & 0xFF
        self.cache_size += 1
        self.low = (low & 0x00FFFFFF) << 8

    def encode(self, start: int, size: int):
        rng = self.range
        lo = (rng * start) >> PRECISION
        self.low += lo
        self.range = ((rng * (start + size)) >> PRECISION) - lo
        while self.range < _TOP:
            self.range <<= 8
            self._shift_low()

    def encode_symbols(self, symbols: Iterable[int], table: FrequencyTable):
        # inlined hot loop of encode() for speed
        cum = table.cum.tolist()
        low, rng = self.low, self.range
        for s in symbols:
            lo = (rng * cum[s]) >> PRECISION
            low += lo
            rng = ((rng * cum[s + 1]) >> PRECISION) - lo
            while rng < _TOP:
                rng <<= 8
                self.low = low
                self._shift_low()
                low = self.low
        self.low, self.range = low, rng

    def finish(self) -> bytes:
        for _ in range(FLUSH_BYTES + 1):
            self._shift_low()
        return bytes(self.out)


class RangeDecoder:
    def __init__(self, data: bytes):
        self.data = data
        if len(data) < FLUSH_BYTES:
            raise CorruptStreamError("range-coded stream shorter than its flush bytes")
        self.code = int.from_bytes(data[:FLUSH_BYTES], "big")
        self.pos = FLUSH_BYTES
        self.range = _MASK32

    def _next_byte(self) -> int:
        pos = self.pos
        self.pos += 1
        if pos < len(self.data):
            return self.data[pos]
        raise CorruptStreamError("range decoder ran past the end of the stream")

    def decode_symbols(self, count: int, table: FrequencyTable) -> list[int]:
        cum = table.cum.tolist()
        total = cum[-1]
        last = len(cum) - 2
        code, rng = self.code, self.range
        out = []
        append = out.append
        for _ in range(count):
            if code >= rng:
                raise CorruptStreamError("range decoder found an out-of-range code value")
            # largest s with floor(rng * cum[s] / total) <= code
            v = ((code + 1) * total - 1) // rng
            s = bisect_right(cum, v) - 1
            if s > last:
                s = last
            lo = (rng * cum[s]) >> PRECISION
            code -= lo
            rng = ((rng * cum[s + 1]) >> PRECISION) - lo
            while rng < _TOP:
                code = ((code << 8) | self._next_byte()) & _MASK32
                rng <<= 8
            append(s)
        self.code, self.range = code, rng
        return out


def range_encode(symbols, tables: Sequence[FrequencyTable] | FrequencyTable, table_index=None) -> bytes:
    """Encode ``symbols`` with one table, or with ``tables[table_index[i]]`` per symbol."""
    enc = RangeEncoder()
    symbols = np.asarray(symbols, dtype=np.int64).reshape(-1)
    if isinstance(tables, FrequencyTable):
        _check(symbols, tables)
        enc.encode_symbols(symbols.tolist(), tables)
    else:
        idx = np.zeros(symbols.size, dtype=np.int64) if table_index is None else np.asarray(table_index).reshape(-1)
        for s, t in zip(symbols.tolist(), idx.tolist()):
            table = tables[t]
            if not 0 <= s < table.alphabet_size:
                raise ValueError(f"symbol {s} outside table alphabet of size {table.alphabet_size}")
            enc.encode(int(table.cum[s]), int(table.freqs[s]))
    return enc.finish()


def range_decode(data: bytes, tables: Sequence[FrequencyTable] | FrequencyTable, count: int, table_index=None) -> np.ndarray:
    dec = RangeDecoder(data)
    if isinstance(tables, FrequencyTable):
        return np.asarray(dec.decode_symbols(count, tables), dtype=np.int64)
    idx = np.zeros(count, dtype=np.int64) if table_index is None else np.asarray(table_index).reshape(-1)
    out = np.empty(count, dtype=np.int64)
    for i, t in enumerate(idx.tolist()):
        out[i] = dec.decode_symbols(1, tables[t])[0]
    return out


def encode_channels(symbols: np.ndarray, tables: Sequence[FrequencyTable]) -> bytes:
    """Encode a channels-last symbol array channel by channel in one stream."""
    flat = symbols.reshape(-1, symbols.shape[-1])
    enc = RangeEncoder()
    for c, table in enumerate(tables):
        col = flat[:, c]
        _check(col, table)
        enc.encode_symbols(col.tolist(), table)
    return enc.finish()


def decode_channels(data: bytes, tables: Sequence[FrequencyTable], shape: tuple[int, ...]) -> np.ndarray:
    n = int(np.prod(shape[:-1]))
    dec = RangeDecoder(data)
    cols = [dec.decode_symbols(n, t) for t in tables]
    return np.asarray(cols, dtype=np.int64).T.reshape(shape)


def _check(symbols: np.ndarray, table: FrequencyTable):
    if symbols.size and (symbols.min() < 0 or symbols.max() >= table.alphabet_size):
        raise ValueError(f"symbols outside table alphabet of size {table.alphabet_size}")
