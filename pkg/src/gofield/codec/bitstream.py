"""The ``.gof`` container: one group of frames per file.

Layout (all integers little-endian)::

    "GOFR" | u16 version | u32 header_len | u32 header_crc32 | header body
    chunk 0 (keyframe) | chunk 1 | ... | chunk N-1

Header body::

    f64 q | u32 first_frame | u16 frame_count | 6 x f64 bounds (lo xyz, hi xyz)
    u8 n_levels | n_levels x (u16 nx, ny, nz, channels) | u16 nx, ny, nz, channels (coefficients)
    u8 n_filters | n_filters x u8 entropy-model widths | f64 p_min
    u8 sh_degree | u8 n_hidden | n_hidden x u16 widths | f32 network weights
        (per layer: weight row-major, then bias)
    frame_count x (n_levels + 1) x i32 min_q
    frame_count x (u32 offset, u32 length) chunk table, offsets from the first chunk

Chunk::

    u32 payload_len | u32 crc32(payload) | payload
    payload = u32 frame_index | u8 kind (0 keyframe, 1 residual)
              | 7 entropy models, f32 parameters channel-major
              | (n_levels + 1) x (u32 alphabet_size | u32 n_bytes | range-coded bytes)

Grids inside a chunk are the basis (or residual) levels in order, then the
coefficient grid; grid ``i`` is coded with model ``i``, one frequency table
per channel, channel after channel in a single range-coded stream.
"""

from __future__ import annotations

import io
import struct
import zlib
from dataclasses import dataclass, field
from typing import BinaryIO

import numpy as np
import torch

from ..entropy import EntropyModel
from ..errors import CorruptStreamError, FormatError, StructuralError
from ..field import FrameRepresentation, GofRepresentation, MultiResBasis, ShadingNetwork
from .quantize import MAX_ALPHABET, QuantizedGrid, dequantize_grid, quantize_grid
from .rangecoder import decode_channels, encode_channels
from .tables import build_channel_tables

MAGIC = b"GOFR"
VERSION = 1
_PREFIX = struct.Struct("<4sHII")
_CHUNK_HEAD = struct.Struct("<II")
KIND_CODES = {"keyframe": 0, "residual": 1}
KIND_NAMES = {v: k for k, v in KIND_CODES.items()}


@dataclass
class GofHeader:
    q: float
    first_frame: int
    frame_count: int
    bounds: tuple
    level_shapes: list[tuple[int, int, int, int]]
    coeff_shape: tuple[int, int, int, int]
    filters: tuple[int, ...]
    p_min: float
    sh_degree: int
    hidden: tuple[int, ...]
    net_weights: bytes
    min_q: list[list[int]]
    chunk_table: list[tuple[int, int]] = field(default_factory=list)

    @property
    def grid_shapes(self) -> list[tuple[int, int, int, int]]:
        return [*self.level_shapes, self.coeff_shape]

    def pack(self) -> bytes:
        buf = io.BytesIO()
        w = buf.write
        w(struct.pack("<dIH", self.q, self.first_frame, self.frame_count))
        w(struct.pack("<6d", *self.bounds[0], *self.bounds[1]))
        w(struct.pack("<B", len(self.level_shapes)))
        for shape in self.grid_shapes:
            w(struct.pack("<4H", *shape))
        w(struct.pack("<B", len(self.filters)) + bytes(self.filters) + struct.pack("<d", self.p_min))
        w(struct.pack("<BB", self.sh_degree, len(self.hidden)))
        w(struct.pack(f"<{len(self.hidden)}H", *self.hidden))
        w(self.net_weights)
        w(np.asarray(self.min_q, dtype="<i4").tobytes())
        w(np.asarray(self.chunk_table, dtype="<u4").reshape(-1, 2).tobytes())
        return buf.getvalue()

    @classmethod
    def unpack(cls, body: bytes) -> "GofHeader":
        r = _Reader(body)
        q, first, count = r.take("<dIH")
        b = r.take("<6d")
        bounds = (tuple(b[:3]), tuple(b[3:]))
        (n_levels,) = r.take("<B")
        shapes = [tuple(r.take("<4H")) for _ in range(n_levels + 1)]
        (n_filters,) = r.take("<B")
        filters = tuple(r.raw(n_filters))
        (p_min,) = r.take("<d")
        sh_degree, n_hidden = r.take("<BB")
        hidden = tuple(r.take(f"<{n_hidden}H"))
        coeff_channels = shapes[-1][3]
        widths = (coeff_channels + (sh_degree + 1) ** 2, *hidden, 4)
        n_weights = sum(a * b + b for a, b in zip(widths[:-1], widths[1:]))
        net_weights = r.raw(4 * n_weights)
        min_q = np.frombuffer(r.raw(4 * count * (n_levels + 1)), dtype="<i4").reshape(count, n_levels + 1)
        table = np.frombuffer(r.raw(8 * count), dtype="<u4").reshape(count, 2)
        if r.remaining:
            raise FormatError(f"{r.remaining} trailing bytes in GOF header")
        return cls(
            q, first, count, bounds, shapes[:-1], shapes[-1], filters, p_min, sh_degree, hidden,
            net_weights, min_q.tolist(), [tuple(map(int, row)) for row in table],
        )


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, fmt: str):
        s = struct.Struct(fmt)
        vals = s.unpack_from(self.data, self.pos) if self.pos + s.size <= len(self.data) else self._short()
        self.pos += s.size
        return vals

    def raw(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            self._short()
        out = self.data[self.pos : self.pos + n]
        self.pos += n
        return out

    @property
    def remaining(self) -> int:
        return len(self.data) - self.pos

    def _short(self):
        raise FormatError("truncated GOF data")


@dataclass
class GofBitstream:
    header: GofHeader
    chunks: list[bytes]  # framed chunks: length, crc, payload

    def to_bytes(self) -> bytes:
        body = self.header.pack()
        prefix = _PREFIX.pack(MAGIC, VERSION, len(body), zlib.crc32(body))
        return prefix + body + b"".join(self.chunks)

    @property
    def header_size(self) -> int:
        return _PREFIX.size + len(self.header.pack())

    @property
    def chunk_sizes(self) -> list[int]:
        return [len(c) for c in self.chunks]

    @property
    def size(self) -> int:
        return self.header_size + sum(self.chunk_sizes)

    def frame_sizes(self) -> list[int]:
        """Bytes attributed to each frame; the header is charged to the keyframe."""
        sizes = self.chunk_sizes
        return [sizes[0] + self.header_size, *sizes[1:]]

    @classmethod
    def from_bytes(cls, data: bytes) -> "GofBitstream":
        header, start = _read_header(io.BytesIO(data))
        chunks = []
        for offset, length in header.chunk_table:
            chunk = data[start + offset : start + offset + length]
            if len(chunk) != length:
                raise FormatError("truncated chunk")
            chunks.append(chunk)
        return cls(header, chunks)


def _read_header(f: BinaryIO) -> tuple[GofHeader, int]:
    prefix = f.read(_PREFIX.size)
    if len(prefix) != _PREFIX.size:
        raise FormatError("file too short for a GOF header")
    magic, version, length, crc = _PREFIX.unpack(prefix)
    if magic != MAGIC:
        raise FormatError(f"bad magic {magic!r}, expected {MAGIC!r}")
    if version != VERSION:
        raise FormatError(f"unsupported GOF version {version}, expected {VERSION}")
    body = f.read(length)
    if len(body) != length or zlib.crc32(body) != crc:
        raise CorruptStreamError("GOF header failed its CRC check")
    return GofHeader.unpack(body), _PREFIX.size + length


def _frame_chunk(payload: bytes) -> bytes:
    return _CHUNK_HEAD.pack(len(payload), zlib.crc32(payload)) + payload


def _open_chunk(chunk: bytes) -> bytes:
    if len(chunk) < _CHUNK_HEAD.size:
        raise CorruptStreamError("chunk shorter than its framing")
    length, crc = _CHUNK_HEAD.unpack_from(chunk)
    payload = chunk[_CHUNK_HEAD.size :]
    if len(payload) != length or zlib.crc32(payload) != crc:
        raise CorruptStreamError("chunk failed its length/CRC check")
    return payload


def network_to_bytes(net: ShadingNetwork) -> bytes:
    parts = []
    for layer in net.layers:
        parts.append(layer.weight.detach().cpu().numpy().astype("<f4").tobytes())
        parts.append(layer.bias.detach().cpu().numpy().astype("<f4").tobytes())
    return b"".join(parts)


def network_from_bytes(data: bytes, feature_channels: int, hidden, sh_degree: int) -> ShadingNetwork:
    net = ShadingNetwork(feature_channels, hidden, sh_degree)
    arr = np.frombuffer(data, dtype="<f4")
    offset = 0
    with torch.no_grad():
        for layer in net.layers:
            for p in (layer.weight, layer.bias):
                n = p.numel()
                p.copy_(torch.from_numpy(arr[offset : offset + n].copy()).reshape(p.shape))
                offset += n
    return net.freeze()


def _decoder_models(blobs: list[bytes], shapes, filters, p_min) -> list[EntropyModel]:
    return [
        EntropyModel.from_bytes(blob, shape[3], filters, p_min, dtype=torch.float32)
        for blob, shape in zip(blobs, shapes)
    ]


def encode_frame(frame: FrameRepresentation, models: list[EntropyModel], q: float, max_alphabet: int = MAX_ALPHABET):
    """Quantize and range-code one frame. Returns (framed chunk, min_q per grid, quantized grids)."""
    grids = frame.grids()
    if len(models) != len(grids):
        raise StructuralError(f"frame has {len(grids)} grids but {len(models)} entropy models were given")
    blobs = []
    for i, (g, m) in enumerate(zip(grids, models)):
        if m.channels != g.channels:
            raise StructuralError(f"grid {i} has {g.channels} channels but its model has {m.channels}")
        blobs.append(m.to_bytes())
    filters, p_min = models[0].filters, models[0].p_min
    # tables come from the serialized parameters, exactly as the decoder sees them
    coding_models = _decoder_models(blobs, [g.data.shape for g in grids], filters, p_min)
    payload = [struct.pack("<IB", frame.frame_index, KIND_CODES[frame.kind]), *blobs]
    quantized, min_qs = [], []
    for i, (g, m) in enumerate(zip(grids, coding_models)):
        qg = quantize_grid(g, q, max_alphabet, model_index=i)
        tables = build_channel_tables(m, qg.alphabet_size, qg.min_q)
        data = encode_channels(qg.symbols, tables)
        payload.append(struct.pack("<II", qg.alphabet_size, len(data)) + data)
        quantized.append(qg)
        min_qs.append(qg.min_q)
    return _frame_chunk(b"".join(payload)), min_qs, quantized


def encode_gof(gof: GofRepresentation, q: float, max_alphabet: int = MAX_ALPHABET) -> GofBitstream:
    """Quantize at ``q`` and entropy-code every frame of ``gof``."""
    if not gof.models:
        raise StructuralError("the GOF has no entropy models to code with")
    key = gof.keyframe
    chunks, min_q = [], []
    for frame, models in zip(gof.frames, gof.models):
        chunk, mins, _ = encode_frame(frame, models, q, max_alphabet)
        chunks.append(chunk)
        min_q.append(mins)
    table, offset = [], 0
    for c in chunks:
        table.append((offset, len(c)))
        offset += len(c)
    header = GofHeader(
        q=float(q),
        first_frame=gof.first_frame,
        frame_count=len(gof),
        bounds=key.coeff.bounds,
        level_shapes=[tuple(g.data.shape) for g in key.basis.levels],
        coeff_shape=tuple(key.coeff.data.shape),
        filters=tuple(gof.models[0][0].filters),
        p_min=gof.models[0][0].p_min,
        sh_degree=gof.net.sh_degree,
        hidden=gof.net.hidden,
        net_weights=network_to_bytes(gof.net),
        min_q=min_q,
        chunk_table=table,
    )
    return GofBitstream(header, chunks)


@dataclass
class DecodedFrame:
    frame: FrameRepresentation
    models: list[EntropyModel]
    quantized: list[QuantizedGrid]
    payload_bytes: list[int]  # range-coded bytes per grid


def decode_chunk(chunk: bytes, header: GofHeader, position: int) -> DecodedFrame:
    payload = _open_chunk(chunk)
    r = _Reader(payload)
    frame_index, kind = r.take("<IB")
    if kind not in KIND_NAMES:
        raise FormatError(f"unknown frame kind {kind}")
    if frame_index != position + 1:
        raise FormatError(f"chunk {position} carries frame index {frame_index}")
    shapes = header.grid_shapes
    probe = EntropyModel(1, header.filters)
    per_channel = 4 * probe.param_count_per_channel
    blobs = [r.raw(per_channel * shape[3]) for shape in shapes]
    models = _decoder_models(blobs, shapes, header.filters, header.p_min)
    grids, quantized, sizes = [], [], []
    for i, (shape, model) in enumerate(zip(shapes, models)):
        alphabet, n_bytes = r.take("<II")
        sizes.append(n_bytes)
        data = r.raw(n_bytes)
        tables = build_channel_tables(model, alphabet, header.min_q[position][i])
        symbols = decode_channels(data, tables, shape)
        qg = QuantizedGrid(symbols, header.q, header.min_q[position][i], header.bounds, i)
        quantized.append(qg)
        grids.append(dequantize_grid(qg))
    if r.remaining:
        raise FormatError("trailing bytes in chunk")
    frame = FrameRepresentation(KIND_NAMES[kind], MultiResBasis(tuple(grids[:-1])), grids[-1], frame_index)
    return DecodedFrame(frame, models, quantized, sizes)


def _network(header: GofHeader) -> ShadingNetwork:
    return network_from_bytes(header.net_weights, header.coeff_shape[3], header.hidden, header.sh_degree)


def decode_gof(data: bytes | GofBitstream) -> GofRepresentation:
    """Inverse of :func:`encode_gof`: dequantized grids, network and models."""
    bs = data if isinstance(data, GofBitstream) else GofBitstream.from_bytes(data)
    decoded = [decode_chunk(c, bs.header, i) for i, c in enumerate(bs.chunks)]
    frames = [d.frame for d in decoded]
    if frames[0].kind != "keyframe":
        raise FormatError("first chunk of a GOF must be a keyframe")
    return GofRepresentation(
        keyframe=frames[0],
        residuals=frames[1:],
        net=_network(bs.header),
        models=[d.models for d in decoded],
        first_frame=bs.header.first_frame,
    )


class GofReader:
    """Random access to single frames of a ``.gof`` file.

    Reading frame ``t`` touches the header, the keyframe chunk and chunk
    ``t`` only.
    """

    def __init__(self, f: BinaryIO):
        self.f = f
        self.f.seek(0)
        self.header, self.chunk_start = _read_header(f)
        self.net = _network(self.header)
        self._keyframe: DecodedFrame | None = None

    def __len__(self) -> int:
        return self.header.frame_count

    def _chunk(self, position: int) -> bytes:
        if not 0 <= position < self.header.frame_count:
            raise IndexError(f"frame {position} outside a GOF of {self.header.frame_count} frames")
        offset, length = self.header.chunk_table[position]
        self.f.seek(self.chunk_start + offset)
        chunk = self.f.read(length)
        if len(chunk) != length:
            raise FormatError("truncated chunk")
        return chunk

    def keyframe(self) -> DecodedFrame:
        if self._keyframe is None:
            self._keyframe = decode_chunk(self._chunk(0), self.header, 0)
        return self._keyframe

    def frame(self, position: int) -> tuple[FrameRepresentation, MultiResBasis]:
        """Frame at 0-based ``position`` in the group, plus the keyframe basis it builds on."""
        key = self.keyframe()
        if position == 0:
            return key.frame, key.frame.basis
        return decode_chunk(self._chunk(position), self.header, position).frame, key.frame.basis

    def iter_frames(self):
        for t in range(len(self)):
            yield self.frame(t)


def read_gof(path) -> GofRepresentation:
    with open(path, "rb") as f:
        return decode_gof(f.read())


def write_gof(path, bitstream: GofBitstream) -> int:
    data = bitstream.to_bytes()
    with open(path, "wb") as f:
        f.write(data)
    return len(data)
