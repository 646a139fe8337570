"""Real compression path: quantization, frequency tables, range coding and the GOF container."""

from .bitstream import (
    GofBitstream,
    GofHeader,
    GofReader,
    decode_chunk,
    decode_gof,
    encode_frame,
    encode_gof,
    read_gof,
    write_gof,
)
from .quantize import MAX_ALPHABET, QuantizedGrid, dequantize_grid, fake_quantize, quantize_grid, round_half_away
from .rangecoder import RangeDecoder, RangeEncoder, decode_channels, encode_channels, range_decode, range_encode
from .tables import TOTAL, FrequencyTable, build_channel_tables, build_freq_table, table_from_pmf

__all__ = [
    "FrequencyTable", "GofBitstream", "GofHeader", "GofReader", "MAX_ALPHABET", "QuantizedGrid",
    "RangeDecoder", "RangeEncoder", "TOTAL", "build_channel_tables", "build_freq_table",
    "decode_channels", "decode_chunk", "decode_gof", "dequantize_grid", "encode_channels",
    "encode_frame", "encode_gof", "fake_quantize", "quantize_grid", "range_decode", "range_encode",
    "read_gof", "round_half_away", "table_from_pmf", "write_gof",
]
