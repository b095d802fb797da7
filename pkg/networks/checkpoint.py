"""
Binary checkpoint format for a single ParamVector.

    b"BDK1" | u32 n_widths | u32 widths[n_widths] | u8 head tag | u64 n_values | f64 values[n_values]

All integers and reals are little-endian.
"""
import struct

import numpy as np

from lab.exceptions import DataFormatError
from utils import atomic_write_bytes
from .mlp import HeadKind, MlpSpec, ParamVector

MAGIC = b"BDK1"

HEAD_TAGS = {
    HeadKind.SOFTMAX: 1,
    HeadKind.MEAN_ONLY: 2,
    HeadKind.MEAN_LOGVAR: 3,
}
TAG_HEADS = {tag: head for head, tag in HEAD_TAGS.items()}


def encode_params(params):
    widths = params.spec.layer_widths
    header = MAGIC + struct.pack(f"<I{len(widths)}I", len(widths), *widths)
    header += struct.pack("<BQ", HEAD_TAGS[params.spec.head], len(params))
    return header + params.values.astype("<f8").tobytes()


def _unpack(fmt, buffer, offset, source):
    size = struct.calcsize(fmt)
    if offset + size > len(buffer):
        raise DataFormatError(source, f"truncated checkpoint at byte {offset}")
    return struct.unpack_from(fmt, buffer, offset), offset + size


def decode_params(buffer, offset=0, source="<bytes>"):
    """Decode one record starting at offset; returns (params, offset after the record)."""
    if buffer[offset:offset + 4] != MAGIC:
        raise DataFormatError(source, f"bad magic {bytes(buffer[offset:offset + 4])!r} at byte {offset}")
    offset += 4

    (n_widths,), offset = _unpack("<I", buffer, offset, source)
    widths, offset = _unpack(f"<{n_widths}I", buffer, offset, source)
    (tag, n_values), offset = _unpack("<BQ", buffer, offset, source)
    if tag not in TAG_HEADS:
        raise DataFormatError(source, f"unknown head tag {tag}")

    spec = MlpSpec(widths, TAG_HEADS[tag])
    end = offset + 8 * n_values
    if end > len(buffer):
        raise DataFormatError(source, "truncated parameter payload")
    values = np.frombuffer(buffer, dtype="<f8", count=n_values, offset=offset).astype(np.float64)
    if not np.isfinite(values).all():
        raise DataFormatError(source, "checkpoint holds non-finite parameters")
    return ParamVector(spec, values), end


def save_params(path, params):
    return atomic_write_bytes(path, encode_params(params))


def load_params(path):
    with open(path, "rb") as handle:
        buffer = handle.read()
    params, end = decode_params(buffer, source=path)
    if end != len(buffer):
        raise DataFormatError(path, f"{len(buffer) - end} trailing bytes after parameters")
    return params
