"""PNW1 weight files.

Layout (little-endian)::

    b"PNW1" | version u8 | kind u8 | config | tensor* | crc32 u32

``config`` for a prediction network is context_size u32, channels u32,
num_residual_units u32, objective u8, leak_slope f64; for a refinement
network it is hidden u32, leak_slope f64. Each tensor is ndim u8, dims u32
each, then float32 values in row-major order. The CRC covers every byte
between the version byte and the checksum.
"""

from __future__ import annotations

import struct
import zlib
from pathlib import Path
from typing import Union

import numpy as np

from . import _backend
from . import autodiff as ad
from .autodiff import BatchNormState, Tensor
from .model import PredNetConfig, PredNetWeights, RefineNetWeights, ResidualUnit

MAGIC = b"PNW1"
VERSION = 1
KIND_PREDNET = 0
KIND_REFINE = 1

Weights = Union[PredNetWeights, RefineNetWeights]


class WeightFileError(Exception):
    pass


class BadMagicError(WeightFileError):
    pass


class VersionMismatchError(WeightFileError):
    pass


class TruncatedError(WeightFileError):
    pass


class ChecksumError(WeightFileError):
    pass


def fnv1a64(data: bytes) -> int:
    return _backend.fnv1a64(bytes(data))


def payload_bytes(weights: Weights) -> bytes:
    """Serialized body (kind, config, tensors) without header or checksum."""
    parts = []
    if isinstance(weights, PredNetWeights):
        cfg = weights.config
        parts.append(struct.pack("<B", KIND_PREDNET))
        parts.append(
            struct.pack(
                "<IIIBd",
                cfg.context_size,
                cfg.channels,
                cfg.num_residual_units,
                ad.OBJECTIVES.index(cfg.objective),
                cfg.leak_slope,
            )
        )
    elif isinstance(weights, RefineNetWeights):
        parts.append(struct.pack("<B", KIND_REFINE))
        parts.append(struct.pack("<Id", weights.hidden, weights.leak_slope))
    else:
        raise TypeError(f"cannot serialize {type(weights).__name__}")
    for _, arr in weights.arrays():
        arr = np.ascontiguousarray(arr, dtype="<f4")
        parts.append(struct.pack("<B", arr.ndim))
        parts.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(arr.tobytes())
    return b"".join(parts)


def to_bytes(weights: Weights) -> bytes:
    body = payload_bytes(weights)
    return MAGIC + struct.pack("<B", VERSION) + body + struct.pack("<I", zlib.crc32(body))


def save_weights(weights: Weights, path) -> None:
    Path(path).write_bytes(to_bytes(weights))


def checksum(weights: Weights) -> int:
    """64-bit FNV-1a of the weight payload, as stored in coded streams."""
    return fnv1a64(payload_bytes(weights))


class _Reader:
    def __init__(self, data: bytes, pos: int, end: int):
        self.data, self.pos, self.end = data, pos, end

    def take(self, n: int) -> bytes:
        if self.pos + n > self.end:
            raise TruncatedError("weight file truncated")
        chunk = self.data[self.pos:self.pos + n]
        self.pos += n
        return chunk

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))

    def tensor(self) -> np.ndarray:
        (ndim,) = self.unpack("<B")
        dims = self.unpack(f"<{ndim}I")
        count = int(np.prod(dims)) if dims else 1
        raw = self.take(4 * count)
        return np.frombuffer(raw, dtype="<f4").astype(ad.DTYPE).reshape(dims)


def weights_from_arrays(config: PredNetConfig, arrays: list) -> PredNetWeights:
    """Rebuild PredNetWeights from arrays in :meth:`PredNetWeights.arrays` order."""
    it = iter(arrays)

    def param():
        return Tensor(np.array(next(it), dtype=ad.DTYPE), requires_grad=True)

    def bn():
        gamma, beta = param(), param()
        rm, rv = (np.array(next(it), dtype=ad.DTYPE) for _ in range(2))
        return BatchNormState(gamma=gamma, beta=beta, running_mean=rm, running_var=rv)

    stem_k, stem_b = param(), param()
    units = []
    for _ in range(config.num_residual_units):
        c1k, c1b = param(), param()
        bn1 = bn()
        c2k, c2b = param(), param()
        bn2 = bn()
        units.append(ResidualUnit(c1k, c1b, bn1, c2k, c2b, bn2))
    head_w, head_b = param(), param()
    c, k = config.channels, config.context_size
    if stem_k.shape != (c, 1, 3, 3) or head_w.shape != (1, c * k * k):
        raise WeightFileError("tensor shapes do not match the stored configuration")
    return PredNetWeights(config, stem_k, stem_b, units, head_w, head_b)


def from_bytes(data: bytes) -> Weights:
    if len(data) < 4:
        raise TruncatedError("weight file truncated")
    if data[:4] != MAGIC:
        raise BadMagicError(f"bad magic {data[:4]!r}, expected {MAGIC!r}")
    if len(data) < 5:
        raise TruncatedError("weight file truncated")
    if data[4] != VERSION:
        raise VersionMismatchError(f"unsupported weight format version {data[4]}")
    if len(data) < 10:
        raise TruncatedError("weight file truncated")

    # parse first so a cut-off file reports truncation rather than a bad checksum
    reader = _Reader(data, 5, len(data) - 4)
    (kind,) = reader.unpack("<B")
    if kind == KIND_PREDNET:
        ctx, ch, nunits, obj, slope = reader.unpack("<IIIBd")
        if obj >= len(ad.OBJECTIVES):
            raise WeightFileError(f"unknown objective code {obj}")
        try:
            config = PredNetConfig(ctx, ch, nunits, float(slope), ad.OBJECTIVES[obj])
        except ValueError as exc:
            raise WeightFileError(str(exc)) from exc
        count = 2 + 12 * nunits + 2
        arrays = [reader.tensor() for _ in range(count)]
        weights: Weights = weights_from_arrays(config, arrays)
    elif kind == KIND_REFINE:
        _hidden, slope = reader.unpack("<Id")
        arrays = [reader.tensor() for _ in range(6)]
        weights = RefineNetWeights.from_arrays(arrays, float(slope))
    else:
        raise WeightFileError(f"unknown weight kind {kind}")
    if reader.pos != reader.end:
        raise TruncatedError("weight file has inconsistent length")

    body = data[5:-4]
    (stored,) = struct.unpack("<I", data[-4:])
    if zlib.crc32(body) != stored:
        raise ChecksumError("weight file checksum mismatch")
    return weights


def load_weights(path) -> Weights:
    return from_bytes(Path(path).read_bytes())
