"""PRC1 lossless bitstream.

Layout (little-endian)::

    b"PRC1" | version u8 | width u32 | height u32 | predictor id u8 |
    weight checksum u64 | payload length u32 | payload | crc32 u32

The payload is the arithmetic-coded residual sequence in raster order under
an adaptive order-0 model. The CRC32 is taken over the reconstructed pixels,
so a damaged payload that still decodes is caught instead of accepted.
"""

from __future__ import annotations

import struct
import zlib
from dataclasses import dataclass
from typing import Optional

import numpy as np
from threadpoolctl import threadpool_limits

from . import _backend
from .entropy import ALPHABET, INCREMENT, RESCALE_LIMIT
from .predictors import (
    GapPredictor,
    LeftPredictor,
    PredNetPredictor,
    Predictor,
    sequential_predictions,
)

MAGIC = b"PRC1"
VERSION = 1
OFFSET = 255  # residual r is coded as symbol r + 255
_HEADER = struct.Struct("<4sBIIBQI")
_TRAILER = struct.Struct("<I")
MAX_PIXELS = 1 << 31


class CodecError(Exception):
    """Base class of all decode/encode failures."""


class BadMagicError(CodecError):
    pass


class VersionError(CodecError):
    pass


class ChecksumMismatchError(CodecError):
    """The stream was made with different predictor weights."""


class TruncatedStreamError(CodecError):
    pass


class CorruptStreamError(CodecError):
    """Payload decodes to an impossible image or fails the integrity check."""


class SymbolRangeError(CorruptStreamError):
    pass


class PredictorMismatchError(CodecError):
    pass


@dataclass
class Header:
    width: int
    height: int
    predictor_id: int
    weight_checksum: int
    payload_length: int

    def pack(self) -> bytes:
        return _HEADER.pack(MAGIC, VERSION, self.width, self.height, self.predictor_id,
                            self.weight_checksum, self.payload_length)


@dataclass
class CodedStream:
    header: Header
    payload: bytes
    pixel_crc: int

    def to_bytes(self) -> bytes:
        return self.header.pack() + self.payload + _TRAILER.pack(self.pixel_crc)

    @property
    def size(self) -> int:
        return _HEADER.size + len(self.payload) + _TRAILER.size


def parse_header(data: bytes) -> Header:
    if len(data) < 4 or data[:4] != MAGIC:
        raise BadMagicError("not a PRC1 stream (bad magic)")
    if len(data) < 5:
        raise TruncatedStreamError("stream ends inside the header")
    if data[4] != VERSION:
        raise VersionError(f"unsupported stream version {data[4]}")
    if len(data) < _HEADER.size:
        raise TruncatedStreamError("stream ends inside the header")
    _, _, w, h, pid, chk, plen = _HEADER.unpack_from(data)
    if w < 1 or h < 1 or w * h > MAX_PIXELS:
        raise CorruptStreamError(f"invalid image size {w}x{h}")
    return Header(w, h, pid, chk, plen)


def parse_stream(data: bytes) -> CodedStream:
    data = bytes(data)
    header = parse_header(data)
    end = _HEADER.size + header.payload_length
    if len(data) < end + _TRAILER.size:
        raise TruncatedStreamError(f"stream has {len(data)} bytes, header promises {end + _TRAILER.size}")
    if len(data) > end + _TRAILER.size:
        raise CorruptStreamError("trailing bytes after the stream")
    (crc,) = _TRAILER.unpack_from(data, end)
    return CodedStream(header, data[_HEADER.size:end], crc)


def _residuals(image: np.ndarray, predictor: Predictor) -> np.ndarray:
    if isinstance(predictor, PredNetPredictor):
        preds, _ = sequential_predictions(predictor, *image.shape, image=image)
    else:
        preds = predictor.predict_image(image).quantized()
    return image.astype(np.int16) - preds


def encode(image: np.ndarray, predictor: Predictor) -> CodedStream:
    img = np.asarray(image)
    if img.ndim != 2 or img.size == 0 or img.dtype != np.uint8:
        raise ValueError("encode expects a non-empty 2-d uint8 image")
    img = np.ascontiguousarray(img)
    with threadpool_limits(1):
        res = _residuals(img, predictor)
    payload = _backend.encode_symbols(
        (res.ravel().astype(np.int32) + OFFSET), ALPHABET, INCREMENT, RESCALE_LIMIT
    )
    h, w = img.shape
    header = Header(w, h, predictor.pid, predictor.checksum(), len(payload))
    return CodedStream(header, payload, zlib.crc32(img.tobytes()))


def encode_bytes(image: np.ndarray, predictor: Predictor) -> bytes:
    return encode(image, predictor).to_bytes()


def _reconstruct(res: np.ndarray, predictor: Predictor) -> np.ndarray:
    if isinstance(predictor, LeftPredictor):
        out = res.astype(np.int64)
        out[:, 0] += 128
        out = np.cumsum(out, axis=1)
        if out.min() < 0 or out.max() > 255:
            raise ValueError("reconstructed sample out of range")
        return out.astype(np.uint8)
    if isinstance(predictor, GapPredictor):
        return np.asarray(_backend.gap_reconstruct(np.ascontiguousarray(res, dtype=np.int32)), dtype=np.uint8)
    if isinstance(predictor, PredNetPredictor):
        _, img = sequential_predictions(predictor, *res.shape, residuals=res)
        return img
    raise PredictorMismatchError(f"no decoder for predictor {predictor.name!r}")


def decode(stream, predictor: Predictor) -> np.ndarray:
    """Rebuild the image; raises a :class:`CodecError` subclass on any defect."""
    cs = stream if isinstance(stream, CodedStream) else parse_stream(stream)
    hd = cs.header
    if hd.predictor_id != predictor.pid:
        raise PredictorMismatchError(
            f"stream was coded with predictor id {hd.predictor_id}, decoder has {predictor.name!r} ({predictor.pid})"
        )
    if hd.weight_checksum != predictor.checksum():
        raise ChecksumMismatchError(
            f"weight checksum {hd.weight_checksum:016x} does not match supplied weights {predictor.checksum():016x}"
        )
    n = hd.width * hd.height
    try:
        symbols, overrun = _backend.decode_symbols(cs.payload, n, ALPHABET, INCREMENT, RESCALE_LIMIT)
    except ArithmeticError as exc:
        raise CorruptStreamError(f"arithmetic decoder failed: {exc}") from exc
    if overrun > 32:
        raise TruncatedStreamError(f"payload ran out {overrun} bits early")
    symbols = np.asarray(symbols)
    if symbols.min() < 0 or symbols.max() >= ALPHABET:
        raise SymbolRangeError("decoded symbol outside the residual alphabet")
    res = (symbols.astype(np.int32) - OFFSET).reshape(hd.height, hd.width)
    try:
        with threadpool_limits(1):
            img = _reconstruct(res, predictor)
    except ValueError as exc:
        raise CorruptStreamError(str(exc)) from exc
    if zlib.crc32(img.tobytes()) != cs.pixel_crc:
        raise CorruptStreamError("pixel checksum mismatch: payload is damaged")
    return img


def predictor_id_of(data: bytes) -> Optional[int]:
    return parse_header(data).predictor_id
