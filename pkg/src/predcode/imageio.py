"""Reading and writing 8-bit grayscale images.

PNG (and anything else Pillow decodes) goes through Pillow; binary and ASCII
PGM are parsed here so 8-bit samples pass through untouched.
"""

from __future__ import annotations

import logging
import re
from pathlib import Path
from typing import Union

import numpy as np
from PIL import Image

log = logging.getLogger(__name__)

PathLike = Union[str, Path]
IMAGE_SUFFIXES = (".png", ".pgm", ".pnm")


class ImageFormatError(ValueError):
    pass


def rgb_to_luma(rgb: np.ndarray) -> np.ndarray:
    """BT.601 luma with round-half-up, in exact integer arithmetic."""
    rgb = np.asarray(rgb, dtype=np.int64)
    r, g, b = rgb[..., 0], rgb[..., 1], rgb[..., 2]
    return ((299 * r + 587 * g + 114 * b + 500) // 1000).astype(np.uint8)


_PNM_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _pnm_header(data: bytes) -> tuple[bytes, list[int], int]:
    pos = 0
    fields = []
    for _ in range(4):
        m = _PNM_TOKEN.match(data, pos)
        if not m:
            raise ImageFormatError("truncated PGM header")
        fields.append(m.group(1))
        pos = m.end()
    magic = fields[0]
    try:
        w, h, maxval = (int(f) for f in fields[1:])
    except ValueError as exc:
        raise ImageFormatError("malformed PGM header") from exc
    return magic, [w, h, maxval], pos


def read_pgm(path: PathLike) -> np.ndarray:
    data = Path(path).read_bytes()
    magic, (w, h, maxval), pos = _pnm_header(data)
    if w < 1 or h < 1:
        raise ImageFormatError(f"bad PGM size {w}x{h}")
    if magic == b"P5":
        if maxval > 255:
            raise ImageFormatError("only 8-bit PGM is supported")
        raw = data[pos + 1:pos + 1 + w * h]  # exactly one whitespace byte after maxval
        if len(raw) < w * h:
            raise ImageFormatError("truncated PGM raster")
        img = np.frombuffer(raw, dtype=np.uint8).reshape(h, w).copy()
    elif magic == b"P2":
        values = data[pos:].split()
        if len(values) < w * h:
            raise ImageFormatError("truncated PGM raster")
        img = np.array([int(v) for v in values[: w * h]], dtype=np.int64).reshape(h, w)
        if img.min() < 0 or img.max() > maxval:
            raise ImageFormatError("PGM sample outside [0, maxval]")
        if maxval > 255:
            raise ImageFormatError("only 8-bit PGM is supported")
        img = img.astype(np.uint8)
    else:
        raise ImageFormatError(f"not a graymap: magic {magic!r}")
    if maxval != 255:
        # rescale to the full 8-bit range, round half up
        img = ((img.astype(np.int64) * 255 * 2 + maxval) // (2 * maxval)).astype(np.uint8)
    return img


def write_pgm(image: np.ndarray, path: PathLike) -> None:
    """Binary P5 graymap, maxval 255."""
    img = np.asarray(image)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ImageFormatError("write_pgm expects a 2-d uint8 array")
    h, w = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(img).tobytes())


def read_image(path: PathLike) -> np.ndarray:
    """Decode one file to an 8-bit grayscale [H, W] array."""
    path = Path(path)
    with open(path, "rb") as fh:
        head = fh.read(2)
    if head in (b"P5", b"P2"):
        return read_pgm(path)
    try:
        with Image.open(path) as im:
            im.load()
            if im.mode == "L":
                return np.asarray(im, dtype=np.uint8).copy()
            if im.mode in ("I;16", "I;16B", "I"):
                raise ImageFormatError(f"{path.name}: only 8-bit images are supported")
            rgb = np.asarray(im.convert("RGB"))
    except (OSError, Image.DecompressionBombError) as exc:
        raise ImageFormatError(f"cannot decode {path}: {exc}") from exc
    return rgb_to_luma(rgb)


def write_png(image: np.ndarray, path: PathLike) -> None:
    Image.fromarray(np.ascontiguousarray(image, dtype=np.uint8)).save(path)


def image_files(directory: PathLike) -> list[Path]:
    d = Path(directory)
    if not d.is_dir():
        raise FileNotFoundError(f"not a directory: {d}")
    return sorted(p for p in d.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def ingest_images(directory: PathLike, with_names: bool = False):
    """All decodable images of a directory in filename order.

    Files that fail to decode are skipped with a warning; a directory with no
    decodable image raises ``ImageFormatError``.
    """
    images, names = [], []
    for p in image_files(directory):
        try:
            images.append(read_image(p))
            names.append(p.name)
        except (ImageFormatError, OSError) as exc:
            log.warning("skipping %s: %s", p.name, exc)
    if not images:
        raise ImageFormatError(f"no decodable images in {directory}")
    return (images, names) if with_names else images
