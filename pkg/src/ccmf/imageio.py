"""Portable graymap images and raw volumes.

2d data is read and written as PGM (text ``P2`` or binary ``P5``).  Float
fields are quantised to 16 bits with a sidecar ``<name>.range`` text file
holding ``min max``.  3d data is a one-line header ``ccmf-vol X Y Z dtype``
followed by a raw little-endian payload.
"""
from __future__ import annotations

import os
import re
from pathlib import Path

import numpy as np


class ImageFormatError(ValueError):
    """Base class for unreadable image or volume files."""


class MalformedHeaderError(ImageFormatError):
    pass


class TruncatedPayloadError(ImageFormatError):
    pass


class UnsupportedMagicError(ImageFormatError):
    pass


class DimensionMismatchError(ImageFormatError):
    pass


_VOL_MAGIC = b"ccmf-vol"
_VOL_DTYPES = {"uint8", "uint16", "int32", "float32", "float64"}


def _pgm_tokens(data: bytes, count: int):
    """First ``count`` whitespace-separated header tokens plus the offset after them."""
    tokens = []
    pos = 0
    while len(tokens) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace() and data[pos:pos + 1] != b"#":
            pos += 1
        if start == pos:
            raise MalformedHeaderError("header ended early")
        tokens.append(data[start:pos])
    return tokens, pos


def load_image(path) -> np.ndarray:
    """Read a P2 or P5 graymap; returns uint8 or uint16 by the declared maxval."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P2", b"P5"):
        raise UnsupportedMagicError(f"{path}: unsupported magic {magic!r}")
    tokens, pos = _pgm_tokens(data, 4)
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: non-integer header field") from exc
    if w <= 0 or h <= 0 or not 0 < maxval < 65536:
        raise MalformedHeaderError(f"{path}: bad size {w}x{h} or maxval {maxval}")
    dtype = np.uint8 if maxval < 256 else np.dtype(">u2")
    count = w * h
    if magic == b"P5":
        payload = data[pos + 1:]
        need = count * np.dtype(dtype).itemsize
        if len(payload) < need:
            raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(payload)}")
        arr = np.frombuffer(payload[:need], dtype=dtype)
    else:
        fields = data[pos:].split()
        if len(fields) < count:
            raise TruncatedPayloadError(f"{path}: expected {count} samples, found {len(fields)}")
        try:
            arr = np.array([int(f) for f in fields[:count]], dtype=np.int64)
        except ValueError as exc:
            raise MalformedHeaderError(f"{path}: non-integer sample") from exc
    if arr.max(initial=0) > maxval:
        raise MalformedHeaderError(f"{path}: sample exceeds maxval {maxval}")
    out_dtype = np.uint8 if maxval < 256 else np.uint16
    return arr.astype(out_dtype).reshape(h, w)


def save_image(path, data, binary: bool = True) -> None:
    """Write a uint8 or uint16 2d array as P5 (default) or P2."""
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise DimensionMismatchError("graymaps are 2d")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    if arr.dtype not in (np.uint8, np.uint16):
        raise TypeError(f"need uint8 or uint16 samples, got {arr.dtype}")
    h, w = arr.shape
    maxval = 255 if arr.dtype == np.uint8 else 65535
    with open(path, "wb") as fh:
        if binary:
            fh.write(f"P5\n{w} {h}\n{maxval}\n".encode())
            fh.write(arr.astype(">u2" if maxval > 255 else np.uint8).tobytes())
        else:
            fh.write(f"P2\n{w} {h}\n{maxval}\n".encode())
            for row in arr:
                fh.write((" ".join(str(int(v)) for v in row) + "\n").encode())


def load_intensity(path) -> np.ndarray:
    """Graymap scaled to float intensities in [0, 1]."""
    img = load_image(path)
    return img.astype(float) / (255.0 if img.dtype == np.uint8 else 65535.0)


def _range_path(path) -> Path:
    return Path(str(path) + ".range")


def save_field(path, field) -> tuple[float, float]:
    """Store a real 2d field as a 16-bit graymap plus a ``min max`` sidecar."""
    f = np.asarray(field, dtype=float)
    lo, hi = float(f.min()), float(f.max())
    span = hi - lo
    q = np.zeros(f.shape) if span == 0 else (f - lo) / span
    save_image(path, np.round(q * 65535).astype(np.uint16))
    _range_path(path).write_text(f"{lo!r} {hi!r}\n")
    return lo, hi


def load_field(path) -> np.ndarray:
    """Inverse of :func:`save_field` (exact up to 16-bit quantisation)."""
    raw = load_image(path)
    scale = 255.0 if raw.dtype == np.uint8 else 65535.0
    img = raw.astype(float)
    try:
        lo, hi = (float(v) for v in _range_path(path).read_text().split())
    except FileNotFoundError:
        lo, hi = 0.0, 1.0
    except ValueError as exc:
        raise MalformedHeaderError(f"{path}: bad range sidecar") from exc
    return lo + img / scale * (hi - lo)


def save_volume(path, vol) -> None:
    """Write a 3d array as header line + raw little-endian payload.

    Header dims are ``X Y Z`` for an array indexed ``[z, y, x]``.
    """
    arr = np.asarray(vol)
    if arr.ndim != 3:
        raise DimensionMismatchError("volumes are 3d")
    if arr.dtype == np.bool_:
        arr = arr.astype(np.uint8)
    name = arr.dtype.name
    if name not in _VOL_DTYPES:
        raise TypeError(f"unsupported volume dtype {name}")
    z, y, x = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"ccmf-vol {x} {y} {z} {name}\n".encode())
        fh.write(arr.astype(arr.dtype.newbyteorder("<")).tobytes())


def load_volume(path, expected_shape=None) -> np.ndarray:
    """Read a volume written by :func:`save_volume`.

    ``expected_shape`` (``(Z, Y, X)``) is checked against the header.
    """
    data = Path(path).read_bytes()
    if not data.startswith(_VOL_MAGIC):
        raise UnsupportedMagicError(f"{path}: not a ccmf volume")
    nl = data.find(b"\n")
    if nl < 0:
        raise MalformedHeaderError(f"{path}: header line not terminated")
    m = re.fullmatch(rb"ccmf-vol (\d+) (\d+) (\d+) (\w+)", data[:nl].strip())
    if m is None:
        raise MalformedHeaderError(f"{path}: cannot parse header {data[:nl]!r}")
    x, y, z = (int(v) for v in m.groups()[:3])
    dtype = m.group(4).decode()
    if dtype not in _VOL_DTYPES or min(x, y, z) <= 0:
        raise MalformedHeaderError(f"{path}: bad dims or dtype in header")
    shape = (z, y, x)
    if expected_shape is not None and tuple(expected_shape) != shape:
        raise DimensionMismatchError(f"{path}: header dims {shape} != expected {tuple(expected_shape)}")
    dt = np.dtype(dtype).newbyteorder("<")
    payload = data[nl + 1:]
    need = x * y * z * dt.itemsize
    if len(payload) < need:
        raise TruncatedPayloadError(f"{path}: expected {need} bytes, found {len(payload)}")
    if len(payload) > need:
        raise DimensionMismatchError(f"{path}: payload has {len(payload) - need} extra bytes")
    return np.frombuffer(payload, dtype=dt).astype(np.dtype(dtype)).reshape(shape)


def load_seeds(path, shape=None):
    """Seed mask (0 unlabeled, 1 background, 2 foreground) as ``(fg, bg)`` boolean arrays."""
    p = os.fspath(path)
    with open(p, "rb") as fh:
        head = fh.read(8)
    labels = load_volume(p) if head.startswith(_VOL_MAGIC) else load_image(p)
    if shape is not None and labels.shape != tuple(shape):
        raise DimensionMismatchError(f"seed mask shape {labels.shape} != image shape {tuple(shape)}")
    if np.any(labels > 2):
        raise ImageFormatError("seed labels must be 0, 1 or 2")
    return labels == 2, labels == 1


def encode_seeds(fg, bg) -> np.ndarray:
    fg = np.asarray(fg, dtype=bool)
    bg = np.asarray(bg, dtype=bool)
    if np.any(fg & bg):
        raise ValueError("a pixel cannot be both foreground and background")
    return (2 * fg + bg).astype(np.uint8)
