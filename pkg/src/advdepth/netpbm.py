"""
Binary Netpbm (P5 greyscale, P6 RGB, maxval 255) and PFM greyscale I/O.

RGB tensors are channel-first (3 x h x w), greyscale maps are h x w. PFM is
written little-endian (scale ``-1.0``) with rows bottom-to-top as the format
requires; values are stored as float32, so a float64 map round-trips
bit-exactly iff every value is float32-representable.
"""

from __future__ import annotations

import os
import re

import numpy as np

from .errors import DataFormatError

_TOKEN = re.compile(rb"\s*(?:#[^\n]*\n\s*)*(\S+)")


def _header_tokens(buf: bytes, count: int):
    pos = 0
    tokens = []
    for _ in range(count):
        m = _TOKEN.match(buf, pos)
        if m is None:
            raise DataFormatError("truncated header", pos)
        tokens.append((m.group(1), m.start(1)))
        pos = m.end(1)
    # exactly one whitespace byte separates header and payload
    if pos >= len(buf) or buf[pos : pos + 1] not in (b" ", b"\n", b"\r", b"\t"):
        raise DataFormatError("missing whitespace after header", pos)
    return tokens, pos + 1


def _int_token(tok, what):
    value, off = tok
    if not value.isdigit():
        raise DataFormatError(f"bad {what} {value!r}", off)
    return int(value)


def encode_pnm(img: np.ndarray) -> bytes:
    """P6 for 3 x h x w, P5 for h x w; values are rounded to the nearest integer."""
    a = np.asarray(img)
    if a.ndim == 3 and a.shape[0] == 3:
        magic, h, w = b"P6", a.shape[1], a.shape[2]
        a = a.transpose(1, 2, 0)
    elif a.ndim == 2:
        magic, (h, w) = b"P5", a.shape
    else:
        raise ValueError(f"cannot encode array of shape {a.shape} as Netpbm")
    q = np.rint(np.asarray(a, dtype=np.float64))
    if q.min(initial=0) < 0 or q.max(initial=0) > 255:
        raise ValueError("pixel values outside [0, 255]")
    return magic + b"\n%d %d\n255\n" % (w, h) + q.astype(np.uint8).tobytes()


def decode_pnm(buf: bytes) -> np.ndarray:
    if buf[:2] not in (b"P5", b"P6"):
        raise DataFormatError(f"unsupported magic {buf[:2]!r}", 0)
    channels = 3 if buf[:2] == b"P6" else 1
    tokens, start = _header_tokens(buf, 4)
    w = _int_token(tokens[1], "width")
    h = _int_token(tokens[2], "height")
    maxval = _int_token(tokens[3], "maxval")
    if w == 0 or h == 0:
        raise DataFormatError("zero image dimension", tokens[1][1])
    if maxval != 255:
        raise DataFormatError(f"only maxval 255 supported, got {maxval}", tokens[3][1])
    need = w * h * channels
    if len(buf) - start < need:
        raise DataFormatError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf))
    px = np.frombuffer(buf, dtype=np.uint8, count=need, offset=start).astype(np.float64)
    if channels == 3:
        return px.reshape(h, w, 3).transpose(2, 0, 1).copy()
    return px.reshape(h, w)


def encode_pfm(depth: np.ndarray) -> bytes:
    a = np.asarray(depth, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"PFM writer expects an h x w map, got {a.shape}")
    h, w = a.shape
    header = b"Pf\n%d %d\n-1.0\n" % (w, h)
    return header + np.ascontiguousarray(a[::-1]).astype("<f4").tobytes()


def decode_pfm(buf: bytes) -> np.ndarray:
    if buf[:2] != b"Pf":
        raise DataFormatError(f"unsupported PFM magic {buf[:2]!r}", 0)
    tokens, start = _header_tokens(buf, 4)
    w = _int_token(tokens[1], "width")
    h = _int_token(tokens[2], "height")
    try:
        scale = float(tokens[3][0])
    except ValueError:
        raise DataFormatError(f"bad scale {tokens[3][0]!r}", tokens[3][1]) from None
    if scale == 0.0:
        raise DataFormatError("scale must be nonzero", tokens[3][1])
    dtype = "<f4" if scale < 0 else ">f4"
    need = 4 * w * h
    if len(buf) - start < need:
        raise DataFormatError(f"truncated payload: need {need} bytes, have {len(buf) - start}", len(buf))
    a = np.frombuffer(buf, dtype=dtype, count=w * h, offset=start).reshape(h, w)
    return a[::-1].astype(np.float64)


def _write(path, data):
    with open(path, "wb") as f:
        f.write(data)


def _read(path):
    with open(path, "rb") as f:
        return f.read()


def write_ppm(path, rgb):
    if np.asarray(rgb).ndim != 3:
        raise ValueError("PPM expects a 3 x h x w tensor")
    _write(path, encode_pnm(rgb))


def write_pgm(path, gray):
    if np.asarray(gray).ndim != 2:
        raise ValueError("PGM expects an h x w map")
    _write(path, encode_pnm(gray))


def write_pfm(path, depth):
    _write(path, encode_pfm(depth))


def read_pnm(path: str | os.PathLike) -> np.ndarray:
    return decode_pnm(_read(path))


def read_pfm(path: str | os.PathLike) -> np.ndarray:
    return decode_pfm(_read(path))
