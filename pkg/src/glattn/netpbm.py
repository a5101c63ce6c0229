"""Minimal binary netpbm (PGM P5 / PPM P6) reading and writing, maxval 255."""

from __future__ import annotations

import numpy as np


class NetpbmError(Exception):
    """Malformed netpbm file."""


def write_pgm(gray, path):
    """Write a (H, W) uint8 array as binary PGM."""
    arr = np.asarray(gray, dtype=np.uint8)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected (H, W), got {arr.shape}")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def write_ppm(rgb, path):
    """Write a (H, W, 3) uint8 array as binary PPM."""
    arr = np.asarray(rgb, dtype=np.uint8)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ValueError(f"write_ppm: expected (H, W, 3), got {arr.shape}")
    h, w, _ = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())


def _parse_header(raw, magic, path):
    if raw[:2] != magic:
        raise NetpbmError(f"{path}: bad magic {raw[:2]!r}, expected {magic!r}")
    fields = []
    pos = 2
    while len(fields) < 3:
        while pos < len(raw) and raw[pos : pos + 1].isspace():
            pos += 1
        if pos < len(raw) and raw[pos : pos + 1] == b"#":  # comment line
            while pos < len(raw) and raw[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos : pos + 1].isspace():
            pos += 1
        if start == pos:
            raise NetpbmError(f"{path}: truncated header")
        try:
            fields.append(int(raw[start:pos]))
        except ValueError:
            raise NetpbmError(f"{path}: non-numeric header field {raw[start:pos]!r}")
    pos += 1  # single whitespace after maxval
    w, h, maxval = fields
    if maxval != 255:
        raise NetpbmError(f"{path}: unsupported maxval {maxval}")
    return w, h, pos


def read_pgm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, pos = _parse_header(raw, b"P5", path)
    if len(raw) - pos != w * h:
        raise NetpbmError(f"{path}: expected {w * h} pixel bytes, got {len(raw) - pos}")
    return np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos).reshape(h, w).copy()


def read_ppm(path):
    with open(path, "rb") as fh:
        raw = fh.read()
    w, h, pos = _parse_header(raw, b"P6", path)
    if len(raw) - pos != w * h * 3:
        raise NetpbmError(f"{path}: expected {w * h * 3} pixel bytes, got {len(raw) - pos}")
    return (
        np.frombuffer(raw, dtype=np.uint8, count=w * h * 3, offset=pos)
        .reshape(h, w, 3)
        .copy()
    )
