"""Class-id rasters (PGM) and per-category binary map stacks."""

from __future__ import annotations

import os

import numpy as np

from ..errors import DimensionError, InputError

VOID, ROAD, SIDEWALK, BUILDING, SIGN, VEHICLE, PERSON, RIDER = range(8)
CLASS_NAMES = ("void", "road", "sidewalk", "building", "sign", "vehicle", "person", "rider")
STATIC_CLASSES = (ROAD, SIDEWALK, BUILDING, SIGN)
MAP_FACTOR = 5


def write_pgm(path, raster):
    raster = np.asarray(raster)
    if raster.ndim != 2:
        raise DimensionError(f"PGM raster must be 2-D, got {raster.shape}")
    if raster.min(initial=0) < 0 or raster.max(initial=0) > 255:
        raise InputError("PGM pixel values must lie in [0, 255]")
    h, w = raster.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(raster.astype(np.uint8).tobytes())


def _header_tokens(buf, path):
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(buf) and buf[pos:pos + 1].isspace():
            pos += 1
        if pos < len(buf) and buf[pos:pos + 1] == b"#":
            while pos < len(buf) and buf[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(buf) and not buf[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise InputError(f"{path}: truncated PGM header ({len(buf)} bytes)")
        tokens.append(buf[start:pos])
    return tokens, pos + 1


def read_pgm_header(path, buf=None):
    """Return (width, height, data offset, file size) of a binary PGM."""
    if buf is None:
        with open(path, "rb") as fh:
            buf = fh.read(64)
        size = os.path.getsize(path)
    else:
        size = len(buf)
    tokens, offset = _header_tokens(buf, path)
    if tokens[0] != b"P5":
        raise InputError(f"{path}: not a binary PGM (magic {tokens[0]!r})")
    try:
        w, h, maxval = (int(t) for t in tokens[1:])
    except ValueError:
        raise InputError(f"{path}: malformed PGM header") from None
    if maxval > 255:
        raise InputError(f"{path}: 16-bit PGM not supported")
    return w, h, offset, size


def check_pgm(path):
    w, h, offset, size = read_pgm_header(path)
    if size - offset != w * h:
        raise InputError(f"{path}: expected {w * h} pixel bytes for {w}x{h}, found {size - offset}")
    return w, h


def read_pgm(path):
    with open(path, "rb") as fh:
        buf = fh.read()
    w, h, offset, _ = read_pgm_header(path, buf)
    if len(buf) - offset != w * h:
        raise InputError(f"{path}: expected {w * h} pixel bytes for {w}x{h}, found {len(buf) - offset}")
    return np.frombuffer(buf, dtype=np.uint8, offset=offset).reshape(h, w).copy()


def downsample_max(mask, factor=MAP_FACTOR):
    """Max-pool a binary mask over non-overlapping factor x factor blocks."""
    h, w = mask.shape[-2:]
    if h % factor or w % factor:
        raise DimensionError(f"raster {h}x{w} is not divisible by {factor}")
    lead = mask.shape[:-2]
    blocks = mask.reshape(*lead, h // factor, factor, w // factor, factor)
    return blocks.max(axis=(-3, -1))


def build_category_maps(class_raster, target_box, factor=MAP_FACTOR, box_scale=1.0):
    """Split a class-id raster into the five category masks (p, pl, b, v, st).

    ``target_box`` is in full-image pixels; ``box_scale`` maps it onto the
    raster (raster pixels per image pixel). Result: uint8 array 5 x h x w.
    """
    raster = np.asarray(class_raster)
    bad = np.setdiff1d(np.unique(raster), np.arange(len(CLASS_NAMES)))
    if bad.size:
        raise InputError(f"unknown class ids in raster: {bad.tolist()}")
    h, w = raster.shape
    x1, y1, x2, y2 = (float(v) * box_scale for v in target_box)
    cols = np.arange(w) + 0.5
    rows = np.arange(h) + 0.5
    inside = ((rows >= y1) & (rows <= y2))[:, None] & ((cols >= x1) & (cols <= x2))[None, :]
    person = raster == PERSON
    p = person & inside
    pl = person & ~inside
    b = raster == RIDER
    v = raster == VEHICLE
    st = np.isin(raster, STATIC_CLASSES)
    stack = np.stack([p, pl, b, v, st]).astype(np.uint8)
    return downsample_max(stack, factor)
