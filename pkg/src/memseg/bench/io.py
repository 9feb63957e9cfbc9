"""Text-grid serialization: images, masks, label maps.

Images use a P3-style 16-bit pixmap; since rendering quantizes to the
same grid, write/read round-trips are bit-exact.  Masks use a P1-style
bitmap and label maps a plain integer grid with a background sentinel.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .taxonomy import QUANT


class FormatError(ValueError):
    """Malformed image/mask/label file."""


def write_ppm16(path, img: np.ndarray) -> None:
    """(3, H, W) float64 values on the k/65535 grid -> P3 text pixmap."""
    c, h, w = img.shape
    if c != 3:
        raise FormatError("pixmap writer expects 3 channels")
    q = np.round(img * QUANT).astype(np.int64)
    if q.min() < 0 or q.max() > QUANT:
        raise FormatError("image values outside [0, 1]")
    lines = ["P3", f"{w} {h}", str(QUANT)]
    flat = q.transpose(1, 2, 0).reshape(h, w * 3)
    lines += [" ".join(map(str, row)) for row in flat]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_ppm16(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if not tokens or tokens[0] != "P3":
        raise FormatError(f"not a P3 pixmap: {path}")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval != QUANT:
        raise FormatError(f"expected maxval {QUANT}, got {maxval}")
    vals = np.array(tokens[4:], dtype=np.int64)
    if vals.size != w * h * 3:
        raise FormatError("pixel count mismatch")
    return vals.reshape(h, w, 3).transpose(2, 0, 1).astype(np.float64) / QUANT


def write_pbm(path, mask: np.ndarray) -> None:
    """(H, W) {0,1} mask -> P1 text bitmap."""
    h, w = mask.shape
    lines = ["P1", f"{w} {h}"]
    lines += [" ".join(str(int(v)) for v in row) for row in np.asarray(mask)]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_pbm(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if not tokens or tokens[0] != "P1":
        raise FormatError(f"not a P1 bitmap: {path}")
    w, h = int(tokens[1]), int(tokens[2])
    vals = np.array(tokens[3:], dtype=np.uint8)
    if vals.size != w * h:
        raise FormatError("pixel count mismatch")
    if not np.all((vals == 0) | (vals == 1)):
        raise FormatError("bitmap values must be 0/1")
    return vals.reshape(h, w)


def write_labelmap(path, labels: np.ndarray) -> None:
    """(H, W) integer class labels (-1 background) as a plain text grid."""
    h, w = labels.shape
    lines = [f"L1 {w} {h}"]
    lines += [" ".join(str(int(v)) for v in row) for row in labels]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_labelmap(path) -> np.ndarray:
    tokens = Path(path).read_text(encoding="ascii").split()
    if not tokens or tokens[0] != "L1":
        raise FormatError(f"not a label map: {path}")
    w, h = int(tokens[1]), int(tokens[2])
    vals = np.array(tokens[3:], dtype=np.int64)
    if vals.size != w * h:
        raise FormatError("label count mismatch")
    return vals.reshape(h, w)
