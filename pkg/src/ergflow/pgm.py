"""Binary PGM (P5, maxval 255) image export/import.

Model-space images live in [-1, 1]; files store 8-bit grayscale after an
affine map with clamping.
"""

from __future__ import annotations

import os

import numpy as np


def to_uint8(image: np.ndarray) -> np.ndarray:
    x = np.clip((np.asarray(image, dtype=np.float64) + 1.0) / 2.0, 0.0, 1.0)
    return np.round(x * 255.0).astype(np.uint8)


def from_uint8(pixels: np.ndarray) -> np.ndarray:
    return (pixels.astype(np.float32) / np.float32(255.0)) * np.float32(2.0) - np.float32(1.0)


def write_pgm(path: str | os.PathLike, image: np.ndarray) -> None:
    """Write one grayscale image ([-1,1] floats, shape [H,W] or [1,H,W])."""
    img = np.asarray(image)
    if img.ndim == 3 and img.shape[0] == 1:
        img = img[0]
    if img.ndim != 2:
        raise ValueError(f"expected a single grayscale image, got shape {img.shape}")
    h, w = img.shape
    with open(path, "wb") as f:
        f.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        f.write(to_uint8(img).tobytes())


def read_pgm(path: str | os.PathLike) -> np.ndarray:
    """Read a binary PGM back into [-1,1] floats of shape [H,W]."""
    with open(path, "rb") as f:
        blob = f.read()
    fields: list[bytes] = []
    pos = 0
    while len(fields) < 4:
        while pos < len(blob) and blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            while pos < len(blob) and blob[pos : pos + 1] != b"\n":
                pos += 1
            continue
        start = pos
        while pos < len(blob) and not blob[pos : pos + 1].isspace():
            pos += 1
        fields.append(blob[start:pos])
    if fields[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (magic {fields[0]!r})")
    w, h, maxval = int(fields[1]), int(fields[2]), int(fields[3])
    if maxval != 255:
        raise ValueError(f"{path}: expected maxval 255, got {maxval}")
    pos += 1  # single whitespace after maxval
    raster = np.frombuffer(blob, dtype=np.uint8, count=w * h, offset=pos)
    if raster.size != w * h:
        raise ValueError(f"{path}: truncated raster")
    return from_uint8(raster.reshape(h, w))
