"""Binary portable pixmap (P6) and graymap (P5) I/O, 8-bit only."""

from __future__ import annotations

import numpy as np


def _to_u8(img: np.ndarray) -> np.ndarray:
    if img.dtype == np.uint8:
        return img
    return np.clip(np.rint(np.asarray(img, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)


def write_ppm(path, image: np.ndarray) -> None:
    """Write an H x W x 3 image; float input is taken to lie in [0, 1]."""
    u8 = _to_u8(image)
    if u8.ndim != 3 or u8.shape[2] != 3:
        raise ValueError(f"P6 needs H x W x 3, got {u8.shape}")
    h, w, _ = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(u8).tobytes())


def write_pgm(path, gray: np.ndarray) -> None:
    u8 = np.asarray(gray)
    if u8.dtype != np.uint8 or u8.ndim != 2:
        raise ValueError("P5 writer expects a 2-D uint8 array")
    h, w = u8.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n255\n".encode("ascii"))
        fh.write(np.ascontiguousarray(u8).tobytes())


def _read(path, magic: bytes):
    with open(path, "rb") as fh:
        blob = fh.read()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while blob[pos : pos + 1].isspace():
            pos += 1
        if blob[pos : pos + 1] == b"#":
            pos = blob.index(b"\n", pos) + 1
            continue
        start = pos
        while not blob[pos : pos + 1].isspace():
            pos += 1
        tokens.append(blob[start:pos])
    if tokens[0] != magic:
        raise ValueError(f"{path}: expected {magic!r} header, found {tokens[0]!r}")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError("only 8-bit maps are supported")
    return blob[pos + 1 :], w, h


def read_ppm(path) -> np.ndarray:
    """Return a float32 H x W x 3 image in [0, 1]."""
    raw, w, h = _read(path, b"P6")
    return (np.frombuffer(raw[: w * h * 3], dtype=np.uint8).reshape(h, w, 3) / 255.0).astype(np.float32)


def read_pgm(path) -> np.ndarray:
    raw, w, h = _read(path, b"P5")
    return np.frombuffer(raw[: w * h], dtype=np.uint8).reshape(h, w).copy()
