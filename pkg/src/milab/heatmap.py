"""Grayscale heatmaps on a slide's instance grid, written as binary PGM (P5)."""

from __future__ import annotations

from pathlib import Path

import numpy as np

NEUTRAL = 128


def to_gray(values) -> np.ndarray:
    """Map [0, 1] scores to 8-bit levels: 0 -> 0, 0.5 -> 128, 1 -> 255."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def render_grid(values, coords, shape=None, fill: int = NEUTRAL) -> np.ndarray:
    """Place per-instance scores in [0, 1] at their (row, col) cells."""
    coords = np.asarray(coords, dtype=np.int64)
    if shape is None:
        shape = (int(coords[:, 0].max()) + 1, int(coords[:, 1].max()) + 1)
    img = np.full(shape, fill, dtype=np.uint8)
    img[coords[:, 0], coords[:, 1]] = to_gray(values)
    return img


def pgm_bytes(img: np.ndarray, comment: str | None = None) -> bytes:
    img = np.asarray(img)
    if img.ndim != 2 or img.dtype != np.uint8:
        raise ValueError(f"expected a 2-D uint8 image, got {img.dtype} {img.shape}")
    h, w = img.shape
    head = b"P5\n"
    if comment:
        for line in comment.splitlines():
            head += b"# " + line.encode("ascii", "replace") + b"\n"
    head += f"{w} {h}\n255\n".encode()
    return head + img.tobytes()


def write_pgm(path, img: np.ndarray, comment: str | None = None) -> None:
    Path(path).write_bytes(pgm_bytes(img, comment))


def read_pgm(path) -> np.ndarray:
    """Minimal P5 reader (8-bit only), comments allowed in the header."""
    data = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError("only 8-bit binary PGM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    pixels = np.frombuffer(data, dtype=np.uint8, count=w * h, offset=pos + 1)
    return pixels.reshape(h, w).copy()
