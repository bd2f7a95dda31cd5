"""Binary 8-bit PGM (P5) read/write for images and BEV channels."""

from pathlib import Path

import numpy as np


def write_pgm(path, image: np.ndarray, maxval: int = 255) -> None:
    """Write a 2-D array with values in [0, 1] as an 8-bit PGM."""
    img = np.asarray(image, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM needs a 2-D array, got shape {img.shape}")
    q = np.rint(np.clip(img, 0.0, 1.0) * maxval).astype(np.uint8)
    h, w = q.shape
    Path(path).write_bytes(f"P5\n{w} {h}\n{maxval}\n".encode("ascii") + q.tobytes())


def read_pgm(path) -> np.ndarray:
    """Read an 8-bit PGM back into floats in [0, 1]."""
    raw = Path(path).read_bytes()
    parts = []
    pos = 0
    while len(parts) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        end = pos
        while not raw[end:end + 1].isspace():
            end += 1
        parts.append(raw[pos:end])
        pos = end
    pos += 1
    if parts[0] != b"P5":
        raise ValueError("not a binary PGM")
    w, h, maxval = map(int, parts[1:])
    data = np.frombuffer(raw, dtype=np.uint8, count=w * h, offset=pos)
    return data.reshape(h, w).astype(np.float64) / maxval
