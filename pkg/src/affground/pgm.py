"""Binary PGM (P5) reader/writer for masks and heatmaps.

Maps are stored single-channel with maxval 255; a byte v encodes the
intensity v/255, so write -> read round-trips the quantized values
bit-exactly. Masks use only {0, 255}.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 255


def write_pgm(path: Path, values: np.ndarray) -> None:
    """Quantize a float map in [0, 1] (values are clipped) to 8-bit and
    write it as P5."""
    a = np.asarray(values, dtype=np.float64)
    if a.ndim != 2:
        raise ValueError(f"write_pgm: expected a 2D map, got shape {a.shape}")
    q = quantize(a)
    h, w = q.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{MAXVAL}\n".encode("ascii"))
        fh.write(q.tobytes())


def quantize(values: np.ndarray) -> np.ndarray:
    return np.rint(np.clip(values, 0.0, 1.0) * MAXVAL).astype(np.uint8)


def read_pgm(path: Path) -> np.ndarray:
    """Read a P5 file back as a float64 map in [0, 1]."""
    raw = Path(path).read_bytes()
    tokens, offset = _header_tokens(raw)
    if tokens[0] != b"P5":
        raise ValueError(f"read_pgm: {path}: not a P5 file (magic {tokens[0]!r})")
    w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
    if maxval <= 0 or maxval > 255:
        raise ValueError(f"read_pgm: {path}: unsupported maxval {maxval}")
    pixels = raw[offset:offset + w * h]
    if len(pixels) < w * h:
        raise ValueError(f"read_pgm: {path}: truncated pixel data")
    img = np.frombuffer(pixels, dtype=np.uint8).reshape(h, w)
    return img.astype(np.float64) / maxval


def _header_tokens(raw: bytes) -> tuple[list[bytes], int]:
    """Collect the four header tokens (magic, width, height, maxval),
    skipping comment lines, and return the offset of the pixel data
    (one whitespace byte past the maxval token)."""
    tokens: list[bytes] = []
    i = 0
    while len(tokens) < 4:
        if i >= len(raw):
            raise ValueError("read_pgm: truncated header")
        c = raw[i:i + 1]
        if c == b"#":
            while i < len(raw) and raw[i:i + 1] != b"\n":
                i += 1
            i += 1
        elif c.isspace():
            i += 1
        else:
            start = i
            while i < len(raw) and not raw[i:i + 1].isspace():
                i += 1
            tokens.append(raw[start:i])
    return tokens, i + 1
