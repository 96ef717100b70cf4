"""16-bit binary PGM (P5) read/write for debug dumps and dataset export.

Samples are stored big-endian as the PGM format requires. The real value of a
sample ``q`` is ``q / 65535 * scale``; ``scale`` is written in a header comment
(``# scale <float>``) and restored on read.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

MAXVAL = 65535


def write_pgm(path, img: np.ndarray, scale: float = 1.0) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim != 2:
        raise ValueError(f"PGM holds a single channel, got shape {img.shape}")
    if scale <= 0:
        raise ValueError("scale must be positive")
    q = np.rint(np.clip(img / scale, 0.0, 1.0) * MAXVAL).astype(">u2")
    h, w = img.shape
    header = f"P5\n# scale {scale!r}\n{w} {h}\n{MAXVAL}\n".encode("ascii")
    Path(path).write_bytes(header + q.tobytes())


def _tokens(data: bytes):
    """Split the header into its four tokens; return them, the comments and the raster offset."""
    pos = 0
    comments = []
    toks = []
    while len(toks) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            end = data.index(b"\n", pos)
            comments.append(data[pos + 1:end].decode("ascii").strip())
            pos = end + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        toks.append(data[start:pos].decode("ascii"))
    # exactly one whitespace byte separates maxval from the raster
    return toks, comments, pos + 1


def read_pgm(path) -> np.ndarray:
    data = Path(path).read_bytes()
    toks, comments, offset = _tokens(data)
    if toks[0] != "P5":
        raise ValueError(f"{path}: not a binary PGM")
    w, h, maxval = int(toks[1]), int(toks[2]), int(toks[3])
    scale = 1.0
    for c in comments:
        if c.startswith("scale "):
            scale = float(c.split()[1])
    dtype = ">u2" if maxval > 255 else "u1"
    q = np.frombuffer(data, dtype=dtype, count=w * h, offset=offset).reshape(h, w)
    return q.astype(np.float64) / maxval * scale


def dump_image(prefix, img: np.ndarray, scale: float = 1.0) -> list[Path]:
    """Write one PGM per channel: ``<prefix>_c0.pgm``, ``<prefix>_c1.pgm``, ..."""
    img = np.asarray(img)
    if img.ndim == 2:
        img = img[..., None]
    paths = []
    for c in range(img.shape[-1]):
        p = Path(f"{prefix}_c{c}.pgm")
        write_pgm(p, img[..., c], scale)
        paths.append(p)
    return paths
