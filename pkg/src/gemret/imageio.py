"""Binary PGM/PPM reading and writing (8-bit)."""
from pathlib import Path

import numpy as np


def write_pnm(path, img) -> None:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    magic = b"P5" if img.ndim == 2 else b"P6"
    if img.ndim == 3 and img.shape[2] != 3:
        raise ValueError("PNM images have 1 or 3 channels")
    h, w = img.shape[:2]
    data = np.round(np.clip(img, 0.0, 1.0) * 255).astype(np.uint8)
    Path(path).write_bytes(magic + b"\n%d %d\n255\n" % (w, h) + data.tobytes())


def _tokens(data: bytes, count: int, pos: int):
    out = []
    while len(out) < count:
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError("truncated PNM header")
        out.append(data[start:pos])
    return out, pos + 1


def read_pnm(path):
    """Return an ``(H, W, C)`` float64 image in ``[0, 1]``."""
    data = Path(path).read_bytes()
    magic = data[:2]
    if magic not in (b"P5", b"P6"):
        raise ValueError(f"{path}: not a binary PGM/PPM file")
    try:
        (w, h, maxval), pos = _tokens(data, 3, 2)
        w, h, maxval = int(w), int(h), int(maxval)
    except ValueError as exc:
        raise ValueError(f"{path}: bad PNM header ({exc})") from None
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PNM supported")
    c = 1 if magic == b"P5" else 3
    body = data[pos:pos + w * h * c]
    if len(body) != w * h * c:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w, c) / 255.0
