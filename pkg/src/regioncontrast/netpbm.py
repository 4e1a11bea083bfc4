"""Binary PGM (P5) and PPM (P6) readers/writers.

Grayscale images travel as float arrays in [0, 1] normalized by the file's
maxval; 16-bit samples are big-endian per the netpbm convention.  Region
label maps are stored as raw 16-bit P5 files whose samples are the labels
themselves (no normalization).
"""

from __future__ import annotations

import numpy as np

__all__ = [
    "read_pgm",
    "write_pgm",
    "read_region_pgm",
    "write_region_pgm",
    "write_ppm",
]


def _read_header(data: bytes, magic: bytes):
    """Parse 'P5'/'P6' header; returns (width, height, maxval, payload offset)."""
    if not data.startswith(magic):
        raise ValueError(f"expected {magic.decode()} file, got leading bytes {data[:2]!r}")
    pos = len(magic)
    fields = []
    while len(fields) < 3:
        # skip whitespace and '#' comments between header fields
        while pos < len(data) and data[pos:pos + 1].isspace():
            pos += 1
        if pos < len(data) and data[pos:pos + 1] == b"#":
            while pos < len(data) and data[pos] != 0x0A:
                pos += 1
            continue
        start = pos
        while pos < len(data) and not data[pos:pos + 1].isspace():
            pos += 1
        token = data[start:pos]
        if not token.isdigit():
            raise ValueError(f"malformed netpbm header near byte {start}: {token!r}")
        fields.append(int(token))
    pos += 1  # single whitespace byte separating header from payload
    width, height, maxval = fields
    if width <= 0 or height <= 0:
        raise ValueError(f"bad netpbm dimensions {width}x{height}")
    if not 0 < maxval < 65536:
        raise ValueError(f"bad netpbm maxval {maxval}")
    return width, height, maxval, pos


def read_pgm(path) -> np.ndarray:
    """Read binary PGM into float64 (H, W) in [0, 1] (divided by maxval)."""
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, maxval, pos = _read_header(data, b"P5")
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    n = w * h
    payload = data[pos:pos + n * dtype.itemsize]
    if len(payload) != n * dtype.itemsize:
        raise ValueError(f"truncated PGM payload: wanted {n * dtype.itemsize} bytes, got {len(payload)}")
    samples = np.frombuffer(payload, dtype=dtype).reshape(h, w)
    return samples.astype(np.float64) / maxval


def write_pgm(path, values: np.ndarray, maxval: int = 255) -> None:
    """Write float (H, W) values in [0, 1] as binary PGM with given maxval."""
    arr = np.asarray(values, dtype=np.float64)
    if arr.ndim != 2:
        raise ValueError(f"write_pgm: expected (H, W) array, got shape {arr.shape}")
    if not 0 < maxval < 65536:
        raise ValueError(f"write_pgm: bad maxval {maxval}")
    q = np.clip(np.rint(arr * maxval), 0, maxval)
    dtype = np.dtype(">u2") if maxval > 255 else np.dtype("u1")
    h, w = arr.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n{maxval}\n".encode("ascii"))
        fh.write(q.astype(dtype).tobytes())


def write_region_pgm(path, labels: np.ndarray) -> None:
    """Store an integer label map as raw 16-bit P5 (samples are labels)."""
    lab = np.asarray(labels)
    if lab.ndim != 2:
        raise ValueError(f"write_region_pgm: expected (H, W) labels, got shape {lab.shape}")
    if lab.min() < 0 or lab.max() > 65535:
        raise ValueError(f"write_region_pgm: labels outside [0, 65535]: {lab.min()}..{lab.max()}")
    h, w = lab.shape
    with open(path, "wb") as fh:
        fh.write(f"P5\n{w} {h}\n65535\n".encode("ascii"))
        fh.write(lab.astype(">u2").tobytes())


def read_region_pgm(path) -> np.ndarray:
    """Inverse of write_region_pgm: returns int64 labels."""
    with open(path, "rb") as fh:
        data = fh.read()
    w, h, maxval, pos = _read_header(data, b"P5")
    if maxval != 65535:
        raise ValueError(f"region maps are 16-bit PGM (maxval 65535), got maxval {maxval}")
    n = w * h * 2
    payload = data[pos:pos + n]
    if len(payload) != n:
        raise ValueError(f"truncated region PGM: wanted {n} payload bytes, got {len(payload)}")
    return np.frombuffer(payload, dtype=">u2").reshape(h, w).astype(np.int64)


def write_ppm(path, rgb: np.ndarray) -> None:
    """Write uint8 (H, W, 3) as binary PPM (P6, maxval 255)."""
    arr = np.asarray(rgb)
    if arr.ndim != 3 or arr.shape[2] != 3 or arr.dtype != np.uint8:
        raise ValueError(f"write_ppm: expected uint8 (H, W, 3), got {arr.dtype} {arr.shape}")
    h, w = arr.shape[:2]
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(arr.tobytes())
