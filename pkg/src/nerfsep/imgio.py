"""PNG and raw depth-map I/O.

Depth maps use a small self-describing binary format (see docs/formats.md):

    bytes 0..7   magic b"NSEPDEP1"
    byte  8      endianness: 0x00 little, 0x01 big (writer always emits little)
    bytes 9..12  width  as uint32 in the declared endianness
    bytes 13..16 height as uint32
    bytes 17..   width*height float32 values, row-major
"""

from __future__ import annotations

import struct
from pathlib import Path

import numpy as np
from PIL import Image

DEPTH_MAGIC = b"NSEPDEP1"


def write_rgb(path: str | Path, image: np.ndarray) -> None:
    """Float image in [0,1], shape (H,W,3) -> 8-bit PNG."""
    arr = np.clip(np.asarray(image), 0.0, 1.0)
    Image.fromarray((arr * 255.0 + 0.5).astype(np.uint8), mode="RGB").save(path)


def read_rgb(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float64) / 255.0


def write_mask(path: str | Path, mask: np.ndarray) -> None:
    """Boolean (H,W) -> 1-bit PNG."""
    Image.fromarray(np.asarray(mask, dtype=bool)).convert("1").save(path)


def read_mask(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("1"), dtype=bool)


def write_depth(path: str | Path, depth: np.ndarray) -> None:
    depth = np.asarray(depth, dtype="<f4")
    if depth.ndim != 2:
        raise ValueError("depth map must be 2-D")
    h, w = depth.shape
    with open(path, "wb") as f:
        f.write(DEPTH_MAGIC)
        f.write(b"\x00")
        f.write(struct.pack("<II", w, h))
        f.write(np.ascontiguousarray(depth).tobytes())


def read_depth(path: str | Path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != DEPTH_MAGIC:
            raise ValueError(f"{path}: not a depth map (magic {magic!r})")
        endian = f.read(1)
        order = "<" if endian == b"\x00" else ">"
        w, h = struct.unpack(f"{order}II", f.read(8))
        data = np.frombuffer(f.read(w * h * 4), dtype=f"{order}f4")
        return data.reshape(h, w).astype(np.float32)
