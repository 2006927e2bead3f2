"""Checkpoint archive: one binary file holding every named array plus metadata.

Byte layout (documented, stable; see docs/formats.md):

    bytes 0..7    magic b"NSEPCKP1"
    bytes 8..11   metadata length N as little-endian uint32
    bytes 12..    UTF-8 JSON metadata of exactly N bytes
    then          raw array payloads, concatenated in metadata entry order

Every payload is row-major (C order) little-endian float64 regardless of the
runtime dtype; the runtime dtype is recorded per entry and restored on load
(float32 values survive the f64 round trip bit-exactly). Metadata holds the
iteration counter, the run seed, the per-entry Adam step counts, and an
opaque ``extra`` dict (model topology, resolved config).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .optim import ParamStore, _Slot

MAGIC = b"NSEPCKP1"


def save_checkpoint(path: str | Path, store: ParamStore, iteration: int,
                    seed: int, extra: dict | None = None) -> None:
    entries = []
    payloads = []
    for name in store.names():
        p = store.params[name]
        slot = store.slots[name]
        for kind, arr in (("param", p.data), ("adam_m", slot.m), ("adam_v", slot.v)):
            entries.append({
                "name": name,
                "kind": kind,
                "shape": list(arr.shape),
                "dtype": str(arr.dtype),
                "step": slot.step,
                "lr_scale": store.lr_scales[name],
            })
            payloads.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    meta = {
        "version": 1,
        "iteration": iteration,
        "seed": seed,
        "entries": entries,
        "extra": extra or {},
    }
    blob = json.dumps(meta, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(blob)))
        f.write(blob)
        for payload in payloads:
            f.write(payload)
    tmp.replace(path)


def load_checkpoint(path: str | Path) -> tuple[ParamStore, int, int, dict]:
    """Returns (store, iteration, seed, extra)."""
    with open(path, "rb") as f:
        magic = f.read(8)
        if magic != MAGIC:
            raise ValueError(f"{path}: not a checkpoint archive (bad magic {magic!r})")
        (n,) = struct.unpack("<I", f.read(4))
        meta = json.loads(f.read(n).decode("utf-8"))
        store = ParamStore()
        pending: dict[str, dict[str, np.ndarray]] = {}
        for e in meta["entries"]:
            count = int(np.prod(e["shape"])) if e["shape"] else 1
            raw = np.frombuffer(f.read(count * 8), dtype="<f8")
            arr = raw.astype(e["dtype"]).reshape(e["shape"])
            pending.setdefault(e["name"], {"step": e["step"], "lr_scale": e["lr_scale"]})[e["kind"]] = arr
        for name, parts in pending.items():
            store.add(name, parts["param"], lr_scale=parts["lr_scale"])
            store.slots[name] = _Slot(parts["adam_m"].copy(), parts["adam_v"].copy(),
                                      step=parts["step"])
    return store, meta["iteration"], meta["seed"], meta["extra"]
