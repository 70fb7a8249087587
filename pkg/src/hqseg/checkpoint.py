"""Self-describing, byte-deterministic checkpoint container.

Layout (all integers little-endian):

    bytes 0..8    magic b"HQSEGCK1"
    bytes 8..16   uint64 header length in bytes
    header        UTF-8 JSON with sorted keys:
                    {"config": {...}, "entries": [{"name", "shape", "offset",
                     "nbytes"}, ...]}
    payload       raw C-order float64 bytes of each entry, concatenated in
                  entry order (entries are sorted by name)

No timestamps or environment data are written, so identical inputs produce
byte-identical files.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

MAGIC = b"HQSEGCK1"


def save_checkpoint(path, config: dict, arrays: dict[str, np.ndarray]) -> None:
    entries = []
    offset = 0
    names = sorted(arrays)
    blobs = []
    for name in names:
        arr = np.ascontiguousarray(arrays[name], dtype=np.float64)
        blob = arr.tobytes()
        entries.append(
            {"name": name, "shape": list(arr.shape), "offset": offset, "nbytes": len(blob)}
        )
        blobs.append(blob)
        offset += len(blob)
    header = json.dumps({"config": config, "entries": entries}, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(len(header).to_bytes(8, "little"))
        fh.write(header)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path) -> tuple[dict, dict[str, np.ndarray]]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise ValueError(f"{path} is not a checkpoint file (bad magic)")
    hlen = int.from_bytes(raw[8:16], "little")
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    base = 16 + hlen
    arrays = {}
    for e in header["entries"]:
        start = base + e["offset"]
        buf = raw[start : start + e["nbytes"]]
        arrays[e["name"]] = np.frombuffer(buf, dtype=np.float64).reshape(e["shape"]).copy()
    return header["config"], arrays
