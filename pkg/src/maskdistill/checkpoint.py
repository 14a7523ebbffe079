"""Self-describing binary container for checkpoints and mask plans.

Layout::

    b"MDCK" | uint32 version | uint64 header length | UTF-8 JSON header | payload

The header holds free-form metadata plus an ``entries`` list of
``{name, shape, kind, offset, nbytes}``. ``kind`` is ``"f8"`` for little-endian
float64 data or ``"bits"`` for boolean arrays packed 8 per byte, little-endian
bit order. Offsets are relative to the start of the payload.
"""

from __future__ import annotations

import json
import os
import struct
from pathlib import Path

import numpy as np

from .errors import MissingArtifactError, StructuralError
from .model import Model, ModelConfig, ParameterView

MAGIC = b"MDCK"
VERSION = 1


def write_container(path, meta: dict, arrays: list[tuple[str, np.ndarray]]) -> None:
    entries, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.asarray(arr)
        if arr.dtype == bool:
            kind = "bits"
            blob = np.packbits(arr.ravel(), bitorder="little").tobytes()
        else:
            kind = "f8"
            blob = np.ascontiguousarray(arr, dtype="<f8").tobytes()
        entries.append({"name": name, "shape": list(arr.shape), "kind": kind,
                        "offset": offset, "nbytes": len(blob)})
        chunks.append(blob)
        offset += len(blob)
    header = json.dumps({"meta": meta, "entries": entries}, sort_keys=True).encode("utf-8")
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<IQ", VERSION, len(header)))
        fh.write(header)
        for blob in chunks:
            fh.write(blob)
    os.replace(tmp, path)


def read_container(path) -> tuple[dict, list[tuple[str, np.ndarray]]]:
    path = Path(path)
    if not path.exists():
        raise MissingArtifactError(f"no such container: {path}")
    raw = path.read_bytes()
    if raw[:4] != MAGIC:
        raise StructuralError(f"{path} is not a checkpoint container")
    version, hlen = struct.unpack("<IQ", raw[4:16])
    if version != VERSION:
        raise StructuralError(f"unsupported container version {version}")
    header = json.loads(raw[16:16 + hlen].decode("utf-8"))
    payload = memoryview(raw)[16 + hlen:]
    arrays = []
    for e in header["entries"]:
        blob = payload[e["offset"]:e["offset"] + e["nbytes"]]
        shape = tuple(e["shape"])
        if e["kind"] == "bits":
            count = int(np.prod(shape, dtype=np.int64))
            bits = np.unpackbits(np.frombuffer(blob, dtype=np.uint8), count=count, bitorder="little")
            arr = bits.astype(bool).reshape(shape)
        elif e["kind"] == "f8":
            arr = np.frombuffer(blob, dtype="<f8").astype(np.float64).reshape(shape)
        else:
            raise StructuralError(f"unknown entry kind {e['kind']!r}")
        arrays.append((e["name"], arr))
    return header["meta"], arrays


def save_model(path, model: Model, extra: dict | None = None) -> None:
    meta = {"type": "model", "config": model.config.to_dict(), **(extra or {})}
    write_container(path, meta, [(name, values) for name, values in model.params.items()])


def load_model(path) -> Model:
    meta, arrays = read_container(path)
    if meta.get("type") != "model":
        raise StructuralError(f"{path} does not hold a model checkpoint")
    return Model(ModelConfig(**meta["config"]), ParameterView(arrays))


def load_meta(path) -> dict:
    return read_container(path)[0]
