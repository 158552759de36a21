"""Weight bundle: ``manifest.json`` plus one raw little-endian file per tensor.

Encodings:

* ``packed-bipolar`` -- 64-bit little-endian word stream of a :class:`PackedBitTensor`
* ``int-le`` -- two's complement at the smallest byte width that holds ``bits``
* ``float64-le`` -- IEEE doubles (BatchNorm statistics, affine constants)
"""
from __future__ import annotations

import json
import os
from pathlib import Path

import numpy as np

from .qtensor import FTensor, PackedBitTensor, QTensor, Tensor, _row_split, words_per_row

MANIFEST = "manifest.json"
_INT_DTYPES = {1: "<i1", 2: "<i1", 4: "<i1", 8: "<i1", 16: "<i2", 32: "<i4"}


class ManifestMismatch(ValueError):
    def __init__(self, tensor, expected, found):
        super().__init__(f"tensor {tensor!r}: expected {expected}, found {found}")
        self.tensor, self.expected, self.found = tensor, expected, found


def _file_name(name: str) -> str:
    return name.replace("/", "__") + ".bin"


def encode(t: Tensor) -> tuple[dict, bytes]:
    if isinstance(t, PackedBitTensor):
        entry = {"shape": list(t.shape), "bits": 1, "scale": 1.0, "encoding": "packed-bipolar"}
        return entry, t.words.astype("<u8").tobytes()
    if isinstance(t, QTensor):
        scale = t.scale if isinstance(t.scale, float) else [float(s) for s in t.scale]
        entry = {"shape": list(t.shape), "bits": t.bits, "scale": scale, "encoding": "int-le"}
        return entry, t.data.astype(_INT_DTYPES[t.bits]).tobytes()
    if isinstance(t, FTensor):
        entry = {"shape": list(t.shape), "bits": 64, "scale": 1.0, "encoding": "float64-le"}
        return entry, t.data.astype("<f8").tobytes()
    raise TypeError(f"cannot encode {type(t).__name__}")


def decode(entry: dict, raw: bytes) -> Tensor:
    shape = tuple(entry["shape"])
    enc = entry["encoding"]
    if enc == "packed-bipolar":
        rows, n = _row_split(shape)
        words = np.frombuffer(raw, dtype="<u8")
        if words.size != rows * words_per_row(n):
            raise ManifestMismatch(entry["name"], rows * words_per_row(n), words.size)
        return PackedBitTensor(shape, words.astype(np.uint64))
    if enc == "int-le":
        data = np.frombuffer(raw, dtype=_INT_DTYPES[entry["bits"]]).astype(np.int64)
        if data.size != int(np.prod(shape)):
            raise ManifestMismatch(entry["name"], int(np.prod(shape)), data.size)
        scale = entry["scale"]
        scale = np.asarray(scale, dtype=np.float64) if isinstance(scale, list) else float(scale)
        return QTensor(shape, data.reshape(shape), entry["bits"], scale)
    if enc == "float64-le":
        data = np.frombuffer(raw, dtype="<f8")
        if data.size != int(np.prod(shape)):
            raise ManifestMismatch(entry["name"], int(np.prod(shape)), data.size)
        return FTensor(shape, data.reshape(shape))
    raise ValueError(f"unknown encoding {enc!r}")


def write_bundle(tensors: dict[str, Tensor], path) -> None:
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    manifest = []
    for name in sorted(tensors):
        entry, raw = encode(tensors[name])
        entry = {"name": name, **entry, "file": _file_name(name)}
        (path / entry["file"]).write_bytes(raw)
        manifest.append(entry)
    tmp = path / (MANIFEST + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    os.replace(tmp, path / MANIFEST)


def read_bundle(path) -> dict[str, Tensor]:
    path = Path(path)
    manifest = json.loads((path / MANIFEST).read_text())
    return {e["name"]: decode(e, (path / e["file"]).read_bytes()) for e in manifest}
