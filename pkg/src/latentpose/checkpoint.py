"""Single-file checkpoint container used by every model in the package.

All checkpoints (shape model, generator, regressor, embedders, encoder,
direction matrices) share one byte layout so that any language can read
them without this library:

    bytes 0..7    magic ``b"LPCKPT01"``
    bytes 8..15   uint64 little-endian, length H of the JSON header
    bytes 16..16+H UTF-8 JSON header
    then          concatenated tensor payloads, no padding

The JSON header is::

    {
      "version": 1,
      "kind": "<checkpoint kind, e.g. 'shape_model'>",
      "meta": { ... small JSON-serialisable scalars/lists ... },
      "tensors": {
        "<name>": {"dtype": "<f8|f4|i8>", "shape": [...], "offset": o, "nbytes": n}
      }
    }

Tensor payloads are row-major (C order), little-endian, at byte ``offset``
from the start of the payload section. ``meta`` holds everything that is
not an array (seeds, dimensions, calibration scalars).
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np

from .errors import ContractViolation, MissingCheckpoint

MAGIC = b"LPCKPT01"
VERSION = 1

_DTYPES = {"f8": np.float64, "f4": np.float32, "i8": np.int64}
_DTYPE_CODES = {np.dtype(np.float64): "f8", np.dtype(np.float32): "f4", np.dtype(np.int64): "i8"}


class Checkpoint:
    """In-memory view of one checkpoint: a kind, scalar meta, named arrays."""

    def __init__(self, kind: str, meta: dict | None = None, tensors: dict[str, np.ndarray] | None = None):
        self.kind = kind
        self.meta = dict(meta or {})
        self.tensors = dict(tensors or {})

    def save(self, path: str | Path) -> None:
        path = Path(path)
        names = sorted(self.tensors)
        entries = {}
        offset = 0
        blobs = []
        for name in names:
            arr = np.ascontiguousarray(self.tensors[name])
            if arr.dtype not in _DTYPE_CODES:
                raise ContractViolation(f"unsupported checkpoint dtype {arr.dtype} for tensor '{name}'")
            raw = arr.astype(arr.dtype.newbyteorder("<"), copy=False).tobytes()
            entries[name] = {
                "dtype": _DTYPE_CODES[arr.dtype],
                "shape": list(arr.shape),
                "offset": offset,
                "nbytes": len(raw),
            }
            offset += len(raw)
            blobs.append(raw)
        header = json.dumps(
            {"version": VERSION, "kind": self.kind, "meta": self.meta, "tensors": entries},
            sort_keys=True,
        ).encode("utf-8")
        path.parent.mkdir(parents=True, exist_ok=True)
        with open(path, "wb") as f:
            f.write(MAGIC)
            f.write(struct.pack("<Q", len(header)))
            f.write(header)
            for raw in blobs:
                f.write(raw)

    @classmethod
    def load(cls, path: str | Path, expect_kind: str | None = None) -> "Checkpoint":
        path = Path(path)
        if not path.exists():
            raise MissingCheckpoint(expect_kind or path.stem, str(path))
        with open(path, "rb") as f:
            magic = f.read(8)
            if magic != MAGIC:
                raise ContractViolation(f"{path}: not a checkpoint file (bad magic {magic!r})")
            (hlen,) = struct.unpack("<Q", f.read(8))
            header = json.loads(f.read(hlen).decode("utf-8"))
            if header.get("version") != VERSION:
                raise ContractViolation(f"{path}: unsupported checkpoint version {header.get('version')}")
            payload = f.read()
        tensors = {}
        for name, ent in header["tensors"].items():
            dt = np.dtype(_DTYPES[ent["dtype"]]).newbyteorder("<")
            raw = payload[ent["offset"] : ent["offset"] + ent["nbytes"]]
            tensors[name] = np.frombuffer(raw, dtype=dt).astype(_DTYPES[ent["dtype"]]).reshape(ent["shape"])
        ckpt = cls(header["kind"], header["meta"], tensors)
        if expect_kind is not None and ckpt.kind != expect_kind:
            raise ContractViolation(f"{path}: expected checkpoint kind '{expect_kind}', found '{ckpt.kind}'")
        return ckpt
