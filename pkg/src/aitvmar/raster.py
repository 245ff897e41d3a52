"""Flat raster files: a raw little-endian ``.bin`` payload plus a ``.json`` sidecar.

Sidecar fields::

    {"kind": "image" | "sinogram" | "mask",
     "dims": [rows, cols],
     "dtype": "f32" | "u8",
     "geometry": {...},        # optional FanBeamGeometry fields
     "meta": {...}}            # free-form

Rows are stored one after another (C order), ``dims[0]`` being the row count.
"""

from dataclasses import dataclass, field
import json
from pathlib import Path

import numpy as np

from .projector import FanBeamGeometry

KINDS = ("image", "sinogram", "mask")
DTYPES = {"f32": np.dtype("<f4"), "u8": np.dtype("u1")}


@dataclass
class RasterFile:
    data: np.ndarray
    kind: str = "image"
    geometry: FanBeamGeometry = None
    meta: dict = field(default_factory=dict)

    @property
    def dtype(self):
        return "u8" if self.kind == "mask" else "f32"


def _paths(path):
    p = Path(path)
    if p.suffix in (".bin", ".json"):
        p = p.with_suffix("")
    return p.with_suffix(".json"), p.with_suffix(".bin")


def write_raster(path, data, kind="image", geometry=None, meta=None):
    """Write ``data`` to ``<path>.bin`` and ``<path>.json``; returns the sidecar path.

    Masks are stored as ``u8``, everything else as ``f32``.
    """
    if kind not in KINDS:
        raise ValueError(f"kind must be one of {KINDS}")
    arr = np.asarray(data)
    if arr.ndim != 2:
        raise ValueError("raster data must be two-dimensional")
    dtype = "u8" if kind == "mask" else "f32"
    payload = np.ascontiguousarray(arr.astype(DTYPES[dtype]))
    side, binp = _paths(path)
    side.parent.mkdir(parents=True, exist_ok=True)
    binp.write_bytes(payload.tobytes())
    doc = {"kind": kind, "dims": list(arr.shape), "dtype": dtype, "meta": meta or {}}
    if geometry is not None:
        doc["geometry"] = geometry.to_dict()
    side.write_text(json.dumps(doc, indent=2, sort_keys=True))
    return side


def read_raster(path):
    side, binp = _paths(path)
    doc = json.loads(side.read_text())
    for key in ("kind", "dims", "dtype"):
        if key not in doc:
            raise ValueError(f"sidecar {side} lacks {key!r}")
    if doc["kind"] not in KINDS or doc["dtype"] not in DTYPES:
        raise ValueError(f"bad kind/dtype in {side}")
    rows, cols = (int(v) for v in doc["dims"])
    dt = DTYPES[doc["dtype"]]
    raw = binp.read_bytes()
    if len(raw) != rows * cols * dt.itemsize:
        raise ValueError(f"{binp} holds {len(raw)} bytes, expected {rows * cols * dt.itemsize}")
    data = np.frombuffer(raw, dtype=dt).reshape(rows, cols)
    data = data.astype(bool) if doc["kind"] == "mask" else data.astype(np.float64)
    geom = FanBeamGeometry.from_dict(doc["geometry"]) if doc.get("geometry") else None
    return RasterFile(data, doc["kind"], geom, doc.get("meta", {}))
