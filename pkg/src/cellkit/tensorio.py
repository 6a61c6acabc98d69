"""Bit-exact file formats for tensors, cell records, embeddings, and GeoJSON.

Tensor container ("CVTT") byte layout, little-endian throughout:

    offset  size        field
    0       4           magic, ASCII "CVTT"
    4       1           version, currently 1
    5       1           dtype code: 1=float32, 2=uint8, 3=uint32
    6       1           ndim, in [1, 4]
    7       4 * ndim    dims, unsigned 32-bit each
    ...     prod(dims) * itemsize   payload, row-major values

The header is therefore 7 + 4*ndim bytes. Readers reject unknown magic,
version, or dtype codes, and refuse tensors whose element count exceeds
2**40. Cell records are stored as JSON lines, one object per line; fields
not defined here ride along untouched so downstream stages can attach
provenance. GeoJSON output follows RFC 7946 shapes with pixel coordinates
(x = column, y = row); no CRS member is emitted on purpose.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, BinaryIO

import numpy as np

from .errors import CellKitError

MAGIC = b"CVTT"
VERSION = 1
MAX_ELEMENTS = 2**40

_DTYPE_CODES = {1: np.dtype("<f4"), 2: np.dtype("|u1"), 3: np.dtype("<u4")}
_CODE_FOR_KIND = {("f", 4): 1, ("u", 1): 2, ("u", 4): 3}


class TensorFormatError(CellKitError):
    """Base for CVTT container violations."""


class BadMagic(TensorFormatError):
    pass


class BadVersion(TensorFormatError):
    pass


class UnknownDtype(TensorFormatError):
    pass


class BadRank(TensorFormatError):
    pass


class TruncatedPayload(TensorFormatError):
    pass


class DimOverflow(TensorFormatError):
    pass


class MalformedLine(CellKitError):
    """A cell-store line failed to parse; carries the 1-based line number."""

    def __init__(self, line_number: int, reason: str = ""):
        self.line_number = line_number
        super().__init__(f"line {line_number}: {reason or 'not valid JSON'}")


class UnknownClass(CellKitError):
    """A cell label has no entry in the class-name mapping."""


def _dtype_code(arr: np.ndarray) -> int:
    key = (arr.dtype.kind, arr.dtype.itemsize)
    code = _CODE_FOR_KIND.get(key)
    if code is None:
        raise UnknownDtype(f"unsupported dtype {arr.dtype}; use float32, uint8, or uint32")
    return code


def write_tensor_stream(f: BinaryIO, arr: np.ndarray) -> None:
    """Write one CVTT tensor to an open binary stream."""
    code = _dtype_code(arr)
    if not 1 <= arr.ndim <= 4:
        raise BadRank(f"ndim must be in [1, 4], got {arr.ndim}")
    if arr.size > MAX_ELEMENTS:
        raise DimOverflow(f"{arr.size} elements exceeds 2**40")
    out = arr.astype(_DTYPE_CODES[code], copy=False)
    f.write(MAGIC)
    f.write(struct.pack("<BBB", VERSION, code, arr.ndim))
    f.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
    f.write(np.ascontiguousarray(out).tobytes())


def write_tensor(path: str | Path, arr: np.ndarray) -> None:
    """Write `arr` to `path` in the CVTT container. Round-trips bit-exactly."""
    with open(path, "wb") as f:
        write_tensor_stream(f, arr)


def read_tensor(path: str | Path) -> np.ndarray:
    """Read a CVTT tensor; returns an array with the declared dims and dtype."""
    with open(path, "rb") as f:
        return read_tensor_stream(f, allow_trailing=False)


def read_tensor_stream(f: BinaryIO, allow_trailing: bool = True) -> np.ndarray:
    head = f.read(7)
    if len(head) < 7 or head[:4] != MAGIC:
        raise BadMagic(f"expected {MAGIC!r} header")
    version, code, ndim = struct.unpack("<BBB", head[4:7])
    if version != VERSION:
        raise BadVersion(f"unsupported version {version}")
    if code not in _DTYPE_CODES:
        raise UnknownDtype(f"unknown dtype code {code}")
    if not 1 <= ndim <= 4:
        raise BadRank(f"ndim must be in [1, 4], got {ndim}")
    raw_dims = f.read(4 * ndim)
    if len(raw_dims) < 4 * ndim:
        raise TruncatedPayload("header ends before dims")
    dims = struct.unpack(f"<{ndim}I", raw_dims)
    n_elem = 1
    for d in dims:
        n_elem *= d
    if n_elem > MAX_ELEMENTS:
        raise DimOverflow(f"{n_elem} elements exceeds 2**40")
    dtype = _DTYPE_CODES[code]
    payload = f.read(n_elem * dtype.itemsize)
    if len(payload) < n_elem * dtype.itemsize:
        raise TruncatedPayload(
            f"payload is {len(payload)} bytes, expected {n_elem * dtype.itemsize}"
        )
    if not allow_trailing and f.read(1):
        raise TensorFormatError("trailing bytes after payload")
    return np.frombuffer(payload, dtype=dtype).reshape(dims).copy()


@dataclass
class CellRecord:
    """One detected nucleus in slide coordinates.

    `contour` is a closed simple polygon given as (row, col) float vertex
    pairs; the closing vertex may be present or implied. `extra` holds any
    fields a producer attached that this schema does not define; the store
    preserves them verbatim.
    """

    cell_id: str
    slide_id: str = ""
    centroid: tuple[float, float] = (0.0, 0.0)
    area: float = 0.0
    contour: list[tuple[float, float]] = field(default_factory=list)
    class_label: int | None = None
    class_probs: list[float] | None = None
    embedding_ref: tuple[str, int] | None = None
    extra: dict[str, Any] = field(default_factory=dict)

    _KNOWN = (
        "cell_id",
        "slide_id",
        "centroid",
        "area",
        "contour",
        "class_label",
        "class_probs",
        "embedding_ref",
    )

    def validate(self) -> None:
        if self.area <= 0:
            raise ValueError(f"cell {self.cell_id}: area must be > 0")
        if len(self.ring()) < 4:
            raise ValueError(f"cell {self.cell_id}: contour needs >= 3 distinct vertices")
        if self.class_probs is not None:
            total = float(sum(self.class_probs))
            if abs(total - 1.0) > 1e-5:
                raise ValueError(f"cell {self.cell_id}: class_probs sum {total} != 1")

    def ring(self) -> list[tuple[float, float]]:
        """Contour as an explicitly closed ring (first vertex repeated last)."""
        pts = [tuple(map(float, p)) for p in self.contour]
        if pts and pts[0] != pts[-1]:
            pts.append(pts[0])
        return pts

    def to_json_dict(self) -> dict[str, Any]:
        d: dict[str, Any] = {
            "cell_id": self.cell_id,
            "slide_id": self.slide_id,
            "centroid": [float(self.centroid[0]), float(self.centroid[1])],
            "area": float(self.area),
            "contour": [[float(r), float(c)] for r, c in self.contour],
        }
        if self.class_label is not None:
            d["class_label"] = int(self.class_label)
        if self.class_probs is not None:
            d["class_probs"] = [float(p) for p in self.class_probs]
        if self.embedding_ref is not None:
            d["embedding_ref"] = [self.embedding_ref[0], int(self.embedding_ref[1])]
        for k in sorted(self.extra):
            d[k] = self.extra[k]
        return d

    @classmethod
    def from_json_dict(cls, d: dict[str, Any]) -> "CellRecord":
        extra = {k: v for k, v in d.items() if k not in cls._KNOWN}
        ref = d.get("embedding_ref")
        return cls(
            cell_id=d["cell_id"],
            slide_id=d.get("slide_id", ""),
            centroid=tuple(d.get("centroid", (0.0, 0.0))),
            area=float(d.get("area", 0.0)),
            contour=[tuple(p) for p in d.get("contour", [])],
            class_label=d.get("class_label"),
            class_probs=d.get("class_probs"),
            embedding_ref=(ref[0], int(ref[1])) if ref is not None else None,
            extra=extra,
        )


def write_cells(path: str | Path, cells: list[CellRecord]) -> None:
    """Write cell records as JSON lines. Writers need exclusive file access."""
    with open(path, "w", encoding="utf-8") as f:
        for cell in cells:
            f.write(json.dumps(cell.to_json_dict(), separators=(",", ":")))
            f.write("\n")


def read_cells(path: str | Path) -> list[CellRecord]:
    cells = []
    with open(path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                cells.append(CellRecord.from_json_dict(obj))
            except (json.JSONDecodeError, KeyError, TypeError) as e:
                raise MalformedLine(lineno, str(e)) from e
    return cells


def write_geojson(
    cells: list[CellRecord], class_names: dict[int, str] | None = None
) -> dict[str, Any]:
    """Build an RFC 7946 FeatureCollection from cell records.

    Features are ordered by cell_id. Each geometry is a Polygon whose single
    ring is closed and uses (x=col, y=row) pixel coordinates. `prob` is the
    probability of the assigned class when a distribution is present.
    """
    class_names = class_names or {}
    features = []
    for cell in sorted(cells, key=lambda c: c.cell_id):
        label = cell.class_label
        name = None
        if label is not None:
            if label not in class_names:
                raise UnknownClass(f"label {label} has no class name")
            name = class_names[label]
        prob = None
        if cell.class_probs is not None:
            idx = label if label is not None else int(np.argmax(cell.class_probs))
            prob = float(cell.class_probs[idx])
        ring = [[float(c), float(r)] for r, c in cell.ring()]
        features.append(
            {
                "type": "Feature",
                "geometry": {"type": "Polygon", "coordinates": [ring]},
                "properties": {
                    "id": cell.cell_id,
                    "class": name,
                    "prob": prob,
                    "centroid": [float(cell.centroid[1]), float(cell.centroid[0])],
                    "area": float(cell.area),
                },
            }
        )
    return {"type": "FeatureCollection", "features": features}


def write_embeddings(
    tensor_path: str | Path,
    index_path: str | Path,
    matrix: np.ndarray,
    cell_ids: list[str],
) -> None:
    """Store an N x D float32 embedding matrix plus a row -> cell_id index."""
    if matrix.ndim != 2 or matrix.shape[0] != len(cell_ids):
        raise ValueError("matrix must be N x D with one row per cell id")
    write_tensor(tensor_path, matrix.astype(np.float32, copy=False))
    with open(index_path, "w", encoding="utf-8") as f:
        for row, cid in enumerate(cell_ids):
            f.write(json.dumps({"row": row, "cell_id": cid}, separators=(",", ":")))
            f.write("\n")


def read_embeddings(
    tensor_path: str | Path, index_path: str | Path
) -> tuple[np.ndarray, list[str]]:
    matrix = read_tensor(tensor_path)
    ids: list[str] = []
    with open(index_path, "r", encoding="utf-8") as f:
        for lineno, line in enumerate(f, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
                ids.append(obj["cell_id"])
            except (json.JSONDecodeError, KeyError) as e:
                raise MalformedLine(lineno, str(e)) from e
    if matrix.ndim != 2 or len(ids) != matrix.shape[0]:
        raise ValueError(f"index has {len(ids)} rows, tensor has {matrix.shape}")
    return matrix, ids
