"""Whole-slide tiling, cross-tile cell merging, and resolution bridging.

Tiles of `tile_edge` px are laid out with a stride of `tile_edge - overlap`;
the final tile in each axis is clamped to the slide edge. Each tile owns a
"core" rectangle; cores are cut at the midpoints of the overlap regions
between neighbouring tiles, which makes them a disjoint cover of the slide
even where the final tile overlaps its predecessor by more than `overlap`.
For the uniform stride this equals an overlap/2 margin on interior edges.

Merging is deterministic regardless of the order tiles were processed in:
cells are ranked (core-contained first, then larger area, then source tile,
then id) and duplicates from other tiles at mask IoU >= 0.5 are dropped;
afterwards, cells clipped by an interior tile edge are dropped when an
unclipped cell from another tile covers the majority of their mask.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DegenerateGeometry, DegenerateScale
from .postproc import CellInstance, InstanceMap, to_record
from .tensorio import CellRecord


@dataclass
class SlideGeometry:
    """Slide dimensions and the tiling/patch parameters that apply to it."""

    width: int
    height: int
    mpp: float = 0.25
    tile_edge: int = 1024
    overlap: int = 64
    patch_size: int = 16

    def __post_init__(self):
        if self.width < 1 or self.height < 1:
            raise DegenerateGeometry(f"slide {self.width} x {self.height}")
        if self.mpp <= 0:
            raise DegenerateGeometry(f"mpp must be > 0, got {self.mpp}")
        if self.tile_edge <= 2 * self.overlap:
            raise DegenerateGeometry(
                f"tile_edge {self.tile_edge} must exceed 2 * overlap ({self.overlap})"
            )
        if self.tile_edge % self.patch_size != 0:
            raise DegenerateGeometry(
                f"tile_edge {self.tile_edge} not divisible by patch size {self.patch_size}"
            )


@dataclass
class TilePlan:
    """Ordered tile origins plus the core rectangle each tile owns.

    Origins are (row, col), row-major. Cores are (r0, c0, r1, c1) half-open
    rectangles that partition the slide.
    """

    geometry: SlideGeometry
    origins: list[tuple[int, int]] = field(default_factory=list)
    cores: list[tuple[int, int, int, int]] = field(default_factory=list)

    def core_for(self, origin: tuple[int, int]) -> tuple[int, int, int, int]:
        return self.cores[self.origins.index(origin)]

    def to_json(self) -> dict:
        g = self.geometry
        return {
            "width": g.width,
            "height": g.height,
            "mpp": g.mpp,
            "tile_edge": g.tile_edge,
            "overlap": g.overlap,
            "patch_size": g.patch_size,
            "origins": [list(o) for o in self.origins],
            "cores": [list(c) for c in self.cores],
        }

    @classmethod
    def from_json(cls, d: dict) -> "TilePlan":
        geom = SlideGeometry(
            width=d["width"],
            height=d["height"],
            mpp=d.get("mpp", 0.25),
            tile_edge=d["tile_edge"],
            overlap=d["overlap"],
            patch_size=d.get("patch_size", 16),
        )
        return cls(
            geometry=geom,
            origins=[tuple(o) for o in d["origins"]],
            cores=[tuple(c) for c in d["cores"]],
        )

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json(), indent=2, sort_keys=True))

    @classmethod
    def load(cls, path: str | Path) -> "TilePlan":
        return cls.from_json(json.loads(Path(path).read_text()))


def _axis_origins(dim: int, tile: int, stride: int) -> list[int]:
    if dim <= tile:
        return [0]
    origins = [0]
    while origins[-1] + stride + tile < dim:
        origins.append(origins[-1] + stride)
    origins.append(dim - tile)
    return origins


def _axis_cuts(origins: list[int], tile: int, dim: int) -> list[tuple[int, int]]:
    """Half-open core ranges along one axis, cut at overlap midpoints."""
    bounds = [0]
    for a, b in zip(origins, origins[1:]):
        bounds.append((b + a + tile) // 2)
    bounds.append(dim)
    return list(zip(bounds[:-1], bounds[1:]))


def plan_tiles(geom: SlideGeometry) -> TilePlan:
    """Generate the tile plan: covering tiles plus partitioning cores.

    Slides smaller than one tile get a single origin at (0, 0); the engine
    zero-pads such tiles and discards detections in the padding.
    """
    stride = geom.tile_edge - geom.overlap
    row_origins = _axis_origins(geom.height, geom.tile_edge, stride)
    col_origins = _axis_origins(geom.width, geom.tile_edge, stride)
    row_cores = _axis_cuts(row_origins, geom.tile_edge, geom.height)
    col_cores = _axis_cuts(col_origins, geom.tile_edge, geom.width)

    origins = []
    cores = []
    for (ro, (rc0, rc1)) in zip(row_origins, row_cores):
        for (co, (cc0, cc1)) in zip(col_origins, col_cores):
            origins.append((ro, co))
            cores.append((rc0, cc0, rc1, cc1))
    return TilePlan(geometry=geom, origins=origins, cores=cores)


def _tile_rect(origin: tuple[int, int], geom: SlideGeometry) -> tuple[int, int, int, int]:
    r0, c0 = origin
    return (r0, c0, min(r0 + geom.tile_edge, geom.height), min(c0 + geom.tile_edge, geom.width))


def _is_clipped(cell: CellInstance, origin: tuple[int, int], geom: SlideGeometry) -> bool:
    """True when the mask touches an interior edge of its source tile."""
    tr0, tc0, tr1, tc1 = _tile_rect(origin, geom)
    r0, c0, r1, c1 = cell.bbox
    if r0 <= tr0 and tr0 > 0:
        return True
    if r1 >= tr1 and tr1 < geom.height:
        return True
    if c0 <= tc0 and tc0 > 0:
        return True
    if c1 >= tc1 and tc1 < geom.width:
        return True
    return False


def _in_core(cell: CellInstance, core: tuple[int, int, int, int]) -> bool:
    r0, c0, r1, c1 = cell.bbox
    return r0 >= core[0] and c0 >= core[1] and r1 <= core[2] and c1 <= core[3]


class _CentroidGrid:
    """Uniform grid hash over cell centroids for neighbour queries."""

    def __init__(self, cell_size: int = 64):
        self.cell_size = cell_size
        self.buckets: dict[tuple[int, int], list[int]] = {}

    def add(self, idx: int, centroid: tuple[float, float]) -> None:
        key = (int(centroid[0]) // self.cell_size, int(centroid[1]) // self.cell_size)
        self.buckets.setdefault(key, []).append(idx)

    def nearby(self, centroid: tuple[float, float], reach: int = 2) -> list[int]:
        kr = int(centroid[0]) // self.cell_size
        kc = int(centroid[1]) // self.cell_size
        out: list[int] = []
        for dr in range(-reach, reach + 1):
            for dc in range(-reach, reach + 1):
                out.extend(self.buckets.get((kr + dr, kc + dc), ()))
        return out


def merge_instances(
    per_tile_cells: list[tuple[tuple[int, int], list[CellInstance]]],
    plan: TilePlan,
    iou_threshold: float = 0.5,
) -> list[CellInstance]:
    """Resolve duplicate detections from overlapping tiles.

    Returns surviving cells ordered by (centroid row, centroid col, id).
    """
    geom = plan.geometry
    core_by_origin = {o: c for o, c in zip(plan.origins, plan.cores)}

    flat: list[CellInstance] = []
    in_core: list[bool] = []
    clipped: list[bool] = []
    for origin, cells in per_tile_cells:
        core = core_by_origin[tuple(origin)]
        for cell in cells:
            flat.append(cell)
            in_core.append(_in_core(cell, core))
            clipped.append(_is_clipped(cell, tuple(origin), geom))

    order = sorted(
        range(len(flat)),
        key=lambda i: (
            not in_core[i],
            -flat[i].area,
            flat[i].tile_origin,
            flat[i].cell_id,
        ),
    )

    grid = _CentroidGrid(cell_size=max(geom.overlap, 16))
    kept: list[int] = []
    for i in order:
        cell = flat[i]
        duplicate = False
        for j in grid.nearby(cell.centroid):
            other = flat[j]
            if other.tile_origin == cell.tile_origin:
                continue
            if cell.iou(other) >= iou_threshold:
                duplicate = True
                break
        if not duplicate:
            kept.append(i)
            grid.add(i, cell.centroid)

    survivors: list[int] = []
    for i in kept:
        cell = flat[i]
        if clipped[i]:
            covered = False
            for j in kept:
                other = flat[j]
                if j == i or clipped[j] or other.tile_origin == cell.tile_origin:
                    continue
                if cell.intersection_area(other) >= 0.5 * cell.area:
                    covered = True
                    break
            if covered:
                continue
        survivors.append(i)

    result = [flat[i] for i in survivors]
    result.sort(key=lambda c: (c.centroid[0], c.centroid[1], c.cell_id))
    return result


def merge_cells(
    per_tile_cells: list[tuple[tuple[int, int], list[CellInstance]]],
    plan: TilePlan,
    iou_threshold: float = 0.5,
) -> list[CellRecord]:
    """Merge per-tile detections and emit serializable records."""
    return [to_record(c) for c in merge_instances(per_tile_cells, plan, iou_threshold)]


def _lanczos3(x: np.ndarray) -> np.ndarray:
    out = np.sinc(x) * np.sinc(x / 3.0)
    return np.where(np.abs(x) < 3.0, out, 0.0)


def _mirror_index(idx: np.ndarray, n: int) -> np.ndarray:
    """Reflect-101 indexing: ...dcb|abcd|cba..."""
    if n == 1:
        return np.zeros_like(idx)
    period = 2 * (n - 1)
    m = np.mod(idx, period)
    return np.where(m >= n, period - m, m)


def _resample_axis(arr: np.ndarray, axis: int, out_len: int, scale: float) -> np.ndarray:
    n = arr.shape[axis]
    src = (np.arange(out_len) + 0.5) / scale - 0.5
    s = min(scale, 1.0)  # widen the kernel when downscaling
    support = 3.0 / s
    taps = int(math.ceil(2 * support)) + 1
    start = np.floor(src - support).astype(np.int64) + 1
    offsets = np.arange(taps)
    idx = start[:, None] + offsets[None, :]
    weights = _lanczos3((src[:, None] - idx) * s)
    weights /= weights.sum(axis=1, keepdims=True)
    idx = _mirror_index(idx, n)

    moved = np.moveaxis(arr, axis, 0)
    out_shape = (out_len,) + moved.shape[1:]
    out = np.zeros(out_shape, dtype=np.float64)
    extra_dims = (slice(None),) + (None,) * (moved.ndim - 1)
    for t in range(taps):
        out += weights[:, t][extra_dims] * moved[idx[:, t]]
    return np.moveaxis(out, 0, axis)


def lanczos_resample(image: np.ndarray, scale: float) -> np.ndarray:
    """Rescale an H x W or H x W x C image with a separable Lanczos-3 kernel.

    Output dims are round(dim * scale). Kernel rows are normalized to sum 1,
    so constant images are preserved exactly; boundaries use reflect-101.
    """
    if scale <= 0:
        raise DegenerateScale(f"scale must be > 0, got {scale}")
    image = np.asarray(image, dtype=np.float64)
    out_h = int(math.floor(image.shape[0] * scale + 0.5))
    out_w = int(math.floor(image.shape[1] * scale + 0.5))
    if out_h < 1 or out_w < 1:
        raise DegenerateScale(f"output would be {out_h} x {out_w}")
    out = _resample_axis(image, 0, out_h, scale)
    out = _resample_axis(out, 1, out_w, scale)
    return out


def resample_labels(inst: InstanceMap, scale: float) -> tuple[InstanceMap, int]:
    """Nearest-neighbour rescale of an instance map; ids are never blended.

    Returns the resampled map and the number of instances that vanished
    (had no surviving pixel). Surviving ids keep their original values.
    """
    if scale <= 0:
        raise DegenerateScale(f"scale must be > 0, got {scale}")
    labels = inst.labels
    out_h = int(math.floor(labels.shape[0] * scale + 0.5))
    out_w = int(math.floor(labels.shape[1] * scale + 0.5))
    if out_h < 1 or out_w < 1:
        raise DegenerateScale(f"output would be {out_h} x {out_w}")
    rows = np.clip(np.rint((np.arange(out_h) + 0.5) / scale - 0.5).astype(np.int64), 0, labels.shape[0] - 1)
    cols = np.clip(np.rint((np.arange(out_w) + 0.5) / scale - 0.5).astype(np.int64), 0, labels.shape[1] - 1)
    resampled = labels[np.ix_(rows, cols)]
    before = set(np.unique(labels).tolist()) - {0}
    after = set(np.unique(resampled).tolist()) - {0}
    return InstanceMap(resampled), len(before - after)
