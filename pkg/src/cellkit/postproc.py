"""Recover labeled nucleus instances from probability and distance maps.

The splitting strategy follows the marker-controlled watershed used by
HoVer-Net-style pipelines: gradient responses of the horizontal/vertical
distance maps peak at boundaries between touching nuclei; removing those
ridge pixels from the foreground leaves one seed marker per nucleus, and a
deterministic priority flood grows the markers back out over the energy
landscape. `encode_targets` is the inverse mapping (instances -> maps) and
doubles as the round-trip test oracle.

Sign convention: the derivative kernel is oriented so that after min-max
normalization the response is ~1 on inter-nucleus ridges and ~0 inside
nuclei; the opposite orientation leaves no usable markers.
"""

from __future__ import annotations

import heapq
from dataclasses import dataclass
from functools import cached_property
from typing import Optional

import numpy as np
from scipy import ndimage

from .errors import EmptyInput, ShapeMismatch

EIGHT_CONN = np.ones((3, 3), dtype=bool)

# Separable 5-tap Sobel: smoothing x negated-derivative (see module note).
_SOBEL_DERIV = np.array([-1.0, -2.0, 0.0, 2.0, 1.0])
_SOBEL_SMOOTH = np.array([1.0, 4.0, 6.0, 4.0, 1.0])


@dataclass
class PostprocParams:
    """Thresholds for instance recovery, reference-pipeline defaults."""

    tau_np: float = 0.5     # foreground probability threshold
    tau_m: float = 0.4      # ridge threshold carving markers out of foreground
    s_min: int = 10         # min instance size, px
    m_min: int = 10         # min marker size, px


@dataclass
class ProbMaps:
    """Per-tile network outputs: nucleus probability, HV distances, types.

    np_map is H x W in [0, 1]; hv_map is 2 x H x W in [-1, 1] with channel 0
    horizontal and channel 1 vertical; type_map, when present, is H x W x C
    with per-pixel class distributions. Values are clamped on construction.
    """

    np_map: np.ndarray
    hv_map: np.ndarray
    type_map: Optional[np.ndarray] = None

    def __post_init__(self):
        self.np_map = np.clip(np.asarray(self.np_map, dtype=np.float32), 0.0, 1.0)
        self.hv_map = np.clip(np.asarray(self.hv_map, dtype=np.float32), -1.0, 1.0)
        if self.hv_map.ndim != 3 or self.hv_map.shape[0] != 2:
            raise ShapeMismatch(f"hv_map must be 2 x H x W, got {self.hv_map.shape}")
        if self.hv_map.shape[1:] != self.np_map.shape:
            raise ShapeMismatch(
                f"np_map {self.np_map.shape} vs hv_map {self.hv_map.shape[1:]}"
            )
        if self.type_map is not None:
            self.type_map = np.asarray(self.type_map, dtype=np.float32)
            if self.type_map.shape[:2] != self.np_map.shape:
                raise ShapeMismatch(
                    f"type_map {self.type_map.shape[:2]} vs np_map {self.np_map.shape}"
                )

    @property
    def shape(self) -> tuple[int, int]:
        return self.np_map.shape


@dataclass
class InstanceMap:
    """Labeled instances: 0 = background, k > 0 = instance k.

    Outputs of `postprocess` have contiguous ids 1..K, each one 8-connected
    component; maps passed through label resampling may keep gaps in the id
    sequence (ids are preserved there by contract).
    """

    labels: np.ndarray

    def __post_init__(self):
        self.labels = np.asarray(self.labels)
        if self.labels.ndim != 2:
            raise ShapeMismatch(f"labels must be 2-D, got shape {self.labels.shape}")
        if self.labels.dtype != np.uint32:
            self.labels = self.labels.astype(np.uint32)

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    @cached_property
    def ids(self) -> np.ndarray:
        u = np.unique(self.labels)
        return u[u > 0]

    @property
    def n_instances(self) -> int:
        return int(len(self.ids))

    @cached_property
    def areas(self) -> dict[int, int]:
        counts = np.bincount(self.labels.ravel())
        return {int(i): int(counts[i]) for i in self.ids}

    @cached_property
    def centroids(self) -> dict[int, tuple[float, float]]:
        """Instance id -> (row, col) center of mass of the binary mask."""
        lab = self.labels
        counts = np.bincount(lab.ravel())
        rows = np.bincount(lab.ravel(), weights=np.repeat(np.arange(lab.shape[0]), lab.shape[1]))
        cols = np.bincount(lab.ravel(), weights=np.tile(np.arange(lab.shape[1]), lab.shape[0]))
        return {
            int(i): (rows[i] / counts[i], cols[i] / counts[i]) for i in self.ids
        }

    @cached_property
    def bboxes(self) -> dict[int, tuple[int, int, int, int]]:
        """Instance id -> (r0, c0, r1, c1), half-open."""
        out = {}
        slices = ndimage.find_objects(self.labels.astype(np.int64))
        for i, sl in enumerate(slices, start=1):
            if sl is not None and i in self.areas:
                out[i] = (sl[0].start, sl[1].start, sl[0].stop, sl[1].stop)
        return out

    def relabeled(self) -> "InstanceMap":
        """Remap ids to contiguous 1..K preserving order."""
        return InstanceMap(_relabel_sequential(self.labels))


def _relabel_sequential(labels: np.ndarray) -> np.ndarray:
    u = np.unique(labels)
    u = u[u > 0]
    remap = np.zeros(int(labels.max()) + 1 if labels.size else 1, dtype=np.uint32)
    remap[u] = np.arange(1, len(u) + 1, dtype=np.uint32)
    return remap[labels]


def _minmax(x: np.ndarray) -> np.ndarray:
    lo = float(x.min())
    hi = float(x.max())
    if hi == lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def _sobel_response(channel: np.ndarray, axis: int) -> np.ndarray:
    r = ndimage.convolve1d(channel.astype(np.float64), _SOBEL_DERIV, axis=axis, mode="mirror")
    return ndimage.convolve1d(r, _SOBEL_SMOOTH, axis=1 - axis, mode="mirror")


def _remove_small(binary: np.ndarray, min_size: int) -> np.ndarray:
    lab, n = ndimage.label(binary, structure=EIGHT_CONN)
    if n == 0:
        return np.zeros_like(binary, dtype=bool)
    sizes = np.bincount(lab.ravel())
    keep = sizes >= min_size
    keep[0] = False
    return keep[lab]


def postprocess(maps: ProbMaps, params: PostprocParams | None = None) -> InstanceMap:
    """Split the foreground into labeled nucleus instances.

    Steps: threshold the probability map and drop small components; take the
    min-max-normalized gradient responses of the two distance channels and
    combine them by pixelwise max; energy = (1 - combined) * foreground;
    markers = foreground minus ridge pixels (combined > tau_m), labeled and
    size-filtered; flood -energy from the markers restricted to the
    foreground; finally drop undersized instances and relabel 1..K.

    Deterministic: flooding pops by (energy, row, col) so equal-energy ties
    resolve in lexicographic pixel order.
    """
    params = params or PostprocParams()
    H, W = maps.shape
    if H == 0 or W == 0:
        raise EmptyInput(f"maps have shape {maps.shape}")

    fg = _remove_small(maps.np_map >= params.tau_np, params.s_min)
    if not fg.any():
        return InstanceMap(np.zeros((H, W), dtype=np.uint32))

    h_resp = _minmax(_sobel_response(maps.hv_map[0], axis=1))
    v_resp = _minmax(_sobel_response(maps.hv_map[1], axis=0))
    overall = np.maximum(h_resp, v_resp)

    energy = (1.0 - overall) * fg

    markers_bin = fg & ~(overall > params.tau_m)
    markers, n_markers = ndimage.label(markers_bin, structure=EIGHT_CONN)
    if n_markers:
        sizes = np.bincount(markers.ravel())
        bad = sizes < params.m_min
        bad[0] = True
        markers[bad[markers]] = 0
    markers = _relabel_sequential(markers).astype(np.int64)

    labels = _priority_flood(-energy, markers, fg)

    # undersized watershed fragments fall below the instance size floor
    counts = np.bincount(labels.ravel())
    small = counts < params.s_min
    small[0] = True
    labels[small[labels]] = 0
    return InstanceMap(_relabel_sequential(labels))


def _priority_flood(surface: np.ndarray, markers: np.ndarray, mask: np.ndarray) -> np.ndarray:
    """Marker-controlled watershed: grow markers over `surface` inside `mask`.

    8-connected; pixels are claimed in increasing surface order, ties broken
    by (row, col). Pure Python flood over the masked region only.
    """
    H, W = surface.shape
    # 1-px sentinel border removes bounds checks in the hot loop
    lab = np.full((H + 2, W + 2), -1, dtype=np.int64)
    lab[1:-1, 1:-1] = np.where(mask, markers, -1)
    surf = np.zeros((H + 2, W + 2), dtype=np.float64)
    surf[1:-1, 1:-1] = surface

    lab_flat = lab.ravel()
    surf_flat = surf.ravel()
    Wp = W + 2
    offsets = (-Wp - 1, -Wp, -Wp + 1, -1, 1, Wp - 1, Wp, Wp + 1)

    heap: list[tuple[float, int, int]] = []
    seeds = np.flatnonzero(lab_flat > 0)
    for idx in seeds.tolist():
        lab_here = lab_flat[idx]
        for off in offsets:
            j = idx + off
            if lab_flat[j] == 0:
                heap.append((surf_flat[j], j, lab_here))
    heapq.heapify(heap)

    push = heapq.heappush
    pop = heapq.heappop
    while heap:
        _, idx, owner = pop(heap)
        if lab_flat[idx] != 0:
            continue
        lab_flat[idx] = owner
        for off in offsets:
            j = idx + off
            if lab_flat[j] == 0:
                push(heap, (surf_flat[j], j, owner))

    out = lab[1:-1, 1:-1]
    return np.where(out > 0, out, 0)


def encode_targets(gt: InstanceMap) -> ProbMaps:
    """Build probability and HV distance maps from a ground-truth map.

    np_map is 1 on instance pixels. Within each instance the horizontal
    channel is (col - centroid_col) / max|col - centroid_col| and the
    vertical channel the analogue over rows; a channel is 0 wherever the
    instance has no extent in that direction. Background stays 0.
    """
    labels = gt.labels
    H, W = labels.shape
    np_map = (labels > 0).astype(np.float32)
    hv = np.zeros((2, H, W), dtype=np.float32)
    for i, (r0, c0, r1, c1) in gt.bboxes.items():
        box = labels[r0:r1, c0:c1] == i
        rr, cc = np.nonzero(box)
        dr = rr - rr.mean()
        dc = cc - cc.mean()
        max_c = np.abs(dc).max()
        max_r = np.abs(dr).max()
        if max_c > 0:
            hv[0, rr + r0, cc + c0] = dc / max_c
        if max_r > 0:
            hv[1, rr + r0, cc + c0] = dr / max_r
    return ProbMaps(np_map=np_map, hv_map=hv)


def assign_types(inst: InstanceMap, type_map: np.ndarray) -> dict[int, np.ndarray]:
    """Per-instance class distribution: mean of type_map over instance pixels.

    The instance class is the argmax of its distribution.
    """
    type_map = np.asarray(type_map, dtype=np.float64)
    if type_map.ndim != 3 or type_map.shape[:2] != inst.shape:
        raise ShapeMismatch(
            f"type_map {type_map.shape} does not match instances {inst.shape}"
        )
    labels = inst.labels.ravel()
    flat = type_map.reshape(-1, type_map.shape[2])
    n_bins = int(labels.max()) + 1
    sums = np.zeros((n_bins, type_map.shape[2]))
    for ch in range(type_map.shape[2]):
        sums[:, ch] = np.bincount(labels, weights=flat[:, ch], minlength=n_bins)
    counts = np.bincount(labels, minlength=n_bins)
    return {int(i): sums[i] / counts[i] for i in inst.ids}


@dataclass
class CellInstance:
    """One detected nucleus with its pixel mask, in slide coordinates.

    `mask` is cropped to `bbox` (half-open, global coords). `tile_origin`
    records which tile produced the detection.
    """

    cell_id: str
    slide_id: str
    tile_origin: tuple[int, int]
    bbox: tuple[int, int, int, int]
    mask: np.ndarray
    centroid: tuple[float, float]
    area: int
    embedding: Optional[np.ndarray] = None
    class_label: Optional[int] = None
    class_probs: Optional[np.ndarray] = None
    if_fraction: Optional[float] = None
    source_instance: int = 0

    def intersection_area(self, other: "CellInstance") -> int:
        r0 = max(self.bbox[0], other.bbox[0])
        c0 = max(self.bbox[1], other.bbox[1])
        r1 = min(self.bbox[2], other.bbox[2])
        c1 = min(self.bbox[3], other.bbox[3])
        if r0 >= r1 or c0 >= c1:
            return 0
        a = self.mask[r0 - self.bbox[0]:r1 - self.bbox[0], c0 - self.bbox[1]:c1 - self.bbox[1]]
        b = other.mask[r0 - other.bbox[0]:r1 - other.bbox[0], c0 - other.bbox[1]:c1 - other.bbox[1]]
        return int(np.count_nonzero(a & b))

    def iou(self, other: "CellInstance") -> float:
        inter = self.intersection_area(other)
        if inter == 0:
            return 0.0
        return inter / (self.area + other.area - inter)


def extract_instances(
    inst: InstanceMap,
    slide_id: str = "",
    tile_origin: tuple[int, int] = (0, 0),
) -> list[CellInstance]:
    """Turn an instance map into cell objects with global coordinates."""
    tr, tc = tile_origin
    cells = []
    for i in inst.ids:
        r0, c0, r1, c1 = inst.bboxes[int(i)]
        mask = inst.labels[r0:r1, c0:c1] == i
        cr, cc = inst.centroids[int(i)]
        cells.append(
            CellInstance(
                cell_id=f"{slide_id}/t{tr:06d}_{tc:06d}/{int(i):05d}",
                slide_id=slide_id,
                tile_origin=(tr, tc),
                bbox=(r0 + tr, c0 + tc, r1 + tr, c1 + tc),
                mask=mask,
                centroid=(cr + tr, cc + tc),
                area=inst.areas[int(i)],
                source_instance=int(i),
            )
        )
    return cells


def mask_contour(mask: np.ndarray, offset: tuple[int, int] = (0, 0)) -> list[tuple[float, float]]:
    """Closed (row, col) polygon around the true region of a binary mask."""
    from skimage import measure

    padded = np.pad(mask.astype(np.uint8), 1)
    contours = measure.find_contours(padded, 0.5)
    if not contours:
        raise ValueError("mask has no foreground")
    contour = max(contours, key=len)
    return [(float(r) - 1 + offset[0], float(c) - 1 + offset[1]) for r, c in contour]


def to_record(cell: CellInstance, embedding_ref: tuple[str, int] | None = None):
    """Convert a CellInstance to its serializable CellRecord form."""
    from .tensorio import CellRecord

    extra = {
        "tile_origin": [int(cell.tile_origin[0]), int(cell.tile_origin[1])],
        "source_instance": int(cell.source_instance),
    }
    if cell.if_fraction is not None:
        extra["if_fraction"] = float(cell.if_fraction)
    return CellRecord(
        cell_id=cell.cell_id,
        slide_id=cell.slide_id,
        centroid=(float(cell.centroid[0]), float(cell.centroid[1])),
        area=float(cell.area),
        contour=mask_contour(cell.mask, offset=(cell.bbox[0], cell.bbox[1])),
        class_label=cell.class_label,
        class_probs=None if cell.class_probs is None else [float(p) for p in cell.class_probs],
        embedding_ref=embedding_ref,
        extra=extra,
    )
