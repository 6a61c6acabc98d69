"""Automatic cell labels from registered IF masks, plus dataset conditioning.

A detected cell becomes positive when strictly more than 15% of its mask
overlaps the antibody-positive region; the measured fraction is recorded on
the cell either way. FOV filtering keeps cells whose mask center of mass
falls inside the annotated rectangle (inclusive bounds), regardless of how
far the contour spills out. Labeled sets are assembled with slide-level
split assignment so no slide leaks across train and val.
"""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping

import numpy as np

from .clsmod import LabeledCellSet
from .errors import CellKitError, DegenerateFOV, ShapeMismatch
from .postproc import CellInstance

IF_OVERLAP_THRESHOLD = 0.15


class MissingEmbedding(CellKitError):
    def __init__(self, cell_id: str):
        self.cell_id = cell_id
        super().__init__(f"cell {cell_id} has no embedding")


class SlideInBothSplits(CellKitError):
    pass


@dataclass
class IFMask:
    """Binary antibody mask registered to the paired H&E tile."""

    mask: np.ndarray
    antibody: str = ""
    registered: bool = True

    def __post_init__(self):
        self.mask = np.asarray(self.mask) > 0


@dataclass
class FOV:
    """Inclusive annotated rectangle in pixel coordinates."""

    row0: float
    col0: float
    row1: float
    col1: float

    def __post_init__(self):
        if self.row1 <= self.row0 or self.col1 <= self.col0:
            raise DegenerateFOV(f"({self.row0},{self.col0})-({self.row1},{self.col1})")

    def contains(self, row: float, col: float) -> bool:
        return self.row0 <= row <= self.row1 and self.col0 <= col <= self.col1


def label_from_if(
    cells: list[CellInstance],
    if_mask: IFMask,
    threshold: float = IF_OVERLAP_THRESHOLD,
) -> list[CellInstance]:
    """Label cells by antibody-mask overlap; positive iff fraction > threshold.

    Returns new cell objects with class_label in {0, 1} and the overlap
    fraction recorded.
    """
    mask = if_mask.mask
    out = []
    for cell in cells:
        r0, c0, r1, c1 = cell.bbox
        if r0 < 0 or c0 < 0 or r1 > mask.shape[0] or c1 > mask.shape[1]:
            raise ShapeMismatch(
                f"cell {cell.cell_id} bbox {cell.bbox} outside mask {mask.shape}"
            )
        inside = int(np.count_nonzero(cell.mask & mask[r0:r1, c0:c1]))
        fraction = inside / cell.area
        out.append(
            replace(cell, class_label=int(fraction > threshold), if_fraction=fraction)
        )
    return out


def filter_by_fov(cells: list[CellInstance], fov: FOV) -> list[CellInstance]:
    """Keep cells whose mask center of mass lies inside the FOV."""
    return [c for c in cells if fov.contains(c.centroid[0], c.centroid[1])]


def build_labeled_set(
    cells: list[CellInstance],
    embeddings: Mapping[str, np.ndarray],
    split_spec: Mapping[str, str] | Iterable[tuple[str, str]],
    class_names: list[str],
) -> tuple[LabeledCellSet, dict]:
    """Join labeled cells to embeddings and assign slide-level splits.

    Every cell of one slide lands in one split. Returns the set ordered by
    (slide_id, cell_id) plus a per-split per-class count summary.
    """
    if isinstance(split_spec, Mapping):
        splits = dict(split_spec)
    else:
        splits = {}
        for slide, split in split_spec:
            if slide in splits and splits[slide] != split:
                raise SlideInBothSplits(f"slide {slide} assigned to {splits[slide]} and {split}")
            splits[slide] = split
    for slide, split in splits.items():
        if split not in ("train", "val"):
            raise ValueError(f"slide {slide}: unknown split {split!r}")

    ordered = sorted(cells, key=lambda c: (c.slide_id, c.cell_id))
    vectors = []
    labels = []
    tags = []
    ids = []
    slides = []
    for cell in ordered:
        if cell.class_label is None:
            raise ValueError(f"cell {cell.cell_id} has no label")
        if cell.cell_id not in embeddings:
            raise MissingEmbedding(cell.cell_id)
        if cell.slide_id not in splits:
            raise ValueError(f"slide {cell.slide_id!r} missing from split spec")
        vectors.append(np.asarray(embeddings[cell.cell_id], dtype=np.float32))
        labels.append(int(cell.class_label))
        tags.append(splits[cell.slide_id])
        ids.append(cell.cell_id)
        slides.append(cell.slide_id)

    data = LabeledCellSet(
        embeddings=np.stack(vectors) if vectors else np.zeros((0, 1), np.float32),
        labels=np.array(labels, dtype=np.int64),
        splits=np.array(tags) if tags else np.array([], dtype="<U5"),
        class_names=class_names,
        cell_ids=ids,
        slide_ids=slides,
    )
    summary: dict[str, dict[str, int]] = {}
    for label, tag in zip(labels, tags):
        name = class_names[label] if label < len(class_names) else str(label)
        summary.setdefault(tag, {}).setdefault(name, 0)
        summary[tag][name] += 1
    return data, summary
