"""Automatic cell labels from a registered antibody mask.

Detected cells are transferred onto an immunofluorescence-derived binary
mask: a cell is positive when strictly more than 15% of its pixels fall in
the stained region. FOV filtering and slide-level split assembly produce a
ready-to-train labeled set without a pathologist in the loop.
"""

import numpy as np

from cellkit.datagen import FOV, IFMask, build_labeled_set, filter_by_fov, label_from_if
from cellkit.postproc import InstanceMap, extract_instances

rng = np.random.default_rng(43)
shape = (512, 512)


def disc(center, radius):
    rr, cc = np.ogrid[: shape[0], : shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


# nuclei scattered across the tile; the antibody stains the left half
labels = np.zeros(shape, dtype=np.uint32)
centers = []
k = 0
for _ in range(60):
    r, c = int(rng.integers(20, 492)), int(rng.integers(20, 492))
    radius = int(rng.integers(5, 12))
    if any((r - pr) ** 2 + (c - pc) ** 2 < (3 * radius) ** 2 for pr, pc in centers):
        continue
    k += 1
    labels[disc((r, c), radius) & (labels == 0)] = k
    centers.append((r, c))

cells = extract_instances(InstanceMap(labels), "slideA", (0, 0))
print(f"detected cells: {len(cells)}")

stain = np.zeros(shape, dtype=np.uint8)
stain[:, :256] = 1
# erode a noisy border so some cells straddle the boundary partially
stain[:, 246:256] = (rng.random((shape[0], 10)) < 0.5).astype(np.uint8)

labeled = label_from_if(cells, IFMask(mask=stain, antibody="CD3"), threshold=0.15)
positives = [c for c in labeled if c.class_label == 1]
print(f"antibody-positive: {len(positives)} "
      f"(fractions from {min(c.if_fraction for c in labeled):.2f} "
      f"to {max(c.if_fraction for c in labeled):.2f})")

fov = FOV(64, 64, 448, 448)
in_fov = filter_by_fov(labeled, fov)
print(f"inside FOV {fov.row0:.0f}..{fov.row1:.0f}: {len(in_fov)} cells "
      f"(center-of-mass rule, contours may spill out)")

embeddings = {c.cell_id: rng.standard_normal(16).astype(np.float32) for c in in_fov}
# a second slide so the split has a val side
slide_b = [c for c in in_fov[:10]]
for c in slide_b:
    c.slide_id = "slideB"
    c.cell_id = c.cell_id.replace("slideA", "slideB")
    embeddings[c.cell_id] = rng.standard_normal(16).astype(np.float32)

data, summary = build_labeled_set(
    in_fov + slide_b, embeddings,
    {"slideA": "train", "slideB": "val"},
    class_names=["negative", "positive"],
)
print(f"labeled set: {data.embeddings.shape[0]} cells, D={data.embeddings.shape[1]}")
for split, counts in sorted(summary.items()):
    print(f"  {split}: {counts}")
