"""Shared synthetic-scene fixtures.

Scenes are built from convex blobs (discs and axis-aligned ellipses): each
generator guarantees the separation constraints the round-trip suites rely
on, and everything is seeded so the suites are reproducible.
"""

from __future__ import annotations

import numpy as np
import pytest

from cellkit.postproc import InstanceMap


def disc_mask(shape, center, radius):
    rr, cc = np.ogrid[: shape[0], : shape[1]]
    return (rr - center[0]) ** 2 + (cc - center[1]) ** 2 <= radius**2


def ellipse_mask(shape, center, radii):
    rr, cc = np.ogrid[: shape[0], : shape[1]]
    return ((rr - center[0]) / radii[0]) ** 2 + ((cc - center[1]) / radii[1]) ** 2 <= 1.0


def random_blob_scene(
    rng: np.random.Generator,
    shape=(256, 256),
    max_blobs=40,
    radius_range=(5, 20),
    separation=1.5,
) -> InstanceMap:
    """Non-overlapping convex blobs with centroid separation >= separation * radius."""
    labels = np.zeros(shape, dtype=np.uint32)
    placed: list[tuple[int, int, int]] = []
    next_id = 1
    for _ in range(max_blobs * 4):
        if next_id > max_blobs:
            break
        radius = int(rng.integers(radius_range[0], radius_range[1] + 1))
        r = int(rng.integers(radius + 1, shape[0] - radius - 1))
        c = int(rng.integers(radius + 1, shape[1] - radius - 1))
        if any(
            (r - pr) ** 2 + (c - pc) ** 2 < (separation * max(radius, prad)) ** 2
            for pr, pc, prad in placed
        ):
            continue
        if rng.random() < 0.5:
            mask = disc_mask(shape, (r, c), radius)
        else:
            squash = 0.6 + 0.4 * rng.random()
            mask = ellipse_mask(shape, (r, c), (radius * squash, radius))
        labels[mask & (labels == 0)] = next_id
        placed.append((r, c, radius))
        next_id += 1
    return InstanceMap(labels)


def touching_disc_pair(
    rng: np.random.Generator, shape=(128, 160)
) -> InstanceMap:
    """Two discs meeting along a line: centers exactly 2 * radius apart."""
    radius = int(rng.integers(8, 17))
    r = shape[0] // 2 + int(rng.integers(-8, 9))
    c = shape[1] // 2 - radius
    horizontal = rng.random() < 0.5
    labels = np.zeros(shape, dtype=np.uint32)
    if horizontal:
        m1 = disc_mask(shape, (r, c), radius)
        m2 = disc_mask(shape, (r, c + 2 * radius), radius)
    else:
        r = shape[0] // 2 - radius
        c = shape[1] // 2 + int(rng.integers(-8, 9))
        m1 = disc_mask(shape, (r, c), radius)
        m2 = disc_mask(shape, (r + 2 * radius, c), radius)
    labels[m1] = 1
    labels[m2 & ~m1] = 2
    return InstanceMap(labels)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
