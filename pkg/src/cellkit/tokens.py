"""Map final-layer encoder tokens onto image space and pool them per cell.

A tile of H x W px encoded with patch size P yields (H/P) * (W/P) spatial
tokens plus `k_extra` leading non-spatial tokens (CLS / registers), which
are skipped. A nucleus inherits the unweighted mean of every token whose
P x P footprint its mask touches.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import CellKitError, ShapeMismatch
from .postproc import InstanceMap


class CountMismatch(CellKitError):
    """Flat token count does not factor into the expected grid."""


@dataclass
class TokenGrid:
    grid: np.ndarray  # (H/P) x (W/P) x D
    patch_size: int
    k_extra: int = 0
    encoder: str = ""

    def __post_init__(self):
        self.grid = np.asarray(self.grid)
        if self.grid.ndim != 3 or self.grid.shape[2] < 1:
            raise ShapeMismatch(f"grid must be rows x cols x D, got {self.grid.shape}")

    @property
    def dim(self) -> int:
        return self.grid.shape[2]


def reshape_tokens(
    flat: np.ndarray,
    patch_size: int,
    height: int,
    width: int,
    k_extra: int = 0,
    encoder: str = "",
) -> TokenGrid:
    """Arrange flat (N + k_extra) x D tokens onto the spatial grid.

    Row k_extra + r * (W/P) + c lands at grid[r][c].
    """
    flat = np.asarray(flat)
    if flat.ndim != 2:
        raise CountMismatch(f"expected 2-D token matrix, got shape {flat.shape}")
    if height % patch_size or width % patch_size:
        raise CountMismatch(
            f"{height} x {width} not divisible by patch size {patch_size}"
        )
    rows, cols = height // patch_size, width // patch_size
    if flat.shape[0] - k_extra != rows * cols:
        raise CountMismatch(
            f"got {flat.shape[0]} tokens, expected {rows * cols} + {k_extra} extra"
        )
    grid = flat[k_extra:].reshape(rows, cols, flat.shape[1])
    return TokenGrid(grid=grid, patch_size=patch_size, k_extra=k_extra, encoder=encoder)


def flatten_tokens(grid: TokenGrid) -> np.ndarray:
    """Inverse of reshape_tokens, minus the non-spatial rows."""
    return grid.grid.reshape(-1, grid.dim)


@dataclass
class CellEmbedding:
    cell_id: int | str
    vector: np.ndarray
    n_tokens: int


def extract_embeddings(inst: InstanceMap, grid: TokenGrid) -> list[CellEmbedding]:
    """Average, per instance, the tokens whose footprint the mask touches.

    The pool is set-based: a token contributes once no matter how many of
    its pixels the nucleus covers.
    """
    P = grid.patch_size
    rows, cols, _ = grid.grid.shape
    if inst.shape != (rows * P, cols * P):
        raise ShapeMismatch(
            f"instance map {inst.shape} vs token field {(rows * P, cols * P)}"
        )
    labels = inst.labels
    rr, cc = np.nonzero(labels)
    if len(rr) == 0:
        return []
    ids = labels[rr, cc].astype(np.int64)
    token_idx = (rr // P) * cols + (cc // P)
    pairs = np.unique(np.stack([ids, token_idx], axis=1), axis=0)

    flat = grid.grid.reshape(-1, grid.dim)
    out = []
    for cell_id in np.unique(pairs[:, 0]):
        tok = pairs[pairs[:, 0] == cell_id, 1]
        vec = flat[tok].mean(axis=0)
        if not np.all(np.isfinite(vec)):
            raise ValueError(f"instance {cell_id}: non-finite embedding")
        out.append(CellEmbedding(cell_id=int(cell_id), vector=vec, n_tokens=len(tok)))
    return out
