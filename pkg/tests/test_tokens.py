import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellkit.errors import ShapeMismatch
from cellkit.postproc import InstanceMap
from cellkit.tokens import (
    CountMismatch,
    TokenGrid,
    extract_embeddings,
    flatten_tokens,
    reshape_tokens,
)

from conftest import disc_mask


class TestReshape:
    def test_stated_mapping(self):
        # H=W=32, P=16, one CLS token: flat row 1 lands at grid[0][0]
        flat = np.arange(5 * 3, dtype=np.float64).reshape(5, 3)
        grid = reshape_tokens(flat, patch_size=16, height=32, width=32, k_extra=1)
        assert grid.grid.shape == (2, 2, 3)
        np.testing.assert_array_equal(grid.grid[0, 0], flat[1])
        np.testing.assert_array_equal(grid.grid[1, 1], flat[4])

    def test_four_register_tokens(self):
        # four leading registers: rows 4..7 populate the grid
        flat = np.arange(8 * 2, dtype=np.float64).reshape(8, 2)
        grid = reshape_tokens(flat, patch_size=16, height=32, width=32, k_extra=4)
        np.testing.assert_array_equal(grid.grid[0, 0], flat[4])
        np.testing.assert_array_equal(grid.grid[1, 1], flat[7])

    def test_count_mismatch(self):
        with pytest.raises(CountMismatch):
            reshape_tokens(np.zeros((5, 3)), patch_size=16, height=32, width=32, k_extra=0)
        with pytest.raises(CountMismatch):
            reshape_tokens(np.zeros((4, 3)), patch_size=15, height=32, width=32)

    @settings(max_examples=30, deadline=None)
    @given(
        rows=st.integers(1, 6),
        cols=st.integers(1, 6),
        dim=st.integers(1, 8),
        k_extra=st.integers(0, 4),
        seed=st.integers(0, 2**31),
    )
    def test_flatten_inverts_reshape(self, rows, cols, dim, k_extra, seed):
        rng = np.random.default_rng(seed)
        P = 8
        flat = rng.standard_normal((rows * cols + k_extra, dim))
        grid = reshape_tokens(flat, P, rows * P, cols * P, k_extra)
        np.testing.assert_array_equal(flatten_tokens(grid), flat[k_extra:])


def _grid(values):
    return TokenGrid(grid=np.asarray(values, dtype=np.float64), patch_size=16)


class TestExtract:
    def test_single_footprint(self):
        labels = np.zeros((32, 32), dtype=np.uint32)
        labels[2:9, 3:10] = 1  # entirely inside grid[0][0]
        grid = _grid(np.arange(2 * 2 * 3).reshape(2, 2, 3))
        (emb,) = extract_embeddings(InstanceMap(labels), grid)
        np.testing.assert_array_equal(emb.vector, grid.grid[0, 0])
        assert emb.n_tokens == 1

    def test_two_token_average(self):
        labels = np.zeros((16, 32), dtype=np.uint32)
        labels[4:9, 10:22] = 1  # spans grid[0][0] and grid[0][1]
        grid = TokenGrid(
            grid=np.array([[[1.0, 0.0, 0.0], [0.0, 1.0, 0.0]]]), patch_size=16
        )
        (emb,) = extract_embeddings(InstanceMap(labels), grid)
        np.testing.assert_allclose(emb.vector, [0.5, 0.5, 0.0])
        assert emb.n_tokens == 2

    def test_convex_hull_bounds(self, rng):
        labels = np.zeros((64, 64), dtype=np.uint32)
        labels[disc_mask((64, 64), (30, 30), 12)] = 1
        labels[disc_mask((64, 64), (10, 52), 6)] = 2
        grid = TokenGrid(grid=rng.standard_normal((4, 4, 5)), patch_size=16)
        for emb in extract_embeddings(InstanceMap(labels), grid):
            rr, cc = np.nonzero(labels == emb.cell_id)
            token_ids = sorted({(r // 16) * 4 + c // 16 for r, c in zip(rr, cc)})
            contributing = grid.grid.reshape(-1, 5)[token_ids]
            assert np.all(emb.vector >= contributing.min(axis=0) - 1e-12)
            assert np.all(emb.vector <= contributing.max(axis=0) + 1e-12)
            assert emb.n_tokens == len(token_ids)

    def test_pixel_count_does_not_weight(self):
        # dilating the nucleus inside the same token set leaves the mean alone
        grid = TokenGrid(grid=np.arange(2 * 2 * 2, dtype=float).reshape(2, 2, 2), patch_size=16)
        small = np.zeros((32, 32), dtype=np.uint32)
        small[14:18, 8:12] = 1  # touches tokens (0,0) and (1,0)
        big = np.zeros((32, 32), dtype=np.uint32)
        big[4:28, 2:14] = 1  # same two tokens, many more pixels in each
        (a,) = extract_embeddings(InstanceMap(small), grid)
        (b,) = extract_embeddings(InstanceMap(big), grid)
        np.testing.assert_array_equal(a.vector, b.vector)

    def test_translation_equivariance(self, rng):
        P = 16
        tokens_a = rng.standard_normal((4, 4, 3))
        labels_a = np.zeros((64, 64), dtype=np.uint32)
        labels_a[disc_mask((64, 64), (24, 24), 9)] = 1
        # translate nucleus by exactly P px and translate the token field too
        labels_b = np.roll(labels_a, (P, P), axis=(0, 1))
        tokens_b = np.roll(tokens_a, (1, 1), axis=(0, 1))
        (ea,) = extract_embeddings(InstanceMap(labels_a), TokenGrid(tokens_a, P))
        (eb,) = extract_embeddings(InstanceMap(labels_b), TokenGrid(tokens_b, P))
        np.testing.assert_array_equal(ea.vector, eb.vector)

    def test_shape_mismatch(self):
        grid = _grid(np.zeros((2, 2, 3)))
        with pytest.raises(ShapeMismatch):
            extract_embeddings(InstanceMap(np.zeros((16, 16), dtype=np.uint32)), grid)
