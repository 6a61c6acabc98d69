import json

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from cellkit import tensorio
from cellkit.tensorio import (
    BadMagic,
    BadVersion,
    CellRecord,
    DimOverflow,
    MalformedLine,
    TruncatedPayload,
    UnknownClass,
    UnknownDtype,
    read_cells,
    read_embeddings,
    read_tensor,
    write_cells,
    write_embeddings,
    write_geojson,
    write_tensor,
)


def test_round_trip_identity(tmp_path):
    arr = np.zeros((2, 3), dtype=np.float32)
    path = tmp_path / "t.cvtt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.shape == (2, 3)
    assert back.dtype == np.float32
    np.testing.assert_array_equal(back, arr)


def test_bad_magic(tmp_path):
    path = tmp_path / "bad.cvtt"
    path.write_bytes(b"XXXX" + bytes(20))
    with pytest.raises(BadMagic):
        read_tensor(path)


def test_file_size_arithmetic(tmp_path):
    # header = 4 + 1 + 1 + 1 + 2*4 bytes; payload = 4 * 1024 * 1024
    arr = np.zeros((1024, 1024), dtype=np.float32)
    path = tmp_path / "map.cvtt"
    write_tensor(path, arr)
    header = 4 + 1 + 1 + 1 + 2 * 4
    assert path.stat().st_size == header + 4 * 1024 * 1024


def test_bad_version(tmp_path):
    path = tmp_path / "v.cvtt"
    write_tensor(path, np.zeros(3, dtype=np.uint8))
    raw = bytearray(path.read_bytes())
    raw[4] = 9
    path.write_bytes(bytes(raw))
    with pytest.raises(BadVersion):
        read_tensor(path)


def test_unknown_dtype_code(tmp_path):
    path = tmp_path / "d.cvtt"
    write_tensor(path, np.zeros(3, dtype=np.uint8))
    raw = bytearray(path.read_bytes())
    raw[5] = 77
    path.write_bytes(bytes(raw))
    with pytest.raises(UnknownDtype):
        read_tensor(path)


def test_truncated_payload(tmp_path):
    path = tmp_path / "t.cvtt"
    write_tensor(path, np.arange(10, dtype=np.uint32))
    path.write_bytes(path.read_bytes()[:-3])
    with pytest.raises(TruncatedPayload):
        read_tensor(path)


def test_dim_overflow(tmp_path):
    path = tmp_path / "o.cvtt"
    import struct

    payload = tensorio.MAGIC + struct.pack("<BBB", 1, 1, 2) + struct.pack("<2I", 2**20, 2**21)
    path.write_bytes(payload)
    with pytest.raises(DimOverflow):
        read_tensor(path)


def test_write_rejects_float64(tmp_path):
    with pytest.raises(UnknownDtype):
        write_tensor(tmp_path / "x.cvtt", np.zeros(3, dtype=np.float64))


@settings(max_examples=40, deadline=None)
@given(
    dtype=st.sampled_from(["float32", "uint8", "uint32"]),
    dims=st.lists(st.integers(min_value=1, max_value=6), min_size=1, max_size=4),
    seed=st.integers(min_value=0, max_value=2**31),
)
def test_round_trip_property(tmp_path_factory, dtype, dims, seed):
    rng = np.random.default_rng(seed)
    if dtype == "float32":
        arr = rng.standard_normal(dims).astype(np.float32)
    else:
        arr = rng.integers(0, 200, size=dims).astype(dtype)
    path = tmp_path_factory.mktemp("rt") / "t.cvtt"
    write_tensor(path, arr)
    back = read_tensor(path)
    assert back.dtype == arr.dtype
    assert back.shape == arr.shape
    np.testing.assert_array_equal(back, arr)


def _triangle(cell_id="c1", label=None, probs=None):
    return CellRecord(
        cell_id=cell_id,
        slide_id="s",
        centroid=(2.0, 3.0),
        area=6.0,
        contour=[(0.0, 0.0), (0.0, 4.0), (4.0, 0.0)],
        class_label=label,
        class_probs=probs,
    )


class TestGeoJSON:
    def test_empty(self):
        doc = write_geojson([], {})
        assert doc["type"] == "FeatureCollection"
        assert doc["features"] == []

    def test_ring_closure(self):
        doc = write_geojson([_triangle()], {})
        ring = doc["features"][0]["geometry"]["coordinates"][0]
        assert len(ring) == 4
        assert ring[0] == ring[-1]

    def test_feature_order_by_id(self):
        doc = write_geojson([_triangle("b"), _triangle("a")], {})
        assert [f["properties"]["id"] for f in doc["features"]] == ["a", "b"]

    def test_xy_order(self):
        doc = write_geojson([_triangle()], {})
        ring = doc["features"][0]["geometry"]["coordinates"][0]
        # contour vertex (row=0, col=4) serializes as [x=4, y=0]
        assert [4.0, 0.0] in ring

    def test_unknown_class(self):
        with pytest.raises(UnknownClass):
            write_geojson([_triangle(label=3)], {0: "a"})

    def test_reparse_identical(self):
        doc = write_geojson([_triangle(label=1, probs=[0.25, 0.75])], {1: "tumor"})
        again = json.loads(json.dumps(doc))
        assert again["features"][0]["geometry"]["coordinates"] == \
            doc["features"][0]["geometry"]["coordinates"]
        assert again["features"][0]["properties"]["prob"] == 0.75


class TestCellStore:
    def test_round_trip(self, tmp_path):
        cells = [
            _triangle("a", label=0, probs=[0.9, 0.1]),
            _triangle("b"),
            _triangle("c", label=1, probs=[0.2, 0.8]),
        ]
        cells[1].embedding_ref = ("emb.cvtt", 7)
        cells[2].extra["note"] = {"free": ["form", 1]}
        path = tmp_path / "cells.jsonl"
        write_cells(path, cells)
        back = read_cells(path)
        assert back == cells

    def test_malformed_line(self, tmp_path):
        path = tmp_path / "cells.jsonl"
        path.write_text("not json\n")
        with pytest.raises(MalformedLine) as err:
            read_cells(path)
        assert err.value.line_number == 1

    def test_probs_precision(self, tmp_path):
        probs = [0.2, 0.3, 0.5]
        path = tmp_path / "cells.jsonl"
        write_cells(path, [_triangle("a", label=0, probs=probs)])
        back = read_cells(path)
        for a, b in zip(back[0].class_probs, probs):
            assert abs(a - b) < 1e-9 * max(abs(b), 1)

    def test_unknown_fields_preserved(self, tmp_path):
        path = tmp_path / "cells.jsonl"
        obj = _triangle("a").to_json_dict()
        obj["mystery"] = [1, {"k": "v"}]
        path.write_text(json.dumps(obj) + "\n")
        back = read_cells(path)
        assert back[0].extra["mystery"] == [1, {"k": "v"}]
        write_cells(path, back)
        assert json.loads(path.read_text())["mystery"] == [1, {"k": "v"}]


def test_embedding_store(tmp_path):
    matrix = np.random.default_rng(0).standard_normal((5, 8)).astype(np.float32)
    ids = [f"cell{i}" for i in range(5)]
    write_embeddings(tmp_path / "e.cvtt", tmp_path / "e.idx.jsonl", matrix, ids)
    back, back_ids = read_embeddings(tmp_path / "e.cvtt", tmp_path / "e.idx.jsonl")
    np.testing.assert_array_equal(back, matrix)
    assert back_ids == ids


def test_record_validation():
    bad = _triangle()
    bad.area = 0.0
    with pytest.raises(ValueError):
        bad.validate()
    bad = _triangle(probs=[0.5, 0.6], label=0)
    with pytest.raises(ValueError):
        bad.validate()
