"""Embedding file and checkpoint container byte-level tests."""

import logging
import struct

import numpy as np
import pytest

from splatfield.errors import DataError
from splatfield.formats import (
    CKP_MAGIC,
    EMB_MAGIC,
    KIND_FLAT,
    KIND_GRID,
    EmbeddingRecord,
    read_embeddings,
    read_sections,
    write_embeddings,
    write_sections,
)


def unit_rows(rng, n, d):
    m = rng.normal(0, 1, (n, d))
    return (m / np.linalg.norm(m, axis=1, keepdims=True)).astype(np.float32)


class TestEmbeddingFormat:
    def test_flat_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        data = unit_rows(rng, 6, 16)
        p = tmp_path / "q.legsemb"
        write_embeddings(p, [EmbeddingRecord(KIND_FLAT, 0.0, data)])
        (rec,) = read_embeddings(p)
        assert rec.kind == KIND_FLAT
        assert rec.data.shape == (6, 16)
        np.testing.assert_array_equal(rec.data, data)

    def test_grid_round_trip_and_geometry(self, tmp_path):
        rng = np.random.default_rng(1)
        grid = unit_rows(rng, 12, 8).reshape(3, 4, 8)
        p = tmp_path / "g.legsemb"
        write_embeddings(p, [EmbeddingRecord(KIND_GRID, 0.25, grid)])
        (rec,) = read_embeddings(p)
        assert rec.kind == KIND_GRID
        assert rec.data.shape == (3, 4, 8)
        assert rec.scale == np.float32(0.25)
        np.testing.assert_array_equal(rec.data, grid)

    def test_header_bytes_exact(self, tmp_path):
        data = np.eye(2, dtype=np.float32)
        p = tmp_path / "h.legsemb"
        write_embeddings(p, [EmbeddingRecord(KIND_FLAT, 0.0, data)])
        raw = p.read_bytes()
        assert raw[:8] == EMB_MAGIC
        version, dim, count = struct.unpack("<III", raw[8:20])
        assert (version, dim, count) == (1, 2, 1)
        kind, scale, rows, cols = struct.unpack("<BfII", raw[20:33])
        assert (kind, scale, rows, cols) == (0, 0.0, 1, 2)
        np.testing.assert_array_equal(np.frombuffer(raw[33:], "<f4").reshape(2, 2), data)

    def test_multiple_records_one_file(self, tmp_path):
        rng = np.random.default_rng(2)
        recs = [
            EmbeddingRecord(KIND_FLAT, 0.0, unit_rows(rng, 3, 4)),
            EmbeddingRecord(KIND_GRID, 0.1, unit_rows(rng, 6, 4).reshape(2, 3, 4)),
            EmbeddingRecord(KIND_GRID, 0.9, unit_rows(rng, 6, 4).reshape(2, 3, 4)),
        ]
        p = tmp_path / "m.legsemb"
        write_embeddings(p, recs)
        back = read_embeddings(p)
        assert [r.kind for r in back] == [0, 1, 1]
        assert [np.float32(r.scale) for r in back] == [np.float32(0.0), np.float32(0.1), np.float32(0.9)]

    def test_dim_mismatch_rejected(self, tmp_path):
        rng = np.random.default_rng(3)
        p = tmp_path / "d.legsemb"
        write_embeddings(p, [EmbeddingRecord(KIND_FLAT, 0.0, unit_rows(rng, 2, 512))])
        with pytest.raises(DataError, match="dim 512, expected 64"):
            read_embeddings(p, expected_dim=64)

    def test_off_norm_rows_renormalized_with_warning(self, tmp_path, caplog):
        data = np.array([[3.0, 0.0], [0.0, 1.0]], np.float32)
        p = tmp_path / "n.legsemb"
        write_embeddings(p, [EmbeddingRecord(KIND_FLAT, 0.0, data)])
        with caplog.at_level(logging.WARNING):
            (rec,) = read_embeddings(p)
        assert "re-normalized 1" in caplog.text
        np.testing.assert_allclose(rec.data[0], [1.0, 0.0])
        np.testing.assert_array_equal(rec.data[1], [0.0, 1.0])  # in-tolerance row untouched

    def test_bad_magic(self, tmp_path):
        p = tmp_path / "bad"
        p.write_bytes(b"NOTMAGIC" + b"\x00" * 16)
        with pytest.raises(DataError, match="magic"):
            read_embeddings(p)

    def test_truncated_payload(self, tmp_path):
        rng = np.random.default_rng(4)
        p = tmp_path / "t.legsemb"
        write_embeddings(p, [EmbeddingRecord(KIND_FLAT, 0.0, unit_rows(rng, 4, 8))])
        p.write_bytes(p.read_bytes()[:-10])
        with pytest.raises(DataError, match="truncated"):
            read_embeddings(p)

    def test_empty_file_refused(self, tmp_path):
        with pytest.raises(DataError, match="no records"):
            write_embeddings(tmp_path / "e.legsemb", [])

    def test_mixed_dims_refused(self, tmp_path):
        rng = np.random.default_rng(5)
        recs = [
            EmbeddingRecord(KIND_FLAT, 0.0, unit_rows(rng, 2, 4)),
            EmbeddingRecord(KIND_FLAT, 0.0, unit_rows(rng, 2, 8)),
        ]
        with pytest.raises(DataError, match="mixed"):
            write_embeddings(tmp_path / "x.legsemb", recs)


class TestCheckpointContainer:
    def test_array_and_json_round_trip(self, tmp_path):
        rng = np.random.default_rng(0)
        sections = {
            "gaussians/means": rng.normal(0, 1, (10, 3)).astype(np.float32),
            "gaussians/anchors": rng.integers(0, 5, 10),
            "meta": {"iteration": 42, "seed": 7, "note": "hello", "pose": [0.1, 0.2]},
            "mask": (rng.uniform(0, 1, 7) > 0.5).astype(np.uint8),
        }
        p = tmp_path / "c.ckpt"
        write_sections(p, sections)
        back = read_sections(p)
        assert set(back) == set(sections)
        np.testing.assert_array_equal(back["gaussians/means"], sections["gaussians/means"])
        np.testing.assert_array_equal(back["gaussians/anchors"], sections["gaussians/anchors"])
        assert back["gaussians/anchors"].dtype == np.int64
        assert back["meta"] == sections["meta"]
        np.testing.assert_array_equal(back["mask"], sections["mask"])

    def test_floats_stored_as_f32(self, tmp_path):
        p = tmp_path / "c.ckpt"
        write_sections(p, {"x": np.array([1.0, 2.0], np.float64)})
        back = read_sections(p)
        assert back["x"].dtype == np.dtype("<f4")

    def test_magic_guard(self, tmp_path):
        p = tmp_path / "c.ckpt"
        write_sections(p, {"x": np.zeros(3, np.float32)})
        raw = bytearray(p.read_bytes())
        raw[:8] = b"XXXXXXXX"
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="magic"):
            read_sections(p)
        assert CKP_MAGIC == b"LEGSCKP1"

    def test_version_guard(self, tmp_path):
        p = tmp_path / "c.ckpt"
        write_sections(p, {"x": np.zeros(3, np.float32)})
        raw = bytearray(p.read_bytes())
        raw[8:12] = struct.pack("<I", 99)
        p.write_bytes(bytes(raw))
        with pytest.raises(DataError, match="version 99, expected 1"):
            read_sections(p)

    def test_truncation_guard(self, tmp_path):
        p = tmp_path / "c.ckpt"
        write_sections(p, {"x": np.arange(100, dtype=np.float32)})
        p.write_bytes(p.read_bytes()[:-8])
        with pytest.raises(DataError, match="truncated"):
            read_sections(p)

    def test_scalar_shape_array(self, tmp_path):
        p = tmp_path / "c.ckpt"
        write_sections(p, {"s": np.array(3.5, np.float32)})
        back = read_sections(p)
        assert back["s"].shape == ()
        assert back["s"] == np.float32(3.5)
