import json
import struct

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from exclaim.embeddings import (
    FORMAT_VERSION,
    MAGIC,
    hash_embed,
    index_path_for,
    open_store,
    write_store,
)
from exclaim.errors import DataError


def reference_hash_entry(token: str, col: int, seed: int) -> float:
    """Independent byte-at-a-time FNV-1a oracle for one matrix entry."""
    data = token.encode("utf-8")
    data += col.to_bytes(8, "little") + (seed & 0xFFFFFFFFFFFFFFFF).to_bytes(8, "little")
    h = 14695981039346656037
    for byte in data:
        h = ((h ^ byte) * 1099511628211) & 0xFFFFFFFFFFFFFFFF
    return 2.0 * (h / 2.0**64) - 1.0


class TestStore:
    def test_round_trip_bit_exact(self, tmp_path):
        rng = np.random.default_rng(0)
        entries = [(f"id{k}", rng.normal(size=(k + 1, 6)).astype(np.float32))
                   for k in range(5)]
        path = tmp_path / "emb.exeb"
        write_store(entries, path)
        store = open_store(path)
        assert store.d_w == 6
        for ident, matrix in entries:
            got = store.fetch(ident)
            assert got.dtype == np.float64
            np.testing.assert_array_equal(got.astype(np.float32), matrix)

    def test_float64_inputs_round_trip_at_f32_precision(self, tmp_path):
        matrix = np.random.default_rng(1).normal(size=(3, 4))
        path = tmp_path / "emb.exeb"
        write_store([("a", matrix)], path)
        got = open_store(path).fetch("a")
        np.testing.assert_array_equal(got, matrix.astype(np.float32).astype(np.float64))

    def test_size_arithmetic_small_matrix(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("a", np.zeros((2, 4), dtype=np.float32))], path)
        assert path.stat().st_size == 12 + 2 * 4 * 4  # header + payload
        index = json.loads(index_path_for(path).read_text().splitlines()[0])
        assert index == {"id": "a", "offset": 0, "rows": 2}

    def test_offsets_are_row_aligned(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store(
            [("a", np.zeros((3, 4))), ("b", np.ones((2, 4)))], path
        )
        lines = [json.loads(l) for l in index_path_for(path).read_text().splitlines()]
        assert [e["offset"] for e in lines] == [0, 3 * 4 * 4]
        assert all(e["offset"] % (4 * 4) == 0 for e in lines)

    def test_dimension_mismatch(self, tmp_path):
        with pytest.raises(DataError, match="dimension mismatch"):
            write_store(
                [("a", np.zeros((2, 4))), ("b", np.zeros((2, 5)))],
                tmp_path / "emb.exeb",
            )

    def test_duplicate_id(self, tmp_path):
        with pytest.raises(DataError, match="duplicate id"):
            write_store(
                [("a", np.zeros((1, 4))), ("a", np.zeros((1, 4)))],
                tmp_path / "emb.exeb",
            )

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("a", np.zeros((1, 4)))], path)
        blob = bytearray(path.read_bytes())
        blob[:4] = b"NOPE"
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="bad magic"):
            open_store(path)

    def test_version_mismatch(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("a", np.zeros((1, 4)))], path)
        blob = bytearray(path.read_bytes())
        blob[4:8] = struct.pack("<I", 9)
        path.write_bytes(bytes(blob))
        with pytest.raises(DataError, match="version"):
            open_store(path)

    def test_corrupt_index_out_of_bounds(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("a", np.zeros((1, 4)))], path)
        index_path_for(path).write_text('{"id":"a","offset":0,"rows":99}\n')
        with pytest.raises(DataError, match="past end of data"):
            open_store(path)

    def test_misaligned_offset(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("a", np.zeros((2, 4)))], path)
        index_path_for(path).write_text('{"id":"a","offset":3,"rows":1}\n')
        with pytest.raises(DataError, match="multiple"):
            open_store(path)

    def test_unknown_id_named(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("a", np.zeros((1, 4)))], path)
        with pytest.raises(DataError, match="'zzz'"):
            open_store(path).fetch("zzz")

    def test_empty_store_rejected(self, tmp_path):
        with pytest.raises(DataError, match="no entries"):
            write_store([], tmp_path / "emb.exeb")

    def test_128_row_instance(self, tmp_path):
        path = tmp_path / "emb.exeb"
        write_store([("long", np.zeros((128, 8)))], path)
        assert open_store(path).fetch("long").shape == (128, 8)

    def test_finite_round_trip_stays_finite(self, tmp_path):
        rng = np.random.default_rng(3)
        path = tmp_path / "emb.exeb"
        write_store([("a", rng.normal(size=(4, 4)) * 1e3)], path)
        assert np.isfinite(open_store(path).fetch("a")).all()


class TestHashEmbed:
    def test_deterministic(self):
        a = hash_embed(["alpha", "beta"], 16, 99)
        b = hash_embed(["alpha", "beta"], 16, 99)
        np.testing.assert_array_equal(a, b)

    def test_identical_tokens_identical_rows(self):
        m = hash_embed(["a", "a"], 8, 1)
        np.testing.assert_array_equal(m[0], m[1])

    def test_matches_reference_implementation(self):
        tokens = ["hello", "wörld", ""]
        m = hash_embed(tokens, 5, 123456789)
        for i, tok in enumerate(tokens):
            for j in range(5):
                assert m[i, j] == reference_hash_entry(tok, j, 123456789)

    def test_seed_changes_values(self):
        assert not np.array_equal(hash_embed(["x"], 8, 1), hash_embed(["x"], 8, 2))

    @settings(max_examples=50)
    @given(
        tokens=st.lists(st.text(max_size=8), min_size=1, max_size=6),
        d_w=st.integers(1, 32),
        seed=st.integers(0, 2**63 - 1),
    )
    def test_range_and_purity(self, tokens, d_w, seed):
        m = hash_embed(tokens, d_w, seed)
        assert m.shape == (len(tokens), d_w)
        assert (m >= -1.0).all() and (m < 1.0).all()
        np.testing.assert_array_equal(m, hash_embed(list(tokens), d_w, seed))

    def test_rejects_bad_width(self):
        with pytest.raises(DataError):
            hash_embed(["x"], 0, 1)
