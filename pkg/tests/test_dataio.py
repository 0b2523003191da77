import warnings

import numpy as np
import pytest

from sals.dataio import (
    CacheError,
    CacheManifest,
    CacheWriter,
    CooFileSpec,
    DataFormatError,
    cache_name,
    generate_synthetic,
    generate_zipf,
    plan_synthetic,
    read_coo,
    stream_pass,
    write_coo,
    write_residual_caches,
)
from sals.tensor import TensorEntry, build_store, predict_entries
from conftest import random_store


class TestCooFiles:
    def test_basic_parse(self, tmp_path):
        path = tmp_path / "t.coo"
        path.write_text("1 1 5.0\n2 2 3.0\n")
        entries, lengths = read_coo(path, CooFileSpec(2, 1))
        assert entries == [TensorEntry((1, 1), 5.0), TensorEntry((2, 2), 3.0)]
        assert lengths == (2, 2)

    def test_empty_file(self, tmp_path):
        path = tmp_path / "t.coo"
        path.write_text("")
        entries, lengths = read_coo(path, CooFileSpec(3, 1))
        assert entries == [] and lengths == (0, 0, 0)

    def test_round_trip(self, rng, tmp_path):
        store = random_store(rng, (9, 8, 7), 60)
        entries = store.entries()
        spec = CooFileSpec(3, 1)
        path = tmp_path / "t.coo"
        write_coo(path, entries, spec)
        back, lengths = read_coo(path, spec)
        assert back == entries

    def test_zero_based_round_trip(self, rng, tmp_path):
        store = random_store(rng, (5, 5), 12)
        spec = CooFileSpec(2, 0)
        path = tmp_path / "t.coo"
        write_coo(path, store.entries(), spec)
        first = path.read_text().splitlines()[0].split()
        assert int(first[0]) == store.idx[0, 0]  # 0-based on disk
        back, _ = read_coo(path, spec)
        assert back == store.entries()

    def test_malformed_line_reports_number(self, tmp_path):
        path = tmp_path / "t.coo"
        path.write_text("1 1 5.0\n2 oops 3.0\n")
        with pytest.raises(DataFormatError, match=r"t\.coo:2"):
            read_coo(path, CooFileSpec(2, 1))

    def test_wrong_field_count(self, tmp_path):
        path = tmp_path / "t.coo"
        path.write_text("1 1 1 5.0\n")
        with pytest.raises(DataFormatError, match="expected 3 fields"):
            read_coo(path, CooFileSpec(2, 1))

    def test_index_below_base(self, tmp_path):
        path = tmp_path / "t.coo"
        path.write_text("0 1 5.0\n")
        with pytest.raises(DataFormatError, match="below base"):
            read_coo(path, CooFileSpec(2, 1))

    def test_non_finite_value(self, tmp_path):
        path = tmp_path / "t.coo"
        path.write_text("1 1 nan\n")
        with pytest.raises(DataFormatError, match="non-finite"):
            read_coo(path, CooFileSpec(2, 1))


class TestGenerateSynthetic:
    def test_noiseless_values_match_truth(self):
        store, test, truth = generate_synthetic((6, 7, 8), 100, 3, 0.0, 0.2, seed=5)
        assert np.array_equal(store.values, predict_entries(truth, store.idx))
        for e in test:
            idx = np.asarray(e.indices) - 1
            assert e.value == predict_entries(truth, idx[np.newaxis])[0]

    def test_no_duplicates_and_disjoint_split(self):
        store, test, _ = generate_synthetic((8, 8, 8), 400, 2, 0.1, 0.25, seed=9)
        train = {tuple(r) for r in store.idx.tolist()}
        testset = {tuple(np.asarray(e.indices) - 1) for e in test}
        assert len(train) == store.nnz
        assert len(testset) == len(test)
        assert not (train & testset)
        assert store.nnz + len(test) == 400

    def test_reproducible_bytes(self, tmp_path):
        spec = CooFileSpec(3, 1)
        paths = []
        for tag in ("a", "b"):
            store, test, _ = generate_synthetic((10, 10, 10), 200, 3, 0.05, 0.1, seed=77)
            p = tmp_path / f"{tag}.coo"
            write_coo(p, store.entries(), spec)
            paths.append(p)
        assert paths[0].read_bytes() == paths[1].read_bytes()

    def test_large_scale_accepted_but_flagged(self):
        # the default synthetic scale from the scaled-up benchmark family:
        # accepted as parameters, flagged as beyond desk scale
        plan = plan_synthetic((10**6,) * 3, 10**8, 100, 0.1, 0.0, seed=1)
        assert plan.beyond_desk_scale

    def test_infeasible_nnz_rejected(self):
        with pytest.raises(ValueError, match="infeasible"):
            plan_synthetic((3, 3), 10, 2)

    def test_desk_scale_not_flagged(self):
        plan = plan_synthetic((50, 50, 50), 40000, 5, 0.1, 0.1, seed=0)
        assert not plan.beyond_desk_scale


class TestGenerateZipf:
    def test_shape_and_determinism(self):
        a = generate_zipf((40, 40, 40), 500, 1.2, seed=3)
        b = generate_zipf((40, 40, 40), 500, 1.2, seed=3)
        assert a.nnz == 500
        assert np.array_equal(a.idx, b.idx)
        assert np.array_equal(a.values, b.values)

    def test_skewed_head(self):
        store = generate_zipf((200, 200), 3000, 1.2, seed=1)
        sizes = store.bucket_sizes(0)
        assert sizes[0] > sizes[100:].mean() * 3


class TestResidualCache:
    def test_write_read_round_trip(self, rng, tmp_path):
        store = random_store(rng, (7, 6, 5), 80)
        manifest = CacheManifest.create(tmp_path / "cache", 3)
        write_residual_caches(store, manifest)
        name = cache_name("r", 0, 1)

        chunks = []

        def visit(idx, values, acc):
            chunks.append((idx.copy(), values.copy()))
            return (0 if acc is None else acc) + idx.shape[0]

        total = manifest.stream(name, visit, chunk_records=17)
        assert total == store.nnz
        idx = np.concatenate([c[0] for c in chunks])
        values = np.concatenate([c[1] for c in chunks])
        perm = store.mode_perm[1]
        assert np.array_equal(idx, store.idx[perm])
        assert np.array_equal(values, store.values[perm])
        # grouped by the mode's rows in ascending order
        assert (np.diff(idx[:, 1]) >= 0).all()

    def test_empty_cache_never_visits(self, tmp_path):
        writer = CacheWriter(tmp_path / "empty.bin", 2)
        info = writer.close()
        called = []
        out = stream_pass(tmp_path / "empty.bin", lambda i, v, a: called.append(1), expected=info)
        assert out is None and not called

    def test_checksum_detects_corruption(self, tmp_path):
        writer = CacheWriter(tmp_path / "c.bin", 2)
        writer.append(np.array([[0, 1], [1, 0]]), np.array([1.5, -2.5]))
        writer.close()
        raw = bytearray((tmp_path / "c.bin").read_bytes())
        raw[len(raw) - 12] ^= 0xFF  # flip a bit inside the last record
        (tmp_path / "c.bin").write_bytes(bytes(raw))
        with pytest.raises(CacheError, match="checksum"):
            stream_pass(tmp_path / "c.bin", lambda i, v, a: a)

    def test_manifest_mismatch_detected(self, tmp_path):
        writer = CacheWriter(tmp_path / "c.bin", 2)
        writer.append(np.array([[0, 0]]), np.array([3.0]))
        info = writer.close()
        wrong = dict(info, records=2)
        with pytest.raises(CacheError, match="manifest"):
            stream_pass(tmp_path / "c.bin", lambda i, v, a: a, expected=wrong)

    def test_manifest_round_trip(self, rng, tmp_path):
        store = random_store(rng, (5, 4), 15)
        manifest = CacheManifest.create(tmp_path / "cache", 2)
        write_residual_caches(store, manifest)
        loaded = CacheManifest.load(tmp_path / "cache")
        assert loaded.n_modes == 2
        assert loaded.files == manifest.files

    def test_truncated_file_detected(self, tmp_path):
        writer = CacheWriter(tmp_path / "c.bin", 2)
        writer.append(np.array([[0, 0]]), np.array([3.0]))
        writer.close()
        raw = (tmp_path / "c.bin").read_bytes()
        (tmp_path / "c.bin").write_bytes(raw[:-5])
        with pytest.raises(CacheError):
            stream_pass(tmp_path / "c.bin", lambda i, v, a: a)

    def test_values_bit_exact(self, tmp_path):
        writer = CacheWriter(tmp_path / "c.bin", 1)
        vals = np.array([np.pi, -0.0, 1e-300, 2.0 ** 1000])
        writer.append(np.arange(4).reshape(-1, 1), vals)
        writer.close()

        def visit(idx, values, acc):
            return values.copy()

        out = stream_pass(tmp_path / "c.bin", visit)
        assert np.array_equal(out, vals)
        assert np.signbit(out[1])
