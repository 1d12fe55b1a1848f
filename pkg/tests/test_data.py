import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crbpr.data import (Catalog, DataError, FeatureStore, SynthConfig, TripletSet, filter_min_interactions,
                        generate_synthetic, load_dataset, load_features, load_triplets, read_feature_bin,
                        read_feature_tsv, read_tensor_bin, save_dataset, sidecar_path, split_triplets,
                        write_feature_bin, write_feature_tsv, write_tensor_bin)
from crbpr.evaluate import pairwise_auc


def small_store(n=3, d_v=4, d_w=2, seed=0):
    rng = np.random.default_rng(seed)
    ids = [f"p{i}" for i in range(n)]
    return FeatureStore(ids, rng.normal(size=(n, d_v)), rng.normal(size=(n, d_w)))


def small_catalog():
    return Catalog(["u1", "u2"], ["g1", "g2"], ["r1", "r2", "r3"])


def write_rows(path, rows):
    path.write_text("".join("\t".join(r) + "\n" for r in rows))
    return path


class TestCatalog:
    def test_dense_indices_in_load_order(self):
        cat = small_catalog()
        assert cat.matcher_index == {"r1": 0, "r2": 1, "r3": 2}
        assert cat.sizes == {"users": 2, "givens": 2, "matchers": 3}

    def test_duplicate_ids_rejected(self):
        with pytest.raises(DataError):
            Catalog(["u1", "u1"], ["g1"], ["r1"])

    def test_round_trip(self, tmp_path):
        cat = small_catalog()
        cat.save(tmp_path / "catalog.tsv")
        assert Catalog.load(tmp_path / "catalog.tsv") == cat


class TestFeatures:
    def test_tsv_counts(self, tmp_path):
        store = small_store()
        write_feature_tsv(tmp_path / "v.tsv", store.ids, store.visual)
        write_feature_tsv(tmp_path / "w.tsv", store.ids, store.textual)
        loaded = load_features(tmp_path / "v.tsv", tmp_path / "w.tsv")
        assert len(loaded) == 3
        assert loaded.d_v == 4 and loaded.d_w == 2

    def test_nan_names_product(self, tmp_path):
        write_rows(tmp_path / "v.tsv", [["a", "1", "2"], ["bad_item", "nan", "0"]])
        with pytest.raises(DataError, match="bad_item"):
            read_feature_tsv(tmp_path / "v.tsv")

    def test_ragged_dimension_rejected(self, tmp_path):
        write_rows(tmp_path / "v.tsv", [["a", "1", "2"], ["b", "1"]])
        with pytest.raises(DataError, match="b"):
            read_feature_tsv(tmp_path / "v.tsv")

    def test_missing_product_rejected(self, tmp_path):
        store = small_store()
        write_feature_tsv(tmp_path / "v.tsv", store.ids, store.visual)
        write_feature_tsv(tmp_path / "w.tsv", store.ids[:2], store.textual[:2])
        with pytest.raises(DataError, match="p2"):
            load_features(tmp_path / "v.tsv", tmp_path / "w.tsv")

    def test_binary_matches_tsv(self, tmp_path):
        store = small_store(n=7, d_v=5, d_w=3, seed=4)
        store.save(tmp_path / "v.tsv", tmp_path / "w.tsv", fmt="tsv")
        store.save(tmp_path / "v.bin", tmp_path / "w.bin", fmt="bin")
        a = load_features(tmp_path / "v.tsv", tmp_path / "w.tsv")
        b = load_features(tmp_path / "v.bin", tmp_path / "w.bin")
        assert a == b == store

    def test_binary_layout(self, tmp_path):
        write_feature_bin(tmp_path / "f.bin", ["x", "y"], np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]))
        raw = (tmp_path / "f.bin").read_bytes()
        assert raw[:4] == b"CRFT"
        header = np.frombuffer(raw[4:16], dtype="<u4")
        np.testing.assert_array_equal(header, [1, 2, 3])
        np.testing.assert_array_equal(np.frombuffer(raw[16:], dtype="<f4"), [1, 2, 3, 4, 5, 6])
        assert sidecar_path(tmp_path / "f.bin").read_text() == "0\tx\n1\ty\n"

    def test_truncated_binary_rejected(self, tmp_path):
        write_tensor_bin(tmp_path / "t.bin", np.ones((4, 4)))
        data = (tmp_path / "t.bin").read_bytes()
        (tmp_path / "t.bin").write_bytes(data[:-4])
        with pytest.raises(DataError):
            read_tensor_bin(tmp_path / "t.bin")

    def test_read_only(self):
        store = small_store()
        with pytest.raises(ValueError):
            store.visual[0, 0] = 1.0

    @settings(max_examples=30, deadline=None)
    @given(st.integers(1, 6), st.integers(1, 5), st.integers(0, 10_000))
    def test_round_trip_property(self, n, d, seed):
        import tempfile
        from pathlib import Path
        rng = np.random.default_rng(seed)
        ids = [f"id{i}" for i in range(n)]
        m = (rng.normal(size=(n, d)) * 10.0 ** rng.integers(-6, 6)).astype(np.float32)
        with tempfile.TemporaryDirectory() as tmp:
            write_feature_tsv(Path(tmp) / "a.tsv", ids, m)
            write_feature_bin(Path(tmp) / "a.bin", ids, m)
            for ids2, m2 in (read_feature_tsv(Path(tmp) / "a.tsv"), read_feature_bin(Path(tmp) / "a.bin")):
                assert ids2 == ids
                np.testing.assert_array_equal(m2, m)


class TestTriplets:
    def test_five_rows(self, tmp_path):
        rows = [["u1", "g1", "r1"], ["u1", "g2", "r2"], ["u2", "g1", "r3"], ["u2", "g2", "r1"], ["u1", "g1", "r3"]]
        t = load_triplets(write_rows(tmp_path / "t.tsv", rows), small_catalog())
        assert len(t) == 5
        assert t.counts() == {"train": 5, "valid": 0, "test": 0}

    def test_unknown_user_reports_line(self, tmp_path):
        rows = [["u1", "g1", "r1"], ["u1", "g2", "r2"], ["ghost", "g1", "r1"]]
        with pytest.raises(DataError, match=":3:.*ghost"):
            load_triplets(write_rows(tmp_path / "t.tsv", rows), small_catalog())

    def test_duplicate_rejected(self, tmp_path):
        rows = [["u1", "g1", "r1", "train"], ["u1", "g1", "r1", "train"]]
        with pytest.raises(DataError, match="duplicate"):
            load_triplets(write_rows(tmp_path / "t.tsv", rows), small_catalog())

    def test_same_record_in_two_splits_allowed(self, tmp_path):
        rows = [["u1", "g1", "r1", "train"], ["u1", "g1", "r1", "test"]]
        t = load_triplets(write_rows(tmp_path / "t.tsv", rows), small_catalog())
        assert t.counts()["test"] == 1

    def test_round_trip(self, tmp_path):
        t = generate_synthetic(SynthConfig(n_users=4, n_givens=6, n_matchers=6, n_triplets=20,
                                           pool_size=6, seed=2)).triplets
        t = split_triplets(t, (0.6, 0.2, 0.2), seed=1)
        t.save(tmp_path / "t.tsv")
        assert load_triplets(tmp_path / "t.tsv", t.catalog) == t

    def test_min_interactions_drops_sparse_users(self):
        cat = small_catalog()
        t = TripletSet(cat, np.array([0, 0, 1]), np.array([0, 1, 0]), np.array([0, 1, 2]))
        kept = filter_min_interactions(t, 2)
        np.testing.assert_array_equal(kept.users, [0, 0])


def synthetic_triplets(n_users=10, n=100, seed=0):
    rng = np.random.default_rng(seed)
    cat = Catalog([f"u{i}" for i in range(n_users)], ["g"], [f"r{i}" for i in range(n)])
    return TripletSet(cat, rng.integers(n_users, size=n), np.zeros(n, dtype=np.int64), np.arange(n))


class TestSplit:
    def test_hundred_records(self):
        counts = split_triplets(synthetic_triplets(), (0.8, 0.1, 0.1), seed=0).counts()
        assert abs(counts["train"] - 80) <= 2
        assert abs(counts["valid"] - 10) <= 2
        assert abs(counts["test"] - 10) <= 2

    def test_all_train(self):
        counts = split_triplets(synthetic_triplets(), (1.0, 0.0, 0.0)).counts()
        assert counts == {"train": 100, "valid": 0, "test": 0}

    def test_deterministic(self):
        a = split_triplets(synthetic_triplets(), (0.8, 0.1, 0.1), seed=5)
        b = split_triplets(synthetic_triplets(), (0.8, 0.1, 0.1), seed=5)
        np.testing.assert_array_equal(a.split, b.split)

    def test_empty_rejected(self):
        t = TripletSet(small_catalog(), np.array([], dtype=np.int64), np.array([], dtype=np.int64),
                       np.array([], dtype=np.int64))
        with pytest.raises(DataError):
            split_triplets(t)

    def test_bad_ratios_rejected(self):
        with pytest.raises(DataError):
            split_triplets(synthetic_triplets(), (0.5, 0.1, 0.1))

    @settings(max_examples=60, deadline=None)
    @given(st.integers(1, 15), st.integers(3, 120), st.integers(0, 10_000),
           st.sampled_from([(0.8, 0.1, 0.1), (0.6, 0.2, 0.2), (0.34, 0.33, 0.33), (0.1, 0.45, 0.45)]))
    def test_stratification(self, n_users, n, seed, ratios):
        t = synthetic_triplets(n_users, n, seed)
        s = split_triplets(t, ratios, seed)
        for user in np.unique(t.users):
            mine = s.split[s.users == user]
            if len(mine) >= 3:
                assert np.any(mine == 0)
            for code, ratio in enumerate(ratios):
                assert abs(np.sum(mine == code) - ratio * len(mine)) <= 1 + 1e-9


class TestSynthetic:
    def test_sizes(self):
        syn = generate_synthetic(SynthConfig(n_users=50, n_givens=200, n_matchers=200, n_triplets=2000))
        assert syn.catalog.sizes == {"users": 50, "givens": 200, "matchers": 200}
        assert len(syn.features) == 400
        assert len(syn.triplets) == 2000

    def test_deterministic(self):
        cfg = SynthConfig(n_users=8, n_givens=20, n_matchers=20, n_triplets=100, seed=3)
        a, b = generate_synthetic(cfg), generate_synthetic(cfg)
        assert a.features == b.features and a.triplets == b.triplets
        np.testing.assert_array_equal(a.oracle_scores, b.oracle_scores)

    def test_chosen_beat_random_candidates(self):
        cfg = SynthConfig(seed=1)
        syn = generate_synthetic(cfg)
        t = syn.triplets
        rng = np.random.default_rng(0)
        rand = rng.integers(cfg.n_matchers, size=len(t))
        chosen = syn.oracle(t.users, t.givens, t.matchers).mean()
        baseline = syn.oracle(t.users, t.givens, rand).mean()
        assert chosen - baseline > cfg.noise_std

    @pytest.mark.parametrize("noise", [0.0, 0.05, 0.1])
    def test_oracle_separability(self, noise):
        syn = generate_synthetic(SynthConfig(noise_std=noise, seed=7))
        t = split_triplets(syn.triplets, (0.8, 0.1, 0.1), seed=7).subset("test")
        neg = np.random.default_rng(1).integers(199, size=len(t))
        neg = neg + (neg >= t.matchers)
        a = pairwise_auc(syn.oracle(t.users, t.givens, t.matchers), syn.oracle(t.users, t.givens, neg))
        assert a >= 0.95

    def test_invalid_config(self):
        with pytest.raises(DataError):
            SynthConfig(n_users=0)
        with pytest.raises(DataError):
            SynthConfig(noise_std=-1.0)

    @pytest.mark.parametrize("fmt", ["tsv", "bin"])
    def test_dataset_directory_round_trip(self, tmp_path, fmt):
        syn = generate_synthetic(SynthConfig(n_users=4, n_givens=6, n_matchers=6, n_triplets=20, pool_size=6))
        t = split_triplets(syn.triplets, (0.6, 0.2, 0.2), seed=0)
        save_dataset(tmp_path, syn.catalog, syn.features, t, fmt=fmt)
        catalog, features, triplets = load_dataset(tmp_path)
        assert catalog == syn.catalog and features == syn.features and triplets == t
