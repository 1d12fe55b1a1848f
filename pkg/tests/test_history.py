import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crbpr.data import Catalog, FeatureStore, TripletSet
from crbpr.history import HistoryIndex, HistoryQuery, build_index, query_list


def world(visual, records, n_users=3, n_givens=2, split=None):
    """Catalog + features + triplets where matcher i has visual vector ``visual[i]``."""
    visual = np.asarray(visual, dtype=np.float64)
    n_matchers = len(visual)
    cat = Catalog([f"u{i}" for i in range(n_users)], [f"g{i}" for i in range(n_givens)],
                  [f"r{i}" for i in range(n_matchers)])
    ids = cat.givens + cat.matchers
    vis = np.vstack([np.ones((n_givens, visual.shape[1])), visual])
    feats = FeatureStore(ids, vis, np.zeros((len(ids), 1)))
    rec = np.asarray(records, dtype=np.int64).reshape(-1, 3)
    t = TripletSet(cat, rec[:, 0], rec[:, 1], rec[:, 2], split)
    return cat, feats, t


class TestBuildIndex:
    def test_user_lists(self):
        _, _, t = world(np.eye(3), [(1, 0, 0), (1, 1, 1)])
        index = build_index(t)
        assert index.by_user[1] == [0, 1]
        assert index.by_given == {0: [0], 1: [1]}

    def test_duplicates_and_popularity(self):
        _, _, t = world(np.eye(3), [(0, 0, 2), (1, 0, 2)])
        index = build_index(t)
        assert index.by_given[0] == [2]
        assert index.popularity[2] == 2

    def test_empty_train(self):
        _, _, t = world(np.eye(3), [(0, 0, 1)], split=np.array([2], dtype=np.int8))
        index = build_index(t)
        assert index.by_user == {} and index.by_given == {} and index.popularity == {}

    def test_only_train_split_counts(self):
        _, _, t = world(np.eye(3), [(0, 0, 0), (0, 0, 1), (0, 1, 2)], split=np.array([0, 1, 2], dtype=np.int8))
        index = build_index(t)
        assert index.by_user == {0: [0]}


class TestQuery:
    def test_cosine_filtering_example(self):
        # cosines with [1, 0]: 1.0, 0.0, ~0.994
        cat, feats, t = world([[1, 0], [0, 1], [0.9, 0.1], [1, 0]], [(0, 0, 0), (0, 0, 1), (0, 0, 2)])
        index = build_index(t, feats)
        assert index.query(HistoryQuery("user", 0, 3, 2)) == [0, 2]

    def test_single_history_repeated(self):
        cat, feats, t = world(np.eye(3), [(0, 0, 1)])
        index = build_index(t, feats)
        assert index.query(HistoryQuery("user", 0, 2, 3)) == [1, 1, 1]

    def test_empty_history_popularity(self):
        cat, feats, t = world(np.eye(4), [(1, 0, 2), (1, 1, 2), (2, 0, 3), (2, 1, 1), (0, 0, 1)])
        index = build_index(t, feats)
        # an unknown anchor has no history, so popularity decides
        assert index.query(HistoryQuery("given", 7, 0, 2)) == [1, 2]

    def test_popularity_excludes_target(self):
        cat, feats, t = world(np.eye(4), [(1, 0, 2), (1, 1, 2), (2, 0, 1)])
        index = build_index(t, feats)
        assert index.query(HistoryQuery("user", 0, 2, 2)) == [1, 0]

    def test_exclude_target(self):
        cat, feats, t = world(np.eye(3) + 0.1, [(0, 0, 0), (0, 1, 1)])
        index = build_index(t, feats)
        assert 0 not in index.query(HistoryQuery("user", 0, 0, 2), exclude_target=True)
        assert index.query(HistoryQuery("user", 0, 0, 1), exclude_target=False) == [0]

    def test_target_is_only_history(self):
        # after exclusion nothing is left, so popularity takes over
        cat, feats, t = world(np.eye(3), [(0, 0, 0), (1, 0, 2), (2, 1, 2)])
        index = build_index(t, feats)
        assert index.query(HistoryQuery("user", 0, 0, 2)) == [2, 1]

    def test_ties_by_index(self):
        cat, feats, t = world([[1, 0], [1, 0], [1, 0], [1, 0]], [(0, 0, 3), (0, 0, 1), (0, 0, 2)])
        index = build_index(t, feats)
        assert index.query(HistoryQuery("user", 0, 0, 2)) == [1, 2]

    def test_functional_wrapper(self):
        cat, feats, t = world(np.eye(3), [(0, 0, 1)])
        index = build_index(t)
        assert query_list(index, HistoryQuery("user", 0, 2, 2), feats, True, cat.matchers) == [1, 1]

    def test_memoized(self):
        cat, feats, t = world(np.eye(3), [(0, 0, 1), (0, 0, 2)])
        index = build_index(t, feats)
        q = HistoryQuery("user", 0, 0, 2)
        first = index.query(q)
        first.append(99)
        assert index.query(q) == [1, 2]

    def test_query_validation(self):
        with pytest.raises(ValueError):
            HistoryQuery("user", 0, 0, 0)
        with pytest.raises(ValueError):
            HistoryQuery("shop", 0, 0, 2)

    def test_requires_features(self):
        _, _, t = world(np.eye(3), [(0, 0, 1)])
        with pytest.raises(RuntimeError):
            build_index(t).query(HistoryQuery("user", 0, 2, 2))


@st.composite
def histories(draw):
    n_matchers = draw(st.integers(2, 12))
    dim = draw(st.integers(1, 4))
    seed = draw(st.integers(0, 2**16))
    rng = np.random.default_rng(seed)
    # coarse grid values make exact cosine ties common
    visual = rng.integers(-2, 3, size=(n_matchers, dim)).astype(np.float64)
    n_rec = draw(st.integers(1, 20))
    rec = np.column_stack([rng.integers(2, size=n_rec), rng.integers(2, size=n_rec),
                           rng.integers(n_matchers, size=n_rec)])
    target = draw(st.integers(0, n_matchers - 1))
    N = draw(st.integers(1, 5))
    exclude = draw(st.booleans())
    return visual, rec, target, N, exclude


def cosine(a, b):
    na, nb = math.sqrt(sum(x * x for x in a)), math.sqrt(sum(x * x for x in b))
    if na == 0 or nb == 0:
        return 0.0
    return sum(x * y for x, y in zip(a, b)) / (na * nb)


def brute_force(visual, history, target, exclude):
    cands = [r for r in history if not (exclude and r == target)]
    if not cands:
        return None
    sims = {r: round(cosine(visual[r], visual[target]), 12) for r in cands}
    return sorted(cands, key=lambda r: (-sims[r], r)), sims


class TestHistoryProperties:
    @settings(max_examples=300, deadline=None)
    @given(histories())
    def test_contract(self, case):
        visual, rec, target, N, exclude = case
        cat, feats, t = world(visual, rec, n_users=2, n_givens=2)
        index = build_index(t, feats)
        for kind in ("user", "given"):
            for anchor in (0, 1):
                got = index.query(HistoryQuery(kind, anchor, target, N), exclude)
                assert len(got) == N
                ref = brute_force(visual, index.history(kind, anchor), target, exclude)
                if ref is None:
                    others = [int(r) for r in index.popular_order if r != target]
                    expect = others[:N] if others else [target]
                    expect = expect + [expect[0]] * (N - len(expect))
                    assert got == expect
                    continue
                order, sims = ref
                if len(order) >= N:
                    assert got == order[:N]
                    s = [sims[r] for r in got]
                    assert all(a >= b for a, b in zip(s, s[1:]))
                else:
                    assert got == order + [order[0]] * (N - len(order))
                if exclude and len(order) > 0:
                    assert target not in got
