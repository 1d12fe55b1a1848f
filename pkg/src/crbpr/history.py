"""Per-user and per-given-product choice histories and the filtered ur/gr lists."""

from __future__ import annotations

from collections import Counter
from dataclasses import dataclass

import numpy as np

from .data import SPLIT_CODE, FeatureStore, TripletSet


@dataclass(frozen=True)
class HistoryQuery:
    kind: str  # "user" or "given"
    anchor: int
    target: int
    N: int = 2

    def __post_init__(self):
        if self.kind not in ("user", "given"):
            raise ValueError(f"kind must be 'user' or 'given', got {self.kind!r}")
        if self.N < 1:
            raise ValueError("N must be >= 1")


class HistoryIndex:
    """Matcher histories built from the train split only.

    Lists hold matcher indices deduplicated in first-seen order.  Queries
    rank a history by cosine similarity of the concatenated raw visual and
    textual features, breaking ties by ascending matcher index (catalog
    order).
    """

    def __init__(self, by_user, by_given, popularity, n_matchers):
        self.by_user = by_user
        self.by_given = by_given
        self.popularity = popularity
        self.n_matchers = n_matchers
        counts = np.array([popularity.get(i, 0) for i in range(n_matchers)])
        # most popular first, ties by index
        self.popular_order = np.lexsort((np.arange(n_matchers), -counts))
        self._unit = None
        self._cache = {}

    def attach_features(self, features: FeatureStore, matcher_ids):
        rows = features.rows_for(matcher_ids)
        cat = np.hstack([features.visual[rows], features.textual[rows]]).astype(np.float64)
        norms = np.linalg.norm(cat, axis=1, keepdims=True)
        self._unit = cat / np.maximum(norms, 1e-12)
        self._cache.clear()
        return self

    def history(self, kind, anchor):
        table = self.by_user if kind == "user" else self.by_given
        return table.get(anchor, [])

    def query(self, q: HistoryQuery, exclude_target: bool = True) -> list[int]:
        key = (q.kind, q.anchor, q.target, q.N, exclude_target)
        hit = self._cache.get(key)
        if hit is not None:
            return list(hit)
        result = self._query(q, exclude_target)
        self._cache[key] = tuple(result)
        return result

    def _query(self, q, exclude_target):
        if self._unit is None:
            raise RuntimeError("attach_features() must be called before querying")
        cands = [r for r in self.history(q.kind, q.anchor) if not (exclude_target and r == q.target)]
        if not cands:
            out = [int(r) for r in self.popular_order if r != q.target][: q.N]
            if not out:
                out = [q.target]
            while len(out) < q.N:
                out.append(out[0])
            return out
        cands = np.array(cands, dtype=np.int64)
        # rounding lets mathematically equal cosines tie exactly, so the index decides
        sims = np.round(self._unit[cands] @ self._unit[q.target], 12)
        order = np.lexsort((cands, -sims))
        top = [int(c) for c in cands[order[: q.N]]]
        while len(top) < q.N:
            top.append(top[0])
        return top

    def lists(self, kind, anchors, targets, N, exclude_target=True) -> np.ndarray:
        """Stacked (len(anchors), N) matrix of list members."""
        out = np.empty((len(anchors), N), dtype=np.int64)
        for i, (a, t) in enumerate(zip(anchors, targets)):
            out[i] = self.query(HistoryQuery(kind, int(a), int(t), N), exclude_target)
        return out


def build_index(triplets: TripletSet, features: FeatureStore | None = None) -> HistoryIndex:
    train = triplets.split == SPLIT_CODE["train"]
    by_user: dict[int, list[int]] = {}
    by_given: dict[int, list[int]] = {}
    popularity: Counter = Counter()
    for u, g, r in zip(triplets.users[train], triplets.givens[train], triplets.matchers[train]):
        u, g, r = int(u), int(g), int(r)
        popularity[r] += 1
        for table, key in ((by_user, u), (by_given, g)):
            hist = table.setdefault(key, [])
            if r not in hist:
                hist.append(r)
    index = HistoryIndex(by_user, by_given, dict(popularity), len(triplets.catalog.matchers))
    if features is not None:
        index.attach_features(features, triplets.catalog.matchers)
    return index


def query_list(index: HistoryIndex, q: HistoryQuery, features: FeatureStore | None = None,
               exclude_target: bool = True, matcher_ids=None) -> list[int]:
    """Functional wrapper around :meth:`HistoryIndex.query`."""
    if features is not None and index._unit is None:
        index.attach_features(features, matcher_ids)
    return index.query(q, exclude_target)
