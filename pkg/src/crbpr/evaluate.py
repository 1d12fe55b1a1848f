"""AUC and top-K ranking metrics over sampled candidates, case-study ranking, reports."""

from __future__ import annotations

import csv
import hashlib
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .data import DataError, TripletSet

METRICS = ("AUC", "HR@{K}", "NDCG@{K}", "MRR@{K}")


@dataclass
class EvalProtocol:
    K: int = 10
    n_negatives_pairwise: int = 1
    n_candidates_ranking: int = 100
    seed: int = 0
    norm_mode: str = "corpus"
    batch_size: int = 64  # context size when norm_mode == "batch"

    def __post_init__(self):
        if self.K < 1:
            raise ValueError("K must be >= 1")
        if self.n_candidates_ranking <= self.K:
            raise ValueError("n_candidates_ranking must exceed K")
        if self.n_negatives_pairwise != 1:
            raise ValueError("pairwise AUC uses exactly one sampled negative per triplet")


@dataclass
class MetricReport:
    model: str
    setting: str
    metrics: dict
    ranks: list = field(default_factory=list)
    fingerprint: str = ""

    def to_json(self):
        return asdict(self)

    @classmethod
    def from_json(cls, obj):
        return cls(**obj)


def fingerprint(obj) -> str:
    blob = json.dumps(obj, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


# ---------------------------------------------------------------------------
# pure metric functions
# ---------------------------------------------------------------------------


def pairwise_auc(pos_scores, neg_scores) -> float:
    """Fraction of pairs with the positive ahead; exact ties count one half."""
    pos = np.asarray(pos_scores, dtype=np.float64)
    neg = np.asarray(neg_scores, dtype=np.float64)
    if pos.size == 0:
        raise DataError("AUC over an empty set")
    return float(np.mean((pos > neg) + 0.5 * (pos == neg)))


def positive_rank(scores, pos_col=0):
    """1-based rank of ``scores[..., pos_col]``; equal scores are placed ahead of it."""
    scores = np.asarray(scores, dtype=np.float64)
    pos = scores[..., pos_col : pos_col + 1]
    others = np.delete(scores, pos_col, axis=-1)
    return 1 + np.sum(others >= pos, axis=-1)


def ranking_metrics_from_ranks(ranks, K):
    """(HR@K, NDCG@K, MRR@K) averaged over queries with one relevant item each."""
    ranks = np.asarray(ranks, dtype=np.float64)
    if ranks.size == 0:
        raise DataError("ranking metrics over an empty set")
    hit = ranks <= K
    hr = float(np.mean(hit))
    ndcg = float(np.mean(np.where(hit, 1.0 / np.log2(ranks + 1.0), 0.0)))
    mrr = float(np.mean(np.where(hit, 1.0 / ranks, 0.0)))
    return hr, ndcg, mrr


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------


def sample_auc_negatives(positives, n_matchers, seed):
    positives = np.asarray(positives, dtype=np.int64)
    if n_matchers < 2:
        raise DataError("need at least two matching products to sample negatives")
    rng = np.random.default_rng([seed, 1])
    neg = rng.integers(n_matchers - 1, size=len(positives))
    return neg + (neg >= positives)


def sample_candidates(positives, n_matchers, n_candidates, seed):
    """(n, n_candidates) matrix: column 0 is the positive, the rest distinct negatives."""
    positives = np.asarray(positives, dtype=np.int64)
    if n_candidates > n_matchers:
        raise DataError(f"candidate pool of {n_candidates} exceeds {n_matchers} matching products")
    rng = np.random.default_rng([seed, 2])
    out = np.empty((len(positives), n_candidates), dtype=np.int64)
    for i, pos in enumerate(positives):
        neg = rng.choice(n_matchers - 1, size=n_candidates - 1, replace=False)
        out[i, 0] = pos
        out[i, 1:] = neg + (neg >= pos)
    return out


# ---------------------------------------------------------------------------
# model-driven evaluation
# ---------------------------------------------------------------------------


def _score_pairs(model, u, g, r_pos, r_neg, protocol):
    """Scores of positives and negatives; batch mode uses one context per chunk."""
    if protocol.norm_mode == "corpus":
        n = len(u)
        p = model.score_overall(np.concatenate([u, u]), np.concatenate([g, g]),
                                np.concatenate([r_pos, r_neg]), "corpus")
        return p[:n], p[n:]
    pos_out, neg_out = [], []
    step = protocol.batch_size
    for s in range(0, len(u), step):
        sl = slice(s, s + step)
        k = len(u[sl])
        p = model.score_overall(np.concatenate([u[sl], u[sl]]), np.concatenate([g[sl], g[sl]]),
                                np.concatenate([r_pos[sl], r_neg[sl]]), "batch")
        pos_out.append(p[:k])
        neg_out.append(p[k:])
    return np.concatenate(pos_out), np.concatenate(neg_out)


def auc(model, triplets: TripletSet, protocol: EvalProtocol) -> float:
    if len(triplets) == 0:
        raise DataError("AUC over an empty test set")
    neg = sample_auc_negatives(triplets.matchers, model.n_matchers, protocol.seed)
    pos_s, neg_s = _score_pairs(model, triplets.users, triplets.givens, triplets.matchers, neg, protocol)
    return pairwise_auc(pos_s, neg_s)


def candidate_scores(model, triplets: TripletSet, protocol: EvalProtocol):
    cands = sample_candidates(triplets.matchers, model.n_matchers, protocol.n_candidates_ranking, protocol.seed)
    n, c = cands.shape
    if protocol.norm_mode == "corpus":
        flat = model.score_overall(np.repeat(triplets.users, c), np.repeat(triplets.givens, c),
                                   cands.reshape(-1), "corpus")
        return flat.reshape(n, c)
    out = np.empty((n, c), dtype=np.float32)
    for i in range(n):
        out[i] = model.score_overall(np.full(c, triplets.users[i]), np.full(c, triplets.givens[i]),
                                     cands[i], "batch")
    return out


def rank_metrics(model, triplets: TripletSet, protocol: EvalProtocol):
    """(HR@K, NDCG@K, MRR@K, per-query ranks) with 1 positive + sampled negatives per query."""
    if len(triplets) == 0:
        raise DataError("ranking metrics over an empty test set")
    ranks = positive_rank(candidate_scores(model, triplets, protocol), 0)
    hr, ndcg, mrr = ranking_metrics_from_ranks(ranks, protocol.K)
    return hr, ndcg, mrr, ranks


def evaluate(model, triplets: TripletSet, protocol: EvalProtocol, model_name="CR-BPR", setting="test",
             config=None) -> MetricReport:
    a = auc(model, triplets, protocol)
    hr, ndcg, mrr, ranks = rank_metrics(model, triplets, protocol)
    K = protocol.K
    metrics = {"AUC": a, f"HR@{K}": hr, f"NDCG@{K}": ndcg, f"MRR@{K}": mrr}
    fp = fingerprint({"config": config, "protocol": asdict(protocol), "n": len(triplets)})
    return MetricReport(model_name, setting, metrics, [int(x) for x in ranks], fp)


def rank_case(model, u, g, candidates, norm_mode="corpus"):
    """Candidates sorted by fused score, each with its per-branch breakdown."""
    candidates = [int(c) for c in candidates]
    if len(set(candidates)) != len(candidates):
        raise DataError("duplicate candidate in case-study list")
    if not candidates:
        raise DataError("empty candidate list")
    c = len(candidates)
    s = model.score(np.full(c, int(u)), np.full(c, int(g)), np.array(candidates), norm_mode)
    order = sorted(range(c), key=lambda i: (-float(s["p"][i]), candidates[i]))
    rows = []
    for rank, i in enumerate(order, 1):
        rows.append({
            "rank": rank,
            "product_id": model.catalog.matchers[candidates[i]],
            "p": float(s["p"][i]),
            "s_ur": float(s["s_ur"][i]),
            "s_gr": float(s["s_gr"][i]),
            "s_ur^c": float(s["s_uc"][i]),
            "s_gr^c": float(s["s_gc"][i]),
        })
    return rows


CASE_COLUMNS = ("rank", "product_id", "p", "s_ur", "s_gr", "s_ur^c", "s_gr^c")


def write_case(rows, path):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        w = csv.writer(fh, delimiter="\t", lineterminator="\n")
        w.writerow(CASE_COLUMNS)
        for row in rows:
            w.writerow([row["rank"], row["product_id"]] + [f"{row[k]:.6f}" for k in CASE_COLUMNS[2:]])


# ---------------------------------------------------------------------------
# reports
# ---------------------------------------------------------------------------


def _metric_value(metrics, prefix):
    for key, value in metrics.items():
        if key == prefix or key.startswith(prefix + "@"):
            return value
    return math.nan


def emit_report(reports, path, fmt="json"):
    """Write one or more MetricReports as JSON (lossless) or a 4-decimal TSV table."""
    if isinstance(reports, MetricReport):
        reports = [reports]
    path = Path(path)
    if fmt == "json":
        with open(path, "w", encoding="utf-8") as fh:
            json.dump([r.to_json() for r in reports], fh, indent=2)
    elif fmt == "tsv":
        keys = set()
        for r in reports:
            if (r.model, r.setting) in keys:
                raise ValueError(f"duplicate report row for {(r.model, r.setting)}")
            keys.add((r.model, r.setting))
        with open(path, "w", encoding="utf-8", newline="") as fh:
            w = csv.writer(fh, delimiter="\t", lineterminator="\n")
            w.writerow(["model", "setting", "AUC", "HR@10", "NDCG@10", "MRR@10"])
            for r in reports:
                vals = [_metric_value(r.metrics, m) for m in ("AUC", "HR", "NDCG", "MRR")]
                w.writerow([r.model, r.setting] + [f"{v:.4f}" for v in vals])
    else:
        raise ValueError(f"unknown report format {fmt!r}")
    return path


def load_reports(path):
    with open(path, encoding="utf-8") as fh:
        return [MetricReport.from_json(obj) for obj in json.load(fh)]
