"""BPR training with early stopping, ablation suites and grid search."""

from __future__ import annotations

import dataclasses
import itertools
import json
import logging
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import gradcore as gc
from .data import Dataset, DataError
from .evaluate import EvalProtocol, MetricReport, auc, evaluate
from .history import HistoryIndex, build_index
from .model import CRBPR, BranchToggles, ConfigError, Hyperparams, reduce_to_baseline, save_checkpoint

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# negative sampling
# ---------------------------------------------------------------------------


def sample_negative(r_pos: int, n_matchers: int, rng: np.random.Generator, exclude=()) -> int:
    """Uniform draw from the matcher set minus ``r_pos`` (and minus ``exclude`` if given)."""
    if n_matchers < 2:
        raise DataError("negative sampling needs at least two matching products")
    banned = {int(r_pos), *map(int, exclude)}
    if len(banned) >= n_matchers:
        raise DataError("every matching product is excluded from negative sampling")
    if not exclude:
        r = int(rng.integers(n_matchers - 1))
        return r + (r >= r_pos)
    while True:
        r = int(rng.integers(n_matchers))
        if r not in banned:
            return r


def sample_negatives(r_pos, n_matchers, rng, observed=None, keys=None):
    """Vectorised :func:`sample_negative`.

    With ``observed`` (a map from ``keys[i]`` to a set of matchers) the draw
    also avoids every observed positive for that key.
    """
    r_pos = np.asarray(r_pos, dtype=np.int64)
    if n_matchers < 2:
        raise DataError("negative sampling needs at least two matching products")
    neg = rng.integers(n_matchers - 1, size=len(r_pos))
    neg = neg + (neg >= r_pos)
    if observed is not None:
        for i, key in enumerate(keys):
            seen = observed.get(key, ())
            if neg[i] in seen:
                neg[i] = sample_negative(r_pos[i], n_matchers, rng, exclude=seen)
    return neg


# ---------------------------------------------------------------------------
# training
# ---------------------------------------------------------------------------


def bpr_loss(diff, lam=0.0, params=()):
    """sum(-ln sigmoid(diff)) + lam/2 * sum ||theta||^2 on plain arrays."""
    with np.errstate(invalid="ignore"):
        value = float(np.sum(gc.softplus(-np.asarray(diff, dtype=np.float64))))
    if lam:
        value += 0.5 * lam * sum(float(np.sum(np.asarray(p, dtype=np.float64) ** 2)) for p in params)
    if not np.isfinite(value):
        raise gc.NumericError("non-finite BPR loss")
    return value


@dataclass
class TrainRun:
    config: dict
    epoch_log: list = field(default_factory=list)
    best_epoch: int = 0
    best_valid_auc: float = float("-inf")
    checkpoint_path: str | None = None
    test_report: MetricReport | None = None
    wall_times: list = field(default_factory=list)
    stopped_early: bool = False

    def to_json(self):
        out = dataclasses.asdict(self)
        out["test_report"] = self.test_report.to_json() if self.test_report else None
        return out


def run_config(hp: Hyperparams, toggles: BranchToggles, protocol: EvalProtocol, strict_negatives=False):
    return {
        "hyperparams": dataclasses.asdict(hp),
        "toggles": dataclasses.asdict(toggles),
        "protocol": dataclasses.asdict(protocol),
        "norm_mode_train": "batch",
        "strict_negatives": strict_negatives,
        "seed": hp.seed,
    }


def _snapshot(model):
    return {name: p.value.copy() for name, p in model.params.items()}


def _restore(model, snap):
    for name, value in snap.items():
        model.params[name].value = value.copy()
    model.mark_updated()


def train(data: Dataset, index: HistoryIndex | None = None, hp: Hyperparams | None = None,
          toggles: BranchToggles | None = None, protocol: EvalProtocol | None = None,
          out_dir=None, strict_negatives=False, model_name="CR-BPR", evaluate_test=True):
    """Fit a model with Adam on the BPR loss; returns ``(TrainRun, model)``.

    The returned model holds the parameters of the epoch with the best
    validation AUC (earliest on ties).  With ``out_dir`` the epoch log is
    written as JSON lines and the best parameters as a checkpoint.
    """
    hp = hp or Hyperparams()
    toggles = toggles or BranchToggles()
    protocol = protocol or EvalProtocol()
    train_set, valid_set = data.train, data.valid
    if len(train_set) == 0:
        raise DataError("no training triplets")
    if len(valid_set) == 0:
        raise DataError("early stopping needs validation triplets")
    if index is None:
        index = build_index(data.triplets, data.features)

    model = CRBPR(data.catalog, data.features, index, hp, toggles)
    state = gc.AdamState()
    run = TrainRun(run_config(hp, toggles, protocol, strict_negatives))
    n_matchers = model.n_matchers

    observed = keys = None
    if strict_negatives:
        observed = {}
        for u, g, r in zip(train_set.users, train_set.givens, train_set.matchers):
            observed.setdefault((int(u), int(g)), set()).add(int(r))
        keys = list(zip(train_set.users.tolist(), train_set.givens.tolist()))

    out_dir = Path(out_dir) if out_dir else None
    log_fh = None
    if out_dir:
        out_dir.mkdir(parents=True, exist_ok=True)
        log_fh = open(out_dir / "train_log.jsonl", "w", encoding="utf-8")

    best = _snapshot(model)
    since_best = 0
    n = len(train_set)
    try:
        for epoch in range(1, hp.max_epochs + 1):
            t0 = time.perf_counter()
            rng = np.random.default_rng([hp.seed, epoch])
            perm = rng.permutation(n)
            key_arr = [keys[i] for i in perm] if keys is not None else None
            neg = sample_negatives(train_set.matchers[perm], n_matchers, rng, observed, key_arr)
            total = 0.0
            for s in range(0, n, hp.batch_size):
                sl = perm[s : s + hp.batch_size]
                total += model.loss_and_grad(train_set.users[sl], train_set.givens[sl],
                                             train_set.matchers[sl], neg[s : s + hp.batch_size])
                gc.adam_step(model.enabled_params(), state, hp.learning_rate)
                model.mark_updated()
            valid_auc = auc(model, valid_set, protocol)
            elapsed = time.perf_counter() - t0
            record = {"epoch": epoch, "loss": total / n, "valid_auc": valid_auc}
            run.epoch_log.append(record)
            run.wall_times.append(elapsed)
            if log_fh:
                log_fh.write(json.dumps({**record, "wall_time": elapsed}) + "\n")
                log_fh.flush()
            log.info("epoch %d loss %.5f valid AUC %.4f", epoch, record["loss"], valid_auc)
            if valid_auc > run.best_valid_auc:
                run.best_valid_auc = valid_auc
                run.best_epoch = epoch
                best = _snapshot(model)
                since_best = 0
            else:
                since_best += 1
                if since_best >= hp.patience:
                    run.stopped_early = True
                    break
    except gc.NumericError:
        _restore(model, best)
        if out_dir:
            run.checkpoint_path = str(save_checkpoint(model, out_dir / "checkpoint"))
        raise
    finally:
        if log_fh:
            log_fh.close()

    _restore(model, best)
    if evaluate_test and len(data.test):
        run.test_report = evaluate(model, data.test, protocol, model_name, "test", run.config)
    if out_dir:
        run.checkpoint_path = str(save_checkpoint(model, out_dir / "checkpoint",
                                                  extra={"best_epoch": run.best_epoch}))
    return run, model


# ---------------------------------------------------------------------------
# ablations
# ---------------------------------------------------------------------------

ABLATIONS = ("-w/o UC", "-w/o GC", "-w/o UC+U", "-w/o GC+G", "-w/o FS*",
             "-w/o V", "-w/o T", "-w/o V+FS*", "-w/o T+FS*")


def ablation_variant(name: str, hp: Hyperparams):
    """(Hyperparams, BranchToggles) for a variant name or a baseline name."""
    if name in ("CR-BPR", "MF-BPR", "V-BPR", "T-BPR", "VT-BPR", "GP-BPR"):
        overrides, toggles = reduce_to_baseline(name)
        return hp.replace(**overrides), toggles
    if name not in ABLATIONS:
        raise ConfigError(f"unknown ablation variant {name!r}")
    t = {}
    over = {}
    parts = name[len("-w/o "):].split("+")
    for part in parts:
        if part == "UC":
            t["use_UC"] = False
            over["phi_uc"] = 0.0
        elif part == "GC":
            t["use_GC"] = False
            over["phi_gc"] = 0.0
        elif part == "U":
            t["use_U"] = False
        elif part == "G":
            t["use_G"] = False
        elif part == "FS*":
            over["feature_scaling"] = False
        elif part == "V":
            t["use_visual"] = False
            over.update(eta=0.0, pi=0.0)
        elif part == "T":
            t["use_textual"] = False
            over.update(eta=1.0, pi=1.0)
    return hp.replace(**over), BranchToggles(**t)


def run_ablation(data: Dataset, hp: Hyperparams, variants, seeds=(0,), protocol: EvalProtocol | None = None,
                 index: HistoryIndex | None = None):
    """Train every variant under every seed; rows hold seed-mean test metrics."""
    protocol = protocol or EvalProtocol()
    index = index or build_index(data.triplets, data.features)
    names = ["CR-BPR"] + [v for v in variants if v != "CR-BPR"]
    resolved = {v: ablation_variant(v, hp) for v in names}
    table = []
    for name in names:
        vhp, toggles = resolved[name]
        per_seed = []
        for seed in seeds:
            run, _ = train(data, index, vhp.replace(seed=seed), toggles, protocol, model_name=name)
            per_seed.append({"seed": seed, "best_epoch": run.best_epoch,
                             "valid_auc": run.best_valid_auc, **run.test_report.metrics})
        metric_keys = [k for k in per_seed[0] if k not in ("seed", "best_epoch")]
        row = {"variant": name, "seeds": list(seeds)}
        row.update({k: float(np.mean([r[k] for r in per_seed])) for k in metric_keys})
        row["runs"] = per_seed
        table.append(row)
    return table


def ablation_reports(table, setting="test"):
    """MetricReports (seed means) for :func:`evaluate.emit_report`."""
    out = []
    for row in table:
        metrics = {k: v for k, v in row.items() if k in ("AUC",) or "@" in k}
        out.append(MetricReport(row["variant"], setting, metrics))
    return out


# ---------------------------------------------------------------------------
# grid search
# ---------------------------------------------------------------------------


@dataclass
class GridSpec:
    batch_size: list = field(default_factory=lambda: [64, 128, 256, 512])
    lam: list = field(default_factory=lambda: [1e-3, 1e-4, 1e-5, 1e-6, 1e-7])
    hidden_dim: list = field(default_factory=lambda: [256, 512])
    learning_rate: list = field(default_factory=lambda: [1e-2, 1e-3, 1e-4])

    def __post_init__(self):
        for name in ("batch_size", "lam", "hidden_dim", "learning_rate"):
            if not getattr(self, name):
                raise ConfigError(f"grid axis {name!r} is empty")

    def points(self):
        for bs, lam, h, lr in itertools.product(self.batch_size, self.lam, self.hidden_dim, self.learning_rate):
            yield {"batch_size": bs, "lam": lam, "d_e": h, "d_v": h, "d_w": h, "learning_rate": lr}


def run_grid(data: Dataset, spec: GridSpec, hp: Hyperparams | None = None, toggles: BranchToggles | None = None,
             protocol: EvalProtocol | None = None, index: HistoryIndex | None = None):
    """Exhaustive sweep; the best point maximises validation AUC, then prefers smaller models and rates."""
    hp = hp or Hyperparams()
    protocol = protocol or EvalProtocol()
    index = index or build_index(data.triplets, data.features)
    results = []
    for point in spec.points():
        run, _ = train(data, index, hp.replace(**point), toggles, protocol, evaluate_test=False)
        results.append({"point": point, "valid_auc": run.best_valid_auc, "best_epoch": run.best_epoch,
                        "epochs": len(run.epoch_log)})
    best = min(results, key=lambda r: (-r["valid_auc"], r["point"]["d_e"], r["point"]["learning_rate"]))
    return hp.replace(**best["point"]), results
