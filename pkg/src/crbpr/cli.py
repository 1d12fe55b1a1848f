"""Command-line entry point: ``crbpr {synth,train,eval,rank,ablate,grid}``.

Configs are flat JSON objects with dotted keys such as ``"model.mu"`` or
``"synth.n_users"``.  Command-line flags override the file.  Every run writes
the fully resolved config to ``<out>/config.json``.
"""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import os
import sys
from pathlib import Path

from threadpoolctl import threadpool_limits

from . import gradcore as gc
from .data import DataError, Dataset, SynthConfig, generate_synthetic, load_dataset, save_dataset, split_triplets
from .evaluate import EvalProtocol, emit_report, evaluate, rank_case, write_case
from .history import build_index
from .model import BranchToggles, ConfigError, Hyperparams, load_checkpoint
from .trainer import ABLATIONS, GridSpec, ablation_reports, run_ablation, run_grid, train

log = logging.getLogger("crbpr")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 1, 2
DATA_ENV = "CRBPR_DATA_DIR"


class UsageError(Exception):
    pass


def _fields(cls, skip=()):
    return {f.name: f.default if f.default is not dataclasses.MISSING else f.default_factory()
            for f in dataclasses.fields(cls) if f.name not in skip}


def default_config():
    """Every accepted key with its default value."""
    cfg = {"seed": None}
    cfg.update({"data.dir": None, "data.min_interactions": 1, "data.split": [0.8, 0.1, 0.1],
                "data.format": "tsv"})
    cfg.update({f"synth.{k}": v for k, v in _fields(SynthConfig, {"seed"}).items()})
    cfg.update({f"model.{k}": v for k, v in _fields(Hyperparams, {"seed"}).items()})
    cfg.update({f"toggles.{k}": v for k, v in _fields(BranchToggles).items()})
    cfg.update({f"eval.{k}": v for k, v in _fields(EvalProtocol).items()})
    cfg.update({"train.strict_negatives": False, "train.model_name": "CR-BPR"})
    cfg.update({"ablate.variants": list(ABLATIONS), "ablate.seeds": [0, 1, 2, 3, 4]})
    cfg.update({f"grid.{k}": v for k, v in _fields(GridSpec).items()})
    return cfg


def _coerce(key, value, default):
    """Parse ``--set`` strings as JSON where possible, keeping plain strings otherwise."""
    if isinstance(value, str) and not isinstance(default, str):
        try:
            return json.loads(value)
        except json.JSONDecodeError:
            return value
    return value


def resolve_config(path=None, overrides=(), seed=None):
    cfg = default_config()
    user = {}
    if path:
        with open(path, encoding="utf-8") as fh:
            user = json.load(fh)
        if not isinstance(user, dict):
            raise ConfigError("config must be a JSON object")
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        user[key] = _coerce(key, value, cfg.get(key))
    unknown = sorted(set(user) - set(cfg))
    if unknown:
        raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
    cfg.update(user)
    if seed is not None:
        cfg["seed"] = seed
    if cfg["seed"] is None:
        raise ConfigError("no seed given: pass --seed or set \"seed\" in the config")
    if not isinstance(cfg["seed"], int) or isinstance(cfg["seed"], bool):
        raise ConfigError("seed must be an integer")
    return cfg


def _section(cfg, prefix):
    n = len(prefix) + 1
    return {k[n:]: v for k, v in cfg.items() if k.startswith(prefix + ".")}


def build_objects(cfg):
    """(Hyperparams, BranchToggles, EvalProtocol) from a resolved config."""
    try:
        hp = Hyperparams(seed=cfg["seed"], **_section(cfg, "model"))
        toggles = BranchToggles(**_section(cfg, "toggles"))
        protocol = EvalProtocol(**_section(cfg, "eval"))
    except TypeError as exc:
        raise ConfigError(str(exc)) from exc
    return hp, toggles, protocol


def _data_dir(args, cfg):
    d = args.data or cfg["data.dir"] or os.environ.get(DATA_ENV)
    if not d:
        raise ConfigError(f"no data directory: pass --data, set data.dir or {DATA_ENV}")
    cfg["data.dir"] = str(d)
    return Path(d)


def _load(args, cfg):
    catalog, features, triplets = load_dataset(_data_dir(args, cfg), cfg["data.min_interactions"])
    counts = triplets.counts()
    if counts["valid"] == 0 and counts["test"] == 0:
        triplets = split_triplets(triplets, tuple(cfg["data.split"]), seed=cfg["seed"])
    return Dataset(catalog, features, triplets)


def _write_json(path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=str)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------


def cmd_synth(args, cfg, out):
    syn = generate_synthetic(SynthConfig(seed=cfg["seed"], **_section(cfg, "synth")))
    triplets = split_triplets(syn.triplets, tuple(cfg["data.split"]), seed=cfg["seed"])
    save_dataset(out, syn.catalog, syn.features, triplets, fmt=cfg["data.format"])
    log.info("wrote %d triplets to %s", len(triplets), out)


def cmd_train(args, cfg, out):
    hp, toggles, protocol = build_objects(cfg)
    data = _load(args, cfg)
    index = build_index(data.triplets, data.features)
    run, _ = train(data, index, hp, toggles, protocol, out_dir=out,
                   strict_negatives=cfg["train.strict_negatives"], model_name=cfg["train.model_name"])
    summary = {"best_epoch": run.best_epoch, "best_valid_auc": run.best_valid_auc,
               "epochs": len(run.epoch_log), "stopped_early": run.stopped_early}
    _write_json(out / "summary.json", summary)
    if run.test_report:
        emit_report(run.test_report, out / "report.json", "json")
        emit_report(run.test_report, out / "report.tsv", "tsv")
        log.info("test %s", run.test_report.metrics)


def _checkpoint_model(args, cfg):
    if not args.checkpoint:
        raise ConfigError("--checkpoint is required")
    data = _load(args, cfg)
    index = build_index(data.triplets, data.features)
    model = load_checkpoint(args.checkpoint, data.catalog, data.features, index)
    return data, model


def cmd_eval(args, cfg, out):
    _, _, protocol = build_objects(cfg)
    data, model = _checkpoint_model(args, cfg)
    triplets = data.triplets.subset(args.setting)
    if len(triplets) == 0:
        raise DataError(f"no {args.setting} triplets to evaluate")
    report = evaluate(model, triplets, protocol, cfg["train.model_name"], args.setting, cfg)
    emit_report(report, out / "report.json", "json")
    emit_report(report, out / "report.tsv", "tsv")
    log.info("%s %s", args.setting, report.metrics)


def cmd_rank(args, cfg, out):
    _, _, protocol = build_objects(cfg)
    data, model = _checkpoint_model(args, cfg)
    cat = data.catalog
    try:
        u = cat.user_index[args.user]
        g = cat.given_index[args.given]
        cands = [cat.matcher_index[c] for c in args.candidates.split(",") if c]
    except KeyError as exc:
        raise DataError(f"unknown product or user id {exc.args[0]!r}") from None
    rows = rank_case(model, u, g, cands, protocol.norm_mode)
    write_case(rows, out / "ranked.tsv")


def cmd_ablate(args, cfg, out):
    hp, _, protocol = build_objects(cfg)
    data = _load(args, cfg)
    table = run_ablation(data, hp, cfg["ablate.variants"], cfg["ablate.seeds"], protocol)
    _write_json(out / "ablation.json", table)
    emit_report(ablation_reports(table), out / "report.tsv", "tsv")


def cmd_grid(args, cfg, out):
    hp, toggles, protocol = build_objects(cfg)
    data = _load(args, cfg)
    spec = GridSpec(**_section(cfg, "grid"))
    best, results = run_grid(data, spec, hp, toggles, protocol)
    _write_json(out / "grid.json", {"best": dataclasses.asdict(best), "results": results})


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "rank": cmd_rank,
            "ablate": cmd_ablate, "grid": cmd_grid}


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


def build_parser():
    parser = _Parser(prog="crbpr", description="Consistency-regularized BPR for complementary clothing matching.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", help="JSON file with dotted keys")
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int)
        p.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (value parsed as JSON when possible)")
        p.add_argument("--threads", type=int, default=1)
        p.add_argument("-v", "--verbose", action="store_true")
        if name != "synth":
            p.add_argument("--data", help=f"dataset directory (default: ${DATA_ENV})")
        if name in ("eval", "rank"):
            p.add_argument("--checkpoint")
        if name == "eval":
            p.add_argument("--setting", choices=("train", "valid", "test"), default="test")
        if name == "rank":
            p.add_argument("--user", required=True)
            p.add_argument("--given", required=True)
            p.add_argument("--candidates", required=True, help="comma-separated matcher ids")
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"crbpr: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1")
        cfg = resolve_config(args.config, args.set, args.seed)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with threadpool_limits(limits=args.threads):
            COMMANDS[args.command](args, cfg, out)
        _write_json(out / "config.json", cfg)
    except (ConfigError, DataError, json.JSONDecodeError) as exc:
        print(f"crbpr: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (gc.NumericError, OSError, RuntimeError) as exc:
        print(f"crbpr: runtime error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except ValueError as exc:
        print(f"crbpr: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
