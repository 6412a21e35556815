"""Command line entry points: gen-data, train, simulate, eval.

Configuration merges three layers: built-in defaults, then a key=value
config file, then explicit flags. Every artifact embeds the merged config
and its hash. SYMPHONY_SEED is the seed fallback when neither a flag nor a
config entry provides one.
"""

from __future__ import annotations

import argparse
import json
import os
import sys

from . import metrics
from .agents import EncoderConfig
from .beam import BeamConfig, rollout_segments, write_trace
from .scenario import (WORLD_KINDS, generate_dataset, load_dataset, save_dataset,
                       select_interactive)
from .training import TrainConfig, Trainer, config_hash, select_checkpoint

SEED_ENV = "SYMPHONY_SEED"


def read_config_file(path: str) -> dict:
    """key=value lines; blank lines and # comments ignored."""
    if not os.path.exists(path):
        raise ValueError(f"config file not found: {path}")
    out = {}
    with open(path) as fh:
        for n, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise ValueError(f"malformed-line: {n}")
            key, val = line.split("=", 1)
            out[key.strip()] = val.strip()
    return out


def merge_config(args: argparse.Namespace, defaults: dict) -> dict:
    """defaults < config file < explicit flags; unknown file keys rejected."""
    merged = dict(defaults)
    if getattr(args, "config", None):
        for key, raw in read_config_file(args.config).items():
            if key not in defaults:
                raise ValueError(f"unknown config key: {key}")
            merged[key] = _coerce(raw, defaults[key])
    for key in defaults:
        flag = getattr(args, key.replace("-", "_"), None)
        if flag is not None:
            merged[key] = flag
    if "seed" in defaults and getattr(args, "seed", None) is None \
            and "seed" not in _file_keys(args) and os.environ.get(SEED_ENV):
        merged["seed"] = int(os.environ[SEED_ENV])
    return merged


def _file_keys(args) -> set:
    if getattr(args, "config", None):
        return set(read_config_file(args.config))
    return set()


def _coerce(raw: str, default):
    if isinstance(default, bool):
        if raw.lower() in ("1", "true", "on", "yes"):
            return True
        if raw.lower() in ("0", "false", "off", "no"):
            return False
        raise ValueError(f"unknown config key value: {raw}")
    if isinstance(default, int):
        return int(raw)
    if isinstance(default, float):
        return float(raw)
    if isinstance(default, tuple):
        return tuple(float(x) for x in raw.split(","))
    return raw


def _require(path: str, what: str):
    if not os.path.exists(path):
        raise ValueError(f"{what} not found: {path}")


# ------------------------------------------------------------- commands

GEN_DEFAULTS = {"world": "fork", "num-segments": 200, "test-segments": 60,
                "agents": 3, "duration-s": 10.0, "step-dt": 0.2,
                "route-weights": "", "seed": 0, "out": "dataset.json"}


def cmd_gen_data(args) -> int:
    cfg = merge_config(args, GEN_DEFAULTS)
    T = int(round(cfg["duration-s"] / cfg["step-dt"]))
    weights = None
    if cfg["route-weights"]:
        weights = tuple(float(x) for x in str(cfg["route-weights"]).split(","))
    ds = generate_dataset(cfg["world"], cfg["num-segments"], cfg["test-segments"],
                          cfg["agents"], T, cfg["seed"], route_weights=weights,
                          step_dt=cfg["step-dt"])
    # the destination is not a generation parameter, so keep it out of the hash
    ds.meta["config"] = {k: cfg[k] for k in sorted(cfg) if k != "out"}
    ds.meta["config_hash"] = config_hash(ds.meta["config"])
    save_dataset(ds, cfg["out"])
    print(f"wrote {len(ds.train)} train + {len(ds.test)} test segments to {cfg['out']}")
    return 0


TRAIN_DEFAULTS = {"variant": "bc", "hierarchy": "on", "data": "dataset.json",
                  "steps": 5000, "batch": 8, "seed": 0, "out-dir": "run",
                  "checkpoint-every": 2000, "lr": 3e-4, "interactive": 2,
                  "expert-pairs": 256, "distill-pairs": 256, "disc-pairs": 256,
                  "val-segments": 32, "branches": 4, "prune-every": 10,
                  "max-points": 32, "select-rollouts": 16, "workers": 0}


def cmd_train(args) -> int:
    cfg = merge_config(args, TRAIN_DEFAULTS)
    _require(cfg["data"], "dataset")
    ds = load_dataset(cfg["data"])
    enc = EncoderConfig(max_points=cfg["max-points"])
    tc = TrainConfig(variant=cfg["variant"], hierarchy=cfg["hierarchy"] == "on",
                     steps=cfg["steps"], batch=cfg["batch"], seed=cfg["seed"],
                     checkpoint_every=cfg["checkpoint-every"], lr=cfg["lr"],
                     n_interactive=cfg["interactive"],
                     expert_pairs=cfg["expert-pairs"],
                     distill_pairs=cfg["distill-pairs"],
                     disc_pairs=cfg["disc-pairs"], val_segments=cfg["val-segments"],
                     beam_branches=cfg["branches"], prune_every=cfg["prune-every"],
                     encoder=enc)
    trainer = Trainer(tc, ds, cfg["out-dir"])
    result = trainer.run()
    workers = cfg["workers"] or (os.cpu_count() or 1)
    best, table = select_checkpoint([p for _, p in result.checkpoints],
                                    trainer.val_segs, m=cfg["select-rollouts"],
                                    workers=workers)
    summary = {"config": result.config, "checkpoints": result.checkpoints,
               "selected": best, "selection_table": table,
               "final_losses": result.history[-1]}
    with open(os.path.join(cfg["out-dir"], "train_summary.json"), "w") as fh:
        json.dump(summary, fh, sort_keys=True, indent=1)
    print(f"trained {tc.variant} for {tc.steps} steps; selected {best}")
    return 0


SIM_DEFAULTS = {"ckpt": "ckpt_final", "data": "dataset.json", "segment": 0,
                "split": "test", "branches": 16, "seed": 0, "out": "trace.jsonl"}


def cmd_simulate(args) -> int:
    cfg = merge_config(args, SIM_DEFAULTS)
    _require(cfg["ckpt"], "checkpoint")
    _require(cfg["data"], "dataset")
    ds = load_dataset(cfg["data"])
    segs = ds.test if cfg["split"] == "test" else ds.train
    if not (0 <= cfg["segment"] < len(segs)):
        raise ValueError(f"unknown-segment: index {cfg['segment']}")
    seg = segs[cfg["segment"]]
    gg, policy, disc, enc, ck_cfg = metrics.load_models(cfg["ckpt"])
    interactive = select_interactive(seg, int(ck_cfg.get("n_interactive", 2)))
    goals, _ = metrics.eval_goals(seg, interactive, gg, enc,
                                  bool(ck_cfg.get("hierarchy", True)),
                                  cfg["branches"], shared=True,
                                  seed=cfg["seed"], seg_idx=cfg["segment"])
    bc = BeamConfig(cfg["branches"], int(ck_cfg.get("prune_every", 10)),
                    seg.n_steps - 1, prune=True)
    res = rollout_segments([seg], [interactive], [goals], policy, disc, bc, enc,
                           entropy=cfg["seed"], seg_keys=[cfg["segment"]])
    write_trace(res, cfg["out"])
    print(f"wrote trace for {seg.id} ({cfg['branches']} branches) to {cfg['out']}")
    return 0


EVAL_DEFAULTS = {"ckpt": "ckpt_final", "data": "dataset.json", "rollouts": 16,
                 "beam": "auto", "split": "test", "seed": 0, "workers": 0,
                 "out": "report.json"}


def cmd_eval(args) -> int:
    cfg = merge_config(args, EVAL_DEFAULTS)
    _require(cfg["ckpt"], "checkpoint")
    _require(cfg["data"], "dataset")
    ds = load_dataset(cfg["data"])
    segs = ds.test if cfg["split"] == "test" else ds.train
    beam = None if cfg["beam"] == "auto" else cfg["beam"] == "on"
    workers = cfg["workers"] or (os.cpu_count() or 1)
    report = metrics.evaluate(cfg["ckpt"], segs, m=cfg["rollouts"], beam=beam,
                              seed=cfg["seed"], workers=workers, out=cfg["out"])
    print(f"collision {report.collision_rate:.3f}%  offroad {report.offroad_time:.3f}%  "
          f"ade {report.ade:.3f}  min_sade {report.min_sade:.3f}  "
          f"jsd {report.curvature_jsd:.5f} -> {cfg['out']}")
    return 0


# --------------------------------------------------------------- parser

def _add_flags(sub: argparse.ArgumentParser, defaults: dict, choices: dict):
    sub.add_argument("--config", help="key=value config file")
    for key, default in defaults.items():
        kw = {"dest": key.replace("-", "_"), "default": None}
        if key in choices:
            kw["choices"] = choices[key]
        elif isinstance(default, bool):
            kw["type"] = lambda s: s.lower() in ("1", "true", "on", "yes")
        elif isinstance(default, int):
            kw["type"] = int
        elif isinstance(default, float):
            kw["type"] = float
        sub.add_argument(f"--{key}", **kw)


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="symphony")
    sp = p.add_subparsers(dest="command", required=True)
    _add_flags(sp.add_parser("gen-data"), GEN_DEFAULTS,
               {"world": sorted(WORLD_KINDS)})
    _add_flags(sp.add_parser("train"), TRAIN_DEFAULTS,
               {"variant": ["bc", "bc-ts", "mgail", "mgail-ts"],
                "hierarchy": ["on", "off"]})
    _add_flags(sp.add_parser("simulate"), SIM_DEFAULTS, {"split": ["train", "test"]})
    _add_flags(sp.add_parser("eval"), EVAL_DEFAULTS,
               {"beam": ["on", "off", "auto"], "split": ["train", "test"]})
    return p


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train,
            "simulate": cmd_simulate, "eval": cmd_eval}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:  # one-line diagnostic, nonzero exit
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
