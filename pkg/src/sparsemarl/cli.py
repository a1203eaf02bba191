"""Command-line entry point: train / eval / flops / maskstats / specdump.

Exit codes: 0 success, 1 runtime failure, 2 usage or config error. All
train outputs land in a timestamped run directory under --out (or the
SPARSEMARL_OUT environment variable, or ./runs).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from . import accounting
from . import config as cf
from . import networks as nets
from . import sparse_topology as topo
from . import trainer as tr
from .envs import make_env_spec, spec_dump

log = logging.getLogger("sparsemarl")


def _add_config_args(p: argparse.ArgumentParser):
    p.add_argument("--config", help="YAML config file with flat keys")
    p.add_argument("--preset", help="shipped preset name (see --list-presets)")
    p.add_argument("--seed", type=int)
    p.add_argument("--sparsity", type=float)
    p.add_argument("--algo", dest="algorithm", choices=["qmix", "owqmix"])
    p.add_argument("--operator",
                   choices=["max", "softmax", "mellowmax", "soft_mellowmax"])
    p.add_argument("--lambda", dest="td_lambda", type=float)
    p.add_argument("--t0", dest="burn_in_steps", type=int)
    p.add_argument("--set", dest="extra", action="append", default=[],
                   metavar="KEY=VALUE", help="override any documented config key")


def _overrides_from_args(args) -> dict:
    overrides = {}
    for key in ("seed", "sparsity", "algorithm", "operator", "td_lambda",
                "burn_in_steps"):
        value = getattr(args, key, None)
        if value is not None:
            overrides[key] = value
    for item in getattr(args, "extra", []):
        if "=" not in item:
            raise cf.ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, raw = item.split("=", 1)
        overrides[key.strip()] = yaml_scalar(raw.strip())
    return overrides


def yaml_scalar(raw: str):
    import yaml
    return yaml.safe_load(raw)


def _build_config(args) -> tr.TrainConfig:
    return cf.build_config(preset=args.preset, config_file=args.config,
                           overrides=_overrides_from_args(args))


def _out_root(args) -> Path:
    if getattr(args, "out", None):
        return Path(args.out)
    return Path(os.environ.get("SPARSEMARL_OUT", "runs"))


def _run_dir(root: Path, cfg: tr.TrainConfig) -> Path:
    stamp = time.strftime("%Y%m%d-%H%M%S")
    base = f"{cfg.env}-{cfg.algorithm}-seed{cfg.seed}-{stamp}"
    path = root / base
    counter = 1
    while path.exists():
        path = root / f"{base}-{counter}"
        counter += 1
    path.mkdir(parents=True)
    return path


def _flops_report(cfg: tr.TrainConfig, trainer: tr.Trainer | None = None):
    spec = trainer.spec if trainer else make_env_spec(cfg.env)
    kwargs = {}
    if trainer is not None:
        kwargs["agent_slots"] = trainer.unique_agents[0].weight_slots()
        kwargs["mixer_slots"] = trainer.mixer.weight_slots()
        if cfg.algorithm == "owqmix":
            kwargs["u_agent_slots"] = trainer.unique_u_agents[0].weight_slots()
            kwargs["u_mixer_slots"] = trainer.u_mixer.weight_slots()
    return accounting.report(
        cfg.algorithm, cfg.sparsity, cfg.batch_offline + cfg.batch_online,
        spec.n_agents, spec.obs_dim, spec.n_actions, spec.state_dim,
        agent_hidden=cfg.agent_hidden, mixer_embed=cfg.mixer_embed,
        hyper_hidden=cfg.hypernet_hidden,
        unrestricted_embed=cfg.unrestricted_embed,
        share_agent_params=cfg.share_agent_params, **kwargs)


def _write_manifest(run_dir: Path, cfg: tr.TrainConfig, overrides: dict):
    manifest = {
        "config": cf.config_to_dict(cfg),
        "config_hash": cf.config_hash(cfg),
        "seed": cfg.seed,
        "code_version": __version__,
        "overrides": overrides,
    }
    (run_dir / "manifest.json").write_text(json.dumps(manifest, indent=2, sort_keys=True))


def _write_maskstats(out_dir: Path, named_nets: dict, step: int):
    out_dir.mkdir(parents=True, exist_ok=True)
    stats = []
    for net_name, net in named_nets.items():
        for slot in net.weight_slots():
            stats.append(topo.mask_stats(slot, step))
            bitmap = topo.mask_bitmap(slot)
            fname = f"{net_name}.{slot.slot_id}".replace("/", "_") + ".bitmap.txt"
            (out_dir / fname).write_text(bitmap)
    (out_dir / "maskstats.csv").write_text(topo.mask_stats_csv(stats))


def cmd_train(args) -> int:
    overrides = _overrides_from_args(args)
    cfg = cf.build_config(preset=args.preset, config_file=args.config,
                          overrides=overrides)
    if args.seeds:
        return _fan_out_seeds(args, cfg)
    root = _out_root(args)
    run_dir = _run_dir(root, cfg)
    log.info("run directory: %s", run_dir)
    try:
        result, trainer = tr.run(cfg)
    except Exception as exc:  # structured failure record, nonzero exit
        (run_dir / "failure.json").write_text(json.dumps({
            "error": type(exc).__name__, "message": str(exc),
            "config_hash": cf.config_hash(cfg)}, indent=2))
        log.error("run failed: %s", exc)
        return 1
    (run_dir / "config.yaml").write_text(cf.config_yaml(cfg))
    _write_manifest(run_dir, cfg, overrides)
    (run_dir / "metrics.csv").write_text(tr.metrics_csv(result))
    (run_dir / "evolution.csv").write_text(tr.evolution_csv(result))
    report = _flops_report(cfg, trainer)
    (run_dir / "flops.csv").write_text(report.to_csv())
    (run_dir / "flops.txt").write_text(report.to_text())
    meta = {"config": cf.config_to_dict(cfg), "config_hash": cf.config_hash(cfg),
            "step": result.rows[-1].step if result.rows else 0,
            "code_version": __version__}
    nets.save_checkpoint(run_dir / "checkpoint.npz", trainer.named_nets(), meta)
    _write_maskstats(run_dir / "maskstats", trainer.named_nets(),
                     result.rows[-1].step if result.rows else 0)
    log.info("final score (mean return over last 20 evals): %.4f", result.final_score)
    print(run_dir)
    return 0


def _fan_out_seeds(args, cfg) -> int:
    lo, _, hi = args.seeds.partition("..")
    try:
        seeds = range(int(lo), int(hi) + 1)
    except ValueError:
        log.error("--seeds expects A..B, got %r", args.seeds)
        return 2
    argv = [sys.executable, "-m", "sparsemarl"]
    base = sys.argv[1:]
    cleaned = []
    skip = False
    for tok in base:
        if skip:
            skip = False
            continue
        if tok == "--seeds":
            skip = True
            continue
        if tok.startswith("--seeds="):
            continue
        if tok == "--seed":
            skip = True
            continue
        cleaned.append(tok)
    procs = [subprocess.Popen(argv + cleaned + ["--seed", str(s)]) for s in seeds]
    return max(p.wait() for p in procs)


def cmd_eval(args) -> int:
    if args.episodes < 1:
        log.error("--episodes must be >= 1")
        return 2
    path = Path(args.checkpoint)
    if not path.exists():
        log.error("checkpoint not found: %s", path)
        return 2
    arrays, meta = nets.load_checkpoint(path)
    cfg = cf.config_from_dict(meta["config"])
    trainer = tr.Trainer(cfg)
    try:
        nets.restore_state(trainer.named_nets(), arrays)
    except ValueError as exc:
        log.error("checkpoint does not match config: %s", exc)
        return 2
    returns, solves = [], []
    for i in range(args.episodes):
        ep = trainer.rollout_episode(
            trainer.eval_env, 0.0, np.random.default_rng(args.seed + i),
            reset_seed=args.seed + i)
        returns.append(ep.total_reward)
        solves.append(float(ep.total_reward >= trainer.spec.solve_return - 1e-9))
    mean = float(np.mean(returns))
    half = 1.96 * float(np.std(returns)) / np.sqrt(len(returns))
    print(f"episodes {args.episodes}  mean return {mean:.4f} +/- {half:.4f}  "
          f"solve rate {np.mean(solves):.3f}")
    return 0


def cmd_flops(args) -> int:
    cfg = _build_config(args)
    report = _flops_report(cfg)
    print(report.to_text(), end="")
    if args.csv:
        Path(args.csv).write_text(report.to_csv())
    return 0


def cmd_maskstats(args) -> int:
    path = Path(args.checkpoint)
    if not path.exists():
        log.error("checkpoint not found: %s", path)
        return 2
    arrays, meta = nets.load_checkpoint(path)
    cfg = cf.config_from_dict(meta["config"])
    trainer = tr.Trainer(cfg)
    nets.restore_state(trainer.named_nets(), arrays)
    out_dir = Path(args.out) if args.out else path.parent / "maskstats"
    _write_maskstats(out_dir, trainer.named_nets(), meta.get("step", 0))
    print(out_dir)
    return 0


def cmd_specdump(args) -> int:
    cfg = _build_config(args)
    dump = spec_dump(make_env_spec(cfg.env))
    text = json.dumps(dump, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).write_text(text)
        print(args.out)
    else:
        print(text)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="sparsemarl",
        description="Dynamic sparse training for cooperative multi-agent Q-learning")
    parser.add_argument("--version", action="version", version=__version__)
    parser.add_argument("--list-presets", action="store_true",
                        help="list shipped presets and exit")
    parser.add_argument("--help-keys", action="store_true",
                        help="list every config key with default and doc")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="train per a config and write run outputs")
    _add_config_args(p)
    p.add_argument("--out", help="output root (default $SPARSEMARL_OUT or ./runs)")
    p.add_argument("--seeds", help="A..B launches one process per seed")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--episodes", type=int, default=32)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("flops", help="print model-size and FLOPs report")
    _add_config_args(p)
    p.add_argument("--csv", help="also write the per-layer report to this path")
    p.set_defaults(fn=cmd_flops)

    p = sub.add_parser("maskstats", help="export mask statistics of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_maskstats)

    p = sub.add_parser("specdump", help="emit the enumerable environment model")
    _add_config_args(p)
    p.add_argument("--out")
    p.set_defaults(fn=cmd_specdump)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(message)s")
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.list_presets:
        print("\n".join(cf.list_presets()))
        return 0
    if args.help_keys:
        print(cf.describe_keys(), end="")
        return 0
    if not args.command:
        parser.print_help()
        return 2
    try:
        return args.fn(args)
    except cf.ConfigError as exc:
        log.error("%s", exc)
        return 2


if __name__ == "__main__":
    sys.exit(main())
