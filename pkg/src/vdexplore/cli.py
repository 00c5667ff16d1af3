"""Command line: train, eval, bench, replay-inspect, print-defaults.

Exit codes: 0 success, 1 configuration error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as config_mod
from .errors import CheckpointError, ConfigError
from .replay import ReplayBuffer, read_dump, visit_summary

log = logging.getLogger("vdexplore")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="vdexplore", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="cmd", required=True)

    t = sub.add_parser("train", help="train one run per configured seed")
    t.add_argument("config", nargs="?", help="YAML run config")
    t.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    t.add_argument("--seed", type=int, action="append", help="override the seed list (repeatable)")
    t.add_argument("--out", help="output directory (default: $%s/<env>)" % config_mod.OUTPUT_ROOT_ENV)
    t.add_argument("--no-intrinsic", action="store_true", help="force beta to 0")
    t.add_argument("--uniform-replay", action="store_true", help="uniform sampling with unit weights")
    t.add_argument("--no-distributed", action="store_true", help="single-threaded 1x1 loop")

    e = sub.add_parser("eval", help="greedy evaluation of a checkpoint")
    e.add_argument("checkpoint")
    e.add_argument("--env", help="environment name (default: the one stored in the checkpoint)")
    e.add_argument("--episodes", type=int, default=32)
    e.add_argument("--seed", type=int, default=0)

    b = sub.add_parser("bench", help="rollout / training throughput per worker x actor fan-out")
    b.add_argument("config", nargs="?")
    b.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE")
    b.add_argument("--grid", default="1x1,3x4", help="comma-separated WORKERSxACTORS pairs")
    b.add_argument("--duration", type=float, default=5.0, help="seconds per grid point")
    b.add_argument("--train", action="store_true", help="also train while collecting")

    r = sub.add_parser("replay-inspect", help="visit statistics of a run's replay dump")
    r.add_argument("run_dir")
    r.add_argument("--csv", action="store_true", help="also print the per-slot CSV")

    sub.add_parser("print-defaults", help="print the default configuration")
    return p


def _load_config(path, overrides, extra=()) -> config_mod.RunConfig:
    return config_mod.load(path, list(overrides) + list(extra))


def cmd_train(args) -> int:
    from .trainer import train_run

    extra = []
    if args.no_intrinsic:
        extra.append("schedule.intrinsic=false")
    if args.uniform_replay:
        extra.append("replay.uniform=true")
    if args.no_distributed:
        extra += ["runtime.distributed=false", "runtime.workers=1", "runtime.actors=1"]
    if args.seed:
        extra.append("seeds=" + json.dumps(args.seed))
    if args.out:
        extra.append("output_dir=" + json.dumps(args.out))
    cfg = _load_config(args.config, args.overrides, extra)
    root = cfg.resolved_output_dir()
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.resolved.yaml").write_text(cfg.to_yaml())
    summary = []
    for seed in cfg.seeds:
        res = train_run(cfg, seed, root / f"seed{seed}")
        last = res.reports[-1] if res.reports else None
        summary.append({"seed": seed, "out_dir": str(res.out_dir), "train_steps": res.train_steps,
                        "env_steps": res.env_steps, "episodes": res.episodes,
                        "final_win_rate": None if last is None else last.win_rate,
                        "first_win_step": res.first_win_step, "checkpoint": str(res.final_checkpoint)})
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .trainer import evaluate, load_learner

    if args.episodes < 1:
        raise ConfigError("--episodes must be >= 1")
    learner, env, _ = load_learner(args.checkpoint, env_name=args.env)
    report = evaluate(learner.snapshot(0), env, learner.net, args.episodes, args.seed, step=learner.train_steps)
    print(report.to_json())
    return EXIT_OK


def _grid(text: str) -> list[tuple[int, int]]:
    out = []
    for item in text.split(","):
        try:
            w, a = item.lower().split("x")
            pair = (int(w), int(a))
        except ValueError as exc:
            raise ConfigError(f"--grid entry {item!r}: expected WORKERSxACTORS") from exc
        if min(pair) < 1:
            raise ConfigError(f"--grid entry {item!r}: counts must be >= 1")
        out.append(pair)
    return out


def cmd_bench(args) -> int:
    from .envs import make_env
    from .runtime import throughput_bench
    from .trainer import build

    cfg = _load_config(args.config, args.overrides)
    grid = _grid(args.grid)
    rows = []
    for w, a in grid:
        _, learner, _, _ = build(cfg, cfg.seeds[0])
        replay = ReplayBuffer(cfg.replay.capacity, cfg.replay.alpha, cfg.replay.c, cfg.replay.p_min,
                              uniform=cfg.replay.uniform, leaf=cfg.replay.leaf, rng=np.random.default_rng(0))
        rows.append(throughput_bench(lambda: make_env(cfg.env.name, **cfg.env.params), learner, w, a,
                                     args.duration, train=args.train, seed=cfg.seeds[0], replay=replay,
                                     batch_size=cfg.runtime.batch_size))
    base = rows[0]["episodes_per_sec"]
    for row in rows:
        row["speedup"] = row["episodes_per_sec"] / base if base > 0 else None
    print(json.dumps(rows, indent=2))
    return EXIT_OK


def cmd_replay_inspect(args) -> int:
    run = Path(args.run_dir)
    dump, meta_path = run / "replay.csv", run / "replay_meta.json"
    if not dump.exists() or not meta_path.exists():
        log.error("no replay dump in %s", run)
        return EXIT_RUNTIME
    meta = json.loads(meta_path.read_text())
    rows = read_dump(dump)
    summary = visit_summary(rows, meta["now"], meta["batch_size"])
    summary["uniform"] = meta["uniform"]
    summary["scatter"] = [{"N": r["N"], "factor": r["factor"]} for r in rows]
    if args.csv:
        sys.stdout.write(dump.read_text())
    print(json.dumps(summary, indent=2))
    return EXIT_OK


def main(argv: list[str] | None = None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    try:
        if args.cmd == "train":
            return cmd_train(args)
        if args.cmd == "eval":
            return cmd_eval(args)
        if args.cmd == "bench":
            return cmd_bench(args)
        if args.cmd == "replay-inspect":
            return cmd_replay_inspect(args)
        print(config_mod.defaults_yaml(), end="")
        return EXIT_OK
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    except Exception as exc:  # runtime failure of any other kind
        log.exception("run failed")
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
