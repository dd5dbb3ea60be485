"""Command-line entry point: ``mmarena run | report | eval-checkpoints | importance``."""
from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path
from typing import List, Optional

import numpy as np

from .experiments.config import KINDS, ConfigError, ExperimentConfig, load_config
from .experiments.evaluation import collect_probe_states, evaluate_checkpoints, permutation_importance
from .experiments.report import build_report
from .experiments.runner import run_experiment, scheduled_checkpoints
from .neural import CheckpointError, load_checkpoint


def _schedule(text: str) -> List[int]:
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"bad schedule {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mmarena", description="Market-making agents in a simulated order-book market.")
    sub = p.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run an experiment and write results to --out")
    run.add_argument("--config", help="JSON config file; flags below override it")
    run.add_argument("--experiment", choices=KINDS)
    run.add_argument("--seed", type=int)
    run.add_argument("--sims", type=int)
    run.add_argument("--steps", type=int)
    run.add_argument("--rounds", type=int)
    run.add_argument("--transfer-checkpoints", nargs=2, metavar=("SINGLE", "MULTI"))
    run.add_argument("--no-actions", action="store_true", help="skip the per-step actions.csv")
    run.add_argument("--out", required=True)

    rep = sub.add_parser("report", help="summary, rolling and epsilon CSVs for a results directory")
    rep.add_argument("results_dir")
    rep.add_argument("--window", type=int, default=50)
    rep.add_argument("--kilo", action="store_true", help="report summary values divided by 1000")

    ev = sub.add_parser("eval-checkpoints", help="rank a run's checkpoints by greedy evaluation reward")
    ev.add_argument("results_dir")
    ev.add_argument("--round", type=int, default=0)
    ev.add_argument("--mm-id", help="learner id, needed when the run had several learners")
    ev.add_argument("--schedule", type=_schedule, help="comma separated simulation indices")
    ev.add_argument("--sims", type=int, default=5)
    ev.add_argument("--steps", type=int)
    ev.add_argument("--rounds", type=int, default=1)
    ev.add_argument("--seed", type=int, default=12345)
    ev.add_argument("--out", help="ranking CSV (default: <results_dir>/checkpoint_ranking.csv)")

    imp = sub.add_parser("importance", help="permutation feature importance of a checkpoint")
    imp.add_argument("checkpoint")
    imp.add_argument("--probes", type=int, default=1000)
    imp.add_argument("--steps", type=int, default=500)
    imp.add_argument("--seed", type=int, default=0)
    imp.add_argument("--out", help="CSV output (default: stdout only)")
    return p


def _cmd_run(a: argparse.Namespace) -> int:
    cfg = load_config(a.config) if a.config else ExperimentConfig()
    overrides = {"kind": a.experiment, "seed": a.seed, "simulations": a.sims, "steps": a.steps, "rounds": a.rounds}
    for key, val in overrides.items():
        if val is not None:
            setattr(cfg, key, val)
    if a.transfer_checkpoints:
        cfg.transfer_checkpoints = list(a.transfer_checkpoints)
    if a.no_actions:
        cfg.record_actions = False
    cfg.output_dir = a.out
    ds = run_experiment(cfg)
    print(f"wrote {len(ds.rewards)} result rows to {a.out}")
    return 0


def _cmd_report(a: argparse.Namespace) -> int:
    rows = build_report(a.results_dir, window=a.window, kilo=a.kilo)
    scale = 1e3 if a.kilo else 1.0
    print(f"{'mm_id':<14}{'mean':>14}{'top':>14}{'bottom':>14}{'std':>14}")
    for r in rows:
        s = r.scaled(scale)
        flag = "  (n=1, std undefined)" if r.degenerate else ""
        print(f"{s.mm_id:<14}{s.mean:>14.2f}{s.top:>14.2f}{s.bottom:>14.2f}{s.std:>14.2f}{flag}")
    return 0


def _cmd_eval(a: argparse.Namespace) -> int:
    d = Path(a.results_dir)
    meta_path = d / "meta.json"
    if not meta_path.exists():
        raise ConfigError(f"{meta_path} not found; is this a results directory?")
    with open(meta_path) as fh:
        train_cfg = ExperimentConfig.from_dict(json.load(fh)["config"])
    schedule = a.schedule or scheduled_checkpoints(train_cfg)
    eval_cfg = ExperimentConfig(kind="single", simulations=a.sims, rounds=a.rounds,
                                steps=a.steps or train_cfg.steps, seed=a.seed, market=train_cfg.market,
                                agent=train_cfg.agent, n_investors=train_cfg.n_investors,
                                investor_size=train_cfg.investor_size)
    eval_cfg.validate()
    ranking = evaluate_checkpoints(schedule, eval_cfg, d / "checkpoints", a.round, a.mm_id)
    out = Path(a.out) if a.out else d / "checkpoint_ranking.csv"
    with open(out, "w", newline="\n") as fh:
        fh.write("rank,simulation,mean_reward\n")
        for i, s in enumerate(ranking):
            fh.write(f"{i + 1},{s.simulation},{s.mean_reward!r}\n")
    for i, s in enumerate(ranking):
        print(f"{i + 1:>3}  sim {s.simulation:>5}  {s.mean_reward:>16.2f}")
    print(f"best checkpoint: simulation {ranking[0].simulation}")
    return 0


def _cmd_importance(a: argparse.Namespace) -> int:
    ck = load_checkpoint(a.checkpoint)
    cfg = ExperimentConfig(steps=a.steps, simulations=1, rounds=1, seed=a.seed)
    probes = collect_probe_states(ck, cfg, a.probes)
    ranked = permutation_importance(ck, probes, np.random.default_rng(a.seed))
    lines = ["feature,importance"] + [f"{name},{v!r}" for name, v in ranked]
    if a.out:
        Path(a.out).write_text("\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


_COMMANDS = {"run": _cmd_run, "report": _cmd_report, "eval-checkpoints": _cmd_eval, "importance": _cmd_importance}


def main(argv: Optional[List[str]] = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return _COMMANDS[args.command](args)
    except (ConfigError, CheckpointError, OSError, ValueError, KeyError) as exc:
        print(f"mmarena {args.command}: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
