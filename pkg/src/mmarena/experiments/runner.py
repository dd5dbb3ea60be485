"""Experiment harness: rounds of simulations with agents carried across simulations."""
from __future__ import annotations

import json
import os
import shutil
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..actions import HEDGE_GRID, SPREAD_GRID, spread_positions
from ..dqn_mm import DQLMarketMaker, PersistentMM, RandomMM
from ..mm_env import MMEnv
from ..neural import load_checkpoint, save_checkpoint
from .config import ConfigError, ExperimentConfig

RESULTS_HEADER = "round,simulation,mm_id,total_reward"
ACTIONS_HEADER = "round,simulation,step,mm_id,eps_buy,eps_sell,eps_hedge"

# stream tags inside a round's seed tree
_MARKET, _FLOW, _AGENT = 0, 1, 2


def stream(seed: int, *key: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy=seed, spawn_key=key)))


def _agent_key(mm_id: str) -> int:
    return zlib.crc32(mm_id.encode())


def _fmt_eps(v: float) -> str:
    return repr(float(v))


_EPS_TEXT = (
    [_fmt_eps(v) for v in SPREAD_GRID],
    [_fmt_eps(v) for v in HEDGE_GRID],
)


@dataclass
class SimResult:
    totals: Dict[str, int]
    step_rewards: Dict[str, List[int]]
    eps_mean: Dict[str, Tuple[float, float, float]]
    actions: Optional[List[Tuple[int, str, int]]] = None  # (step, mm_id, action index)
    env: Optional[MMEnv] = None


def run_simulation(agents: Dict[str, object], cfg: ExperimentConfig, round_idx: int, sim_idx: int,
                   seed: Optional[int] = None, record_actions: bool = False, audit: bool = False,
                   keep_env: bool = False) -> SimResult:
    """Run one fresh market session for the given agents (registration order = dict order)."""
    seed = cfg.seed if seed is None else seed
    mm_ids = list(agents)
    env = MMEnv(mm_ids, cfg.market, stream(seed, round_idx, _MARKET, sim_idx), stream(seed, round_idx, _FLOW, sim_idx),
                n_investors=cfg.n_investors, investor_size=cfg.investor_size, audit=audit)
    obs = env.reset()
    for a in agents.values():
        a.begin_simulation()
    prev_reward = {m: 0 for m in mm_ids}
    totals = {m: 0 for m in mm_ids}
    step_rewards: Dict[str, List[int]] = {m: [] for m in mm_ids}
    pos_sum = {m: np.zeros(3, dtype=np.int64) for m in mm_ids}
    actions: Optional[list] = [] if record_actions else None
    for step in range(1, cfg.steps + 1):
        chosen = {m: agents[m].step(obs[m], prev_reward[m]) for m in mm_ids}
        out = env.step(chosen)
        for m in mm_ids:
            state, rb = out[m]
            total = rb.total
            obs[m] = state
            prev_reward[m] = total
            totals[m] += total
            step_rewards[m].append(total)
            pos_sum[m] += spread_positions(chosen[m])
            if actions is not None:
                actions.append((step, m, chosen[m]))
    for m in mm_ids:
        agents[m].finish(obs[m], prev_reward[m])
    n = cfg.steps
    eps_mean = {}
    for m in mm_ids:
        b, s, h = pos_sum[m] / n
        eps_mean[m] = (b / 5.0 - 1.0, s / 5.0 - 1.0, h / 4.0)
    return SimResult(totals, step_rewards, eps_mean, actions, env if keep_env else None)


def build_agents(cfg: ExperimentConfig, round_idx: int, seed: Optional[int] = None) -> Dict[str, object]:
    seed = cfg.seed if seed is None else seed
    agents: Dict[str, object] = {}
    frozen_paths = list(cfg.transfer_checkpoints)
    for mm_id, role in cfg.roster:
        rng = stream(seed, round_idx, _AGENT, _agent_key(mm_id))
        if role == "dql":
            agents[mm_id] = DQLMarketMaker(mm_id, cfg.agent, rng)
        elif role == "frozen":
            ck = load_checkpoint(frozen_paths.pop(0))
            agents[mm_id] = DQLMarketMaker.from_checkpoint(mm_id, ck, cfg.agent, rng, train=False, greedy=True)
        elif role == "random":
            agents[mm_id] = RandomMM(mm_id, rng)
        elif role == "persistent":
            agents[mm_id] = PersistentMM(mm_id, rng)
        else:  # pragma: no cover - roster_for guards this
            raise ConfigError(f"unknown role {role}")
    return agents


def checkpoint_name(round_idx: int, sim_idx: int, mm_id: Optional[str] = None) -> str:
    suffix = f"_{mm_id}" if mm_id else ""
    return f"ckpt_round{round_idx}_sim{sim_idx}{suffix}.json"


def scheduled_checkpoints(cfg: ExperimentConfig) -> List[int]:
    """Schedule entries reachable in this run, plus the final state (kept so a
    round's learner can seed a transfer run)."""
    return sorted(set(k for k in cfg.checkpoint_schedule if k <= cfg.simulations) | {cfg.simulations})


@dataclass
class RoundResult:
    round_idx: int
    rewards: List[Tuple[int, int, str, int]]
    eps_mean: List[Tuple[int, int, str, float, float, float]]
    train_calls: Dict[str, List[int]]
    agents: Dict[str, object] = field(repr=False, default_factory=dict)


def run_round(cfg: ExperimentConfig, round_idx: int, out_dir: Optional[str] = None,
              keep_agents: bool = False) -> RoundResult:
    agents = build_agents(cfg, round_idx)
    learners = [m for m, a in agents.items() if isinstance(a, DQLMarketMaker) and a.train]
    schedule = scheduled_checkpoints(cfg)
    ck_dir = Path(out_dir, "checkpoints") if out_dir else None
    act_fh = None
    if out_dir is not None:
        ck_dir.mkdir(parents=True, exist_ok=True)
        if cfg.record_actions:
            part = Path(out_dir, f"round_{round_idx}")
            part.mkdir(parents=True, exist_ok=True)
            act_fh = open(part / "actions.csv", "w", newline="\n")

    def write_checkpoints(k: int) -> None:
        if ck_dir is None or k not in schedule:
            return
        for m in learners:
            name = checkpoint_name(round_idx, k, None if len(learners) == 1 else m)
            save_checkpoint(ck_dir / name, agents[m].checkpoint(round=round_idx, simulation=k, mm_id=m,
                                                               config_hash=cfg.config_hash()))

    rewards, eps_rows = [], []
    write_checkpoints(0)
    try:
        for k in range(cfg.simulations):
            res = run_simulation(agents, cfg, round_idx, k, record_actions=act_fh is not None)
            for m in agents:
                rewards.append((round_idx, k, m, res.totals[m]))
                eps_rows.append((round_idx, k, m) + tuple(res.eps_mean[m]))
            if act_fh is not None:
                sg, hg = _EPS_TEXT
                lines = []
                for step, m, idx in res.actions:
                    b, s, h = spread_positions(idx)
                    lines.append(f"{round_idx},{k},{step},{m},{sg[b]},{sg[s]},{hg[h]}\n")
                act_fh.writelines(lines)
            write_checkpoints(k + 1)
    finally:
        if act_fh is not None:
            act_fh.close()
    calls = {m: list(a.train_calls) for m, a in agents.items() if isinstance(a, DQLMarketMaker)}
    return RoundResult(round_idx, rewards, eps_rows, calls, agents if keep_agents else {})


@dataclass
class ResultsDataset:
    mm_ids: List[str]
    rewards: List[Tuple[int, int, str, int]]
    eps_mean: List[Tuple[int, int, str, float, float, float]] = field(default_factory=list)
    meta: dict = field(default_factory=dict)
    rounds: List[RoundResult] = field(default_factory=list, repr=False)

    def reward_matrix(self, mm_id: str) -> np.ndarray:
        """(rounds, simulations) array of total rewards for one MM."""
        rows = [(r, k, v) for r, k, m, v in self.rewards if m == mm_id]
        if not rows:
            raise KeyError(mm_id)
        n_r = max(r for r, _, _ in rows) + 1
        n_k = max(k for _, k, _ in rows) + 1
        out = np.full((n_r, n_k), np.nan)
        for r, k, v in rows:
            out[r, k] = v
        return out


def _threads(rounds: int) -> int:
    raw = os.environ.get("MM_ARENA_THREADS")
    if not raw:
        return rounds
    try:
        return max(1, min(rounds, int(raw)))
    except ValueError as exc:
        raise ConfigError(f"MM_ARENA_THREADS must be an integer, got {raw!r}") from exc


def _check_output_dir(out_dir: str) -> None:
    path = Path(out_dir)
    try:
        path.mkdir(parents=True, exist_ok=True)
        probe = path / ".write_probe"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        raise ConfigError(f"output directory {out_dir} is not writable: {exc}") from exc


def run_experiment(cfg: ExperimentConfig, keep_agents: bool = False) -> ResultsDataset:
    """Run every round; write results.csv, actions.csv, meta.json and checkpoints/ when
    ``cfg.output_dir`` is set. All validation happens before the first simulation."""
    cfg.validate()
    for path in cfg.transfer_checkpoints if cfg.kind == "transfer" else ():
        load_checkpoint(path)
    out_dir = cfg.output_dir
    if out_dir is not None:
        _check_output_dir(out_dir)

    workers = _threads(cfg.rounds)
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            futures = [pool.submit(run_round, cfg, r, out_dir, keep_agents) for r in range(cfg.rounds)]
            rounds = [f.result() for f in futures]
    else:
        rounds = [run_round(cfg, r, out_dir, keep_agents) for r in range(cfg.rounds)]

    ds = ResultsDataset(
        mm_ids=[m for m, _ in cfg.roster],
        rewards=[row for rr in rounds for row in rr.rewards],
        eps_mean=[row for rr in rounds for row in rr.eps_mean],
        meta={"config_hash": cfg.config_hash(), "seed": cfg.seed, "kind": cfg.kind, "config": cfg.to_dict()},
        rounds=rounds,
    )
    if out_dir is not None:
        write_results_csv(Path(out_dir, "results.csv"), ds.rewards)
        write_eps_csv(Path(out_dir, "sim_eps.csv"), ds.eps_mean)
        if cfg.record_actions:
            _merge_actions(out_dir, cfg.rounds)
        with open(Path(out_dir, "meta.json"), "w", newline="\n") as fh:
            json.dump(ds.meta, fh, sort_keys=True, indent=1)
            fh.write("\n")
    return ds


def write_results_csv(path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(RESULTS_HEADER + "\n")
        for r, k, m, v in rows:
            fh.write(f"{r},{k},{m},{v}\n")


EPS_HEADER = "round,simulation,mm_id,eps_buy,eps_sell,eps_hedge"


def write_eps_csv(path, rows) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(EPS_HEADER + "\n")
        for r, k, m, b, s, h in rows:
            fh.write(f"{r},{k},{m},{float(b)!r},{float(s)!r},{float(h)!r}\n")


def _merge_actions(out_dir: str, rounds: int) -> None:
    target = Path(out_dir, "actions.csv")
    with open(target, "w", newline="\n") as out:
        out.write(ACTIONS_HEADER + "\n")
        for r in range(rounds):
            part = Path(out_dir, f"round_{r}")
            with open(part / "actions.csv") as fh:
                shutil.copyfileobj(fh, out)
            shutil.rmtree(part)


def read_results_csv(path) -> List[Tuple[int, int, str, int]]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != RESULTS_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            r, k, m, v = line.rstrip("\n").split(",")
            rows.append((int(r), int(k), m, int(v)))
    return rows


def read_eps_csv(path) -> List[Tuple[int, int, str, float, float, float]]:
    rows = []
    with open(path) as fh:
        header = fh.readline().strip()
        if header != EPS_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            r, k, m, b, s, h = line.rstrip("\n").split(",")
            rows.append((int(r), int(k), m, float(b), float(s), float(h)))
    return rows
