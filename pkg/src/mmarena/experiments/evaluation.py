"""Checkpoint sweep and permutation feature importance."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from ..dqn_mm import DQLMarketMaker, PersistentMM, RandomMM
from ..mm_env import FEATURE_NAMES
from ..neural import Checkpoint, forward, load_checkpoint
from .config import ExperimentConfig
from .runner import _AGENT, _agent_key, checkpoint_name, run_simulation, stream

EVAL_ID = "dql"


class MissingCheckpointError(FileNotFoundError):
    def __init__(self, sim_index: int, path) -> None:
        super().__init__(f"no checkpoint for simulation {sim_index}: {path}")
        self.sim_index = sim_index


def evaluate_checkpoint(ck: Checkpoint, eval_cfg: ExperimentConfig) -> np.ndarray:
    """Greedy, non-learning rewards of ``ck`` against Random-MM and Persistent-MM.

    Returns a (rounds, simulations) array. Market, flow and baseline streams
    depend only on the evaluation seed and slot, never on the checkpoint.
    """
    out = np.zeros((eval_cfg.rounds, eval_cfg.simulations))
    for r in range(eval_cfg.rounds):
        agents = {
            EVAL_ID: DQLMarketMaker.from_checkpoint(EVAL_ID, ck, eval_cfg.agent,
                                                   stream(eval_cfg.seed, r, _AGENT, _agent_key(EVAL_ID)),
                                                   train=False, greedy=True),
            "random": RandomMM("random", stream(eval_cfg.seed, r, _AGENT, _agent_key("random"))),
            "persistent": PersistentMM("persistent", stream(eval_cfg.seed, r, _AGENT, _agent_key("persistent"))),
        }
        for k in range(eval_cfg.simulations):
            out[r, k] = run_simulation(agents, eval_cfg, r, k).totals[EVAL_ID]
    return out


@dataclass(frozen=True)
class CheckpointScore:
    simulation: int
    mean_reward: float
    round_means: Tuple[float, ...]


def evaluate_checkpoints(schedule: Sequence[int], eval_cfg: ExperimentConfig, checkpoint_dir,
                         round_idx: int = 0, mm_id: Optional[str] = None) -> List[CheckpointScore]:
    """Rank the scheduled checkpoints of one training round by mean greedy reward.

    All files are checked before any evaluation runs. Ties keep the earlier
    simulation first.
    """
    paths = {}
    for k in schedule:
        path = Path(checkpoint_dir, checkpoint_name(round_idx, k, mm_id))
        if not path.exists():
            raise MissingCheckpointError(k, path)
        paths[k] = path
    scores = []
    for k in schedule:
        rewards = evaluate_checkpoint(load_checkpoint(paths[k]), eval_cfg)
        scores.append(CheckpointScore(k, float(rewards.mean()), tuple(float(v) for v in rewards.mean(axis=1))))
    return sorted(scores, key=lambda s: (-s.mean_reward, s.simulation))


def permutation_importance(ck: Checkpoint, probe_states, rng: Optional[np.random.Generator] = None,
                           min_probes: int = 100) -> List[Tuple[str, float]]:
    """Fraction of probe states whose greedy action changes when one feature column is shuffled."""
    x = np.asarray(probe_states, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != len(FEATURE_NAMES):
        raise ValueError(f"probe states must be an (n, {len(FEATURE_NAMES)}) array")
    if x.shape[0] < min_probes:
        raise ValueError(f"need at least {min_probes} probe states, got {x.shape[0]}")
    rng = rng if rng is not None else np.random.default_rng(0)
    base = np.argmax(forward(ck.net, ck.standardizer, x), axis=1)
    scores = []
    for j, name in enumerate(FEATURE_NAMES):
        shuffled = x.copy()
        shuffled[:, j] = x[rng.permutation(x.shape[0]), j]
        changed = np.argmax(forward(ck.net, ck.standardizer, shuffled), axis=1) != base
        scores.append((name, float(changed.mean())))
    order = sorted(range(len(scores)), key=lambda i: (-scores[i][1], i))
    return [scores[i] for i in order]


def collect_probe_states(ck: Checkpoint, cfg: ExperimentConfig, n: int) -> np.ndarray:
    """Observations seen by the greedy checkpoint policy in fresh simulations."""
    states: List[np.ndarray] = []
    k = 0
    while len(states) < n:
        agents: Dict[str, object] = {
            EVAL_ID: DQLMarketMaker.from_checkpoint(EVAL_ID, ck, cfg.agent, stream(cfg.seed, 0, _AGENT, k)),
            "random": RandomMM("random", stream(cfg.seed, 0, _AGENT, 10_000 + k)),
            "persistent": PersistentMM("persistent", stream(cfg.seed, 0, _AGENT, 20_000 + k)),
        }
        recorder = _Recorder(agents[EVAL_ID], states)
        agents[EVAL_ID] = recorder
        run_simulation(agents, cfg, 0, k)
        k += 1
    return np.stack(states[:n])


class _Recorder:
    def __init__(self, inner, sink: List[np.ndarray]) -> None:
        self.inner = inner
        self.sink = sink

    def begin_simulation(self) -> None:
        self.inner.begin_simulation()

    def step(self, observation, reward_prev=0.0):
        self.sink.append(np.asarray(observation, dtype=np.float64))
        return self.inner.step(observation, reward_prev)

    def finish(self, observation, reward_prev) -> None:
        self.inner.finish(observation, reward_prev)
