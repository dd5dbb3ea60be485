"""Deep Q-learning market maker and the two scripted baselines."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .actions import N_ACTIONS, MMAction, decode_action, encode_action
from .neural import (
    LAYER_SIZES,
    AdamState,
    Checkpoint,
    MLP,
    Standardizer,
    fit_standardizer,
    forward,
    train_batch,
)

__all__ = [
    "DQLConfig",
    "DQLMarketMaker",
    "ExplorationState",
    "PersistentMM",
    "RandomMM",
    "Transition",
    "decode_action",
    "encode_action",
    "persistent_mm_action",
    "random_mm_action",
    "select_action",
    "td_targets",
]


@dataclass
class ExplorationState:
    epsilon: float = 0.99
    start: float = 0.99
    decay: float = 0.99999
    minimum: float = 0.01
    t: int = 0

    def advance(self) -> None:
        self.t += 1
        self.epsilon = max(self.minimum, self.start * self.decay ** self.t)

    def closed_form(self, t: Optional[int] = None) -> float:
        t = self.t if t is None else t
        return max(self.minimum, self.start * self.decay ** t)


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: int
    next_state: np.ndarray
    reward: float
    terminal: bool = False


@dataclass
class DQLConfig:
    gamma: float = 0.6
    epsilon_start: float = 0.99
    epsilon_decay: float = 0.99999
    epsilon_min: float = 0.01
    retrain_every: int = 200
    batch_size: int = 32
    epochs: int = 4
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    adam_eps: float = 1e-8
    reward_scale: float = 1e-3

    @classmethod
    def from_dict(cls, data: dict) -> "DQLConfig":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown agent parameters: {sorted(unknown)}")
        cfg = cls(**data)
        if not 0 <= cfg.gamma <= 1:
            raise ValueError("gamma must lie in [0, 1]")
        return cfg


def greedy_index(q: np.ndarray) -> int:
    # np.argmax returns the first maximum, i.e. the lowest index on ties
    return int(np.argmax(q))


def select_action(state, net: MLP, std: Standardizer, expl: ExplorationState, rng: np.random.Generator) -> int:
    """Epsilon-greedy choice; epsilon decays once per call whichever branch is taken."""
    if rng.random() < expl.epsilon:
        idx = int(rng.integers(N_ACTIONS))
    else:
        idx = greedy_index(forward(net, std, state))
    expl.advance()
    return idx


def td_targets(batch: Sequence[Transition], net: MLP, std: Standardizer, gamma: float,
               reward_scale: float = 1.0) -> np.ndarray:
    """One-step bootstrap ``r + gamma * max_a Q(s', a)``; terminal transitions use ``r``."""
    if not batch:
        raise ValueError("empty batch")
    rewards = np.array([t.reward for t in batch], dtype=np.float64) * reward_scale
    if gamma == 0:
        return rewards
    nxt = np.stack([t.next_state for t in batch])
    q_next = forward(net, std, nxt).max(axis=1).astype(np.float64)
    done = np.array([t.terminal for t in batch])
    return rewards + gamma * np.where(done, 0.0, q_next)


class DQLMarketMaker:
    """DQN market maker: buffer transitions, retrain every ``retrain_every`` stored steps.

    The training step counter ``t`` runs across simulations, so a retrain can
    fall in the middle of a simulation.
    """

    kind = "dql"

    def __init__(self, mm_id: str, cfg: Optional[DQLConfig] = None, rng: Optional[np.random.Generator] = None,
                 net: Optional[MLP] = None, standardizer: Optional[Standardizer] = None,
                 exploration: Optional[ExplorationState] = None, train: bool = True) -> None:
        self.mm_id = mm_id
        self.cfg = cfg or DQLConfig()
        self.rng = rng if rng is not None else np.random.default_rng()
        self.net = net if net is not None else MLP.init(LAYER_SIZES, self.rng)
        self.std = standardizer if standardizer is not None else Standardizer()
        self.adam = AdamState.for_net(self.net, lr=self.cfg.lr, beta1=self.cfg.beta1, beta2=self.cfg.beta2,
                                      eps=self.cfg.adam_eps)
        self.expl = exploration or ExplorationState(self.cfg.epsilon_start, self.cfg.epsilon_start,
                                                    self.cfg.epsilon_decay, self.cfg.epsilon_min)
        self.train = train
        self.buffer: List[Transition] = []
        self.t = 0
        self.train_calls: List[int] = []
        self.losses: List[float] = []
        self._prev_state: Optional[np.ndarray] = None
        self._prev_action: Optional[int] = None

    @classmethod
    def from_checkpoint(cls, mm_id: str, ck: Checkpoint, cfg: Optional[DQLConfig] = None,
                        rng: Optional[np.random.Generator] = None, train: bool = False,
                        greedy: bool = True) -> "DQLMarketMaker":
        cfg = cfg or DQLConfig()
        if greedy:
            expl = ExplorationState(0.0, 0.0, 1.0, 0.0, ck.step)
        else:
            expl = ExplorationState(ck.epsilon, cfg.epsilon_start, cfg.epsilon_decay, cfg.epsilon_min, ck.step)
        agent = cls(mm_id, cfg, rng, net=ck.net.copy(),
                    standardizer=Standardizer(ck.standardizer.mean.copy(), ck.standardizer.std.copy()),
                    exploration=expl, train=train)
        agent.t = ck.step
        return agent

    def checkpoint(self, **meta) -> Checkpoint:
        return Checkpoint(self.net.copy(), Standardizer(self.std.mean.copy(), self.std.std.copy()),
                          self.expl.epsilon, self.t, dict(meta))

    # -- per-step protocol -------------------------------------------------------------

    def begin_simulation(self) -> None:
        self._prev_state = None
        self._prev_action = None

    def step(self, observation: np.ndarray, reward_prev: float = 0.0) -> int:
        """Store the transition that led here, maybe retrain, pick the next action index."""
        if self._prev_state is not None:
            self._store(Transition(self._prev_state, self._prev_action, observation, reward_prev, False))
        idx = select_action(observation, self.net, self.std, self.expl, self.rng)
        self._prev_state = observation
        self._prev_action = idx
        return idx

    def finish(self, observation: np.ndarray, reward_prev: float) -> None:
        """Close the simulation with a terminal transition."""
        if self._prev_state is not None:
            self._store(Transition(self._prev_state, self._prev_action, observation, reward_prev, True))
        self._prev_state = None
        self._prev_action = None

    def _store(self, tr: Transition) -> None:
        if not self.train:
            return
        self.buffer.append(tr)
        self.t += 1
        if self.t % self.cfg.retrain_every == 0 and self.buffer:
            self.retrain()

    def retrain(self) -> None:
        buf = self.buffer
        states = np.stack([tr.state for tr in buf])
        if len(buf) >= 2:
            self.std = fit_standardizer(states)
        targets = td_targets(buf, self.net, self.std, self.cfg.gamma, self.cfg.reward_scale)
        z = self.std.transform(states)
        actions = np.array([tr.action for tr in buf], dtype=np.int64)
        for _ in range(self.cfg.epochs):
            order = self.rng.permutation(len(buf))
            for lo in range(0, len(buf), self.cfg.batch_size):
                sel = order[lo:lo + self.cfg.batch_size]
                self.losses.append(train_batch(self.net, self.adam, z[sel], targets[sel], actions[sel]))
        self.train_calls.append(self.t)
        self.buffer = []


def random_mm_action(rng: np.random.Generator) -> MMAction:
    return decode_action(int(rng.integers(N_ACTIONS)))


def persistent_mm_action(fixed: MMAction) -> MMAction:
    return fixed


class RandomMM:
    kind = "random"

    def __init__(self, mm_id: str, rng: np.random.Generator) -> None:
        self.mm_id = mm_id
        self.rng = rng

    def begin_simulation(self) -> None:
        pass

    def step(self, observation, reward_prev=0.0) -> int:
        return int(self.rng.integers(N_ACTIONS))

    def finish(self, observation, reward_prev) -> None:
        pass


class PersistentMM:
    """One random action drawn at the start of each simulation and held throughout."""

    kind = "persistent"

    def __init__(self, mm_id: str, rng: np.random.Generator) -> None:
        self.mm_id = mm_id
        self.rng = rng
        self.fixed: Optional[int] = None

    def begin_simulation(self) -> None:
        self.fixed = int(self.rng.integers(N_ACTIONS))

    def step(self, observation, reward_prev=0.0) -> int:
        if self.fixed is None:
            self.begin_simulation()
        return encode_action(persistent_mm_action(decode_action(self.fixed)))

    def finish(self, observation, reward_prev) -> None:
        pass
