"""Small fully-connected Q-network trained with Adam on a mean-absolute-error loss.

Parameters are stored in float32 by default so a checkpoint (float32 arrays)
reproduces the live network bit for bit. Pass ``dtype=np.float64`` for
numerical checks.
"""
from __future__ import annotations

import base64
import json
import math
import os
from dataclasses import dataclass, field
from typing import Any, Dict, List, Optional, Sequence

import numpy as np

LAYER_SIZES = (10, 32, 32, 32, 605)
CHECKPOINT_VERSION = "1"
STD_FLOOR = 1e-8


class CheckpointError(Exception):
    """Raised when a checkpoint file is missing, corrupt or of the wrong version."""


@dataclass
class MLP:
    weights: List[np.ndarray]
    biases: List[np.ndarray]

    @classmethod
    def init(cls, sizes: Sequence[int] = LAYER_SIZES, rng: Optional[np.random.Generator] = None,
             dtype=np.float32) -> "MLP":
        """Glorot-uniform weights, zero biases."""
        rng = rng if rng is not None else np.random.default_rng()
        weights, biases = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            limit = math.sqrt(6.0 / (fan_in + fan_out))
            weights.append(rng.uniform(-limit, limit, size=(fan_in, fan_out)).astype(dtype))
            biases.append(np.zeros(fan_out, dtype=dtype))
        return cls(weights, biases)

    @classmethod
    def zeros(cls, sizes: Sequence[int] = LAYER_SIZES, dtype=np.float32) -> "MLP":
        return cls([np.zeros((i, o), dtype=dtype) for i, o in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(o, dtype=dtype) for o in sizes[1:]])

    @property
    def sizes(self) -> List[int]:
        return [self.weights[0].shape[0]] + [w.shape[1] for w in self.weights]

    @property
    def dtype(self):
        return self.weights[0].dtype

    def params(self) -> List[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def copy(self) -> "MLP":
        return MLP([w.copy() for w in self.weights], [b.copy() for b in self.biases])

    def check_finite(self) -> None:
        for p in self.params():
            if not np.all(np.isfinite(p)):
                raise FloatingPointError("non-finite network parameter")

    def forward_raw(self, z: np.ndarray) -> np.ndarray:
        """Forward pass on already-standardized input(s)."""
        h = np.asarray(z, dtype=self.dtype)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = h @ w + b
            if i < last:
                h = np.maximum(h, 0)
        return h

    def _forward_cache(self, z: np.ndarray):
        acts = [np.asarray(z, dtype=self.dtype)]
        pre = []
        last = len(self.weights) - 1
        h = acts[0]
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            a = h @ w + b
            pre.append(a)
            h = np.maximum(a, 0) if i < last else a
            acts.append(h)
        return pre, acts

    def mae_grad(self, z: np.ndarray, targets: np.ndarray, actions: np.ndarray):
        """Loss ``mean |q[a_i] - t_i|`` and its gradients w.r.t. every parameter.

        Only the taken-action outputs receive gradient; the subgradient at a
        zero residual is 0.
        """
        pre, acts = self._forward_cache(z)
        n = z.shape[0]
        rows = np.arange(n)
        q_taken = acts[-1][rows, actions]
        resid = q_taken - targets
        loss = float(np.mean(np.abs(resid)))
        delta = np.zeros_like(acts[-1])
        delta[rows, actions] = np.sign(resid) / n
        gw: List[np.ndarray] = [None] * len(self.weights)
        gb: List[np.ndarray] = [None] * len(self.weights)
        for i in range(len(self.weights) - 1, -1, -1):
            gw[i] = acts[i].T @ delta
            gb[i] = delta.sum(axis=0)
            if i > 0:
                delta = (delta @ self.weights[i].T) * (pre[i - 1] > 0)
        return loss, gw, gb


@dataclass
class Standardizer:
    mean: np.ndarray = field(default_factory=lambda: np.zeros(LAYER_SIZES[0]))
    std: np.ndarray = field(default_factory=lambda: np.ones(LAYER_SIZES[0]))

    def transform(self, x: np.ndarray) -> np.ndarray:
        return (np.asarray(x, dtype=np.float64) - self.mean) / self.std


def fit_standardizer(samples) -> Standardizer:
    x = np.asarray(samples, dtype=np.float64)
    if x.ndim != 2 or x.shape[0] < 2:
        raise ValueError("need at least 2 samples to fit a standardizer")
    mean = x.mean(axis=0)
    std = np.maximum(x.std(axis=0), STD_FLOOR)
    return Standardizer(mean, std)


def forward(net: MLP, std: Standardizer, x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"expected {net.sizes[0]} input features, got {x.shape[-1]}")
    return net.forward_raw(std.transform(x))


@dataclass
class AdamState:
    m: List[np.ndarray]
    v: List[np.ndarray]
    step: int = 0
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def for_net(cls, net: MLP, **hyper) -> "AdamState":
        return cls([np.zeros_like(p) for p in net.params()], [np.zeros_like(p) for p in net.params()], **hyper)

    def apply(self, params: List[np.ndarray], grads: List[np.ndarray]) -> None:
        self.step += 1
        c1 = 1.0 - self.beta1 ** self.step
        c2 = 1.0 - self.beta2 ** self.step
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * (g * g)
            p -= (self.lr * (m / c1) / (np.sqrt(v / c2) + self.eps)).astype(p.dtype)


def train_batch(net: MLP, adam: AdamState, z, targets, actions) -> float:
    """One Adam update on a batch of standardized inputs; returns the pre-update loss."""
    z = np.asarray(z)
    targets = np.asarray(targets, dtype=net.dtype)
    actions = np.asarray(actions, dtype=np.int64)
    if z.ndim != 2 or z.shape[0] == 0:
        raise ValueError("batch must be a non-empty 2-D array")
    n_out = net.sizes[-1]
    if np.any(actions < 0) or np.any(actions >= n_out):
        raise ValueError(f"action index outside [0, {n_out})")
    loss, gw, gb = net.mae_grad(z, targets, actions)
    grads = []
    for w, b in zip(gw, gb):
        grads += [w, b]
    adam.apply(net.params(), grads)
    return loss


# -- checkpoints -------------------------------------------------------------------------


@dataclass
class Checkpoint:
    net: MLP
    standardizer: Standardizer
    epsilon: float
    step: int
    meta: Dict[str, Any] = field(default_factory=dict)


def _b64(a: np.ndarray) -> str:
    return base64.b64encode(np.ascontiguousarray(a, dtype="<f4").tobytes()).decode("ascii")


def _unb64(s: str, shape) -> np.ndarray:
    raw = base64.b64decode(s.encode("ascii"), validate=True)
    arr = np.frombuffer(raw, dtype="<f4")
    if arr.size != int(np.prod(shape)):
        raise CheckpointError(f"array of {arr.size} values does not match shape {shape}")
    return arr.reshape(shape).astype(np.float32)


def checkpoint_to_dict(ck: Checkpoint) -> Dict[str, Any]:
    return {
        "version": CHECKPOINT_VERSION,
        "shapes": [list(w.shape) for w in ck.net.weights],
        "weights": [_b64(w) for w in ck.net.weights],
        "biases": [_b64(b) for b in ck.net.biases],
        # float64 stats as JSON numbers; repr round-trips exactly
        "std_mean": [float(v) for v in ck.standardizer.mean],
        "std_std": [float(v) for v in ck.standardizer.std],
        "epsilon": float(ck.epsilon),
        "step": int(ck.step),
        "meta": ck.meta,
    }


def checkpoint_from_dict(d: Dict[str, Any]) -> Checkpoint:
    if not isinstance(d, dict):
        raise CheckpointError("checkpoint root must be an object")
    if d.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(f"unsupported checkpoint version {d.get('version')!r}")
    try:
        shapes = [tuple(int(v) for v in s) for s in d["shapes"]]
        weights = [_unb64(w, s) for w, s in zip(d["weights"], shapes)]
        biases = [_unb64(b, (s[1],)) for b, s in zip(d["biases"], shapes)]
        if len(weights) != len(shapes) or len(biases) != len(shapes):
            raise CheckpointError("layer count mismatch")
        for a, b in zip(shapes[:-1], shapes[1:]):
            if a[1] != b[0]:
                raise CheckpointError("inconsistent layer shapes")
        mean = np.array(d["std_mean"], dtype=np.float64)
        std = np.array(d["std_std"], dtype=np.float64)
        if mean.shape != (shapes[0][0],) or std.shape != mean.shape or np.any(std <= 0):
            raise CheckpointError("bad standardizer statistics")
        ck = Checkpoint(MLP(weights, biases), Standardizer(mean, std), float(d["epsilon"]), int(d["step"]),
                        dict(d.get("meta", {})))
    except CheckpointError:
        raise
    except (KeyError, TypeError, ValueError) as exc:
        raise CheckpointError(f"malformed checkpoint: {exc}") from exc
    try:
        ck.net.check_finite()
    except FloatingPointError as exc:
        raise CheckpointError(str(exc)) from exc
    return ck


def save_checkpoint(path, ck: Checkpoint) -> None:
    text = json.dumps(checkpoint_to_dict(ck), sort_keys=True, indent=1)
    tmp = f"{path}.tmp"
    with open(tmp, "w", newline="\n") as fh:
        fh.write(text + "\n")
    os.replace(tmp, path)


def load_checkpoint(path) -> Checkpoint:
    try:
        with open(path) as fh:
            data = json.load(fh)
    except FileNotFoundError as exc:
        raise CheckpointError(f"checkpoint not found: {path}") from exc
    except (OSError, json.JSONDecodeError, UnicodeDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    return checkpoint_from_dict(data)
