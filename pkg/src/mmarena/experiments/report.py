"""Summary tables, rolling-window series and epsilon-evolution series."""
from __future__ import annotations

import os
from collections import defaultdict
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, List, Sequence, Tuple

import numpy as np

from .runner import ACTIONS_HEADER, read_eps_csv, read_results_csv

SUMMARY_HEADER = "mm_id,mean,top,bottom,std"


@dataclass(frozen=True)
class SummaryRow:
    mm_id: str
    mean: float
    top: float
    bottom: float
    std: float
    n: int

    @property
    def degenerate(self) -> bool:
        """True when std is undefined (a single observation) and reported as 0."""
        return self.n < 2

    def scaled(self, factor: float) -> "SummaryRow":
        return SummaryRow(self.mm_id, self.mean / factor, self.top / factor, self.bottom / factor,
                          self.std / factor, self.n)


def _ordered_ids(rows) -> List[str]:
    seen: Dict[str, None] = {}
    for row in rows:
        seen.setdefault(row[2], None)
    return list(seen)


def summarize(rewards: Sequence[Tuple[int, int, str, int]]) -> List[SummaryRow]:
    """Per-MM mean / max / min / sample std over every (round, simulation)."""
    rewards = getattr(rewards, "rewards", rewards)
    if not rewards:
        raise ValueError("cannot summarize an empty dataset")
    by_mm: Dict[str, List[int]] = defaultdict(list)
    for _, _, m, v in rewards:
        by_mm[m].append(v)
    out = []
    for m in _ordered_ids(rewards):
        x = np.asarray(by_mm[m], dtype=np.float64)
        std = float(x.std(ddof=1)) if x.size > 1 else 0.0
        out.append(SummaryRow(m, float(x.mean()), float(x.max()), float(x.min()), std, int(x.size)))
    return out


def _trailing_mean(x: np.ndarray, window: int) -> np.ndarray:
    c = np.concatenate([[0.0], np.cumsum(x, dtype=np.float64)])
    idx = np.arange(1, len(x) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def _round_matrix(rows, mm_id: str, col: int = 3) -> np.ndarray:
    pts = [(r[0], r[1], r[col]) for r in rows if r[2] == mm_id]
    n_r = max(p[0] for p in pts) + 1
    n_k = max(p[1] for p in pts) + 1
    mat = np.full((n_r, n_k), np.nan)
    for r, k, v in pts:
        mat[r, k] = v
    return mat


def rolling_series(rewards, window: int = 50) -> Dict[str, np.ndarray]:
    """Trailing mean over the last ``window`` simulations, averaged across rounds."""
    rewards = getattr(rewards, "rewards", rewards)
    if window < 1:
        raise ValueError("window must be >= 1")
    out = {}
    for m in _ordered_ids(rewards):
        mat = _round_matrix(rewards, m)
        out[m] = np.mean([_trailing_mean(row, window) for row in mat], axis=0)
    return out


def epsilon_series(eps_rows, window: int = 50) -> Dict[str, np.ndarray]:
    """Per-MM rolling mean of the chosen (eps_buy, eps_sell, eps_hedge); shape (sims, 3)."""
    if window < 1:
        raise ValueError("window must be >= 1")
    out = {}
    for m in _ordered_ids(eps_rows):
        cols = []
        for c in (3, 4, 5):
            mat = _round_matrix(eps_rows, m, c)
            cols.append(np.mean([_trailing_mean(row, window) for row in mat], axis=0))
        out[m] = np.stack(cols, axis=1)
    return out


def eps_rows_from_actions(path) -> List[Tuple[int, int, str, float, float, float]]:
    """Per-simulation mean epsilons aggregated from an actions.csv file."""
    acc: Dict[Tuple[int, int, str], List[float]] = {}
    with open(path) as fh:
        header = fh.readline().strip()
        if header != ACTIONS_HEADER:
            raise ValueError(f"{path}: unexpected header {header!r}")
        for line in fh:
            r, k, _, m, b, s, h = line.rstrip("\n").split(",")
            key = (int(r), int(k), m)
            a = acc.get(key)
            if a is None:
                a = acc[key] = [0.0, 0.0, 0.0, 0]
            a[0] += float(b)
            a[1] += float(s)
            a[2] += float(h)
            a[3] += 1
    return [key + (a[0] / a[3], a[1] / a[3], a[2] / a[3]) for key, a in acc.items()]


def _fmt(v: float) -> str:
    return repr(float(v))


def write_summary_csv(path, rows: Sequence[SummaryRow]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(SUMMARY_HEADER + "\n")
        for r in rows:
            fh.write(f"{r.mm_id},{_fmt(r.mean)},{_fmt(r.top)},{_fmt(r.bottom)},{_fmt(r.std)}\n")


def write_rolling_csv(path, series: Dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("simulation,mm_id,rolling_mean\n")
        for m, s in series.items():
            for k, v in enumerate(s):
                fh.write(f"{k},{m},{_fmt(v)}\n")


def write_epsilon_csv(path, series: Dict[str, np.ndarray]) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write("simulation,mm_id,eps_buy,eps_sell,eps_hedge\n")
        for m, s in series.items():
            for k, (b, sl, h) in enumerate(s):
                fh.write(f"{k},{m},{_fmt(b)},{_fmt(sl)},{_fmt(h)}\n")


def build_report(results_dir, window: int = 50, kilo: bool = False) -> List[SummaryRow]:
    """Write summary.csv, rolling.csv and epsilons.csv next to results.csv."""
    d = Path(results_dir)
    rewards = read_results_csv(d / "results.csv")
    rows = summarize(rewards)
    write_summary_csv(d / "summary.csv", [r.scaled(1e3) for r in rows] if kilo else rows)
    write_rolling_csv(d / "rolling.csv", rolling_series(rewards, window))
    if os.path.exists(d / "sim_eps.csv"):
        eps_rows = read_eps_csv(d / "sim_eps.csv")
    elif os.path.exists(d / "actions.csv"):
        eps_rows = eps_rows_from_actions(d / "actions.csv")
    else:
        eps_rows = []
    if eps_rows:
        write_epsilon_csv(d / "epsilons.csv", epsilon_series(eps_rows, window))
    return rows

