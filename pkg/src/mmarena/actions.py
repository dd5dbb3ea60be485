"""Discrete market-maker action grid and its index codec.

Spread epsilons live on {-1, -0.8, ..., 1} and hedge epsilons on
{0, 0.25, ..., 1}. Internally both are kept as integer grid positions so all
quote and hedge arithmetic is exact.
"""
from __future__ import annotations

from dataclasses import dataclass

SPREAD_GRID = tuple(round(-1 + 0.2 * i, 1) for i in range(11))
HEDGE_GRID = (0.0, 0.25, 0.5, 0.75, 1.0)
N_SPREAD = len(SPREAD_GRID)
N_HEDGE = len(HEDGE_GRID)
N_ACTIONS = N_SPREAD * N_SPREAD * N_HEDGE  # 605


def _grid_pos(value: float, grid: tuple, name: str) -> int:
    for i, g in enumerate(grid):
        if abs(value - g) < 1e-9:
            return i
    raise ValueError(f"{name}={value!r} is not on the grid {grid}")


@dataclass(frozen=True)
class MMAction:
    eps_buy: float
    eps_sell: float
    eps_hedge: float

    def __post_init__(self) -> None:
        # snap to canonical grid floats; raises on off-grid input
        object.__setattr__(self, "eps_buy", SPREAD_GRID[_grid_pos(self.eps_buy, SPREAD_GRID, "eps_buy")])
        object.__setattr__(self, "eps_sell", SPREAD_GRID[_grid_pos(self.eps_sell, SPREAD_GRID, "eps_sell")])
        object.__setattr__(self, "eps_hedge", HEDGE_GRID[_grid_pos(self.eps_hedge, HEDGE_GRID, "eps_hedge")])

    @property
    def buy_pos(self) -> int:
        return SPREAD_GRID.index(self.eps_buy)

    @property
    def sell_pos(self) -> int:
        return SPREAD_GRID.index(self.eps_sell)

    @property
    def hedge_pos(self) -> int:
        return HEDGE_GRID.index(self.eps_hedge)


def encode_action(a: MMAction) -> int:
    """``idx = b*55 + s*5 + h`` with grid positions in ascending order."""
    return a.buy_pos * (N_SPREAD * N_HEDGE) + a.sell_pos * N_HEDGE + a.hedge_pos


_DECODED = None


def decode_action(idx: int) -> MMAction:
    global _DECODED
    if not (0 <= int(idx) < N_ACTIONS) or int(idx) != idx:
        raise ValueError(f"action index {idx!r} outside [0, {N_ACTIONS})")
    if _DECODED is None:
        _DECODED = [
            MMAction(SPREAD_GRID[i // (N_SPREAD * N_HEDGE)], SPREAD_GRID[(i // N_HEDGE) % N_SPREAD], HEDGE_GRID[i % N_HEDGE])
            for i in range(N_ACTIONS)
        ]
    return _DECODED[int(idx)]


def spread_positions(idx: int) -> tuple[int, int, int]:
    """Grid positions ``(b, s, h)`` of an action index, without building an MMAction."""
    return idx // (N_SPREAD * N_HEDGE), (idx // N_HEDGE) % N_SPREAD, idx % N_HEDGE
