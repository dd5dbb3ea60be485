"""Experimental market makers layered on the background market.

Each step the background market advances, every registered MM quotes per-side
spreads scaled from the reference spread, 50 investors route 100-share orders
to the cheapest quote, MMs hedge part of their inventory, and the proxy P&L
reward ``bs + inv_pnl - hed_cost`` is booked.

Counter naming follows the investor's side: ``buy_ops`` counts investor buys
filled by the MM (the MM sold), ``sell_ops`` counts investor sells.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple, Union

import numpy as np

from .actions import HEDGE_GRID, N_ACTIONS, MMAction, spread_positions
from .market_core import BUY, SELL, MarketParams, MarketSnapshot, MarketWorld

N_FEATURES = 10
FEATURE_NAMES = (
    "buy_ops_prev",
    "shares_bought_prev",
    "sell_ops_prev",
    "shares_sold_prev",
    "inventory_prev",
    "inventory_now",
    "mid_price_variation",
    "spread_ref_now",
    "spread_ref_prev",
    "volume_prev",
)


@dataclass(frozen=True)
class Quote:
    spread_buy: int
    spread_sell: int
    owner: str


def _spread_ticks(spread_ref: int, pos: int) -> int:
    # spread_ref * (1 + eps) with eps = (pos - 5) / 5, rounded half-up, floored at 0
    return max(0, (2 * spread_ref * pos + 5) // 10)


def quote_from_action(spread_ref: int, a: MMAction, owner: str = "") -> Quote:
    if spread_ref < 1:
        raise ValueError(f"spread_ref must be >= 1, got {spread_ref}")
    if not isinstance(a, MMAction):
        raise TypeError("expected an MMAction")
    return Quote(_spread_ticks(spread_ref, a.buy_pos), _spread_ticks(spread_ref, a.sell_pos), owner)


def route_investor_order(side: str, quotes: Sequence[Quote], rng: np.random.Generator) -> str:
    """Owner of the cheapest quote for an investor order; exact ties broken uniformly."""
    if not quotes:
        raise ValueError("no quotes to route to")
    key = (lambda q: q.spread_sell) if side == BUY else (lambda q: q.spread_buy)
    best = min(key(q) for q in quotes)
    tied = [q.owner for q in quotes if key(q) == best]
    if len(tied) == 1:
        return tied[0]
    return tied[int(rng.integers(len(tied)))]


@dataclass
class MMLedger:
    inventory: int = 0
    last_inventory: int = 0
    cash_proxy: int = 0
    buy_ops: int = 0
    buy_shares: int = 0
    sell_ops: int = 0
    sell_shares: int = 0
    bs: int = 0

    def start_step(self) -> None:
        self.last_inventory = self.inventory
        self.buy_ops = self.buy_shares = self.sell_ops = self.sell_shares = 0
        self.bs = 0


def apply_fill(ledger: MMLedger, side: str, qty: int, spread_mm: int) -> MMLedger:
    """Book an investor order of ``qty`` shares on ``side`` against this MM."""
    if qty <= 0:
        raise ValueError("fill quantity must be positive")
    if side == BUY:
        ledger.inventory -= qty
        ledger.buy_ops += 1
        ledger.buy_shares += qty
    else:
        ledger.inventory += qty
        ledger.sell_ops += 1
        ledger.sell_shares += qty
    ledger.bs += qty * spread_mm
    return ledger


def hedge(ledger: MMLedger, eps_hedge: float, spread_ref: int) -> Tuple[MMLedger, int]:
    """Flatten ``round(|inv| * eps_hedge)`` shares at a cost of ``spread_ref`` per share."""
    for h, g in enumerate(HEDGE_GRID):
        if abs(eps_hedge - g) < 1e-9:
            break
    else:
        raise ValueError(f"eps_hedge={eps_hedge!r} is not on the grid {HEDGE_GRID}")
    return _hedge_pos(ledger, h, spread_ref)


def _hedge_pos(ledger: MMLedger, h: int, spread_ref: int) -> Tuple[MMLedger, int]:
    inv = ledger.inventory
    hedged = (2 * abs(inv) * h + 4) // 8  # |inv| * h/4, half-up
    if inv < 0:
        ledger.inventory = inv + hedged
    else:
        ledger.inventory = inv - hedged
    return ledger, hedged * spread_ref


@dataclass(frozen=True)
class RewardBreakdown:
    bs: int
    inv_pnl: int
    hed_cost: int

    @property
    def total(self) -> int:
        return self.bs + self.inv_pnl - self.hed_cost


def compute_reward(ledger: MMLedger, mid_var: int, hed_cost: int) -> RewardBreakdown:
    """Step reward; the price move is applied to the position carried into the step."""
    return RewardBreakdown(ledger.bs, ledger.last_inventory * mid_var, hed_cost)


def build_state(prev_snapshot: Optional[MarketSnapshot], snapshot: MarketSnapshot, ledger: MMLedger) -> np.ndarray:
    """Raw 10-feature observation in the order of ``FEATURE_NAMES``."""
    if prev_snapshot is None:
        return np.array([0, 0, 0, 0, 0, ledger.inventory, 0, snapshot.spread_ref, 0, 0], dtype=np.float64)
    return np.array(
        [
            ledger.buy_ops,
            ledger.buy_shares,
            ledger.sell_ops,
            ledger.sell_shares,
            ledger.last_inventory,
            ledger.inventory,
            snapshot.mid_price_variation,
            snapshot.spread_ref,
            prev_snapshot.spread_ref,
            snapshot.volume,
        ],
        dtype=np.float64,
    )


@dataclass(frozen=True)
class RouteRecord:
    side: str
    winner: str
    spreads: Tuple[Tuple[str, int], ...]


ActionLike = Union[int, np.integer, MMAction]

LEDGER_HEADER = "step,mm_id,inv,bs,inv_pnl,hed_cost,reward_total"


@dataclass
class MMEnv:
    """One simulation: background market plus the experimental MMs.

    ``market_rng`` drives the background market only, so the same seed yields
    the same market path whatever MMs are registered. ``flow_rng`` drives
    investor sides and tie-breaks.
    """

    mm_ids: Sequence[str]
    market_params: MarketParams
    market_rng: np.random.Generator
    flow_rng: np.random.Generator
    n_investors: int = 50
    investor_size: int = 100
    audit: bool = False
    record_ledger: bool = False
    world: MarketWorld = field(init=False)
    ledgers: Dict[str, MMLedger] = field(init=False)
    route_log: List[RouteRecord] = field(init=False, default_factory=list)
    ledger_rows: List[Tuple] = field(init=False, default_factory=list)

    def __post_init__(self) -> None:
        if len(set(self.mm_ids)) != len(self.mm_ids) or not self.mm_ids:
            raise ValueError("mm_ids must be non-empty and unique")
        self.mm_ids = list(self.mm_ids)
        self.world = MarketWorld(self.market_params, self.market_rng)
        self.ledgers = {m: MMLedger() for m in self.mm_ids}

    @property
    def snapshot(self) -> MarketSnapshot:
        return self.world.snapshot

    def reset(self) -> Dict[str, np.ndarray]:
        """Initial observations (cold-start convention)."""
        return {m: build_state(None, self.world.snapshot, self.ledgers[m]) for m in self.mm_ids}

    def step(self, mm_actions: Mapping[str, ActionLike]) -> Dict[str, Tuple[np.ndarray, RewardBreakdown]]:
        missing = [m for m in self.mm_ids if m not in mm_actions]
        if missing:
            raise KeyError(f"no action supplied for {missing}")

        for led in self.ledgers.values():
            led.start_step()
        prev = self.world.snapshot
        snap = self.world.step_market()
        ref = snap.spread_ref

        positions = {}
        for m in self.mm_ids:
            a = mm_actions[m]
            if isinstance(a, MMAction):
                positions[m] = (a.buy_pos, a.sell_pos, a.hedge_pos)
            else:
                positions[m] = spread_positions(_check_index(a))
        # spread charged to an investor buy is the MM's sell-side spread
        sell_spreads = [_spread_ticks(ref, positions[m][1]) for m in self.mm_ids]
        buy_spreads = [_spread_ticks(ref, positions[m][0]) for m in self.mm_ids]

        sides = self.flow_rng.integers(0, 2, size=self.n_investors).tolist()
        n_sell = sum(sides)
        n_buy = self.n_investors - n_sell
        winners_buy = self._draw_winners(sell_spreads, n_buy)
        winners_sell = self._draw_winners(buy_spreads, n_sell)
        ib = isell = 0
        q = self.investor_size
        for s in sides:
            if s:
                w = winners_sell[isell]
                isell += 1
                apply_fill(self.ledgers[self.mm_ids[w]], SELL, q, buy_spreads[w])
                side, spreads = SELL, buy_spreads
            else:
                w = winners_buy[ib]
                ib += 1
                apply_fill(self.ledgers[self.mm_ids[w]], BUY, q, sell_spreads[w])
                side, spreads = BUY, sell_spreads
            if self.audit:
                self.route_log.append(RouteRecord(side, self.mm_ids[w], tuple(zip(self.mm_ids, spreads))))

        out = {}
        for m in self.mm_ids:
            led = self.ledgers[m]
            led, cost = _hedge_pos(led, positions[m][2], ref)
            rb = compute_reward(led, snap.mid_price_variation, cost)
            led.cash_proxy += rb.total
            out[m] = (build_state(prev, snap, led), rb)
            if self.record_ledger:
                self.ledger_rows.append((snap.step, m, led.inventory, rb.bs, rb.inv_pnl, rb.hed_cost, rb.total))
        return out

    def _draw_winners(self, spreads: List[int], n: int) -> List[int]:
        if n == 0:
            return []
        best = min(spreads)
        tied = [i for i, s in enumerate(spreads) if s == best]
        if len(tied) == 1:
            return [tied[0]] * n
        picks = self.flow_rng.integers(0, len(tied), size=n).tolist()
        return [tied[p] for p in picks]

    def write_ledger_csv(self, path) -> None:
        with open(path, "w", newline="\n") as fh:
            fh.write(LEDGER_HEADER + "\n")
            for row in self.ledger_rows:
                fh.write(",".join(str(v) for v in row) + "\n")


def _check_index(a) -> int:
    idx = int(a)
    if idx != a or not (0 <= idx < N_ACTIONS):
        raise ValueError(f"action index {a!r} outside [0, {N_ACTIONS})")
    return idx


def env_step(env: MMEnv, mm_actions: Mapping[str, ActionLike]):
    return env.step(mm_actions)
