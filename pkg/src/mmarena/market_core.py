"""Background market: OU fundamental, price-time-priority book, scripted agents.

All prices are integer ticks (tick size 1). One step is one simulated second.
"""
from __future__ import annotations

import heapq
import math
from collections import deque
from dataclasses import dataclass
from typing import Deque, Dict, List, Optional, Tuple

import numpy as np

BUY = "buy"
SELL = "sell"


@dataclass
class Fundamental:
    value: float = 10000.0
    mean: float = 10000.0
    kappa: float = 0.05
    sigma: float = 10.0

    def __post_init__(self) -> None:
        if not (math.isfinite(self.kappa) and math.isfinite(self.sigma)):
            raise ValueError("kappa and sigma must be finite")
        if self.kappa < 0 or self.kappa > 1 or self.sigma < 0:
            raise ValueError("need 0 <= kappa <= 1 and sigma >= 0")


def fundamental_step(f: Fundamental, rng: np.random.Generator) -> Fundamental:
    """Discrete OU step ``v' = v + kappa*(mean - v) + sigma*N(0,1)``, clamped at 1 tick."""
    shock = rng.standard_normal() if f.sigma > 0 else 0.0
    value = f.value + f.kappa * (f.mean - f.value) + f.sigma * shock
    return Fundamental(max(1.0, value), f.mean, f.kappa, f.sigma)


@dataclass(slots=True)
class Order:
    id: int
    side: str
    price: Optional[int]  # None marks a marketable order
    quantity: int
    timestamp: Tuple[int, int] = (0, 0)
    owner: str = ""

    @property
    def marketable(self) -> bool:
        return self.price is None


@dataclass(frozen=True, slots=True)
class Fill:
    maker_id: int
    taker_id: int
    price: int
    quantity: int
    taker_side: str


class OrderBook:
    """Limit order book with FIFO queues per price level.

    Cancelled orders are removed lazily from their level queue; the per-level
    share totals are kept exact so emptiness checks never look at stale data.
    """

    def __init__(self) -> None:
        self.bids: Dict[int, Deque[Order]] = {}
        self.asks: Dict[int, Deque[Order]] = {}
        self._bid_qty: Dict[int, int] = {}
        self._ask_qty: Dict[int, int] = {}
        self._bid_heap: List[int] = []  # negated prices
        self._ask_heap: List[int] = []
        self._live: Dict[int, Order] = {}
        self.trade_log: List[Fill] = []
        self._next_id = 0
        self._seq = 0
        self.step = 0

    # -- order entry -----------------------------------------------------------------

    def new_order(self, side: str, price: Optional[int], quantity: int, owner: str = "") -> Order:
        self._next_id += 1
        self._seq += 1
        return Order(self._next_id, side, price, quantity, (self.step, self._seq), owner)

    def submit_order(self, order: Order) -> List[Fill]:
        if order.quantity <= 0:
            raise ValueError(f"order quantity must be positive, got {order.quantity}")
        if order.side not in (BUY, SELL):
            raise ValueError(f"unknown side {order.side!r}")
        if order.price is not None and order.price <= 0:
            raise ValueError(f"limit price must be positive, got {order.price}")

        fills: List[Fill] = []
        if order.side == BUY:
            levels, qty, heap, sign = self.asks, self._ask_qty, self._ask_heap, 1
        else:
            levels, qty, heap, sign = self.bids, self._bid_qty, self._bid_heap, -1

        remaining = order.quantity
        while remaining > 0:
            best = self._top(heap, qty, levels, sign)
            if best is None:
                break
            if order.price is not None and sign * (best - order.price) > 0:
                break
            queue = levels[best]
            while remaining > 0 and queue:
                maker = queue[0]
                if maker.quantity == 0:
                    queue.popleft()
                    continue
                traded = min(remaining, maker.quantity)
                maker.quantity -= traded
                remaining -= traded
                qty[best] -= traded
                fills.append(Fill(maker.id, order.id, best, traded, order.side))
                if maker.quantity == 0:
                    queue.popleft()
                    del self._live[maker.id]

        order.quantity = remaining
        if remaining > 0 and order.price is not None:
            self._rest(order)
        self.trade_log.extend(fills)
        return fills

    def _rest(self, order: Order) -> None:
        if order.side == BUY:
            levels, qty, heap, key = self.bids, self._bid_qty, self._bid_heap, -order.price
        else:
            levels, qty, heap, key = self.asks, self._ask_qty, self._ask_heap, order.price
        queue = levels.get(order.price)
        if queue is None:
            queue = levels[order.price] = deque()
            qty[order.price] = 0
            heapq.heappush(heap, key)
        queue.append(order)
        qty[order.price] += order.quantity
        self._live[order.id] = order

    @staticmethod
    def _top(heap: List[int], qty: Dict[int, int], levels: Dict[int, Deque[Order]], sign: int) -> Optional[int]:
        while heap:
            price = sign * heap[0]
            if qty.get(price, 0) > 0:
                return price
            heapq.heappop(heap)
            qty.pop(price, None)
            levels.pop(price, None)
        return None

    def cancel(self, order_id: int) -> bool:
        order = self._live.pop(order_id, None)
        if order is None:
            return False
        qty = self._bid_qty if order.side == BUY else self._ask_qty
        qty[order.price] -= order.quantity
        order.quantity = 0
        return True

    def is_live(self, order_id: int) -> bool:
        return order_id in self._live

    # -- queries -----------------------------------------------------------------------

    def best_bid(self) -> Optional[int]:
        return self._top(self._bid_heap, self._bid_qty, self.bids, -1)

    def best_ask(self) -> Optional[int]:
        return self._top(self._ask_heap, self._ask_qty, self.asks, 1)

    def depth(self, side: str) -> Dict[int, int]:
        qty = self._bid_qty if side == BUY else self._ask_qty
        return {p: q for p, q in qty.items() if q > 0}


def best_quotes(book: OrderBook) -> Tuple[Optional[int], Optional[int]]:
    return book.best_bid(), book.best_ask()


def momentum_signal(price_history, short: int = 20, long: int = 50) -> Optional[str]:
    """MA crossover: ``buy`` when the short MA crosses above the long MA this step."""
    n = len(price_history)
    if n < long + 1:
        return None
    recent = price_history[-(long + 1):]
    # compare scaled sums to stay in exact integer arithmetic
    short_now = sum(recent[-short:]) * long
    long_now = sum(recent[-long:]) * short
    short_prev = sum(recent[-short - 1:-1]) * long
    long_prev = sum(recent[:-1]) * short
    if short_prev <= long_prev and short_now > long_now:
        return BUY
    if short_prev >= long_prev and short_now < long_now:
        return SELL
    return None


@dataclass(frozen=True, slots=True)
class MarketSnapshot:
    step: int
    mid_price: int
    spread_ref: int
    volume: int
    mid_price_variation: int


@dataclass
class MarketParams:
    fundamental_mean: float = 10000.0
    kappa: float = 0.05
    sigma: float = 10.0
    n_noise: int = 100
    n_value: int = 10
    n_momentum: int = 10
    order_size: int = 100
    noise_rate: float = 0.1
    noise_max_offset: int = 5
    noise_ttl: int = 20
    value_threshold: int = 2
    momentum_short: int = 20
    momentum_long: int = 50
    pov_interval: int = 10
    pov_half_spread: int = 5
    pov_depth: int = 1000

    @classmethod
    def from_dict(cls, data: dict) -> "MarketParams":
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown market parameters: {sorted(unknown)}")
        return cls(**data)


def mid_of(bid: int, ask: int) -> int:
    # half-down rounding keeps the mid on the tick grid
    return (bid + ask) // 2


class MarketWorld:
    """Self-contained background market for one simulation."""

    def __init__(self, params: MarketParams, rng: np.random.Generator) -> None:
        self.params = params
        self.rng = rng
        self.book = OrderBook()
        self.fundamental = Fundamental(params.fundamental_mean, params.fundamental_mean, params.kappa, params.sigma)
        self.mid_history: List[int] = []
        self._pov_orders: List[int] = []
        self._noise_orders: Deque[Tuple[int, int]] = deque()  # (placed step, id)
        mid = int(round(params.fundamental_mean))
        self._pov_requote(mid)
        bid, ask = best_quotes(self.book)
        spread = ask - bid if bid is not None and ask is not None else 2 * params.pov_half_spread
        self.snapshot = MarketSnapshot(0, mid, max(1, spread), 0, 0)
        self.mid_history.append(mid)

    def _pov_requote(self, mid: int) -> None:
        p = self.params
        for oid in self._pov_orders:
            self.book.cancel(oid)
        self._pov_orders = []
        if p.pov_depth <= 0:
            return
        for side, price in ((BUY, mid - p.pov_half_spread), (SELL, mid + p.pov_half_spread)):
            if price <= 0:
                continue
            order = self.book.new_order(side, price, p.pov_depth, owner="pov")
            self.book.submit_order(order)
            if self.book.is_live(order.id):
                self._pov_orders.append(order.id)

    def _expire_noise(self) -> None:
        cutoff = self.book.step - self.params.noise_ttl
        queue = self._noise_orders
        while queue and queue[0][0] <= cutoff:
            _, oid = queue.popleft()
            self.book.cancel(oid)

    def _current_mid(self) -> int:
        bid, ask = best_quotes(self.book)
        if bid is None or ask is None:
            return self.snapshot.mid_price
        return mid_of(bid, ask)

    def step_market(self) -> MarketSnapshot:
        p, rng, book = self.params, self.rng, self.book
        book.step += 1
        book.trade_log = []
        self.fundamental = fundamental_step(self.fundamental, rng)
        self._expire_noise()

        mid = self._current_mid()
        if book.step % p.pov_interval == 0:
            self._pov_requote(mid)

        if p.n_noise > 0:
            sides = rng.integers(0, 2, size=p.n_noise)
            offsets = rng.integers(1, p.noise_max_offset + 1, size=p.n_noise)
            active = rng.random(p.n_noise) < p.noise_rate
            for is_sell, off, on in zip(sides.tolist(), offsets.tolist(), active.tolist()):
                if not on:
                    continue
                if is_sell:
                    side, price = SELL, mid + off
                else:
                    side, price = BUY, mid - off
                if price <= 0:
                    continue
                order = book.new_order(side, price, p.order_size, owner="noise")
                book.submit_order(order)
                if book.is_live(order.id):
                    self._noise_orders.append((book.step, order.id))

        gap = mid - self.fundamental.value
        if p.n_value > 0 and abs(gap) > p.value_threshold:
            side = SELL if gap > 0 else BUY
            for _ in range(p.n_value):
                book.submit_order(book.new_order(side, None, p.order_size, owner="value"))

        if p.n_momentum > 0:
            signal = momentum_signal(self.mid_history, p.momentum_short, p.momentum_long)
            if signal is not None:
                for _ in range(p.n_momentum):
                    book.submit_order(book.new_order(signal, None, p.order_size, owner="momentum"))

        bid, ask = best_quotes(book)
        if bid is None or ask is None:
            self._pov_requote(self.snapshot.mid_price if bid is None and ask is None else self._current_mid())
            bid, ask = best_quotes(book)

        prev = self.snapshot
        if bid is not None and ask is not None:
            new_mid = mid_of(bid, ask)
            spread = ask - bid
        else:
            new_mid, spread = prev.mid_price, prev.spread_ref
        volume = sum(f.quantity for f in book.trade_log)
        self.snapshot = MarketSnapshot(book.step, new_mid, max(1, spread), volume, new_mid - prev.mid_price)
        self.mid_history.append(new_mid)
        if len(self.mid_history) > 4 * p.momentum_long:
            del self.mid_history[: -2 * p.momentum_long]
        return self.snapshot


def step_market(world: MarketWorld) -> MarketSnapshot:
    return world.step_market()


SNAPSHOT_HEADER = "step,mid,spread_ref,volume,mid_var"


def write_snapshots_csv(path, snapshots) -> None:
    with open(path, "w", newline="\n") as fh:
        fh.write(SNAPSHOT_HEADER + "\n")
        for s in snapshots:
            fh.write(f"{s.step},{s.mid_price},{s.spread_ref},{s.volume},{s.mid_price_variation}\n")
