"""Neutral marketplaces: free peering pools, uniform-price double auctions, EWAN aggregation, settlement."""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

from .core import check_priority
from .eros.planning import priority_fill

DEFAULT_INTERVAL = 15
DEFAULT_MARGIN = 0.02
MICRO = 1_000_000  # ledger unit: one millionth of a currency unit


class Side(str, Enum):
    BUY = "Buy"
    SELL = "Sell"


@dataclass(frozen=True)
class Bid:
    actor: str
    side: Side
    quantity: float  # watts over the market interval
    limit_price: float  # currency per kWh
    priority: int = 7
    origin: str | None = None

    def __post_init__(self):
        if not self.quantity > 0:
            raise ValueError(f"bid from {self.actor}: quantity must be positive")
        if self.limit_price < 0:
            raise ValueError(f"bid from {self.actor}: limit price must be non-negative")
        check_priority(self.priority)


@dataclass(frozen=True)
class Trade:
    buyer: str
    seller: str
    quantity: float
    price: float
    interval: tuple[int, int] = (0, DEFAULT_INTERVAL)
    pool: bool = False

    def to_json(self) -> dict:
        return {"buyer": self.buyer, "interval": list(self.interval), "pool": self.pool, "price": self.price,
                "quantity_w": self.quantity, "seller": self.seller}


@dataclass(frozen=True)
class PeeringPool:
    elan_id: str
    members: frozenset[str]


def clear_peering(pool: PeeringPool, surplus: Iterable[tuple[str, float]], requests: Iterable[tuple[str, float, int]],
                  interval: tuple[int, int] = (0, DEFAULT_INTERVAL)) -> list[Trade]:
    """Share pooled surplus for free: strict priority across classes, pro-rata within one.

    Givers are drained in member order and matched to receivers in the order
    the allocation served them.
    """
    surplus = [(m, w) for m, w in surplus if w > 0]
    requests = [(m, w, p) for m, w, p in requests if w > 0]
    for m in [s[0] for s in surplus] + [r[0] for r in requests]:
        if m not in pool.members:
            raise ValueError(f"{m} is not a member of pool {pool.elan_id}")
    total = sum((w for _, w in surplus), 0 * 1)
    if not total or not requests:
        return []
    fracs = priority_fill(total, [(p, w) for _, w, p in requests])
    got = [w * f for (_, w, _), f in zip(requests, fracs)]
    order = sorted(range(len(requests)), key=lambda j: (requests[j][2], j))
    trades = []
    gi = 0
    left = surplus[0][1]
    for j in order:
        need = got[j]
        while need > 0 and gi < len(surplus):
            q = need if need <= left else left
            if q > 0 and surplus[gi][0] != requests[j][0]:
                trades.append(Trade(requests[j][0], surplus[gi][0], q, 0, interval, pool=True))
            need -= q
            left -= q
            if left <= 0:
                gi += 1
                left = surplus[gi][1] if gi < len(surplus) else 0
    return trades


def clear_auction(bids: Iterable[Bid], interval: tuple[int, int] = (0, DEFAULT_INTERVAL),
                  feasible: Callable[[Bid, Bid], bool] | None = None) -> tuple[list[Trade], float | None]:
    """Uniform-price double auction.

    Asks ascend and buys descend by limit price (ties by actor id); pairs are
    matched greedily while the buy limit covers the ask limit. Everything
    clears at the midpoint of the marginal matched buy and ask limits.
    With ``feasible``, pairs it rejects are skipped, and a buyer is only
    matched if every ask matched so far is within its limit, so the uniform
    price stays individually rational.
    """
    bids = list(bids)
    asks = sorted((b for b in bids if b.side == Side.SELL), key=lambda b: (b.limit_price, b.actor))
    buys = sorted((b for b in bids if b.side == Side.BUY), key=lambda b: (-b.limit_price, b.actor))
    ask_left = [a.quantity for a in asks]
    pairs: list[tuple[Bid, Bid, float]] = []
    max_ask = None
    for b in buys:
        need = b.quantity
        if max_ask is not None and max_ask > b.limit_price:
            break
        for k, a in enumerate(asks):
            if need <= 0:
                break
            if ask_left[k] <= 0:
                continue
            if a.limit_price > b.limit_price:
                break
            if feasible is not None and not feasible(b, a):
                continue
            q = need if need <= ask_left[k] else ask_left[k]
            pairs.append((b, a, q))
            need -= q
            ask_left[k] -= q
            max_ask = a.limit_price if max_ask is None else max(max_ask, a.limit_price)
        if feasible is None and need > 0:
            # asks are exhausted or priced out for this buyer, hence for every later one
            break
    if not pairs:
        return [], None
    min_buy = min(b.limit_price for b, _, _ in pairs)
    price = (min_buy + max_ask) / 2
    trades = [Trade(b.actor, a.actor, q, price, interval) for b, a, q in pairs]
    return trades, price


@dataclass(frozen=True)
class ElanReport:
    elan: str
    surplus_w: float
    deficit_w: float
    clearing_price: float | None
    ask_price: float
    scarcity_price: float


def ewan_aggregate(reports: Iterable[ElanReport], margin: float = DEFAULT_MARGIN) -> list[Bid]:
    """Turn ELAN residual positions into inter-ELAN bids; balanced ELANs post nothing."""
    bids = []
    for rep in sorted(reports, key=lambda r: r.elan):
        actor = f"elan:{rep.elan}"
        if rep.surplus_w > 0:
            base = rep.clearing_price if rep.clearing_price is not None else rep.ask_price
            bids.append(Bid(actor, Side.SELL, rep.surplus_w, round(base + margin, 12), origin=rep.elan))
        if rep.deficit_w > 0:
            bids.append(Bid(actor, Side.BUY, rep.deficit_w, rep.scarcity_price, origin=rep.elan))
    return bids


def route_feasible(routes: Mapping[str, Iterable[str]]) -> Callable[[Bid, Bid], bool]:
    """Feasibility predicate: the buyer's ELAN must hold a route to the seller's ELAN."""

    def ok(buy: Bid, ask: Bid) -> bool:
        return ask.origin in routes.get(buy.origin, ())

    return ok


@dataclass
class Ledger:
    balances: dict[str, int] = field(default_factory=dict)  # micro-units
    entries: list[dict] = field(default_factory=list)
    energy_wh: dict[str, float] = field(default_factory=dict)

    def total(self) -> int:
        return sum(self.balances.values())

    def to_json(self) -> dict:
        return {
            "balances": {k: self.balances[k] / MICRO for k in sorted(self.balances)},
            "balances_micro": {k: self.balances[k] for k in sorted(self.balances)},
            "energy_wh": {k: self.energy_wh[k] for k in sorted(self.energy_wh)},
            "entries": self.entries,
            "total_micro": self.total(),
        }


def settle(trades: Iterable[Trade], ledger: Ledger, tick_seconds: float,
           delivered: Mapping[int, float] | None = None) -> Ledger:
    """Book each trade: buyer pays quantity x hours x price, seller is credited the same.

    ``delivered`` maps a trade's position to the fraction of its energy that
    actually arrived; missing positions settle in full.
    """
    for i, t in enumerate(trades):
        frac = 1.0 if delivered is None else min(max(delivered.get(i, 1.0), 0.0), 1.0)
        hours = t.interval[1] * tick_seconds / 3600
        kwh = t.quantity / 1000 * hours * frac
        amount = round(kwh * t.price * MICRO)
        ledger.balances[t.buyer] = ledger.balances.get(t.buyer, 0) - amount
        ledger.balances[t.seller] = ledger.balances.get(t.seller, 0) + amount
        ledger.energy_wh[t.buyer] = ledger.energy_wh.get(t.buyer, 0.0) + kwh * 1000
        ledger.energy_wh[t.seller] = ledger.energy_wh.get(t.seller, 0.0) - kwh * 1000
        ledger.entries.append({"amount_micro": amount, "buyer": t.buyer, "delivered_fraction": frac,
                               "interval": list(t.interval), "kwh": kwh, "price": t.price, "seller": t.seller})
    return ledger
