"""Inter-ELAN route announcements and policy-based route selection."""

from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Iterable, Mapping

from ..core import EnergyNetError


class NoRoute(EnergyNetError):
    pass


@dataclass(frozen=True)
class RouteAnnounce:
    origin_elan: str
    path: tuple[str, ...]  # most recent ELAN first, origin last
    price: float
    hops: int = 0
    carbon: float = 0.0
    resilience_class: int = 7

    def __post_init__(self):
        if len(set(self.path)) != len(self.path):
            raise ValueError(f"route path {self.path} repeats an ELAN")

    def to_json(self) -> dict:
        return {"carbon": self.carbon, "hops": self.hops, "origin_elan": self.origin_elan, "path": list(self.path),
                "price": self.price, "resilience_class": self.resilience_class}

    @classmethod
    def from_json(cls, obj: Mapping) -> RouteAnnounce:
        return cls(obj["origin_elan"], tuple(obj["path"]), obj["price"], obj["hops"], obj["carbon"],
                   obj["resilience_class"])


_KEYS = {
    "price": lambda r: r.price,
    "hops": lambda r: r.hops,
    "carbon": lambda r: r.carbon,
    "resilience_class": lambda r: r.resilience_class,
}


@dataclass(frozen=True)
class Policy:
    objective: tuple[str, ...] = ("price", "hops")
    max_price: float | None = None
    max_carbon: float | None = None

    def __post_init__(self):
        unknown = [k for k in self.objective if k not in _KEYS]
        if unknown:
            raise ValueError(f"unknown policy objective keys: {unknown}")

    def admits(self, r: RouteAnnounce) -> bool:
        if self.max_price is not None and r.price > self.max_price:
            return False
        if self.max_carbon is not None and r.carbon > self.max_carbon:
            return False
        return True

    def rank_key(self, r: RouteAnnounce) -> tuple:
        # origin and full path close the order so the choice never depends on input order
        return tuple(_KEYS[k](r) for k in self.objective) + (r.origin_elan, r.path)


RESILIENCE_POLICY = Policy(objective=("resilience_class", "price"))


def select_route(candidates: Iterable[RouteAnnounce], policy: Policy = Policy()) -> RouteAnnounce:
    ok = [r for r in candidates if policy.admits(r)]
    if not ok:
        raise NoRoute("no candidate satisfies the policy constraints")
    return min(ok, key=policy.rank_key)


class RouteTable:
    """Adj-RIB-in of one ELAN: candidate routes per origin, keyed by announcing neighbour."""

    def __init__(self, elan: str, policy: Policy = Policy()):
        self.elan = elan
        self.policy = policy
        self.candidates: dict[str, dict[str, RouteAnnounce]] = {}

    def receive(self, neighbour: str, ann: RouteAnnounce) -> bool:
        """Store an announcement heard from ``neighbour``; loops are rejected."""
        if self.elan in ann.path or ann.origin_elan == self.elan:
            return False
        self.candidates.setdefault(ann.origin_elan, {})[neighbour] = replace(ann, hops=ann.hops + 1)
        return True

    def withdraw_neighbour(self, neighbour: str) -> None:
        for cands in self.candidates.values():
            cands.pop(neighbour, None)

    def best(self, origin: str) -> RouteAnnounce | None:
        cands = self.candidates.get(origin)
        if not cands:
            return None
        try:
            return select_route(cands.values(), self.policy)
        except NoRoute:
            return None

    def best_routes(self) -> dict[str, RouteAnnounce]:
        out = {}
        for origin in sorted(self.candidates):
            b = self.best(origin)
            if b is not None:
                out[origin] = b
        return out

    def exports(self, own: RouteAnnounce) -> list[RouteAnnounce]:
        """What this ELAN announces to its neighbours: itself plus its best routes, path prepended."""
        out = [own]
        for r in self.best_routes().values():
            out.append(replace(r, path=(self.elan,) + r.path))
        return out

    def all_routes(self) -> Iterable[RouteAnnounce]:
        for origin in sorted(self.candidates):
            for n in sorted(self.candidates[origin]):
                yield self.candidates[origin][n]
