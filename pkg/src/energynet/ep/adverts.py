"""Intra-ELAN resource advertisement by full flooding."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, Mapping

from ..core import N_CLASSES

DEFAULT_TTL = 15
DEFAULT_INTERVAL = 5


@dataclass(frozen=True)
class ResourceAdvert:
    router_id: str
    elan_id: str
    supply: tuple[float, ...]  # watts on offer to each priority class
    storage_headroom: float
    price: float
    ttl: int
    sent_tick: int

    def __post_init__(self):
        if len(self.supply) != N_CLASSES:
            raise ValueError(f"advert supply needs one entry per class ({N_CLASSES})")

    def alive(self, now: int) -> bool:
        return now <= self.sent_tick + self.ttl

    def to_body(self) -> dict:
        return {"elan": self.elan_id, "price": self.price, "storage_headroom_j": self.storage_headroom,
                "supply_w": list(self.supply), "ttl": self.ttl}

    @classmethod
    def from_message(cls, sender: str, tick: int, body: Mapping) -> ResourceAdvert:
        return cls(sender, body["elan"], tuple(body["supply_w"]), body["storage_headroom_j"], body["price"],
                   body["ttl"], tick)


ResourceTable = dict  # router_id -> ResourceAdvert


def advertise_cycle(
    tables: Mapping[str, ResourceTable],
    delivered: Iterable[ResourceAdvert],
    now: int,
    reachable: Iterable[str] | None = None,
) -> dict[str, ResourceTable]:
    """Flood ``delivered`` adverts to every member and purge stale entries.

    ``tables`` holds one resource table per ELAN member. Members outside
    ``reachable`` (dark routers) neither receive nor keep anything new.
    A newer advert from the same router replaces an older one.
    """
    delivered = list(delivered)
    live = set(tables) if reachable is None else set(reachable) & set(tables)
    out = {}
    for rid in sorted(tables):
        table = dict(tables[rid])
        if rid in live:
            for adv in delivered:
                cur = table.get(adv.router_id)
                if cur is None or cur.sent_tick <= adv.sent_tick:
                    table[adv.router_id] = adv
        out[rid] = {k: v for k, v in sorted(table.items()) if v.alive(now)}
    return out
