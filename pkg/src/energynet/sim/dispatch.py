"""Network-wide per-tick dispatch across routers and links.

Supply comes in tiers (renewables, storage, grid) and is spent tier by
tier. Inside a tier, demand levels are served in order: priority classes
0..7, then storage charging and grid export. Each level is first served
from a router's own supply, then from the nearest reachable router that
still has supply in the tier (fewest hops, then router id). Power moving
through a router that is itself short at the same or a more urgent level
stops there and serves it first, so every router's allocation is strictly
prioritised and its own backplane plan reproduces the dispatch.
"""

from __future__ import annotations

from collections import defaultdict, deque
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple

from ..core import N_CLASSES
from ..eros.planning import EXPORT_LEVEL, STORAGE_LEVEL

RENEWABLE, STORAGE, GRID = 0, 1, 2
N_TIERS = 3
N_LEVELS = EXPORT_LEVEL + 1
EPS = 1e-9


class Source(NamedTuple):
    port: str
    tier: int
    avail: float  # watts at the port
    eta: float


class Sink(NamedTuple):
    port: str
    level: int
    request: float  # watts at the port
    eta: float


@dataclass
class NodeInput:
    elan: str
    backplane: float
    sources: list[Source] = field(default_factory=list)
    sinks: list[Sink] = field(default_factory=list)
    tier1_max_level: int = N_CLASSES - 1  # storage reserve: highest class storage may serve


class Edge(NamedTuple):
    u: str
    v: str
    link: str
    port_u: str
    port_v: str
    eta_u: float
    eta_v: float
    wire: float  # 1 - link loss
    grant_id: str | None

    @property
    def factor(self) -> float:
        return self.eta_u * self.wire * self.eta_v


@dataclass
class DispatchResult:
    drawn: dict[str, list[float]]  # bus watts drawn per tier
    served: dict[str, list[float]]  # bus watts served per level
    imports: dict[str, list[tuple]]  # router -> (port, watts at port, tier, grant_id)
    exports: dict[str, list[tuple]]  # router -> (port, watts at port, level, grant_id)
    od: dict[tuple[str, str], float]  # (origin router, sink router) -> bus watts delivered
    wire: dict[str, float]  # link -> watts sent onto the wire
    link_loss: float = 0.0
    blocked: dict[str, set] = field(default_factory=dict)  # storage ports charged this tick


def tier_levels(tier: int) -> range:
    if tier == RENEWABLE:
        return range(N_LEVELS)
    return range(N_CLASSES)


def dispatch(nodes: Mapping[str, NodeInput], edges: list[Edge], link_cap: Mapping[str, float],
             routes: Mapping[str, list[tuple[str, frozenset]]] | None = None,
             sharing: bool = True, visible: Mapping[str, set] | None = None) -> DispatchResult:
    """Allocate every router's tiered supply to the network's leveled demand.

    ``routes`` lists, per ELAN, ``(origin ELAN, ELANs on the selected path)``
    in preference order. A router always searches its own ELAN first; power
    from another ELAN only travels along that ELAN's selected path.
    ``visible`` limits, per router, which same-ELAN routers it knows to have
    supply (those with a live advert); None means all of them.
    """
    order = sorted(nodes)
    routes = routes or {}
    sup = {r: [0.0] * N_TIERS for r in order}
    dem = {r: [0.0] * N_LEVELS for r in order}
    for r in order:
        for s in nodes[r].sources:
            sup[r][s.tier] += s.avail * s.eta
        for k in nodes[r].sinks:
            dem[r][k.level] += k.request / k.eta
    bp = {r: nodes[r].backplane for r in order}
    res = dict(link_cap)
    into: dict[str, list[Edge]] = defaultdict(list)
    for e in sorted(edges, key=lambda e: (e.v, e.u, e.link)):
        into[e.v].append(e)
    out = DispatchResult({r: [0.0] * N_TIERS for r in order}, {r: [0.0] * N_LEVELS for r in order},
                         defaultdict(list), defaultdict(list), defaultdict(float), defaultdict(float))
    elan = {r: nodes[r].elan for r in order}

    def may_serve(r: str, tier: int, level: int) -> bool:
        return tier != STORAGE or level <= nodes[r].tier1_max_level

    def lowest_deficit(r: str, tier: int, level: int) -> int | None:
        for l in range(level + 1):
            if dem[r][l] > EPS and l in tier_levels(tier):
                return l
        return None

    def find_path(x: str, tier: int, level: int, allowed: frozenset | None, origins: frozenset | None):
        parent: dict[str, Edge] = {}
        seen = {x}
        q = deque([x])
        while q:
            v = q.popleft()
            if (v != x and sup[v][tier] > EPS and may_serve(v, tier, level)
                    and (origins is None or elan[v] in origins)
                    and (visible is None or elan[v] != elan[x] or v in visible.get(x, ()))):
                path = []
                n = v
                while n != x:
                    e = parent[n]
                    path.append(e)
                    n = e.v
                return v, path
            for e in into.get(v, ()):
                u = e.u
                if u in seen or res[e.link] <= EPS or bp[u] <= EPS:
                    continue
                if allowed is not None and elan[u] not in allowed:
                    continue
                seen.add(u)
                parent[u] = e
                q.append(u)
        return None, []

    def transfer(y: str, path: list[Edge], tier: int, level: int) -> bool:
        # stop at the first node on the way that is short at this level or a more urgent one
        for k, e in enumerate(path):
            lvl = lowest_deficit(e.v, tier, level)
            if lvl is not None and bp[e.v] > EPS:
                path, sink, level = path[: k + 1], e.v, lvl
                break
        else:
            return False
        # largest bus power leaving y that every hop can carry
        b = min(sup[y][tier], bp[y])
        gain = 1.0
        for k, e in enumerate(path):
            b = min(b, res[e.link] / e.eta_u / gain if gain else b)
            gain *= e.factor
            b = min(b, bp[e.v] / gain)
        b = min(b, dem[sink][level] / gain)
        if b <= EPS:
            return False
        sup[y][tier] -= b
        out.drawn[y][tier] += b
        bus = b
        bp[y] -= b
        for e in path:
            sent = bus * e.eta_u
            arrived = sent * e.wire
            res[e.link] -= sent
            out.wire[e.link] += sent
            out.link_loss += sent - arrived
            out.exports[e.u].append((e.port_u, sent, level, e.grant_id))
            out.imports[e.v].append((e.port_v, arrived, tier, e.grant_id))
            bus = arrived * e.eta_v
            bp[e.v] -= bus
        dem[sink][level] -= bus
        out.served[sink][level] += bus
        out.od[(y, sink)] += bus
        return True

    dry: list[set] = [set() for _ in range(N_TIERS)]
    for tier in range(N_TIERS):
        if tier == STORAGE:
            # storage charged this tick does not discharge in the same tick
            for r in order:
                if out.served[r][STORAGE_LEVEL] > EPS:
                    charging = {k.port for k in nodes[r].sinks if k.level == STORAGE_LEVEL}
                    blocked = {s.port for s in nodes[r].sources if s.tier == STORAGE and s.port in charging}
                    if blocked:
                        out.blocked[r] = blocked
                        sup[r][STORAGE] -= sum(s.avail * s.eta for s in nodes[r].sources
                                               if s.tier == STORAGE and s.port in blocked)
                        sup[r][STORAGE] = max(sup[r][STORAGE], 0.0)
        if not any(sup[r][tier] > EPS for r in order):
            continue
        for level in tier_levels(tier):
            for r in order:
                if not may_serve(r, tier, level):
                    continue
                x = min(dem[r][level], sup[r][tier], bp[r])
                if x > EPS:
                    dem[r][level] -= x
                    sup[r][tier] -= x
                    bp[r] -= x
                    out.drawn[r][tier] += x
                    out.served[r][level] += x
                    out.od[(r, r)] += x
            if not sharing:
                continue
            for x in order:
                searches = [(frozenset({elan[x]}), frozenset({elan[x]}))]
                for origin, via in routes.get(elan[x], ()):
                    searches.append((via | {elan[x], origin}, frozenset({origin})))
                for allowed, origins in searches:
                    if (x, allowed, origins) in dry[tier]:
                        continue
                    for _ in range(4 * len(order) + 16):
                        if dem[x][level] <= EPS or bp[x] <= EPS:
                            break
                        y, path = find_path(x, tier, level, allowed, origins)
                        if y is None:
                            # supply and capacity only shrink, so later levels would fail too
                            dry[tier].add((x, allowed, origins))
                            break
                        if not transfer(y, path, tier, level):
                            break
                    if dem[x][level] <= EPS:
                        break
    out.imports = dict(out.imports)
    out.exports = dict(out.exports)
    out.od = dict(out.od)
    out.wire = dict(out.wire)
    return out


def split_draws(sources: list[Source], drawn_bus: list[float], blocked: set = frozenset()) -> list[float]:
    """Spread each tier's bus draw over its sources in port order; watts at each port."""
    left = list(drawn_bus)
    out = []
    for s in sources:
        if s.port in blocked and s.tier == STORAGE:
            out.append(0.0)
            continue
        bus = min(s.avail * s.eta, left[s.tier])
        if bus < 0:
            bus = 0.0
        left[s.tier] -= bus
        out.append(bus / s.eta)
    return out
