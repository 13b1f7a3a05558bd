"""Legacy radial feeder with binary service, for resilience comparison.

A load is served in full when every edge on its path to the root is up and
carries no more than its capacity, and the root source is available;
otherwise it is dark. There is no storage, no sharing and no partial
delivery.
"""

from __future__ import annotations

from collections import defaultdict

from ..core import N_CLASSES, EnergyNetError, SimTime
from ..devices import GridFeed, LoadUnit, load_request
from .metrics import compute_metrics
from .scenario import InvalidScenario, Scenario


class DemandMismatch(EnergyNetError):
    pass


def demand_schedule(sc: Scenario, device_ids, ticks: int) -> list[list[float]]:
    """Total watts per class per tick over the given load devices."""
    cfg = {d["id"]: d for d in sc.devices}
    units = [LoadUnit(i, tuple(tuple((c, float(w)) for c, w in row) for row in cfg[i]["demand"]))
             for i in sorted(device_ids) if cfg[i]["type"] == "load"]
    out = []
    for tick in range(ticks):
        row = [0.0] * N_CLASSES
        for u in units:
            for c, w in load_request(u, SimTime(tick, sc.tick_seconds)):
                row[c] += w
        out.append(row)
    return out


def check_same_demand(sc: Scenario, base: Scenario, ticks: int, rel: float = 1e-9) -> None:
    """The comparison is only meaningful when both sides face the same load schedule."""
    if base.baseline is None:
        raise InvalidScenario("baseline", "scenario has no baseline feeder")
    a = demand_schedule(sc, [d["id"] for d in sc.devices], ticks)
    b = demand_schedule(base, [i for ids in base.baseline.get("loads", {}).values() for i in ids], ticks)
    for tick, (ra, rb) in enumerate(zip(a, b)):
        for c in range(N_CLASSES):
            if abs(ra[c] - rb[c]) > rel * max(abs(ra[c]), abs(rb[c]), 1.0):
                raise DemandMismatch(f"tick {tick} class {c}: scenario demands {ra[c]:g} W, baseline {rb[c]:g} W")
    if abs(sc.tick_seconds - base.tick_seconds) > 0:
        raise DemandMismatch(f"tick length differs: {sc.tick_seconds:g} s vs {base.tick_seconds:g} s")


def baseline_failures(sc: Scenario) -> list[dict]:
    """The feeder's own scripted failures plus scenario outages of its source feed."""
    b = sc.baseline
    out = list(b.get("failures", []))
    src = b.get("source")
    for f in sc.failures:
        if f["kind"] == "GridOutage" and f["target"] == src:
            out.append(f)
    return sorted(out, key=lambda f: (f["tick"], f["kind"], f["target"]))


def _active(f: dict, tick: int) -> bool:
    d = f.get("duration")
    return f["tick"] <= tick and (d is None or tick < f["tick"] + d)


def baseline_loads(sc: Scenario) -> dict[str, list[LoadUnit]]:
    cfg = {d["id"]: d for d in sc.devices}
    out = {}
    for node, ids in sc.baseline.get("loads", {}).items():
        units = []
        for did in ids:
            d = cfg[did]
            if d["type"] != "load":
                raise InvalidScenario(f"baseline.loads.{node}", f"device {did!r} is not a load")
            units.append(LoadUnit(did, tuple(tuple((c, float(w)) for c, w in row) for row in d["demand"])))
        out[node] = units
    return out


def run_baseline(sc: Scenario, ticks: int | None = None) -> tuple[list[dict], dict]:
    """Evaluate binary radial service per tick; returns (trace rows, metrics)."""
    b = sc.baseline
    if b is None:
        raise InvalidScenario("baseline", "scenario has no baseline feeder")
    n = sc.ticks if ticks is None else ticks
    root = b["root"]
    edges = {e["child"]: e for e in b["edges"]}
    children = defaultdict(list)
    for e in b["edges"]:
        children[e["parent"]].append(e["child"])
    nodes = sorted({root} | set(edges))
    loads = baseline_loads(sc)
    src = b.get("source")
    feed = None
    if src is not None:
        d = next(d for d in sc.devices if d["id"] == src)
        feed = GridFeed(src, d["import_limit_w"], d["export_limit_w"], available=tuple(d["available"]))
    fails = baseline_failures(sc)

    trace = []
    for tick in range(n):
        t = SimTime(tick, sc.tick_seconds)
        cut = {f["target"] for f in fails if f["kind"] == "LinkCut" and _active(f, tick)}
        outage = any(f["kind"] == "GridOutage" and _active(f, tick) for f in fails)
        source_up = not outage and (feed is None or feed.is_available(tick))
        demand = {}
        for node in nodes:
            row = [0.0] * N_CLASSES
            for u in loads.get(node, ()):
                for c, w in load_request(u, t):
                    row[c] += w
            demand[node] = row

        subtree: dict[str, float] = {}

        def total(node: str) -> float:
            s = sum(demand[node]) + sum(total(c) for c in children[node])
            subtree[node] = s
            return s

        total(root)
        lit = set()
        stack = [root] if source_up else []
        while stack:
            node = stack.pop()
            lit.add(node)
            for c in children[node]:
                e = edges[c]
                if e["id"] not in cut and subtree[c] <= e["capacity_w"]:
                    stack.append(c)
        routers = {}
        served_total = 0.0
        for node in nodes:
            on = node in lit
            served = list(demand[node]) if on else [0.0] * N_CLASSES
            served_total += sum(served)
            routers[node] = {"dark": not on, "demand": demand[node], "served": served,
                             "shed": [[c, w] for c, w in enumerate(demand[node]) if w > 0 and not on]}
        trace.append({"tick": tick, "dt_s": sc.tick_seconds, "routers": routers, "grid_import_w": served_total,
                      "grid_export_w": 0.0, "generation_w": 0.0, "load_w": served_total, "loss_w": 0.0,
                      "denies": [], "messages": {}})
    return trace, compute_metrics(trace)
