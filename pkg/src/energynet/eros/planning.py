"""Per-tick backplane planning and application for one router.

Power is tracked on the DC bus: a source injecting ``p`` at a port with
efficiency ``e`` puts ``p * e`` on the bus, and a sink delivering ``q``
draws ``q / e``. Sources are drawn in merit order; demand levels are served
strictly in order, pro-rata within a level.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Iterable, NamedTuple

from ..core import N_CLASSES, EnergyNetError
from .router import EnergyRouter, GrantState

# Demand levels at or above this are surplus sinks (storage charging, grid
# export); their unserved part is not load shedding.
SURPLUS_LEVEL = N_CLASSES
STORAGE_LEVEL = N_CLASSES
EXPORT_LEVEL = N_CLASSES + 1


class ConservationError(EnergyNetError):
    pass


class DeviceStepError(EnergyNetError):
    def __init__(self, port_id: str, grant_id: str | None, cause: Exception):
        super().__init__(f"port {port_id}: {cause}")
        self.port_id = port_id
        self.grant_id = grant_id
        self.cause = cause


class Flow(NamedTuple):
    grant_id: str | None
    src_port: str
    dst_port: str
    watts_delivered: float
    watts_injected: float


@dataclass
class FlowPlan:
    tick: int
    flows: list[Flow] = field(default_factory=list)
    shed: list[tuple[int, float]] = field(default_factory=list)
    drawn: list[float] = field(default_factory=list)  # injected watts per supply entry
    served: list[float] = field(default_factory=list)  # delivered watts per demand entry
    supply: list[tuple] = field(default_factory=list)
    demand: list[tuple] = field(default_factory=list)
    bus_throughput: float = 0.0

    def served_by_class(self) -> list[float]:
        out = [0.0] * N_CLASSES
        for (port, w, level, *_), s in zip(self.demand, self.served):
            if level < SURPLUS_LEVEL:
                out[level] += s
        return out

    def demand_by_class(self) -> list[float]:
        out = [0.0] * N_CLASSES
        for port, w, level, *_ in self.demand:
            if level < SURPLUS_LEVEL:
                out[level] += w
        return out


def priority_fill(budget, needs: list[tuple[int, object]], tol: float = 0.0) -> list:
    """Fraction of each ``(level, amount)`` need that ``budget`` covers.

    Levels are served in ascending order; the first level that cannot be
    fully covered is shared pro-rata and every later level gets nothing.
    Fractions come back in input order; exact for ``Fraction`` inputs.
    """
    zero = 0 * budget
    fracs = [zero] * len(needs)
    levels: dict[int, list[int]] = {}
    for j, (level, _) in enumerate(needs):
        levels.setdefault(level, []).append(j)
    for level in sorted(levels):
        idx = levels[level]
        needed = sum((needs[j][1] for j in idx), zero)
        if needed <= 0:
            for j in idx:
                fracs[j] = zero + 1
            continue
        if budget >= needed or needed - budget <= tol * max(needed, 1):
            for j in idx:
                fracs[j] = zero + 1
            budget = budget - needed if budget > needed else zero
        else:
            f = budget / needed
            for j in idx:
                fracs[j] = f
            budget = zero
    return fracs


def _grant_of(entry) -> str | None:
    return entry[3] if len(entry) > 3 else None


def _eff(r: EnergyRouter, port: str):
    return r.ports[port].efficiency


def plan_flows(r: EnergyRouter, supply: Iterable[tuple], demand: Iterable[tuple], tick: int = 0,
               tol: float = 1e-9) -> FlowPlan:
    """Allocate supply to demand through the backplane of ``r``.

    ``supply`` entries are ``(port, watts, merit[, grant_id])``: watts available
    at the port, drawn in ascending merit. ``demand`` entries are
    ``(port, watts, level[, grant_id])`` with ``level`` a priority class
    0..7 or one of the surplus levels. A level receives power only once every
    lower level is fully served; inside a level, power is shared in
    proportion to requested watts. ``tol`` absorbs float noise when deciding
    that a level is fully served; pass 0 for exact arithmetic.
    """
    supply = list(supply)
    demand = list(demand)
    plan = FlowPlan(tick, supply=supply, demand=demand)
    zero = 0 * sum((e[1] for e in supply), 0 * 1)  # keeps Fraction inputs exact
    order = sorted(range(len(supply)), key=lambda i: (supply[i][2], i))
    bus_avail = [supply[i][1] * _eff(r, supply[i][0]) for i in range(len(supply))]
    budget = sum(bus_avail, zero)
    if budget > r.backplane_limit:
        budget = r.backplane_limit

    bus_need = [(d[2], d[1] / _eff(r, d[0])) for d in demand]
    fracs = priority_fill(budget, bus_need, tol)
    served = [d[1] if f == 1 else d[1] * f for d, f in zip(demand, fracs)]
    levels: dict[int, list[int]] = {}
    for j, d in enumerate(demand):
        levels.setdefault(d[2], []).append(j)
    shed = []
    for level in sorted(levels):
        if level >= SURPLUS_LEVEL:
            continue
        unserved = sum((demand[j][1] - served[j] for j in levels[level]), zero)
        if unserved > 0:
            shed.append((level, unserved))
    plan.shed = sorted(shed)
    plan.served = served

    # pair sources and sinks in order on the bus
    drawn = [zero] * len(supply)
    flows = []
    pos = 0
    left = bus_avail[order[0]] if order else zero
    for level in sorted(levels):
        for j in levels[level]:
            want = served[j] / _eff(r, demand[j][0])
            while want > 0 and pos < len(order):
                i = order[pos]
                take = want if want <= left else left
                if take > 0:
                    drawn[i] += take / _eff(r, supply[i][0])
                    flows.append(_flow(r, supply[i], demand[j], take))
                want -= take
                left -= take
                if left <= 0:
                    pos += 1
                    left = bus_avail[order[pos]] if pos < len(order) else zero
    plan.drawn = drawn
    plan.flows = flows
    plan.bus_throughput = sum((f.watts_injected * _eff(r, f.src_port) for f in flows), zero)
    return plan


def _flow(r, s, d, bus):
    grant = _grant_of(d) if r.ports[d[0]].logic_side.is_boundary else None
    if grant is None:
        grant = _grant_of(s) if r.ports[s[0]].logic_side.is_boundary else _grant_of(d)
    return Flow(grant, s[0], d[0], bus * _eff(r, d[0]), bus / _eff(r, s[0]))


def check_router_balance(r: EnergyRouter, plan: FlowPlan, rel: float = 1e-9) -> None:
    """Bus balance: what sources put on the bus equals what sinks take off it."""
    bus_in = sum(w * _eff(r, s[0]) for s, w in zip(plan.supply, plan.drawn))
    bus_out = sum(w / _eff(r, d[0]) for d, w in zip(plan.demand, plan.served))
    scale = max(abs(bus_in), abs(bus_out), 1.0)
    if abs(bus_in - bus_out) > rel * scale:
        raise ConservationError(f"{r.router_id} tick {plan.tick}: bus in {bus_in!r} W != bus out {bus_out!r} W")


def port_totals(plan: FlowPlan) -> tuple[dict[str, float], dict[str, float]]:
    """(injected per source port, delivered per sink port)."""
    inj: dict[str, float] = {}
    dlv: dict[str, float] = {}
    for s, w in zip(plan.supply, plan.drawn):
        inj[s[0]] = inj.get(s[0], 0.0) + w
    for d, w in zip(plan.demand, plan.served):
        dlv[d[0]] = dlv.get(d[0], 0.0) + w
    return inj, dlv


def apply_flows(r: EnergyRouter, plan: FlowPlan, world: dict, step: Callable, tick_seconds: float) -> tuple[dict, dict]:
    """Step every device touched by ``plan`` and build the router's trace row.

    ``world`` maps port ids to device states; ``step(port, device, injected,
    delivered)`` returns the new device state or raises a device error, which
    is re-raised as :class:`DeviceStepError` naming the port's grant.
    """
    check_router_balance(r, plan)
    inj, dlv = port_totals(plan)
    grants = {}
    for e in plan.supply + plan.demand:
        if len(e) > 3 and e[3] is not None:
            grants.setdefault(e[0], e[3])
    new_world = dict(world)
    for port in sorted(set(inj) | set(dlv)):
        dev = world.get(port)
        if dev is None:
            continue
        try:
            new_world[port] = step(port, dev, inj.get(port, 0.0), dlv.get(port, 0.0))
        except EnergyNetError as exc:
            raise DeviceStepError(port, grants.get(port), exc) from exc
    row = {
        "router": r.router_id,
        "served": plan.served_by_class(),
        "demand": plan.demand_by_class(),
        "shed": [[c, w] for c, w in plan.shed],
        "flows": [[f.grant_id, f.src_port, f.dst_port, f.watts_delivered] for f in plan.flows],
        "bus_w": plan.bus_throughput,
    }
    return new_world, row


def fail_grant(r: EnergyRouter, grant_id: str | None) -> None:
    g = r.grant_table.get(grant_id) if grant_id else None
    if g is not None and g.state in (GrantState.PENDING, GrantState.LIVE):
        g.advance(GrantState.FAILED)


def plan_and_apply(r: EnergyRouter, supply: list, demand: list, world: dict, step: Callable,
                   tick: int, tick_seconds: float) -> tuple[FlowPlan, dict, dict]:
    """Plan, apply, and on a device error fail its grant and replan once without that port."""
    plan = plan_flows(r, supply, demand, tick)
    try:
        new_world, row = apply_flows(r, plan, world, step, tick_seconds)
    except DeviceStepError as exc:
        fail_grant(r, exc.grant_id)
        supply = [s for s in supply if s[0] != exc.port_id]
        demand = [d for d in demand if d[0] != exc.port_id]
        plan = plan_flows(r, supply, demand, tick)
        new_world, row = apply_flows(r, plan, world, step, tick_seconds)
        row["failed"] = [[exc.port_id, exc.grant_id, type(exc.cause).__name__]]
    return plan, new_world, row
