"""Deterministic tick loop tying routers, protocol, markets and fleet management together.

Each tick runs in fixed phases: failure events; control plane (supervisors,
grant lifecycles, message delivery, negotiations, adverts, routes, markets,
rollouts); network dispatch and per-router backplane plans; device
stepping, conservation check, telemetry and the trace row.
"""

from __future__ import annotations

import logging
import random
from collections import defaultdict
from dataclasses import dataclass, field, replace
from typing import Any

from ..core import N_CLASSES, EnergyNetError, EnergyQuantum, PortSpec, Side, SimTime, mint_token
from ..devices import (
    BatteryUnit, DeviceError, EvUnit, GridFeed, LoadUnit, SolarUnit, battery_step, ev_offer, ev_step, load_request,
    max_charge, max_discharge, solar_output,
)
from ..enms import DEFAULT_SLA, Fleet, RolloutPlan, RouterProfile, check_sla, collect_telemetry, provision, rollout_step
from ..ep.adverts import ResourceAdvert, advertise_cycle
from ..ep.negotiation import (
    IllegalTransition, NegotiationSession, SessionState, Unsolicited, firewall_handshake, negotiate_step,
    open_request, respond,
)
from ..ep.routing import Policy, RouteAnnounce, RouteTable
from ..ep.wire import EPMessage, MsgType, canonical_dumps, encode
from ..eros.planning import EXPORT_LEVEL, STORAGE_LEVEL, ConservationError, plan_flows, port_totals
from ..eros.router import (
    AdmissionError, BothFailed, EnergyRouter, Grant, GrantState, admit_grant, firewall_gate, refresh_grants,
    supervisor_tick,
)
from ..market import (
    Bid, ElanReport, Ledger, PeeringPool, Side as BidSide, Trade, clear_auction, clear_peering, ewan_aggregate,
    route_feasible, settle,
)
from .bus import MessageBus
from .dispatch import GRID, RENEWABLE, STORAGE, Edge, NodeInput, Sink, Source, dispatch, split_draws
from .scenario import KWH, Scenario

log = logging.getLogger(__name__)

CONSERVATION_REL = 1e-9
SHED_TOL = 1e-9
MAX_PRICE = 1.0  # currency per kWh accepted for standing link and grid grants
GRID_PORT = "grid"


class UnknownTarget(EnergyNetError):
    pass


@dataclass(frozen=True)
class FailureEvent:
    tick: int
    kind: str
    target: str
    duration: int | None = None


@dataclass
class Channel:
    """A standing grant that a requester keeps renewed: one link direction or one grid feed direction."""

    key: str
    requester: str
    responder: str
    src: tuple[str, str]
    dst: tuple[str, str]
    power: float
    voltage: float
    kind: str
    covered_until: int = 0
    session: str | None = None
    attempt: int = 0
    backoff_until: int = 0


@dataclass
class Contract:
    trade: Trade
    grant: Grant | None
    sellers: frozenset
    buyers: frozenset


@dataclass
class TickRecord:
    row: dict
    telemetry: list = field(default_factory=list)


def local_by_class(plan, n_local: int) -> tuple[list[float], list[float]]:
    """Per-class (demand, served) of a router's own sinks; link exports are someone else's demand."""
    demand = [0.0] * N_CLASSES
    served = [0.0] * N_CLASSES
    for ent, w in zip(plan.demand[:n_local], plan.served[:n_local]):
        if ent[2] < N_CLASSES:
            demand[ent[2]] += ent[1]
            served[ent[2]] += w
    return demand, served


def _r(x: float) -> float:
    # trace values are rounded to a fixed grid so that byte-level diffs ignore float noise
    return round(x, 9)


class World:
    def __init__(self, sc: Scenario):
        self.sc = sc
        self.ts = sc.tick_seconds
        self.now = 0
        self.latency = 1
        self.rng = random.Random(sc.seed)
        proto = sc.protocol
        self.proto = proto
        rules = defaultdict(list)
        for rule in sc.inbound_rules:
            rules[rule["router"]].append(rule)
        self.routers: dict[str, EnergyRouter] = {}
        self.elan_of: dict[str, str] = {}
        self.prices: dict[str, tuple[float, float]] = {}
        for rc in sc.routers:
            rid = rc["id"]
            ports = {p["id"]: sc.ports[(rid, p["id"])] for p in rc["ports"]}
            bp = rc.get("backplane_limit_w")
            r = EnergyRouter(rid, ports, float("inf") if bp is None else bp, rc["role"], rc["elan"],
                             inbound_rules=rules.get(rid, []), heartbeat_threshold=proto["heartbeat_threshold"])
            self.routers[rid] = r
            self.elan_of[rid] = rc["elan"]
            self.prices[rid] = (rc.get("ask_price") if rc.get("ask_price") is not None else sc.market["ask_price"],
                                rc.get("bid_price") if rc.get("bid_price") is not None else sc.market["bid_price"])
        self.order = sorted(self.routers)
        self.elans = sorted(set(self.elan_of.values()))
        self.members = {e: [r for r in self.order if self.elan_of[r] == e] for e in self.elans}

        self.fleet = Fleet(self.routers)
        profiles = sc.enms.get("profiles")
        if profiles is None:
            profiles = [{"router": rid} for rid in self.order]
        for rid in self.order:
            self.routers[rid].provisioned = False
        role = {rc["id"]: rc["role"] for rc in sc.routers}
        for pr in profiles:
            provision(RouterProfile(pr["router"], role[pr["router"]], pr.get("config_version", 1),
                                    tuple(pr.get("software_version", (1, 0, 0)))), self.fleet)

        self._build_devices()
        self._build_links()
        self.bus = MessageBus(proto["duplicate_every"])
        self.sessions: dict[str, dict[str, NegotiationSession]] = defaultdict(dict)
        self.inbox: dict[str, list[tuple[int, bytes]]] = defaultdict(list)  # held while no supervisor is active
        self.arrived: int | None = None
        self.grid_tables: dict[str, dict[str, Grant]] = defaultdict(dict)
        self._build_channels()

        self.route_tables = {}
        for e in self.elans:
            pol = sc.elans[e].get("policy") or {}
            self.route_tables[e] = RouteTable(e, Policy(tuple(pol.get("objective", ("price", "hops"))),
                                                        pol.get("max_price"), pol.get("max_carbon")))
        self.route_heard: dict[str, dict[str, int]] = defaultdict(dict)
        self.adverts: dict[str, dict] = {rid: {} for rid in self.order}
        self.last_price: dict[str, float | None] = {e: None for e in self.elans}

        self.ledger = Ledger()
        self.contracts: list[Contract] = []
        self.window_start = 0
        self.od_window: dict[tuple[str, str], float] = defaultdict(float)

        self.rollouts = []
        for ro in sc.enms.get("rollouts", []):
            plan = RolloutPlan(tuple(ro["target_version"]), [list(c) for c in ro["cohorts"]],
                               ro.get("failure_threshold", 0.1))
            fails = {int(k): v for k, v in ro.get("failures", {}).items()}
            self.rollouts.append((ro, plan, fails))

        self.restores: list[tuple[int, FailureEvent]] = []
        self.events = sorted((FailureEvent(f["tick"], f["kind"], f["target"], f.get("duration")) for f in sc.failures),
                             key=lambda e: (e.tick, e.kind, e.target))
        self.grant_seen: dict[tuple[str, str], str] = {}
        self.deny_cursor = {rid: 0 for rid in self.order}
        self.excluded_devices: set[str] = set()
        self.telemetry: list[dict] = []
        self.records = []
        self.alarms = []
        self.tick_events: list = []

    # ---- construction -------------------------------------------------
    def _build_devices(self) -> None:
        sc = self.sc
        self.devices: dict[str, Any] = {}
        self.dev_cfg: dict[str, dict] = {}
        self.by_router: dict[str, list[str]] = defaultdict(list)
        for d in sc.devices:
            did, kind = d["id"], d["type"]
            if kind == "solar":
                u = SolarUnit(did, d["peak_w"], tuple(d["profile"]))
            elif kind == "battery":
                u = BatteryUnit(did, d["capacity_kwh"] * KWH, d["soc_kwh"] * KWH, d["p_charge_max_w"],
                                d["p_discharge_max_w"], d["eta_charge"], d["eta_discharge"])
            elif kind == "ev":
                u = EvUnit(did, d["capacity_kwh"] * KWH, d["soc_kwh"] * KWH, d["p_charge_max_w"], d["p_discharge_max_w"],
                           d["eta_charge"], d["eta_discharge"], tuple(d["plugged"]), d["v2g"],
                           d["depart_soc_min_kwh"] * KWH, d["depart_tick"], d["charge_class"])
            elif kind == "load":
                u = LoadUnit(did, tuple(tuple((c, float(w)) for c, w in row) for row in d["demand"]))
            else:
                u = GridFeed(did, d["import_limit_w"], d["export_limit_w"], d["price_import"], d["price_export"],
                             tuple(d["available"]))
            self.devices[did] = u
            self.dev_cfg[did] = d
            self.by_router[d["router"]].append(did)
        for rid in self.by_router:
            self.by_router[rid].sort()
        self.grids = sorted(did for did, d in self.dev_cfg.items() if d["type"] == "grid")
        self.storage = sorted(did for did, d in self.dev_cfg.items() if d["type"] in ("battery", "ev"))

    def _build_links(self) -> None:
        self.links = {l["id"]: l for l in self.sc.links}
        self.link_up = {lid: True for lid in self.links}
        self.peer_link = {pe["link"] for pe in self.sc.peerings}

    def grid_port_spec(self, did: str) -> PortSpec:
        d = self.dev_cfg[did]
        v = d["voltage"]
        return PortSpec(GRID_PORT, Side.B, v * 0.9, v * 1.1, max(d["import_limit_w"], d["export_limit_w"]), 1.0)

    def _build_channels(self) -> None:
        self.channels: dict[str, Channel] = {}
        for lid in sorted(self.links):
            l = self.links[lid]
            a, pa, b, pb = l["router_a"], l["port_a"], l["router_b"], l["port_b"]
            power = min(l["capacity_w"], self.sc.ports[(a, pa)].p_max, self.sc.ports[(b, pb)].p_max)
            for key, (u, pu, v, pv) in ((f"link:{lid}:ab", (a, pa, b, pb)), (f"link:{lid}:ba", (b, pb, a, pa))):
                # the importing side asks, the exporting side grants
                self.channels[key] = Channel(key, v, u, (u, pu), (v, pv), power, l["voltage"], "link")
        for did in self.grids:
            d = self.dev_cfg[did]
            r, p = d["router"], d["port"]
            principal = f"grid:{did}"
            pmax = self.sc.ports[(r, p)].p_max
            self.channels[f"grid:{did}:in"] = Channel(f"grid:{did}:in", r, principal, (principal, GRID_PORT), (r, p),
                                                      min(d["import_limit_w"], pmax), d["voltage"], "grid")
            if d["export_limit_w"] > 0:
                self.channels[f"grid:{did}:out"] = Channel(f"grid:{did}:out", r, principal, (r, p),
                                                           (principal, GRID_PORT), min(d["export_limit_w"], pmax),
                                                           d["voltage"], "grid")
        self.channel_by_session: dict[str, str] = {}

    def peer_ports(self, g: Grant) -> dict:
        out = {}
        for end in (g.src, g.dst):
            if end[0].startswith("grid:"):
                out[end] = self.grid_port_spec(end[0][5:])
            elif end in self.sc.ports:
                out[end] = self.sc.ports[end]
        return out

    # ---- failures -----------------------------------------------------
    def inject(self, e: FailureEvent) -> None:
        now = self.now
        end = None if e.duration is None else now + e.duration
        if e.kind in ("RouterDark", "SupervisorKill"):
            r = self.routers.get(e.target)
            if r is None:
                raise UnknownTarget(f"no router {e.target!r}")
            if e.kind == "RouterDark":
                r.kill_all()
                if end is not None:
                    self.restores.append((end, e))
            else:
                r.kill_active(restart_at=end)
        elif e.kind == "LinkCut":
            if e.target not in self.links:
                raise UnknownTarget(f"no link {e.target!r}")
            self.link_up[e.target] = False
            if end is not None:
                self.restores.append((end, e))
        elif e.kind == "GridOutage":
            g = self.devices.get(e.target)
            if not isinstance(g, GridFeed):
                raise UnknownTarget(f"no grid feed {e.target!r}")
            self.devices[e.target] = replace(g, outage=True)
            if end is not None:
                self.restores.append((end, e))
        elif e.kind == "MessageLossBurst":
            if e.target != "*" and e.target not in self.routers:
                raise UnknownTarget(f"no router {e.target!r}")
            self.bus.losses.append((now, end, e.target))
        else:
            raise UnknownTarget(f"unknown failure kind {e.kind!r}")
        self.tick_events.append({"event": e.kind, "target": e.target, "duration": e.duration})
        log.info("tick %d: %s on %s", now, e.kind, e.target)

    def _restore(self, e: FailureEvent) -> None:
        if e.kind == "RouterDark":
            self.routers[e.target].revive(self.now)
        elif e.kind == "LinkCut":
            self.link_up[e.target] = True
        elif e.kind == "GridOutage":
            self.devices[e.target] = replace(self.devices[e.target], outage=False)
        self.tick_events.append({"event": f"{e.kind}Cleared", "target": e.target, "duration": None})

    def _phase_failures(self) -> None:
        for end, e in sorted((x for x in self.restores if x[0] <= self.now), key=lambda x: (x[0], x[1].kind, x[1].target)):
            self._restore(e)
        self.restores = [x for x in self.restores if x[0] > self.now]
        while self.events and self.events[0].tick <= self.now:
            self.inject(self.events.pop(0))

    # ---- control plane ------------------------------------------------
    def control_up(self, rid: str) -> bool:
        r = self.routers[rid]
        return r.provisioned and not r.dark and r.active is not None

    def _send(self, draft: EPMessage, to: str) -> None:
        self.bus.send(draft, to, self.now, self.latency)

    def _deny(self, rid: str, reason: str, m: EPMessage | None) -> None:
        r = self.routers.get(rid)
        if r is None:
            return
        r.deny_log.append({"tick": self.now, "router": rid, "grant_id": None,
                           "src": [m.sender if m else "?", ""], "dst": [rid, ""], "watts": 0, "reason": reason})

    def _deliver(self) -> None:
        for rid in self.order:
            if self.inbox[rid] and self.control_up(rid):
                queued, self.inbox[rid] = self.inbox[rid], []
                for at, raw in queued:
                    self.arrived = at
                    self._handle(rid, raw)
                self.arrived = None
        for to, raw in self.bus.due(self.now):
            if to.startswith("grid:"):
                self._handle(to, raw)
                continue
            r = self.routers[to]
            if r.dark:
                self.bus.stats["dropped_dark"] += 1
                continue
            if r.active is None:
                self.inbox[to].append((self.now, raw))
                continue
            self._handle(to, raw)

    def _handle(self, to: str, raw: bytes) -> None:
        m, problem = self.bus.receive(to, raw)
        if problem is not None:
            if problem != "Duplicate":
                self._deny(to, problem, m)
            return
        if m.sender in self.routers and not self.fleet.is_provisioned(m.sender):
            self.fleet.dropped += 1
            return
        if to in self.routers and not self.routers[to].provisioned:
            self.fleet.dropped += 1
            return
        t = m.msg_type
        if t == MsgType.ADVERTISE:
            try:
                adv = ResourceAdvert.from_message(m.sender, m.tick, m.body)
            except (KeyError, TypeError, ValueError):
                return
            if adv.elan_id != self.elan_of.get(to):
                return
            self.adverts[to] = advertise_cycle({to: self.adverts[to]}, [adv], self.now)[to]
        elif t == MsgType.ROUTE_ANNOUNCE:
            self._on_routes(to, m)
        elif t == MsgType.REQUEST:
            self._on_request(to, m)
        elif t == MsgType.RELEASE:
            tables = self.grid_tables[to] if to.startswith("grid:") else self.routers[to].grant_table
            g = tables.get(m.body.get("grant_id"))
            if g is not None and g.state in (GrantState.PENDING, GrantState.LIVE):
                g.advance(GrantState.RELEASED)
        elif t in (MsgType.OFFER, MsgType.ACCEPT, MsgType.GRANT, MsgType.WITHDRAW):
            self._on_session(to, m)

    def _on_request(self, to: str, m: EPMessage) -> None:
        sid = m.body.get("session")
        if not isinstance(sid, str) or sid in self.sessions[to]:
            return
        try:
            if to.startswith("grid:"):
                s = NegotiationSession(sid, m.sender, to, to, state=SessionState.REQUESTED,
                                       deadline_tick=m.body["deadline"], terms={k: m.body[k] for k in (
                                           "src", "dst", "power_w", "duration", "start_tick", "voltage", "priority",
                                           "kind", "max_price")})
            else:
                src, dst = tuple(m.body["src"]), tuple(m.body["dst"])
                port = src[1] if src[0] == to else dst[1]
                s = firewall_handshake(self.routers[to], m, port, self.now, trusted=self.members[self.elan_of[to]],
                                       deadline=self.proto["negotiation_deadline"])
                s = replace(s, deadline_tick=m.body["deadline"], capacity_w=self.routers[to].ports[port].p_max)
        except Unsolicited:
            return
        except (KeyError, TypeError, ValueError) as exc:
            log.info("%s: unusable request %s: %s", to, sid, exc)
            return
        s, out = respond(s, self.now)
        self.sessions[to][sid] = s
        for d in out:
            self._send(d, s.requester)

    def _on_session(self, to: str, m: EPMessage) -> None:
        sid = m.body.get("session")
        s = self.sessions[to].get(sid)
        if s is None:
            return
        try:
            # a held message counts as received when it reached the router
            at = self.now if self.arrived is None else self.arrived
            s, out, g = negotiate_step(s, m, at)
        except IllegalTransition:
            return
        self.sessions[to][sid] = s
        peer = s.responder if s.me == s.requester else s.requester
        for d in out:
            self._send(d, peer)
        if g is not None:
            self._admit(to, g)
        if s.terminal:
            del self.sessions[to][sid]
            key = self.channel_by_session.pop(sid, None) if s.me == s.requester else None
            if key is not None:
                self.channels[key].session = None

    def _admit(self, to: str, g: Grant) -> None:
        if to.startswith("grid:"):
            self.grid_tables[to][g.grant_id] = g
            return
        r = self.routers[to]
        ch = self.channels.get(self.channel_by_session.get(g.grant_id[2:], ""))
        try:
            admit_grant(r, g, self.now, self.peer_ports(g))
        except AdmissionError as exc:
            self._deny(to, type(exc).__name__, None)
            log.info("%s: grant %s refused: %s", to, g.grant_id, exc)
            if ch is not None:
                ch.backoff_until = self.now + self.proto["grant_ticks"]
            return
        if ch is not None and ch.requester == to:
            ch.covered_until = max(ch.covered_until, g.end_tick)

    def _expire_sessions(self) -> None:
        for who in sorted(self.sessions):
            if who in self.routers and not self.control_up(who):
                continue  # mirrored state: the clock resumes once a supervisor takes over
            table = self.sessions[who]
            for sid in sorted(table):
                s = table[sid]
                if self.now > s.deadline_tick:
                    del table[sid]
                    if s.me == s.requester:
                        key = self.channel_by_session.pop(sid, None)
                        if key is not None:
                            self.channels[key].session = None

    def _renew(self) -> None:
        lead = self.proto["renew_lead"]
        for key in sorted(self.channels):
            ch = self.channels[key]
            if ch.session is not None or self.now < ch.backoff_until or not self.control_up(ch.requester):
                continue
            if self.now < ch.covered_until - lead:
                continue
            start = max(self.now, ch.covered_until)
            ch.attempt += 1
            sid = f"{key}@{start}#{ch.attempt}"
            terms = {"src": list(ch.src), "dst": list(ch.dst), "power_w": ch.power, "duration": self.proto["grant_ticks"],
                     "start_tick": start, "voltage": ch.voltage, "priority": 0, "kind": ch.kind, "max_price": MAX_PRICE}
            s = NegotiationSession(sid, ch.requester, ch.responder, ch.requester,
                                   deadline_tick=self.now + self.proto["negotiation_deadline"], terms=terms)
            s, draft = open_request(s, self.now)
            self.sessions[ch.requester][sid] = s
            self.channel_by_session[sid] = key
            ch.session = sid
            self._send(draft, ch.responder)

    # ---- adverts and routes ------------------------------------------
    def _advertise(self, snapshot: dict) -> None:
        ttl = self.proto["advert_ttl"]
        for rid in self.order:
            if not self.control_up(rid):
                continue
            e = self.elan_of[rid]
            surplus = snapshot.get(rid, 0.0)
            head = sum(max_charge(self.devices[d], self.ts) * self.ts for d in self.by_router.get(rid, ())
                       if d in self.storage)
            adv = ResourceAdvert(rid, e, (_r(surplus),) * N_CLASSES, _r(head), self.prices[rid][0], ttl, self.now)
            draft = EPMessage(MsgType.ADVERTISE, rid, 0, self.now, adv.to_body())
            self.bus.fanout(draft, [m for m in self.members[e] if m != rid], self.now, self.latency)
            self.adverts[rid][rid] = adv  # a router always knows its own position

    def _speakers(self):
        for pe in self.sc.peerings:
            l = self.links[pe["link"]]
            a, b = l["router_a"], l["router_b"]
            yield a, b
            yield b, a

    def _announce(self) -> None:
        for a, b in self._speakers():
            if not self.control_up(a):
                continue
            e = self.elan_of[a]
            ec = self.sc.elans[e]
            price = self.last_price[e] if self.last_price[e] is not None else self.sc.market["ask_price"]
            own = RouteAnnounce(e, (e,), price, 0, ec.get("carbon", 0.0), ec.get("resilience_class", 7))
            routes = [r.to_json() for r in self.route_tables[e].exports(own)]
            self._send(EPMessage(MsgType.ROUTE_ANNOUNCE, a, 0, self.now, {"routes": routes}), b)

    def _on_routes(self, to: str, m: EPMessage) -> None:
        e = self.elan_of[to]
        n = self.elan_of.get(m.sender)
        if n is None or n == e:
            return
        table = self.route_tables[e]
        table.withdraw_neighbour(n)
        for obj in m.body.get("routes", []):
            try:
                table.receive(n, RouteAnnounce.from_json(obj))
            except (KeyError, TypeError, ValueError):
                continue
        self.route_heard[e][n] = self.now

    def _expire_routes(self) -> None:
        ttl = self.proto["advert_ttl"]
        for e in self.elans:
            for n, heard in sorted(self.route_heard[e].items()):
                if self.now > heard + ttl:
                    self.route_tables[e].withdraw_neighbour(n)
                    del self.route_heard[e][n]

    def route_prefs(self) -> dict[str, list[tuple[str, frozenset]]]:
        out = {}
        for e in self.elans:
            t = self.route_tables[e]
            best = sorted(t.best_routes().values(), key=t.policy.rank_key)
            out[e] = [(r.origin_elan, frozenset(r.path)) for r in best]
        return out

    # ---- markets ------------------------------------------------------
    def _positions(self, rid: str) -> tuple[float, list[float]]:
        """(surplus watts, deficit watts per class) from local renewables versus local load."""
        t = SimTime(self.now, self.ts)
        solar = 0.0
        need = [0.0] * N_CLASSES
        for did in self.by_router.get(rid, ()):
            u = self.devices[did]
            if isinstance(u, SolarUnit):
                solar += solar_output(u, t)
            elif isinstance(u, LoadUnit):
                for c, w in load_request(u, t):
                    need[c] += w
        deficit = []
        for c in range(N_CLASSES):
            use = min(solar, need[c])
            solar -= use
            deficit.append(need[c] - use)
        return solar, deficit

    def _market(self) -> list[dict]:
        mk = self.sc.market
        interval = mk["interval_ticks"]
        window = (self.now, interval)
        out = []
        reports = []
        for e in self.elans:
            live = [r for r in self.members[e] if self.control_up(r)]
            if not any(self.routers[r].role == "aggregation" for r in live):
                continue
            pos = {r: self._positions(r) for r in live}
            surplus = {r: pos[r][0] for r in live}
            deficit = {r: list(pos[r][1]) for r in live}
            trades: list[Trade] = []
            for pool in mk["peering_pools"]:
                if pool["elan"] != e:
                    continue
                mem = [m for m in pool["members"] if m in pos]
                pp = PeeringPool(e, frozenset(mem))
                reqs = [(m, deficit[m][c], c) for m in mem for c in range(N_CLASSES)]
                got = clear_peering(pp, [(m, surplus[m]) for m in mem], reqs, window)
                for tr in got:
                    surplus[tr.seller] -= tr.quantity
                    left = tr.quantity
                    for c in range(N_CLASSES):
                        take = min(left, deficit[tr.buyer][c])
                        deficit[tr.buyer][c] -= take
                        left -= take
                trades += got
            bids = []
            for r in live:
                if surplus[r] > 1e-9:
                    bids.append(Bid(r, BidSide.SELL, surplus[r], self.prices[r][0]))
                for c in range(N_CLASSES):
                    if deficit[r][c] > 1e-9:
                        bids.append(Bid(r, BidSide.BUY, deficit[r][c], self.prices[r][1], priority=c))
            got, price = clear_auction(bids, window)
            trades += got
            if price is not None:
                self.last_price[e] = price
            sold = sum(t.quantity for t in got)
            asks = sum(b.quantity for b in bids if b.side == BidSide.SELL)
            buys = sum(b.quantity for b in bids if b.side == BidSide.BUY)
            reports.append(ElanReport(e, max(asks - sold, 0.0), max(buys - sold, 0.0), price, mk["ask_price"],
                                      mk["scarcity_price"]))
            out.append({"elan": e, "price": price, "trades": len(trades), "volume_w": _r(sum(t.quantity for t in trades))})
            for tr in trades:
                self._contract(tr, frozenset({tr.seller}), frozenset({tr.buyer}))
        if len(reports) > 1 and self.sc.peerings:
            prefs = self.route_prefs()
            reach = {e: {o for o, _ in prefs.get(e, ())} for e in self.elans}
            got, price = clear_auction(ewan_aggregate(reports, mk["wheeling_margin"]), window, route_feasible(reach))
            for tr in got:
                self._contract(tr, frozenset(self.members[tr.seller[5:]]), frozenset(self.members[tr.buyer[5:]]))
            out.append({"elan": "*", "price": price, "trades": len(got), "volume_w": _r(sum(t.quantity for t in got))})
        return out

    def _contract(self, tr: Trade, sellers: frozenset, buyers: frozenset) -> None:
        """Negotiate the commercial grant behind a trade; the exchange runs within the clearing tick."""
        sid = f"trade:{self.now}:{len(self.contracts)}"
        terms = {"src": [tr.seller, "trade"], "dst": [tr.buyer, "trade"], "power_w": tr.quantity,
                 "duration": tr.interval[1], "start_tick": tr.interval[0], "voltage": 0, "priority": 7,
                 "kind": "trade", "max_price": tr.price}
        req = NegotiationSession(sid, tr.buyer, tr.seller, tr.buyer, deadline_tick=self.now, terms=terms)
        rsp = NegotiationSession(sid, tr.buyer, tr.seller, tr.seller, ask_price=tr.price, deadline_tick=self.now)
        req, m1 = open_request(req, self.now)
        rsp, out = negotiate_step(rsp, m1, self.now)[:2]
        req, out, _ = negotiate_step(req, out[0], self.now)
        grant = None
        if out and out[0].msg_type == MsgType.ACCEPT:
            rsp, out, grant = negotiate_step(rsp, out[0], self.now)
            if grant is not None:
                req, _, grant = negotiate_step(req, out[0], self.now)
        self.contracts.append(Contract(tr, grant, sellers, buyers))

    def _settle(self) -> list[dict]:
        """Book the closing window's trades in proportion to energy actually moved between the parties."""
        done = [c for c in self.contracts if c.trade.interval[0] + c.trade.interval[1] <= self.now]
        if not done:
            return []
        self.contracts = [c for c in self.contracts if c not in done]
        left = dict(self.od_window)
        trades, frac = [], {}
        out = []
        for c in done:
            if c.grant is None:
                out.append({"void": True, **c.trade.to_json()})
                continue
            span = c.trade.interval[1]
            want = c.trade.quantity * span
            got = 0.0
            for (s, b), w in sorted(left.items()):
                if s in c.sellers and b in c.buyers and s != b and w > 0:
                    take = min(w, want - got)
                    left[(s, b)] = w - take
                    got += take
                    if got >= want:
                        break
            frac[len(trades)] = got / want if want > 0 else 1.0
            trades.append(c.trade)
        n0 = len(self.ledger.entries)
        settle(trades, self.ledger, self.ts, frac)
        out += self.ledger.entries[n0:]
        return out

    # ---- data plane ---------------------------------------------------
    def _live_index(self) -> dict:
        """(router, src, dst) -> ids of grants Live now, for routers that are up."""
        idx = defaultdict(set)
        for rid in self.order:
            r = self.routers[rid]
            if r.dark:
                continue
            for gid, g in r.grant_table.items():
                if g.state == GrantState.LIVE and g.covers(self.now):
                    idx[(rid, g.src, g.dst)].add(gid)
        return idx

    def _usable(self, ch: Channel, idx: dict) -> str | None:
        """Id of a Live grant for this channel held by both routed endpoints, if any."""
        common = None
        for end in (ch.src, ch.dst):
            if end[0] not in self.routers:
                continue
            ids = idx.get((end[0], ch.src, ch.dst), set())
            common = ids if common is None else common & ids
        return max(common) if common else None

    def _islanded(self) -> dict[str, bool]:
        has = defaultdict(bool)
        up = defaultdict(bool)
        for did in self.grids:
            e = self.elan_of[self.dev_cfg[did]["router"]]
            has[e] = True
            if self.devices[did].is_available(self.now):
                up[e] = True
        return {e: has[e] and not up[e] for e in self.elans}

    def _inputs(self, t: SimTime):
        disp = self.sc.dispatch
        storage_on = disp["storage"]
        island = self._islanded()
        nodes: dict[str, NodeInput] = {}
        idx = self._live_index()
        grants: dict[tuple[str, str], str | None] = {}
        dark_rows = {}
        for rid in self.order:
            r = self.routers[rid]
            if r.dark:
                demand = [0.0] * N_CLASSES
                for did in self.by_router.get(rid, ()):
                    u = self.devices[did]
                    if isinstance(u, LoadUnit):
                        for c, w in load_request(u, t):
                            demand[c] += w
                dark_rows[rid] = demand
                continue
            e = self.elan_of[rid]
            node = NodeInput(e, r.backplane_limit,
                             tier1_max_level=disp["storage_reserve_class"] if island[e] else N_CLASSES - 1)
            for did in self.by_router.get(rid, ()):
                if did in self.excluded_devices:
                    continue
                cfg = self.dev_cfg[did]
                port = cfg["port"]
                eta = r.ports[port].efficiency
                u = self.devices[did]
                if isinstance(u, SolarUnit):
                    node.sources.append(Source(port, RENEWABLE, solar_output(u, t), eta))
                elif isinstance(u, LoadUnit):
                    for c, w in load_request(u, t):
                        node.sinks.append(Sink(port, c, w, eta))
                elif isinstance(u, EvUnit):
                    charge, v2g = ev_offer(u, t.tick, self.ts)
                    if charge > 0:
                        node.sinks.append(Sink(port, u.charge_class, charge, eta))
                    if v2g > 0 and storage_on:
                        node.sources.append(Source(port, STORAGE, v2g, eta))
                elif isinstance(u, BatteryUnit):
                    if not storage_on:
                        continue
                    if cfg["mode"] == "shave" or island[e]:
                        dis = max_discharge(u, self.ts)
                        if dis > 0:
                            node.sources.append(Source(port, STORAGE, dis, eta))
                    chg = max_charge(u, self.ts)
                    if chg > 0:
                        node.sinks.append(Sink(port, STORAGE_LEVEL, chg, eta))
                elif isinstance(u, GridFeed):
                    imp, exp = u.limits(t.tick)
                    gin = self._usable(self.channels[f"grid:{did}:in"], idx)
                    if imp > 0 and gin is not None:
                        node.sources.append(Source(port, GRID, min(imp, self.channels[f"grid:{did}:in"].power), eta))
                        grants[(rid, port, "in")] = gin
                    out_ch = self.channels.get(f"grid:{did}:out")
                    gout = self._usable(out_ch, idx) if out_ch is not None else None
                    if exp > 0 and gout is not None:
                        node.sinks.append(Sink(port, EXPORT_LEVEL, min(exp, out_ch.power), eta))
                        grants[(rid, port, "out")] = gout
            nodes[rid] = node
        edges = []
        cap = {}
        for lid in sorted(self.links):
            if not self.link_up[lid]:
                continue
            l = self.links[lid]
            for key in (f"link:{lid}:ab", f"link:{lid}:ba"):
                ch = self.channels[key]
                (u, pu), (v, pv) = ch.src, ch.dst
                if u not in nodes or v not in nodes:
                    continue
                gid = self._usable(ch, idx)
                if gid is None:
                    continue
                edges.append(Edge(u, v, lid, pu, pv, self.routers[u].ports[pu].efficiency,
                                  self.routers[v].ports[pv].efficiency, 1.0 - l["loss"], gid))
                cap[lid] = ch.power
        return nodes, edges, cap, grants, dark_rows

    def _plan(self, t: SimTime):
        nodes, edges, cap, grants, dark_rows = self._inputs(t)
        sharing = self.sc.dispatch["sharing"]
        prefs = self.route_prefs()
        visible = {rid: {a for a, adv in self.adverts[rid].items() if adv.alive(self.now)} for rid in nodes}
        for attempt in range(len(edges) + 2):
            res = dispatch(nodes, edges, cap, prefs, sharing, visible)
            plans = {}
            for rid, node in nodes.items():
                plans[rid] = self._router_plan(rid, node, res, grants)
            denied = self._gate(plans, edges)
            if not denied:
                return nodes, res, plans, dark_rows
            edges = [e for e in edges if (e.u, e.v, e.link) not in denied]
        raise ConservationError("firewall replanning did not converge")

    def _router_plan(self, rid: str, node: NodeInput, res, grants):
        r = self.routers[rid]
        drawn = split_draws(node.sources, res.drawn[rid], res.blocked.get(rid, set()))
        supply = []
        for s, w in zip(node.sources, drawn):
            if w > 0:
                gid = grants.get((rid, s.port, "in")) if s.tier == GRID else None
                supply.append((s.port, w, s.tier, gid))
        for port, w, tier, gid in res.imports.get(rid, ()):
            supply.append((port, w, tier, gid))
        demand = []
        for k in node.sinks:
            gid = grants.get((rid, k.port, "out")) if k.level == EXPORT_LEVEL else None
            demand.append((k.port, k.request, k.level, gid))
        exports = res.exports.get(rid, [])
        for port, w, level, gid in exports:
            demand.append((port, w, level, gid))
        plan = plan_flows(r, supply, demand, self.now)
        n_local = len(node.sinks)
        for (port, w, level, gid), got in zip(exports, plan.served[n_local:]):
            if abs(got - w) > 1e-6 * max(w, 1.0):
                raise ConservationError(f"tick {self.now}: {rid} plan serves {got!r} W on export {port}, dispatch {w!r} W")
        return plan

    def _gate(self, plans, edges) -> set:
        by_port = {}
        for e in edges:
            by_port[(e.u, e.port_u, "out", e.grant_id)] = e
            by_port[(e.v, e.port_v, "in", e.grant_id)] = e
        denied = set()
        for rid in sorted(plans):
            r = self.routers[rid]
            plan = plans[rid]
            for entries, amounts, way in ((plan.supply, plan.drawn, "in"), (plan.demand, plan.served, "out")):
                crossing: dict[tuple, float] = defaultdict(float)
                for ent, w in zip(entries, amounts):
                    if w > 0 and r.ports[ent[0]].logic_side.is_boundary:
                        crossing[(ent[0], ent[3])] += w
                for (port, gid), w in sorted(crossing.items(), key=lambda kv: (kv[0][0], kv[0][1] or "")):
                    g = r.grant_table.get(gid) if gid else None
                    flow = ((g.src, g.dst, w, gid) if g is not None else
                            ((rid, port), (rid, port), w, gid))
                    if not firewall_gate(r, flow, self.now).allowed:
                        e = by_port.get((rid, port, way, gid))
                        if e is not None:
                            denied.add((e.u, e.v, e.link))
                        else:
                            raise ConservationError(f"tick {self.now}: unguarded crossing at {rid}/{port}")
        return denied

    # ---- device stepping and accounting -------------------------------
    def _step_devices(self, plans, t: SimTime):
        new = {}
        failures = []
        leak = self.sc.fault == "conservation_leak"
        for rid in sorted(plans):
            inj, dlv = port_totals(plans[rid])
            for did in self.by_router.get(rid, ()):
                port = self.dev_cfg[did]["port"]
                u = self.devices[did]
                net = dlv.get(port, 0.0) - inj.get(port, 0.0)
                try:
                    if isinstance(u, BatteryUnit):
                        new[did] = battery_step(u, net * (0.5 if leak and net > 0 else 1.0), t)
                    elif isinstance(u, EvUnit):
                        new[did] = ev_step(u, net, t)
                except DeviceError as exc:
                    failures.append((rid, did, exc))
        return new, failures

    def _conservation(self, plans, res, old: dict) -> dict:
        gen = grid_in = grid_out = loads = port_loss = store_loss = dstore = 0.0
        for rid in sorted(plans):
            r = self.routers[rid]
            plan = plans[rid]
            for ent, w in zip(plan.supply, plan.drawn):
                port_loss += w * (1 - r.ports[ent[0]].efficiency)
            for ent, w in zip(plan.demand, plan.served):
                port_loss += w * (1 / r.ports[ent[0]].efficiency - 1)
            inj, dlv = port_totals(plan)
            for did in self.by_router.get(rid, ()):
                port = self.dev_cfg[did]["port"]
                u = self.devices[did]
                if isinstance(u, SolarUnit):
                    gen += inj.get(port, 0.0)
                elif isinstance(u, LoadUnit):
                    loads += dlv.get(port, 0.0)
                elif isinstance(u, GridFeed):
                    grid_in += inj.get(port, 0.0)
                    grid_out += dlv.get(port, 0.0)
                elif did in old:
                    net = dlv.get(port, 0.0) - inj.get(port, 0.0)
                    store_loss += net * (1 - u.eta_charge) if net > 0 else -net * (1 / u.eta_discharge - 1)
                    dstore += (u.soc - old[did].soc) / self.ts
        link_loss = sum(res.wire.get(lid, 0.0) * self.links[lid]["loss"] for lid in sorted(res.wire))
        residual = gen + grid_in - grid_out - loads - dstore - port_loss - store_loss - link_loss
        scale = max(gen + grid_in, grid_out + loads + abs(dstore), 1.0)
        if abs(residual) > CONSERVATION_REL * scale:
            raise ConservationError(f"tick {self.now}: energy balance off by {residual!r} W (scale {scale!r} W)")
        return {"generation_w": _r(gen), "grid_import_w": _r(grid_in), "grid_export_w": _r(grid_out),
                "load_w": _r(loads), "storage_delta_w": _r(dstore), "loss_w": _r(port_loss + store_loss + link_loss),
                "link_loss_w": _r(link_loss), "residual_w": residual}

    # ---- tick ---------------------------------------------------------
    def _control(self, t: SimTime) -> tuple[list, list]:
        for rid in self.order:
            r = self.routers[rid]
            if r.dark:
                continue
            try:
                supervisor_tick(r, self.now)
            except BothFailed:
                pass
            refresh_grants(r, self.now)
        for g_tables in self.grid_tables.values():
            for g in g_tables.values():
                if g.state == GrantState.PENDING and g.start_tick <= self.now < g.end_tick:
                    g.advance(GrantState.LIVE)
                elif g.state == GrantState.LIVE and self.now >= g.end_tick:
                    g.advance(GrantState.COMPLETED)
        self._deliver()
        self._expire_sessions()
        self._renew()
        self._forge()
        interval = self.proto["advert_interval"]
        self._expire_routes()
        if self.now % interval == 0:
            snap = {rid: self._positions(rid)[0] for rid in self.order}
            self._advertise(snap)
            self._announce()
        market, settlements = [], []
        mk = self.sc.market
        if mk["enabled"] and self.now % mk["interval_ticks"] == 0:
            settlements = self._settle()
            self.od_window = defaultdict(float)
            market = self._market()
        self._rollouts()
        return market, settlements

    def _forge(self) -> None:
        k = self.proto["forge_every"]
        up = [rid for rid in self.order if self.control_up(rid)]
        if not k or self.now == 0 or self.now % k or not up:
            return
        target = self.rng.choice(up)
        sender = self.rng.choice(self.order)
        fake = Grant(f"forged:{self.now}", (sender, "x"), (target, "x"), EnergyQuantum(1e6, 1, 400), self.now)
        fake.src_token = mint_token("mallory", self.rng.randrange(2**32), fake.digest())
        fake.dst_token = fake.src_token
        body = {"session": f"forged:{self.now}", "grant": fake.to_json()}
        m = EPMessage(MsgType.GRANT, sender, 10**9 + self.now, self.now, body)
        m = replace(m, token=mint_token("mallory", self.now, m.digest()))
        self.bus.inject(encode(m), target, self.now + 1)

    def _rollouts(self) -> None:
        for ro, plan, fails in self.rollouts:
            if plan.finished or self.now < ro["start_tick"]:
                continue
            if (self.now - ro["start_tick"]) % ro["cohort_ticks"]:
                continue
            rt = self.proto["restart_ticks"]
            rollout_step(plan, self.fleet, fails, restart=lambda rid: self.routers[rid].kill_active(self.now + rt))
            self.tick_events.append({"event": "Rollout", "target": ".".join(map(str, plan.target_version)),
                                     "duration": None, "states": [s.value for s in plan.states],
                                     "outcome": plan.outcome})

    def _grant_events(self) -> list:
        out = []
        for rid in self.order:
            table = self.routers[rid].grant_table
            for gid in sorted(table):
                g = table[gid]
                key = (rid, gid)
                if self.grant_seen.get(key) != g.state.value:
                    self.grant_seen[key] = g.state.value
                    out.append([rid, gid, g.state.value, g.start_tick, g.end_tick])
            for gid in [gid for gid, g in table.items()
                        if g.state in (GrantState.COMPLETED, GrantState.RELEASED, GrantState.FAILED)]:
                del table[gid]
                self.grant_seen.pop((rid, gid), None)
        return out

    def step(self) -> dict:
        t = SimTime(self.now, self.ts)
        self.tick_events = []
        stats0 = dict(self.bus.stats)
        self._phase_failures()
        market, settlements = self._control(t)

        for attempt in range(len(self.devices) + 1):
            nodes, res, plans, dark_rows = self._plan(t)
            new, failed = self._step_devices(plans, t)
            if not failed:
                break
            for rid, did, exc in failed:
                log.warning("tick %d: %s on %s failed: %s; replanning without it", self.now, did, rid, exc)
                self.excluded_devices.add(did)
                self.tick_events.append({"event": "DeviceFault", "target": did, "duration": None,
                                         "error": type(exc).__name__})
        else:
            raise ConservationError("device fault replanning did not converge")
        self.excluded_devices.clear()
        old = {did: self.devices[did] for did in new}
        self.devices.update(new)
        acct = self._conservation(plans, res, old)
        for (s, b), w in res.od.items():
            self.od_window[(s, b)] += w

        routers = {}
        for rid in self.order:
            r = self.routers[rid]
            sup = [s.state.value for s in r.supervisors]
            if rid in dark_rows:
                demand = dark_rows[rid]
                routers[rid] = {"dark": True, "demand": [_r(x) for x in demand], "served": [0.0] * N_CLASSES,
                                "shed": [[c, _r(w)] for c, w in enumerate(demand) if w > 0], "flows": [],
                                "crossings": [], "sup": sup}
                continue
            plan = plans[rid]
            demand, served = local_by_class(plan, len(nodes[rid].sinks))
            crossings = []
            for ent, w in zip(plan.supply, plan.drawn):
                if w > 0 and r.ports[ent[0]].logic_side.is_boundary:
                    crossings.append([ent[0], _r(w), ent[3]])
            for ent, w in zip(plan.demand, plan.served):
                if w > 0 and r.ports[ent[0]].logic_side.is_boundary:
                    crossings.append([ent[0], _r(-w), ent[3]])
            routers[rid] = {
                "dark": False, "demand": [_r(x) for x in demand], "served": [_r(x) for x in served],
                "shed": [[c, _r(d - v)] for c, (d, v) in enumerate(zip(demand, served)) if d - v > SHED_TOL * max(d, 1.0)],
                "flows": [[f.grant_id, f"{rid}/{f.src_port}", f"{rid}/{f.dst_port}", _r(f.watts_delivered)]
                          for f in plan.flows],
                "crossings": crossings, "sup": sup,
            }
        denies = []
        for rid in self.order:
            log_ = self.routers[rid].deny_log
            denies += log_[self.deny_cursor[rid]:]
            self.deny_cursor[rid] = len(log_)
        stats = {k: v - stats0.get(k, 0) for k, v in self.bus.stats.items() if v - stats0.get(k, 0)}
        row = {
            "tick": self.now, "dt_s": self.ts, "routers": routers,
            "soc_j": {did: _r(self.devices[did].soc) for did in self.storage},
            "messages": stats, "unprovisioned_dropped": self.fleet.dropped,
            "grant_events": self._grant_events(), "denies": denies, "market": market, "settlements": settlements,
            "events": self.tick_events,
            "versions": {rid: ".".join(map(str, self.routers[rid].software_version)) for rid in self.order},
            "ev_shortfall_j": {did: _r(self.devices[did].departure_shortfall) for did in self.storage
                               if isinstance(self.devices[did], EvUnit)},
        }
        acct.pop("residual_w")
        row.update(acct)
        self._telemetry(routers, t)
        self.now += 1
        return row

    def _telemetry(self, routers: dict, t: SimTime) -> None:
        if self.now % self.sc.enms.get("telemetry_interval", 1):
            return
        rows = {}
        for rid, row in routers.items():
            if row["dark"]:
                continue
            soc = sum(self.devices[d].soc for d in self.by_router.get(rid, ()) if d in self.storage)
            denies = sum(1 for d in self.routers[rid].deny_log if d["tick"] == self.now)
            rows[rid] = {"served": row["served"], "demand": row["demand"], "soc_j": _r(soc), "denies": denies}
        records, alarms = collect_telemetry(self.fleet, self.now, rows)
        self.records += records
        self.alarms += alarms
        self.telemetry += [r.to_json() for r in records] + alarms

    def bootstrap(self) -> None:
        """Negotiate standing grants, adverts and routes before the first tick, without latency."""
        self.latency = 0
        snap = {rid: self._positions(rid)[0] for rid in self.order}
        for _ in range(max(4, len(self.elans) + 2)):
            self._renew()
            self._advertise(snap)
            self._announce()
            for _ in range(8):
                if not self.bus.pending():
                    break
                self._deliver()
                self._expire_sessions()
        for rid in self.order:
            refresh_grants(self.routers[rid], 0)
        self.bus.stats.clear()
        self.latency = 1

    def finish(self) -> list[dict]:
        policies = self.sc.enms.get("sla") or list(DEFAULT_SLA)
        return check_sla(policies, self.records, self.alarms)


@dataclass
class RunResult:
    trace: list[dict]
    metrics: dict
    ledger: dict
    telemetry: list[dict]
    world: World


def run(sc: Scenario, ticks: int | None = None, seed: int | None = None, observe=None) -> RunResult:
    """Run a validated scenario; ``observe(world)`` is called after every tick."""
    from .metrics import compute_metrics

    if seed is not None:
        sc = replace(sc, seed=seed)
    w = World(sc)
    n = sc.ticks if ticks is None else ticks
    w.bootstrap()
    trace = []
    for _ in range(n):
        trace.append(w.step())
        if observe is not None:
            observe(w)
    violations = w.finish()
    telemetry = w.telemetry + violations
    return RunResult(trace, compute_metrics(trace), w.ledger.to_json(), telemetry, w)


def inject(world: World, e: FailureEvent) -> World:
    world.inject(e)
    return world


def trace_bytes(trace: list[dict]) -> bytes:
    return b"".join(canonical_dumps(row) for row in trace)
