"""Scenario files: parsing, defaults and validation with JSON-path diagnostics."""

from __future__ import annotations

import copy
import json
import math
from dataclasses import dataclass, field
from typing import Any

from ..core import N_CLASSES, ConfigError, EnergyNetError, PortSpec, Side
from ..enms import ROLES

KWH = 3.6e6
DEVICE_TYPES = ("solar", "battery", "ev", "load", "grid")
FAILURE_KINDS = ("RouterDark", "SupervisorKill", "LinkCut", "GridOutage", "MessageLossBurst")
DEVICE_SIDES = {"solar": "D", "battery": "D", "ev": "AD", "load": "A", "grid": "B"}

PROTOCOL_DEFAULTS = {
    "grant_ticks": 60, "renew_lead": 12, "negotiation_deadline": 5, "advert_interval": 5, "advert_ttl": 15,
    "heartbeat_threshold": 3, "restart_ticks": 2, "duplicate_every": 0, "forge_every": 0,
}
HANDSHAKE_TICKS = 4
DISPATCH_DEFAULTS = {"sharing": True, "storage": True, "storage_reserve_class": 1}
MARKET_DEFAULTS = {"enabled": True, "interval_ticks": 15, "wheeling_margin": 0.02, "ask_price": 0.08,
                   "bid_price": 0.30, "scarcity_price": 0.40, "peering_pools": []}


class InvalidScenario(EnergyNetError):
    def __init__(self, path: str, message: str):
        super().__init__(f"{path}: {message}" if path else message)
        self.path = path
        self.message = message


@dataclass
class Scenario:
    raw: dict
    name: str
    seed: int
    ticks: int
    tick_seconds: float
    fault: str | None
    routers: list[dict]
    links: list[dict]
    elans: dict[str, dict]
    peerings: list[dict]
    devices: list[dict]
    market: dict
    dispatch: dict
    protocol: dict
    enms: dict
    failures: list[dict]
    baseline: dict | None
    inbound_rules: list[dict]
    ports: dict[tuple[str, str], PortSpec] = field(default_factory=dict)

    def router_ids(self) -> list[str]:
        return [r["id"] for r in self.routers]


def _fail(path, msg):
    raise InvalidScenario(path, msg)


def _get(obj: dict, key: str, path: str, kind, default: Any = ..., check=None):
    sub = f"{path}.{key}" if path else key
    if key not in obj or obj[key] is None and default is not ...:
        if default is ...:
            _fail(sub, "required field is missing")
        obj[key] = default
        return default
    v = obj[key]
    if kind is float:
        if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
            _fail(sub, f"expected a number, got {json.dumps(v)}")
    elif kind is int:
        if isinstance(v, bool) or not isinstance(v, int):
            _fail(sub, f"expected an integer, got {json.dumps(v)}")
    elif kind is bool:
        if not isinstance(v, bool):
            _fail(sub, f"expected true or false, got {json.dumps(v)}")
    elif kind is not None and not isinstance(v, kind):
        _fail(sub, f"expected {_kind_name(kind)}, got {json.dumps(v)[:40]}")
    if check is not None:
        err = check(v)
        if err:
            _fail(sub, err)
    return v


def _kind_name(kind) -> str:
    return {str: "a string", list: "a list", dict: "an object"}.get(kind, getattr(kind, "__name__", str(kind)))


def _nonneg(v):
    return None if v >= 0 else "must be non-negative"


def _pos(v):
    return None if v > 0 else "must be positive"


def _unit(v):
    return None if 0 < v <= 1 else "must lie in (0, 1]"


def _frac(v):
    return None if 0 <= v < 1 else "must lie in [0, 1)"


def _cls(v):
    return None if 0 <= v < N_CLASSES else f"must be a priority class 0..{N_CLASSES - 1}"


def _ident(v):
    return None if v and "/" not in v else "identifiers must be non-empty and contain no '/'"


def parse_text(text: str) -> Scenario:
    try:
        obj = json.loads(text)
    except json.JSONDecodeError as exc:
        raise InvalidScenario("", f"malformed JSON at line {exc.lineno}, column {exc.colno}: {exc.msg}") from None
    return parse_scenario(obj)


def load_scenario(path) -> Scenario:
    with open(path, encoding="utf-8") as f:
        text = f.read()
    return parse_text(text)


def parse_scenario(obj: Any) -> Scenario:
    """Validate a decoded scenario object and fill in defaults."""
    if not isinstance(obj, dict):
        _fail("", "scenario must be a JSON object")
    raw = obj
    obj = copy.deepcopy(obj)
    meta = _get(obj, "meta", "", dict)
    name = _get(meta, "name", "meta", str, "scenario")
    seed = _get(meta, "seed", "meta", int, 0)
    ticks = _get(meta, "ticks", "meta", int, check=_nonneg)
    ts = _get(meta, "tick_seconds", "meta", float, 60, check=_pos)
    fault = _get(meta, "fault_injection", "meta", str, None)

    topo = _get(obj, "topology", "", dict, {})
    routers = _get(topo, "routers", "topology", list, [])
    ports: dict[tuple[str, str], PortSpec] = {}
    rids: dict[str, int] = {}
    elan_ids = set()
    for i, r in enumerate(routers):
        p = f"topology.routers[{i}]"
        if not isinstance(r, dict):
            _fail(p, "expected an object")
        rid = _get(r, "id", p, str, check=_ident)
        if rid in rids:
            _fail(f"{p}.id", f"duplicate router id {rid!r}")
        if rid.startswith("grid:") or rid.startswith("elan:"):
            _fail(f"{p}.id", "router ids may not use the reserved 'grid:' or 'elan:' prefixes")
        rids[rid] = i
        elan_ids.add(_get(r, "elan", p, str, check=_ident))
        r.setdefault("role", "aggregation")
        _get(r, "role", p, str, check=lambda v: None if v in ROLES else f"must be one of {list(ROLES)}")
        _get(r, "backplane_limit_w", p, float, None, check=_pos)
        for k in ("ask_price", "bid_price"):
            _get(r, k, p, float, None, check=_nonneg)
        plist = _get(r, "ports", p, list)
        for j, port in enumerate(plist):
            pp = f"{p}.ports[{j}]"
            if not isinstance(port, dict):
                _fail(pp, "expected an object")
            pid = _get(port, "id", pp, str, check=_ident)
            if (rid, pid) in ports:
                _fail(f"{pp}.id", f"duplicate port id {pid!r}")
            side = _get(port, "side", pp, str, check=lambda v: None if v in "ABCD" and len(v) == 1 else "must be A, B, C or D")
            try:
                ports[(rid, pid)] = PortSpec(pid, Side(side), _get(port, "v_min", pp, float),
                                             _get(port, "v_max", pp, float), _get(port, "p_max_w", pp, float),
                                             _get(port, "efficiency", pp, float, 0.98, check=_unit))
            except ConfigError as exc:
                _fail(pp, str(exc))

    elans_cfg = _get(topo, "elans", "topology", list, [])
    elans: dict[str, dict] = {}
    for i, e in enumerate(elans_cfg):
        p = f"topology.elans[{i}]"
        eid = _get(e, "id", p, str)
        if eid not in elan_ids:
            _fail(f"{p}.id", f"ELAN {eid!r} has no routers")
        pol = _get(e, "policy", p, dict, {})
        obj_keys = _get(pol, "objective", f"{p}.policy", list, ["price", "hops"])
        for k, key in enumerate(obj_keys):
            if key not in ("price", "hops", "carbon", "resilience_class"):
                _fail(f"{p}.policy.objective[{k}]", f"unknown objective {key!r}")
        _get(pol, "max_price", f"{p}.policy", float, None)
        _get(pol, "max_carbon", f"{p}.policy", float, None)
        _get(e, "carbon", p, float, 0.0, check=_nonneg)
        _get(e, "resilience_class", p, int, 7, check=_cls)
        elans[eid] = e
    for eid in sorted(elan_ids - set(elans)):
        elans[eid] = {"id": eid, "policy": {"objective": ["price", "hops"], "max_price": None, "max_carbon": None},
                      "carbon": 0.0, "resilience_class": 7}

    links = _get(topo, "links", "topology", list, [])
    link_ids = set()
    used_ports = {}
    for i, l in enumerate(links):
        p = f"topology.links[{i}]"
        lid = _get(l, "id", p, str, check=_ident)
        if lid in link_ids:
            _fail(f"{p}.id", f"duplicate link id {lid!r}")
        link_ids.add(lid)
        for end in ("a", "b"):
            rk, pk = f"router_{end}", f"port_{end}"
            rid = _get(l, rk, p, str)
            if rid not in rids:
                _fail(f"{p}.{rk}", f"unknown router {rid!r}")
            pid = _get(l, pk, p, str)
            spec = ports.get((rid, pid))
            if spec is None:
                _fail(f"{p}.{pk}", f"router {rid!r} has no port {pid!r}")
            if spec.logic_side != Side.C:
                _fail(f"{p}.{pk}", "links connect C-side ports only")
            if (rid, pid) in used_ports:
                _fail(f"{p}.{pk}", f"port already used by {used_ports[(rid, pid)]}")
            used_ports[(rid, pid)] = f"link {lid}"
        if l["router_a"] == l["router_b"]:
            _fail(f"{p}.router_b", "a link must join two different routers")
        _get(l, "capacity_w", p, float, check=_pos)
        _get(l, "loss", p, float, 0.0, check=_frac)
        _get(l, "voltage", p, float, 400.0)

    peerings = _get(topo, "peerings", "topology", list, [])
    links_by_id = {l["id"]: l for l in links}
    router_elan = {r["id"]: r["elan"] for r in routers}
    for i, pe in enumerate(peerings):
        p = f"topology.peerings[{i}]"
        a = _get(pe, "elan_a", p, str)
        b = _get(pe, "elan_b", p, str)
        for k, e in (("elan_a", a), ("elan_b", b)):
            if e not in elans:
                _fail(f"{p}.{k}", f"unknown ELAN {e!r}")
        lid = _get(pe, "link", p, str)
        if lid not in links_by_id:
            _fail(f"{p}.link", f"unknown link {lid!r}")
        l = links_by_id[lid]
        if {router_elan[l["router_a"]], router_elan[l["router_b"]]} != {a, b} or a == b:
            _fail(f"{p}.link", f"link {lid!r} does not join ELANs {a!r} and {b!r}")
    for l in links:
        ea, eb = router_elan[l["router_a"]], router_elan[l["router_b"]]
        if ea != eb and not any(pe["link"] == l["id"] for pe in peerings):
            _fail(f"topology.links[{links.index(l)}]", "links between ELANs must be declared as peerings")

    devices = _get(obj, "devices", "", list, [])
    dev_ids = set()
    for i, d in enumerate(devices):
        p = f"devices[{i}]"
        if not isinstance(d, dict):
            _fail(p, "expected an object")
        did = _get(d, "id", p, str, check=_ident)
        if did in dev_ids:
            _fail(f"{p}.id", f"duplicate device id {did!r}")
        dev_ids.add(did)
        kind = _get(d, "type", p, str, check=lambda v: None if v in DEVICE_TYPES else f"must be one of {list(DEVICE_TYPES)}")
        rid = _get(d, "router", p, str)
        if rid not in rids:
            _fail(f"{p}.router", f"unknown router {rid!r}")
        pid = _get(d, "port", p, str)
        spec = ports.get((rid, pid))
        if spec is None:
            _fail(f"{p}.port", f"router {rid!r} has no port {pid!r}")
        if spec.logic_side.value not in DEVICE_SIDES[kind]:
            _fail(f"{p}.port", f"a {kind} device needs a {'/'.join(DEVICE_SIDES[kind])} port, {pid!r} is {spec.logic_side.value}")
        if (rid, pid) in used_ports:
            _fail(f"{p}.port", f"port already used by {used_ports[(rid, pid)]}")
        used_ports[(rid, pid)] = f"device {did}"
        _validate_device(d, kind, p, ticks)

    market = dict(MARKET_DEFAULTS)
    market.update(_get(obj, "market", "", dict, {}))
    _get(market, "interval_ticks", "market", int, check=_pos)
    _get(market, "enabled", "market", bool)
    for k in ("wheeling_margin", "ask_price", "bid_price", "scarcity_price"):
        _get(market, k, "market", float, check=_nonneg)
    for i, pool in enumerate(_get(market, "peering_pools", "market", list)):
        p = f"market.peering_pools[{i}]"
        eid = _get(pool, "elan", p, str)
        if eid not in elans:
            _fail(f"{p}.elan", f"unknown ELAN {eid!r}")
        for j, m in enumerate(_get(pool, "members", p, list)):
            if m not in rids:
                _fail(f"{p}.members[{j}]", f"unknown router {m!r}")
            if router_elan[m] != eid:
                _fail(f"{p}.members[{j}]", f"router {m!r} is not in ELAN {eid!r}")

    disp = dict(DISPATCH_DEFAULTS)
    disp.update(_get(obj, "dispatch", "", dict, {}))
    _get(disp, "sharing", "dispatch", bool)
    _get(disp, "storage", "dispatch", bool)
    _get(disp, "storage_reserve_class", "dispatch", int, check=_cls)

    proto = dict(PROTOCOL_DEFAULTS)
    proto.update(_get(obj, "protocol", "", dict, {}))
    for k in PROTOCOL_DEFAULTS:
        _get(proto, k, "protocol", int, check=_nonneg)
    for k in ("grant_ticks", "advert_interval", "heartbeat_threshold", "negotiation_deadline"):
        _get(proto, k, "protocol", int, check=_pos)
    # a renewal takes four one-tick message legs (Request, Offer, Accept, Grant)
    if proto["renew_lead"] < HANDSHAKE_TICKS:
        _fail("protocol.renew_lead", f"must be at least {HANDSHAKE_TICKS} ticks")
    if proto["negotiation_deadline"] < HANDSHAKE_TICKS:
        _fail("protocol.negotiation_deadline", f"must be at least {HANDSHAKE_TICKS} ticks")
    if proto["renew_lead"] >= proto["grant_ticks"]:
        _fail("protocol.renew_lead", "must be shorter than grant_ticks")

    enms = _get(obj, "enms", "", dict, {})
    profiles = _get(enms, "profiles", "enms", list, None)
    if profiles is not None:
        seen = set()
        for i, pr in enumerate(profiles):
            p = f"enms.profiles[{i}]"
            rid = _get(pr, "router", p, str)
            if rid not in rids:
                _fail(f"{p}.router", f"unknown router {rid!r}")
            if rid in seen:
                _fail(f"{p}.router", f"router {rid!r} is provisioned twice")
            seen.add(rid)
            _get(pr, "config_version", p, int, 1, check=_pos)
            _version(pr, "software_version", p, (1, 0, 0))
    for i, ro in enumerate(_get(enms, "rollouts", "enms", list, [])):
        p = f"enms.rollouts[{i}]"
        _get(ro, "start_tick", p, int, check=_nonneg)
        _get(ro, "cohort_ticks", p, int, 10, check=lambda v: None if v >= 5 else "must be at least 5")
        _version(ro, "target_version", p, ...)
        _get(ro, "failure_threshold", p, float, 0.1, check=_nonneg)
        cohorts = _get(ro, "cohorts", p, list)
        seen = set()
        for j, c in enumerate(cohorts):
            if not isinstance(c, list) or not c:
                _fail(f"{p}.cohorts[{j}]", "expected a non-empty list of router ids")
            for k, rid in enumerate(c):
                if rid not in rids:
                    _fail(f"{p}.cohorts[{j}][{k}]", f"unknown router {rid!r}")
                if rid in seen:
                    _fail(f"{p}.cohorts[{j}][{k}]", f"router {rid!r} appears in two cohorts")
                seen.add(rid)
        fails = _get(ro, "failures", p, dict, {})
        for key, lst in fails.items():
            if not key.isdigit() or int(key) >= len(cohorts):
                _fail(f"{p}.failures.{key}", "keys must be cohort indices")
            for k, rid in enumerate(lst):
                if rid not in rids:
                    _fail(f"{p}.failures.{key}[{k}]", f"unknown router {rid!r}")
    for i, pol in enumerate(_get(enms, "sla", "enms", list, [])):
        _get(pol, "kind", f"enms.sla[{i}]", str,
             check=lambda v: None if v in ("class0_shed", "deny_rate", "availability") else "unknown SLA policy kind")
    _get(enms, "telemetry_interval", "enms", int, 1, check=_pos)

    failures = _get(obj, "failures", "", list, [])
    grid_ids = {d["id"] for d in devices if d["type"] == "grid"}
    for i, f in enumerate(failures):
        p = f"failures[{i}]"
        _get(f, "tick", p, int, check=_nonneg)
        kind = _get(f, "kind", p, str, check=lambda v: None if v in FAILURE_KINDS else f"must be one of {list(FAILURE_KINDS)}")
        target = _get(f, "target", p, str)
        _get(f, "duration", p, int, None, check=_pos)
        valid = {"RouterDark": rids, "SupervisorKill": rids, "LinkCut": link_ids, "GridOutage": grid_ids,
                 "MessageLossBurst": set(rids) | {"*"}}[kind]
        if target not in valid:
            _fail(f"{p}.target", f"unknown {kind} target {target!r}")

    rules = _get(obj, "inbound_rules", "", list, [])
    for i, rule in enumerate(rules):
        p = f"inbound_rules[{i}]"
        rid = _get(rule, "router", p, str)
        if rid not in rids:
            _fail(f"{p}.router", f"unknown router {rid!r}")
        _get(rule, "from", p, str, "*")
        _get(rule, "msg_type", p, str, "Request")

    baseline = _get(obj, "baseline", "", dict, None)
    if baseline is not None:
        validate_baseline(baseline, "baseline", dev_ids)

    return Scenario(raw, name, seed, ticks, float(ts), fault, routers, links, elans, peerings, devices, market,
                    disp, proto, enms, failures, baseline, rules, ports)


def _version(obj, key, path, default):
    v = _get(obj, key, path, list, default)
    if not (isinstance(v, (list, tuple)) and len(v) == 3 and all(isinstance(x, int) and x >= 0 for x in v)):
        _fail(f"{path}.{key}", "expected [major, minor, patch]")
    return tuple(v)


def _validate_device(d: dict, kind: str, p: str, ticks: int) -> None:
    if kind == "solar":
        _get(d, "peak_w", p, float, check=_nonneg)
        prof = _get(d, "profile", p, list, check=lambda v: None if v else "must be non-empty")
        for k, x in enumerate(prof):
            if isinstance(x, bool) or not isinstance(x, (int, float)) or not 0 <= x <= 1:
                _fail(f"{p}.profile[{k}]", "profile entries are fractions in [0, 1]")
    elif kind in ("battery", "ev"):
        cap = _get(d, "capacity_kwh", p, float, check=_nonneg)
        soc = _get(d, "soc_kwh", p, float, check=_nonneg)
        if soc > cap:
            _fail(f"{p}.soc_kwh", "must not exceed capacity_kwh")
        _get(d, "p_charge_max_w", p, float, check=_nonneg)
        _get(d, "p_discharge_max_w", p, float, check=_nonneg)
        _get(d, "eta_charge", p, float, 0.98, check=_unit)
        _get(d, "eta_discharge", p, float, 0.98, check=_unit)
        if kind == "battery":
            _get(d, "mode", p, str, "shave", check=lambda v: None if v in ("shave", "backup") else "must be shave or backup")
        else:
            plugged = _get(d, "plugged", p, list, [True])
            if not plugged or not all(isinstance(x, bool) for x in plugged):
                _fail(f"{p}.plugged", "expected a non-empty list of booleans")
            _get(d, "v2g", p, bool, False)
            _get(d, "depart_soc_min_kwh", p, float, 0.0, check=_nonneg)
            _get(d, "depart_tick", p, int, None, check=_nonneg)
            _get(d, "charge_class", p, int, 6, check=_cls)
    elif kind == "load":
        rows = _get(d, "demand", p, list, check=lambda v: None if v else "must be non-empty")
        for t, row in enumerate(rows):
            if not isinstance(row, list):
                _fail(f"{p}.demand[{t}]", "expected a list of [class, watts] pairs")
            for k, pair in enumerate(row):
                pp = f"{p}.demand[{t}][{k}]"
                if not (isinstance(pair, list) and len(pair) == 2):
                    _fail(pp, "expected [class, watts]")
                c, w = pair
                if isinstance(c, bool) or not isinstance(c, int) or _cls(c):
                    _fail(pp, f"class must be an integer 0..{N_CLASSES - 1}")
                if isinstance(w, bool) or not isinstance(w, (int, float)) or w < 0:
                    _fail(pp, "watts must be a non-negative number")
    elif kind == "grid":
        _get(d, "import_limit_w", p, float, check=_nonneg)
        _get(d, "export_limit_w", p, float, 0.0, check=_nonneg)
        _get(d, "price_import", p, float, 0.25, check=_nonneg)
        _get(d, "price_export", p, float, 0.05, check=_nonneg)
        _get(d, "voltage", p, float, 230.0, check=_pos)
        avail = _get(d, "available", p, list, [True])
        if not avail or not all(isinstance(x, bool) for x in avail):
            _fail(f"{p}.available", "expected a non-empty list of booleans")


def validate_baseline(b: dict, path: str, device_ids=None) -> None:
    """Radial feeder tree: every node has one parent and reaches the root."""
    root = _get(b, "root", path, str)
    edges = _get(b, "edges", path, list)
    parent = {}
    ids = set()
    for i, e in enumerate(edges):
        p = f"{path}.edges[{i}]"
        eid = _get(e, "id", p, str)
        if eid in ids:
            _fail(f"{p}.id", f"duplicate edge id {eid!r}")
        ids.add(eid)
        par = _get(e, "parent", p, str)
        child = _get(e, "child", p, str)
        _get(e, "capacity_w", p, float, check=_pos)
        if child == root:
            _fail(f"{p}.child", "the root cannot have a parent")
        if child in parent:
            _fail(f"{p}.child", f"node {child!r} already has a parent; the feeder must be radial")
        parent[child] = par
    nodes = {root} | set(parent)
    for child in sorted(parent):
        seen = {child}
        n = child
        while n != root:
            n = parent.get(n)
            if n is None:
                _fail(f"{path}.edges", f"node {child!r} does not reach the root")
            if n in seen:
                _fail(f"{path}.edges", f"cycle through {n!r}")
            seen.add(n)
    loads = _get(b, "loads", path, dict, {})
    for node, devs in loads.items():
        if node not in nodes:
            _fail(f"{path}.loads.{node}", f"unknown feeder node {node!r}")
        for k, did in enumerate(devs):
            if device_ids is not None and did not in device_ids:
                _fail(f"{path}.loads.{node}[{k}]", f"unknown device {did!r}")
    _get(b, "source", path, str, None)
    for i, f in enumerate(_get(b, "failures", path, list, [])):
        p = f"{path}.failures[{i}]"
        _get(f, "tick", p, int, check=_nonneg)
        kind = _get(f, "kind", p, str,
                    check=lambda v: None if v in ("LinkCut", "GridOutage") else "must be LinkCut or GridOutage")
        target = _get(f, "target", p, str)
        _get(f, "duration", p, int, None, check=_pos)
        if kind == "LinkCut" and target not in ids:
            _fail(f"{p}.target", f"unknown feeder edge {target!r}")
