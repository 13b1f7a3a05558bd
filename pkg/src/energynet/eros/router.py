"""Energy Router state: ports, grant table, firewall and dual supervisors."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Mapping, NamedTuple

from ..core import AuthToken, EnergyNetError, EnergyQuantum, PortSpec, Side, digest_of, verify_token

log = logging.getLogger(__name__)

HEARTBEAT_THRESHOLD = 3


class AdmissionError(EnergyNetError):
    pass


class BadToken(AdmissionError):
    pass


class VoltageMismatch(AdmissionError):
    pass


class PowerLimitExceeded(AdmissionError):
    pass


class UnknownPort(AdmissionError):
    pass


class IllegalGrantState(AdmissionError):
    pass


class BothFailed(EnergyNetError):
    pass


class GrantState(str, Enum):
    PENDING = "Pending"
    LIVE = "Live"
    COMPLETED = "Completed"
    RELEASED = "Released"
    FAILED = "Failed"


_FORWARD = {
    GrantState.PENDING: {GrantState.LIVE, GrantState.RELEASED, GrantState.FAILED},
    GrantState.LIVE: {GrantState.COMPLETED, GrantState.RELEASED, GrantState.FAILED},
}


@dataclass
class Grant:
    grant_id: str
    src: tuple[str, str]
    dst: tuple[str, str]
    quantum: EnergyQuantum
    start_tick: int
    price: float = 0.0
    priority: int = 0
    src_token: AuthToken | None = None
    dst_token: AuthToken | None = None
    state: GrantState = GrantState.PENDING
    kind: str = "link"
    _verified: bool | None = field(default=None, repr=False, compare=False)

    @property
    def end_tick(self) -> int:
        return self.start_tick + self.quantum.duration

    def terms(self) -> dict:
        q = self.quantum
        return {
            "dst": list(self.dst), "duration": q.duration, "grant_id": self.grant_id, "kind": self.kind,
            "power_w": q.power, "price": self.price, "priority": self.priority, "src": list(self.src),
            "start_tick": self.start_tick, "voltage": q.voltage,
        }

    def digest(self) -> bytes:
        return grant_digest(self.terms())

    def tokens_valid(self) -> bool:
        """Both tokens verify over the terms and belong to the owners of their endpoints."""
        if self._verified is None:
            d = self.digest()
            self._verified = (
                self.src_token is not None and self.dst_token is not None
                and self.src_token.principal == self.src[0] and self.dst_token.principal == self.dst[0]
                and verify_token(self.src_token, d) and verify_token(self.dst_token, d)
            )
        return self._verified

    def covers(self, tick: int) -> bool:
        return self.start_tick <= tick < self.end_tick

    def advance(self, new: GrantState) -> None:
        if new == self.state:
            return
        if new not in _FORWARD.get(self.state, ()):
            raise IllegalGrantState(f"grant {self.grant_id}: {self.state.value} -> {new.value} is not allowed")
        self.state = new

    def to_json(self) -> dict:
        out = self.terms()
        out["state"] = self.state.value
        out["src_token"] = self.src_token.to_json() if self.src_token else None
        out["dst_token"] = self.dst_token.to_json() if self.dst_token else None
        return out

    @classmethod
    def from_json(cls, obj: dict) -> Grant:
        tok = lambda t: AuthToken.from_json(t) if t else None  # noqa: E731
        return cls(
            grant_id=obj["grant_id"], src=tuple(obj["src"]), dst=tuple(obj["dst"]),
            quantum=EnergyQuantum(obj["power_w"], obj["duration"], obj["voltage"]),
            start_tick=obj["start_tick"], price=obj["price"], priority=obj["priority"],
            src_token=tok(obj.get("src_token")), dst_token=tok(obj.get("dst_token")),
            state=GrantState(obj.get("state", "Pending")), kind=obj.get("kind", "link"),
        )


def grant_digest(terms: dict) -> bytes:
    from ..ep.wire import canonical_dumps  # deferred: ep imports this module

    return digest_of(canonical_dumps(terms))


class SupState(str, Enum):
    ACTIVE = "Active"
    PASSIVE = "Passive"
    FAILED = "Failed"


@dataclass
class Supervisor:
    sup_id: str
    state: SupState
    mirrored_state_version: int = -1
    heartbeat_misses: int = 0
    restart_at: int | None = None


@dataclass
class EnergyRouter:
    router_id: str
    ports: dict[str, PortSpec]
    backplane_limit: float = float("inf")
    role: str = "aggregation"
    elan: str = ""
    grant_table: dict[str, Grant] = field(default_factory=dict)
    supervisors: list[Supervisor] = field(default_factory=list)
    software_version: tuple[int, int, int] = (1, 0, 0)
    provisioned: bool = True
    inbound_rules: list[dict] = field(default_factory=list)
    last_heartbeat: int = -1
    heartbeat_threshold: int = HEARTBEAT_THRESHOLD
    deny_log: list[dict] = field(default_factory=list)

    def __post_init__(self):
        if not self.supervisors:
            self.supervisors = [
                Supervisor(f"{self.router_id}/sup0", SupState.ACTIVE),
                Supervisor(f"{self.router_id}/sup1", SupState.PASSIVE),
            ]

    @property
    def active(self) -> Supervisor | None:
        for s in self.supervisors:
            if s.state == SupState.ACTIVE:
                return s
        return None

    @property
    def dark(self) -> bool:
        return all(s.state == SupState.FAILED for s in self.supervisors)

    def kill_active(self, restart_at: int | None = None) -> None:
        s = self.active
        if s is not None:
            s.state = SupState.FAILED
            s.restart_at = restart_at

    def kill_all(self) -> None:
        for s in self.supervisors:
            s.state = SupState.FAILED
            s.restart_at = None

    def revive(self, now: int) -> None:
        """Power both supervisors back up after a full outage."""
        self.supervisors[0].state = SupState.ACTIVE
        self.supervisors[1].state = SupState.PASSIVE
        for s in self.supervisors:
            s.heartbeat_misses = 0
            s.restart_at = None
            s.mirrored_state_version = now
        self.last_heartbeat = now - 1

    def live_grants(self, now: int) -> list[Grant]:
        return [g for g in self.grant_table.values() if g.state == GrantState.LIVE and g.covers(now)]


def refresh_grants(r: EnergyRouter, now: int) -> None:
    """Move grants through their time-driven states."""
    for g in r.grant_table.values():
        if g.state == GrantState.PENDING and g.start_tick <= now:
            if now < g.end_tick and g.tokens_valid():
                g.advance(GrantState.LIVE)
            elif now >= g.end_tick:
                g.advance(GrantState.RELEASED)
        if g.state == GrantState.LIVE and now >= g.end_tick:
            g.advance(GrantState.COMPLETED)


def admit_grant(
    r: EnergyRouter,
    g: Grant,
    now: int = 0,
    peer_ports: Mapping[tuple[str, str], PortSpec] | None = None,
    device_check: Callable[[Grant], None] | None = None,
) -> EnergyRouter:
    """Validate ``g`` against both endpoint ports and enter it into the grant table.

    ``peer_ports`` resolves endpoints that live on a linked router or on the
    grid side. ``device_check`` raises if the attached device cannot honour
    the grant.
    """
    if g.state != GrantState.PENDING:
        raise IllegalGrantState(f"grant {g.grant_id} must be Pending to be admitted, is {g.state.value}")
    if not g.tokens_valid():
        raise BadToken(f"grant {g.grant_id}: token verification failed")
    specs = []
    for end in (g.src, g.dst):
        spec = r.ports.get(end[1]) if end[0] == r.router_id else None
        if spec is None and peer_ports is not None:
            spec = peer_ports.get(end)
        if spec is None:
            raise UnknownPort(f"grant {g.grant_id}: no port {end[1]!r} on {end[0]!r}")
        specs.append(spec)
    if g.src[0] != r.router_id and g.dst[0] != r.router_id:
        raise UnknownPort(f"grant {g.grant_id} has no endpoint on {r.router_id}")
    for spec in specs:
        if not spec.accepts_voltage(g.quantum.voltage):
            raise VoltageMismatch(
                f"grant {g.grant_id}: {g.quantum.voltage:g} V outside [{spec.v_min:g}, {spec.v_max:g}] V of {spec.port_id}"
            )
        if g.quantum.power > spec.p_max:
            raise PowerLimitExceeded(f"grant {g.grant_id}: {g.quantum.power:g} W exceeds {spec.port_id} limit {spec.p_max:g} W")
    if device_check is not None:
        device_check(g)
    r.grant_table[g.grant_id] = g
    if g.start_tick <= now < g.end_tick:
        g.advance(GrantState.LIVE)
    return r


class Gate(NamedTuple):
    allowed: bool
    reason: str | None = None


ALLOW = Gate(True)


def firewall_gate(r: EnergyRouter, flow: tuple, now: int, tol: float = 1e-9) -> Gate:
    """Default-deny check for a flow ``(src, dst, watts, grant_id)`` crossing a port of ``r``."""
    src, dst, watts, grant_id = flow
    g = r.grant_table.get(grant_id) if grant_id is not None else None
    if r.dark:
        reason = "RouterDark"
    elif g is None:
        reason = "NoGrant"
    elif g.state != GrantState.LIVE:
        reason = "Expired" if g.state == GrantState.COMPLETED else f"Not{g.state.value}"
    elif not g.covers(now):
        reason = "Expired" if now >= g.end_tick else "NotStarted"
    elif not g.tokens_valid():
        reason = "BadToken"
    elif (tuple(src), tuple(dst)) != (g.src, g.dst):
        reason = "WrongEndpoint"
    elif watts > g.quantum.power * (1 + tol) + tol:
        reason = "OverPower"
    else:
        return ALLOW
    entry = {"tick": now, "router": r.router_id, "grant_id": grant_id, "src": list(src), "dst": list(dst),
             "watts": watts, "reason": reason}
    r.deny_log.append(entry)
    log.info("deny %s at %s: %s", grant_id, r.router_id, reason)
    return Gate(False, reason)


def boundary_port(r: EnergyRouter, port_id: str) -> bool:
    spec = r.ports.get(port_id)
    return spec is not None and spec.logic_side in (Side.B, Side.C)


def supervisor_tick(r: EnergyRouter, now: int) -> EnergyRouter:
    """Heartbeat, mirroring and active-passive failover for one tick.

    Heartbeats reach the passive side one tick after they are sent; the
    passive supervisor takes over after ``heartbeat_threshold`` missed beats.
    """
    for s in r.supervisors:
        if s.state == SupState.FAILED and s.restart_at is not None and now >= s.restart_at:
            s.state = SupState.PASSIVE
            s.restart_at = None
            s.heartbeat_misses = 0
            s.mirrored_state_version = r.last_heartbeat
    if r.dark:
        raise BothFailed(f"{r.router_id}: both supervisors failed")
    active = r.active
    for s in r.supervisors:
        if s.state != SupState.PASSIVE:
            continue
        if r.last_heartbeat >= now - 1:
            s.heartbeat_misses = 0
            s.mirrored_state_version = r.last_heartbeat
        else:
            s.heartbeat_misses += 1
            if active is None and s.heartbeat_misses >= r.heartbeat_threshold:
                log.info("%s: %s takes over at tick %d", r.router_id, s.sup_id, now)
                s.state = SupState.ACTIVE
                s.heartbeat_misses = 0
                active = s
    if active is not None:
        active.mirrored_state_version = now
        r.last_heartbeat = now
    return r
