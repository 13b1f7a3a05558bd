"""Operator-scale fleet management: provisioning, staged rollouts, telemetry, SLA checks."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable, Mapping

from .core import N_CLASSES, AuthToken, EnergyNetError, digest_of, mint_token
from .eros.router import EnergyRouter
from .ep.wire import canonical_dumps

log = logging.getLogger(__name__)

ROLES = ("gateway", "backbone", "aggregation")


class DuplicateRouter(EnergyNetError):
    pass


@dataclass
class RouterProfile:
    router_id: str
    role: str = "aggregation"
    config_version: int = 1
    software_version: tuple[int, int, int] = (1, 0, 0)
    credentials: AuthToken | None = None

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"unknown role {self.role!r}")


@dataclass
class Fleet:
    routers: dict[str, EnergyRouter] = field(default_factory=dict)
    profiles: dict[str, RouterProfile] = field(default_factory=dict)
    dropped: int = 0

    def is_provisioned(self, router_id: str) -> bool:
        return router_id in self.profiles

    def versions(self) -> set[tuple[int, int, int]]:
        return {self.routers[r].software_version for r in self.profiles if r in self.routers}


def provision(profile: RouterProfile, fleet: Fleet) -> Fleet:
    """Register a router, derive its credentials and apply its role defaults."""
    rid = profile.router_id
    if rid in fleet.profiles:
        raise DuplicateRouter(rid)
    terms = {"config_version": profile.config_version, "role": profile.role, "router_id": rid}
    profile.credentials = mint_token(rid, profile.config_version, digest_of(canonical_dumps(terms)))
    fleet.profiles[rid] = profile
    r = fleet.routers.get(rid)
    if r is not None:
        r.role = profile.role
        r.software_version = tuple(profile.software_version)
        r.provisioned = True
    return fleet


def role_defaults(role: str) -> dict:
    """Behaviour switches each role turns on."""
    return {
        "inbound_default_deny": role == "gateway",
        "c_ports_first": role == "backbone",
        "market_aggregation": role == "aggregation",
    }


def admit_message(fleet: Fleet, sender: str) -> bool:
    """Provisioning gate: traffic from unprovisioned routers is dropped and counted."""
    if sender in fleet.routers and sender not in fleet.profiles:
        fleet.dropped += 1
        return False
    return True


class CohortState(str, Enum):
    PENDING = "Pending"
    UPDATING = "Updating"
    DONE = "Done"
    ROLLED_BACK = "RolledBack"


@dataclass
class RolloutPlan:
    target_version: tuple[int, int, int]
    cohorts: list[list[str]]
    failure_threshold: float = 0.1
    states: list[CohortState] = field(default_factory=list)
    prior: dict[str, tuple[int, int, int]] = field(default_factory=dict)
    outcome: str | None = None  # "Done" or "RolledBack" once finished

    def __post_init__(self):
        if not self.states:
            self.states = [CohortState.PENDING] * len(self.cohorts)

    @property
    def finished(self) -> bool:
        return self.outcome is not None


def rollout_step(plan: RolloutPlan, fleet: Fleet, failures: Mapping[int, Iterable[str]] | None = None,
                 restart: Callable[[str], None] | None = None) -> RolloutPlan:
    """Update the next pending cohort, observe its failures, then keep or roll back.

    One call handles one cohort. Updating a router restarts its active
    supervisor through ``restart``; a failure fraction above the threshold
    reverts every cohort updated so far to its pre-plan version.
    """
    if plan.finished:
        return plan
    try:
        i = plan.states.index(CohortState.PENDING)
    except ValueError:
        plan.outcome = "Done"
        return plan
    cohort = plan.cohorts[i]
    plan.states[i] = CohortState.UPDATING
    for rid in cohort:
        r = fleet.routers[rid]
        plan.prior.setdefault(rid, r.software_version)
        r.software_version = tuple(plan.target_version)
        if restart is not None:
            restart(rid)
    failed = set((failures or {}).get(i, ())) & set(cohort)
    frac = len(failed) / len(cohort) if cohort else 0.0
    if frac <= plan.failure_threshold:
        plan.states[i] = CohortState.DONE
        if CohortState.PENDING not in plan.states:
            plan.outcome = "Done"
        return plan
    log.warning("rollout to %s: cohort %d failure fraction %.2f > %.2f, rolling back", plan.target_version, i, frac,
                plan.failure_threshold)
    for k, st in enumerate(plan.states):
        if st in (CohortState.DONE, CohortState.UPDATING):
            for rid in plan.cohorts[k]:
                fleet.routers[rid].software_version = plan.prior[rid]
                if restart is not None:
                    restart(rid)
            plan.states[k] = CohortState.ROLLED_BACK
    plan.outcome = "RolledBack"
    return plan


@dataclass
class TelemetryRecord:
    router_id: str
    tick: int
    served_w: list[float]
    shed_w: list[float]
    soc_j: float
    supervisors: list[str]
    denies: int

    def to_json(self) -> dict:
        return {"denies": self.denies, "kind": "record", "router": self.router_id, "served_w": self.served_w,
                "shed_w": self.shed_w, "soc_j": self.soc_j, "supervisors": self.supervisors, "tick": self.tick}


def collect_telemetry(fleet: Fleet, tick: int, rows: Mapping[str, dict]) -> tuple[list[TelemetryRecord], list[dict]]:
    """One record per provisioned, reachable router; an alarm for each dark one."""
    records, alarms = [], []
    for rid in sorted(fleet.profiles):
        r = fleet.routers.get(rid)
        if r is None:
            continue
        if r.dark or rid not in rows:
            alarms.append({"kind": "alarm", "reason": "dark", "router": rid, "tick": tick})
            continue
        row = rows[rid]
        served = list(row["served"])
        shed = [d - s for d, s in zip(row["demand"], row["served"])]
        records.append(TelemetryRecord(rid, tick, served, shed, row.get("soc_j", 0.0),
                                       [s.state.value for s in r.supervisors], row.get("denies", 0)))
    return records, alarms


DEFAULT_SLA = ({"kind": "availability"}, {"kind": "class0_shed", "max_consecutive": 2})


def check_sla(policies: Iterable[Mapping], records: Iterable[TelemetryRecord], alarms: Iterable[Mapping] = (),
              tol: float = 1e-6) -> list[dict]:
    """Evaluate policy predicates over a telemetry window.

    ``class0_shed``: class-0 shedding on more than ``max_consecutive``
    consecutive ticks (one violation per run). ``deny_rate``: firewall
    denies per record above ``threshold``. ``availability``: any dark-router
    alarm.
    """
    records = sorted(records, key=lambda r: (r.router_id, r.tick))
    alarms = list(alarms)
    by_router: dict[str, list[TelemetryRecord]] = {}
    for rec in records:
        by_router.setdefault(rec.router_id, []).append(rec)
    out = []
    for pol in policies:
        kind = pol["kind"]
        if kind == "class0_shed":
            limit = pol.get("max_consecutive", 0)
            for rid, recs in by_router.items():
                run, prev, start = 0, None, None
                flagged = False
                for rec in recs + [None]:
                    shedding = rec is not None and rec.shed_w[0] > tol and (prev is None or rec.tick == prev + 1 or run == 0)
                    if shedding:
                        if run == 0:
                            start = rec.tick
                        run += 1
                        if run > limit and not flagged:
                            out.append({"kind": "violation", "policy": kind, "router": rid, "since": start,
                                        "tick": rec.tick})
                            flagged = True
                    else:
                        run, flagged = 0, False
                        if rec is not None and rec.shed_w[0] > tol:
                            run, start = 1, rec.tick
                            if run > limit:
                                out.append({"kind": "violation", "policy": kind, "router": rid, "since": start,
                                            "tick": rec.tick})
                                flagged = True
                    prev = rec.tick if rec is not None else prev
        elif kind == "deny_rate":
            thr = pol.get("threshold", 0.0)
            for rid, recs in by_router.items():
                rate = sum(r.denies for r in recs) / len(recs)
                if rate > thr:
                    out.append({"kind": "violation", "policy": kind, "rate": rate, "router": rid})
        elif kind == "availability":
            seen = set()
            for a in alarms:
                if a["router"] not in seen:
                    seen.add(a["router"])
                    out.append({"kind": "violation", "policy": kind, "router": a["router"], "tick": a["tick"]})
        else:
            raise ValueError(f"unknown SLA policy kind {kind!r}")
    return out


def served_totals(records: Iterable[TelemetryRecord]) -> tuple[list[float], list[float]]:
    served = [0.0] * N_CLASSES
    shed = [0.0] * N_CLASSES
    for rec in records:
        for c in range(N_CLASSES):
            served[c] += rec.served_w[c]
            shed[c] += rec.shed_w[c]
    return served, shed
