"""Shared domain types: simulation clock, priority classes, ports, energy quanta and tokens."""

from __future__ import annotations

import hashlib
import hmac
from dataclasses import dataclass
from enum import Enum
from fractions import Fraction

N_CLASSES = 8
CRITICAL = (0, 1)
TIER_NAMES = ("critical", "critical", "essential", "essential", "normal", "normal", "deferrable", "deferrable")

DEFAULT_EFFICIENCY = 0.98
DEFAULT_TICK_SECONDS = 60
DC_VOLTAGE_RANGE = (150.0, 1500.0)


class EnergyNetError(Exception):
    """Base class for all domain errors raised by the simulator."""


class ConfigError(EnergyNetError):
    pass


@dataclass(frozen=True)
class SimTime:
    tick: int
    tick_seconds: float | Fraction = DEFAULT_TICK_SECONDS

    def __post_init__(self):
        if self.tick < 0:
            raise ConfigError(f"tick must be non-negative, got {self.tick}")
        if self.tick_seconds <= 0:
            raise ConfigError(f"tick_seconds must be positive, got {self.tick_seconds}")

    def next(self) -> SimTime:
        return SimTime(self.tick + 1, self.tick_seconds)

    @property
    def hours_per_tick(self) -> float:
        return self.tick_seconds / 3600


def check_priority(cls: int) -> int:
    if isinstance(cls, bool) or not isinstance(cls, int) or not 0 <= cls < N_CLASSES:
        raise ConfigError(f"priority class must be an integer in 0..{N_CLASSES - 1}, got {cls!r}")
    return cls


def outranks(a: int, b: int) -> bool:
    """True when class ``a`` is served before class ``b`` (lower number wins)."""
    return check_priority(a) < check_priority(b)


def tier_name(cls: int) -> str:
    return TIER_NAMES[check_priority(cls)]


class Side(str, Enum):
    A = "A"  # AC, local consumption
    B = "B"  # AC, legacy grid interconnection
    C = "C"  # DC, router-to-router
    D = "D"  # DC, local resources

    @property
    def current_kind(self) -> str:
        return "AC" if self in (Side.A, Side.B) else "DC"

    @property
    def is_boundary(self) -> bool:
        """B and C ports face other parties and sit behind the firewall."""
        return self in (Side.B, Side.C)


@dataclass(frozen=True)
class PortSpec:
    port_id: str
    logic_side: Side
    v_min: float
    v_max: float
    p_max: float
    efficiency: float = DEFAULT_EFFICIENCY

    def __post_init__(self):
        if not isinstance(self.logic_side, Side):
            object.__setattr__(self, "logic_side", Side(self.logic_side))
        if not self.v_min < self.v_max:
            raise ConfigError(f"port {self.port_id}: v_min must be below v_max")
        if self.current_kind == "DC":
            lo, hi = DC_VOLTAGE_RANGE
            if self.v_min < lo or self.v_max > hi:
                raise ConfigError(f"port {self.port_id}: DC range must lie within [{lo:g}, {hi:g}] V")
        if not 0 < self.efficiency <= 1:
            raise ConfigError(f"port {self.port_id}: efficiency must be in (0, 1]")
        if self.p_max < 0:
            raise ConfigError(f"port {self.port_id}: p_max must be non-negative")

    @property
    def current_kind(self) -> str:
        return self.logic_side.current_kind

    def accepts_voltage(self, volts: float) -> bool:
        return self.v_min <= volts <= self.v_max


@dataclass(frozen=True)
class EnergyQuantum:
    power: float
    duration: int
    voltage: float

    def __post_init__(self):
        if self.power < 0:
            raise ConfigError("quantum power must be non-negative")
        if self.duration < 1:
            raise ConfigError("quantum duration must be at least one tick")


def energy_of(q: EnergyQuantum, t: SimTime):
    """Joules carried by ``q`` at the run's tick length."""
    return q.power * q.duration * t.tick_seconds


# Simulated signatures: a keyed hash whose key is derived from the principal name.
# Reproducible across runs and languages; not a security boundary.
_KEY_PREFIX = b"energynet/principal/"
_SIG_BYTES = 16


@dataclass(frozen=True)
class AuthToken:
    principal: str
    nonce: int
    signature: bytes

    def to_json(self) -> dict:
        return {"nonce": self.nonce, "principal": self.principal, "signature": self.signature.hex()}

    @classmethod
    def from_json(cls, obj: dict) -> AuthToken:
        return cls(obj["principal"], obj["nonce"], bytes.fromhex(obj["signature"]))


def _principal_key(principal: str) -> bytes:
    return hashlib.sha256(_KEY_PREFIX + principal.encode("utf-8")).digest()


def _sign(principal: str, nonce: int, digest: bytes) -> bytes:
    msg = nonce.to_bytes(8, "big") + digest
    return hmac.new(_principal_key(principal), msg, hashlib.sha256).digest()[:_SIG_BYTES]


def mint_token(principal: str, nonce: int, digest: bytes) -> AuthToken:
    if not 0 <= nonce < 2**64:
        raise ConfigError("nonce must fit in 64 unsigned bits")
    return AuthToken(principal, nonce, _sign(principal, nonce, digest))


def verify_token(tok: AuthToken | None, digest: bytes) -> bool:
    if tok is None or not 0 <= tok.nonce < 2**64:
        return False
    return hmac.compare_digest(tok.signature, _sign(tok.principal, tok.nonce, digest))


def digest_of(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()
