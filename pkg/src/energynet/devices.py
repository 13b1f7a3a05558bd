"""Dynamic models of the resources attached to router ports.

All units are value objects: stepping returns a new instance, so the kernel
can keep a pre-tick copy for conservation checks. Requests a device cannot
honour raise; nothing is silently clamped.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

from .core import ConfigError, EnergyNetError, SimTime, check_priority

# Float noise allowed at the soc bounds, relative to capacity. Anything larger is an error.
SOC_SNAP = 1e-9


class DeviceError(EnergyNetError):
    pass


class OverCharge(DeviceError):
    pass


class UnderCharge(DeviceError):
    pass


class PowerLimit(DeviceError):
    pass


class NotPlugged(DeviceError):
    pass


class V2gDisabled(DeviceError):
    pass


def _wrap(seq, tick):
    return seq[tick % len(seq)]


@dataclass(frozen=True)
class SolarUnit:
    device_id: str
    peak_power: float
    profile: tuple[float, ...]

    def __post_init__(self):
        if not self.profile:
            raise ConfigError(f"solar {self.device_id}: profile must be non-empty")
        if any(not 0 <= f <= 1 for f in self.profile):
            raise ConfigError(f"solar {self.device_id}: profile fractions must lie in [0, 1]")
        if self.peak_power < 0:
            raise ConfigError(f"solar {self.device_id}: peak_power must be non-negative")


def solar_output(u: SolarUnit, t: SimTime) -> float:
    return u.peak_power * _wrap(u.profile, t.tick)


@dataclass(frozen=True)
class BatteryUnit:
    device_id: str
    capacity: float
    soc: float
    p_charge_max: float
    p_discharge_max: float
    eta_charge: float = 0.98
    eta_discharge: float = 0.98

    def __post_init__(self):
        if not 0 <= self.soc <= self.capacity:
            raise ConfigError(f"storage {self.device_id}: soc must lie in [0, capacity]")
        if not (0 < self.eta_charge <= 1 and 0 < self.eta_discharge <= 1):
            raise ConfigError(f"storage {self.device_id}: efficiencies must lie in (0, 1]")
        if self.p_charge_max < 0 or self.p_discharge_max < 0:
            raise ConfigError(f"storage {self.device_id}: power limits must be non-negative")


def _step_soc(b, p_signed: float, tick_seconds: float) -> float:
    slack = SOC_SNAP * max(b.p_charge_max, b.p_discharge_max, 1.0)
    if p_signed > b.p_charge_max + slack or -p_signed > b.p_discharge_max + slack:
        raise PowerLimit(f"{b.device_id}: {p_signed:g} W outside [-{b.p_discharge_max:g}, {b.p_charge_max:g}]")
    if p_signed >= 0:
        soc = b.soc + p_signed * tick_seconds * b.eta_charge
    else:
        soc = b.soc + p_signed * tick_seconds / b.eta_discharge
    snap = SOC_SNAP * max(b.capacity, 1.0)
    if soc > b.capacity:
        if soc - b.capacity > snap:
            raise OverCharge(f"{b.device_id}: soc would reach {soc:g} J > capacity {b.capacity:g} J")
        soc = b.capacity
    elif soc < 0:
        if -soc > snap:
            raise UnderCharge(f"{b.device_id}: soc would drop to {soc:g} J")
        soc = 0.0
    return soc


def battery_step(b: BatteryUnit, p_signed: float, t: SimTime) -> BatteryUnit:
    """Charge (``p_signed > 0``) or discharge for one tick; power is measured at the device terminals."""
    return replace(b, soc=_step_soc(b, p_signed, t.tick_seconds))


def max_discharge(b, tick_seconds: float) -> float:
    """Largest terminal power the unit can deliver this tick without underflowing."""
    return min(b.p_discharge_max, b.soc * b.eta_discharge / tick_seconds)


def max_charge(b, tick_seconds: float) -> float:
    return min(b.p_charge_max, (b.capacity - b.soc) / (b.eta_charge * tick_seconds))


@dataclass(frozen=True)
class EvUnit:
    device_id: str
    capacity: float
    soc: float
    p_charge_max: float
    p_discharge_max: float
    eta_charge: float = 0.98
    eta_discharge: float = 0.98
    plugged: tuple[bool, ...] = (True,)
    v2g_enabled: bool = False
    depart_soc_min: float = 0.0
    depart_tick: int | None = None
    charge_class: int = 6
    departure_shortfall: float = 0.0

    def __post_init__(self):
        BatteryUnit.__post_init__(self)
        if not self.plugged:
            raise ConfigError(f"ev {self.device_id}: plugged schedule must be non-empty")
        check_priority(self.charge_class)

    def is_plugged(self, tick: int) -> bool:
        return _wrap(self.plugged, tick)


def ev_step(e: EvUnit, p_signed: float, t: SimTime) -> EvUnit:
    if p_signed != 0:
        if not e.is_plugged(t.tick):
            raise NotPlugged(f"{e.device_id} is not plugged in at tick {t.tick}")
        if p_signed < 0 and not e.v2g_enabled:
            raise V2gDisabled(f"{e.device_id} does not allow vehicle-to-grid discharge")
    soc = _step_soc(e, p_signed, t.tick_seconds) if p_signed else e.soc
    shortfall = e.departure_shortfall
    if e.depart_tick is not None and t.tick == e.depart_tick and soc < e.depart_soc_min:
        shortfall = e.depart_soc_min - soc
    return replace(e, soc=soc, departure_shortfall=shortfall)


def ev_offer(e: EvUnit, tick: int, tick_seconds: float) -> tuple[float, float]:
    """(charge request, v2g discharge offer) at the terminals for this tick.

    A vehicle above its departure floor offers discharge and asks nothing;
    below it, it asks to charge.
    """
    if not e.is_plugged(tick):
        return 0.0, 0.0
    if e.v2g_enabled and e.soc > e.depart_soc_min:
        spare = (e.soc - e.depart_soc_min) * e.eta_discharge / tick_seconds
        return 0.0, min(e.p_discharge_max, spare)
    return max_charge(e, tick_seconds), 0.0


@dataclass(frozen=True)
class LoadUnit:
    device_id: str
    demand: tuple[tuple[tuple[int, float], ...], ...] = ((),)

    def __post_init__(self):
        if not self.demand:
            raise ConfigError(f"load {self.device_id}: demand schedule must be non-empty")
        for row in self.demand:
            for cls, watts in row:
                check_priority(cls)
                if watts < 0:
                    raise ConfigError(f"load {self.device_id}: negative demand")


def load_request(l: LoadUnit, t: SimTime) -> list[tuple[int, float]]:
    row = _wrap(l.demand, t.tick)
    return sorted(row, key=lambda cw: cw[0])  # sort is stable: same-class order kept


@dataclass(frozen=True)
class GridFeed:
    device_id: str
    import_limit: float
    export_limit: float = 0.0
    price_import: float = 0.25
    price_export: float = 0.05
    available: tuple[bool, ...] = (True,)
    outage: bool = field(default=False)

    def is_available(self, tick: int) -> bool:
        return not self.outage and _wrap(self.available, tick)

    def limits(self, tick: int) -> tuple[float, float]:
        if not self.is_available(tick):
            return 0.0, 0.0
        return self.import_limit, self.export_limit
