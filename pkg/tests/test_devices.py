import pytest
from hypothesis import given
from hypothesis import strategies as st

from energynet.core import ConfigError, SimTime
from energynet.devices import (
    BatteryUnit,
    DeviceError,
    EvUnit,
    GridFeed,
    LoadUnit,
    NotPlugged,
    OverCharge,
    PowerLimit,
    SolarUnit,
    UnderCharge,
    V2gDisabled,
    battery_step,
    ev_step,
    load_request,
    max_charge,
    max_discharge,
    solar_output,
)

MJ = 1e6


@pytest.mark.parametrize("peak,tick,watts", [(5000, 2, 5000), (5000, 3, 0), (0, 1, 0), (5000, 1, 2500)])
def test_solar_output(peak, tick, watts):
    u = SolarUnit("pv", peak, (0, 0.5, 1.0))
    assert solar_output(u, SimTime(tick)) == watts


def test_solar_config_errors():
    with pytest.raises(ConfigError):
        SolarUnit("pv", 1, ())
    with pytest.raises(ConfigError):
        SolarUnit("pv", 1, (1.5,))


def bat(**kw):
    base = dict(device_id="b", capacity=36 * MJ, soc=18 * MJ, p_charge_max=5000, p_discharge_max=5000,
                eta_charge=1.0, eta_discharge=1.0)
    base.update(kw)
    return BatteryUnit(**base)


def test_battery_charge_examples():
    assert battery_step(bat(), 1000, SimTime(0, 60)).soc == pytest.approx(18.06 * MJ, rel=1e-12)
    assert battery_step(bat(eta_charge=0.98), 1000, SimTime(0, 60)).soc == pytest.approx(18.0588 * MJ, rel=1e-12)


def test_battery_errors():
    with pytest.raises(UnderCharge):
        battery_step(bat(soc=0), -100, SimTime(0))
    with pytest.raises(OverCharge):
        battery_step(bat(soc=36 * MJ), 100, SimTime(0))
    with pytest.raises(PowerLimit):
        battery_step(bat(), 6000, SimTime(0))
    with pytest.raises(PowerLimit):
        battery_step(bat(), -6000, SimTime(0))


def test_battery_limits_helpers():
    b = bat(soc=60_000.0, eta_discharge=0.5)
    assert max_discharge(b, 60) == pytest.approx(500)
    assert battery_step(b, -max_discharge(b, 60), SimTime(0)).soc == pytest.approx(0, abs=1e-6)
    full = bat(soc=36 * MJ - 60_000, eta_charge=0.5)
    assert max_charge(full, 60) == pytest.approx(2000)


@given(st.floats(0.5, 1.0), st.floats(0.5, 1.0), st.floats(1, 5000))
def test_round_trip_loss(eta_c, eta_d, p):
    b = bat(soc=0.0, eta_charge=eta_c, eta_discharge=eta_d)
    t = SimTime(0, 60)
    charged = battery_step(b, p, t)
    stored = charged.soc
    # deliver everything back out
    out_w = stored * eta_d / 60
    drained = battery_step(charged, -out_w, t)
    assert drained.soc == pytest.approx(0, abs=1e-6)
    assert out_w * 60 == pytest.approx(p * 60 * eta_c * eta_d, rel=1e-9)


@given(st.lists(st.floats(-6000, 6000), max_size=30))
def test_soc_never_leaves_bounds(requests):
    b = bat(capacity=1 * MJ, soc=0.5 * MJ)
    t = SimTime(0, 60)
    for p in requests:
        try:
            nb = battery_step(b, p, t)
        except DeviceError:
            continue  # rejected, never clamped
        assert 0 <= nb.soc <= nb.capacity
        if p >= 0:
            assert nb.soc == pytest.approx(b.soc + p * 60, abs=1e-6 * MJ)
        b = nb


def ev(**kw):
    base = dict(device_id="ev", capacity=36 * MJ, soc=18 * MJ, p_charge_max=7000, p_discharge_max=7000,
                eta_charge=1.0, eta_discharge=1.0, plugged=(True, False))
    base.update(kw)
    return EvUnit(**base)


def test_ev_rules():
    with pytest.raises(NotPlugged):
        ev_step(ev(), 100, SimTime(1))
    assert ev_step(ev(), 0, SimTime(1)).soc == 18 * MJ
    with pytest.raises(V2gDisabled):
        ev_step(ev(), -500, SimTime(0))
    assert ev_step(ev(), 1000, SimTime(0)).soc == battery_step(bat(), 1000, SimTime(0)).soc
    assert ev_step(ev(v2g_enabled=True), -500, SimTime(0)).soc == pytest.approx(18 * MJ - 30_000)


def test_ev_departure_shortfall():
    e = ev(depart_soc_min=20 * MJ, depart_tick=2, plugged=(True,))
    e = ev_step(e, 0, SimTime(2))
    assert e.departure_shortfall == pytest.approx(2 * MJ)


def test_load_request_order():
    l = LoadUnit("l", (((5, 1800.0), (0, 200.0), (5, 100.0)), ()))
    assert load_request(l, SimTime(0)) == [(0, 200.0), (5, 1800.0), (5, 100.0)]
    assert load_request(l, SimTime(1)) == []
    with pytest.raises(ConfigError):
        LoadUnit("l", (((0, -1.0),),))


def test_grid_feed_outage():
    g = GridFeed("g", 1000, 500, available=(True, False))
    assert g.limits(0) == (1000, 500)
    assert g.limits(1) == (0.0, 0.0)
    from dataclasses import replace
    assert replace(g, outage=True).limits(0) == (0.0, 0.0)
