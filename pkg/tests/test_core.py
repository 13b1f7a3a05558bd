import pytest
from hypothesis import given
from hypothesis import strategies as st

from energynet.core import (
    ConfigError,
    EnergyQuantum,
    PortSpec,
    Side,
    SimTime,
    check_priority,
    digest_of,
    energy_of,
    mint_token,
    outranks,
    tier_name,
    verify_token,
)


@pytest.mark.parametrize("power,duration,ts,joules", [
    (1000, 1, 60, 60_000),
    (0, 5, 60, 0),
    (2500, 60, 60, 9_000_000),
])
def test_energy_of(power, duration, ts, joules):
    assert energy_of(EnergyQuantum(power, duration, 400), SimTime(0, ts)) == joules


def test_quantum_rejects_bad_values():
    with pytest.raises(ConfigError):
        EnergyQuantum(-1, 1, 400)
    with pytest.raises(ConfigError):
        EnergyQuantum(1, 0, 400)


def test_simtime_rules():
    t = SimTime(4, 30)
    assert t.next() == SimTime(5, 30)
    assert t.hours_per_tick == pytest.approx(30 / 3600)
    with pytest.raises(ConfigError):
        SimTime(-1)
    with pytest.raises(ConfigError):
        SimTime(0, 0)


def test_token_roundtrip_tamper_and_binding():
    d = digest_of(b"hello")
    tok = mint_token("r1", 42, d)
    assert verify_token(tok, d)
    flipped = bytes([tok.signature[0] ^ 1]) + tok.signature[1:]
    assert not verify_token(type(tok)(tok.principal, tok.nonce, flipped), d)
    assert not verify_token(tok, digest_of(b"other"))
    assert not verify_token(None, d)


def test_token_principal_is_bound():
    d = digest_of(b"x")
    tok = mint_token("r1", 1, d)
    assert not verify_token(type(tok)("r2", tok.nonce, tok.signature), d)


def test_token_json_roundtrip():
    tok = mint_token("gébäude", 2**63, digest_of(b"y"))
    assert type(tok).from_json(tok.to_json()) == tok


@given(st.integers(0, 7), st.integers(0, 7))
def test_priority_total_order(a, b):
    if a == b:
        assert not outranks(a, b)
    else:
        assert outranks(a, b) != outranks(b, a)


@pytest.mark.parametrize("bad", [-1, 8, 1.0, True, "0"])
def test_priority_range(bad):
    with pytest.raises(ConfigError):
        check_priority(bad)


def test_tier_names():
    assert [tier_name(c) for c in (0, 1, 2, 5, 7)] == ["critical", "critical", "essential", "normal", "deferrable"]


def test_port_spec_rules():
    p = PortSpec("c0", Side.C, 150, 800, 5000)
    assert p.current_kind == "DC" and p.efficiency == 0.98
    assert p.accepts_voltage(400) and not p.accepts_voltage(1200)
    assert PortSpec("a", "A", 207, 253, 1).current_kind == "AC"
    assert Side.B.is_boundary and Side.C.is_boundary
    assert not Side.A.is_boundary and not Side.D.is_boundary
    with pytest.raises(ConfigError):
        PortSpec("c0", Side.C, 100, 800, 5000)  # below the DC window
    with pytest.raises(ConfigError):
        PortSpec("c0", Side.C, 800, 400, 5000)
    with pytest.raises(ConfigError):
        PortSpec("c0", Side.D, 150, 800, 5000, efficiency=0)
