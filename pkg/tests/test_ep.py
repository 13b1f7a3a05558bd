import itertools
import json
import random
from dataclasses import replace

import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from energynet.core import PortSpec, Side
from energynet.ep import (
    EPMessage,
    IllegalTransition,
    Malformed,
    MsgType,
    NegotiationSession,
    NonCanonical,
    NoRoute,
    Policy,
    ResourceAdvert,
    RouteAnnounce,
    RouteTable,
    SessionState,
    UnknownType,
    Unsolicited,
    advertise_cycle,
    canonical_dumps,
    decode,
    encode,
    firewall_handshake,
    negotiate_step,
    open_request,
    select_route,
    transition,
)
from energynet.ep.negotiation import SESSION_MESSAGES, TRANSITIONS
from energynet.ep.routing import RESILIENCE_POLICY
from energynet.ep.vectors import build_vectors, check_vector
from energynet.eros import EnergyRouter

# ---- wire ---------------------------------------------------------------

ident = st.text(st.characters(blacklist_categories=("Cs",)), min_size=1, max_size=12)
scalars = st.one_of(st.none(), st.booleans(), st.integers(-2**53 + 1, 2**53 - 1),
                    st.floats(allow_nan=False, allow_infinity=False), ident)
values = st.recursive(scalars, lambda inner: st.one_of(st.lists(inner, max_size=4),
                                                       st.dictionaries(ident, inner, max_size=4)), max_leaves=12)
messages = st.builds(
    lambda t, sender, seq, tick, body: EPMessage(t, sender, seq, tick, body).signed(),
    st.sampled_from(list(MsgType)), ident, st.integers(0, 2**40), st.integers(0, 2**31),
    st.dictionaries(ident, values, max_size=5),
)


@settings(max_examples=300)
@given(messages)
def test_roundtrip(m):
    b = encode(m)
    back = decode(b)
    assert encode(back) == b
    assert back.msg_type == m.msg_type and back.sender == m.sender and back.token == m.token


def test_field_order_does_not_matter():
    a = EPMessage(MsgType.RELEASE, "r1", 3, 4, {"grant_id": "g", "a": 1})
    b = EPMessage(MsgType.RELEASE, "r1", 3, 4, {"a": 1, "grant_id": "g"})
    assert encode(a) == encode(b)


def test_heartbeat_envelope_only():
    m = EPMessage(MsgType.HEARTBEAT, "r1/sup0", 1, 2).signed()
    obj = json.loads(encode(m))
    assert list(obj) == ["msg_type", "sender", "seq", "tick", "token"]


def test_decode_rejections():
    b = encode(EPMessage(MsgType.RELEASE, "r1", 3, 4, {"grant_id": "g"}).signed())
    obj = json.loads(b)
    unsorted = json.dumps(dict(reversed(list(obj.items()))), separators=(",", ":")).encode() + b"\n"
    with pytest.raises(NonCanonical):
        decode(unsorted)
    with pytest.raises(NonCanonical):
        decode(b[:-1] + b" \n")
    with pytest.raises(Malformed):
        decode(b[: len(b) // 2] + b"\n")
    with pytest.raises(Malformed):
        decode(b[:-1])
    with pytest.raises(UnknownType):
        decode(b.replace(b'"Release"', b'"Teleport"'))
    with pytest.raises(Malformed):
        decode(b"[1,2]\n")


def test_canonical_numbers():
    assert canonical_dumps({"b": 1.0, "a": 0.1}) == b'{"a":0.1,"b":1}\n'
    with pytest.raises(ValueError):
        canonical_dumps(float("nan"))


def test_golden_vectors_behave_as_recorded():
    vs = build_vectors()
    assert {v["msg_type"] for v in vs if v["expect"] == "ok"} == {t.value for t in MsgType}
    for v in vs:
        assert check_vector(v) == v["expect"], v["name"]
        if v["parsed"] is not None:
            assert json.loads(bytes.fromhex(v["bytes_hex"])) == v["parsed"]


# ---- negotiation --------------------------------------------------------

TERMS = {"src": ["r1", "c0"], "dst": ["r2", "c0"], "power_w": 5000, "duration": 10, "start_tick": 3,
         "voltage": 400, "priority": 0, "kind": "link", "max_price": 0.30}


def pair(deadline=10, ask=0.25):
    req = NegotiationSession("s1", "r2", "r1", "r2", deadline_tick=deadline, terms=dict(TERMS))
    resp = NegotiationSession("s1", "r2", "r1", "r1", deadline_tick=deadline, ask_price=ask)
    return req, resp


def test_happy_path():
    req, resp = pair()
    req, m = open_request(req, 0)
    resp, out, g = negotiate_step(resp, m, 1)
    assert resp.state == SessionState.OFFERED and out[0].msg_type == MsgType.OFFER
    assert out[0].body["price"] == 0.25 and out[0].body["power_w"] == 5000
    req, out, g = negotiate_step(req, out[0], 2)
    assert req.state == SessionState.ACCEPTED and out[0].msg_type == MsgType.ACCEPT and g is None
    resp, out, g = negotiate_step(resp, out[0], 3)
    assert resp.state == SessionState.GRANTED and g is not None and g.tokens_valid()
    req, out2, g2 = negotiate_step(req, out[0], 4)
    assert req.state == SessionState.GRANTED and g2.terms() == g.terms() and g2.tokens_valid()


def test_price_above_limit_withdraws():
    req, resp = pair(ask=0.5)
    req, m = open_request(req, 0)
    resp, out, g = negotiate_step(resp, m, 1)
    assert resp.state == SessionState.REJECTED and out[0].msg_type == MsgType.WITHDRAW and g is None


def test_offer_after_deadline_expires():
    req, resp = pair(deadline=1)
    req, m = open_request(req, 0)
    resp, out, _ = negotiate_step(resp, m, 1)
    req, out, g = negotiate_step(req, out[0], 2)
    assert req.state == SessionState.EXPIRED and g is None
    assert out[0].msg_type == MsgType.WITHDRAW and out[0].body["reason"] == "expired"


def test_accept_while_idle_is_illegal():
    req, resp = pair()
    m = EPMessage(MsgType.ACCEPT, "r2", 0, 0, {"session": "s1", "grant_id": "g:s1", "grant_token": None})
    with pytest.raises(IllegalTransition):
        negotiate_step(resp, m, 0)


def test_accept_with_forged_token_never_grants():
    req, resp = pair()
    req, m = open_request(req, 0)
    resp, out, _ = negotiate_step(resp, m, 1)
    req, out, _ = negotiate_step(req, out[0], 2)
    bad = replace(out[0], body=dict(out[0].body, grant_token=dict(out[0].body["grant_token"], principal="mallory")))
    resp, out, g = negotiate_step(resp, bad, 3)
    assert g is None and resp.state == SessionState.REJECTED


def test_thirty_six_illegal_pairs():
    illegal = [(s, t) for s, t in itertools.product(SessionState, SESSION_MESSAGES) if (s, t) not in TRANSITIONS]
    assert len(illegal) == 36
    for s, t in illegal:
        with pytest.raises(IllegalTransition):
            transition(s, t)


# ---- firewall handshake --------------------------------------------------

def gateway(rules=()):
    ports = {"c0": PortSpec("c0", Side.C, 150, 800, 5000), "load": PortSpec("load", Side.A, 207, 253, 5000)}
    return EnergyRouter("gw", ports, role="gateway", inbound_rules=list(rules))


def request_from(sender):
    body = dict(TERMS, session="s9", requester=sender, responder="gw", deadline=7)
    return EPMessage(MsgType.REQUEST, sender, 1, 0, body)


def test_unsolicited_inbound_denied():
    g = gateway()
    with pytest.raises(Unsolicited):
        firewall_handshake(g, request_from("outsider"), "c0")
    assert g.deny_log[-1]["reason"] == "Unsolicited"


def test_inbound_rule_admits():
    g = gateway([{"router": "gw", "from": "tso", "msg_type": "Request"}])
    s = firewall_handshake(g, request_from("tso"), "c0")
    assert s.state == SessionState.REQUESTED and s.requester == "tso"


def test_outbound_always_passes():
    s = firewall_handshake(gateway(), request_from("gw"), "c0", outbound=True)
    assert s.state == SessionState.REQUESTED and s.me == "gw"


def test_handshake_needs_boundary_port():
    with pytest.raises(ValueError):
        firewall_handshake(gateway(), request_from("x"), "load")


# ---- routing ------------------------------------------------------------

def test_select_route_examples():
    a = RouteAnnounce("eA", ("eA",), 0.20, 3)
    b = RouteAnnounce("eB", ("eB",), 0.25, 1)
    assert select_route([a, b]) == a
    c = RouteAnnounce("eC", ("eC",), 0.20, 1)
    assert select_route([a, c]) == c
    r1 = RouteAnnounce("e1", ("e1",), 0.10, resilience_class=2)
    r2 = RouteAnnounce("e2", ("e2",), 0.40, resilience_class=0)
    assert select_route([r1, r2], RESILIENCE_POLICY) == r2
    with pytest.raises(NoRoute):
        select_route([a, b], Policy(max_price=0.1))


route_st = st.builds(RouteAnnounce, st.sampled_from(["e1", "e2", "e3"]),
                     st.lists(st.sampled_from(["x", "y", "z"]), unique=True, max_size=3).map(tuple),
                     st.sampled_from([0.1, 0.2]), st.integers(0, 3), st.sampled_from([0.0, 0.5]))


@given(st.lists(route_st, min_size=1, max_size=6), st.randoms())
def test_select_route_ignores_order(cands, rnd):
    shuffled = list(cands)
    rnd.shuffle(shuffled)
    assert select_route(cands) == select_route(shuffled)


def test_route_table_rejects_loops_and_prepends():
    t = RouteTable("e1")
    assert not t.receive("e2", RouteAnnounce("e3", ("e2", "e1", "e3"), 0.1))
    assert not t.receive("e2", RouteAnnounce("e1", ("e1",), 0.1))
    assert t.receive("e2", RouteAnnounce("e3", ("e2", "e3"), 0.1, 1))
    own = RouteAnnounce("e1", ("e1",), 0.05)
    out = t.exports(own)
    assert out[0] == own and out[1].path == ("e1", "e2", "e3") and out[1].hops == 2
    t.withdraw_neighbour("e2")
    assert t.best("e3") is None


def test_route_announce_loop_free():
    with pytest.raises(ValueError):
        RouteAnnounce("e1", ("e1", "e2", "e1"), 0.1)


# ---- adverts ------------------------------------------------------------

def adv(rid, t, ttl=15):
    return ResourceAdvert(rid, "e", (100.0,) * 8, 0.0, 0.1, ttl, t)


def test_flood_reaches_all_members():
    tables = {r: {} for r in ("a", "b", "c")}
    tables = advertise_cycle(tables, [adv("a", 0), adv("b", 0), adv("c", 0)], 1)
    assert tables["a"] == tables["b"] == tables["c"] and len(tables["a"]) == 3


def test_advert_expiry():
    tables = advertise_cycle({"a": {}, "b": {}}, [adv("a", 0, ttl=2)], 1)
    assert "a" in tables["b"]
    tables = advertise_cycle(tables, [], 3)
    assert "a" not in tables["b"] and "a" not in tables["a"]


def test_dark_member_gets_nothing_new():
    tables = advertise_cycle({"a": {}, "b": {}}, [adv("a", 0)], 1, reachable=["a"])
    assert tables["b"] == {} and "a" in tables["a"]


def test_newer_advert_replaces_older():
    tables = advertise_cycle({"a": {}}, [adv("b", 0)], 0)
    newer = replace(adv("b", 2), price=0.5)
    tables = advertise_cycle(tables, [newer], 2)
    assert tables["a"]["b"].price == 0.5


def test_random_flood_converges():
    rng = random.Random(5)
    members = [f"r{i}" for i in range(8)]
    tables = {m: {} for m in members}
    for t in range(5):
        sent = [adv(m, t) for m in members if rng.random() < 0.7]
        tables = advertise_cycle(tables, sent, t)
    tables = advertise_cycle(tables, [adv(m, 5) for m in members], 5)
    assert all(tables[m] == tables[members[0]] for m in members)
