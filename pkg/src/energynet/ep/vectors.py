"""Golden wire vectors: fixed messages, their canonical bytes and how a receiver must treat them."""

from __future__ import annotations

from ..core import EnergyQuantum, mint_token
from ..eros.router import Grant
from .routing import RouteAnnounce
from .wire import EPMessage, MsgType, WireError, canonical_dumps, decode, encode

_TERMS = {"src": ["r1", "c0"], "dst": ["r2", "c1"], "power_w": 2500.5, "duration": 60, "start_tick": 12,
          "voltage": 400, "priority": 0, "kind": "link", "max_price": 1.0}


def _grant() -> Grant:
    g = Grant("g:s1", ("r1", "c0"), ("r2", "c1"), EnergyQuantum(2500.5, 60, 400), 12, price=0.08)
    d = g.digest()
    g.src_token = mint_token("r1", 7, d)
    g.dst_token = mint_token("r2", 7, d)
    return g


def _valid() -> list[tuple[str, EPMessage]]:
    sess = {"session": "s1"}
    offer = dict(_TERMS, price=0.08, grant_id="g:s1")
    del offer["max_price"]
    msgs = [
        ("advertise", EPMessage(MsgType.ADVERTISE, "r1", 1, 5, {
            "elan": "e1", "price": 0.08, "storage_headroom_j": 1.8e7, "supply_w": [1200.0] * 8, "ttl": 15})),
        ("advertise_zero_supply", EPMessage(MsgType.ADVERTISE, "r2", 1, 5, {
            "elan": "e1", "price": 0, "storage_headroom_j": 0, "supply_w": [0] * 8, "ttl": 15})),
        ("request", EPMessage(MsgType.REQUEST, "r2", 2, 9, dict(_TERMS, session="s1", requester="r2",
                                                                responder="r1", deadline=14))),
        ("request_unicode_sender", EPMessage(MsgType.REQUEST, "gébäude-7", 1, 0, dict(
            _TERMS, session="s9", requester="gébäude-7", responder="r1", deadline=5))),
        ("offer", EPMessage(MsgType.OFFER, "r1", 3, 10, dict(offer, **sess))),
        ("accept", EPMessage(MsgType.ACCEPT, "r2", 3, 11, dict(sess, grant_id="g:s1",
                                                               grant_token=mint_token("r2", 7, _grant().digest()).to_json()))),
        ("grant", EPMessage(MsgType.GRANT, "r1", 4, 12, dict(sess, grant=_grant().to_json()))),
        ("release", EPMessage(MsgType.RELEASE, "r2", 4, 30, {"grant_id": "g:s1"})),
        ("withdraw_price", EPMessage(MsgType.WITHDRAW, "r1", 5, 10, dict(sess, reason="price"))),
        ("withdraw_expired", EPMessage(MsgType.WITHDRAW, "r2", 6, 20, dict(sess, reason="expired"))),
        ("heartbeat_no_body", EPMessage(MsgType.HEARTBEAT, "r1/sup0", 17, 17)),
        ("heartbeat_state", EPMessage(MsgType.HEARTBEAT, "r1/sup0", 18, 18, {"state_version": 18})),
        ("route_announce", EPMessage(MsgType.ROUTE_ANNOUNCE, "gw1", 1, 0, {"routes": [
            RouteAnnounce("e1", ("e1",), 0.08, 0, 0.1, 3).to_json(),
            RouteAnnounce("e3", ("e1", "e2", "e3"), 0.12, 2, 0.3, 7).to_json()]})),
        ("route_announce_empty", EPMessage(MsgType.ROUTE_ANNOUNCE, "gw2", 2, 5, {"routes": []})),
        ("large_integers", EPMessage(MsgType.RELEASE, "r9", 2**40, 2**31, {"grant_id": "g:big"})),
        ("negative_and_small_floats", EPMessage(MsgType.WITHDRAW, "r3", 1, 1, {
            "session": "s2", "reason": "price", "delta": -0.000125, "ratio": 1e-7})),
    ]
    return [(name, m.signed()) for name, m in msgs]


def build_vectors() -> list[dict]:
    """Every vector holds the wire line as ``bytes_hex``, its parsed form (or null) and the receiver outcome."""
    out = []
    for name, m in _valid():
        out.append({"name": name, "msg_type": m.msg_type.value, "bytes_hex": encode(m).hex(),
                    "expect": "ok", "parsed": m.to_json()})
    good = dict(_valid())
    req = good["request"]

    # the same request re-keyed, spaced or re-spelled: all must be rejected
    forged = EPMessage(req.msg_type, req.sender, req.seq, req.tick, req.body,
                       mint_token("mallory", req.seq, req.digest()))
    tampered = EPMessage(req.msg_type, req.sender, req.seq, req.tick, dict(req.body, power_w=9999), req.token)
    line = encode(req).decode("utf-8")
    bad = [
        ("forged_principal", encode(forged).decode("utf-8"), "BadToken"),
        ("tampered_body", encode(tampered).decode("utf-8"), "BadToken"),
        ("pretty_printed", line.replace(",", ", ", 1), "NonCanonical"),
        ("float_spelled_integer", line.replace('"duration":60', '"duration":60.0'), "NonCanonical"),
        ("unknown_type", line.replace('"msg_type":"Request"', '"msg_type":"Teleport"'), "UnknownType"),
        ("missing_newline", line.rstrip("\n"), "Malformed"),
        ("not_json", "{\"msg_type\":\n", "Malformed"),
        ("nan_value", line.replace('"max_price":1', '"max_price":NaN'), "Malformed"),
        ("missing_token_field", canonical_dumps({k: v for k, v in req.to_json().items() if k != "token"}).decode(),
         "Malformed"),
    ]
    for name, text, expect in bad:
        out.append({"name": name, "msg_type": "Request", "bytes_hex": text.encode("utf-8").hex(), "expect": expect,
                    "parsed": None})
    return out


def check_vector(v: dict) -> str:
    """Receiver outcome for a vector: ok, BadToken or the wire error class name."""
    from ..core import verify_token

    try:
        m = decode(bytes.fromhex(v["bytes_hex"]))
    except WireError as exc:
        return type(exc).__name__
    if m.token is None or m.token.principal != m.sender or not verify_token(m.token, m.digest()):
        return "BadToken"
    return "ok"


def vectors_bytes() -> bytes:
    return b"".join(canonical_dumps(v) for v in build_vectors())
