"""Grant negotiation sessions and the gateway's inbound default-deny rule."""

from __future__ import annotations

import hashlib
import logging
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Container, Iterable

from ..core import AuthToken, EnergyNetError, EnergyQuantum, Side, mint_token, verify_token
from ..eros.router import EnergyRouter, Grant, grant_digest
from .wire import EPMessage, MsgType

log = logging.getLogger(__name__)

DEFAULT_DEADLINE = 5


class IllegalTransition(EnergyNetError):
    pass


class Unsolicited(EnergyNetError):
    pass


class SessionState(str, Enum):
    IDLE = "Idle"
    REQUESTED = "Requested"
    OFFERED = "Offered"
    ACCEPTED = "Accepted"
    GRANTED = "Granted"
    REJECTED = "Rejected"
    EXPIRED = "Expired"


S = SessionState
TERMINAL = frozenset({S.GRANTED, S.REJECTED, S.EXPIRED})
SESSION_MESSAGES = (MsgType.REQUEST, MsgType.OFFER, MsgType.ACCEPT, MsgType.GRANT, MsgType.RELEASE, MsgType.WITHDRAW)

TRANSITIONS = {
    (S.IDLE, MsgType.REQUEST): S.REQUESTED,
    (S.REQUESTED, MsgType.OFFER): S.OFFERED,
    (S.OFFERED, MsgType.ACCEPT): S.ACCEPTED,
    (S.ACCEPTED, MsgType.GRANT): S.GRANTED,
    # either side may walk away before the deal is accepted
    (S.REQUESTED, MsgType.WITHDRAW): S.REJECTED,
    (S.OFFERED, MsgType.WITHDRAW): S.REJECTED,
}


def transition(state: SessionState, msg_type: MsgType) -> SessionState:
    try:
        return TRANSITIONS[(state, msg_type)]
    except KeyError:
        raise IllegalTransition(f"{msg_type.value} is not legal in state {state.value}") from None


def session_nonce(session_id: str, salt: str = "") -> int:
    return int.from_bytes(hashlib.sha256(f"{session_id}/{salt}".encode()).digest()[:8], "big")


@dataclass(frozen=True)
class NegotiationSession:
    """One side's view of a request/offer/accept/grant exchange.

    ``me`` is the principal holding this copy. ``terms`` carries the
    requested grant parameters (``src``, ``dst``, ``power_w``, ``duration``,
    ``start_tick``, ``voltage``, ``priority``, ``kind``, ``max_price``).
    ``ask_price`` and ``capacity_w`` are the responder's offer policy.
    """

    session_id: str
    requester: str
    responder: str
    me: str
    state: SessionState = S.IDLE
    deadline_tick: int = DEFAULT_DEADLINE
    terms: dict = field(default_factory=dict)
    ask_price: float = 0.0
    capacity_w: float = float("inf")
    offer: dict | None = None
    violations: tuple[str, ...] = ()

    @property
    def terminal(self) -> bool:
        return self.state in TERMINAL


def _draft(sender: str, msg_type: MsgType, body: dict, now: int) -> EPMessage:
    return EPMessage(msg_type, sender, 0, now, body)


def open_request(s: NegotiationSession, now: int, stamp: Callable | None = None) -> tuple[NegotiationSession, EPMessage]:
    """Requester side: emit the Request and move Idle -> Requested."""
    body = dict(s.terms)
    body["session"] = s.session_id
    body["requester"] = s.requester
    body["responder"] = s.responder
    body["deadline"] = s.deadline_tick
    msg = (stamp or _draft)(s.me, MsgType.REQUEST, body, now)
    return replace(s, state=transition(s.state, MsgType.REQUEST)), msg


def grant_from_offer(offer: dict) -> Grant:
    return Grant(
        grant_id=offer["grant_id"], src=tuple(offer["src"]), dst=tuple(offer["dst"]),
        quantum=EnergyQuantum(offer["power_w"], offer["duration"], offer["voltage"]),
        start_tick=offer["start_tick"], price=offer["price"], priority=offer["priority"], kind=offer["kind"],
    )


def _offer_terms(s: NegotiationSession, req: dict) -> dict:
    g = {k: req[k] for k in ("src", "dst", "duration", "start_tick", "voltage", "priority", "kind")}
    g["power_w"] = min(req["power_w"], s.capacity_w)
    g["price"] = s.ask_price
    g["grant_id"] = f"g:{s.session_id}"
    return g


def _sign_terms(principal: str, session_id: str, terms: dict):
    d = grant_digest(grant_from_offer(terms).terms())
    return mint_token(principal, session_nonce(session_id, principal), d)


def negotiate_step(
    s: NegotiationSession, m: EPMessage, now: int, stamp: Callable | None = None
) -> tuple[NegotiationSession, list[EPMessage], Grant | None]:
    """Advance ``s`` with inbound ``m`` and produce this side's reply.

    Deadline expiry wins over any message: the session becomes Expired and
    a Withdraw goes out. A message the state machine does not allow raises
    :class:`IllegalTransition` and leaves the session as it was.
    """
    stamp = stamp or _draft
    if m.body.get("session") != s.session_id:
        raise ValueError(f"message for session {m.body.get('session')!r} delivered to {s.session_id!r}")
    if s.terminal:
        log.warning("session %s: %s after terminal state %s", s.session_id, m.msg_type.value, s.state.value)
        raise IllegalTransition(f"session {s.session_id} is {s.state.value}")
    if now > s.deadline_tick:
        out = [stamp(s.me, MsgType.WITHDRAW, {"session": s.session_id, "reason": "expired"}, now)]
        return replace(s, state=S.EXPIRED), out, None
    try:
        state = transition(s.state, m.msg_type)
    except IllegalTransition as exc:
        log.warning("session %s: %s", s.session_id, exc)
        raise
    s = replace(s, state=state)
    body = {"session": s.session_id}

    if m.msg_type == MsgType.REQUEST:
        s, out = respond(replace(s, terms=request_terms(m)), now, stamp)
        return s, out, None

    if m.msg_type == MsgType.OFFER:
        offer = {k: m.body[k] for k in ("src", "dst", "power_w", "duration", "start_tick", "voltage",
                                       "priority", "kind", "price", "grant_id")}
        if offer["price"] > s.terms.get("max_price", float("inf")):
            return replace(s, state=transition(s.state, MsgType.WITHDRAW)), [
                stamp(s.me, MsgType.WITHDRAW, dict(body, reason="price"), now)], None
        tok = _sign_terms(s.me, s.session_id, offer)
        s = replace(s, offer=offer, state=transition(s.state, MsgType.ACCEPT))
        return s, [stamp(s.me, MsgType.ACCEPT, dict(body, grant_id=offer["grant_id"], grant_token=tok.to_json()), now)], None

    if m.msg_type == MsgType.ACCEPT:
        g = grant_from_offer(s.offer)
        try:
            req_tok = AuthToken.from_json(m.body["grant_token"])
        except (KeyError, TypeError, ValueError):
            req_tok = None
        if req_tok is None or req_tok.principal != s.requester or not verify_token(req_tok, g.digest()):
            s = replace(s, violations=s.violations + ("accept token did not verify",))
            # Accepted has no legal Withdraw; the session dies as Rejected without a grant
            return replace(s, state=S.REJECTED), [stamp(s.me, MsgType.WITHDRAW, dict(body, reason="token"), now)], None
        my_tok = _sign_terms(s.me, s.session_id, s.offer)
        _attach_tokens(g, {s.requester: req_tok, s.me: my_tok})
        s = replace(s, state=transition(s.state, MsgType.GRANT))
        return s, [stamp(s.me, MsgType.GRANT, dict(body, grant=g.to_json()), now)], g

    if m.msg_type == MsgType.GRANT:
        g = Grant.from_json(m.body["grant"])
        if g.terms() != grant_from_offer(s.offer).terms() or not g.tokens_valid():
            s = replace(s, violations=s.violations + ("grant did not match accepted terms",))
            return s, [], None
        return s, [], g

    # Withdraw
    return s, [], None


REQUEST_FIELDS = ("src", "dst", "power_w", "duration", "start_tick", "voltage", "priority", "kind", "max_price")


def request_terms(m: EPMessage) -> dict:
    return {k: m.body[k] for k in REQUEST_FIELDS}


def respond(s: NegotiationSession, now: int, stamp: Callable | None = None) -> tuple[NegotiationSession, list[EPMessage]]:
    """Responder side, state Requested: offer at ``ask_price`` or withdraw."""
    stamp = stamp or _draft
    body = {"session": s.session_id}
    req = s.terms
    if s.ask_price > req["max_price"] or s.capacity_w <= 0:
        return replace(s, state=transition(s.state, MsgType.WITHDRAW)), [
            stamp(s.me, MsgType.WITHDRAW, dict(body, reason="price"), now)]
    offer = _offer_terms(s, req)
    return replace(s, state=transition(s.state, MsgType.OFFER), offer=offer), [
        stamp(s.me, MsgType.OFFER, dict(body, **offer), now)]


def _attach_tokens(g: Grant, tokens: dict) -> None:
    g.src_token = tokens.get(g.src[0])
    g.dst_token = tokens.get(g.dst[0])
    g._verified = None


def firewall_handshake(
    gateway: EnergyRouter,
    request: EPMessage,
    port_id: str,
    now: int = 0,
    outbound: bool = False,
    trusted: Container[str] = (),
    deadline: int = DEFAULT_DEADLINE,
    ask_price: float = 0.0,
) -> NegotiationSession:
    """Open a session for ``request`` crossing a boundary port of ``gateway``.

    Outbound requests (initiated from the LAN side) always pass. Inbound
    requests from principals outside ``trusted`` need a matching inbound
    rule when the router enforces them (gateway role).
    """
    body = request.body
    sid = body["session"]
    if outbound:
        s = NegotiationSession(sid, gateway.router_id, body["responder"], gateway.router_id,
                               deadline_tick=body.get("deadline", now + deadline),
                               terms={k: body[k] for k in body if k not in ("session", "requester", "responder", "deadline")})
        return replace(s, state=transition(s.state, MsgType.REQUEST))
    spec = gateway.ports.get(port_id)
    if spec is None or spec.logic_side not in (Side.B, Side.C):
        raise ValueError(f"inbound request must arrive on a B or C port, got {port_id!r}")
    if gateway.role == "gateway" and request.sender not in trusted and not _rule_matches(gateway.inbound_rules, request, port_id):
        gateway.deny_log.append({"tick": now, "router": gateway.router_id, "grant_id": None, "src": [request.sender, port_id],
                                 "dst": [gateway.router_id, port_id], "watts": 0, "reason": "Unsolicited"})
        log.info("%s: unsolicited %s from %s denied", gateway.router_id, request.msg_type.value, request.sender)
        raise Unsolicited(f"{gateway.router_id}: unsolicited request from {request.sender}")
    s = NegotiationSession(sid, request.sender, gateway.router_id, gateway.router_id,
                           deadline_tick=body.get("deadline", now + deadline), ask_price=ask_price,
                           terms=request_terms(request))
    return replace(s, state=transition(s.state, MsgType.REQUEST))


def _rule_matches(rules: Iterable[dict], m: EPMessage, port_id: str) -> bool:
    for rule in rules:
        if rule.get("from", "*") not in ("*", m.sender):
            continue
        if rule.get("msg_type", "Request") != m.msg_type.value:
            continue
        if rule.get("port") not in (None, port_id):
            continue
        return True
    return False
