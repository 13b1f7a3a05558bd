"""Canonical wire encoding for Energy Protocol messages.

One message per line: a UTF-8 JSON object with keys sorted, no whitespace
between tokens, numbers in shortest round-trip form (integral floats are
written as integers) and a single trailing newline. ``decode`` accepts only
bytes that ``encode`` would have produced.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Any

from ..core import AuthToken, EnergyNetError, digest_of, mint_token

_MAX_SAFE_INT = 2**53


class WireError(EnergyNetError):
    pass


class Malformed(WireError):
    pass


class NonCanonical(WireError):
    pass


class UnknownType(WireError):
    pass


class MsgType(str, Enum):
    ADVERTISE = "Advertise"
    REQUEST = "Request"
    OFFER = "Offer"
    ACCEPT = "Accept"
    GRANT = "Grant"
    RELEASE = "Release"
    WITHDRAW = "Withdraw"
    HEARTBEAT = "Heartbeat"
    ROUTE_ANNOUNCE = "RouteAnnounce"


_TYPES = {t.value: t for t in MsgType}


def normalize(value: Any) -> Any:
    """Map a JSON-able value onto its canonical Python form."""
    if isinstance(value, bool) or value is None or isinstance(value, str):
        return value
    if isinstance(value, int):
        return value
    if isinstance(value, float):
        if not math.isfinite(value):
            raise ValueError("non-finite numbers have no canonical encoding")
        if value.is_integer() and abs(value) < _MAX_SAFE_INT:
            return int(value)
        return value
    if isinstance(value, Enum):
        return normalize(value.value)
    if isinstance(value, dict):
        out = {}
        for k, v in value.items():
            if not isinstance(k, str):
                raise TypeError(f"object keys must be strings, got {k!r}")
            out[k] = normalize(v)
        return out
    if isinstance(value, (list, tuple)):
        return [normalize(v) for v in value]
    if isinstance(value, bytes):
        return value.hex()
    raise TypeError(f"cannot encode {type(value).__name__}")


def canonical_dumps(obj: Any) -> bytes:
    text = json.dumps(normalize(obj), sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)
    return text.encode("utf-8") + b"\n"


def _reject_constant(name):
    raise ValueError(f"{name} is not valid JSON")


_decoder = json.JSONDecoder(parse_constant=_reject_constant)


def canonical_loads(b: bytes) -> Any:
    """Parse one canonical line; raises Malformed or NonCanonical."""
    if not isinstance(b, (bytes, bytearray)) or not b.endswith(b"\n"):
        raise Malformed("message must be newline-terminated")
    try:
        text = bytes(b[:-1]).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise Malformed(f"invalid UTF-8: {exc}") from None
    try:
        obj, end = _decoder.raw_decode(text)
    except ValueError as exc:
        raise Malformed(str(exc)) from None
    if end != len(text):
        raise NonCanonical("trailing data after JSON value")
    if canonical_dumps(obj) != bytes(b):
        raise NonCanonical("bytes differ from the canonical form")
    return obj


@dataclass(frozen=True)
class EPMessage:
    msg_type: MsgType
    sender: str
    seq: int
    tick: int
    body: dict = field(default_factory=dict)
    token: AuthToken | None = None

    def envelope(self) -> dict:
        out = {"msg_type": self.msg_type.value, "sender": self.sender, "seq": self.seq, "tick": self.tick}
        if self.body:
            out["body"] = self.body
        return out

    def to_json(self) -> dict:
        out = self.envelope()
        out["token"] = self.token.to_json() if self.token else None
        return out

    def digest(self) -> bytes:
        """Digest of everything except the token; what the token signs."""
        return digest_of(canonical_dumps(self.envelope()))

    def signed(self, nonce: int | None = None) -> EPMessage:
        nonce = self.seq if nonce is None else nonce
        return replace(self, token=mint_token(self.sender, nonce, self.digest()))


def encode(m: EPMessage) -> bytes:
    return canonical_dumps(m.to_json())


_ENVELOPE = {"msg_type", "sender", "seq", "tick", "token", "body"}


def _is_int(v) -> bool:
    return isinstance(v, int) and not isinstance(v, bool)


def decode(b: bytes) -> EPMessage:
    if not isinstance(b, (bytes, bytearray)) or not b.endswith(b"\n"):
        raise Malformed("message must be newline-terminated")
    try:
        text = bytes(b[:-1]).decode("utf-8")
        obj, end = _decoder.raw_decode(text)
    except (UnicodeDecodeError, ValueError) as exc:
        raise Malformed(str(exc)) from None
    if end != len(text):
        raise NonCanonical("trailing data after JSON value")
    if not isinstance(obj, dict):
        raise Malformed("message must be a JSON object")
    missing = {"msg_type", "sender", "seq", "tick", "token"} - obj.keys()
    if missing or not obj.keys() <= _ENVELOPE:
        raise Malformed(f"bad envelope fields: missing {sorted(missing)}, extra {sorted(obj.keys() - _ENVELOPE)}")
    if not isinstance(obj["msg_type"], str):
        raise Malformed("msg_type must be a string")
    if obj["msg_type"] not in _TYPES:
        raise UnknownType(obj["msg_type"])
    if not isinstance(obj["sender"], str) or not _is_int(obj["seq"]) or not _is_int(obj["tick"]):
        raise Malformed("sender must be a string; seq and tick integers")
    if obj["seq"] < 0 or obj["tick"] < 0:
        raise Malformed("seq and tick must be non-negative")
    body = obj.get("body", {})
    if not isinstance(body, dict) or ("body" in obj and not body):
        raise Malformed("body must be a non-empty object when present")
    tok = obj["token"]
    token = None
    if tok is not None:
        try:
            if not isinstance(tok, dict) or set(tok) != {"nonce", "principal", "signature"}:
                raise ValueError
            if not _is_int(tok["nonce"]) or not isinstance(tok["principal"], str):
                raise ValueError
            token = AuthToken.from_json(tok)
        except (TypeError, ValueError, KeyError):
            raise Malformed("token must carry principal, integer nonce and hex signature") from None
        if token.signature.hex() != tok["signature"]:
            raise NonCanonical("signature hex must be lowercase")
    msg = EPMessage(_TYPES[obj["msg_type"]], obj["sender"], obj["seq"], obj["tick"], body, token)
    if encode(msg) != bytes(b):
        raise NonCanonical("bytes differ from the canonical form")
    return msg
