"""Energy Protocol: wire format, grant negotiation, resource adverts and inter-ELAN routing."""

from .adverts import ResourceAdvert, advertise_cycle
from .negotiation import (
    IllegalTransition, NegotiationSession, SessionState, Unsolicited, firewall_handshake, negotiate_step,
    open_request, respond, transition,
)
from .routing import NoRoute, Policy, RouteAnnounce, RouteTable, select_route
from .wire import EPMessage, Malformed, MsgType, NonCanonical, UnknownType, WireError, canonical_dumps, decode, encode
