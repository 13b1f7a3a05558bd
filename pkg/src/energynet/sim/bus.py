"""In-process Energy Protocol transport: sequencing, signing, latency, loss and duplication."""

from __future__ import annotations

import heapq
from collections import Counter
from dataclasses import replace

from ..core import verify_token
from ..ep.wire import EPMessage, WireError, decode, encode

CACHE_SIZE = 4096


class MessageBus:
    """Messages travel as canonical bytes and arrive ``latency`` ticks after sending.

    Every sender has its own sequence counter; receivers drop anything whose
    sequence number they have already seen from that sender.
    """

    def __init__(self, duplicate_every: int = 0):
        self.queue: list[tuple[int, int, str, bytes]] = []
        self.n = 0
        self.seq: Counter = Counter()
        self.last_seen: dict[tuple[str, str], int] = {}
        self.stats: Counter = Counter()
        self.losses: list[tuple[int, int | None, str]] = []  # (start, end, target)
        self.duplicate_every = duplicate_every
        self._checked: dict[bytes, tuple] = {}

    def lossy(self, now: int, *parties: str) -> bool:
        for start, end, target in self.losses:
            if start <= now and (end is None or now < end) and (target == "*" or target in parties):
                return True
        return False

    def send(self, draft: EPMessage, recipient: str, now: int, latency: int = 1) -> EPMessage:
        self.seq[draft.sender] += 1
        m = replace(draft, seq=self.seq[draft.sender], tick=now, token=None).signed()
        raw = encode(m)
        self.stats["sent"] += 1
        if self.lossy(now, draft.sender, recipient):
            self.stats["lost"] += 1
            return m
        self._push(now + latency, recipient, raw)
        if self.duplicate_every and self.stats["sent"] % self.duplicate_every == 0:
            self.stats["duplicated"] += 1
            self._push(now + latency, recipient, raw)
        return m

    def fanout(self, draft: EPMessage, recipients, now: int, latency: int = 1) -> EPMessage:
        """One signed message delivered to many receivers (flooding)."""
        self.seq[draft.sender] += 1
        m = replace(draft, seq=self.seq[draft.sender], tick=now, token=None).signed()
        raw = encode(m)
        for r in recipients:
            self.stats["sent"] += 1
            if self.lossy(now, draft.sender, r):
                self.stats["lost"] += 1
                continue
            self._push(now + latency, r, raw)
        return m

    def inject(self, raw: bytes, recipient: str, tick: int) -> None:
        """Put arbitrary bytes on the wire (forgery and fuzz injection)."""
        self.stats["injected"] += 1
        self._push(tick, recipient, raw)

    def _push(self, tick: int, recipient: str, raw: bytes) -> None:
        heapq.heappush(self.queue, (tick, self.n, recipient, raw))
        self.n += 1

    def due(self, now: int) -> list[tuple[str, bytes]]:
        out = []
        while self.queue and self.queue[0][0] <= now:
            _, _, recipient, raw = heapq.heappop(self.queue)
            out.append((recipient, raw))
        return out

    def pending(self) -> int:
        return len(self.queue)

    def receive(self, recipient: str, raw: bytes) -> tuple[EPMessage | None, str | None]:
        """Decode and authenticate; returns (message, None) or (None, reason)."""
        hit = self._checked.get(raw)
        if hit is None:
            # flooded messages reach many receivers as the same bytes; decode and verify once
            try:
                m = decode(raw)
                hit = (m, m.token is not None and m.token.principal == m.sender and verify_token(m.token, m.digest()))
            except WireError as exc:
                hit = (None, type(exc).__name__)
            if len(self._checked) > CACHE_SIZE:
                self._checked.clear()
            self._checked[raw] = hit
        m, ok = hit
        if m is None:
            self.stats["malformed"] += 1
            return None, ok
        if not ok:
            self.stats["bad_token"] += 1
            return m, "BadToken"
        key = (recipient, m.sender)
        if m.seq <= self.last_seen.get(key, 0):
            self.stats["duplicate"] += 1
            return None, "Duplicate"
        self.last_seen[key] = m.seq
        self.stats["delivered"] += 1
        return m, None
