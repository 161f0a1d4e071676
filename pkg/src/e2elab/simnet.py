"""Deterministic in-process network.

A :class:`World` owns a virtual clock, a relay with one FIFO queue per
recipient, the prekey server, adversarial interceptors and an event log.
Nothing here reads the wall clock; a seed plus a script fully determines the
log.

Log lines are ``tick seq kind sender recipient bytes_hex`` where an empty
payload is written as ``-``.
"""

from __future__ import annotations

import hashlib
import random
import struct
from dataclasses import dataclass, field
from typing import Callable

from .crypto import CryptoSuite, make_toy_suite
from .errors import Conflict, NoSuchUser, PeerOffline
from .x3dh import PrekeyBundle, PrekeyServer

STATUS_ORDER = ("sent", "delivered", "read")
MODES = ("drop", "delay", "reorder", "replace", "record")


@dataclass(frozen=True)
class LogEntry:
    tick: int
    seq: int
    kind: str
    sender: str
    recipient: str
    payload: bytes

    def line(self) -> str:
        return f"{self.tick} {self.seq} {self.kind} {self.sender} {self.recipient} {self.payload.hex() or '-'}"


@dataclass
class DeliveryReceipt:
    message_id: int
    status: str = "sent"
    ticks: dict = field(default_factory=dict)

    def advance(self, status: str, tick: int) -> bool:
        """Move forward to ``status``; backwards or repeated moves are ignored."""
        if STATUS_ORDER.index(status) <= STATUS_ORDER.index(self.status):
            return False
        self.status = status
        self.ticks[status] = tick
        return True


@dataclass
class Interceptor:
    """Adversarial rule applied to relay traffic.

    ``first``/``last`` bound which matching messages (0-based count) are
    affected; ``probability`` thins the matches using the world's generator.
    """

    mode: str
    sender: str | None = None
    recipient: str | None = None
    kinds: tuple = ("message",)
    first: int = 0
    last: int | None = None
    probability: float = 1.0
    ticks: int = 0
    window: int = 0
    payload: bytes | Callable[[bytes], bytes] | None = None
    captured: list = field(default_factory=list)
    seen: int = 0

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"unknown interceptor mode {self.mode!r}")

    def matches(self, world: World, kind: str, sender: str, recipient: str) -> bool:
        if kind not in self.kinds:
            return False
        if self.sender is not None and sender != self.sender:
            return False
        if self.recipient is not None and recipient != self.recipient:
            return False
        index = self.seen
        self.seen += 1
        if index < self.first or (self.last is not None and index > self.last):
            return False
        return self.probability >= 1.0 or world.rng.random() < self.probability


@dataclass
class _Queued:
    message_id: int
    kind: str
    sender: str
    payload: bytes
    due: int
    displaced: int = 0


MitmHandler = Callable[["World", str, str, str, bytes], "bytes | None"]
Handler = Callable[["World", str, str, int, bytes], bool]


class World:
    def __init__(self, seed: int = 0):
        self.seed = seed
        self.rng = random.Random(int.from_bytes(hashlib.sha256(b"world" + str(seed).encode()).digest(), "big"))
        self.tick = 0
        self.seq = 0
        self.next_message_id = 1
        self.prekeys = PrekeyServer()
        self.online: dict[str, bool] = {}
        self.handlers: dict[str, Handler | None] = {}
        self.inbox: dict[str, list] = {}
        self.queues: dict[str, list[_Queued]] = {}
        self.interceptors: list[Interceptor] = []
        self.mitm: dict[frozenset, MitmHandler] = {}
        self.receipts: dict[int, DeliveryReceipt] = {}
        self.log: list[LogEntry] = []
        self.clients: dict = {}
        self.receipt_listeners: dict[str, Callable[[int, str], None]] = {}

    # -- bookkeeping -------------------------------------------------------

    def record(self, kind: str, sender: str, recipient: str, payload: bytes = b"") -> int:
        self.seq += 1
        self.log.append(LogEntry(self.tick, self.seq, kind, sender or "-", recipient or "-", bytes(payload)))
        return self.seq

    def export_log(self) -> str:
        return "".join(entry.line() + "\n" for entry in self.log)

    def log_digest(self) -> str:
        return hashlib.sha256(self.export_log().encode()).hexdigest()

    def entry(self, seq: int) -> LogEntry:
        return self.log[seq - 1]

    def suite_for(self, user: str, install: int) -> CryptoSuite:
        return make_toy_suite(f"{self.seed}/{user}/{install}".encode())

    def register(self, user: str, handler: Handler | None = None, online: bool = True) -> None:
        self.online[user] = online
        self.handlers[user] = handler
        self.queues.setdefault(user, [])
        self.inbox.setdefault(user, [])

    def knows(self, user: str) -> bool:
        return user in self.online

    def set_online(self, user: str, online: bool) -> World:
        if not self.knows(user):
            raise NoSuchUser(user)
        if self.online[user] != online:
            self.online[user] = online
            self.record("online" if online else "offline", user, "-")
        return self

    # -- adversaries ---------------------------------------------------------

    def add_interceptor(self, interceptor: Interceptor) -> Interceptor:
        self.interceptors.append(interceptor)
        return interceptor

    def install_mitm(self, between: tuple[str, str], handler: MitmHandler) -> World:
        key = frozenset(between)
        if key in self.mitm:
            raise Conflict(f"a man in the middle already sits between {sorted(key)}")
        self.mitm[key] = handler
        return self

    def _through_mitm(self, kind: str, sender: str, recipient: str, payload: bytes) -> bytes | None:
        handler = self.mitm.get(frozenset((sender, recipient)))
        if handler is None:
            return payload
        out = handler(self, sender, recipient, kind, payload)
        if out != payload:
            self.record("mitm", sender, recipient, b"" if out is None else out)
        return out

    # -- prekey server access --------------------------------------------------

    def fetch_bundle(self, requester: str, target: str, suite: CryptoSuite) -> PrekeyBundle:
        """Prekey-server fetch routed through any MITM between the two users."""
        bundle = self.prekeys.fetch(requester, target)
        raw = bundle.to_bytes(suite)
        self.record("bundle", "server", requester, raw)
        rewritten = self._through_mitm("bundle", target, requester, raw)
        if rewritten is None:
            raise NoSuchUser(f"bundle for {target} was suppressed")
        return bundle if rewritten == raw else PrekeyBundle.from_bytes(suite, rewritten)

    # -- relay ---------------------------------------------------------------

    def send_via_relay(self, sender: str, recipient: str, payload: bytes,
                       kind: str = "message") -> int:
        if not self.knows(recipient):
            raise NoSuchUser(recipient)
        message_id = self.next_message_id
        self.next_message_id += 1
        if kind == "message":
            self.receipts[message_id] = DeliveryReceipt(message_id, ticks={"sent": self.tick})
        self.record("send" if kind == "message" else kind, sender, recipient,
                    struct.pack(">I", message_id) + payload)
        routed = self._through_mitm(kind, sender, recipient, payload)
        if routed is None:
            return message_id
        due, reorder = self.tick + 1, 0
        for rule in self.interceptors:
            if not rule.matches(self, kind, sender, recipient):
                continue
            if rule.mode == "record":
                rule.captured.append(routed)
            elif rule.mode == "drop":
                self.record("drop", sender, recipient, struct.pack(">I", message_id))
                return message_id
            elif rule.mode == "delay":
                due += rule.ticks
            elif rule.mode == "replace":
                routed = rule.payload(routed) if callable(rule.payload) else rule.payload
                self.record("replace", sender, recipient, routed)
            elif rule.mode == "reorder":
                reorder = max(reorder, rule.window)
        self._enqueue(recipient, _Queued(message_id, kind, sender, routed, due), reorder)
        return message_id

    def _enqueue(self, recipient: str, item: _Queued, window: int) -> None:
        queue = self.queues[recipient]
        jump = self.rng.randint(0, window) if window else 0
        pos = len(queue)
        # Move ahead of at most `jump` items, none of which may end up more than
        # `window` places behind its FIFO slot.
        while jump and pos > 0 and queue[pos - 1].displaced < window:
            pos -= 1
            jump -= 1
        for behind in queue[pos:]:
            behind.displaced += 1
        queue.insert(pos, item)

    def send_direct(self, sender: str, recipient: str, payload: bytes) -> bytes | None:
        """Synchronous delivery with no relay storage; the recipient must be online."""
        if not self.knows(recipient):
            raise NoSuchUser(recipient)
        if not self.online[recipient]:
            raise PeerOffline(f"{recipient} is offline and there is no store-and-forward path")
        self.record("direct", sender, recipient, payload)
        routed = self._through_mitm("direct", sender, recipient, payload)
        if routed is None:
            return None
        for rule in self.interceptors:
            if rule.matches(self, "direct", sender, recipient):
                if rule.mode == "record":
                    rule.captured.append(routed)
                elif rule.mode == "drop":
                    self.record("drop", sender, recipient, b"")
                    return None
                elif rule.mode == "replace":
                    routed = rule.payload(routed) if callable(rule.payload) else rule.payload
        return routed

    def step(self) -> World:
        self.tick += 1
        for user in sorted(self.queues):
            if not self.online[user]:
                continue
            queue = self.queues[user]
            due = [item for item in queue if item.due <= self.tick]
            if not due:
                continue
            self.queues[user] = [item for item in queue if item.due > self.tick]
            for item in due:
                self._deliver(user, item)
        return self

    def run(self, ticks: int) -> World:
        for _ in range(ticks):
            self.step()
        return self

    def drain(self, limit: int = 1000) -> World:
        """Step until every online recipient's queue is empty (or ``limit`` ticks)."""
        for _ in range(limit):
            if not any(q and self.online[u] for u, q in self.queues.items()):
                break
            self.step()
        return self

    def _deliver(self, user: str, item: _Queued) -> None:
        self.record("deliver" if item.kind == "message" else f"{item.kind}-in", item.sender, user,
                    struct.pack(">I", item.message_id) + item.payload)
        if item.kind == "receipt":
            self._apply_receipt(user, item.payload)
            return
        handler = self.handlers.get(user)
        accepted = True
        if handler is None:
            self.inbox[user].append((item.sender, item.message_id, item.payload))
        else:
            accepted = bool(handler(self, item.sender, user, item.message_id, item.payload))
        if accepted and item.kind == "message":
            self.send_receipt(user, item.sender, item.message_id, "delivered")

    def send_receipt(self, from_user: str, to_user: str, message_id: int, status: str) -> None:
        """Receipts travel back through the relay, so interceptors can drop them too."""
        body = struct.pack(">IB", message_id, STATUS_ORDER.index(status))
        self.send_via_relay(from_user, to_user, body, kind="receipt")

    def _apply_receipt(self, user: str, body: bytes) -> None:
        if len(body) != 5:
            return
        message_id, status = struct.unpack(">IB", body)
        receipt = self.receipts.get(message_id)
        if receipt is None or status >= len(STATUS_ORDER):
            return
        if receipt.advance(STATUS_ORDER[status], self.tick) and user in self.receipt_listeners:
            self.receipt_listeners[user](message_id, receipt.status)

    def status(self, message_id: int) -> str:
        return self.receipts[message_id].status


def world_new(seed: int = 0) -> World:
    return World(seed)


def world_step(world: World) -> World:
    return world.step()


def send_via_relay(world: World, sender: str, recipient: str, payload: bytes) -> tuple[World, int]:
    return world, world.send_via_relay(sender, recipient, payload)


def set_online(world: World, user: str, online: bool) -> World:
    return world.set_online(user, online)


def install_mitm(world: World, between: tuple[str, str], handler: MitmHandler) -> World:
    return world.install_mitm(between, handler)
