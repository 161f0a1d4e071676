"""Client state machine: X3DH + Double Ratchet (or OTR) driven by a PolicyProfile.

Clients live in a :class:`~e2elab.simnet.World` and talk only through it.
Everything a scenario may look at is emitted as a :class:`SessionEvent`; each
event is also written to the world log, and its log sequence number is the
evidence pointer used by the property matrix.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

from . import otr
from .crypto import CryptoSuite
from .errors import (
    AlreadyEncrypted,
    AuthenticationFailure,
    DuplicateUser,
    E2ELabError,
    Irreversible,
    MalformedKey,
    NoSuchUser,
    NotTracked,
    PeerOffline,
    ProtocolViolation,
    SessionDead,
    Unsupported,
    VerificationFailed,
)
from .profiles import PolicyProfile
from .ratchet import Envelope, RatchetState, init_initiator, init_responder, ratchet_decrypt, ratchet_encrypt
from .simnet import STATUS_ORDER, World
from .wire import pack_fields, unpack_fields
from .x3dh import InitialMessage, PrekeyBundle, X3dhUser, associated_data, initiate, publish_bundle, respond

PROTOCOLS = ("signal-like", "otr")
CHANNELS = ("in-person", "qr", "exported")
PREKEY_BATCH = 10

KIND_PREKEY = b"P"
KIND_NORMAL = b"E"
KIND_PLAIN = b"T"


@dataclass(frozen=True)
class SessionEvent:
    kind: str
    user: str
    peer: str | None = None
    message_id: int | None = None
    status: str | None = None
    tick: int = 0
    seq: int = 0

    def describe(self) -> str:
        parts = [self.kind]
        if self.message_id is not None:
            parts.append(f"#{self.message_id}")
        if self.status is not None:
            parts.append(self.status)
        return ":".join(parts)


@dataclass(frozen=True)
class Fingerprint:
    raw: bytes

    @classmethod
    def of(cls, suite: CryptoSuite, ik_one: int, ik_two: int) -> Fingerprint:
        encoded = sorted((suite.encode_public(ik_one), suite.encode_public(ik_two)))
        return cls(hashlib.sha512(b"".join(encoded)).digest())

    @property
    def digits(self) -> str:
        groups = [int.from_bytes(self.raw[i:i + 5], "big") % 100000 for i in range(0, 60, 5)]
        return " ".join(f"{g:05d}" for g in groups)

    @property
    def qr_payload(self) -> bytes:
        return b"\x01" + self.raw


@dataclass
class TrustEntry:
    ik: int
    verified: bool = False
    tofu: bool = False
    changes: list = field(default_factory=list)
    # Key changed since the last verification; blocks sends on blocking profiles.
    unverified_change: bool = False
    notice_due: bool = False


@dataclass
class Conversation:
    cid: int
    peer: str
    encrypted: bool
    dead: bool = False
    last_message: int | None = None


@dataclass
class _RatchetSession:
    state: RatchetState
    ad: bytes
    peer_ik: int
    initial: InitialMessage | None = None
    ek_a: int | None = None


@dataclass
class OutgoingMessage:
    local_id: int
    cid: int
    peer: str
    text: str
    relay_ids: list = field(default_factory=list)
    held: bool = False
    payloads: list = field(default_factory=list)


@dataclass
class HistoryItem:
    peer: str
    direction: str
    text: str | None

    @property
    def locked(self) -> bool:
        return self.text is None


class Client:
    def __init__(self, world: World, user: str, profile: PolicyProfile, protocol: str = "signal-like"):
        if protocol not in PROTOCOLS:
            raise ValueError(f"protocol must be one of {PROTOCOLS}")
        if user in world.clients:
            raise DuplicateUser(user)
        self.world, self.user, self.profile, self.protocol = world, user, profile, protocol
        self.install = 0
        self.events: list[SessionEvent] = []
        self._fresh_install()
        world.clients[user] = self
        world.register(user, self._on_relay_delivery)
        world.receipt_listeners[user] = self._on_receipt
        if protocol == "signal-like":
            publish_bundle(self.suite, world.prekeys, self.x3dh, PREKEY_BATCH)

    def _fresh_install(self) -> None:
        self.suite = self.world.suite_for(self.user, self.install)
        self.x3dh = X3dhUser.create(self.suite, self.user)
        self.otr_identity = otr.OtrIdentity(self.user, self.x3dh.identity.ik)
        self.trust: dict[str, TrustEntry] = {}
        self.conversations: dict[int, Conversation] = {}
        self.sessions: dict[str, _RatchetSession] = {}
        self.otr_sessions: dict[str, otr.OtrSession] = {}
        self.outgoing: dict[int, OutgoingMessage] = {}
        self.by_relay_id: dict[int, int] = {}
        self.history_items: list[HistoryItem] = []
        self._next_cid = 1
        self._next_mid = 1

    @property
    def identity_public(self) -> int:
        return self.x3dh.identity.ik.public

    # -- events --------------------------------------------------------------

    def _emit(self, kind: str, peer: str | None = None, message_id: int | None = None,
              status: str | None = None) -> SessionEvent:
        draft = SessionEvent(kind, self.user, peer, message_id, status)
        seq = self.world.record("event", self.user, peer or "-", draft.describe().encode())
        event = SessionEvent(kind, self.user, peer, message_id, status, self.world.tick, seq)
        self.events.append(event)
        return event

    # -- trust -----------------------------------------------------------------

    def _first_contact(self, peer: str, ik: int) -> list[SessionEvent]:
        self.trust[peer] = TrustEntry(ik, tofu=self.profile.tofu)
        if self.profile.tofu:
            return [self._emit("trusted", peer)]
        return [self._emit("verification_required", peer)]

    def _observe_identity(self, peer: str, ik: int) -> list[SessionEvent]:
        entry = self.trust.get(peer)
        if entry is None:
            return self._first_contact(peer, ik)
        if entry.ik == ik:
            return []
        entry.changes.append((entry.ik, ik))
        entry.ik = ik
        entry.verified = False
        entry.unverified_change = True
        self.sessions.pop(peer, None)
        self.otr_sessions.pop(peer, None)
        events = []
        if self.profile.session_locked_to_keys:
            for conv in self.conversations.values():
                if conv.peer == peer:
                    conv.dead = True
        if self.profile.notify_key_change:
            if self.profile.key_change_timing == "immediate":
                events.append(self._emit("key_changed", peer))
            else:
                entry.notice_due = True
        return events

    def fingerprint(self, peer: str) -> Fingerprint:
        entry = self.trust.get(peer)
        if entry is not None:
            ik = entry.ik
        else:
            other = self.world.clients.get(peer)
            if other is None:
                raise NoSuchUser(peer)
            ik = other.identity_public if self.protocol == "otr" else self.world.prekeys.identity_of(peer)
        return Fingerprint.of(self.suite, self.identity_public, ik)

    def verify_peer(self, peer: str, channel: str = "in-person", presented=None) -> list[SessionEvent]:
        """Compare fingerprints over an out-of-band channel.

        ``presented`` is what the peer's device shows (digits, or QR bytes for
        ``qr``); by default it is read from the peer's own client.
        """
        if channel not in CHANNELS:
            raise Unsupported(f"unknown verification channel {channel!r}")
        if channel == "qr" and not self.profile.qr_fingerprint:
            raise Unsupported(f"{self.profile.name} has no QR verification")
        if channel == "exported" and not self.profile.export_fingerprint:
            raise Unsupported(f"{self.profile.name} cannot export fingerprints")
        if peer not in self.trust:
            raise NoSuchUser(f"no conversation with {peer}")
        mine = self.fingerprint(peer)
        if presented is None:
            other = self.world.clients.get(peer)
            if other is None:
                raise NoSuchUser(peer)
            theirs = other.fingerprint(self.user)
            presented = theirs.qr_payload if channel == "qr" else theirs.digits
        expected = mine.qr_payload if channel == "qr" else mine.digits
        if presented != expected:
            self._emit("verification_failed", peer)
            raise VerificationFailed(f"fingerprint for {peer} does not match over {channel}")
        entry = self.trust[peer]
        entry.verified = True
        entry.unverified_change = False
        events = [self._emit("verified", peer, status=channel)]
        events.extend(self._release_held(peer))
        return events

    def is_verified(self, peer: str) -> bool:
        if not self.profile.verified_check:
            raise Unsupported(f"{self.profile.name} cannot show whether a contact is verified")
        entry = self.trust.get(peer)
        return bool(entry and entry.verified)

    def clear_trusted(self) -> list[SessionEvent]:
        if not self.profile.clear_trusted_contacts:
            raise Unsupported(f"{self.profile.name} cannot clear trusted contacts")
        cleared = [peer for peer, entry in sorted(self.trust.items()) if entry.verified]
        for peer in cleared:
            self.trust[peer].verified = False
        return [self._emit("trust_cleared", peer) for peer in cleared]

    # -- conversations -------------------------------------------------------

    def start_conversation(self, peer: str) -> tuple[int, list[SessionEvent]]:
        if peer == self.user or not self.world.knows(peer):
            raise NoSuchUser(peer)
        events: list[SessionEvent] = []
        if self.protocol == "otr":
            session = self._otr_handshake(peer)
            events += self._observe_identity(peer, session.peer_identity)
        elif peer not in self.trust:
            bundle = self.world.fetch_bundle(self.user, peer, self.suite)
            events += self._observe_identity(peer, bundle.ik_public)
            self._open_session(peer, bundle)
        cid = self._next_cid
        self._next_cid += 1
        conv = Conversation(cid, peer, encrypted=not self.profile.e2e_opt_in)
        self.conversations[cid] = conv
        if conv.encrypted and self.profile.notify_e2e_banner:
            events.append(self._emit("e2e_banner", peer))
        return cid, events

    def _conversation(self, cid: int) -> Conversation:
        try:
            return self.conversations[cid]
        except KeyError:
            raise NoSuchUser(f"no conversation {cid}") from None

    def enable_encryption(self, cid: int) -> list[SessionEvent]:
        conv = self._conversation(cid)
        if not self.profile.e2e_opt_in:
            raise AlreadyEncrypted(f"{self.profile.name} encrypts every conversation")
        if conv.encrypted:
            return []
        conv.encrypted = True
        events = [self._emit("encryption_enabled", conv.peer)]
        if self.profile.notify_e2e_banner:
            events.append(self._emit("e2e_banner", conv.peer))
        return events

    def disable_encryption(self, cid: int) -> list[SessionEvent]:
        conv = self._conversation(cid)
        if not self.profile.e2e_opt_in or self.profile.encryption_irreversible:
            raise Irreversible(f"{self.profile.name} cannot turn encryption off")
        if not conv.encrypted:
            return []
        conv.encrypted = False
        return [self._emit("encryption_disabled", conv.peer)]

    def _open_session(self, peer: str, bundle: PrekeyBundle) -> None:
        secret, initial = initiate(self.suite, self.x3dh.identity, bundle, b"")
        state = init_initiator(self.suite, secret, bundle.spk_public)
        ad = associated_data(self.suite, self.identity_public, bundle.ik_public)
        self.sessions[peer] = _RatchetSession(state, ad, bundle.ik_public, initial)

    def send_text(self, cid: int, text: str) -> tuple[int, list[SessionEvent]]:
        conv = self._conversation(cid)
        if conv.dead:
            self._emit("session_dead", conv.peer)
            raise SessionDead(f"conversation with {conv.peer} is locked to keys that no longer exist")
        events: list[SessionEvent] = []
        entry = self.trust.get(conv.peer)
        if entry is not None and entry.notice_due:
            entry.notice_due = False
            events.append(self._emit("key_changed", conv.peer))
        local_id = self._next_mid
        self._next_mid += 1
        msg = OutgoingMessage(local_id, cid, conv.peer, text)
        self.outgoing[local_id] = msg
        conv.last_message = local_id
        self.history_items.append(HistoryItem(conv.peer, "out", text))
        if (conv.encrypted and self.profile.block_until_verified and entry is not None
                and entry.unverified_change):
            msg.held = True
            events.append(self._emit("message_blocked", conv.peer, local_id))
            return local_id, events
        if self.protocol == "otr":
            events += self._send_otr(conv, msg)
        else:
            events += self._transmit(conv, msg)
        return local_id, events

    def _transmit(self, conv: Conversation, msg: OutgoingMessage) -> list[SessionEvent]:
        events: list[SessionEvent] = []
        if not conv.encrypted:
            payload = pack_fields(KIND_PLAIN, b"", msg.text.encode())
        else:
            if conv.peer not in self.sessions:
                bundle = self.world.fetch_bundle(self.user, conv.peer, self.suite)
                events += self._observe_identity(conv.peer, bundle.ik_public)
                self._open_session(conv.peer, bundle)
            payload = self._encrypt(conv.peer, msg.text.encode())
        relay_id = self.world.send_via_relay(self.user, conv.peer, payload)
        msg.relay_ids.append(relay_id)
        msg.payloads.append(payload)
        self.by_relay_id[relay_id] = msg.local_id
        events.append(self._emit("status_changed", conv.peer, msg.local_id, "sent"))
        return events

    def _encrypt(self, peer: str, plaintext: bytes) -> bytes:
        session = self.sessions[peer]
        session.state, envelope = ratchet_encrypt(self.suite, session.state, plaintext, session.ad)
        if session.initial is not None:
            return pack_fields(KIND_PREKEY, session.initial.to_bytes(self.suite), envelope.to_bytes(self.suite))
        return pack_fields(KIND_NORMAL, b"", envelope.to_bytes(self.suite))

    def _release_held(self, peer: str) -> list[SessionEvent]:
        events = []
        for msg in self.outgoing.values():
            if msg.peer == peer and msg.held:
                msg.held = False
                events.append(self._emit("message_released", peer, msg.local_id))
                events += self._transmit(self.conversations[msg.cid], msg)
        return events

    # -- key changes ---------------------------------------------------------

    def on_peer_rekeyed(self, peer: str, bundle: PrekeyBundle | None = None) -> list[SessionEvent]:
        """The peer now has a new identity key (reinstall or new device)."""
        if peer not in self.trust:
            return []
        ik = bundle.ik_public if bundle is not None else self._current_identity(peer)
        events = self._observe_identity(peer, ik)
        if self.profile.reencrypt_and_resend and self.protocol == "signal-like":
            events += self._resend_undelivered(peer, bundle)
        return events

    def _current_identity(self, peer: str) -> int:
        if self.protocol == "otr":
            return self.world.clients[peer].identity_public
        return self.world.prekeys.identity_of(peer)

    def _resend_undelivered(self, peer: str, bundle: PrekeyBundle | None) -> list[SessionEvent]:
        pending = [m for m in self.outgoing.values()
                   if m.peer == peer and not m.held and m.relay_ids
                   and self.message_status(m.local_id) == "sent"]
        events: list[SessionEvent] = []
        for msg in pending:
            conv = self.conversations[msg.cid]
            if not conv.encrypted:
                continue
            if peer not in self.sessions:
                fresh = bundle or self.world.fetch_bundle(self.user, peer, self.suite)
                bundle = None
                self._open_session(peer, fresh)
            events += self._transmit(conv, msg)
            events.append(self._emit("resent", peer, msg.local_id))
        return events

    # -- receiving -------------------------------------------------------------

    def _on_relay_delivery(self, world: World, sender: str, recipient: str, relay_id: int,
                           payload: bytes) -> bool:
        try:
            kind, initial_raw, body = unpack_fields(payload)
        except ProtocolViolation:
            self._emit("decrypt_failed", sender)
            return False
        if kind == KIND_PLAIN:
            text = body
        else:
            try:
                text = self._decrypt(sender, kind, initial_raw, body)
            except (E2ELabError, ValueError):
                self._emit("decrypt_failed", sender)
                return False
        self.history_items.append(HistoryItem(sender, "in", text.decode(errors="replace")))
        self._emit("message_received", sender)
        return True

    def _decrypt(self, sender: str, kind: bytes, initial_raw: bytes, body: bytes) -> bytes:
        envelope = Envelope.from_bytes(self.suite, body)
        session = self.sessions.get(sender)
        if kind == KIND_PREKEY:
            initial = InitialMessage.from_bytes(self.suite, initial_raw)
            if session is None or session.ek_a != initial.ek_a:
                secret, _ = respond(self.suite, self.x3dh, initial)
                spk = self.x3dh.signed_prekeys[initial.spk_id]
                ad = associated_data(self.suite, initial.ik_a, self.identity_public)
                candidate = _RatchetSession(init_responder(self.suite, secret, spk), ad,
                                            initial.ik_a, ek_a=initial.ek_a)
                state, plaintext = ratchet_decrypt(self.suite, candidate.state, envelope, ad)
                candidate.state = state
                self._observe_identity(sender, initial.ik_a)
                self.sessions[sender] = candidate
                return plaintext
        elif kind != KIND_NORMAL or session is None:
            raise AuthenticationFailure("no session for this message")
        session.state, plaintext = ratchet_decrypt(self.suite, session.state, envelope, session.ad)
        session.initial = None
        return plaintext

    def _on_receipt(self, relay_id: int, status: str) -> None:
        local_id = self.by_relay_id.get(relay_id)
        if local_id is not None:
            msg = self.outgoing[local_id]
            self._emit("status_changed", msg.peer, local_id, status)

    def message_status(self, local_id: int) -> str:
        msg = self.outgoing.get(local_id)
        if msg is None:
            raise NotTracked(f"unknown message {local_id}")
        if (self.profile.per_message_status == "last"
                and self.conversations[msg.cid].last_message != local_id):
            raise NotTracked(f"{self.profile.name} only shows the status of the newest message")
        if msg.held:
            return "held"
        return max((self.world.status(r) for r in msg.relay_ids), key=STATUS_ORDER.index, default="sent")

    def history(self, peer: str | None = None) -> list[HistoryItem]:
        return [h for h in self.history_items if peer is None or h.peer == peer]

    # -- OTR -----------------------------------------------------------------

    def _otr_handshake(self, peer: str) -> otr.OtrSession:
        other = self.world.clients.get(peer)
        if other is None or other.protocol != "otr":
            raise NoSuchUser(f"{peer} does not speak OTR")

        def channel(index, src, dst, payload):
            routed = self.world.send_direct(src, dst, payload)
            if routed is None:
                raise otr.AkeFailed(f"AKE message {index} was lost")
            return routed

        mine, theirs, _ = otr.ake_sigma_r(self.suite, self.otr_identity, other.otr_identity, channel,
                                          other.suite)
        self.otr_sessions[peer] = mine
        other.otr_sessions[self.user] = theirs
        other._observe_identity(self.user, theirs.peer_identity)
        return mine

    def _send_otr(self, conv: Conversation, msg: OutgoingMessage) -> list[SessionEvent]:
        if not self.world.online.get(conv.peer, False):
            raise PeerOffline(f"OTR needs {conv.peer} online")
        session = self.otr_sessions.get(conv.peer)
        if session is None:
            session = self._otr_handshake(conv.peer)
        wire = otr.otr_send(self.suite, session, msg.text.encode()).to_bytes(self.suite)
        msg.payloads.append(wire)
        routed = self.world.send_direct(self.user, conv.peer, wire)
        if routed is None:
            return [self._emit("status_changed", conv.peer, msg.local_id, "sent")]
        other = self.world.clients[conv.peer]
        ok = other._on_otr_delivery(self.user, routed)
        return [self._emit("status_changed", conv.peer, msg.local_id, "delivered" if ok else "sent")]

    def end_otr(self, peer: str) -> list[SessionEvent]:
        """Close the OTR session, flushing MAC keys still owed to the peer."""
        session = self.otr_sessions.pop(peer, None)
        if session is None:
            return []
        wire = otr.otr_shutdown(self.suite, session).to_bytes(self.suite)
        routed = self.world.send_direct(self.user, peer, wire)
        if routed is not None:
            self.world.clients[peer]._on_otr_delivery(self.user, routed)
        return [self._emit("otr_closed", peer)]

    def _on_otr_delivery(self, sender: str, raw: bytes) -> bool:
        session = self.otr_sessions.get(sender)
        try:
            if session is None:
                raise AuthenticationFailure("no OTR session")
            text = otr.otr_receive(self.suite, session, otr.OtrMessage.from_bytes(self.suite, raw))
        except (E2ELabError, MalformedKey):
            self._emit("decrypt_failed", sender)
            return False
        self.history_items.append(HistoryItem(sender, "in", text.decode(errors="replace")))
        self._emit("message_received", sender)
        return True


# -- module-level API -----------------------------------------------------------

def client_new(world: World, user: str, profile: PolicyProfile, protocol: str = "signal-like") -> Client:
    return Client(world, user, profile, protocol)


def reinstall(world: World, user: str) -> dict[str, list[SessionEvent]]:
    """Wipe ``user``'s device, publish fresh keys and tell every peer."""
    client = world.clients.get(user)
    if client is None:
        raise NoSuchUser(user)
    locked = []
    if client.profile.history_locked_to_keys:
        # Server-side history survives, but the new keys cannot read it.
        locked = [HistoryItem(h.peer, h.direction, None) for h in client.history_items]
    client.install += 1
    client._fresh_install()
    client.history_items = locked
    client._emit("reinstalled")
    if client.protocol == "signal-like":
        publish_bundle(client.suite, world.prekeys, client.x3dh, PREKEY_BATCH)
    notices = {}
    for name in sorted(world.clients):
        if name != user:
            notices[name] = world.clients[name].on_peer_rekeyed(user)
    return notices
