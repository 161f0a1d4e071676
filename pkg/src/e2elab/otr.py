"""OTR engine: SIGMA-R key exchange, malleable encrypt-then-MAC transport,
re-key on direction change, MAC-key publication, SMP and a forgery tool.

Key schedule per shared secret SS::

    EK = Hash(SS)      MK = Hash(EK)

Every message carries the sender's current DH public.  The first message after
the conversation changes direction carries a fresh public, and both parties
move to SS' = DH(fresh, peer's last public).  The old SS and EK are dropped and
the old MK is published in clear on the next message.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

from .crypto import CryptoSuite, KeyPair
from .errors import (
    AkeFailed,
    AuthenticationFailure,
    ForgedUnderPublishedKey,
    MalformedKey,
    NotEstablished,
    ProtocolViolation,
    RefusesToForgeUnpublished,
    SmpAborted,
)
from .wire import pack_fields, pack_versioned, unpack_fields, unpack_versioned

KIND_DATA = 0
KIND_SHUTDOWN = 1


@dataclass
class OtrIdentity:
    owner: str
    keys: KeyPair


@dataclass(frozen=True)
class OtrMessage:
    sender_dh: int
    counter: int
    ciphertext: bytes
    tag: bytes
    published_mks: tuple = ()
    kind: int = KIND_DATA

    def authenticated_bytes(self, suite: CryptoSuite) -> bytes:
        return (bytes([self.kind]) + suite.encode_public(self.sender_dh)
                + struct.pack(">Q", self.counter) + self.ciphertext)

    def to_bytes(self, suite: CryptoSuite) -> bytes:
        return pack_versioned(bytes([self.kind]), suite.encode_public(self.sender_dh),
                              struct.pack(">Q", self.counter), self.ciphertext, self.tag,
                              pack_fields(*self.published_mks))

    @classmethod
    def from_bytes(cls, suite: CryptoSuite, raw: bytes) -> OtrMessage:
        kind, dh, counter, ct, tag, mks = unpack_versioned(raw, 6)
        if len(kind) != 1 or len(counter) != 8:
            raise ProtocolViolation("malformed OTR message")
        return cls(suite.decode_public(dh), struct.unpack(">Q", counter)[0], ct, tag,
                   tuple(unpack_fields(mks)), kind[0])


@dataclass
class OtrSession:
    owner: str
    peer: str
    identity: KeyPair
    peer_identity: int
    ssid: bytes
    ss: bytes | None = None
    ek: bytes | None = None
    mk: bytes | None = None
    own_dh: KeyPair | None = None
    peer_dh: int | None = None
    last_direction: str | None = None
    next_counter: int = 1
    last_received_counter: int = 0
    published: set = field(default_factory=set)
    pending_publish: list = field(default_factory=list)
    retired_peer_dh: set = field(default_factory=set)
    rekeys: int = 0

    @property
    def established(self) -> bool:
        return self.ss is not None


def _install_secret(suite: CryptoSuite, session: OtrSession, ss: bytes) -> None:
    session.ss = ss
    session.ek = suite.hash(ss)
    session.mk = suite.hash(session.ek)
    session.next_counter = 1
    session.last_received_counter = 0


def _retire_keys(session: OtrSession) -> None:
    if session.mk is not None and session.mk not in session.published:
        session.pending_publish.append(session.mk)
    session.ss = session.ek = session.mk = None
    session.rekeys += 1


# -- SIGMA-R ----------------------------------------------------------------

def _ake_keys(suite: CryptoSuite, s: bytes) -> dict:
    return {name: suite.kdf(s, name.encode()) for name in ("ake-enc-a", "ake-mac-a", "ake-enc-b", "ake-mac-b", "otr-ss")}


def _auth_block(suite: CryptoSuite, ident: OtrIdentity, enc_key: bytes, mac_key: bytes,
                signed: bytes, label: bytes) -> bytes:
    pub = suite.encode_public(ident.keys.public)
    body = pack_fields(pub, ident.owner.encode(), suite.sign(ident.keys.private, signed),
                       suite.mac(mac_key, label + pub + ident.owner.encode()))
    return suite.aead_encrypt(enc_key, body, label)


def _open_auth_block(suite: CryptoSuite, block: bytes, enc_key: bytes, mac_key: bytes,
                     signed: bytes, label: bytes) -> tuple[str, int]:
    try:
        body = suite.aead_decrypt(enc_key, block, label)
        pub_raw, owner, sig, tag = unpack_fields(body)
        pub = suite.decode_public(pub_raw)
    except (AuthenticationFailure, MalformedKey, ProtocolViolation, ValueError) as exc:
        raise AkeFailed(f"{label.decode()}: cannot open authentication block") from exc
    if not suite.verify_mac(mac_key, label + pub_raw + owner, tag):
        raise AkeFailed(f"{label.decode()}: identity MAC mismatch")
    if not suite.verify_sig(pub, signed, sig):
        raise AkeFailed(f"{label.decode()}: signature over DH values does not verify")
    return owner.decode(), pub


def _decode_dh(suite: CryptoSuite, raw: bytes) -> int:
    try:
        return suite.decode_public(raw)
    except MalformedKey as exc:
        raise AkeFailed("invalid DH value") from exc


class AkeInitiator:
    def __init__(self, suite: CryptoSuite, ident: OtrIdentity):
        self.suite, self.ident = suite, ident
        self.x = suite.generate_keypair()
        self.keys = None

    def message1(self) -> bytes:
        return self.suite.encode_public(self.x.public)

    def message3(self, m2: bytes) -> bytes:
        s = self.suite
        self.gy = _decode_dh(s, m2)
        self.keys = _ake_keys(s, s.dh(self.x.private, self.gy))
        signed = s.encode_public(self.x.public) + m2
        return _auth_block(s, self.ident, self.keys["ake-enc-a"], self.keys["ake-mac-a"], signed, b"m3")

    def finish(self, m4: bytes, peer_name: str, expected_peer: int | None = None) -> OtrSession:
        s = self.suite
        signed = s.encode_public(self.gy) + s.encode_public(self.x.public)
        owner, pub = _open_auth_block(s, m4, self.keys["ake-enc-b"], self.keys["ake-mac-b"], signed, b"m4")
        if expected_peer is not None and pub != expected_peer:
            raise AkeFailed("responder identity key is not the expected one")
        return _new_session(s, self.ident, peer_name, pub, self.keys, self.x, self.gy)


class AkeResponder:
    def __init__(self, suite: CryptoSuite, ident: OtrIdentity):
        self.suite, self.ident = suite, ident
        self.y = suite.generate_keypair()

    def message2(self, m1: bytes) -> bytes:
        s = self.suite
        self.gx = _decode_dh(s, m1)
        self.keys = _ake_keys(s, s.dh(self.y.private, self.gx))
        return s.encode_public(self.y.public)

    def message4(self, m3: bytes, peer_name: str, expected_peer: int | None = None) -> tuple[bytes, OtrSession]:
        s = self.suite
        signed = s.encode_public(self.gx) + s.encode_public(self.y.public)
        owner, pub = _open_auth_block(s, m3, self.keys["ake-enc-a"], self.keys["ake-mac-a"], signed, b"m3")
        if expected_peer is not None and pub != expected_peer:
            raise AkeFailed("initiator identity key is not the expected one")
        m4 = _auth_block(s, self.ident, self.keys["ake-enc-b"], self.keys["ake-mac-b"],
                         s.encode_public(self.y.public) + s.encode_public(self.gx), b"m4")
        return m4, _new_session(s, self.ident, peer_name, pub, self.keys, self.y, self.gx)


def _new_session(suite, ident, peer_name, peer_pub, keys, own_dh, peer_dh) -> OtrSession:
    session = OtrSession(owner=ident.owner, peer=peer_name, identity=ident.keys,
                         peer_identity=peer_pub, ssid=suite.hash(b"ssid" + keys["otr-ss"])[:8],
                         own_dh=own_dh, peer_dh=peer_dh)
    _install_secret(suite, session, keys["otr-ss"])
    return session


def ake_sigma_r(suite: CryptoSuite, initiator: OtrIdentity, responder: OtrIdentity,
                channel=None, responder_suite: CryptoSuite | None = None
                ) -> tuple[OtrSession, OtrSession, list[bytes]]:
    """Run the four-message exchange.

    ``channel(index, sender, recipient, payload) -> payload`` carries every
    message and may rewrite it (a man in the middle).
    """
    def carry(i, src, dst, payload):
        out = payload if channel is None else channel(i, src, dst, payload)
        transcript.append(out)
        return out

    transcript: list[bytes] = []
    a, b = AkeInitiator(suite, initiator), AkeResponder(responder_suite or suite, responder)
    a_name, b_name = initiator.owner, responder.owner
    m1 = carry(1, a_name, b_name, a.message1())
    m2 = carry(2, b_name, a_name, b.message2(m1))
    m3 = carry(3, a_name, b_name, a.message3(m2))
    m4, session_b = b.message4(m3, a_name)
    m4 = carry(4, b_name, a_name, m4)
    session_a = a.finish(m4, b_name)
    return session_a, session_b, transcript


# -- transport ---------------------------------------------------------------

def _rekey_as_sender(suite: CryptoSuite, session: OtrSession) -> None:
    fresh = suite.generate_keypair()
    new_ss = suite.dh(fresh.private, session.peer_dh)
    _retire_keys(session)
    session.own_dh = fresh
    _install_secret(suite, session, new_ss)


def _publish_due(session: OtrSession) -> tuple:
    due = tuple(session.pending_publish)
    session.published.update(due)
    session.pending_publish.clear()
    return due


def otr_send(suite: CryptoSuite, session: OtrSession, plaintext: bytes) -> OtrMessage:
    """Encrypt then MAC one message; re-keys first if the direction changed."""
    if not session.established:
        raise NotEstablished(f"no OTR session between {session.owner} and {session.peer}")
    if session.last_direction == "received":
        _rekey_as_sender(suite, session)
    counter = session.next_counter
    session.next_counter += 1
    ciphertext = suite.stream_encrypt(session.ek, counter, plaintext)
    draft = OtrMessage(session.own_dh.public, counter, ciphertext, b"", _publish_due(session))
    tag = suite.mac(session.mk, draft.authenticated_bytes(suite))
    session.last_direction = "sent"
    return OtrMessage(draft.sender_dh, counter, ciphertext, tag, draft.published_mks)


def otr_shutdown(suite: CryptoSuite, session: OtrSession) -> OtrMessage:
    """Final message with no payload that flushes any MAC keys still owed."""
    if not session.established:
        raise NotEstablished("session already closed")
    counter = session.next_counter
    session.next_counter += 1
    draft = OtrMessage(session.own_dh.public, counter, b"", b"", _publish_due(session), KIND_SHUTDOWN)
    tag = suite.mac(session.mk, draft.authenticated_bytes(suite))
    return OtrMessage(draft.sender_dh, counter, b"", tag, draft.published_mks, KIND_SHUTDOWN)


def _reject(suite: CryptoSuite, session: OtrSession, msg: OtrMessage, why: str):
    data = msg.authenticated_bytes(suite)
    for old in session.published:
        if suite.verify_mac(old, data, msg.tag):
            raise ForgedUnderPublishedKey("message authenticates only under a published MAC key")
    raise AuthenticationFailure(why)


def otr_receive(suite: CryptoSuite, session: OtrSession, msg: OtrMessage) -> bytes:
    if not session.established:
        raise NotEstablished(f"no OTR session between {session.owner} and {session.peer}")
    data = msg.authenticated_bytes(suite)
    if msg.sender_dh in session.retired_peer_dh:
        _reject(suite, session, msg, "message under a retired key")
    if msg.sender_dh != session.peer_dh:
        try:
            new_ss = suite.dh(session.own_dh.private, msg.sender_dh)
        except MalformedKey:
            _reject(suite, session, msg, "invalid DH value")
        new_ek = suite.hash(new_ss)
        if not suite.verify_mac(suite.hash(new_ek), data, msg.tag):
            _reject(suite, session, msg, "MAC mismatch under re-keyed MK")
        _retire_keys(session)
        session.retired_peer_dh.add(session.peer_dh)
        session.peer_dh = msg.sender_dh
        _install_secret(suite, session, new_ss)
    elif not suite.verify_mac(session.mk, data, msg.tag):
        _reject(suite, session, msg, "MAC mismatch")
    if msg.counter <= session.last_received_counter:
        raise ProtocolViolation(f"counter {msg.counter} replayed")
    session.last_received_counter = msg.counter
    for old in msg.published_mks:
        session.published.add(old)
        if old in session.pending_publish:
            session.pending_publish.remove(old)
    if msg.kind == KIND_DATA:
        session.last_direction = "received"
    return suite.stream_decrypt(session.ek, msg.counter, msg.ciphertext)


def rekey(suite: CryptoSuite, session_a: OtrSession, session_b: OtrSession) -> None:
    """Out-of-band re-key of a live pair: A contributes a fresh DH value."""
    if session_a.last_direction == "sent" or session_b.last_direction == "received":
        raise ProtocolViolation("conversation direction has not changed since the last re-key")
    fresh = suite.generate_keypair()
    ss = suite.dh(fresh.private, session_a.peer_dh)
    if suite.dh(session_b.own_dh.private, fresh.public) != ss:
        raise ProtocolViolation("sessions are not paired")
    _retire_keys(session_a)
    session_a.own_dh = fresh
    _install_secret(suite, session_a, ss)
    _retire_keys(session_b)
    session_b.retired_peer_dh.add(session_b.peer_dh)
    session_b.peer_dh = fresh.public
    _install_secret(suite, session_b, ss)
    session_a.last_direction, session_b.last_direction = "sent", "received"


# -- deniability ---------------------------------------------------------------

def forge_message(suite: CryptoSuite, published_mk: bytes, reference: OtrMessage, *,
                  published, delta: bytes | None = None,
                  ciphertext: bytes | None = None) -> OtrMessage:
    """Build a message that verifies under an already-published MAC key.

    With ``delta`` the reference ciphertext is XOR-malleated, so the forged
    message decrypts to ``reference plaintext XOR delta``.  With ``ciphertext``
    an entirely new body is used.
    """
    if published_mk not in set(published):
        raise RefusesToForgeUnpublished("only keys already published may be used for forgery")
    if ciphertext is None:
        body = reference.ciphertext
        if delta is not None:
            pad = delta[: len(body)].ljust(len(body), b"\x00")
            body = bytes(c ^ d for c, d in zip(body, pad))
    else:
        body = ciphertext
    draft = OtrMessage(reference.sender_dh, reference.counter, body, b"", (), reference.kind)
    return OtrMessage(draft.sender_dh, draft.counter, body,
                      suite.mac(published_mk, draft.authenticated_bytes(suite)), (), draft.kind)


def verifies_under(suite: CryptoSuite, mk: bytes, msg: OtrMessage) -> bool:
    return suite.verify_mac(mk, msg.authenticated_bytes(suite), msg.tag)


# -- Socialist Millionaire Protocol -------------------------------------------

@dataclass
class SmpTranscript:
    messages: list
    equal: bool
    initiator_view: bool
    responder_view: bool

    @property
    def outcome(self) -> str:
        return "equal" if self.equal else "unequal"


def _smp_secret(suite: CryptoSuite, initiator_pub: int, responder_pub: int, ssid: bytes,
                secret: bytes) -> int:
    return suite.hash_to_scalar(b"smp", suite.encode_public(initiator_pub),
                                suite.encode_public(responder_pub), ssid, secret)


class _Smp:
    def __init__(self, suite: CryptoSuite):
        self.s = suite
        self.grp = suite.group

    def exp(self, base, e):
        return pow(base, e % self.grp.q, self.grp.p)

    def inv(self, x):
        return pow(x, self.grp.p - 2, self.grp.p)

    def mul(self, *xs):
        out = 1
        for x in xs:
            out = out * x % self.grp.p
        return out

    def h(self, version: int, *elems: int) -> int:
        return self.s.hash_to_scalar(bytes([version]), *(self.grp.encode(e) for e in elems))

    def enc(self, *nums: int) -> bytes:
        return pack_fields(*(n.to_bytes(self.grp.element_len, "big") for n in nums))

    def dec(self, raw: bytes, elements: str) -> list[int]:
        try:
            fields = unpack_fields(raw)
        except ProtocolViolation as exc:
            raise SmpAborted("malformed SMP message") from exc
        if len(fields) != len(elements):
            raise SmpAborted("wrong SMP field count")
        out = []
        for f, kind in zip(fields, elements):
            n = int.from_bytes(f, "big")
            if kind == "g" and not self.grp.is_member(n):
                raise SmpAborted("SMP value outside the group")
            if kind == "e" and not 0 <= n < self.grp.q:
                raise SmpAborted("SMP exponent out of range")
            out.append(n)
        return out

    def prove_log(self, version: int, secret: int) -> tuple[int, int]:
        r = self.s.random_scalar()
        c = self.h(version, self.exp(self.grp.g, r))
        return c, (r - secret * c) % self.grp.q

    def check_log(self, version: int, c: int, d: int, power: int) -> None:
        if c != self.h(version, self.mul(self.exp(self.grp.g, d), self.exp(power, c))):
            raise SmpAborted(f"zero-knowledge proof {version} failed")


class SmpInitiator(_Smp):
    def __init__(self, suite: CryptoSuite, session: OtrSession, secret: bytes):
        super().__init__(suite)
        self.x = _smp_secret(suite, session.identity.public, session.peer_identity, session.ssid, secret)

    def message1(self) -> bytes:
        g = self.grp.g
        self.a2, self.a3 = self.s.random_scalar(), self.s.random_scalar()
        c2, d2 = self.prove_log(1, self.a2)
        c3, d3 = self.prove_log(2, self.a3)
        return self.enc(self.exp(g, self.a2), c2, d2, self.exp(g, self.a3), c3, d3)

    def message3(self, raw: bytes) -> bytes:
        g, q = self.grp.g, self.grp.q
        g2b, c2, d2, g3b, c3, d3, pb, qb, cp, d5, d6 = self.dec(raw, "geegeeggeee")
        self.check_log(3, c2, d2, g2b)
        self.check_log(4, c3, d3, g3b)
        self.g2, self.g3 = self.exp(g2b, self.a2), self.exp(g3b, self.a3)
        self.g3b = g3b
        if cp != self.h(5, self.mul(self.exp(self.g3, d5), self.exp(pb, cp)),
                        self.mul(self.exp(g, d5), self.exp(self.g2, d6), self.exp(qb, cp))):
            raise SmpAborted("proof on (Pb, Qb) failed")
        s = self.s.random_scalar()
        self.pa, qa = self.exp(self.g3, s), self.mul(self.exp(g, s), self.exp(self.g2, self.x))
        r5, r6 = self.s.random_scalar(), self.s.random_scalar()
        cp2 = self.h(6, self.exp(self.g3, r5), self.mul(self.exp(g, r5), self.exp(self.g2, r6)))
        d5b, d6b = (r5 - s * cp2) % q, (r6 - self.x * cp2) % q
        self.pa_over_pb = self.mul(self.pa, self.inv(pb))
        self.qa_over_qb = self.mul(qa, self.inv(qb))
        ra = self.exp(self.qa_over_qb, self.a3)
        r7 = self.s.random_scalar()
        cr = self.h(7, self.exp(g, r7), self.exp(self.qa_over_qb, r7))
        d7 = (r7 - self.a3 * cr) % q
        return self.enc(self.pa, qa, cp2, d5b, d6b, ra, cr, d7)

    def finish(self, raw: bytes) -> bool:
        g = self.grp.g
        rb, cr, d7 = self.dec(raw, "gee")
        if cr != self.h(8, self.mul(self.exp(g, d7), self.exp(self.g3b, cr)),
                        self.mul(self.exp(self.qa_over_qb, d7), self.exp(rb, cr))):
            raise SmpAborted("proof on Rb failed")
        return self.exp(rb, self.a3) == self.pa_over_pb


class SmpResponder(_Smp):
    def __init__(self, suite: CryptoSuite, session: OtrSession, secret: bytes):
        super().__init__(suite)
        self.y = _smp_secret(suite, session.peer_identity, session.identity.public, session.ssid, secret)

    def message2(self, raw: bytes) -> bytes:
        g, q = self.grp.g, self.grp.q
        g2a, c2, d2, g3a, c3, d3 = self.dec(raw, "geegee")
        self.check_log(1, c2, d2, g2a)
        self.check_log(2, c3, d3, g3a)
        self.g3a = g3a
        b2, self.b3 = self.s.random_scalar(), self.s.random_scalar()
        c2b, d2b = self.prove_log(3, b2)
        c3b, d3b = self.prove_log(4, self.b3)
        self.g2, self.g3 = self.exp(g2a, b2), self.exp(g3a, self.b3)
        r = self.s.random_scalar()
        self.pb, self.qb = self.exp(self.g3, r), self.mul(self.exp(g, r), self.exp(self.g2, self.y))
        r5, r6 = self.s.random_scalar(), self.s.random_scalar()
        cp = self.h(5, self.exp(self.g3, r5), self.mul(self.exp(g, r5), self.exp(self.g2, r6)))
        d5, d6 = (r5 - r * cp) % q, (r6 - self.y * cp) % q
        return self.enc(self.exp(g, b2), c2b, d2b, self.exp(g, self.b3), c3b, d3b,
                        self.pb, self.qb, cp, d5, d6)

    def message4(self, raw: bytes) -> tuple[bytes, bool]:
        g, q = self.grp.g, self.grp.q
        pa, qa, cp, d5, d6, ra, cr, d7 = self.dec(raw, "ggeeegee")
        if cp != self.h(6, self.mul(self.exp(self.g3, d5), self.exp(pa, cp)),
                        self.mul(self.exp(g, d5), self.exp(self.g2, d6), self.exp(qa, cp))):
            raise SmpAborted("proof on (Pa, Qa) failed")
        qa_over_qb = self.mul(qa, self.inv(self.qb))
        if cr != self.h(7, self.mul(self.exp(g, d7), self.exp(self.g3a, cr)),
                        self.mul(self.exp(qa_over_qb, d7), self.exp(ra, cr))):
            raise SmpAborted("proof on Ra failed")
        rb = self.exp(qa_over_qb, self.b3)
        r7 = self.s.random_scalar()
        cr2 = self.h(8, self.exp(g, r7), self.exp(qa_over_qb, r7))
        d7b = (r7 - self.b3 * cr2) % q
        equal = self.exp(ra, self.b3) == self.mul(pa, self.inv(self.pb))
        return self.enc(rb, cr2, d7b), equal


def smp_run(suite: CryptoSuite, session_a: OtrSession, secret_a: bytes,
            session_b: OtrSession, secret_b: bytes, channel=None) -> SmpTranscript:
    """Zero-knowledge equality test of two secrets bound to each side's session.

    A man in the middle holding two different sessions makes the bound values
    differ, so the outcome is ``unequal`` even when the typed secrets match.
    """
    if not (session_a.established and session_b.established):
        raise NotEstablished("SMP needs established sessions")
    messages: list[bytes] = []

    def carry(i, src, dst, payload):
        out = payload if channel is None else channel(i, src, dst, payload)
        if out is None:
            raise SmpAborted(f"SMP message {i} was not delivered")
        messages.append(out)
        return out

    alice = SmpInitiator(suite, session_a, secret_a)
    bob = SmpResponder(suite, session_b, secret_b)
    a_name, b_name = session_a.owner, session_b.owner
    m1 = carry(1, a_name, b_name, alice.message1())
    m2 = carry(2, b_name, a_name, bob.message2(m1))
    m3 = carry(3, a_name, b_name, alice.message3(m2))
    m4, bob_view = bob.message4(m3)
    m4 = carry(4, b_name, a_name, m4)
    alice_view = alice.finish(m4)
    return SmpTranscript(messages, alice_view and bob_view, alice_view, bob_view)
