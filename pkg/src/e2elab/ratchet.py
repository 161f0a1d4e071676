"""Double Ratchet engine.

States are values: every public operation takes a :class:`RatchetState` and
returns a new one, leaving the input untouched.  A failed decryption therefore
never corrupts the caller's state.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field, replace

from .crypto import CryptoSuite, KeyPair
from .errors import (
    MalformedKey,
    NoMatchingKey,
    ProtocolViolation,
    TooManySkipped,
)
from .wire import VERSION, pack_fields, read_u32, u32, unpack_fields

MAX_SKIP_STORE = 1000
MAX_SKIP_PER_CHAIN = 512
MAX_RETIRED = 1000


@dataclass(frozen=True)
class MessageHeader:
    dh: int
    pn: int
    n: int

    def encode(self, suite: CryptoSuite) -> bytes:
        return suite.encode_public(self.dh) + struct.pack(">II", self.pn, self.n)


@dataclass(frozen=True)
class Envelope:
    header: MessageHeader
    ciphertext: bytes

    def to_bytes(self, suite: CryptoSuite) -> bytes:
        h = self.header
        return (struct.pack(">H", VERSION) + suite.encode_public(h.dh)
                + struct.pack(">III", h.pn, h.n, len(self.ciphertext)) + self.ciphertext)

    @classmethod
    def from_bytes(cls, suite: CryptoSuite, raw: bytes) -> Envelope:
        width = suite.group.element_len
        fixed = 2 + width + 12
        if len(raw) < fixed:
            raise ProtocolViolation("envelope too short")
        (version,) = struct.unpack_from(">H", raw)
        if version != VERSION:
            raise ProtocolViolation(f"unsupported envelope version {version}")
        dh = suite.decode_public(raw[2:2 + width])
        pn, n, length = struct.unpack_from(">III", raw, 2 + width)
        if len(raw) != fixed + length:
            raise ProtocolViolation("envelope length mismatch")
        return cls(MessageHeader(dh, pn, n), raw[fixed:])


@dataclass
class RatchetState:
    rk: bytes
    dhs: KeyPair
    dhr: int | None = None
    cks: bytes | None = None
    ckr: bytes | None = None
    ns: int = 0
    nr: int = 0
    pn: int = 0
    skipped: dict = field(default_factory=dict)
    # Remote ratchet publics already ratcheted past; replays under them are refused.
    retired: tuple = ()

    def copy(self) -> RatchetState:
        return replace(self, skipped=dict(self.skipped))

    def to_bytes(self) -> bytes:
        def opt(b):
            return b"" if b is None else b

        def num(x):
            return x.to_bytes(32, "big")

        skipped = b"".join(num(dh) + u32(n) + mk for (dh, n), mk in self.skipped.items())
        return pack_fields(
            self.rk, num(self.dhs.private), num(self.dhs.public),
            b"" if self.dhr is None else num(self.dhr), opt(self.cks), opt(self.ckr),
            u32(self.ns), u32(self.nr), u32(self.pn), skipped,
            b"".join(num(x) for x in self.retired),
        )

    @classmethod
    def from_bytes(cls, raw: bytes) -> RatchetState:
        (rk, priv, pub, dhr, cks, ckr, ns, nr, pn, skipped_raw, retired_raw) = unpack_fields(raw)

        def num(b):
            return int.from_bytes(b, "big")

        skipped = {}
        for i in range(0, len(skipped_raw), 68):
            rec = skipped_raw[i:i + 68]
            skipped[(num(rec[:32]), read_u32(rec[32:36]))] = rec[36:]
        retired = tuple(num(retired_raw[i:i + 32]) for i in range(0, len(retired_raw), 32))
        return cls(rk, KeyPair(num(priv), num(pub)), num(dhr) if dhr else None,
                   cks or None, ckr or None, read_u32(ns), read_u32(nr), read_u32(pn),
                   skipped, retired)


def _sk_bytes(sk) -> bytes:
    return getattr(sk, "sk", sk)


def init_initiator(suite: CryptoSuite, sk, remote_public: int) -> RatchetState:
    suite.check_public(remote_public)
    dhs = suite.generate_keypair()
    rk, cks = suite.kdf_rk(_sk_bytes(sk), suite.dh(dhs.private, remote_public))
    return RatchetState(rk=rk, dhs=dhs, dhr=remote_public, cks=cks)


def init_responder(suite: CryptoSuite, sk, own_keypair: KeyPair) -> RatchetState:
    return RatchetState(rk=_sk_bytes(sk), dhs=own_keypair)


def _dh_ratchet(suite: CryptoSuite, state: RatchetState, remote_public: int) -> None:
    suite.check_public(remote_public)
    if state.dhr is not None:
        state.retired = (state.retired + (state.dhr,))[-MAX_RETIRED:]
    state.pn = state.ns
    state.ns = 0
    state.nr = 0
    state.dhr = remote_public
    state.rk, state.ckr = suite.kdf_rk(state.rk, suite.dh(state.dhs.private, remote_public))
    state.dhs = suite.generate_keypair()
    state.rk, state.cks = suite.kdf_rk(state.rk, suite.dh(state.dhs.private, remote_public))


def dh_ratchet(suite: CryptoSuite, state: RatchetState, remote_public: int) -> RatchetState:
    new = state.copy()
    _dh_ratchet(suite, new, remote_public)
    return new


def _skip(suite: CryptoSuite, state: RatchetState, until: int) -> None:
    if state.ckr is None or until <= state.nr:
        return
    missing = until - state.nr
    if missing > MAX_SKIP_PER_CHAIN:
        raise TooManySkipped(f"{missing} keys skipped in one chain (max {MAX_SKIP_PER_CHAIN})")
    if len(state.skipped) + missing > MAX_SKIP_STORE:
        raise TooManySkipped(f"skipped-key store would exceed {MAX_SKIP_STORE}")
    while state.nr < until:
        state.ckr, mk = suite.kdf_ck(state.ckr)
        state.skipped[(state.dhr, state.nr)] = mk
        state.nr += 1


def ratchet_encrypt(suite: CryptoSuite, state: RatchetState, plaintext: bytes,
                    ad: bytes = b"") -> tuple[RatchetState, Envelope]:
    if state.cks is None:
        raise ProtocolViolation("no sending chain yet; the responder must receive first")
    new = state.copy()
    new.cks, mk = suite.kdf_ck(new.cks)
    header = MessageHeader(new.dhs.public, new.pn, new.ns)
    new.ns += 1
    ciphertext = suite.aead_encrypt(mk, plaintext, ad + header.encode(suite))
    return new, Envelope(header, ciphertext)


def ratchet_decrypt(suite: CryptoSuite, state: RatchetState, envelope: Envelope,
                    ad: bytes = b"") -> tuple[RatchetState, bytes]:
    header = envelope.header
    full_ad = ad + header.encode(suite)
    key = (header.dh, header.n)
    if key in state.skipped:
        plaintext = suite.aead_decrypt(state.skipped[key], envelope.ciphertext, full_ad)
        new = state.copy()
        del new.skipped[key]
        return new, plaintext

    new = state.copy()
    if header.dh != new.dhr:
        if header.dh in new.retired:
            raise NoMatchingKey("message key for an old chain was already used or discarded")
        suite.check_public(header.dh)
        _skip(suite, new, header.pn)
        _dh_ratchet(suite, new, header.dh)
    elif header.n < new.nr:
        raise NoMatchingKey(f"message {header.n} already consumed")
    _skip(suite, new, header.n)
    new.ckr, mk = suite.kdf_ck(new.ckr)
    new.nr += 1
    plaintext = suite.aead_decrypt(mk, envelope.ciphertext, full_ad)
    return new, plaintext


# -- compromise analysis ------------------------------------------------------

def reachable_message_keys(suite: CryptoSuite, states, observed_publics, depth: int = 64) -> set[bytes]:
    """Every message key an adversary can derive from captured states.

    The adversary holds the full states and every ratchet public seen on the
    wire.  It takes every stored skipped key, walks each chain key forward
    ``depth`` steps, and for each root key tries a DH ratchet step against every
    observed public with each ratchet private it holds.
    """
    keys: set[bytes] = set()
    chain_keys: list[bytes] = []
    privates = {s.dhs.private for s in states}
    for s in states:
        keys.update(s.skipped.values())
        chain_keys.extend(ck for ck in (s.cks, s.ckr) if ck is not None)
        for priv in privates:
            for pub in observed_publics:
                try:
                    out = suite.dh(priv, pub)
                except MalformedKey:
                    continue
                chain_keys.append(suite.kdf_rk(s.rk, out)[1])
    for ck in chain_keys:
        for _ in range(depth):
            ck, mk = suite.kdf_ck(ck)
            keys.add(mk)
    return keys


def count_decryptable(suite: CryptoSuite, envelopes, keys, ad: bytes = b"") -> int:
    """How many envelopes open under some key in ``keys``."""
    mac_keys = [suite.aead_mac_key(mk) for mk in keys]
    hits = 0
    for env in envelopes:
        full_ad = ad + env.header.encode(suite)
        if any(suite.aead_tag_matches(k, env.ciphertext, full_ad) for k in mac_keys):
            hits += 1
    return hits
