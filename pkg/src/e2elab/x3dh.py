"""Extended Triple Diffie-Hellman: prekey bundles, the prekey server, initiate/respond.

DH combination used throughout::

    DH1 = DH(IK_A, SPK_B)   DH2 = DH(EK_A, IK_B)
    DH3 = DH(EK_A, SPK_B)   DH4 = DH(EK_A, OPK_B)   (only when an OPK was served)
    SK  = KDF(F || DH1 || DH2 || DH3 [|| DH4])

The initial ciphertext is AEAD-encrypted under a key derived from SK with
AD = encode(IK_A) || encode(IK_B).
"""

from __future__ import annotations

from collections import OrderedDict
from dataclasses import dataclass, field

from .crypto import CryptoSuite, KeyPair
from .errors import (
    AbortAndErase,
    AuthenticationFailure,
    NoSuchPrekey,
    NoSuchUser,
    SignatureInvalid,
)
from .wire import pack_fields, pack_versioned, read_u32, u32, unpack_fields, unpack_versioned

KDF_PAD = b"\xff" * 32


@dataclass
class IdentityKeys:
    owner: str
    ik: KeyPair


@dataclass(frozen=True)
class PrekeyBundle:
    owner: str
    ik_public: int
    spk_id: int
    spk_public: int
    spk_signature: bytes
    opk_id: int | None = None
    opk_public: int | None = None

    def to_bytes(self, suite: CryptoSuite) -> bytes:
        enc = suite.encode_public
        opk = b"" if self.opk_id is None else u32(self.opk_id) + enc(self.opk_public)
        return pack_fields(
            self.owner.encode(), enc(self.ik_public), u32(self.spk_id),
            enc(self.spk_public), self.spk_signature, opk,
        )

    @classmethod
    def from_bytes(cls, suite: CryptoSuite, raw: bytes) -> PrekeyBundle:
        owner, ik, spk_id, spk, sig, opk = unpack_fields(raw)
        opk_id = opk_public = None
        if opk:
            opk_id, opk_public = read_u32(opk[:4]), suite.decode_public(opk[4:])
        return cls(owner.decode(), suite.decode_public(ik), read_u32(spk_id),
                   suite.decode_public(spk), sig, opk_id, opk_public)


@dataclass(frozen=True)
class InitialMessage:
    ik_a: int
    ek_a: int
    spk_id: int
    opk_id: int | None
    ciphertext: bytes

    def to_bytes(self, suite: CryptoSuite) -> bytes:
        opk = b"" if self.opk_id is None else u32(self.opk_id)
        return pack_versioned(suite.encode_public(self.ik_a), suite.encode_public(self.ek_a),
                              u32(self.spk_id), opk, self.ciphertext)

    @classmethod
    def from_bytes(cls, suite: CryptoSuite, raw: bytes) -> InitialMessage:
        ik_a, ek_a, spk_id, opk_id, ct = unpack_versioned(raw, 5)
        return cls(suite.decode_public(ik_a), suite.decode_public(ek_a), read_u32(spk_id),
                   read_u32(opk_id) if opk_id else None, ct)


@dataclass
class SessionSecret:
    sk: bytes


@dataclass
class X3dhUser:
    """One install's identity plus the private halves of its published prekeys."""

    identity: IdentityKeys
    signed_prekeys: dict[int, KeyPair] = field(default_factory=dict)
    one_time_prekeys: dict[int, KeyPair] = field(default_factory=dict)
    current_spk_id: int | None = None
    # Intermediate secrets live here only while initiate/respond run.
    scratch: dict = field(default_factory=dict)

    @property
    def owner(self) -> str:
        return self.identity.owner

    @classmethod
    def create(cls, suite: CryptoSuite, owner: str) -> X3dhUser:
        return cls(IdentityKeys(owner, suite.generate_keypair()))


@dataclass
class _Registration:
    ik_public: int
    spk_id: int
    spk_public: int
    spk_signature: bytes
    opks: OrderedDict = field(default_factory=OrderedDict)


class PrekeyServer:
    """Holds published bundles; serves and deletes one OPK per fetch.

    Identifiers are assigned by the server and are never reused for a user,
    even across reinstalls.
    """

    def __init__(self):
        self._records: dict[str, _Registration] = {}
        self._next_id: dict[str, int] = {}
        self.served_opk_ids: dict[str, list[int]] = {}

    def _allocate(self, user: str) -> int:
        n = self._next_id.get(user, 1)
        self._next_id[user] = n + 1
        return n

    def is_registered(self, user: str) -> bool:
        return user in self._records

    def users(self) -> list[str]:
        return list(self._records)

    def register(self, user: str, ik_public: int, spk_public: int, spk_signature: bytes,
                 opk_publics: list[int]) -> tuple[int, list[int]]:
        record = self._records.get(user)
        spk_id = self._allocate(user)
        if record is None or record.ik_public != ik_public:
            # New install: prekeys of the old identity are useless, drop them.
            record = _Registration(ik_public, spk_id, spk_public, spk_signature)
            self._records[user] = record
        else:
            record.spk_id, record.spk_public, record.spk_signature = spk_id, spk_public, spk_signature
        opk_ids = []
        for pub in opk_publics:
            opk_id = self._allocate(user)
            record.opks[opk_id] = pub
            opk_ids.append(opk_id)
        return spk_id, opk_ids

    def remove(self, user: str) -> None:
        self._records.pop(user, None)

    def opk_count(self, user: str) -> int:
        return len(self._records[user].opks) if user in self._records else 0

    def fetch(self, requester: str, target: str) -> PrekeyBundle:
        record = self._records.get(target)
        if record is None:
            raise NoSuchUser(target)
        opk_id = opk_public = None
        if record.opks:
            opk_id, opk_public = record.opks.popitem(last=False)
            self.served_opk_ids.setdefault(target, []).append(opk_id)
        return PrekeyBundle(target, record.ik_public, record.spk_id, record.spk_public,
                            record.spk_signature, opk_id, opk_public)

    def identity_of(self, user: str) -> int:
        if user not in self._records:
            raise NoSuchUser(user)
        return self._records[user].ik_public


def publish_bundle(suite: CryptoSuite, server: PrekeyServer, user: X3dhUser, count: int) -> list[int]:
    """Upload IK, a fresh signed prekey and ``count`` one-time prekeys."""
    spk = suite.generate_keypair()
    signature = suite.sign(user.identity.ik.private, suite.encode_public(spk.public))
    opks = [suite.generate_keypair() for _ in range(count)]
    spk_id, opk_ids = server.register(user.owner, user.identity.ik.public, spk.public,
                                      signature, [k.public for k in opks])
    user.signed_prekeys[spk_id] = spk
    user.current_spk_id = spk_id
    user.one_time_prekeys.update(zip(opk_ids, opks))
    return opk_ids


def fetch_bundle(server: PrekeyServer, requester: str, target: str) -> PrekeyBundle:
    return server.fetch(requester, target)


def associated_data(suite: CryptoSuite, ik_a: int, ik_b: int) -> bytes:
    return suite.encode_public(ik_a) + suite.encode_public(ik_b)


def _derive_sk(suite: CryptoSuite, dhs: list[bytes]) -> bytes:
    return suite.kdf(KDF_PAD + b"".join(dhs), b"x3dh-sk")


def initial_key(suite: CryptoSuite, sk: bytes) -> bytes:
    return suite.kdf(sk, b"x3dh-initial-message")


def initiate(suite: CryptoSuite, alice: IdentityKeys, bundle: PrekeyBundle,
             first_plaintext: bytes, trace: list | None = None,
             scratch: dict | None = None) -> tuple[SessionSecret, InitialMessage]:
    """Run the initiator side. ``trace`` collects intermediate secrets for erasure tests."""
    if not suite.verify_sig(bundle.ik_public, suite.encode_public(bundle.spk_public),
                            bundle.spk_signature):
        raise SignatureInvalid("signed prekey signature does not verify")
    scratch = {} if scratch is None else scratch
    try:
        ek = suite.generate_keypair()
        scratch["ek"] = ek
        dhs = [
            suite.dh(alice.ik.private, bundle.spk_public),
            suite.dh(ek.private, bundle.ik_public),
            suite.dh(ek.private, bundle.spk_public),
        ]
        if bundle.opk_public is not None:
            dhs.append(suite.dh(ek.private, bundle.opk_public))
        scratch["dhs"] = dhs
        sk = _derive_sk(suite, dhs)
        if trace is not None:
            trace.extend([ek.private, *dhs, sk])
        ad = associated_data(suite, alice.ik.public, bundle.ik_public)
        ciphertext = suite.aead_encrypt(initial_key(suite, sk), first_plaintext, ad)
        msg = InitialMessage(alice.ik.public, ek.public, bundle.spk_id, bundle.opk_id, ciphertext)
        return SessionSecret(sk), msg
    finally:
        scratch.clear()


def respond(suite: CryptoSuite, bob: X3dhUser, msg: InitialMessage,
            trace: list | None = None) -> tuple[SessionSecret, bytes]:
    spk = bob.signed_prekeys.get(msg.spk_id)
    if spk is None:
        raise NoSuchPrekey(f"signed prekey {msg.spk_id}")
    opk = None
    if msg.opk_id is not None:
        opk = bob.one_time_prekeys.get(msg.opk_id)
        if opk is None:
            raise NoSuchPrekey(f"one-time prekey {msg.opk_id}")
    scratch = bob.scratch
    try:
        dhs = [
            suite.dh(spk.private, msg.ik_a),
            suite.dh(bob.identity.ik.private, msg.ek_a),
            suite.dh(spk.private, msg.ek_a),
        ]
        if opk is not None:
            dhs.append(suite.dh(opk.private, msg.ek_a))
        scratch["dhs"] = dhs
        sk = _derive_sk(suite, dhs)
        scratch["sk"] = sk
        if trace is not None:
            trace.extend([*dhs, sk])
        ad = associated_data(suite, msg.ik_a, bob.identity.ik.public)
        try:
            plaintext = suite.aead_decrypt(initial_key(suite, sk), msg.ciphertext, ad)
        except AuthenticationFailure as exc:
            raise AbortAndErase("initial ciphertext failed to decrypt; SK erased") from exc
        if msg.opk_id is not None:
            del bob.one_time_prekeys[msg.opk_id]
        return SessionSecret(sk), plaintext
    finally:
        scratch.clear()
