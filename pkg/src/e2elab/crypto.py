"""Cryptographic contract used by every protocol in the lab, plus the toy suite.

The toy suite works in the order-q subgroup of quadratic residues modulo a
256-bit safe prime p = 2q + 1.  Hashing, key derivation, MACs and the AEAD are
all built from HMAC-SHA256.  None of this is constant time; it exists so that
protocol transcripts are small, deterministic and checkable by hand.
"""

from __future__ import annotations

import hashlib
import hmac
import random
from dataclasses import dataclass, field

from .errors import AuthenticationFailure, MalformedKey

HASH_LEN = 32

# Domain-separation labels for the ratchet KDFs.
LABEL_MESSAGE_KEY = b"\x01"
LABEL_CHAIN_KEY = b"\x02"
LABEL_ROOT_KEY = b"\x03"

TOY_P = 0xEE700855449692E20A5B6F4E98D97BD1A5C3C5B95A21C0A92ADDDCD8D5D12C93
TOY_Q = 0x7738042AA24B4971052DB7A74C6CBDE8D2E1E2DCAD10E054956EEE6C6AE89649
TOY_G = 4


def is_probable_prime(n: int, rounds: int = 40) -> bool:
    """Miller-Rabin with bases drawn from a fixed-seed generator."""
    if n < 2:
        return False
    for small in (2, 3, 5, 7, 11, 13, 17, 19, 23, 29, 31, 37):
        if n % small == 0:
            return n == small
    d, r = n - 1, 0
    while d % 2 == 0:
        d //= 2
        r += 1
    bases = random.Random(n.bit_length())
    for _ in range(rounds):
        a = bases.randrange(2, n - 1)
        x = pow(a, d, n)
        if x in (1, n - 1):
            continue
        for _ in range(r - 1):
            x = pow(x, 2, n)
            if x == n - 1:
                break
        else:
            return False
    return True


@dataclass(frozen=True)
class Group:
    p: int
    q: int
    g: int

    def __post_init__(self):
        if self.p != 2 * self.q + 1:
            raise ValueError("p must equal 2q + 1")
        if not (is_probable_prime(self.q) and is_probable_prime(self.p)):
            raise ValueError("group modulus is not a safe prime")
        if not self.is_member(self.g):
            raise ValueError("generator is not in the prime-order subgroup")

    @property
    def element_len(self) -> int:
        return (self.p.bit_length() + 7) // 8

    def is_member(self, y) -> bool:
        return isinstance(y, int) and 1 < y < self.p and pow(y, self.q, self.p) == 1

    def encode(self, y: int) -> bytes:
        return y.to_bytes(self.element_len, "big")

    def decode(self, raw: bytes) -> int:
        if len(raw) != self.element_len:
            raise MalformedKey(f"expected {self.element_len} bytes, got {len(raw)}")
        y = int.from_bytes(raw, "big")
        if not self.is_member(y):
            raise MalformedKey("not an element of the group")
        return y


@dataclass(frozen=True)
class KeyPair:
    private: int = field(repr=False)
    public: int


def _xor(data: bytes, stream: bytes) -> bytes:
    n = len(data)
    if n == 0:
        return b""
    return (int.from_bytes(data, "big") ^ int.from_bytes(stream[:n], "big")).to_bytes(n, "big")


class CryptoSuite:
    """Bundle of primitives over one group, with a seeded randomness source.

    Every method is a pure function of its arguments except the ones that draw
    fresh key material (``generate_keypair``, ``random_scalar``,
    ``random_bytes``), which consume the suite's seeded generator.
    """

    hash_id = "sha256"
    kdf_id = "hmac-sha256-labelled"
    mac_id = "hmac-sha256"
    aead_id = "sha256ctr-then-hmac-sha256"
    sig_id = "schnorr-sha256"
    hash_len = HASH_LEN

    def __init__(self, group: Group, seed: bytes):
        self.group = group
        self.rng = random.Random(int.from_bytes(hashlib.sha256(seed).digest(), "big"))

    # -- key material -----------------------------------------------------

    def random_scalar(self) -> int:
        return self.rng.randrange(1, self.group.q)

    def random_bytes(self, n: int) -> bytes:
        return self.rng.getrandbits(8 * n).to_bytes(n, "big") if n else b""

    def keypair_from_private(self, private: int) -> KeyPair:
        return KeyPair(private, pow(self.group.g, private, self.group.p))

    def generate_keypair(self) -> KeyPair:
        return self.keypair_from_private(self.random_scalar())

    def encode_public(self, public: int) -> bytes:
        return self.group.encode(public)

    def decode_public(self, raw: bytes) -> int:
        return self.group.decode(raw)

    def check_public(self, public) -> int:
        if not self.group.is_member(public):
            raise MalformedKey("public key is not a valid group element")
        return public

    # -- hashing and derivation ------------------------------------------

    def hash(self, data: bytes) -> bytes:
        return hashlib.sha256(data).digest()

    def hash_to_scalar(self, *parts: bytes) -> int:
        h = hashlib.sha256()
        for part in parts:
            h.update(len(part).to_bytes(4, "big"))
            h.update(part)
        return int.from_bytes(h.digest(), "big") % self.group.q

    def dh(self, private: int, public: int) -> bytes:
        self.check_public(public)
        shared = pow(public, private, self.group.p)
        return self.hash(self.group.encode(shared))

    def kdf(self, ikm: bytes, info: bytes) -> bytes:
        prk = hmac.new(b"\x00" * HASH_LEN, ikm, hashlib.sha256).digest()
        return hmac.new(prk, info + b"\x01", hashlib.sha256).digest()

    def kdf_rk(self, rk: bytes, dh_out: bytes) -> tuple[bytes, bytes]:
        new_rk = hmac.new(rk, LABEL_ROOT_KEY + dh_out, hashlib.sha256).digest()
        ck = hmac.new(rk, LABEL_CHAIN_KEY + dh_out, hashlib.sha256).digest()
        return new_rk, ck

    def kdf_ck(self, ck: bytes) -> tuple[bytes, bytes]:
        next_ck = hmac.new(ck, LABEL_CHAIN_KEY, hashlib.sha256).digest()
        mk = hmac.new(ck, LABEL_MESSAGE_KEY, hashlib.sha256).digest()
        return next_ck, mk

    # -- symmetric encryption --------------------------------------------

    def keystream(self, key: bytes, counter: int, length: int) -> bytes:
        prefix = b"\x10" + key + counter.to_bytes(8, "big")
        blocks = (length + HASH_LEN - 1) // HASH_LEN
        return b"".join(
            hashlib.sha256(prefix + i.to_bytes(4, "big")).digest() for i in range(blocks)
        )

    def stream_encrypt(self, key: bytes, counter: int, plaintext: bytes) -> bytes:
        """Counter-mode style encryption: malleable, no integrity."""
        return _xor(plaintext, self.keystream(key, counter, len(plaintext)))

    stream_decrypt = stream_encrypt

    def mac(self, key: bytes, data: bytes) -> bytes:
        return hmac.new(key, data, hashlib.sha256).digest()

    def verify_mac(self, key: bytes, data: bytes, tag) -> bool:
        try:
            return hmac.compare_digest(self.mac(key, data), bytes(tag))
        except (TypeError, ValueError):
            return False

    def _aead_keys(self, key: bytes) -> tuple[bytes, bytes]:
        return self.mac(key, b"\x04aead-enc"), self.mac(key, b"\x05aead-mac")

    def aead_mac_key(self, key: bytes) -> bytes:
        return self._aead_keys(key)[1]

    def aead_tag_matches(self, mac_key: bytes, ciphertext: bytes, ad: bytes) -> bool:
        """Tag check alone, for callers that try many keys against one ciphertext."""
        if len(ciphertext) < HASH_LEN:
            return False
        body, tag = ciphertext[:-HASH_LEN], ciphertext[-HASH_LEN:]
        return self.verify_mac(mac_key, len(ad).to_bytes(8, "big") + ad + body, tag)

    def aead_encrypt(self, key: bytes, plaintext: bytes, ad: bytes) -> bytes:
        enc_key, mac_key = self._aead_keys(key)
        body = self.stream_encrypt(enc_key, 0, plaintext)
        tag = self.mac(mac_key, len(ad).to_bytes(8, "big") + ad + body)
        return body + tag

    def aead_decrypt(self, key: bytes, ciphertext: bytes, ad: bytes) -> bytes:
        enc_key, mac_key = self._aead_keys(key)
        if not self.aead_tag_matches(mac_key, ciphertext, ad):
            raise AuthenticationFailure("AEAD tag mismatch")
        return self.stream_decrypt(enc_key, 0, ciphertext[:-HASH_LEN])

    # -- signatures (Schnorr, deterministic nonce) -----------------------

    def sign(self, private: int, message: bytes) -> bytes:
        grp = self.group
        k = self.hash_to_scalar(b"nonce", private.to_bytes(grp.element_len, "big"), message) or 1
        r = pow(grp.g, k, grp.p)
        public = pow(grp.g, private, grp.p)
        e = self.hash_to_scalar(grp.encode(r), grp.encode(public), message)
        s = (k + e * private) % grp.q
        return e.to_bytes(grp.element_len, "big") + s.to_bytes(grp.element_len, "big")

    def verify_sig(self, public, message: bytes, signature) -> bool:
        grp = self.group
        try:
            if not grp.is_member(public) or len(signature) != 2 * grp.element_len:
                return False
            e = int.from_bytes(signature[: grp.element_len], "big")
            s = int.from_bytes(signature[grp.element_len:], "big")
            if not (0 <= e < grp.q and 0 <= s < grp.q):
                return False
            r = pow(grp.g, s, grp.p) * pow(public, grp.q - e, grp.p) % grp.p
            return self.hash_to_scalar(grp.encode(r), grp.encode(public), message) == e
        except (TypeError, ValueError):
            return False


TOY_GROUP: Group | None = None


def toy_group() -> Group:
    global TOY_GROUP
    if TOY_GROUP is None:
        TOY_GROUP = Group(TOY_P, TOY_Q, TOY_G)
    return TOY_GROUP


def make_toy_suite(seed: bytes) -> CryptoSuite:
    if isinstance(seed, int):
        seed = seed_bytes(seed)
    if not seed:
        raise ValueError("toy suite seed must be non-empty")
    return CryptoSuite(toy_group(), bytes(seed))


def seed_bytes(seed: int) -> bytes:
    return seed.to_bytes(8, "big", signed=True)
