"""Toy suite: frozen vectors plus algebraic properties."""

from importlib import resources

import pytest
from hypothesis import given
from hypothesis import strategies as st

from e2elab.crypto import TOY_G, TOY_P, TOY_Q, is_probable_prime, make_toy_suite, toy_group
from e2elab.errors import AuthenticationFailure, MalformedKey

ZERO = bytes(32)
scalars = st.integers(min_value=1, max_value=TOY_Q - 1)


def golden():
    text = resources.files("e2elab").joinpath("data/golden_vectors.txt").read_text()
    return dict(line.split("=", 1) for line in text.splitlines() if line and not line.startswith("#"))


def test_group_parameters():
    assert TOY_P == 2 * TOY_Q + 1
    assert is_probable_prime(TOY_P) and is_probable_prime(TOY_Q)
    assert pow(TOY_G, TOY_Q, TOY_P) == 1
    assert toy_group().element_len == 32


def test_golden_vectors(suite):
    g = golden()
    root, chain = suite.kdf_rk(ZERO, ZERO)
    assert root.hex() == g["kdf_rk.zero.root"]
    assert chain.hex() == g["kdf_rk.zero.chain"]
    next_ck, mk = suite.kdf_ck(ZERO)
    assert next_ck.hex() == g["kdf_ck.zero.chain"]
    assert mk.hex() == g["kdf_ck.zero.message"]
    assert suite.dh(2, pow(4, 3, TOY_P)).hex() == g["dh.toy.a2b3"]
    assert suite.aead_encrypt(ZERO, b"hello", b"ad").hex() == g["aead.zero.hello.ad"]


def test_dh_matches_modpow_oracle(suite):
    # g^(2*3) computed directly
    assert suite.dh(2, pow(TOY_G, 3, TOY_P)) == suite.hash(pow(TOY_G, 6, TOY_P).to_bytes(32, "big"))


@given(scalars, scalars)
def test_dh_symmetry(a, b):
    s = make_toy_suite(b"dh")
    pa, pb = s.keypair_from_private(a), s.keypair_from_private(b)
    assert s.dh(a, pb.public) == s.dh(b, pa.public)


@pytest.mark.parametrize("bad", [0, 1, TOY_P - 1, TOY_P, TOY_P + 4, 2])
def test_rejects_non_members(suite, bad):
    # 2 is a non-residue mod this p
    with pytest.raises(MalformedKey):
        suite.dh(5, bad)


@given(st.binary(min_size=32, max_size=32), st.binary(min_size=32, max_size=32))
def test_kdf_outputs_are_distinct(rk, dh_out):
    s = make_toy_suite(b"kdf")
    new_rk, ck = s.kdf_rk(rk, dh_out)
    next_ck, mk = s.kdf_ck(ck)
    assert len({new_rk, ck, next_ck, mk, rk}) == 5


@given(st.binary(max_size=200), st.binary(max_size=40), st.data())
def test_aead_rejects_any_bit_flip(plaintext, ad, data):
    s = make_toy_suite(b"aead")
    key = bytes(range(32))
    ct = s.aead_encrypt(key, plaintext, ad)
    assert s.aead_decrypt(key, ct, ad) == plaintext
    bit = data.draw(st.integers(0, 8 * len(ct) - 1))
    flipped = bytearray(ct)
    flipped[bit // 8] ^= 1 << (bit % 8)
    with pytest.raises(AuthenticationFailure):
        s.aead_decrypt(key, bytes(flipped), ad)
    with pytest.raises(AuthenticationFailure):
        s.aead_decrypt(key, ct, ad + b"x")


@given(st.binary(min_size=1, max_size=100), st.binary(min_size=1, max_size=100))
def test_stream_cipher_is_malleable(plaintext, delta):
    s = make_toy_suite(b"stream")
    key = b"k" * 32
    ct = s.stream_encrypt(key, 7, plaintext)
    pad = delta[: len(ct)].ljust(len(ct), b"\0")
    tampered = bytes(c ^ d for c, d in zip(ct, pad))
    assert s.stream_decrypt(key, 7, tampered) == bytes(p ^ d for p, d in zip(plaintext, pad))


@given(scalars, st.binary(max_size=64))
def test_signatures(private, message):
    s = make_toy_suite(b"sig")
    pub = s.keypair_from_private(private).public
    sig = s.sign(private, message)
    assert s.verify_sig(pub, message, sig)
    assert not s.verify_sig(pub, message + b"!", sig)
    assert not s.verify_sig(pub, message, sig[:-1] + bytes([sig[-1] ^ 1]))
    assert not s.verify_sig(pub, message, sig[:10])


def test_seeded_suites_are_reproducible():
    a, b = make_toy_suite(b"seed"), make_toy_suite(b"seed")
    assert a.generate_keypair() == b.generate_keypair()
    assert make_toy_suite(b"other").generate_keypair() != make_toy_suite(b"seed").generate_keypair()
    with pytest.raises(ValueError):
        make_toy_suite(b"")
