"""Double Ratchet engine."""

import random

import pytest
from hypothesis import given
from hypothesis import strategies as st

from e2elab import drills
from e2elab.errors import (
    AuthenticationFailure,
    MalformedKey,
    NoMatchingKey,
    ProtocolViolation,
    TooManySkipped,
)
from e2elab.ratchet import (
    MAX_SKIP_PER_CHAIN,
    Envelope,
    MessageHeader,
    RatchetState,
    ratchet_decrypt,
    ratchet_encrypt,
)


def test_ping_pong():
    pair = drills.ratchet_pair(3)
    for i in range(10):
        who = "a" if i % 3 else "b"
        if who == "b" and pair.bob.cks is None:
            who = "a"
        env = pair.send(who, f"m{i}".encode())
        assert pair.receive(drills._other(who), env) == f"m{i}".encode()


def test_responder_cannot_send_first():
    pair = drills.ratchet_pair(3)
    with pytest.raises(ProtocolViolation):
        pair.send("b", b"too early")


def test_header_counters():
    pair = drills.ratchet_pair(4)
    e1, e2 = pair.send("a", b"1"), pair.send("a", b"2")
    assert (e1.header.pn, e1.header.n, e2.header.n) == (0, 0, 1)
    pair.receive("b", e1)
    pair.receive("b", e2)
    reply = pair.send("b", b"r")
    assert (reply.header.pn, reply.header.n) == (0, 0)
    pair.receive("a", reply)
    e3 = pair.send("a", b"3")
    assert (e3.header.pn, e3.header.n) == (2, 0)
    assert e3.header.dh != e1.header.dh


def test_out_of_order_example_state():
    t = drills.out_of_order_example()
    assert t["headers"] == {"B1": (0, 0), "B2": (0, 1), "B3": (2, 0), "B4": (2, 1)}
    assert t["skipped_after_B4"] == t["expected_skipped"]
    assert len(t["skipped_after_B2"]) == 1
    assert t["skipped_after_B3"] == []
    assert t["plaintexts"] == [b"B1", b"B4", b"B2", b"B3"]


def test_replay_refused():
    pair = drills.ratchet_pair(5)
    env = pair.exchange("a", b"once")
    with pytest.raises(NoMatchingKey):
        pair.receive("b", env)
    pair.exchange("b", b"turn")
    pair.exchange("a", b"again")
    with pytest.raises(NoMatchingKey):
        pair.receive("b", env)


def test_failed_decrypt_leaves_state_untouched():
    pair = drills.ratchet_pair(6)
    env = pair.send("a", b"x")
    bad = Envelope(env.header, env.ciphertext[:-1] + bytes([env.ciphertext[-1] ^ 1]))
    before = pair.bob.to_bytes()
    with pytest.raises(AuthenticationFailure):
        pair.receive("b", bad)
    assert pair.bob.to_bytes() == before
    assert pair.receive("b", env) == b"x"


def test_skip_limit():
    pair = drills.ratchet_pair(7)
    env = pair.send("a", b"x")
    far = Envelope(MessageHeader(env.header.dh, 0, MAX_SKIP_PER_CHAIN + 1), env.ciphertext)
    with pytest.raises(TooManySkipped):
        pair.receive("b", far)


def test_invalid_ratchet_key_rejected():
    pair = drills.ratchet_pair(8)
    env = pair.send("a", b"x")
    with pytest.raises(MalformedKey):
        pair.receive("b", Envelope(MessageHeader(1, 0, 0), env.ciphertext))


def test_state_serialisation_round_trip():
    pair = drills.ratchet_pair(9)
    pair.exchange("a", b"1")
    pair.send("b", b"lost")
    pair.receive("a", pair.send("b", b"2"))
    assert pair.alice.skipped
    restored = RatchetState.from_bytes(pair.alice.to_bytes())
    assert restored == pair.alice


def test_encrypt_does_not_mutate_input():
    pair = drills.ratchet_pair(10)
    before = pair.alice.to_bytes()
    ratchet_encrypt(pair.suite, pair.alice, b"x", pair.ad)
    assert pair.alice.to_bytes() == before


@given(st.integers(0, 2**32 - 1), st.integers(2, 30))
def test_any_delivery_permutation_decrypts(seed, n):
    rng = random.Random(seed)
    pair = drills.ratchet_pair(seed % 50)
    pair.exchange("a", b"open")
    envs = []
    for i in range(n):
        if rng.random() < 0.2:
            pair.exchange("a", b"turn")
        envs.append((pair.send("b", f"{i}".encode()), f"{i}".encode()))
    rng.shuffle(envs)
    for env, plaintext in envs:
        assert pair.receive("a", env) == plaintext
    assert pair.alice.skipped == {}


@given(st.binary(max_size=64))
def test_envelope_round_trip(body):
    pair = drills.ratchet_pair(11)
    env = pair.send("a", body)
    assert Envelope.from_bytes(pair.suite, env.to_bytes(pair.suite)) == env
    raw = env.to_bytes(pair.suite)
    with pytest.raises(ProtocolViolation):
        Envelope.from_bytes(pair.suite, raw[:-1])


def test_decrypt_leaves_input_state_alone():
    pair = drills.ratchet_pair(12)
    env = pair.send("a", b"x")
    before = pair.bob.to_bytes()
    _, p1 = ratchet_decrypt(pair.suite, pair.bob, env, pair.ad)
    _, p2 = ratchet_decrypt(pair.suite, pair.bob, env, pair.ad)
    assert p1 == p2 == b"x" and pair.bob.to_bytes() == before
