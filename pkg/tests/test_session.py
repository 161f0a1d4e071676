"""Client behaviour under different policy profiles."""

import pytest

from e2elab.errors import (
    AlreadyEncrypted,
    DuplicateUser,
    Irreversible,
    NotTracked,
    PeerOffline,
    SessionDead,
    Unsupported,
    VerificationFailed,
)
from e2elab.profiles import BUILTIN_PROFILES
from e2elab.session import Fingerprint, client_new, reinstall
from e2elab.simnet import World


def pair(profile="signal-like", protocol="signal-like", seed=1):
    world = World(seed)
    p = BUILTIN_PROFILES[profile]
    return world, client_new(world, "alice", p, protocol), client_new(world, "bob", p, protocol)


def kinds(events):
    return [e.kind for e in events]


def talk(world, alice, bob):
    cid_a, _ = alice.start_conversation("bob")
    if alice.profile.e2e_opt_in:
        alice.enable_encryption(cid_a)
    mid, _ = alice.send_text(cid_a, "hello")
    world.drain()
    cid_b, _ = bob.start_conversation("alice")
    if bob.profile.e2e_opt_in:
        bob.enable_encryption(cid_b)
    bob.send_text(cid_b, "hi")
    world.drain()
    return cid_a, cid_b, mid


def test_conversation_round_trip():
    world, alice, bob = pair()
    cid_a, cid_b, mid = talk(world, alice, bob)
    assert [h.text for h in bob.history("alice")] == ["hello", "hi"]
    assert [h.text for h in alice.history("bob")] == ["hello", "hi"]
    assert alice.message_status(mid) == "delivered"


def test_relay_sees_only_ciphertext():
    world, alice, bob = pair()
    talk(world, alice, bob)
    for entry in world.log:
        if entry.kind in ("send", "deliver"):
            assert b"hello" not in entry.payload and b"hi" not in entry.payload[4:]


def test_duplicate_user():
    world, alice, _ = pair()
    with pytest.raises(DuplicateUser):
        client_new(world, "alice", BUILTIN_PROFILES["signal-like"])


def test_fingerprints_agree_and_are_symmetric():
    world, alice, bob = pair()
    talk(world, alice, bob)
    assert alice.fingerprint("bob") == bob.fingerprint("alice")
    fp = alice.fingerprint("bob")
    assert len(fp.digits.split()) == 12 and all(len(g) == 5 for g in fp.digits.split())
    assert fp.qr_payload[0] == 1 and len(fp.qr_payload) == 65
    assert Fingerprint.of(alice.suite, 4, 16) == Fingerprint.of(alice.suite, 16, 4)


def test_verification_channels():
    world, alice, bob = pair("signal-like")
    talk(world, alice, bob)
    assert "verified" in kinds(alice.verify_peer("bob", "qr"))
    with pytest.raises(VerificationFailed):
        alice.verify_peer("bob", "in-person", presented="00000 " * 12)
    assert alice.events[-1].kind == "verification_failed"
    with pytest.raises(Unsupported):
        alice.is_verified("bob")
    world, alice, bob = pair("wire-like")
    talk(world, alice, bob)
    with pytest.raises(Unsupported):
        alice.verify_peer("bob", "qr")
    alice.verify_peer("bob")
    assert alice.is_verified("bob")


def test_blocking_after_key_change():
    world, alice, bob = pair("signal-like")
    cid, _, _ = talk(world, alice, bob)
    reinstall(world, "bob")
    mid, events = alice.send_text(cid, "still there?")
    assert kinds(events) == ["key_changed", "message_blocked"]
    assert alice.message_status(mid) == "held"
    released = alice.verify_peer("bob")
    assert "message_released" in kinds(released)
    world.drain()
    assert alice.message_status(mid) == "delivered"
    assert bob.history("alice")[-1].text == "still there?"


def test_resend_after_key_change_in_transit():
    world, alice, bob = pair("whatsapp-like")
    cid, _, _ = talk(world, alice, bob)
    world.set_online("bob", False)
    mid, _ = alice.send_text(cid, "in flight")
    notices = reinstall(world, "bob")["alice"]
    assert "key_changed" in kinds(notices) and "resent" in kinds(notices)
    world.set_online("bob", True)
    world.drain()
    assert alice.message_status(mid) == "delivered"
    assert [h.text for h in bob.history("alice")] == ["in flight"]


def test_viber_status_only_for_last_message():
    world, alice, bob = pair("viber-like")
    cid, _, first = talk(world, alice, bob)
    second, _ = alice.send_text(cid, "again")
    world.drain()
    assert alice.message_status(second) == "delivered"
    with pytest.raises(NotTracked):
        alice.message_status(first)


def test_opt_in_encryption_rules():
    world, alice, bob = pair("telegram-like")
    cid, _ = alice.start_conversation("bob")
    alice.send_text(cid, "plain")
    world.drain()
    assert any(b"plain" in e.payload for e in world.log if e.kind == "send")
    assert "encryption_enabled" in kinds(alice.enable_encryption(cid))
    with pytest.raises(Irreversible):
        alice.disable_encryption(cid)
    world, alice, _ = pair("signal-like")
    cid, _ = alice.start_conversation("bob")
    with pytest.raises(AlreadyEncrypted):
        alice.enable_encryption(cid)


def test_locked_session_dies_on_key_change():
    world, alice, bob = pair("telegram-like")
    cid, _, _ = talk(world, alice, bob)
    reinstall(world, "bob")
    with pytest.raises(SessionDead):
        alice.send_text(cid, "hello?")


def test_history_locked_after_reinstall():
    world, alice, bob = pair("riot-like")
    talk(world, alice, bob)
    reinstall(world, "bob")
    assert bob.history() and all(h.locked for h in bob.history())


def test_clear_trusted():
    world, alice, bob = pair("viber-like")
    talk(world, alice, bob)
    alice.verify_peer("bob")
    assert kinds(alice.clear_trusted()) == ["trust_cleared"]
    assert not alice.is_verified("bob")
    world, alice, _ = pair("signal-like")
    with pytest.raises(Unsupported):
        alice.clear_trusted()


def test_otr_needs_peer_online():
    world, alice, bob = pair(protocol="otr")
    cid, _ = alice.start_conversation("bob")
    alice.send_text(cid, "now")
    assert bob.history("alice")[-1].text == "now"
    world.set_online("bob", False)
    with pytest.raises(PeerOffline):
        alice.send_text(cid, "later")


def test_signal_delivers_to_offline_peer():
    world, alice, bob = pair()
    cid, _ = alice.start_conversation("bob")
    world.set_online("bob", False)
    mid, _ = alice.send_text(cid, "later")
    world.run(5)
    assert alice.message_status(mid) == "sent"
    world.set_online("bob", True)
    world.drain()
    assert alice.message_status(mid) == "delivered"
