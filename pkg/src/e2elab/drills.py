"""Protocol-level measurements: compromise drills, ordering drills and the fuzz run.

Each drill drives the engines directly (no policy layer) and returns plain
counts, so the same numbers back the property report, the tests and the CLI.
"""

from __future__ import annotations

import copy
import random
from dataclasses import dataclass, field

from . import otr
from .crypto import CryptoSuite, make_toy_suite
from .errors import E2ELabError
from .ratchet import (
    Envelope,
    RatchetState,
    count_decryptable,
    init_initiator,
    init_responder,
    ratchet_decrypt,
    ratchet_encrypt,
    reachable_message_keys,
)
from .simnet import Interceptor, World
from .x3dh import PrekeyServer, X3dhUser, associated_data, initiate, publish_bundle, respond


def grade(good: int, total: int) -> str:
    """pass when every case holds, partial when some do, fail when none do."""
    if total and good == total:
        return "pass"
    return "partial" if good else "fail"


def _other(who: str) -> str:
    return "b" if who == "a" else "a"


def _senders(rng: random.Random, n: int) -> list[str]:
    """Bursty alternation starting with the initiator."""
    out, who = [], "a"
    while len(out) < n:
        out.extend([who] * rng.randint(1, 4))
        who = _other(who)
    return out[:n]


# -- Double Ratchet ----------------------------------------------------------

@dataclass
class RatchetPair:
    suite: CryptoSuite
    alice: RatchetState
    bob: RatchetState
    ad: bytes
    sent: list = field(default_factory=list)

    def send(self, who: str, plaintext: bytes) -> Envelope:
        if who == "a":
            self.alice, env = ratchet_encrypt(self.suite, self.alice, plaintext, self.ad)
        else:
            self.bob, env = ratchet_encrypt(self.suite, self.bob, plaintext, self.ad)
        self.sent.append((who, env, plaintext))
        return env

    def receive(self, who: str, env: Envelope) -> bytes:
        if who == "a":
            self.alice, out = ratchet_decrypt(self.suite, self.alice, env, self.ad)
        else:
            self.bob, out = ratchet_decrypt(self.suite, self.bob, env, self.ad)
        return out

    def exchange(self, who: str, plaintext: bytes) -> Envelope:
        env = self.send(who, plaintext)
        self.receive(_other(who), env)
        return env

    def publics(self) -> set[int]:
        return {env.header.dh for _, env, _ in self.sent}


def ratchet_pair(seed: int, with_opk: bool = True) -> RatchetPair:
    """X3DH handshake followed by ratchet initialisation on both sides."""
    suite = make_toy_suite(seed)
    server = PrekeyServer()
    alice, bob = X3dhUser.create(suite, "alice"), X3dhUser.create(suite, "bob")
    publish_bundle(suite, server, bob, 1 if with_opk else 0)
    bundle = server.fetch("alice", "bob")
    secret_a, initial = initiate(suite, alice.identity, bundle, b"")
    secret_b, _ = respond(suite, bob, initial)
    ad = associated_data(suite, alice.identity.ik.public, bob.identity.ik.public)
    state_a = init_initiator(suite, secret_a, bundle.spk_public)
    state_b = init_responder(suite, secret_b, bob.signed_prekeys[initial.spk_id])
    return RatchetPair(suite, state_a, state_b, ad)


def ratchet_forward_secrecy(seed: int, messages: int = 50) -> tuple[int, int]:
    """Record a conversation, then hand both final states to the adversary."""
    pair = ratchet_pair(seed)
    for i, who in enumerate(_senders(random.Random(seed), messages)):
        pair.exchange(who, f"m{i}".encode())
    keys = reachable_message_keys(pair.suite, [pair.alice, pair.bob], pair.publics())
    envelopes = [env for _, env, _ in pair.sent]
    return count_decryptable(pair.suite, envelopes, keys, pair.ad), len(envelopes)


def _follow_with_clone(suite: CryptoSuite, clone: RatchetState, inbound, ad: bytes) -> set[int]:
    """Feed intercepted envelopes to a stolen state; return the indices it opens."""
    opened = set()
    for index, env in inbound:
        try:
            clone, _ = ratchet_decrypt(suite, clone, env, ad)
        except E2ELabError:
            continue
        opened.add(index)
    return opened


def ratchet_break_in(seed: int, before: int = 10, after: int = 20) -> dict:
    """Steal Alice's state mid-conversation, then let one honest round trip happen.

    The adversary walks every chain reachable from the stolen state and also
    keeps running the stolen state on Bob's traffic.  ``round_trip_read``
    shows the theft really works; ``after_read`` counts what it still reads
    once fresh DH output has been mixed in.
    """
    pair = ratchet_pair(seed)
    rng = random.Random(seed)
    for i, who in enumerate(_senders(rng, before)):
        pair.exchange(who, f"pre{i}".encode())
    clone = pair.alice.copy()
    mark = len(pair.sent)
    pair.exchange("a", b"round-trip-a")
    pair.exchange("b", b"round-trip-b")
    recovered = len(pair.sent)
    for i, who in enumerate(_senders(rng, after)):
        pair.exchange(who, f"post{i}".encode())
    keys = reachable_message_keys(pair.suite, [clone], pair.publics())
    mac_keys = [pair.suite.aead_mac_key(k) for k in keys]
    inbound = [(i, env) for i, (who, env, _) in enumerate(pair.sent) if who == "b" and i >= mark]
    opened = _follow_with_clone(pair.suite, clone, inbound, pair.ad)
    for i, (_, env, _) in enumerate(pair.sent[mark:], start=mark):
        full_ad = pair.ad + env.header.encode(pair.suite)
        if any(pair.suite.aead_tag_matches(k, env.ciphertext, full_ad) for k in mac_keys):
            opened.add(i)
    return {
        "round_trip_read": sum(1 for i in opened if i < recovered),
        "round_trip_total": recovered - mark,
        "after_read": sum(1 for i in opened if i >= recovered),
        "after_total": len(pair.sent) - recovered,
    }


def out_of_order_example(seed: int = 1) -> dict:
    """Bob sends B1, B2, then (after Alice's A2) B3 and B4; Alice sees B1, B4, B2, B3."""
    pair = ratchet_pair(seed)
    pair.exchange("a", b"A1")
    b1, b2 = pair.send("b", b"B1"), pair.send("b", b"B2")
    pair.receive("a", b1)
    pair.exchange("a", b"A2")
    b3, b4 = pair.send("b", b"B3"), pair.send("b", b"B4")
    trace = {
        "headers": {name: (e.header.pn, e.header.n)
                    for name, e in (("B1", b1), ("B2", b2), ("B3", b3), ("B4", b4))},
        "expected_skipped": sorted([(b2.header.dh, b2.header.n), (b3.header.dh, b3.header.n)]),
    }
    got = [b"B1", pair.receive("a", b4)]
    trace["skipped_after_B4"] = sorted(pair.alice.skipped)
    got.append(pair.receive("a", b2))
    trace["skipped_after_B2"] = sorted(pair.alice.skipped)
    got.append(pair.receive("a", b3))
    trace["skipped_after_B3"] = sorted(pair.alice.skipped)
    trace["plaintexts"] = got
    return trace


# -- OTR -----------------------------------------------------------------------

@dataclass
class OtrPair:
    suite: CryptoSuite
    alice: otr.OtrSession
    bob: otr.OtrSession
    sent: list = field(default_factory=list)

    def session(self, who: str) -> otr.OtrSession:
        return self.alice if who == "a" else self.bob

    def send(self, who: str, plaintext: bytes) -> otr.OtrMessage:
        msg = otr.otr_send(self.suite, self.session(who), plaintext)
        self.sent.append((who, msg, plaintext))
        return msg

    def receive(self, who: str, msg: otr.OtrMessage) -> bytes:
        return otr.otr_receive(self.suite, self.session(who), msg)

    def exchange(self, who: str, plaintext: bytes) -> otr.OtrMessage:
        msg = self.send(who, plaintext)
        self.receive(_other(who), msg)
        return msg

    def publics(self) -> set[int]:
        return {msg.sender_dh for _, msg, _ in self.sent}


def otr_pair(seed: int) -> OtrPair:
    suite = make_toy_suite(seed)
    alice = otr.OtrIdentity("alice", suite.generate_keypair())
    bob = otr.OtrIdentity("bob", suite.generate_keypair())
    session_a, session_b, _ = otr.ake_sigma_r(suite, alice, bob)
    return OtrPair(suite, session_a, session_b)


def _otr_readable(suite: CryptoSuite, sessions, publics, messages) -> int:
    """Messages an adversary holding ``sessions`` can authenticate and decrypt."""
    secrets = {s.ss for s in sessions if s.ss is not None}
    for s in sessions:
        for pub in publics:
            secrets.add(suite.dh(s.own_dh.private, pub))
    mks = [suite.hash(suite.hash(ss)) for ss in secrets]
    return sum(1 for msg in messages if any(otr.verifies_under(suite, mk, msg) for mk in mks))


def otr_forward_secrecy(seed: int, messages: int = 50) -> tuple[int, int]:
    pair = otr_pair(seed)
    for i, who in enumerate(_senders(random.Random(seed), messages)):
        pair.exchange(who, f"m{i}".encode())
    sent = [msg for _, msg, _ in pair.sent]
    return _otr_readable(pair.suite, [pair.alice, pair.bob], pair.publics(), sent), len(sent)


def otr_break_in(seed: int, before: int = 10, after: int = 20) -> dict:
    pair = otr_pair(seed)
    rng = random.Random(seed)
    for i, who in enumerate(_senders(rng, before)):
        pair.exchange(who, f"pre{i}".encode())
    clones = [copy.deepcopy(pair.alice)]
    mark = len(pair.sent)
    pair.exchange("a", b"round-trip-a")
    pair.exchange("b", b"round-trip-b")
    recovered = len(pair.sent)
    for i, who in enumerate(_senders(rng, after)):
        pair.exchange(who, f"post{i}".encode())
    during = [msg for _, msg, _ in pair.sent[mark:recovered]]
    later = [msg for _, msg, _ in pair.sent[recovered:]]
    publics = pair.publics()
    return {
        "round_trip_read": _otr_readable(pair.suite, clones, publics, during),
        "round_trip_total": len(during),
        "after_read": _otr_readable(pair.suite, clones, publics, later),
        "after_total": len(later),
    }


# -- ordering and loss, shared by both engines --------------------------------------

def _deliver(pair, who: str, item) -> int:
    try:
        pair.receive(who, item)
    except E2ELabError:
        return 0
    return 1


def out_of_order_drill(pair) -> tuple[int, int]:
    """Two of Bob's chains, separated by one message from Alice, arrive shuffled."""
    pair.exchange("a", b"open")
    held = [pair.send("b", f"early{i}".encode()) for i in range(4)]
    _deliver(pair, "b", pair.send("a", b"turn"))
    held += [pair.send("b", f"late{i}".encode()) for i in range(4)]
    order = [4, 0, 6, 2, 1, 5, 3, 7]
    return sum(_deliver(pair, "a", held[i]) for i in order), len(order)


def dropped_message_drill(pair) -> tuple[int, int]:
    """Lose one mid-chain message and one message that changes direction."""
    script = [("a", True), ("a", False), ("a", True), ("b", True), ("b", True),
              ("a", False), ("b", True), ("a", True), ("b", True)]
    ok = total = 0
    for i, (who, delivered) in enumerate(script):
        item = pair.send(who, f"d{i}".encode())
        if delivered:
            total += 1
            ok += _deliver(pair, _other(who), item)
    return ok, total


# -- dual-simulation fuzz ----------------------------------------------------------

def fuzz_run(seed: int, max_messages: int = 200, window: int = 8, max_drop: float = 0.10) -> dict:
    """Both sides send concurrently through a lossy, reordering relay.

    Every envelope that reaches its recipient must decrypt to what was sent.
    Exceptions outside the library's own error hierarchy propagate.
    """
    rng = random.Random(seed)
    pair = ratchet_pair(seed)
    world = World(seed)
    drop_rate = rng.uniform(0.0, max_drop)
    world.add_interceptor(Interceptor("reorder", window=window))
    world.add_interceptor(Interceptor("drop", probability=drop_rate))
    expected: dict[bytes, bytes] = {}
    stats = {"sent": 0, "delivered": 0, "correct": 0, "wrong": 0, "failed": 0,
             "drop_rate": drop_rate}

    def handler(world, sender, recipient, message_id, payload):
        stats["delivered"] += 1
        env = Envelope.from_bytes(pair.suite, payload)
        try:
            plaintext = pair.receive("a" if recipient == "alice" else "b", env)
        except E2ELabError:
            stats["failed"] += 1
            return False
        stats["correct" if plaintext == expected[payload] else "wrong"] += 1
        return True

    world.register("alice", handler)
    world.register("bob", handler)
    budget = {"a": rng.randint(1, max_messages), "b": rng.randint(1, max_messages)}
    names = {"a": "alice", "b": "bob"}
    while True:
        ready = [w for w in ("a", "b") if budget[w] and
                 (pair.alice if w == "a" else pair.bob).cks is not None]
        if not ready:
            if not any(world.queues.values()):
                break
            world.step()
            continue
        who = rng.choice(ready)
        for _ in range(min(budget[who], rng.randint(1, 5))):
            plaintext = f"{who}{stats['sent']}".encode()
            raw = pair.send(who, plaintext).to_bytes(pair.suite)
            expected[raw] = plaintext
            budget[who] -= 1
            stats["sent"] += 1
            world.send_via_relay(names[who], names[_other(who)], raw)
        if rng.random() < 0.5:
            world.step()
    world.drain()
    return stats
