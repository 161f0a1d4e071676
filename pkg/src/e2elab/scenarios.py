"""Executable test scenarios and the property matrix they produce.

Every scenario runs in a fresh :class:`World`, so outcomes depend only on the
seed and the profile.  Each cell of the matrix carries an evidence pointer:
the scenario it came from plus the sequence number of the log entry that
decided it.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from . import drills, otr
from .errors import (
    AkeFailed,
    E2ELabError,
    PeerOffline,
    SessionDead,
    Unsupported,
    VerificationFailed,
)
from .profiles import BUILTIN_ORDER, BUILTIN_PROFILES, PolicyProfile
from .session import Client, client_new, reinstall
from .simnet import World
from .x3dh import PrekeyBundle, X3dhUser

DEFAULT_SEED = 2018
REPORT_SCHEMA = "e2elab.report/1"

PROPERTIES = (
    ("tofu", "Trust on first use"),
    ("e2e_banner", "E2E encryption notice"),
    ("key_change_notice", "Key change notice"),
    ("blocking", "Blocks message after key change"),
    ("reencrypt_resend", "Re-encrypt and resend"),
    ("transmission_details", "Sent/delivered details"),
    ("qr", "QR code verification"),
    ("export", "Share keys via third party"),
    ("verified_check", "Verified check"),
    ("clear_trusted", "Clear trusted contacts"),
)
NOT_APPLICABLE = (("verify_by_call", "Verify by phone call"),)
CAPABILITIES = ("two_step", "passphrase", "screen_security")
PROTOCOL_PROPERTIES = ("forward_secrecy", "break_in_recovery", "out_of_order",
                       "dropped_message", "asynchronicity")
PROTOCOLS = ("signal-like", "otr")


@dataclass(frozen=True)
class Cell:
    property: str
    profile: str
    outcome: str
    scenario: str
    seq: int
    note: str = ""


@dataclass
class ScenarioReport:
    scenario: str
    profile: str
    seed: int
    cells: list[Cell] = field(default_factory=list)
    extras: dict = field(default_factory=dict)
    log: str = ""

    def cell(self, prop: str) -> Cell:
        return next(c for c in self.cells if c.property == prop)

    def outcome(self, prop: str) -> str:
        return self.cell(prop).outcome

    def evidence(self, cell: Cell) -> str:
        """The log line a cell points at."""
        return self.log.splitlines()[cell.seq - 1]

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "scenario": self.scenario,
            "profile": self.profile,
            "seed": self.seed,
            "cells": [_cell_dict(c, self.evidence(c)) for c in self.cells],
            "extras": self.extras,
        }

    def to_text(self) -> str:
        lines = [f"scenario {self.scenario} profile {self.profile} seed {self.seed}"]
        for c in self.cells:
            lines.append(f"  {c.property:<22} {c.outcome:<8} seq {c.seq:<4} {c.note}".rstrip())
        for key, value in sorted(self.extras.items()):
            lines.append(f"  {key}: {value}")
        return "\n".join(lines)


def _cell_dict(c: Cell, line: str) -> dict:
    return {"property": c.property, "profile": c.profile, "outcome": c.outcome,
            "evidence": {"scenario": c.scenario, "seq": c.seq, "line": line}, "note": c.note}


# -- helpers ---------------------------------------------------------------------

class _Run:
    def __init__(self, scenario: str, profile: PolicyProfile, seed: int):
        self.scenario, self.profile, self.seed = scenario, profile, seed
        self.world = World(seed)
        self.report = ScenarioReport(scenario, profile.name, seed)

    def clients(self, *names: str) -> list[Client]:
        return [client_new(self.world, n, self.profile) for n in names]

    def probe(self, user: str, note: str) -> int:
        return self.world.record("probe", user, "-", note.encode())

    def cell(self, prop: str, passed: bool, seq: int, note: str = "") -> None:
        self.report.cells.append(Cell(prop, self.profile.name, "pass" if passed else "fail",
                                      self.scenario, seq, note))

    def finish(self) -> ScenarioReport:
        self.report.log = self.world.export_log()
        return self.report


def _first(events, kind: str, message_id: int | None = None):
    for e in events:
        if e.kind == kind and (message_id is None or e.message_id == message_id):
            return e
    return None


def _establish(run: _Run, alice: Client, bob: Client) -> tuple[int, int]:
    world = run.world
    cid_a, _ = alice.start_conversation(bob.user)
    if run.profile.e2e_opt_in:
        alice.enable_encryption(cid_a)
    alice.send_text(cid_a, "hi bob")
    world.drain()
    cid_b, _ = bob.start_conversation(alice.user)
    if run.profile.e2e_opt_in:
        bob.enable_encryption(cid_b)
    bob.send_text(cid_b, "hi alice")
    world.drain()
    return cid_a, cid_b


# -- the five scenarios ------------------------------------------------------------

def run_initial_setup(profile: PolicyProfile, seed: int = DEFAULT_SEED) -> ScenarioReport:
    run = _Run("initial-setup", profile, seed)
    alice, _ = run.clients("alice", "bob")
    cid, events = alice.start_conversation("bob")
    if profile.e2e_opt_in:
        events += alice.enable_encryption(cid)
    trusted = _first(events, "trusted")
    other = trusted or _first(events, "verification_required")
    run.cell("tofu", trusted is not None, other.seq if other else run.probe("alice", "no trust decision"))
    banner = _first(events, "e2e_banner")
    run.cell("e2e_banner", banner is not None,
             banner.seq if banner else run.probe("alice", "no e2e notice shown"))
    return run.finish()


def run_key_change(profile: PolicyProfile, seed: int = DEFAULT_SEED) -> ScenarioReport:
    """Bob reinstalls mid-conversation; Alice then writes to him."""
    run = _Run("key-change", profile, seed)
    alice, bob = run.clients("alice", "bob")
    cid, _ = _establish(run, alice, bob)
    reinstall_seq = run.probe("bob", "reinstall")
    events = reinstall(run.world, "bob")["alice"]
    try:
        local_id, sent_events = alice.send_text(cid, "are you there?")
    except SessionDead:
        local_id, sent_events = None, []
        run.report.extras["session_dead_seq"] = run.probe("alice", "SessionDead")
    events += sent_events
    run.world.drain()
    notice = _first(events, "key_changed")
    run.cell("key_change_notice", notice is not None,
             notice.seq if notice else run.probe("alice", "no key change notice"))
    blocked = _first(events, "message_blocked", local_id)
    if blocked is None:
        run.cell("blocking", False, run.probe("alice", "message not blocked"))
        return run.finish()
    leaked = [e for e in run.world.log[reinstall_seq:] if e.kind == "send" and e.sender == "alice"]
    after = alice.verify_peer("bob")
    run.world.drain()
    released = _first(after, "message_released", local_id)
    delivered = alice.message_status(local_id) == "delivered"
    run.report.extras["released_after_verify"] = bool(released) and delivered
    run.cell("blocking", not leaked and released is not None and delivered, blocked.seq,
             "held until verified" if not leaked else "envelope left before verification")
    return run.finish()


def run_key_change_in_transit(profile: PolicyProfile, seed: int = DEFAULT_SEED) -> ScenarioReport:
    """A message is in flight to Bob when he wipes his keys."""
    run = _Run("key-change-in-transit", profile, seed)
    alice, bob = run.clients("alice", "bob")
    cid, _ = _establish(run, alice, bob)
    first_id, _ = alice.send_text(cid, "before")
    run.world.drain()
    run.world.set_online("bob", False)
    lost_id, _ = alice.send_text(cid, "in transit")
    status_in_flight = alice.message_status(lost_id)
    events = reinstall(run.world, "bob")["alice"]
    run.world.set_online("bob", True)
    run.world.drain()
    resent = _first(events, "resent", lost_id)
    final = alice.message_status(lost_id)
    run.report.extras["final_status_in_transit_message"] = final
    run.cell("reencrypt_resend", resent is not None and final == "delivered",
             resent.seq if resent else run.probe("alice", f"in-transit message left {final}"))
    try:
        older = alice.message_status(first_id)
    except E2ELabError as exc:
        run.cell("transmission_details", False, run.probe("alice", f"older status: {type(exc).__name__}"))
        return run.finish()
    delivered_event = _first(alice.events, "status_changed", first_id)
    delivered_event = next((e for e in alice.events if e.kind == "status_changed"
                            and e.message_id == first_id and e.status == "delivered"), delivered_event)
    distinguishes = older == "delivered" and status_in_flight == "sent"
    run.cell("transmission_details", distinguishes,
             delivered_event.seq if delivered_event else run.probe("alice", "no status"),
             f"older={older} in-flight={status_in_flight}")
    return run.finish()


def _mallory_bundle(world: World, target: str) -> bytes:
    suite = world.suite_for("mallory", 0)
    mallory = X3dhUser.create(suite, "mallory")
    spk = suite.generate_keypair()
    sig = suite.sign(mallory.identity.ik.private, suite.encode_public(spk.public))
    return PrekeyBundle(target, mallory.identity.ik.public, 999, spk.public, sig).to_bytes(suite)


def run_verification(profile: PolicyProfile, seed: int = DEFAULT_SEED) -> ScenarioReport:
    run = _Run("verification", profile, seed)
    alice, bob = run.clients("alice", "bob")
    _establish(run, alice, bob)
    for prop, channel in (("qr", "qr"), ("export", "exported")):
        try:
            events = alice.verify_peer("bob", channel)
        except Unsupported:
            run.cell(prop, False, run.probe("alice", f"{channel}: unsupported"))
        else:
            run.cell(prop, True, events[0].seq)
    alice.verify_peer("bob", "in-person")
    try:
        shown = alice.is_verified("bob")
    except Unsupported:
        run.cell("verified_check", False, run.probe("alice", "verified status not shown"))
    else:
        run.cell("verified_check", shown, run.probe("alice", f"is_verified={shown}"))
    run.report.cells.append(Cell("verify_by_call", profile.name, "n/a", run.scenario,
                                 run.probe("alice", "voice channel not simulated")))
    run.report.extras.update(_verification_mitm(profile, seed))
    return run.finish()


def _verification_mitm(profile: PolicyProfile, seed: int) -> dict:
    """Substitute Bob's bundle on the wire; comparing fingerprints must catch it."""
    world = World(seed)
    alice, _ = (client_new(world, n, profile) for n in ("alice", "bob"))
    forged = _mallory_bundle(world, "bob")

    def swap(world, sender, recipient, kind, payload):
        return forged if kind == "bundle" else payload

    world.install_mitm(("alice", "bob"), swap)
    alice.start_conversation("bob")
    try:
        alice.verify_peer("bob", "in-person")
    except VerificationFailed:
        event = _first(alice.events, "verification_failed")
        return {"mitm_detected": True, "mitm_evidence_seq": event.seq}
    return {"mitm_detected": False}


def run_other_security(profile: PolicyProfile, seed: int = DEFAULT_SEED) -> ScenarioReport:
    run = _Run("other-security", profile, seed)
    alice, bob = run.clients("alice", "bob")
    _establish(run, alice, bob)
    alice.verify_peer("bob", "in-person")
    try:
        events = alice.clear_trusted()
    except Unsupported:
        run.cell("clear_trusted", False, run.probe("alice", "clear trusted: unsupported"))
    else:
        cleared = _first(events, "trust_cleared")
        ok = cleared is not None and not alice.trust["bob"].verified
        run.cell("clear_trusted", ok, cleared.seq if cleared else run.probe("alice", "nothing cleared"))
    run.report.extras["capabilities"] = dict(profile.capabilities)
    run.report.extras["capabilities_executable"] = False
    return run.finish()


SCENARIOS = {
    "initial-setup": run_initial_setup,
    "key-change": run_key_change,
    "key-change-in-transit": run_key_change_in_transit,
    "verification": run_verification,
    "other-security": run_other_security,
}


# -- protocol properties ---------------------------------------------------------------

def _asynchronicity(protocol: str, seed: int) -> tuple[bool, World, int]:
    world = World(seed)
    profile = BUILTIN_PROFILES["signal-like"]
    alice = client_new(world, "alice", profile, protocol)
    client_new(world, "bob", profile, protocol)
    cid, _ = alice.start_conversation("bob")
    world.set_online("bob", False)
    try:
        local_id, _ = alice.send_text(cid, "while you were away")
    except PeerOffline:
        return False, world, world.record("probe", "alice", "bob", b"PeerOffline")
    world.run(3)
    world.set_online("bob", True)
    world.drain()
    ok = alice.message_status(local_id) == "delivered"
    return ok, world, world.record("probe", "alice", "bob", f"status={alice.message_status(local_id)}".encode())


def run_protocol_properties(protocol: str, seed: int = DEFAULT_SEED) -> ScenarioReport:
    if protocol not in PROTOCOLS:
        raise ValueError(f"protocol must be one of {PROTOCOLS}")
    ok, world, async_seq = _asynchronicity(protocol, seed)
    report = ScenarioReport("protocol-properties", protocol, seed)

    def add(prop, outcome, note):
        seq = world.record("probe", protocol, "-", f"{prop}:{outcome}:{note}".encode())
        report.cells.append(Cell(prop, protocol, outcome, report.scenario, seq, note))

    if protocol == "signal-like":
        read, total = drills.ratchet_forward_secrecy(seed)
        heal = drills.ratchet_break_in(seed)
        ooo = drills.out_of_order_drill(drills.ratchet_pair(seed))
        drop = drills.dropped_message_drill(drills.ratchet_pair(seed))
    else:
        read, total = drills.otr_forward_secrecy(seed)
        heal = drills.otr_break_in(seed)
        ooo = drills.out_of_order_drill(drills.otr_pair(seed))
        drop = drills.dropped_message_drill(drills.otr_pair(seed))
    add("forward_secrecy", drills.grade(total - read, total), f"{read}/{total} readable after compromise")
    add("break_in_recovery", drills.grade(heal["after_total"] - heal["after_read"], heal["after_total"]),
        f"{heal['after_read']}/{heal['after_total']} readable after round trip")
    add("out_of_order", drills.grade(*ooo), f"{ooo[0]}/{ooo[1]} decrypted")
    add("dropped_message", drills.grade(*drop), f"{drop[0]}/{drop[1]} decrypted")
    report.cells.append(Cell("asynchronicity", protocol, "pass" if ok else "fail", report.scenario,
                             async_seq, "offline peer"))
    report.log = world.export_log()
    return report


# -- OTR demonstrations ------------------------------------------------------------------

class OtrInterposer:
    """Man in the middle that runs its own AKE with each side.

    Installed as a simnet MITM handler; it rewrites the four AKE messages so
    Alice and Bob each end up with a session to Mallory.  Later traffic
    passes through untouched.
    """

    def __init__(self, world: World, alice: str = "alice", bob: str = "bob"):
        self.suite = world.suite_for("mallory", 0)
        ident = otr.OtrIdentity("mallory", self.suite.generate_keypair())
        self.toward_a = otr.AkeResponder(self.suite, ident)
        self.toward_b = otr.AkeInitiator(self.suite, ident)
        self.alice, self.bob = alice, bob
        self.stage = 0
        self.sessions: dict[str, otr.OtrSession] = {}

    def __call__(self, world, sender, recipient, kind, payload):
        if self.stage >= 4:
            return payload
        self.stage += 1
        if self.stage == 1:
            self._m2_for_a = self.toward_a.message2(payload)
            return self.toward_b.message1()
        if self.stage == 2:
            self._m3_for_b = self.toward_b.message3(payload)
            return self._m2_for_a
        if self.stage == 3:
            self._m4_for_a, self.sessions[self.alice] = self.toward_a.message4(payload, self.alice)
            return self._m3_for_b
        self.sessions[self.bob] = self.toward_b.finish(payload, self.bob)
        return self._m4_for_a


def run_otr_smp(seed: int = DEFAULT_SEED, mitm: bool = False, secret_a: bytes = b"shared secret",
                secret_b: bytes = b"shared secret") -> dict:
    """AKE then SMP between two OTR clients, optionally through an interposer."""
    world = World(seed)
    profile = BUILTIN_PROFILES["signal-like"]
    alice = client_new(world, "alice", profile, "otr")
    bob = client_new(world, "bob", profile, "otr")
    if mitm:
        world.install_mitm(("alice", "bob"), OtrInterposer(world))
    alice.start_conversation("bob")
    session_a, session_b = alice.otr_sessions["bob"], bob.otr_sessions["alice"]

    def channel(index, src, dst, payload):
        return world.send_direct(src, dst, payload)

    transcript = otr.smp_run(alice.suite, session_a, secret_a, session_b, secret_b, channel)
    seq = world.record("probe", "alice", "bob", f"smp:{transcript.outcome}".encode())
    return {"outcome": transcript.outcome, "same_ss": session_a.ss == session_b.ss,
            "alice_sees": session_a.peer_identity == bob.identity_public,
            "evidence_seq": seq, "transcript": transcript, "world": world}


def run_otr_conversation(seed: int = DEFAULT_SEED, turns: int = 4, burst: int = 2) -> World:
    """Alternating OTR conversation ending with a shutdown flush of MAC keys."""
    world = World(seed)
    profile = BUILTIN_PROFILES["signal-like"]
    alice = client_new(world, "alice", profile, "otr")
    bob = client_new(world, "bob", profile, "otr")
    cid_a, _ = alice.start_conversation("bob")
    cid_b, _ = bob.start_conversation("alice")
    for turn in range(turns):
        speaker, cid = (alice, cid_a) if turn % 2 == 0 else (bob, cid_b)
        for i in range(burst):
            speaker.send_text(cid, f"turn {turn} line {i}")
    last = alice if turns % 2 == 1 else bob
    last.end_otr("bob" if last is alice else "alice")
    return world


# -- matrix ----------------------------------------------------------------------------

def _read_tsv(name: str, path: str | Path | None) -> list[dict]:
    if path is None:
        text = resources.files("e2elab").joinpath("data", name).read_text(encoding="utf-8")
    else:
        text = Path(path).read_text(encoding="utf-8")
    rows = [line for line in text.splitlines() if line and not line.startswith("#")]
    return list(csv.DictReader(rows, delimiter="\t"))


def load_expected_matrix(path: str | Path | None = None) -> dict[tuple[str, str], str]:
    out = {}
    for row in _read_tsv("expected_matrix.tsv", path):
        for profile in BUILTIN_ORDER:
            out[(row["property"], profile)] = row[profile]
    return out


def load_expected_protocols(path: str | Path | None = None) -> dict[tuple[str, str], str]:
    out = {}
    for row in _read_tsv("expected_protocols.tsv", path):
        for protocol in PROTOCOLS:
            out[(row["property"], protocol)] = row[protocol]
    return out


@dataclass
class PropertyMatrix:
    rows: list[str]
    columns: list[str]
    cells: dict = field(default_factory=dict)
    reports: dict = field(default_factory=dict)
    capabilities: dict = field(default_factory=dict)
    mismatches: list = field(default_factory=list)
    compared: bool = False
    seed: int = DEFAULT_SEED

    def outcome(self, prop: str, profile: str) -> str:
        return self.cells[(prop, profile)].outcome

    def evidence(self, prop: str, profile: str) -> str:
        c = self.cells[(prop, profile)]
        return self.reports[(c.scenario, profile)].evidence(c)

    def to_text(self) -> str:
        labels = dict(PROPERTIES + NOT_APPLICABLE)
        width = max([len(labels.get(r, r)) for r in self.rows] + [8])
        cols = [max(len(c), 7) for c in self.columns]
        lines = [" " * width + "  " + "  ".join(c.ljust(w) for c, w in zip(self.columns, cols))]
        for r in self.rows:
            cells = [self.cells[(r, c)].outcome.ljust(w) for c, w in zip(self.columns, cols)]
            lines.append(labels.get(r, r).ljust(width) + "  " + "  ".join(cells))
        lines.append("")
        for cap in CAPABILITIES:
            vals = ["yes" if self.capabilities[c][cap] else "no" for c in self.columns]
            lines.append(f"{cap} (declared)".ljust(width) + "  "
                         + "  ".join(v.ljust(w) for v, w in zip(vals, cols)))
        if self.compared:
            lines.append("")
            lines.append(f"fixture mismatches: {len(self.mismatches)}")
            lines.extend(f"  {p} {c}: expected {e}, got {g}" for p, c, e, g in self.mismatches)
        return "\n".join(line.rstrip() for line in lines).rstrip() + "\n"

    def to_dict(self) -> dict:
        return {
            "schema": REPORT_SCHEMA,
            "seed": self.seed,
            "rows": self.rows,
            "columns": self.columns,
            "cells": [_cell_dict(self.cells[(r, c)], self.evidence(r, c))
                      for r in self.rows for c in self.columns],
            "capabilities": self.capabilities,
            "fixture_compared": self.compared,
            "mismatches": [dict(zip(("property", "profile", "expected", "got"), m))
                           for m in self.mismatches],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


def build_matrix(profiles: list[PolicyProfile], seed: int = DEFAULT_SEED,
                 fixture: str | Path | None = None, compare: bool | None = None) -> PropertyMatrix:
    """Run every scenario for every profile.

    The fixture comparison runs by default only when all profiles are built-ins.
    """
    names = [p.name for p in profiles]
    if compare is None:
        compare = bool(profiles) and all(BUILTIN_PROFILES.get(p.name) == p for p in profiles)
    rows = [] if not profiles else [p for p, _ in PROPERTIES] + [p for p, _ in NOT_APPLICABLE]
    matrix = PropertyMatrix(rows, names, compared=compare, seed=seed)
    for profile in profiles:
        matrix.capabilities[profile.name] = dict(profile.capabilities)
        for name, runner in SCENARIOS.items():
            report = runner(profile, seed)
            matrix.reports[(name, profile.name)] = report
            for c in report.cells:
                matrix.cells[(c.property, profile.name)] = c
    if compare:
        expected = load_expected_matrix(fixture)
        for prop, _ in PROPERTIES:
            for name in names:
                want, got = expected[(prop, name)], matrix.outcome(prop, name)
                if want != got:
                    matrix.mismatches.append((prop, name, want, got))
    return matrix
