"""Command-line front end.

Exit codes: 0 success or fixture match, 1 mismatch or refused forgery,
2 usage error.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from . import otr
from .crypto import make_toy_suite
from .errors import E2ELabError, InvalidProfile, RefusesToForgeUnpublished
from .profiles import BUILTIN_PROFILES, resolve_profiles
from .scenarios import (
    DEFAULT_SEED,
    PROTOCOLS,
    REPORT_SCHEMA,
    SCENARIOS,
    build_matrix,
    load_expected_matrix,
    load_expected_protocols,
    run_otr_conversation,
    run_otr_smp,
    run_protocol_properties,
)

EXTRA_SCENARIOS = ("protocol-properties", "otr-conversation", "otr-smp")


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=DEFAULT_SEED)
    common.add_argument("--format", choices=("text", "json"), default="text")
    common.add_argument("--dump", metavar="PATH", help="write the simulated network log here")

    parser = argparse.ArgumentParser(prog="e2elab", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    matrix = sub.add_parser("matrix", parents=[common], help="run every scenario and print the property matrix")
    matrix.add_argument("--profile", metavar="NAME|FILE")
    matrix.add_argument("--fixture", metavar="PATH", help="expected-matrix TSV to compare against")

    scenario = sub.add_parser("scenario", parents=[common], help="run one scenario")
    scenario.add_argument("name", choices=sorted(SCENARIOS) + list(EXTRA_SCENARIOS))
    scenario.add_argument("--profile", metavar="NAME|FILE", default="signal-like")
    scenario.add_argument("--protocol", choices=PROTOCOLS, default="signal-like")
    scenario.add_argument("--mitm", action="store_true", help="otr-smp: interpose a man in the middle")

    forge = sub.add_parser("forge", help="forge a message from a recorded OTR transcript")
    forge.add_argument("transcript", metavar="TRANSCRIPT")
    forge.add_argument("--delta", default="01", help="hex XOR mask applied to the reference ciphertext")
    forge.add_argument("--format", choices=("text", "json"), default="text")
    return parser


def _write_dump(path: str | None, sections: list[tuple[str, str]]) -> None:
    if not path:
        return
    with open(path, "w", encoding="utf-8") as fh:
        for title, log in sections:
            if len(sections) > 1:
                fh.write(f"# {title}\n")
            fh.write(log)


def cmd_matrix(args) -> int:
    profiles = resolve_profiles(args.profile)
    builtin = all(BUILTIN_PROFILES.get(p.name) == p for p in profiles)
    if args.fixture is not None and not Path(args.fixture).is_file():
        raise InvalidProfile(f"fixture {args.fixture} not found")
    matrix = build_matrix(profiles, args.seed, fixture=args.fixture, compare=builtin)
    print(matrix.to_json() if args.format == "json" else matrix.to_text(), end="" if args.format == "text" else "\n")
    _write_dump(args.dump, [(f"{scenario} {profile}", report.log)
                            for (scenario, profile), report in matrix.reports.items()])
    return 1 if matrix.mismatches else 0


def cmd_scenario(args) -> int:
    if args.name == "protocol-properties":
        report = run_protocol_properties(args.protocol, args.seed)
        expected = load_expected_protocols()
        bad = [c for c in report.cells if expected[(c.property, args.protocol)] != c.outcome]
        _emit(args, [report.to_dict()], report.to_text())
        _write_dump(args.dump, [(report.scenario, report.log)])
        return 1 if bad else 0
    if args.name == "otr-conversation":
        world = run_otr_conversation(args.seed)
        summary = {"schema": REPORT_SCHEMA, "scenario": args.name, "seed": args.seed,
                   "log_lines": len(world.log), "log_sha256": world.log_digest()}
        _emit(args, [summary], world.export_log())
        _write_dump(args.dump, [(args.name, world.export_log())])
        return 0
    if args.name == "otr-smp":
        result = run_otr_smp(args.seed, mitm=args.mitm)
        summary = {"schema": REPORT_SCHEMA, "scenario": args.name, "seed": args.seed,
                   "mitm": args.mitm, "outcome": result["outcome"], "evidence_seq": result["evidence_seq"]}
        _emit(args, [summary], f"scenario otr-smp mitm={args.mitm} outcome {result['outcome']}")
        _write_dump(args.dump, [(args.name, result["world"].export_log())])
        expected = "unequal" if args.mitm else "equal"
        return 0 if result["outcome"] == expected else 1
    runner = SCENARIOS[args.name]
    expected = load_expected_matrix()
    reports, status = [], 0
    for profile in resolve_profiles(args.profile):
        report = runner(profile, args.seed)
        reports.append(report)
        if BUILTIN_PROFILES.get(profile.name) == profile:
            for c in report.cells:
                want = expected.get((c.property, profile.name))
                if want is not None and want != c.outcome:
                    status = 1
    _emit(args, [r.to_dict() for r in reports], "\n".join(r.to_text() for r in reports))
    _write_dump(args.dump, [(f"{r.scenario} {r.profile}", r.log) for r in reports])
    return status


def _emit(args, objects: list[dict], text: str) -> None:
    if args.format == "json":
        print(json.dumps(objects[0] if len(objects) == 1 else objects, indent=2, sort_keys=True))
    else:
        print(text.rstrip("\n"))


def _otr_messages(suite, lines):
    for line in lines:
        parts = line.split()
        if line.startswith("#") or len(parts) != 6 or parts[2] != "direct":
            continue
        try:
            yield int(parts[1]), otr.OtrMessage.from_bytes(suite, bytes.fromhex(parts[5]))
        except (E2ELabError, ValueError):
            continue


def cmd_forge(args) -> int:
    path = Path(args.transcript)
    if not path.is_file():
        print(f"e2elab forge: no such transcript {path}", file=sys.stderr)
        return 2
    try:
        delta = bytes.fromhex(args.delta)
    except ValueError:
        print("e2elab forge: --delta must be hex", file=sys.stderr)
        return 2
    suite = make_toy_suite(b"forge")
    messages = list(_otr_messages(suite, path.read_text(encoding="utf-8").splitlines()))
    published = [mk for _, m in messages for mk in m.published_mks]
    if not messages or not published:
        print("e2elab forge: RefusesToForgeUnpublished: transcript publishes no MAC keys", file=sys.stderr)
        return 1
    mk = published[0]
    seq, reference = next(((s, m) for s, m in messages if otr.verifies_under(suite, mk, m)), messages[-1])
    try:
        forged = otr.forge_message(suite, mk, reference, published=published, delta=delta)
    except RefusesToForgeUnpublished as exc:
        print(f"e2elab forge: {exc}", file=sys.stderr)
        return 1
    ok = otr.verifies_under(suite, mk, forged)
    out = {"schema": REPORT_SCHEMA, "reference_seq": seq, "published_mk": mk.hex(),
           "forged": forged.to_bytes(suite).hex(), "verifies": ok}
    if args.format == "json":
        print(json.dumps(out, indent=2, sort_keys=True))
    else:
        print(f"reference message: seq {seq}")
        print(f"published MAC key: {mk.hex()}")
        print(f"forged message:    {out['forged']}")
        print(f"verifies under published key: {'yes' if ok else 'no'}")
    return 0 if ok else 1


def main(argv: list[str] | None = None) -> int:
    parser = _parser()
    args = parser.parse_args(argv)
    handler = {"matrix": cmd_matrix, "scenario": cmd_scenario, "forge": cmd_forge}[args.command]
    try:
        return handler(args)
    except InvalidProfile as exc:
        parser.print_usage(sys.stderr)
        print(f"e2elab: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
