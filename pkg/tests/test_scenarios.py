"""Scenario reports, evidence pointers and the property matrix."""

import json

import pytest

from e2elab.profiles import BUILTIN_PROFILES, PolicyProfile
from e2elab.scenarios import (
    PROPERTIES,
    REPORT_SCHEMA,
    SCENARIOS,
    build_matrix,
    load_expected_matrix,
    load_expected_protocols,
    run_key_change,
    run_otr_smp,
    run_protocol_properties,
    run_verification,
)

ALL = list(BUILTIN_PROFILES.values())


@pytest.fixture(scope="module")
def matrix():
    return build_matrix(ALL)


def test_fixture_is_complete():
    expected = load_expected_matrix()
    assert len(expected) == len(PROPERTIES) * 6
    assert set(expected.values()) <= {"pass", "fail"}
    protocols = load_expected_protocols()
    assert protocols[("asynchronicity", "signal-like")] == "pass"
    assert protocols[("asynchronicity", "otr")] == "fail"


def test_matrix_matches_fixture(matrix):
    assert matrix.mismatches == []
    assert len(matrix.cells) == (len(PROPERTIES) + 1) * 6
    assert {matrix.outcome("verify_by_call", p.name) for p in ALL} == {"n/a"}


def test_every_cell_points_at_its_log_line(matrix):
    for (scenario, profile), report in matrix.reports.items():
        for cell in report.cells:
            tick, seq, kind, *_ = report.evidence(cell).split()
            assert int(seq) == cell.seq
            assert kind in ("event", "probe")


def test_text_and_json_output(matrix):
    text = matrix.to_text()
    assert "fixture mismatches: 0" in text
    assert all(line == line.rstrip() for line in text.splitlines())
    data = json.loads(matrix.to_json())
    assert data["schema"] == REPORT_SCHEMA
    cell = data["cells"][0]
    assert {"property", "profile", "outcome", "evidence"} <= set(cell)


def test_key_change_blocks_for_signal():
    report = run_key_change(BUILTIN_PROFILES["signal-like"])
    assert report.outcome("blocking") == "pass"
    assert report.extras["released_after_verify"] is True
    assert report.to_dict()["schema"] == REPORT_SCHEMA


def test_custom_profile_skips_fixture():
    custom = PolicyProfile("custom", tofu=True, notify_key_change=True, block_until_verified=True)
    m = build_matrix([custom])
    assert not m.compared and m.mismatches == []
    assert m.outcome("tofu", "custom") == "pass"
    assert m.outcome("blocking", "custom") == "pass"


def test_verification_mitm_detected():
    report = run_verification(BUILTIN_PROFILES["signal-like"])
    assert report.extras["mitm_detected"] is True


@pytest.mark.parametrize("name", sorted(SCENARIOS))
def test_scenarios_are_deterministic(name):
    profile = BUILTIN_PROFILES["whatsapp-like"]
    a, b = SCENARIOS[name](profile, 9), SCENARIOS[name](profile, 9)
    assert a.log == b.log and a.to_dict() == b.to_dict()


def test_protocol_properties_match_expected():
    expected = load_expected_protocols()
    for protocol in ("signal-like", "otr"):
        report = run_protocol_properties(protocol)
        for cell in report.cells:
            assert cell.outcome == expected[(cell.property, protocol)], cell


def test_smp_catches_interposer():
    honest = run_otr_smp(3)
    assert honest["outcome"] == "equal" and honest["same_ss"]
    attacked = run_otr_smp(3, mitm=True)
    assert attacked["outcome"] == "unequal" and not attacked["same_ss"]
    assert not attacked["alice_sees"]
