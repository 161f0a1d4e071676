import dataclasses

import pytest

from e2elab.errors import InvalidProfile
from e2elab.profiles import BUILTIN_ORDER, BUILTIN_PROFILES, PolicyProfile, load_profiles, resolve_profiles


def test_builtins_are_valid_and_ordered():
    assert BUILTIN_ORDER == ("signal-like", "whatsapp-like", "wire-like", "viber-like",
                             "riot-like", "telegram-like")
    for profile in BUILTIN_PROFILES.values():
        assert profile.validate() is profile


@pytest.mark.parametrize("changes", [
    {"per_message_status": "some"},
    {"key_change_timing": "later"},
    {"reencrypt_and_resend": True, "per_message_status": "last"},
    {"reencrypt_and_resend": True, "session_locked_to_keys": True},
    {"block_until_verified": True},
    {"encryption_irreversible": True},
    {"name": ""},
])
def test_contradictions_rejected(changes):
    with pytest.raises(InvalidProfile):
        dataclasses.replace(PolicyProfile("x"), **changes).validate()


def test_ini_with_base(tmp_path):
    path = tmp_path / "p.ini"
    path.write_text("[mine]\nbase = signal-like\nblock_until_verified = no\nper_message_status = last\n"
                    "[plain]\ntofu = yes\n")
    mine, plain = load_profiles(path)
    assert mine.name == "mine" and mine.tofu and not mine.block_until_verified
    assert mine.per_message_status == "last" and mine.qr_fingerprint
    assert plain == PolicyProfile("plain", tofu=True)
    assert resolve_profiles(str(path)) == [mine, plain]


@pytest.mark.parametrize("body", [
    "[a]\nbase = nothing\n",
    "[a]\ncolour = blue\n",
    "[a]\ntofu = maybe\n",
    "[a]\nblock_until_verified = yes\n",
    "",
    "not an ini",
])
def test_bad_ini(tmp_path, body):
    path = tmp_path / "bad.ini"
    path.write_text(body)
    with pytest.raises(InvalidProfile):
        load_profiles(path)


def test_resolve():
    assert resolve_profiles(None) == list(BUILTIN_PROFILES.values())
    assert resolve_profiles("wire-like") == [BUILTIN_PROFILES["wire-like"]]
    with pytest.raises(InvalidProfile):
        resolve_profiles("no-such-profile")


def test_capabilities_are_declared_only():
    assert BUILTIN_PROFILES["telegram-like"].capabilities == {
        "two_step": True, "passphrase": True, "screen_security": True}
