"""Policy profiles: the user-visible behaviour knobs a messaging client exposes.

Six built-ins model the apps studied; custom profiles load from INI files::

    [my-client]
    base = signal-like
    block_until_verified = no
    per_message_status = last
"""

from __future__ import annotations

import configparser
from dataclasses import dataclass, fields, replace
from pathlib import Path

from .errors import InvalidProfile

STATUS_MODES = ("all", "last")
KEY_CHANGE_TIMINGS = ("immediate", "on_send")


@dataclass(frozen=True)
class PolicyProfile:
    name: str
    tofu: bool = False
    notify_e2e_banner: bool = False
    notify_key_change: bool = False
    key_change_timing: str = "on_send"
    block_until_verified: bool = False
    reencrypt_and_resend: bool = False
    per_message_status: str = "all"
    qr_fingerprint: bool = False
    export_fingerprint: bool = False
    verified_check: bool = False
    clear_trusted_contacts: bool = False
    e2e_opt_in: bool = False
    encryption_irreversible: bool = False
    session_locked_to_keys: bool = False
    history_locked_to_keys: bool = False
    # Device features reported as declared; nothing in the simulation runs them.
    two_step: bool = False
    passphrase: bool = False
    screen_security: bool = False

    def validate(self) -> PolicyProfile:
        if not self.name:
            raise InvalidProfile("profile needs a name")
        if self.per_message_status not in STATUS_MODES:
            raise InvalidProfile(f"per_message_status must be one of {STATUS_MODES}")
        if self.key_change_timing not in KEY_CHANGE_TIMINGS:
            raise InvalidProfile(f"key_change_timing must be one of {KEY_CHANGE_TIMINGS}")
        if self.reencrypt_and_resend and self.per_message_status != "all":
            raise InvalidProfile("reencrypt_and_resend needs per-message status to know what was lost")
        if self.reencrypt_and_resend and self.session_locked_to_keys:
            raise InvalidProfile("a session locked to one key set cannot resend under new keys")
        if self.block_until_verified and not self.notify_key_change:
            raise InvalidProfile("blocking without a key-change notice leaves the user stuck")
        if self.encryption_irreversible and not self.e2e_opt_in:
            raise InvalidProfile("encryption_irreversible only applies to opt-in encryption")
        return self

    @property
    def capabilities(self) -> dict[str, bool]:
        return {"two_step": self.two_step, "passphrase": self.passphrase,
                "screen_security": self.screen_security}


BUILTIN_PROFILES: dict[str, PolicyProfile] = {
    p.name: p.validate()
    for p in (
        PolicyProfile("signal-like", tofu=True, notify_key_change=True,
                      block_until_verified=True, qr_fingerprint=True, export_fingerprint=True,
                      passphrase=True, screen_security=True),
        PolicyProfile("whatsapp-like", tofu=True, notify_e2e_banner=True, notify_key_change=True,
                      key_change_timing="immediate", reencrypt_and_resend=True,
                      qr_fingerprint=True, export_fingerprint=True, two_step=True),
        PolicyProfile("wire-like", verified_check=True),
        PolicyProfile("viber-like", per_message_status="last", verified_check=True,
                      clear_trusted_contacts=True),
        PolicyProfile("riot-like", notify_e2e_banner=True, notify_key_change=True,
                      verified_check=True, e2e_opt_in=True, encryption_irreversible=True,
                      history_locked_to_keys=True),
        PolicyProfile("telegram-like", notify_e2e_banner=True, qr_fingerprint=True,
                      e2e_opt_in=True, encryption_irreversible=True,
                      session_locked_to_keys=True, two_step=True, passphrase=True,
                      screen_security=True),
    )
}

BUILTIN_ORDER = tuple(BUILTIN_PROFILES)

_BOOL_FIELDS = {f.name for f in fields(PolicyProfile) if f.type in ("bool", bool)}
_STR_FIELDS = {"per_message_status", "key_change_timing"}


def load_profiles(path: str | Path) -> list[PolicyProfile]:
    """Read every section of an INI file as one profile."""
    parser = configparser.ConfigParser()
    try:
        with open(path, encoding="utf-8") as fh:
            parser.read_file(fh)
    except configparser.Error as exc:
        raise InvalidProfile(f"{path}: {exc}") from exc
    out = []
    for section in parser.sections():
        block = parser[section]
        base_name = block.get("base")
        if base_name is not None and base_name not in BUILTIN_PROFILES:
            raise InvalidProfile(f"[{section}] unknown base profile {base_name!r}")
        profile = BUILTIN_PROFILES[base_name] if base_name else PolicyProfile(section)
        changes = {"name": section}
        for key in block:
            if key == "base":
                continue
            if key in _BOOL_FIELDS:
                try:
                    changes[key] = block.getboolean(key)
                except ValueError as exc:
                    raise InvalidProfile(f"[{section}] {key}: {exc}") from exc
            elif key in _STR_FIELDS:
                changes[key] = block[key].strip()
            else:
                raise InvalidProfile(f"[{section}] unknown setting {key!r}")
        out.append(replace(profile, **changes).validate())
    if not out:
        raise InvalidProfile(f"{path}: no profiles defined")
    return out


def resolve_profiles(selector: str | None) -> list[PolicyProfile]:
    """A built-in name, a path to an INI file, or None for all built-ins."""
    if selector is None:
        return list(BUILTIN_PROFILES.values())
    if selector in BUILTIN_PROFILES:
        return [BUILTIN_PROFILES[selector]]
    if Path(selector).is_file():
        return load_profiles(selector)
    raise InvalidProfile(f"unknown profile {selector!r}")
