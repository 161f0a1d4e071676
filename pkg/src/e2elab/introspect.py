"""State-inspection hooks: the observable proxy for secure erasure.

Tests hand a protocol state and a secret to :func:`contains_secret`; the walk
visits dataclass fields, instance dicts, mappings and sequences, and compares
every bytes/int leaf against the secret (ints are also compared in their
32-byte big-endian encoding).
"""

from __future__ import annotations

import dataclasses

from .crypto import CryptoSuite


def iter_leaves(obj, _seen=None):
    if _seen is None:
        _seen = set()
    if id(obj) in _seen:
        return
    if isinstance(obj, (bytes, bytearray, int, str)) or obj is None:
        yield obj
        return
    if isinstance(obj, CryptoSuite):
        return
    _seen.add(id(obj))
    if isinstance(obj, dict):
        for k, v in obj.items():
            yield from iter_leaves(k, _seen)
            yield from iter_leaves(v, _seen)
    elif isinstance(obj, (list, tuple, set, frozenset)):
        for item in obj:
            yield from iter_leaves(item, _seen)
    elif dataclasses.is_dataclass(obj):
        for f in dataclasses.fields(obj):
            yield from iter_leaves(getattr(obj, f.name), _seen)
    elif hasattr(obj, "__dict__"):
        yield from iter_leaves(vars(obj), _seen)


def _as_bytes(leaf):
    if isinstance(leaf, bool):
        return None
    if isinstance(leaf, int):
        if leaf < 0 or leaf.bit_length() > 256 * 8:
            return None
        return leaf.to_bytes(max(32, (leaf.bit_length() + 7) // 8), "big")
    if isinstance(leaf, (bytes, bytearray)):
        return bytes(leaf)
    return None


def contains_secret(obj, secret) -> bool:
    needle = _as_bytes(secret)
    for leaf in iter_leaves(obj):
        if isinstance(secret, int) and isinstance(leaf, int) and leaf == secret:
            return True
        raw = _as_bytes(leaf)
        if raw is not None and needle and needle in raw:
            return True
    return False
