"""Length-prefixed field packing shared by the wire formats."""

import struct

from .errors import ProtocolViolation

VERSION = 1


def pack_fields(*fields: bytes) -> bytes:
    return b"".join(struct.pack(">I", len(f)) + f for f in fields)


def unpack_fields(raw: bytes, offset: int = 0) -> list[bytes]:
    fields = []
    while offset < len(raw):
        if offset + 4 > len(raw):
            raise ProtocolViolation("truncated length prefix")
        (n,) = struct.unpack_from(">I", raw, offset)
        offset += 4
        if offset + n > len(raw):
            raise ProtocolViolation("truncated field")
        fields.append(raw[offset:offset + n])
        offset += n
    return fields


def pack_versioned(*fields: bytes) -> bytes:
    return struct.pack(">H", VERSION) + pack_fields(*fields)


def unpack_versioned(raw: bytes, count: int) -> list[bytes]:
    if len(raw) < 2:
        raise ProtocolViolation("missing version")
    (version,) = struct.unpack_from(">H", raw)
    if version != VERSION:
        raise ProtocolViolation(f"unsupported version {version}")
    fields = unpack_fields(raw, 2)
    if len(fields) != count:
        raise ProtocolViolation(f"expected {count} fields, got {len(fields)}")
    return fields


def u32(n: int) -> bytes:
    return struct.pack(">I", n)


def read_u32(raw: bytes) -> int:
    if len(raw) != 4:
        raise ProtocolViolation("expected a 4-byte integer")
    return struct.unpack(">I", raw)[0]
