"""Canonical length-prefixed encodings for payloads and signed statements.

Every payload is an ordered map of named fields. Field order is fixed by the
encoder, lengths are big-endian, so equal values always encode to equal bytes.
"""

from __future__ import annotations

import struct
from typing import Mapping, Union

from transtrust.errors import CodecError

FieldValue = Union[bytes, str, int]


def _as_bytes(value: FieldValue) -> bytes:
    if isinstance(value, bool):
        return b"\x01" if value else b"\x00"
    if isinstance(value, bytes):
        return value
    if isinstance(value, str):
        return value.encode("utf-8")
    if isinstance(value, int):
        return value.to_bytes(8, "big", signed=False)
    raise TypeError(f"cannot encode {type(value).__name__}")


_LENGTH = struct.Struct(">I")


def pack(*parts: bytes) -> bytes:
    """Concatenate parts, each prefixed with a 4-octet big-endian length."""
    return b"".join([_LENGTH.pack(len(p)) + p for p in parts])


def unpack(data: bytes) -> list[bytes]:
    parts = []
    pos = 0
    end = len(data)
    read = _LENGTH.unpack_from
    while pos < end:
        if pos + 4 > end:
            raise CodecError("truncated length prefix")
        (n,) = read(data, pos)
        pos += 4
        if pos + n > end:
            raise CodecError("truncated field")
        parts.append(data[pos : pos + n])
        pos += n
    return parts


def encode_fields(fields: Mapping[str, FieldValue]) -> bytes:
    flat = []
    for name, value in fields.items():
        flat.append(name.encode("ascii"))
        flat.append(_as_bytes(value))
    return pack(*flat)


def decode_fields(data: bytes) -> dict[str, bytes]:
    parts = unpack(data)
    if len(parts) % 2:
        raise CodecError("odd number of field parts")
    out: dict[str, bytes] = {}
    for i in range(0, len(parts), 2):
        try:
            name = parts[i].decode("ascii")
        except UnicodeDecodeError as exc:
            raise CodecError("field name is not ascii") from exc
        if name in out:
            raise CodecError(f"duplicate field {name!r}")
        out[name] = parts[i + 1]
    return out


def to_int(value: bytes) -> int:
    return int.from_bytes(value, "big")


def to_str(value: bytes) -> str:
    try:
        return value.decode("utf-8")
    except UnicodeDecodeError as exc:
        raise CodecError("field is not utf-8") from exc


def require(fields: Mapping[str, bytes], *names: str) -> tuple[bytes, ...]:
    missing = [n for n in names if n not in fields]
    if missing:
        raise CodecError(f"missing fields: {', '.join(missing)}")
    return tuple(fields[n] for n in names)
