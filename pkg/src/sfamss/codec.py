"""Canonical byte encoding of protocol messages, plus framed stream transport.

Frame layout::

    "SFAM" | version 0x01 | msg_type | fields...

Fields appear in declaration order.  Ids, timestamps and amounts are 8-byte
big-endian; booleans and reason codes are one byte; certificates,
signatures and sealed boxes are a 4-byte big-endian length followed by the
bytes.  On a stream each frame is preceded by its own 4-byte length.
"""

from __future__ import annotations

import enum
import socket
from dataclasses import dataclass, fields
from typing import ClassVar

from . import _wire
from ._wire import Reader, lp, u8, u32, u64
from .crypto import Certificate, SealedBox, Signature

MAGIC = b"SFAM"
VERSION = 0x01
MAX_FRAME = 1 << 20
HEADER_LEN = 6


class Reason(enum.IntEnum):
    ACCEPT = 0
    UNKNOWN_USER = 1
    UNKNOWN_ATM = 2
    STALE = 3
    REPLAY = 4
    BAD_SIGNATURE = 5
    OPEN_FAILED = 6
    SHARE_MISMATCH = 7
    NOT_AUTHENTICATED = 8
    LIMIT_EXCEEDED = 9


# -- errors -------------------------------------------------------------------


class DecodeError(ValueError):
    pass


class BadMagic(DecodeError):
    pass


class BadVersion(DecodeError):
    pass


class UnknownType(DecodeError):
    pass


class Truncated(DecodeError, _wire.Truncated):
    pass


class TrailingBytes(DecodeError):
    pass


class BadField(DecodeError):
    """A field parsed structurally but holds an invalid value (enum, bool, nested object)."""


class OversizeField(DecodeError, _wire.OversizeField):
    pass


class NotSignable(TypeError):
    pass


class TransportError(ConnectionError):
    pass


class PeerClosed(TransportError):
    pass


class FrameTooLarge(TransportError):
    pass


class Timeout(TransportError):
    pass


# -- messages -----------------------------------------------------------------

# field kinds: fixed-width ones may be signed, length-prefixed ones may not
_FIXED = {"u64": 8, "bool": 1, "reason": 1}


class Message:
    TYPE: ClassVar[int]
    SCHEMA: ClassVar[tuple[tuple[str, str], ...]]
    SIGNED: ClassVar[tuple[str, ...]] = ()
    SIG_FIELD: ClassVar[str | None] = None

    @property
    def name(self) -> str:
        return type(self).__name__


@dataclass(frozen=True)
class AtmAssignId(Message):
    atm_id: int
    TYPE = 0x01
    SCHEMA = (("atm_id", "u64"),)


@dataclass(frozen=True)
class AtmRegisterRequest(Message):
    atm_id: int
    atm_certificate: Certificate
    TYPE = 0x02
    SCHEMA = (("atm_id", "u64"), ("atm_certificate", "cert"))


@dataclass(frozen=True)
class AtmRegisterResponse(Message):
    sealed_d_atm: SealedBox
    TYPE = 0x03
    SCHEMA = (("sealed_d_atm", "box"),)


@dataclass(frozen=True)
class UserAssignId(Message):
    user_id: int
    TYPE = 0x04
    SCHEMA = (("user_id", "u64"),)


@dataclass(frozen=True)
class UserRegisterRequest(Message):
    user_id: int
    user_certificate: Certificate
    sealed_session_key: SealedBox
    TYPE = 0x05
    SCHEMA = (("user_id", "u64"), ("user_certificate", "cert"), ("sealed_session_key", "box"))


@dataclass(frozen=True)
class UserRegisterResponse(Message):
    sealed_d_user: SealedBox
    TYPE = 0x06
    SCHEMA = (("sealed_d_user", "box"),)


@dataclass(frozen=True)
class UserAuthRequest(Message):
    user_id: int
    t_s: int
    user_signature: Signature
    sealed_d_user: SealedBox
    TYPE = 0x07
    SCHEMA = (("user_id", "u64"), ("t_s", "u64"), ("user_signature", "sig"), ("sealed_d_user", "box"))
    SIGNED = ("user_id", "t_s")
    SIG_FIELD = "user_signature"


@dataclass(frozen=True)
class CertFetch(Message):
    user_id: int
    TYPE = 0x08
    SCHEMA = (("user_id", "u64"),)


@dataclass(frozen=True)
class BankAuthRequest(Message):
    user_id: int
    atm_id: int
    t_s: int
    user_signature: Signature
    sealed_d_user: SealedBox
    sealed_d_atm_for_bank: SealedBox
    TYPE = 0x09
    SCHEMA = (
        ("user_id", "u64"),
        ("atm_id", "u64"),
        ("t_s", "u64"),
        ("user_signature", "sig"),
        ("sealed_d_user", "box"),
        ("sealed_d_atm_for_bank", "box"),
    )
    SIGNED = ("user_id", "t_s")
    SIG_FIELD = "user_signature"


@dataclass(frozen=True)
class AuthDecision(Message):
    user_id: int
    atm_id: int
    t_s: int
    accepted: bool
    reason: Reason
    bank_signature: Signature
    TYPE = 0x0A
    SCHEMA = (
        ("user_id", "u64"),
        ("atm_id", "u64"),
        ("t_s", "u64"),
        ("accepted", "bool"),
        ("reason", "reason"),
        ("bank_signature", "sig"),
    )
    SIGNED = ("user_id", "atm_id", "t_s", "accepted", "reason")
    SIG_FIELD = "bank_signature"


@dataclass(frozen=True)
class CertFetchReply(Message):
    """``user_certificate`` is None when the bank knows no such user."""

    user_certificate: Certificate | None
    TYPE = 0x0B
    SCHEMA = (("user_certificate", "cert?"),)


@dataclass(frozen=True)
class AuthzRequest(Message):
    user_id: int
    atm_id: int
    t_s: int
    amount: int
    atm_signature: Signature
    TYPE = 0x0C
    SCHEMA = (("user_id", "u64"), ("atm_id", "u64"), ("t_s", "u64"), ("amount", "u64"), ("atm_signature", "sig"))
    SIGNED = ("user_id", "atm_id", "t_s", "amount")
    SIG_FIELD = "atm_signature"


@dataclass(frozen=True)
class AuthzDecision(Message):
    user_id: int
    atm_id: int
    t_s: int
    amount: int
    allowed: bool
    reason: Reason
    bank_signature: Signature
    TYPE = 0x0D
    SCHEMA = (
        ("user_id", "u64"),
        ("atm_id", "u64"),
        ("t_s", "u64"),
        ("amount", "u64"),
        ("allowed", "bool"),
        ("reason", "reason"),
        ("bank_signature", "sig"),
    )
    SIGNED = ("user_id", "atm_id", "t_s", "amount", "allowed", "reason")
    SIG_FIELD = "bank_signature"


MESSAGE_TYPES: dict[int, type[Message]] = {
    cls.TYPE: cls
    for cls in (
        AtmAssignId, AtmRegisterRequest, AtmRegisterResponse, UserAssignId, UserRegisterRequest,
        UserRegisterResponse, UserAuthRequest, CertFetch, BankAuthRequest, AuthDecision,
        CertFetchReply, AuthzRequest, AuthzDecision,
    )
}

# conventional short names, M1..M10 plus M8R
SHORT_NAMES = {
    AtmAssignId: "M1", AtmRegisterRequest: "M2", AtmRegisterResponse: "M3", UserAssignId: "M4",
    UserRegisterRequest: "M5", UserRegisterResponse: "M6", UserAuthRequest: "M7", CertFetch: "M8",
    BankAuthRequest: "M9", AuthDecision: "M10", CertFetchReply: "M8R", AuthzRequest: "AZ",
    AuthzDecision: "AZR",
}


def _encode_field(kind: str, value: object) -> bytes:
    if kind == "u64":
        return u64(value)  # type: ignore[arg-type]
    if kind == "bool":
        return u8(1 if value else 0)
    if kind == "reason":
        return u8(int(value))  # type: ignore[call-overload]
    if kind == "cert":
        return lp(value.to_bytes())  # type: ignore[union-attr]
    if kind == "cert?":
        return lp(b"" if value is None else value.to_bytes())  # type: ignore[union-attr]
    if kind == "sig":
        return lp(value.bytes)  # type: ignore[union-attr]
    if kind == "box":
        return lp(value.to_bytes())  # type: ignore[union-attr]
    raise AssertionError(kind)


def encode(msg: Message) -> bytes:
    try:
        parts = [MAGIC, u8(VERSION), u8(msg.TYPE)]
        parts += [_encode_field(kind, getattr(msg, name)) for name, kind in msg.SCHEMA]
    except _wire.OversizeField as exc:
        raise OversizeField(str(exc)) from exc
    out = b"".join(parts)
    if len(out) > MAX_FRAME:
        raise OversizeField(f"frame of {len(out)} bytes exceeds 1 MiB")
    return out


def _parse_raw(data: bytes) -> tuple[type[Message], dict[str, bytes]]:
    if len(data) > MAX_FRAME:
        raise OversizeField("frame exceeds 1 MiB")
    if len(data) < 4:
        if MAGIC.startswith(bytes(data)):
            raise Truncated("frame shorter than magic")
        raise BadMagic("bad magic")
    if data[:4] != MAGIC:
        raise BadMagic(f"bad magic {bytes(data[:4])!r}")
    if len(data) < HEADER_LEN:
        raise Truncated("frame shorter than header")
    if data[4] != VERSION:
        raise BadVersion(f"unsupported version {data[4]}")
    cls = MESSAGE_TYPES.get(data[5])
    if cls is None:
        raise UnknownType(f"unknown message type 0x{data[5]:02x}")
    r = Reader(data, HEADER_LEN)
    raw: dict[str, bytes] = {}
    try:
        for name, kind in cls.SCHEMA:
            raw[name] = r.take(_FIXED[kind]) if kind in _FIXED else r.lp()
    except _wire.OversizeField as exc:
        raise OversizeField(str(exc)) from exc
    except _wire.Truncated as exc:
        raise Truncated(str(exc)) from exc
    if r.remaining():
        raise TrailingBytes(f"{r.remaining()} trailing bytes")
    return cls, raw


def _decode_field(kind: str, raw: bytes) -> object:
    if kind == "u64":
        return int.from_bytes(raw, "big")
    if kind == "bool":
        if raw[0] > 1:
            raise BadField(f"boolean byte {raw[0]}")
        return raw[0] == 1
    if kind == "reason":
        try:
            return Reason(raw[0])
        except ValueError:
            raise BadField(f"unknown reason code {raw[0]}") from None
    if kind == "sig":
        return Signature(raw)
    try:
        if kind == "cert":
            return Certificate.from_bytes(raw)
        if kind == "cert?":
            return Certificate.from_bytes(raw) if raw else None
        if kind == "box":
            return SealedBox.from_bytes(raw)
    except ValueError as exc:
        raise BadField(f"{kind}: {exc}") from None
    raise AssertionError(kind)


def decode(data: bytes) -> Message:
    cls, raw = _parse_raw(bytes(data))
    kinds = dict(cls.SCHEMA)
    values = {name: _decode_field(kinds[name], raw[name]) for name in raw}
    return cls(**values)


def signing_bytes(msg: Message) -> bytes:
    if not msg.SIGNED:
        raise NotSignable(f"{msg.name} carries no signature")
    kinds = dict(msg.SCHEMA)
    return b"".join(_encode_field(kinds[n], getattr(msg, n)) for n in msg.SIGNED)


def split_signed(frame: bytes) -> tuple[type[Message], bytes, Signature]:
    """Structural parse returning (type, signed bytes, signature) without validating values.

    Lets a receiver check a signature before trusting any enum-valued field.
    """
    cls, raw = _parse_raw(bytes(frame))
    if not cls.SIGNED or cls.SIG_FIELD is None:
        raise NotSignable(f"{cls.__name__} carries no signature")
    return cls, b"".join(raw[n] for n in cls.SIGNED), Signature(raw[cls.SIG_FIELD])


def with_signature(msg: Message, sig: Signature) -> Message:
    assert msg.SIG_FIELD is not None
    values = {f.name: getattr(msg, f.name) for f in fields(msg)}  # type: ignore[arg-type]
    values[msg.SIG_FIELD] = sig
    return type(msg)(**values)


# -- stream transport ---------------------------------------------------------


def transport_send(sock: socket.socket, frame: bytes) -> None:
    if len(frame) > MAX_FRAME:
        raise FrameTooLarge(f"frame of {len(frame)} bytes exceeds 1 MiB")
    try:
        sock.sendall(u32(len(frame)) + frame)
    except socket.timeout as exc:
        raise Timeout("send timed out") from exc
    except (BrokenPipeError, ConnectionResetError) as exc:
        raise PeerClosed(str(exc)) from exc


def _recv_exact(sock: socket.socket, n: int, what: str) -> bytes:
    buf = bytearray()
    while len(buf) < n:
        try:
            chunk = sock.recv(min(n - len(buf), 65536))
        except socket.timeout as exc:
            raise Timeout(f"timed out reading {what}") from exc
        except ConnectionResetError as exc:
            raise PeerClosed(str(exc)) from exc
        if not chunk:
            raise PeerClosed(f"peer closed after {len(buf)} of {n} bytes of {what}")
        buf += chunk
    return bytes(buf)


def transport_recv(sock: socket.socket) -> bytes:
    n = int.from_bytes(_recv_exact(sock, 4, "length prefix"), "big")
    if n > MAX_FRAME:
        raise FrameTooLarge(f"peer announced {n} bytes")
    return _recv_exact(sock, n, "frame")
