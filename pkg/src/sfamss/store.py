"""Encrypted bank store: user/ATM records, bank secrets and a hash-chained audit log.

Image layout::

    "SFST" | version | key check (32) | len+secrets blob | len+records blob | audit region

Both blobs are AES-256-GCM under the storage key.  The audit region is a
run of individually encrypted records, each ``u32 len | u64 seq |
prev_hash(32) | nonce(12) | ciphertext``, where ``prev_hash`` is the SHA-256
of the previous record's full bytes (32 zero bytes for the first).  The
secrets blob also holds the head of the chain so truncation is detectable.
"""

from __future__ import annotations

import enum
import fcntl
import hashlib
import hmac
import json
import os
import struct
import tempfile
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives import hashes
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ._wire import OversizeField, Reader, Truncated, lp, u32, u64
from .crypto import Certificate, SessionKey

STORE_MAGIC = b"SFST"
STORE_VERSION = 0x01
GENESIS_HASH = bytes(32)


class StoreError(Exception):
    pass


class WrongKey(StoreError):
    pass


class CorruptImage(StoreError):
    pass


class NotFound(KeyError):
    pass


class StorageFailure(StoreError):
    pass


class StoreLocked(StoreError):
    pass


class Status(str, enum.Enum):
    ACTIVE = "ACTIVE"
    LOCKED = "LOCKED"


class AuditEvent(str, enum.Enum):
    REGISTER_ATM = "REGISTER_ATM"
    REGISTER_USER = "REGISTER_USER"
    AUTH_ACCEPT = "AUTH_ACCEPT"
    AUTH_REJECT = "AUTH_REJECT"
    AUTHZ_ALLOW = "AUTHZ_ALLOW"
    AUTHZ_DENY = "AUTHZ_DENY"


@dataclass
class UserPrivileges:
    withdrawal_limit: int = 0

    def __post_init__(self) -> None:
        if self.withdrawal_limit < 0:
            raise ValueError("withdrawal limit must be non-negative")


@dataclass
class UserRecord:
    user_id: int
    certificate: Certificate
    r_user: int
    session_key: SessionKey
    privileges: UserPrivileges = field(default_factory=UserPrivileges)
    status: Status = Status.ACTIVE


@dataclass
class AtmRecord:
    atm_id: int
    certificate: Certificate
    status: Status = Status.ACTIVE


@dataclass(frozen=True)
class AuditRecord:
    seq: int
    timestamp: int
    event: AuditEvent
    actors: dict
    evidence: bytes
    prev_hash: bytes
    reason: str | None = None

    def body(self) -> bytes:
        return json.dumps(
            {
                "seq": self.seq,
                "timestamp": self.timestamp,
                "event": self.event.value,
                "reason": self.reason,
                "actors": self.actors,
                "evidence": self.evidence.hex(),
            },
            sort_keys=True,
            separators=(",", ":"),
        ).encode()


@dataclass(frozen=True)
class ChainCheck:
    ok: bool
    broken_at: int | None = None
    records: int = 0


def derive_storage_key(master_secret: bytes) -> bytes:
    return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=b"sfamss/storage-key").derive(master_secret)


def _key_check(key: bytes) -> bytes:
    return hmac.new(key, b"sfamss/store/key-check", hashlib.sha256).digest()


def _seal(key: bytes, data: bytes, aad: bytes) -> bytes:
    nonce = os.urandom(12)
    return nonce + AESGCM(key).encrypt(nonce, data, aad)


def _unseal(key: bytes, blob: bytes, aad: bytes) -> bytes:
    if len(blob) < 28:
        raise InvalidTag()
    return AESGCM(key).decrypt(blob[:12], blob[12:], aad)


def _user_to_json(rec: UserRecord) -> dict:
    return {
        "user_id": rec.user_id,
        "certificate": rec.certificate.to_bytes().hex(),
        "r_user": rec.r_user,
        "session_key": rec.session_key.bytes.hex(),
        "withdrawal_limit": rec.privileges.withdrawal_limit,
        "status": rec.status.value,
    }


def _user_from_json(d: dict) -> UserRecord:
    return UserRecord(
        user_id=d["user_id"],
        certificate=Certificate.from_bytes(bytes.fromhex(d["certificate"])),
        r_user=d["r_user"],
        session_key=SessionKey(bytes.fromhex(d["session_key"])),
        privileges=UserPrivileges(d["withdrawal_limit"]),
        status=Status(d["status"]),
    )


def _atm_to_json(rec: AtmRecord) -> dict:
    return {"atm_id": rec.atm_id, "certificate": rec.certificate.to_bytes().hex(), "status": rec.status.value}


def _atm_from_json(d: dict) -> AtmRecord:
    return AtmRecord(d["atm_id"], Certificate.from_bytes(bytes.fromhex(d["certificate"])), Status(d["status"]))


class BankStore:
    """In-memory view of one store image.  One writer per file (advisory lock).

    Mutations are serialized by an internal lock; ``append_audit`` is durable
    before it returns, other mutations reach disk on ``save``.
    """

    def __init__(self, path: Path, key: bytes, durable: bool = True) -> None:
        self.path = Path(path)
        self._key = key
        self.durable = durable
        self.lock = threading.RLock()
        self.modulus: int | None = None
        self.polynomial: tuple[int, int, int] | None = None
        self.assigned_ids: dict[int, str] = {}
        self.meta: dict = {}
        self.users: dict[int, UserRecord] = {}
        self.atms: dict[int, AtmRecord] = {}
        self._audit = bytearray()
        self._audit_count = 0
        self._audit_head = GENESIS_HASH
        self._lockfile = None

    # -- lifecycle --------------------------------------------------------

    def _acquire(self) -> None:
        fh = open(str(self.path) + ".lock", "a+")
        try:
            fcntl.flock(fh, fcntl.LOCK_EX | fcntl.LOCK_NB)
        except OSError as exc:
            fh.close()
            raise StoreLocked(f"{self.path} is held by another writer") from exc
        self._lockfile = fh

    def close(self) -> None:
        if self._lockfile is not None:
            fcntl.flock(self._lockfile, fcntl.LOCK_UN)
            self._lockfile.close()
            self._lockfile = None

    def __enter__(self) -> "BankStore":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _load(self, image: bytes) -> None:
        if len(image) < 5 or image[:4] != STORE_MAGIC:
            raise CorruptImage("bad store magic")
        if image[4] != STORE_VERSION:
            raise CorruptImage(f"unsupported store version {image[4]}")
        r = Reader(image, 5)
        try:
            check = r.take(32)
            if not hmac.compare_digest(check, _key_check(self._key)):
                raise WrongKey("storage key does not match this store")
            secrets_blob = r.lp()
            records_blob = r.lp()
        except (Truncated, OversizeField) as exc:
            raise CorruptImage(str(exc)) from exc
        try:
            secrets = json.loads(_unseal(self._key, secrets_blob, b"SFST/secrets"))
            records = json.loads(_unseal(self._key, records_blob, b"SFST/records"))
        except (InvalidTag, ValueError) as exc:
            raise CorruptImage("store blob failed authentication") from exc
        self.modulus = secrets["modulus"]
        self.polynomial = tuple(secrets["polynomial"]) if secrets["polynomial"] is not None else None
        self.assigned_ids = {i: role for i, role in secrets["assigned_ids"]}
        self.meta = secrets.get("meta", {})
        self._audit_count = secrets["audit_count"]
        self._audit_head = bytes.fromhex(secrets["audit_head"])
        self.users = {u["user_id"]: _user_from_json(u) for u in records["users"]}
        self.atms = {a["atm_id"]: _atm_from_json(a) for a in records["atms"]}
        self._audit = bytearray(image[r.pos:])

    def image(self) -> bytes:
        with self.lock:
            secrets = {
                "modulus": self.modulus,
                "polynomial": list(self.polynomial) if self.polynomial is not None else None,
                "assigned_ids": sorted(self.assigned_ids.items()),
                "meta": self.meta,
                "audit_count": self._audit_count,
                "audit_head": self._audit_head.hex(),
            }
            records = {
                "users": [_user_to_json(u) for u in self.users.values()],
                "atms": [_atm_to_json(a) for a in self.atms.values()],
            }
            return b"".join(
                [
                    STORE_MAGIC,
                    bytes([STORE_VERSION]),
                    _key_check(self._key),
                    lp(_seal(self._key, json.dumps(secrets).encode(), b"SFST/secrets")),
                    lp(_seal(self._key, json.dumps(records).encode(), b"SFST/records")),
                    bytes(self._audit),
                ]
            )

    def save(self) -> None:
        data = self.image()
        self.path.parent.mkdir(parents=True, exist_ok=True)
        try:
            fd, tmp = tempfile.mkstemp(dir=self.path.parent, prefix=".sfst-")
            with os.fdopen(fd, "wb") as fh:
                fh.write(data)
                if self.durable:
                    fh.flush()
                    os.fsync(fh.fileno())
            os.replace(tmp, self.path)
        except OSError as exc:
            raise StorageFailure(str(exc)) from exc

    # -- records ----------------------------------------------------------

    def upsert_record(self, rec: UserRecord | AtmRecord) -> None:
        with self.lock:
            if isinstance(rec, UserRecord):
                self.users[rec.user_id] = rec
            else:
                self.atms[rec.atm_id] = rec

    def get_record(self, entity_id: int) -> UserRecord | AtmRecord:
        with self.lock:
            if entity_id in self.users:
                return self.users[entity_id]
            if entity_id in self.atms:
                return self.atms[entity_id]
        raise NotFound(entity_id)

    def get_user(self, user_id: int) -> UserRecord:
        try:
            return self.users[user_id]
        except KeyError:
            raise NotFound(user_id) from None

    def get_atm(self, atm_id: int) -> AtmRecord:
        try:
            return self.atms[atm_id]
        except KeyError:
            raise NotFound(atm_id) from None

    # -- audit ------------------------------------------------------------

    @property
    def audit_count(self) -> int:
        return self._audit_count

    def audit_region(self) -> bytes:
        return bytes(self._audit)

    def append_audit(
        self,
        event: AuditEvent,
        actors: dict,
        evidence: bytes = b"",
        reason: str | None = None,
        timestamp: int | None = None,
    ) -> AuditRecord:
        with self.lock:
            seq = self._audit_count + 1
            rec = AuditRecord(
                seq=seq,
                timestamp=int(time.time() * 1000) if timestamp is None else timestamp,
                event=event,
                actors=dict(actors),
                evidence=evidence,
                prev_hash=self._audit_head,
                reason=reason,
            )
            aad = u64(seq) + rec.prev_hash
            nonce = os.urandom(12)
            ct = AESGCM(self._key).encrypt(nonce, rec.body(), aad)
            body = aad + nonce + ct
            raw = u32(len(body)) + body
            self._audit += raw
            self._audit_count = seq
            self._audit_head = hashlib.sha256(raw).digest()
            self.save()
            return rec

    def _split_audit(self) -> tuple[list[tuple[int, bytes, bytes, bytes]], int | None]:
        """Parse the region into (seq, prev_hash, raw, sealed body); report the first unparsable slot."""
        out = []
        data = bytes(self._audit)
        pos = 0
        while pos < len(data):
            slot = len(out) + 1
            if pos + 4 > len(data):
                return out, slot
            n = struct.unpack(">I", data[pos:pos + 4])[0]
            if n < 8 + 32 + 12 + 16 or pos + 4 + n > len(data):
                return out, slot
            raw = data[pos:pos + 4 + n]
            seq = struct.unpack(">Q", raw[4:12])[0]
            out.append((seq, raw[12:44], raw, raw[4:]))
            pos += 4 + n
        return out, None

    def verify_audit_chain(self) -> ChainCheck:
        with self.lock:
            parsed, bad_slot = self._split_audit()
            expected = GENESIS_HASH
            for i, (seq, prev_hash, raw, _) in enumerate(parsed, start=1):
                if seq != i or not hmac.compare_digest(prev_hash, expected):
                    return ChainCheck(False, i, len(parsed))
                expected = hashlib.sha256(raw).digest()
            if bad_slot is not None:
                return ChainCheck(False, bad_slot, len(parsed))
            if len(parsed) != self._audit_count:
                return ChainCheck(False, min(len(parsed), self._audit_count) + 1, len(parsed))
            if not hmac.compare_digest(expected, self._audit_head):
                return ChainCheck(False, max(len(parsed), 1), len(parsed))
            for seq, _, _, body in parsed:
                try:
                    _unseal_record(self._key, body)
                except InvalidTag:
                    return ChainCheck(False, seq, len(parsed))
            return ChainCheck(True, None, len(parsed))

    def raw_audit_records(self) -> list[tuple[int, bytes]]:
        parsed, _ = self._split_audit()
        return [(seq, body) for seq, _, _, body in parsed]

    def read_audit(self) -> list[AuditRecord]:
        parsed, bad = self._split_audit()
        if bad is not None:
            raise CorruptImage(f"audit record {bad} unparsable")
        out = []
        for _, prev_hash, _, body in parsed:
            try:
                d = json.loads(_unseal_record(self._key, body))
            except InvalidTag as exc:
                raise CorruptImage("audit record failed authentication") from exc
            out.append(
                AuditRecord(
                    seq=d["seq"],
                    timestamp=d["timestamp"],
                    event=AuditEvent(d["event"]),
                    actors=d["actors"],
                    evidence=bytes.fromhex(d["evidence"]),
                    prev_hash=prev_hash,
                    reason=d["reason"],
                )
            )
        return out


def _unseal_record(key: bytes, body: bytes) -> bytes:
    aad, nonce, ct = body[:40], body[40:52], body[52:]
    return AESGCM(key).decrypt(nonce, ct, aad)


def open_store(path: str | os.PathLike, storage_key: bytes, durable: bool = True, create: bool = True) -> BankStore:
    path = Path(path)
    store = BankStore(path, storage_key, durable=durable)
    store._acquire()
    try:
        if path.exists():
            store._load(path.read_bytes())
        elif not create:
            raise StorageFailure(f"no store at {path}")
    except BaseException:
        store.close()
        raise
    return store
