"""Signatures, public-key and symmetric sealing, and a minimal certificate authority.

Two interchangeable backends implement the same surface:

``RsaBackend``
    RSA-PSS signatures and RSA-OAEP hybrid sealing (AES-256-GCM payload).
``TestBackend``
    Ed25519 signatures and X25519 hybrid sealing with every random choice
    drawn from a seeded generator, so whole protocol runs are reproducible.

The protocol layer only ever sees ``KeyPair``, ``Certificate``,
``SessionKey``, ``SealedBox`` and ``Signature`` values plus a backend object.
"""

from __future__ import annotations

import base64
import enum
import hashlib
import os
import random
import threading
from dataclasses import dataclass
from typing import Protocol

from cryptography.exceptions import InvalidSignature, InvalidTag
from cryptography.hazmat.primitives import hashes, serialization
from cryptography.hazmat.primitives.asymmetric import ed25519, padding, rsa, x25519
from cryptography.hazmat.primitives.ciphers.aead import AESGCM
from cryptography.hazmat.primitives.kdf.hkdf import HKDF

from ._wire import Reader, Truncated, lp, u8, u64

CA_ID = 0xFFFF_FFFF_FFFF_FFFF
BANK_ID = 0xFFFF_FFFF_FFFF_FFFE


class CryptoBackendError(RuntimeError):
    pass


class OpenFailed(ValueError):
    pass


class Role(enum.IntEnum):
    BANK = 1
    ATM = 2
    USER = 3
    CA = 4


class SealMode(enum.IntEnum):
    PUBLIC_KEY = 1
    SYMMETRIC = 2


@dataclass(frozen=True)
class KeyPair:
    key_id: str
    public: bytes
    private: bytes = b""

    def public_only(self) -> "KeyPair":
        return KeyPair(self.key_id, self.public)


@dataclass(frozen=True)
class Signature:
    bytes: bytes


@dataclass(frozen=True)
class SessionKey:
    bytes: bytes

    def __post_init__(self) -> None:
        if len(self.bytes) != 32:
            raise ValueError("session key must be 32 bytes")

    def __repr__(self) -> str:
        return "SessionKey(<redacted>)"


@dataclass(frozen=True)
class SealedBox:
    mode: SealMode
    ciphertext: bytes

    def to_bytes(self) -> bytes:
        return u8(self.mode) + self.ciphertext

    @classmethod
    def from_bytes(cls, data: bytes) -> "SealedBox":
        if not data:
            raise Truncated("empty sealed box")
        try:
            mode = SealMode(data[0])
        except ValueError as exc:
            raise ValueError(f"unknown seal mode {data[0]}") from exc
        return cls(mode, bytes(data[1:]))


def key_id_for(public: bytes) -> str:
    return hashlib.sha256(public).hexdigest()[:16]


class RandomSource(Protocol):
    def randbytes(self, n: int) -> bytes: ...

    def randrange(self, start: int, stop: int = ...) -> int: ...


def system_rng() -> random.SystemRandom:
    return random.SystemRandom()


_AAD_PK = b"sfamss/seal/pk"
_AAD_SYM = b"sfamss/seal/sym"


class Backend:
    name: str

    def generate_keypair(self, rng: RandomSource | None = None) -> KeyPair:
        raise NotImplementedError

    def sign(self, private: bytes, msg: bytes) -> Signature:
        raise NotImplementedError

    def verify(self, public: bytes, msg: bytes, sig: Signature) -> bool:
        raise NotImplementedError

    def _seal_pk(self, public: bytes, plaintext: bytes) -> bytes:
        raise NotImplementedError

    def _open_pk(self, private: bytes, ciphertext: bytes) -> bytes:
        raise NotImplementedError

    def randbytes(self, n: int) -> bytes:
        raise NotImplementedError

    def new_session_key(self) -> SessionKey:
        return SessionKey(self.randbytes(32))

    def seal(self, key: bytes | SessionKey, plaintext: bytes, mode: SealMode) -> SealedBox:
        if mode is SealMode.SYMMETRIC:
            if not isinstance(key, SessionKey):
                raise TypeError("symmetric sealing needs a SessionKey")
            nonce = self.randbytes(12)
            ct = AESGCM(key.bytes).encrypt(nonce, plaintext, _AAD_SYM)
            return SealedBox(mode, nonce + ct)
        if isinstance(key, SessionKey):
            raise TypeError("public-key sealing needs public key bytes")
        try:
            return SealedBox(mode, self._seal_pk(key, plaintext))
        except (ValueError, TypeError) as exc:
            raise CryptoBackendError(str(exc)) from exc

    def open(self, key: bytes | SessionKey, box: SealedBox) -> bytes:
        if box.mode is SealMode.SYMMETRIC:
            if not isinstance(key, SessionKey):
                raise OpenFailed("mode mismatch: symmetric box needs a session key")
            if len(box.ciphertext) < 12 + 16:
                raise OpenFailed("ciphertext too short")
            try:
                return AESGCM(key.bytes).decrypt(box.ciphertext[:12], box.ciphertext[12:], _AAD_SYM)
            except InvalidTag as exc:
                raise OpenFailed("authentication tag mismatch") from exc
        if isinstance(key, SessionKey):
            raise OpenFailed("mode mismatch: public-key box needs a private key")
        try:
            return self._open_pk(key, box.ciphertext)
        except OpenFailed:
            raise
        except (ValueError, TypeError, InvalidTag, IndexError) as exc:
            raise OpenFailed(str(exc) or type(exc).__name__) from exc


class RsaBackend(Backend):
    name = "rsa"

    def __init__(self, key_bits: int = 2048) -> None:
        self.key_bits = key_bits

    def randbytes(self, n: int) -> bytes:
        return os.urandom(n)

    def generate_keypair(self, rng: RandomSource | None = None) -> KeyPair:
        try:
            key = rsa.generate_private_key(public_exponent=65537, key_size=self.key_bits)
        except Exception as exc:  # pragma: no cover - backend failure
            raise CryptoBackendError(str(exc)) from exc
        public = key.public_key().public_bytes(
            serialization.Encoding.DER, serialization.PublicFormat.SubjectPublicKeyInfo
        )
        private = key.private_bytes(
            serialization.Encoding.DER,
            serialization.PrivateFormat.PKCS8,
            serialization.NoEncryption(),
        )
        return KeyPair(key_id_for(public), public, private)

    @staticmethod
    def _priv(private: bytes) -> rsa.RSAPrivateKey:
        key = serialization.load_der_private_key(private, password=None)
        if not isinstance(key, rsa.RSAPrivateKey):
            raise TypeError("not an RSA private key")
        return key

    @staticmethod
    def _pub(public: bytes) -> rsa.RSAPublicKey:
        key = serialization.load_der_public_key(public)
        if not isinstance(key, rsa.RSAPublicKey):
            raise TypeError("not an RSA public key")
        return key

    _pss = padding.PSS(mgf=padding.MGF1(hashes.SHA256()), salt_length=32)
    _oaep = padding.OAEP(mgf=padding.MGF1(hashes.SHA256()), algorithm=hashes.SHA256(), label=None)

    def sign(self, private: bytes, msg: bytes) -> Signature:
        try:
            return Signature(self._priv(private).sign(msg, self._pss, hashes.SHA256()))
        except (ValueError, TypeError) as exc:
            raise CryptoBackendError(str(exc)) from exc

    def verify(self, public: bytes, msg: bytes, sig: Signature) -> bool:
        try:
            self._pub(public).verify(sig.bytes, msg, self._pss, hashes.SHA256())
            return True
        except (InvalidSignature, ValueError, TypeError):
            return False

    def _seal_pk(self, public: bytes, plaintext: bytes) -> bytes:
        dek = os.urandom(32)
        nonce = os.urandom(12)
        wrapped = self._pub(public).encrypt(dek, self._oaep)
        ct = AESGCM(dek).encrypt(nonce, plaintext, _AAD_PK)
        return len(wrapped).to_bytes(2, "big") + wrapped + nonce + ct

    def _open_pk(self, private: bytes, ciphertext: bytes) -> bytes:
        n = int.from_bytes(ciphertext[:2], "big")
        wrapped = ciphertext[2:2 + n]
        rest = ciphertext[2 + n:]
        if len(wrapped) != n or len(rest) < 12 + 16:
            raise OpenFailed("malformed public-key box")
        dek = self._priv(private).decrypt(wrapped, self._oaep)
        return AESGCM(dek).decrypt(rest[:12], rest[12:], _AAD_PK)


class TestBackend(Backend):
    """Deterministic double: same seed, same keys, same ciphertexts."""

    name = "test"
    __test__ = False  # not a pytest class

    def __init__(self, seed: int | None = None) -> None:
        self._rng = random.Random(int.from_bytes(os.urandom(8), "big") if seed is None else seed)
        self._lock = threading.Lock()

    def randbytes(self, n: int) -> bytes:
        with self._lock:
            return self._rng.randbytes(n)

    @staticmethod
    def _ed(private: bytes) -> ed25519.Ed25519PrivateKey:
        return ed25519.Ed25519PrivateKey.from_private_bytes(private)

    @staticmethod
    def _x(private: bytes) -> x25519.X25519PrivateKey:
        return x25519.X25519PrivateKey.from_private_bytes(
            hashlib.sha256(b"sfamss/x25519" + private).digest()
        )

    def generate_keypair(self, rng: RandomSource | None = None) -> KeyPair:
        seed = rng.randbytes(32) if rng is not None else self.randbytes(32)
        raw = serialization.Encoding.Raw, serialization.PublicFormat.Raw
        public = self._ed(seed).public_key().public_bytes(*raw) + self._x(seed).public_key().public_bytes(*raw)
        return KeyPair(key_id_for(public), public, seed)

    def sign(self, private: bytes, msg: bytes) -> Signature:
        try:
            return Signature(self._ed(private).sign(msg))
        except ValueError as exc:
            raise CryptoBackendError(str(exc)) from exc

    def verify(self, public: bytes, msg: bytes, sig: Signature) -> bool:
        if len(public) != 64:
            return False
        try:
            ed25519.Ed25519PublicKey.from_public_bytes(public[:32]).verify(sig.bytes, msg)
            return True
        except (InvalidSignature, ValueError):
            return False

    @staticmethod
    def _kdf(shared: bytes, info: bytes) -> bytes:
        return HKDF(algorithm=hashes.SHA256(), length=32, salt=None, info=info).derive(shared)

    def _seal_pk(self, public: bytes, plaintext: bytes) -> bytes:
        if len(public) != 64:
            raise ValueError("bad public key length")
        peer = x25519.X25519PublicKey.from_public_bytes(public[32:])
        eph = x25519.X25519PrivateKey.from_private_bytes(self.randbytes(32))
        eph_pub = eph.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        key = self._kdf(eph.exchange(peer), eph_pub + public[32:])
        nonce = self.randbytes(12)
        return eph_pub + nonce + AESGCM(key).encrypt(nonce, plaintext, _AAD_PK)

    def _open_pk(self, private: bytes, ciphertext: bytes) -> bytes:
        if len(ciphertext) < 32 + 12 + 16:
            raise OpenFailed("malformed public-key box")
        me = self._x(private)
        my_pub = me.public_key().public_bytes(serialization.Encoding.Raw, serialization.PublicFormat.Raw)
        eph_pub = ciphertext[:32]
        key = self._kdf(me.exchange(x25519.X25519PublicKey.from_public_bytes(eph_pub)), eph_pub + my_pub)
        return AESGCM(key).decrypt(ciphertext[32:44], ciphertext[44:], _AAD_PK)


def get_backend(name: str, seed: int | None = None, key_bits: int = 2048) -> Backend:
    if name == "rsa":
        return RsaBackend(key_bits)
    if name == "test":
        return TestBackend(seed)
    raise ValueError(f"unknown crypto backend {name!r}")


# -- certificates -------------------------------------------------------------


@dataclass(frozen=True)
class Certificate:
    subject_id: int
    role: Role
    subject_public: bytes
    issuer_id: int
    issuer_signature: Signature

    def tbs_bytes(self) -> bytes:
        return u64(self.subject_id) + u8(self.role) + lp(self.subject_public) + u64(self.issuer_id)

    def to_bytes(self) -> bytes:
        return self.tbs_bytes() + lp(self.issuer_signature.bytes)

    @classmethod
    def read(cls, r: Reader) -> "Certificate":
        subject_id = r.u64()
        role_code = r.u8()
        subject_public = r.lp()
        issuer_id = r.u64()
        sig = r.lp()
        try:
            role = Role(role_code)
        except ValueError as exc:
            raise ValueError(f"unknown certificate role {role_code}") from exc
        return cls(subject_id, role, subject_public, issuer_id, Signature(sig))

    @classmethod
    def from_bytes(cls, data: bytes) -> "Certificate":
        r = Reader(data)
        cert = cls.read(r)
        if r.remaining():
            raise ValueError("trailing bytes after certificate")
        return cert


@dataclass(frozen=True)
class CertificateAuthority:
    keypair: KeyPair
    certificate: Certificate
    ca_id: int = CA_ID

    @classmethod
    def create(cls, backend: Backend, rng: RandomSource | None = None) -> "CertificateAuthority":
        kp = backend.generate_keypair(rng)
        unsigned = Certificate(CA_ID, Role.CA, kp.public, CA_ID, Signature(b""))
        sig = backend.sign(kp.private, unsigned.tbs_bytes())
        return cls(kp, Certificate(CA_ID, Role.CA, kp.public, CA_ID, sig))


def issue_certificate(
    ca: CertificateAuthority, subject_public: bytes, subject_id: int, role: Role, backend: Backend
) -> Certificate:
    if ca.certificate.role is not Role.CA:
        raise ValueError("issuer is not a CA")
    unsigned = Certificate(subject_id, role, subject_public, ca.ca_id, Signature(b""))
    sig = backend.sign(ca.keypair.private, unsigned.tbs_bytes())
    return Certificate(subject_id, role, subject_public, ca.ca_id, sig)


def verify_certificate(cert: Certificate, ca_public: bytes, backend: Backend) -> bool:
    try:
        return backend.verify(ca_public, cert.tbs_bytes(), cert.issuer_signature)
    except Exception:
        return False


# -- key files ----------------------------------------------------------------


def _armor(label: str, data: bytes) -> str:
    body = base64.encodebytes(data).decode("ascii")
    return f"-----BEGIN {label}-----\n{body}-----END {label}-----\n"


def _unarmor(text: str, expect_kind: str) -> tuple[str, str, bytes]:
    lines = [ln.strip() for ln in text.strip().splitlines()]
    if len(lines) < 2 or not lines[0].startswith("-----BEGIN SFAMSS ") or not lines[0].endswith("-----"):
        raise ValueError("not an SFAMSS key file")
    label = lines[0][len("-----BEGIN "):-5]
    if lines[-1] != f"-----END {label}-----":
        raise ValueError("key file footer does not match header")
    parts = label.split(" ")
    # SFAMSS <backend> <role> <kind...>
    if len(parts) < 4 or " ".join(parts[3:]) != expect_kind:
        raise ValueError(f"expected a {expect_kind} file, got {label!r}")
    return parts[1], parts[2], base64.b64decode("".join(lines[1:-1]))


def dump_private_key(kp: KeyPair, backend: Backend, role: Role) -> str:
    return _armor(f"SFAMSS {backend.name} {role.name} PRIVATE KEY", lp(kp.public) + lp(kp.private))


def load_private_key(text: str) -> tuple[str, Role, KeyPair]:
    backend, role, data = _unarmor(text, "PRIVATE KEY")
    r = Reader(data)
    public, private = r.lp(), r.lp()
    return backend, Role[role], KeyPair(key_id_for(public), public, private)


def dump_certificate(cert: Certificate, backend: Backend) -> str:
    return _armor(f"SFAMSS {backend.name} {cert.role.name} CERTIFICATE", cert.to_bytes())


def load_certificate(text: str) -> tuple[str, Certificate]:
    backend, _, data = _unarmor(text, "CERTIFICATE")
    return backend, Certificate.from_bytes(data)
