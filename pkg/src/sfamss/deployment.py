"""On-disk deployment: CA, bank, ATM state files and card files sharing one config.

Layout::

    config.json          modulus, freshness window, backend, bank address, checksum
    ca.key  ca.cert      certificate authority
    bank.key bank.cert   bank identity
    bank.master          master secret the storage key is derived from
    bank.store           encrypted store image (see ``store``)
    atms/<id>.atm        ATM state (keys, certificate, its share)
    cards/<id>.card      card state (keys, certificate, session key, sealed share, PIN digest)

Every state file repeats the config checksum so files from different
deployments cannot be mixed.
"""

from __future__ import annotations

import base64
import hashlib
import json
import os
import random
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

from .crypto import (
    BANK_ID,
    Backend,
    Certificate,
    CertificateAuthority,
    KeyPair,
    Role,
    SealedBox,
    SessionKey,
    dump_certificate,
    dump_private_key,
    get_backend,
    issue_certificate,
    key_id_for,
    load_certificate,
    load_private_key,
)
from .field import DEFAULT_MODULUS, SharePoint, check_modulus, sample_base_polynomial
from .protocol import (
    DEFAULT_WINDOW_MS,
    PIN_ITERATIONS,
    Atm,
    Bank,
    Card,
    Clock,
    FreshnessPolicy,
    new_atm,
    new_card,
    system_clock,
)
from .store import BankStore, derive_storage_key, open_store

DEFAULT_PORT = 7845
CONFIG_NAME = "config.json"


class DeploymentError(Exception):
    pass


class DirNotEmpty(DeploymentError):
    pass


class NotInitialized(DeploymentError):
    pass


class DeploymentMismatch(DeploymentError):
    pass


class PinRequired(DeploymentError):
    pass


def derive_seed(seed: int, *labels: object) -> int:
    h = hashlib.sha256(repr((seed,) + labels).encode()).digest()
    return int.from_bytes(h[:8], "big")


@dataclass(frozen=True)
class Config:
    modulus: int = DEFAULT_MODULUS
    window_ms: int = DEFAULT_WINDOW_MS
    backend: str = "rsa"
    key_bits: int = 2048
    bank_host: str = "127.0.0.1"
    bank_port: int = DEFAULT_PORT
    seed: int | None = None

    def _body(self) -> dict:
        return {
            "modulus": self.modulus,
            "window_ms": self.window_ms,
            "backend": self.backend,
            "key_bits": self.key_bits,
            "bank_host": self.bank_host,
            "bank_port": self.bank_port,
            "seed": self.seed,
        }

    @property
    def checksum(self) -> str:
        return hashlib.sha256(json.dumps(self._body(), sort_keys=True).encode()).hexdigest()

    def to_json(self) -> str:
        return json.dumps({**self._body(), "checksum": self.checksum}, indent=2, sort_keys=True) + "\n"

    @classmethod
    def from_json(cls, text: str) -> "Config":
        d = json.loads(text)
        checksum = d.pop("checksum", None)
        cfg = cls(**d)
        if checksum != cfg.checksum:
            raise DeploymentMismatch("config checksum does not match its contents")
        return cfg


def _b64(data: bytes) -> str:
    return base64.b64encode(data).decode("ascii")


def _unb64(text: str) -> bytes:
    return base64.b64decode(text)


class Deployment:
    def __init__(self, root: str | os.PathLike) -> None:
        self.root = Path(root)
        cfg_path = self.root / CONFIG_NAME
        if not cfg_path.exists():
            raise NotInitialized(f"{self.root} is not an initialized deployment")
        self.config = Config.from_json(cfg_path.read_text())

    # -- paths ------------------------------------------------------------

    @property
    def store_path(self) -> Path:
        return self.root / "bank.store"

    @property
    def atm_dir(self) -> Path:
        return self.root / "atms"

    @property
    def card_dir(self) -> Path:
        return self.root / "cards"

    def atm_files(self) -> list[Path]:
        return sorted(self.atm_dir.glob("*.atm"), key=lambda p: p.stat().st_mtime_ns)

    def card_files(self) -> list[Path]:
        return sorted(self.card_dir.glob("*.card"), key=lambda p: p.stat().st_mtime_ns)

    # -- init ---------------------------------------------------------------

    @classmethod
    def init(
        cls,
        root: str | os.PathLike,
        seed: int | None = None,
        backend: str = "rsa",
        modulus: int = DEFAULT_MODULUS,
        window_ms: int = DEFAULT_WINDOW_MS,
        port: int = DEFAULT_PORT,
        host: str = "127.0.0.1",
        key_bits: int = 2048,
        durable: bool = True,
    ) -> "Deployment":
        root = Path(root)
        if root.exists() and any(root.iterdir()):
            raise DirNotEmpty(f"{root} is not empty")
        check_modulus(modulus)
        cfg = Config(modulus, window_ms, backend, key_bits, host, port, seed)
        root.mkdir(parents=True, exist_ok=True)
        rng = random.Random(derive_seed(seed, "init")) if seed is not None else random.SystemRandom()
        be = get_backend(backend, derive_seed(seed, "init-backend") if seed is not None else None, key_bits)

        ca = CertificateAuthority.create(be, rng if seed is not None else None)
        bank_kp = be.generate_keypair(rng if seed is not None else None)
        bank_cert = issue_certificate(ca, bank_kp.public, BANK_ID, Role.BANK, be)
        master = rng.randbytes(32) if seed is not None else os.urandom(32)

        (root / CONFIG_NAME).write_text(cfg.to_json())
        _write_private(root / "ca.key", dump_private_key(ca.keypair, be, Role.CA))
        (root / "ca.cert").write_text(dump_certificate(ca.certificate, be))
        _write_private(root / "bank.key", dump_private_key(bank_kp, be, Role.BANK))
        (root / "bank.cert").write_text(dump_certificate(bank_cert, be))
        _write_private(root / "bank.master", _b64(master) + "\n")

        store = open_store(root / "bank.store", derive_storage_key(master), durable=durable)
        try:
            store.modulus = modulus
            store.polynomial = sample_base_polynomial(rng, modulus).ints()
            store.save()
        finally:
            store.close()
        (root / "atms").mkdir()
        (root / "cards").mkdir()
        return cls(root)

    # -- shared material --------------------------------------------------

    def backend(self, *labels: object) -> Backend:
        seed = self.config.seed
        return get_backend(
            self.config.backend, derive_seed(seed, *labels) if seed is not None else None, self.config.key_bits
        )

    def rng(self, *labels: object) -> random.Random:
        if self.config.seed is None:
            return random.SystemRandom()
        return random.Random(derive_seed(self.config.seed, *labels))

    def _check_backend(self, name: str) -> None:
        if name != self.config.backend:
            raise DeploymentMismatch(f"key file for backend {name!r} in a {self.config.backend!r} deployment")

    def ca(self) -> CertificateAuthority:
        name, _, kp = load_private_key((self.root / "ca.key").read_text())
        self._check_backend(name)
        _, cert = load_certificate((self.root / "ca.cert").read_text())
        return CertificateAuthority(kp, cert)

    def ca_certificate(self) -> Certificate:
        return load_certificate((self.root / "ca.cert").read_text())[1]

    def bank_certificate(self) -> Certificate:
        return load_certificate((self.root / "bank.cert").read_text())[1]

    def storage_key(self) -> bytes:
        return derive_storage_key(_unb64((self.root / "bank.master").read_text().strip()))

    def open_store(self, durable: bool = True) -> BankStore:
        return open_store(self.store_path, self.storage_key(), durable=durable, create=False)

    def policy(self, clock: Clock | None = None) -> FreshnessPolicy:
        return FreshnessPolicy(self.config.window_ms, clock or system_clock)

    @contextmanager
    def bank(self, clock: Clock | None = None, durable: bool = True, label: str = "bank") -> Iterator[Bank]:
        store = self.open_store(durable)
        try:
            name, _, kp = load_private_key((self.root / "bank.key").read_text())
            self._check_backend(name)
            counter = store.audit_count
            yield Bank(
                self.backend(label, counter),
                kp,
                self.bank_certificate(),
                self.ca_certificate().subject_public,
                store,
                self.policy(clock),
                self.rng(label, counter, len(store.assigned_ids)),
            )
        finally:
            store.close()

    # -- registration -----------------------------------------------------

    def register_atm(self, bank: Bank | None = None) -> tuple[Atm, Path]:
        if bank is None:
            with self.bank() as b:
                return self.register_atm(b)
        n = len(bank.store.assigned_ids)
        be = self.backend("register-atm", n)
        atm = new_atm(bank, self.ca(), be, bank.policy, self.rng("atm-keys", n) if self.config.seed is not None else None)
        path = self.save_atm(atm)
        return atm, path

    def register_user(
        self, pin: str | None, withdrawal_limit: int = 0, bank: Bank | None = None,
        pin_iterations: int = PIN_ITERATIONS,
    ) -> tuple[Card, Path]:
        if not pin:
            raise PinRequired("a PIN is required to issue a card")
        if bank is None:
            with self.bank() as b:
                return self.register_user(pin, withdrawal_limit, b, pin_iterations)
        n = len(bank.store.assigned_ids)
        be = self.backend("register-user", n)
        rng = self.rng("card-keys", n) if self.config.seed is not None else None
        card = new_card(bank, self.ca(), be, pin, withdrawal_limit, rng, pin_iterations)
        path = self.save_card(card)
        return card, path

    # -- state files ------------------------------------------------------

    def save_atm(self, atm: Atm) -> Path:
        assert atm.d_atm is not None
        doc = {
            "deployment": self.config.checksum,
            "kind": "atm",
            "atm_id": atm.atm_id,
            "public": _b64(atm.keypair.public),
            "private": _b64(atm.keypair.private),
            "certificate": _b64(atm.certificate.to_bytes()),
            "d_atm": _b64(atm.d_atm.to_bytes()),
        }
        path = self.atm_dir / f"{atm.atm_id}.atm"
        _write_private(path, json.dumps(doc, indent=2) + "\n")
        return path

    def load_atm(self, path: str | os.PathLike, clock: Clock | None = None) -> Atm:
        doc = self._load_doc(path, "atm")
        public = _unb64(doc["public"])
        kp = KeyPair(key_id_for(public), public, _unb64(doc["private"]))
        p = self.config.modulus
        return Atm(
            doc["atm_id"],
            kp,
            Certificate.from_bytes(_unb64(doc["certificate"])),
            self.ca_certificate().subject_public,
            self.bank_certificate(),
            self.backend("atm", doc["atm_id"], (clock or system_clock)()),
            p,
            self.policy(clock),
            SharePoint.from_bytes(_unb64(doc["d_atm"]), p),
        )

    def save_card(self, card: Card) -> Path:
        assert card.sealed_d_user is not None
        doc = {
            "deployment": self.config.checksum,
            "kind": "card",
            "user_id": card.user_id,
            "public": _b64(card.keypair.public),
            "private": _b64(card.keypair.private),
            "certificate": _b64(card.certificate.to_bytes()),
            "session_key": _b64(card.session_key.bytes),
            "sealed_d_user": _b64(card.sealed_d_user.to_bytes()),
            "pin_salt": _b64(card.pin_salt),
            "pin_digest": _b64(card.pin_digest),
            "pin_iterations": card.pin_iterations,
            "failures": card.failures,
        }
        path = self.card_dir / f"{card.user_id}.card"
        _write_private(path, json.dumps(doc, indent=2) + "\n")
        return path

    def load_card(self, path: str | os.PathLike) -> Card:
        doc = self._load_doc(path, "card")
        public = _unb64(doc["public"])
        return Card(
            doc["user_id"],
            KeyPair(key_id_for(public), public, _unb64(doc["private"])),
            Certificate.from_bytes(_unb64(doc["certificate"])),
            SessionKey(_unb64(doc["session_key"])),
            SealedBox.from_bytes(_unb64(doc["sealed_d_user"])),
            _unb64(doc["pin_salt"]),
            _unb64(doc["pin_digest"]),
            self.backend("card", doc["user_id"]),
            doc["pin_iterations"],
            doc.get("failures", 0),
        )

    def _load_doc(self, path: str | os.PathLike, kind: str) -> dict:
        doc = json.loads(Path(path).read_text())
        if doc.get("kind") != kind:
            raise DeploymentError(f"{path} is not a {kind} file")
        if doc.get("deployment") != self.config.checksum:
            raise DeploymentMismatch(f"{path} belongs to a different deployment")
        return doc


def _write_private(path: Path, text: str) -> None:
    fd = os.open(path, os.O_WRONLY | os.O_CREAT | os.O_TRUNC, 0o600)
    with os.fdopen(fd, "w") as fh:
        fh.write(text)
