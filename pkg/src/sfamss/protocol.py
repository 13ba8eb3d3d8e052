"""Bank, ATM and card roles: registration, user-to-ATM and three-share authentication.

The bank holds the base polynomial F (F(0) = 0).  An ATM holds the share
(atm_id, F(atm_id)); a user's card holds, sealed under the card/bank session
key, the share (user_id, F(user_id) + r) where r is a per-user secret kept by
the bank.  At authentication the bank lifts the ATM share by r and
interpolates it together with the user share and its own anchor (0, r).  The
three points lie on F + r only when every share is genuine.
"""

from __future__ import annotations

import enum
import hashlib
import hmac
import logging
import random
import threading
import time
from dataclasses import dataclass, field
from typing import Callable

from . import codec
from .codec import (
    AtmAssignId,
    AtmRegisterRequest,
    AtmRegisterResponse,
    AuthDecision,
    AuthzDecision,
    AuthzRequest,
    BankAuthRequest,
    CertFetch,
    CertFetchReply,
    Message,
    Reason,
    UserAssignId,
    UserAuthRequest,
    UserRegisterRequest,
    UserRegisterResponse,
    signing_bytes,
)
from .crypto import (
    Backend,
    Certificate,
    CertificateAuthority,
    KeyPair,
    OpenFailed,
    Role,
    SealedBox,
    SealMode,
    SessionKey,
    Signature,
    issue_certificate,
    verify_certificate,
)
from .field import (
    DuplicateAbscissa,
    FieldElement,
    Polynomial,
    SharePoint,
    interpolate,
    poly_eval,
    poly_shift,
)
from .store import AtmRecord, AuditEvent, AuditRecord, BankStore, UserPrivileges, UserRecord

log = logging.getLogger(__name__)

Clock = Callable[[], int]

DEFAULT_WINDOW_MS = 30_000
MAX_PIN_FAILURES = 3


def system_clock() -> int:
    return time.time_ns() // 1_000_000


class ManualClock:
    """Injectable clock for tests and ``--clock`` runs; ``step`` advances it per read."""

    def __init__(self, now: int, step: int = 0) -> None:
        self.now = now
        self.step = step
        self._lock = threading.Lock()

    def __call__(self) -> int:
        with self._lock:
            t = self.now
            self.now += self.step
            return t

    def advance(self, ms: int) -> None:
        with self._lock:
            self.now += ms


# -- errors -------------------------------------------------------------------


class ProtocolError(Exception):
    reason = "PROTOCOL_ERROR"


class BadCertificate(ProtocolError):
    reason = "BAD_CERTIFICATE"


class UnknownId(ProtocolError):
    reason = "UNKNOWN_ID"


class AlreadyRegistered(ProtocolError):
    reason = "ALREADY_REGISTERED"


class IdSpaceExhausted(ProtocolError):
    reason = "ID_SPACE_EXHAUSTED"


class BadPin(ProtocolError):
    reason = "BAD_PIN"


class CardLocked(BadPin):
    reason = "CARD_LOCKED"


class BadSignature(ProtocolError):
    reason = "BAD_SIGNATURE"


class Stale(ProtocolError):
    reason = "STALE"


class DecisionMismatch(ProtocolError):
    """A correctly signed decision that answers some other request."""

    reason = "REPLAY"


class UnknownUser(ProtocolError, KeyError):
    reason = "UNKNOWN_USER"


class UnexpectedMessage(ProtocolError):
    reason = "UNEXPECTED_MESSAGE"


# -- freshness ----------------------------------------------------------------


class Freshness(enum.Enum):
    OK = "OK"
    STALE = "STALE"
    REPLAY = "REPLAY"


@dataclass
class FreshnessPolicy:
    window_ms: int = DEFAULT_WINDOW_MS
    clock: Clock = system_clock

    def __post_init__(self) -> None:
        if self.window_ms <= 0:
            raise ValueError("freshness window must be positive")

    def is_fresh(self, t_s: int, now: int) -> bool:
        return abs(now - t_s) <= self.window_ms


class ReplayCache:
    """Seen (user_id, t_s) pairs; entries older than the window are dropped lazily."""

    def __init__(self) -> None:
        self._seen: dict[tuple[int, int], int] = {}

    def __contains__(self, key: tuple[int, int]) -> bool:
        return key in self._seen

    def __len__(self) -> int:
        return len(self._seen)

    def add(self, key: tuple[int, int], t_s: int) -> None:
        self._seen[key] = t_s

    def evict(self, now: int, window_ms: int) -> None:
        old = [k for k, t in self._seen.items() if now - t > window_ms]
        for k in old:
            del self._seen[k]


def check_freshness(
    policy: FreshnessPolicy, t_s: int, now: int, replay_key: tuple[int, int] | None = None,
    cache: ReplayCache | None = None,
) -> Freshness:
    if not policy.is_fresh(t_s, now):
        return Freshness.STALE
    if cache is not None and replay_key is not None and replay_key in cache:
        return Freshness.REPLAY
    return Freshness.OK


# -- bank ---------------------------------------------------------------------


@dataclass(frozen=True)
class AuthzResult:
    allowed: bool
    reason: Reason


class Bank:
    def __init__(
        self,
        backend: Backend,
        keypair: KeyPair,
        certificate: Certificate,
        ca_public: bytes,
        store: BankStore,
        policy: FreshnessPolicy | None = None,
        rng: random.Random | None = None,
    ) -> None:
        if store.modulus is None or store.polynomial is None:
            raise ValueError("store holds no base polynomial; initialise the deployment first")
        self.backend = backend
        self.keypair = keypair
        self.certificate = certificate
        self.ca_public = ca_public
        self.store = store
        self.policy = policy or FreshnessPolicy()
        self.rng = rng or random.SystemRandom()
        self.p = store.modulus
        self.F = Polynomial.from_ints(store.polynomial, self.p)
        if not self.F.is_base():
            raise ValueError("stored polynomial is not a base polynomial")
        self.replay_cache = ReplayCache()
        self._sessions: set[tuple[int, int, int]] = set()
        self._lock = store.lock

    # -- registration -----------------------------------------------------

    def assign_id(self, role: Role) -> int:
        with self._lock:
            ids = self.store.assigned_ids
            if len(ids) >= self.p - 1:
                raise IdSpaceExhausted("every nonzero field element is in use")
            while True:
                candidate = self.rng.randrange(1, self.p)
                if candidate not in ids:
                    break
            ids[candidate] = role.name
            self.store.save()
            return candidate

    def assign_atm(self) -> AtmAssignId:
        return AtmAssignId(self.assign_id(Role.ATM))

    def assign_user(self) -> UserAssignId:
        return UserAssignId(self.assign_id(Role.USER))

    def _check_registration(self, entity_id: int, role: Role, cert: Certificate, registered: dict) -> None:
        if self.store.assigned_ids.get(entity_id) != role.name:
            raise UnknownId(f"{role.name.lower()} id {entity_id} was not assigned by this bank")
        if entity_id in registered:
            raise AlreadyRegistered(f"{role.name.lower()} {entity_id} is already registered")
        if (
            not verify_certificate(cert, self.ca_public, self.backend)
            or cert.role is not role
            or cert.subject_id != entity_id
        ):
            raise BadCertificate("Bad certificate")

    def register_atm(self, m2: AtmRegisterRequest) -> AtmRegisterResponse:
        with self._lock:
            actors = {"atm_id": m2.atm_id}
            try:
                self._check_registration(m2.atm_id, Role.ATM, m2.atm_certificate, self.store.atms)
            except ProtocolError as exc:
                self.store.append_audit(AuditEvent.REGISTER_ATM, actors, reason=exc.reason)
                raise
            x = FieldElement(m2.atm_id, self.p)
            d_atm = SharePoint(x, poly_eval(self.F, x))
            box = self.backend.seal(m2.atm_certificate.subject_public, d_atm.to_bytes(), SealMode.PUBLIC_KEY)
            self.store.upsert_record(AtmRecord(m2.atm_id, m2.atm_certificate))
            self.store.append_audit(AuditEvent.REGISTER_ATM, actors)
            return AtmRegisterResponse(box)

    def register_user(
        self, m5: UserRegisterRequest, privileges: UserPrivileges | None = None
    ) -> UserRegisterResponse:
        with self._lock:
            actors = {"user_id": m5.user_id}
            try:
                self._check_registration(m5.user_id, Role.USER, m5.user_certificate, self.store.users)
                raw_key = self.backend.open(self.keypair.private, m5.sealed_session_key)
                if len(raw_key) != 32:
                    raise OpenFailed("session key must be 32 bytes")
            except (ProtocolError, OpenFailed) as exc:
                reason = getattr(exc, "reason", "OPEN_FAILED")
                self.store.append_audit(AuditEvent.REGISTER_USER, actors, reason=reason)
                raise
            k_s = SessionKey(raw_key)
            r = FieldElement(self.rng.randrange(0, self.p), self.p)
            x = FieldElement(m5.user_id, self.p)
            d_user = SharePoint(x, poly_eval(poly_shift(self.F, r), x))
            box = self.backend.seal(k_s, d_user.to_bytes(), SealMode.SYMMETRIC)
            self.store.upsert_record(
                UserRecord(m5.user_id, m5.user_certificate, r.value, k_s, privileges or UserPrivileges())
            )
            self.store.append_audit(AuditEvent.REGISTER_USER, actors)
            return UserRegisterResponse(box)

    # -- authentication ---------------------------------------------------

    def fetch_certificate(self, m8: CertFetch) -> CertFetchReply:
        rec = self.store.users.get(m8.user_id)
        return CertFetchReply(rec.certificate if rec else None)

    def _decide(self, m9: BankAuthRequest, now: int) -> Reason:
        atm = self.store.atms.get(m9.atm_id)
        if atm is None:
            return Reason.UNKNOWN_ATM
        user = self.store.users.get(m9.user_id)
        # an id with no certificate cannot validate the signature it claims
        if user is None:
            return Reason.BAD_SIGNATURE
        if not self.backend.verify(user.certificate.subject_public, signing_bytes(m9), m9.user_signature):
            return Reason.BAD_SIGNATURE
        key = (m9.user_id, m9.t_s)
        fresh = check_freshness(self.policy, m9.t_s, now, key, self.replay_cache)
        if fresh is Freshness.STALE:
            return Reason.STALE
        if fresh is Freshness.REPLAY:
            return Reason.REPLAY
        self.replay_cache.evict(now, self.policy.window_ms)
        self.replay_cache.add(key, m9.t_s)

        try:
            raw_user = self.backend.open(user.session_key, m9.sealed_d_user)
            raw_atm = self.backend.open(self.keypair.private, m9.sealed_d_atm_for_bank)
        except OpenFailed:
            return Reason.OPEN_FAILED
        try:
            d_user = SharePoint.from_bytes(raw_user, self.p)
            d_atm = SharePoint.from_bytes(raw_atm, self.p)
        except ValueError:
            return Reason.SHARE_MISMATCH
        if d_user.x.value != m9.user_id or d_atm.x.value != m9.atm_id:
            return Reason.SHARE_MISMATCH

        r = FieldElement(user.r_user, self.p)
        d_atm_lifted = SharePoint(d_atm.x, d_atm.y + r)
        anchor = SharePoint(FieldElement(0, self.p), r)
        try:
            candidate = interpolate(d_user, d_atm_lifted, anchor)
        except DuplicateAbscissa:
            return Reason.SHARE_MISMATCH
        if candidate != poly_shift(self.F, r):
            return Reason.SHARE_MISMATCH
        return Reason.ACCEPT

    def authenticate(self, m9: BankAuthRequest, now: int | None = None) -> AuthDecision:
        """Never raises on protocol grounds: every outcome is a signed decision."""
        with self._lock:
            if now is None:
                now = self.policy.clock()
            reason = self._decide(m9, now)
            accepted = reason is Reason.ACCEPT
            unsigned = AuthDecision(m9.user_id, m9.atm_id, m9.t_s, accepted, reason, Signature(b""))
            decision = codec.with_signature(unsigned, self.backend.sign(self.keypair.private, signing_bytes(unsigned)))
            actors = {"user_id": m9.user_id, "atm_id": m9.atm_id, "t_s": m9.t_s}
            if accepted:
                self._sessions.add((m9.user_id, m9.atm_id, m9.t_s))
                self.store.append_audit(AuditEvent.AUTH_ACCEPT, actors, m9.user_signature.bytes, timestamp=now)
            else:
                self.store.append_audit(
                    AuditEvent.AUTH_REJECT, actors, m9.user_signature.bytes, reason=reason.name, timestamp=now
                )
            log.info("auth user=%d atm=%d -> %s", m9.user_id, m9.atm_id, reason.name)
            return decision  # type: ignore[return-value]

    # -- authorization ----------------------------------------------------

    def authorize(self, user_id: int, amount: int, session: tuple[int, int] | None = None) -> AuthzResult:
        """Withdrawal-limit check.  ``session`` is (atm_id, t_s) of an accepted authentication."""
        with self._lock:
            user = self.store.users.get(user_id)
            if user is None:
                raise UnknownUser(user_id)
            actors = {"user_id": user_id, "amount": amount}
            if session is not None:
                actors.update(atm_id=session[0], t_s=session[1])
            if session is not None and (user_id, *session) not in self._sessions:
                result = AuthzResult(False, Reason.NOT_AUTHENTICATED)
            elif 0 <= amount <= user.privileges.withdrawal_limit:
                result = AuthzResult(True, Reason.ACCEPT)
            else:
                result = AuthzResult(False, Reason.LIMIT_EXCEEDED)
            event = AuditEvent.AUTHZ_ALLOW if result.allowed else AuditEvent.AUTHZ_DENY
            self.store.append_audit(event, actors, reason=None if result.allowed else result.reason.name)
            return result

    def handle_authz(self, req: AuthzRequest) -> AuthzDecision:
        with self._lock:
            atm = self.store.atms.get(req.atm_id)
            if atm is None or not self.backend.verify(
                atm.certificate.subject_public, signing_bytes(req), req.atm_signature
            ):
                # as with users, an unknown id has no key that could have signed this
                reason = Reason.BAD_SIGNATURE
                self.store.append_audit(
                    AuditEvent.AUTHZ_DENY,
                    {"user_id": req.user_id, "atm_id": req.atm_id, "amount": req.amount},
                    req.atm_signature.bytes,
                    reason=reason.name,
                )
                result = AuthzResult(False, reason)
            else:
                try:
                    result = self.authorize(req.user_id, req.amount, (req.atm_id, req.t_s))
                except UnknownUser:
                    self.store.append_audit(
                        AuditEvent.AUTHZ_DENY,
                        {"user_id": req.user_id, "atm_id": req.atm_id, "amount": req.amount},
                        reason=Reason.UNKNOWN_USER.name,
                    )
                    result = AuthzResult(False, Reason.UNKNOWN_USER)
            unsigned = AuthzDecision(
                req.user_id, req.atm_id, req.t_s, req.amount, result.allowed, result.reason, Signature(b"")
            )
            sig = self.backend.sign(self.keypair.private, signing_bytes(unsigned))
            return codec.with_signature(unsigned, sig)  # type: ignore[return-value]

    def verify_evidence(self, record: AuditRecord) -> bool:
        """Re-check the user signature kept as evidence in an authentication record.

        Needs only the stored certificate, never the user's private key.
        """
        user = self.store.users.get(record.actors.get("user_id", -1))
        if user is None or record.event not in (AuditEvent.AUTH_ACCEPT, AuditEvent.AUTH_REJECT):
            return False
        claim = UserAuthRequest(
            record.actors["user_id"], record.actors["t_s"], Signature(record.evidence), SealedBox(SealMode.SYMMETRIC, b"")
        )
        return self.backend.verify(user.certificate.subject_public, signing_bytes(claim), claim.user_signature)

    def handle(self, msg: Message) -> Message:
        if isinstance(msg, CertFetch):
            return self.fetch_certificate(msg)
        if isinstance(msg, BankAuthRequest):
            return self.authenticate(msg)
        if isinstance(msg, AuthzRequest):
            return self.handle_authz(msg)
        raise UnexpectedMessage(f"bank does not serve {msg.name}")

    def handle_frame(self, frame: bytes) -> bytes | None:
        """Decode, serve, encode.  Malformed or unexpected frames get no reply."""
        try:
            msg = codec.decode(frame)
            return codec.encode(self.handle(msg))
        except (codec.DecodeError, UnexpectedMessage) as exc:
            log.warning("dropping frame: %s", exc)
            return None


# -- ATM ----------------------------------------------------------------------


@dataclass
class Atm:
    atm_id: int
    keypair: KeyPair
    certificate: Certificate
    ca_public: bytes
    bank_certificate: Certificate
    backend: Backend
    p: int
    policy: FreshnessPolicy = field(default_factory=FreshnessPolicy)
    d_atm: SharePoint | None = None

    def registration_request(self) -> AtmRegisterRequest:
        return AtmRegisterRequest(self.atm_id, self.certificate)

    def complete_registration(self, m3: AtmRegisterResponse) -> None:
        share = SharePoint.from_bytes(self.backend.open(self.keypair.private, m3.sealed_d_atm), self.p)
        if share.x.value != self.atm_id:
            raise BadCertificate("bank returned a share for another ATM")
        self.d_atm = share

    def handle_user(self, m7: UserAuthRequest, user_cert: Certificate | None, now: int | None = None) -> BankAuthRequest:
        if self.d_atm is None:
            raise ProtocolError("ATM is not registered")
        if user_cert is None:
            raise BadSignature(f"no certificate for claimed user {m7.user_id}")
        if not verify_certificate(user_cert, self.ca_public, self.backend) or user_cert.role is not Role.USER:
            raise BadCertificate("user certificate not issued by the deployment CA")
        if user_cert.subject_id != m7.user_id:
            raise BadSignature("signature not bound to the claimed user id")
        if not self.backend.verify(user_cert.subject_public, signing_bytes(m7), m7.user_signature):
            raise BadSignature("user signature does not verify")
        if now is None:
            now = self.policy.clock()
        if not self.policy.is_fresh(m7.t_s, now):
            raise Stale(f"timestamp {m7.t_s} outside window at {now}")
        sealed_atm = self.backend.seal(
            self.bank_certificate.subject_public, self.d_atm.to_bytes(), SealMode.PUBLIC_KEY
        )
        return BankAuthRequest(m7.user_id, self.atm_id, m7.t_s, m7.user_signature, m7.sealed_d_user, sealed_atm)

    def _verify_bank_frame(self, frame: bytes, expect: type[Message]) -> Message:
        cls, signed, sig = codec.split_signed(frame)
        if cls is not expect:
            raise UnexpectedMessage(f"expected {expect.__name__}, got {cls.__name__}")
        if not self.backend.verify(self.bank_certificate.subject_public, signed, sig):
            raise BadSignature("bank signature does not verify")
        return codec.decode(frame)

    def check_decision(self, frame: bytes, request: BankAuthRequest) -> AuthDecision:
        """Verify the bank's signature before trusting any decoded field.

        A signed rejection is honoured even when its fields differ from the
        request (the bank echoes what it received, which may have been
        altered in flight); only an acceptance must answer this exact request.
        """
        decision = self._verify_bank_frame(frame, AuthDecision)
        assert isinstance(decision, AuthDecision)
        answered = (decision.user_id, decision.atm_id, decision.t_s)
        if decision.accepted and answered != (request.user_id, request.atm_id, request.t_s):
            raise DecisionMismatch("decision answers a different request")
        return decision

    def authz_request(self, user_id: int, t_s: int, amount: int) -> AuthzRequest:
        unsigned = AuthzRequest(user_id, self.atm_id, t_s, amount, Signature(b""))
        sig = self.backend.sign(self.keypair.private, signing_bytes(unsigned))
        return codec.with_signature(unsigned, sig)  # type: ignore[return-value]

    def check_authz(self, frame: bytes, request: AuthzRequest) -> AuthzDecision:
        decision = self._verify_bank_frame(frame, AuthzDecision)
        assert isinstance(decision, AuthzDecision)
        if decision.allowed and (decision.user_id, decision.atm_id, decision.t_s, decision.amount) != (
            request.user_id, request.atm_id, request.t_s, request.amount
        ):
            raise DecisionMismatch("authorization answers a different request")
        return decision


# -- card ---------------------------------------------------------------------

PIN_ITERATIONS = 50_000


def pin_digest(pin: str, salt: bytes, iterations: int = PIN_ITERATIONS) -> bytes:
    return hashlib.pbkdf2_hmac("sha256", pin.encode(), salt, iterations)


@dataclass
class Card:
    user_id: int
    keypair: KeyPair
    certificate: Certificate
    session_key: SessionKey
    sealed_d_user: SealedBox | None
    pin_salt: bytes
    pin_digest: bytes
    backend: Backend
    pin_iterations: int = PIN_ITERATIONS
    failures: int = field(default=0, compare=False)

    def verify_pin(self, pin: str) -> None:
        if self.failures >= MAX_PIN_FAILURES:
            raise CardLocked("card locked after repeated PIN failures")
        if not hmac.compare_digest(pin_digest(pin, self.pin_salt, self.pin_iterations), self.pin_digest):
            self.failures += 1
            if self.failures >= MAX_PIN_FAILURES:
                raise CardLocked("card locked after repeated PIN failures")
            raise BadPin("PIN rejected")
        self.failures = 0

    def begin_session(self, pin: str, now: int) -> UserAuthRequest:
        self.verify_pin(pin)
        if self.sealed_d_user is None:
            raise ProtocolError("card is not registered")
        unsigned = UserAuthRequest(self.user_id, now, Signature(b""), self.sealed_d_user)
        sig = self.backend.sign(self.keypair.private, signing_bytes(unsigned))
        return codec.with_signature(unsigned, sig)  # type: ignore[return-value]


# -- registration flows -------------------------------------------------------


def new_atm(
    bank: Bank, ca: CertificateAuthority, backend: Backend, policy: FreshnessPolicy | None = None, rng=None
) -> Atm:
    """Run the ATM registration exchange in-process and return the registered ATM."""
    m1 = bank.assign_atm()
    kp = backend.generate_keypair(rng)
    cert = issue_certificate(ca, kp.public, m1.atm_id, Role.ATM, backend)
    atm = Atm(m1.atm_id, kp, cert, ca.keypair.public, bank.certificate, backend, bank.p, policy or bank.policy)
    m3 = bank.register_atm(atm.registration_request())
    atm.complete_registration(m3)
    return atm


def new_card(
    bank: Bank,
    ca: CertificateAuthority,
    backend: Backend,
    pin: str,
    withdrawal_limit: int = 0,
    rng=None,
    pin_iterations: int = PIN_ITERATIONS,
) -> Card:
    """Run the user registration exchange in-process and return the issued card."""
    m4 = bank.assign_user()
    kp = backend.generate_keypair(rng)
    cert = issue_certificate(ca, kp.public, m4.user_id, Role.USER, backend)
    k_s = backend.new_session_key()
    sealed_key = backend.seal(bank.certificate.subject_public, k_s.bytes, SealMode.PUBLIC_KEY)
    m6 = bank.register_user(UserRegisterRequest(m4.user_id, cert, sealed_key), UserPrivileges(withdrawal_limit))
    salt = backend.randbytes(16) if rng is None else rng.randbytes(16)
    return Card(
        m4.user_id, kp, cert, k_s, m6.sealed_d_user, salt, pin_digest(pin, salt, pin_iterations), backend,
        pin_iterations,
    )

