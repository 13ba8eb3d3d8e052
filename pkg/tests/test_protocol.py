import random

import pytest

from oracles import eval_power_sum
from worlds import PIN, build_world
from sfamss import codec
from sfamss.codec import (
    AtmRegisterRequest,
    AuthDecision,
    CertFetch,
    CertFetchReply,
    Reason,
    UserAssignId,
    UserRegisterRequest,
)
from sfamss.crypto import CertificateAuthority, OpenFailed, Role, SealedBox, SealMode, Signature, TestBackend, issue_certificate
from sfamss.field import SharePoint
from sfamss.protocol import (
    AlreadyRegistered,
    Bank,
    BadCertificate,
    BadPin,
    BadSignature,
    CardLocked,
    DecisionMismatch,
    Freshness,
    FreshnessPolicy,
    IdSpaceExhausted,
    ManualClock,
    ReplayCache,
    Stale,
    UnexpectedMessage,
    UnknownId,
    UnknownUser,
    check_freshness,
)
from sfamss.session import run_session
from sfamss.store import AuditEvent, UserPrivileges, derive_storage_key, open_store


@pytest.fixture
def world(tmp_path):
    w = build_world(tmp_path)
    yield w
    w.close()


def _session(w, pin=PIN, amount=None):
    return run_session(w.card, w.atm, pin, w.bank.handle_frame, w.clock, amount=amount)


# -- clocks and freshness ---------------------------------------------------------


def test_manual_clock_step_and_advance():
    c = ManualClock(100, step=5)
    assert [c(), c(), c()] == [100, 105, 110]
    c.advance(1000)
    assert c() == 1115


@pytest.mark.parametrize("delta,expected", [(0, True), (1000, True), (1001, False), (-1000, True), (-1001, False)])
def test_window_is_inclusive_and_symmetric(delta, expected):
    policy = FreshnessPolicy(1000)
    assert policy.is_fresh(50_000 - delta, 50_000) is expected


def test_window_must_be_positive():
    with pytest.raises(ValueError):
        FreshnessPolicy(0)


def test_check_freshness_and_cache():
    policy, cache = FreshnessPolicy(100), ReplayCache()
    assert check_freshness(policy, 1000, 1050, (1, 1000), cache) is Freshness.OK
    cache.add((1, 1000), 1000)
    assert check_freshness(policy, 1000, 1050, (1, 1000), cache) is Freshness.REPLAY
    assert check_freshness(policy, 1000, 1200, (1, 1000), cache) is Freshness.STALE
    assert check_freshness(policy, 1000, 1050, (2, 1000), cache) is Freshness.OK
    cache.evict(1200, 100)
    assert len(cache) == 0


# -- registration ---------------------------------------------------------------------


def test_registration_records_and_audit(world):
    store = world.bank.store
    assert set(store.atms) == {5} and set(store.users) == {9}
    assert store.users[9].r_user == 7
    events = [r.event for r in store.read_audit()]
    assert events == [AuditEvent.REGISTER_ATM, AuditEvent.REGISTER_USER]


def test_assigned_ids_are_nonzero_and_distinct(tmp_path):
    w = build_world(tmp_path, p=2**61 - 1, atm_id=11, user_id=12)
    w.bank.rng = random.Random(3)
    ids = {w.bank.assign_user().user_id for _ in range(50)}
    assert len(ids) == 50 and 0 not in ids and not ids & {11, 12}
    w.close()


def test_id_space_exhaustion(tmp_path):
    w = build_world(tmp_path, p=5, coeffs=(0, 1, 1), atm_id=1, user_id=2, r=0)
    w.bank.rng = random.Random(1)
    w.bank.assign_atm()
    w.bank.assign_user()
    with pytest.raises(IdSpaceExhausted):
        w.bank.assign_user()
    w.close()


def test_register_unassigned_id(world):
    be = world.backend
    kp = be.generate_keypair()
    cert = issue_certificate(world.ca, kp.public, 44, Role.ATM, be)
    with pytest.raises(UnknownId):
        world.bank.register_atm(AtmRegisterRequest(44, cert))
    last = world.bank.store.read_audit()[-1]
    assert last.event is AuditEvent.REGISTER_ATM and last.reason == "UNKNOWN_ID"


def test_register_twice(world):
    with pytest.raises(AlreadyRegistered):
        world.bank.register_atm(AtmRegisterRequest(5, world.atm.certificate))


def test_register_with_bad_certificates(world):
    be = world.backend
    bank = world.bank
    atm_id = bank.assign_atm().atm_id
    kp = be.generate_keypair()
    rogue_ca = CertificateAuthority.create(be)
    bad = [
        issue_certificate(rogue_ca, kp.public, atm_id, Role.ATM, be),
        issue_certificate(world.ca, kp.public, atm_id, Role.USER, be),
        issue_certificate(world.ca, kp.public, 5, Role.ATM, be),
    ]
    for cert in bad:
        with pytest.raises(BadCertificate):
            bank.register_atm(AtmRegisterRequest(atm_id, cert))
    bank.register_atm(AtmRegisterRequest(atm_id, issue_certificate(world.ca, kp.public, atm_id, Role.ATM, be)))


def test_register_user_with_unopenable_key(world):
    be = world.backend
    user_id = world.bank.assign_user().user_id
    kp = be.generate_keypair()
    cert = issue_certificate(world.ca, kp.public, user_id, Role.USER, be)
    junk = SealedBox(SealMode.PUBLIC_KEY, b"\0" * 80)
    with pytest.raises(OpenFailed):
        world.bank.register_user(UserRegisterRequest(user_id, cert, junk))
    assert world.bank.store.read_audit()[-1].reason == "OPEN_FAILED"
    assert user_id not in world.bank.store.users


def test_atm_id_cannot_register_as_user(world):
    be = world.backend
    kp = be.generate_keypair()
    cert = issue_certificate(world.ca, kp.public, 5, Role.USER, be)
    box = be.seal(world.bank.certificate.subject_public, b"k" * 32, SealMode.PUBLIC_KEY)
    with pytest.raises(UnknownId):
        world.bank.register_user(UserRegisterRequest(5, cert, box))


# -- worked fixture ------------------------------------------------------------------


def test_worked_fixture_shares(world):
    p, F = 101, (0, 3, 2)
    assert world.atm.d_atm == SharePoint.of(5, eval_power_sum(F, 5, p), p) == SharePoint.of(5, 65, p)
    assert world.d_user() == SharePoint.of(9, (eval_power_sum(F, 9, p) + 7) % p, p) == SharePoint.of(9, 95, p)
    out = _session(world)
    assert out.accepted and out.reason == "ACCEPT"


# -- authentication ------------------------------------------------------------------


def test_honest_session_and_audit_evidence(world):
    out = _session(world)
    assert (out.accepted, out.user_id, out.atm_id) == (True, 9, 5)
    rec = world.bank.store.read_audit()[-1]
    assert rec.event is AuditEvent.AUTH_ACCEPT
    assert rec.actors == {"user_id": 9, "atm_id": 5, "t_s": out.t_s}
    assert world.bank.verify_evidence(rec)


def test_evidence_with_wrong_timestamp_fails(world):
    out = _session(world)
    rec = world.bank.store.read_audit()[-1]
    forged = type(rec)(rec.seq, rec.timestamp, rec.event, {**rec.actors, "t_s": out.t_s + 1}, rec.evidence, rec.prev_hash)
    assert not world.bank.verify_evidence(forged)
    reg = world.bank.store.read_audit()[0]
    assert not world.bank.verify_evidence(reg)


def test_unknown_atm(world):
    m9 = world.m9(world.clock())
    m9 = type(m9)(m9.user_id, 77, m9.t_s, m9.user_signature, m9.sealed_d_user, m9.sealed_d_atm_for_bank)
    assert world.bank.authenticate(m9).reason is Reason.UNKNOWN_ATM


def test_unknown_user_reports_bad_signature(world):
    m9 = world.m9(world.clock())
    m9 = type(m9)(88, m9.atm_id, m9.t_s, m9.user_signature, m9.sealed_d_user, m9.sealed_d_atm_for_bank)
    d = world.bank.authenticate(m9)
    assert (d.accepted, d.reason) == (False, Reason.BAD_SIGNATURE)


def test_forged_pairs_do_not_poison_replay_cache(world):
    t = world.clock()
    m9 = world.m9(t)
    forged = type(m9)(m9.user_id, m9.atm_id, t, Signature(b"\0" * 64), m9.sealed_d_user, m9.sealed_d_atm_for_bank)
    assert world.bank.authenticate(forged).reason is Reason.BAD_SIGNATURE
    assert world.bank.authenticate(m9).reason is Reason.ACCEPT


def test_open_failed(world):
    t = world.clock()
    m9 = world.m9(t)
    junk = SealedBox(SealMode.SYMMETRIC, b"\0" * 40)
    m9 = type(m9)(m9.user_id, m9.atm_id, t, m9.user_signature, junk, m9.sealed_d_atm_for_bank)
    assert world.bank.authenticate(m9).reason is Reason.OPEN_FAILED


def test_share_for_other_id_is_mismatch(world):
    t = world.clock()
    d = world.d_user()
    swapped = SharePoint(world.atm.d_atm.x, d.y)
    assert world.bank.authenticate(world.m9(t, d_user=swapped)).reason is Reason.SHARE_MISMATCH


def test_bank_freshness_boundary(world):
    now = world.clock.now
    assert world.bank.authenticate(world.m9(now - 30_000), now).reason is Reason.ACCEPT
    assert world.bank.authenticate(world.m9(now - 30_001), now).reason is Reason.STALE
    assert world.bank.authenticate(world.m9(now + 30_001), now).reason is Reason.STALE


def test_same_timestamp_twice_is_replay(world):
    t = world.clock()
    assert world.bank.authenticate(world.m9(t), t).reason is Reason.ACCEPT
    assert world.bank.authenticate(world.m9(t), t + 1).reason is Reason.REPLAY


def test_decision_signature_and_fields(world):
    t = world.clock()
    d = world.bank.authenticate(world.m9(t), t)
    assert world.backend.verify(world.bank.certificate.subject_public, codec.signing_bytes(d), d.bank_signature)
    assert (d.user_id, d.atm_id, d.t_s) == (9, 5, t)


# -- ATM side --------------------------------------------------------------------------


def test_atm_requires_certificate(world):
    m7 = world.card.begin_session(PIN, world.clock())
    with pytest.raises(BadSignature):
        world.atm.handle_user(m7, None)


def test_atm_rejects_foreign_ca_certificate(world):
    be = world.backend
    rogue_ca = CertificateAuthority.create(be)
    cert = issue_certificate(rogue_ca, world.card.keypair.public, 9, Role.USER, be)
    with pytest.raises(BadCertificate):
        world.atm.handle_user(world.card.begin_session(PIN, world.clock()), cert)


def test_atm_rejects_other_users_certificate(world):
    be = world.backend
    kp = be.generate_keypair()
    other = issue_certificate(world.ca, kp.public, 10, Role.USER, be)
    with pytest.raises(BadSignature):
        world.atm.handle_user(world.card.begin_session(PIN, world.clock()), other)


def test_atm_checks_freshness(world):
    m7 = world.card.begin_session(PIN, world.clock.now - 40_000)
    with pytest.raises(Stale):
        world.atm.handle_user(m7, world.card.certificate, world.clock.now)


def test_atm_rejects_accept_for_other_request(world):
    t = world.clock()
    m9a = world.atm.handle_user(world.card.begin_session(PIN, t), world.card.certificate, t)
    m9b = world.atm.handle_user(world.card.begin_session(PIN, t + 5), world.card.certificate, t + 5)
    reply_a = world.bank.handle_frame(codec.encode(m9a))
    assert world.atm.check_decision(reply_a, m9a).accepted
    with pytest.raises(DecisionMismatch):
        world.atm.check_decision(reply_a, m9b)


def test_atm_honours_signed_rejection_for_altered_request(world):
    t = world.clock()
    m9 = world.atm.handle_user(world.card.begin_session(PIN, t), world.card.certificate, t)
    altered = type(m9)(m9.user_id, m9.atm_id, t + 1, m9.user_signature, m9.sealed_d_user, m9.sealed_d_atm_for_bank)
    reply = world.bank.handle_frame(codec.encode(altered))
    decision = world.atm.check_decision(reply, m9)
    assert (decision.accepted, decision.reason) == (False, Reason.BAD_SIGNATURE)


def test_atm_rejects_unsigned_or_wrong_type(world):
    t = world.clock()
    m9 = world.atm.handle_user(world.card.begin_session(PIN, t), world.card.certificate, t)
    fake = AuthDecision(9, 5, t, True, Reason.ACCEPT, Signature(b"x" * 64))
    with pytest.raises(BadSignature):
        world.atm.check_decision(codec.encode(fake), m9)
    az = world.atm.authz_request(9, t, 10)
    with pytest.raises(UnexpectedMessage):
        world.atm.check_decision(codec.encode(az), m9)


# -- card -------------------------------------------------------------------------------


def test_bad_pin_then_lock(world):
    card = world.card
    for _ in range(2):
        with pytest.raises(BadPin) as exc:
            card.verify_pin("0000")
        assert not isinstance(exc.value, CardLocked)
    with pytest.raises(CardLocked):
        card.verify_pin("0000")
    with pytest.raises(CardLocked):
        card.verify_pin(PIN)


def test_correct_pin_resets_failures(world):
    card = world.card
    with pytest.raises(BadPin):
        card.verify_pin("0000")
    card.verify_pin(PIN)
    assert card.failures == 0


def test_bad_pin_session_never_reaches_bank(world):
    before = world.bank.store.audit_count
    out = _session(world, pin="9999")
    assert (out.accepted, out.reason, out.stage) == (False, "BAD_PIN", "card")
    assert world.bank.store.audit_count == before


# -- authorization ------------------------------------------------------------------


def test_authorization_limits(world):
    assert _session(world, amount=1000).authz == "AUTHZ_ALLOW"
    world.clock.advance(1)
    assert _session(world, amount=1001).authz == "AUTHZ_DENY:LIMIT_EXCEEDED"
    world.clock.advance(1)
    assert _session(world, amount=0).authz == "AUTHZ_ALLOW"


def test_authorization_requires_accepted_session(world):
    t = world.clock()
    req = world.atm.authz_request(9, t, 10)
    d = world.bank.handle_authz(req)
    assert (d.allowed, d.reason) == (False, Reason.NOT_AUTHENTICATED)


def test_authorization_signature_checked(world):
    out = _session(world)
    req = world.atm.authz_request(9, out.t_s, 10)
    forged = type(req)(req.user_id, req.atm_id, req.t_s, 5, req.atm_signature)
    assert world.bank.handle_authz(forged).reason is Reason.BAD_SIGNATURE
    unknown = type(req)(req.user_id, 999, req.t_s, 10, req.atm_signature)
    assert world.bank.handle_authz(unknown).reason is Reason.BAD_SIGNATURE
    assert world.bank.handle_authz(req).allowed


def test_authorize_direct(world):
    assert world.bank.authorize(9, 1000).allowed
    assert world.bank.authorize(9, 1001).reason is Reason.LIMIT_EXCEEDED
    with pytest.raises(UnknownUser):
        world.bank.authorize(12345, 1)


def test_zero_limit_user(tmp_path):
    w = build_world(tmp_path, limit=0)
    assert _session(w, amount=1).authz == "AUTHZ_DENY:LIMIT_EXCEEDED"
    w.close()


# -- bank dispatch ----------------------------------------------------------------------


def test_bank_serves_cert_fetch(world):
    reply = codec.decode(world.bank.handle_frame(codec.encode(CertFetch(9))))
    assert isinstance(reply, CertFetchReply) and reply.user_certificate == world.card.certificate
    reply = codec.decode(world.bank.handle_frame(codec.encode(CertFetch(1234))))
    assert reply.user_certificate is None


def test_bank_drops_garbage_and_unexpected(world):
    assert world.bank.handle_frame(b"nonsense") is None
    assert world.bank.handle_frame(codec.encode(UserAssignId(3))) is None
    with pytest.raises(UnexpectedMessage):
        world.bank.handle(UserAssignId(3))


def test_bank_refuses_non_base_polynomial(tmp_path):
    with open_store(tmp_path / "x.store", derive_storage_key(b"z" * 32)) as store:
        store.modulus, store.polynomial = 101, (1, 2, 3)
        be = TestBackend(seed=1)
        kp = be.generate_keypair()
        with pytest.raises(ValueError):
            Bank(be, kp, None, kp.public, store)
        store.polynomial = None
        with pytest.raises(ValueError):
            Bank(be, kp, None, kp.public, store)


def test_privileges_stored(world):
    assert world.bank.store.users[9].privileges == UserPrivileges(1000)
