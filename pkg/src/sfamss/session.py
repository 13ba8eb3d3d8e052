"""One card-at-the-ATM session, transport-agnostic.

``bank_link`` is any callable that carries one request frame to the bank and
returns the reply frame (``None`` when nothing came back).  In-process runs
use ``Bank.handle_frame``; networked runs use ``net.BankClient.exchange``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

from . import codec
from .codec import CertFetch, CertFetchReply, UserAuthRequest
from .protocol import Atm, BadPin, BadSignature, Card, Clock, DecisionMismatch, ProtocolError

Link = Callable[[bytes], "bytes | None"]


@dataclass
class SessionOutcome:
    accepted: bool
    reason: str
    stage: str
    user_id: int | None = None
    atm_id: int | None = None
    t_s: int | None = None
    authz: str | None = None

    def as_dict(self) -> dict:
        return asdict(self)


def _reject(reason: str, stage: str, **ids) -> SessionOutcome:
    return SessionOutcome(False, reason, stage, **ids)


def run_session(
    card: Card,
    atm: Atm,
    pin: str,
    bank_link: Link,
    clock: Clock,
    card_link: Link | None = None,
    amount: int | None = None,
) -> SessionOutcome:
    ids = {"atm_id": atm.atm_id}
    try:
        m7 = card.begin_session(pin, clock())
    except BadPin as exc:
        return _reject(exc.reason, "card", user_id=card.user_id, **ids)

    frame = codec.encode(m7)
    if card_link is not None:
        frame = card_link(frame)
        if frame is None:
            return _reject("DROPPED", "card->atm", user_id=card.user_id, **ids)
    try:
        m7 = codec.decode(frame)
    except codec.DecodeError:
        return _reject("MALFORMED", "atm", user_id=card.user_id, **ids)
    if not isinstance(m7, UserAuthRequest):
        return _reject("MALFORMED", "atm", user_id=card.user_id, **ids)
    ids.update(user_id=m7.user_id, t_s=m7.t_s)

    reply = bank_link(codec.encode(CertFetch(m7.user_id)))
    if reply is None:
        return _reject("DROPPED", "bank", **ids)
    try:
        m8r = codec.decode(reply)
    except codec.DecodeError:
        return _reject("MALFORMED", "atm", **ids)
    if not isinstance(m8r, CertFetchReply):
        return _reject("MALFORMED", "atm", **ids)

    try:
        m9 = atm.handle_user(m7, m8r.user_certificate, clock())
    except ProtocolError as exc:
        return _reject(exc.reason, "atm", **ids)

    reply = bank_link(codec.encode(m9))
    if reply is None:
        return _reject("DROPPED", "bank", **ids)
    try:
        decision = atm.check_decision(reply, m9)
    except (BadSignature, DecisionMismatch, ProtocolError) as exc:
        return _reject(exc.reason, "atm", **ids)
    except codec.DecodeError:
        return _reject("MALFORMED", "atm", **ids)

    outcome = SessionOutcome(decision.accepted, decision.reason.name, "bank", **ids)
    if decision.accepted and amount is not None:
        req = atm.authz_request(m7.user_id, m7.t_s, amount)
        reply = bank_link(codec.encode(req))
        if reply is None:
            outcome.authz = "DROPPED"
        else:
            try:
                az = atm.check_authz(reply, req)
                outcome.authz = "AUTHZ_ALLOW" if az.allowed else f"AUTHZ_DENY:{az.reason.name}"
            except (ProtocolError, codec.DecodeError) as exc:
                outcome.authz = f"AUTHZ_ERROR:{getattr(exc, 'reason', type(exc).__name__)}"
    return outcome
