"""Attack drills and declarative scenario files.

A scenario file is plain text, one directive per line (``#`` starts a
comment, values are shell-quoted)::

    scenario replay
    deployment seed=7 backend=test window=30000
    clock 1700000000000
    atm a1
    user u1 pin=1234 limit=50000
    session a1 u1 pin=1234 as=first
    advance 10
    session a1 u1 pin=1234 script="replay:0" as=second
    expect first accepted
    expect second rejected reason=REPLAY
    expect detections REPLAY=1

Frames are indexed across the whole run in capture order.  One honest
session captures five frames: M7, M8, M8R, M9, M10 (plus the two
authorization frames when ``amount=`` is given).
"""

from __future__ import annotations

import json
import random
import shlex
import tempfile
from collections import Counter
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

from . import codec
from .adversary import Adversary, Deliver, Inject, Replay, ScriptError, Tamper, parse_script
from .codec import BankAuthRequest, UserAuthRequest
from .crypto import Role, SealMode, Signature, issue_certificate
from .deployment import Deployment
from .field import DEFAULT_MODULUS, FieldElement, SharePoint
from .protocol import Atm, Bank, Card, ManualClock, new_atm, new_card
from .session import SessionOutcome, run_session

DETECTIONS = ("REPLAY", "STALE", "BAD_SIGNATURE", "SHARE_MISMATCH")
DEFAULT_START_MS = 1_700_000_000_000
LAB_PIN = "2468"

# byte offsets inside an encoded M9: header(6) | user_id(8) | atm_id(8) | t_s(8) | ...
M9_TS_OFFSET = 6 + 8 + 8
# inside an encoded M10: header(6) | user_id | atm_id | t_s | accepted(1) | reason(1) | ...
M10_ACCEPTED_OFFSET = 6 + 24


class ParseError(ValueError):
    def __init__(self, line: int, message: str) -> None:
        super().__init__(f"line {line}: {message}")
        self.line = line


class UnknownAttack(ValueError):
    pass


@dataclass
class ScenarioReport:
    scenario: str
    steps: list[dict] = field(default_factory=list)
    decisions: list[str] = field(default_factory=list)
    detections: dict[str, int] = field(default_factory=lambda: {k: 0 for k in DETECTIONS})
    transcript_digest: str = ""
    passed: bool = False
    failures: list[str] = field(default_factory=list)
    findings: dict[str, Any] = field(default_factory=dict)

    def record(self, label: str, outcome: SessionOutcome) -> None:
        self.steps.append({"step": label, **outcome.as_dict()})
        self.decisions.append(outcome.reason)
        if not outcome.accepted:
            self.detections[outcome.reason] = self.detections.get(outcome.reason, 0) + 1

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True, separators=(",", ":"))


class Lab:
    """An in-process bank with an adversary on every hop.

    Holds the bank open for its lifetime; use as a context manager.
    """

    def __init__(self, deployment: Deployment, clock: ManualClock, durable: bool = False) -> None:
        self.deployment = deployment
        self.clock = clock
        self._ctx = deployment.bank(clock=clock, durable=durable, label="lab")
        self.bank: Bank = self._ctx.__enter__()
        self.ca = deployment.ca()
        self.adversary = Adversary(clock=clock)
        self._n = 0

    def close(self) -> None:
        self._ctx.__exit__(None, None, None)

    def __enter__(self) -> "Lab":
        return self

    def __exit__(self, *exc: object) -> None:
        self.close()

    def _backend(self, label: str):
        self._n += 1
        return self.deployment.backend("lab", label, self._n, self.bank.store.audit_count)

    def add_atm(self) -> Atm:
        return new_atm(self.bank, self.ca, self._backend("atm"), self.bank.policy)

    def add_user(self, pin: str = LAB_PIN, limit: int = 0) -> Card:
        return new_card(self.bank, self.ca, self._backend("card"), pin, limit, pin_iterations=1_000)

    def session(self, atm: Atm, card: Card, pin: str = LAB_PIN, script=(), amount: int | None = None) -> SessionOutcome:
        self.adversary.set_script(script)
        return run_session(
            card,
            atm,
            pin,
            self.adversary.link(self.bank.handle_frame),
            self.clock,
            card_link=self.adversary.one_way("card->atm"),
            amount=amount,
        )

    def d_user_plaintext(self, card: Card) -> bytes:
        return card.backend.open(card.session_key, card.sealed_d_user)


# -- attack drills ------------------------------------------------------------


def _attack_replay(lab: Lab, report: ScenarioReport) -> bool:
    atm, card = lab.add_atm(), lab.add_user()
    base = len(lab.adversary.transcript.entries)
    honest = lab.session(atm, card)
    report.record("honest", honest)
    m7_index, m9_index = base, base + 3

    lab.clock.advance(10)
    replay_m7 = lab.session(atm, card, script=[Replay(m7_index)])
    report.record("replay-M7", replay_m7)

    lab.clock.advance(10)
    replay_m9 = lab.session(atm, card, script=[Deliver(), Deliver(), Deliver(), Replay(m9_index)])
    report.record("replay-M9", replay_m9)

    lab.clock.advance(lab.bank.policy.window_ms + 1)
    stale = lab.session(atm, card, script=[Replay(m7_index)])
    report.record("replay-after-window", stale)

    return (
        honest.accepted
        and not any(o.accepted for o in (replay_m7, replay_m9, stale))
        and report.detections["REPLAY"] >= 1
    )


def _attack_tamper(lab: Lab, report: ScenarioReport) -> bool:
    atm, card = lab.add_atm(), lab.add_user()
    lab.clock.advance(1)
    t_m9 = lab.session(atm, card, script=[Deliver(), Deliver(), Deliver(), Tamper(M9_TS_OFFSET + 7, 0x01)])
    report.record("tamper-M9-timestamp", t_m9)
    lab.clock.advance(1)
    t_m9_id = lab.session(atm, card, script=[Deliver(), Deliver(), Deliver(), Tamper(6, 0x80)])
    report.record("tamper-M9-user-id", t_m9_id)
    lab.clock.advance(1)
    t_m7 = lab.session(atm, card, script=[Tamper(6 + 8 + 7, 0x04)])
    report.record("tamper-M7-timestamp", t_m7)
    lab.clock.advance(1)
    t_m10 = lab.session(
        atm, card, script=[Deliver(), Deliver(), Deliver(), Deliver(), Tamper(M10_ACCEPTED_OFFSET, 0x01)]
    )
    report.record("tamper-M10-decision", t_m10)
    outcomes = (t_m9, t_m9_id, t_m7, t_m10)
    return all(not o.accepted and o.reason == "BAD_SIGNATURE" for o in outcomes)


def _attack_impersonate(lab: Lab, report: ScenarioReport) -> bool:
    atm, card = lab.add_atm(), lab.add_user()
    be = lab._backend("mallory")
    rogue = be.generate_keypair()

    # a stranger's key claiming the victim's user id
    lab.clock.advance(1)
    now = lab.clock()
    forged = UserAuthRequest(card.user_id, now, Signature(b""), card.sealed_d_user)
    forged = codec.with_signature(forged, be.sign(rogue.private, codec.signing_bytes(forged)))
    out_user = lab.session(atm, card, script=[Inject(codec.encode(forged))])
    report.record("impersonate-user", out_user)

    # a rogue ATM claiming a registered atm_id, guessing its share
    lab.clock.advance(1)
    rng = random.Random(lab.clock())
    p = lab.bank.p
    fake_share = SharePoint(FieldElement(atm.atm_id, p), FieldElement(rng.randrange(p), p))
    fake_cert = issue_certificate(lab.ca, rogue.public, atm.atm_id, Role.ATM, be)  # never registered
    rogue_atm = Atm(atm.atm_id, rogue, fake_cert, atm.ca_public, atm.bank_certificate, be, p, atm.policy, fake_share)
    out_atm = lab.session(rogue_atm, card)
    report.record("impersonate-atm", out_atm)

    # a rogue ATM forwarding a forged M9 with its own signature in place of the user's
    lab.clock.advance(1)
    m9 = BankAuthRequest(
        card.user_id, atm.atm_id, lab.clock(), be.sign(rogue.private, b"x" * 16), card.sealed_d_user,
        be.seal(atm.bank_certificate.subject_public, fake_share.to_bytes(), SealMode.PUBLIC_KEY),
    )
    out_m9 = lab.session(atm, card, script=[Deliver(), Deliver(), Deliver(), Inject(codec.encode(m9))])
    report.record("impersonate-m9", out_m9)

    outcomes = (out_user, out_atm, out_m9)
    return all(not o.accepted and o.reason in ("BAD_SIGNATURE", "SHARE_MISMATCH") for o in outcomes)


def _attack_eavesdrop(lab: Lab, report: ScenarioReport, sessions: int = 5) -> bool:
    atm = lab.add_atm()
    cards = [lab.add_user(limit=10_000) for _ in range(2)]
    secrets: list[bytes] = [atm.d_atm.to_bytes()]  # type: ignore[union-attr]
    ok = True
    for i in range(sessions):
        lab.clock.advance(1)
        card = cards[i % len(cards)]
        out = lab.session(atm, card, amount=100)
        report.record(f"observe-{i}", out)
        ok = ok and out.accepted
    secrets += [lab.d_user_plaintext(c) for c in cards]
    hits = sum(1 for s in secrets for f in lab.adversary.transcript.frames() if s in f)
    report.findings["plaintext_share_hits"] = hits
    report.findings["frames_scanned"] = len(lab.adversary.transcript.frames())
    return ok and hits == 0


ATTACKS = {
    "replay": _attack_replay,
    "tamper": _attack_tamper,
    "impersonate": _attack_impersonate,
    "eavesdrop": _attack_eavesdrop,
}


def run_attack(deployment: Deployment, kind: str, clock: ManualClock | None = None) -> ScenarioReport:
    if kind not in ATTACKS:
        raise UnknownAttack(f"unknown attack {kind!r}; choose from {', '.join(ATTACKS)}")
    clock = clock or ManualClock(DEFAULT_START_MS)
    report = ScenarioReport(f"attack:{kind}")
    with Lab(deployment, clock) as lab:
        report.passed = ATTACKS[kind](lab, report)
        report.transcript_digest = lab.adversary.transcript.digest()
    return report


# -- scenario files -----------------------------------------------------------


@dataclass
class _Step:
    line: int
    verb: str
    args: list[str]
    opts: dict[str, str]


def _split_line(line: str, lineno: int) -> tuple[str, list[str], dict[str, str]] | None:
    try:
        toks = shlex.split(line, comments=True)
    except ValueError as exc:
        raise ParseError(lineno, str(exc)) from None
    if not toks:
        return None
    args, opts = [], {}
    for tok in toks[1:]:
        if "=" in tok:
            k, _, v = tok.partition("=")
            opts[k] = v
        else:
            args.append(tok)
    return toks[0].lower(), args, opts


_ARITY = {"scenario": 1, "deployment": 0, "clock": 1, "advance": 1, "atm": 1, "user": 1, "session": 2}
_OPTS: dict[str, set[str] | None] = {
    "scenario": set(), "deployment": {"seed", "backend", "modulus", "window"}, "clock": set(), "advance": set(),
    "atm": set(), "user": {"pin", "limit"}, "session": {"pin", "amount", "script", "as"},
    "expect": None,
}


def parse_scenario(text: str) -> list[_Step]:
    steps = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        parsed = _split_line(line, lineno)
        if parsed is None:
            continue
        verb, args, opts = parsed
        if verb not in _OPTS:
            raise ParseError(lineno, f"unknown directive {verb!r}")
        allowed = _OPTS[verb]
        unknown = set() if allowed is None else set(opts) - allowed
        if unknown:
            raise ParseError(lineno, f"unknown option(s) {', '.join(sorted(unknown))} for {verb}")
        if verb in _ARITY and len(args) != _ARITY[verb]:
            raise ParseError(lineno, f"{verb} takes {_ARITY[verb]} argument(s)")
        if verb in ("clock", "advance") and not args[0].isdigit():
            raise ParseError(lineno, f"{verb} needs a non-negative integer")
        if verb == "expect":
            if len(args) < 1:
                raise ParseError(lineno, "expect needs a target")
            if args[0] == "detections":
                bad = [k for k, v in opts.items() if not v.isdigit()]
                if bad or not opts:
                    raise ParseError(lineno, "expect detections KIND=N ...")
            elif len(args) != 2 or args[1] not in ("accepted", "rejected") or set(opts) - {"reason", "authz"}:
                raise ParseError(lineno, "expect <session> accepted|rejected [reason=X] [authz=X]")
        if verb == "session" and "script" in opts:
            try:
                parse_script(opts["script"])
            except ScriptError as exc:
                raise ParseError(lineno, str(exc)) from None
        if verb == "session" and "pin" not in opts:
            raise ParseError(lineno, "session needs pin=")
        if verb == "user" and "pin" not in opts:
            raise ParseError(lineno, "user needs pin=")
        for key in ("limit", "amount", "seed", "modulus", "window"):
            if key in opts and not opts[key].isdigit():
                raise ParseError(lineno, f"{key} must be a non-negative integer")
        steps.append(_Step(lineno, verb, args, opts))
    if not steps or steps[0].verb != "scenario":
        raise ParseError(steps[0].line if steps else 1, "file must start with 'scenario <name>'")
    return steps


def run_scenario_text(text: str, workdir: str | Path | None = None) -> ScenarioReport:
    steps = parse_scenario(text)
    report = ScenarioReport(steps[0].args[0])
    dep_opts: dict[str, str] = {}
    start = DEFAULT_START_MS
    for st in steps[1:]:
        if st.verb == "deployment":
            dep_opts.update(st.opts)
        if st.verb == "clock":
            start = int(st.args[0])

    with tempfile.TemporaryDirectory(prefix="sfamss-scn-") as tmp:
        root = Path(workdir or tmp) / "deployment"
        dep = Deployment.init(
            root,
            seed=int(dep_opts.get("seed", 0)),
            backend=dep_opts.get("backend", "test"),
            modulus=int(dep_opts.get("modulus", DEFAULT_MODULUS)),
            window_ms=int(dep_opts.get("window", 30_000)),
            durable=False,
        )
        clock = ManualClock(start)
        atms: dict[str, Atm] = {}
        cards: dict[str, tuple[Card, str]] = {}
        outcomes: dict[str, SessionOutcome] = {}
        with Lab(dep, clock) as lab:
            for st in steps[1:]:
                if st.verb == "advance":
                    clock.advance(int(st.args[0]))
                elif st.verb == "atm":
                    atms[st.args[0]] = lab.add_atm()
                elif st.verb == "user":
                    cards[st.args[0]] = (lab.add_user(st.opts["pin"], int(st.opts.get("limit", 0))), st.opts["pin"])
                elif st.verb == "session":
                    a, u = st.args
                    if a not in atms:
                        raise ParseError(st.line, f"unknown atm {a!r}")
                    if u not in cards:
                        raise ParseError(st.line, f"unknown user {u!r}")
                    label = st.opts.get("as", f"s{len(outcomes) + 1}")
                    script = parse_script(st.opts.get("script", ""))
                    amount = int(st.opts["amount"]) if "amount" in st.opts else None
                    try:
                        out = lab.session(atms[a], cards[u][0], st.opts["pin"], script, amount)
                    except ScriptError as exc:
                        raise ParseError(st.line, str(exc)) from None
                    outcomes[label] = out
                    report.record(label, out)
            report.transcript_digest = lab.adversary.transcript.digest()

        for st in steps[1:]:
            if st.verb != "expect":
                continue
            target = st.args[0]
            if target == "detections":
                for kind, n in st.opts.items():
                    if report.detections.get(kind, 0) < int(n):
                        report.failures.append(f"line {st.line}: expected {kind} >= {n}, saw {report.detections.get(kind, 0)}")
                continue
            if target not in outcomes:
                report.failures.append(f"line {st.line}: no session labelled {target!r}")
                continue
            out = outcomes[target]
            if out.accepted != (st.args[1] == "accepted"):
                report.failures.append(f"line {st.line}: {target} {'accepted' if out.accepted else 'rejected'}")
            if "reason" in st.opts and out.reason != st.opts["reason"]:
                report.failures.append(f"line {st.line}: {target} reason {out.reason} != {st.opts['reason']}")
            if "authz" in st.opts and (out.authz or "").split(":")[0] != st.opts["authz"]:
                report.failures.append(f"line {st.line}: {target} authz {out.authz} != {st.opts['authz']}")
    report.passed = not report.failures
    return report


def run_scenario(path: str | Path) -> ScenarioReport:
    return run_scenario_text(Path(path).read_text())


def bundled_scenarios() -> list[Path]:
    return sorted((Path(__file__).parent / "scenarios").glob("*.scn"))
