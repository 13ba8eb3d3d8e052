"""Command-line front end: ``sfamss init|register|serve|atm|attack|scenario|audit-verify``.

Reports go to stdout as JSON lines.  Exit codes: 0 expected outcome,
1 protocol rejection, 2 usage or parse error, 3 connectivity.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import signal
import sys
import threading
from pathlib import Path
from typing import Sequence

from .deployment import Deployment, DeploymentError, PinRequired
from .field import DEFAULT_MODULUS
from .net import BankClient, BankServer, ConnectionFailed, PortInUse
from .protocol import DEFAULT_WINDOW_MS, ManualClock, ProtocolError, system_clock
from .scenario import ATTACKS, ParseError, UnknownAttack, bundled_scenarios, run_attack, run_scenario
from .session import run_session
from .store import StoreError

EXIT_OK, EXIT_REJECT, EXIT_USAGE, EXIT_CONN = 0, 1, 2, 3

log = logging.getLogger("sfamss")


def _emit(obj: dict) -> None:
    print(json.dumps(obj, sort_keys=True, separators=(",", ":")), flush=True)


def _clock(args: argparse.Namespace):
    return ManualClock(args.clock) if args.clock is not None else system_clock


def _deployment(args: argparse.Namespace) -> Deployment:
    if not args.dir:
        raise UsageError("no deployment directory: pass --dir or set SFAMSS_DIR")
    return Deployment(args.dir)


class UsageError(Exception):
    pass


# -- subcommands ---------------------------------------------------------------


def cmd_init(args: argparse.Namespace) -> int:
    if not args.dir:
        raise UsageError("no deployment directory: pass --dir or set SFAMSS_DIR")
    dep = Deployment.init(
        args.dir, seed=args.seed, backend=args.backend, modulus=args.modulus,
        window_ms=args.window, port=args.port or 7845,
    )
    with dep.open_store() as store:
        check = store.verify_audit_chain()
        coeffs = store.polynomial
    _emit({"command": "init", "dir": str(dep.root), "backend": dep.config.backend, "modulus": dep.config.modulus,
           "seed": args.seed, "audit_ok": check.ok, "audit_records": check.records,
           "polynomial_digest": _digest(coeffs)})
    return EXIT_OK


def _digest(coeffs) -> str:
    return hashlib.sha256(json.dumps(coeffs).encode()).hexdigest()[:16]


def cmd_register(args: argparse.Namespace) -> int:
    dep = _deployment(args)
    with dep.bank(clock=_clock(args)) as bank:
        if args.role == "atm":
            atm, path = dep.register_atm(bank)
            _emit({"command": "register", "role": "atm", "atm_id": atm.atm_id, "file": str(path)})
        else:
            card, path = dep.register_user(args.pin, args.limit, bank)
            _emit({"command": "register", "role": "user", "user_id": card.user_id, "file": str(path),
                   "withdrawal_limit": args.limit})
    return EXIT_OK


def cmd_serve(args: argparse.Namespace) -> int:
    dep = _deployment(args)
    port = args.port if args.port is not None else dep.config.bank_port
    stop = threading.Event()
    with dep.bank(clock=_clock(args)) as bank:
        server = BankServer(bank, dep.config.bank_host, port)
        for sig in (signal.SIGINT, signal.SIGTERM):
            signal.signal(sig, lambda *_: stop.set())
        server.start_background()
        _emit({"command": "serve", "host": dep.config.bank_host, "port": server.port, "pid": os.getpid()})
        try:
            stop.wait()
        finally:
            server.stop()
            check = bank.store.verify_audit_chain()
    _emit({"command": "serve", "stopped": True, "audit_ok": check.ok, "audit_records": check.records})
    return EXIT_OK


def _pick(files: list[Path], wanted: str | None, kind: str) -> Path:
    if wanted:
        return Path(wanted)
    if not files:
        raise UsageError(f"no {kind} files in deployment; register one first")
    return files[0]


def cmd_atm(args: argparse.Namespace) -> int:
    dep = _deployment(args)
    clock = _clock(args)
    atm = dep.load_atm(_pick(dep.atm_files(), args.atm, "atm"), clock)
    card_path = _pick(dep.card_files(), args.card, "card")
    card = dep.load_card(card_path)
    if args.pin is None:
        raise UsageError("--pin is required")

    # the PIN is checked before anything reaches the network
    before = card.failures
    try:
        card.verify_pin(args.pin)
    except ProtocolError as exc:
        dep.save_card(card)
        _emit({"command": "atm", "accepted": False, "reason": exc.reason, "stage": "card",
               "user_id": card.user_id, "atm_id": atm.atm_id})
        return EXIT_REJECT
    if card.failures != before:
        dep.save_card(card)

    host = args.host or dep.config.bank_host
    port = args.port if args.port is not None else dep.config.bank_port
    with BankClient(host, port, timeout=args.timeout) as client:
        outcome = run_session(card, atm, args.pin, client.exchange, clock, amount=args.amount)
    _emit({"command": "atm", **outcome.as_dict()})
    if not outcome.accepted:
        return EXIT_REJECT
    if outcome.authz is not None and outcome.authz != "AUTHZ_ALLOW":
        return EXIT_REJECT
    return EXIT_OK


def cmd_attack(args: argparse.Namespace) -> int:
    dep = _deployment(args)
    clock = ManualClock(args.clock) if args.clock is not None else None
    report = run_attack(dep, args.kind, clock)
    print(report.to_json(), flush=True)
    return EXIT_OK if report.passed else EXIT_REJECT


def cmd_scenario(args: argparse.Namespace) -> int:
    paths = [Path(f) for f in args.files] if args.files else bundled_scenarios()
    if args.list:
        for p in bundled_scenarios():
            print(p)
        return EXIT_OK
    code = EXIT_OK
    for path in paths:
        report = run_scenario(path)
        print(report.to_json(), flush=True)
        if not report.passed:
            code = EXIT_REJECT
    return code


def cmd_audit_verify(args: argparse.Namespace) -> int:
    dep = _deployment(args)
    with dep.open_store() as store:
        check = store.verify_audit_chain()
        _emit({"command": "audit-verify", "ok": check.ok, "broken_at": check.broken_at, "records": check.records})
        if args.show and check.ok:
            for rec in store.read_audit():
                _emit({"audit": json.loads(rec.body())})
    return EXIT_OK if check.ok else EXIT_REJECT


# -- parser ---------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--dir", default=os.environ.get("SFAMSS_DIR"), help="deployment directory [$SFAMSS_DIR]")
    common.add_argument("--clock", type=int, default=None, metavar="MS", help="fixed clock in epoch ms (test mode)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="sfamss", description="Three-share ATM authentication harness.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("init", parents=[common], help="create CA, bank keys and base polynomial")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--backend", choices=("rsa", "test"), default="rsa")
    p.add_argument("--modulus", type=int, default=DEFAULT_MODULUS)
    p.add_argument("--window", type=int, default=DEFAULT_WINDOW_MS, metavar="MS")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_init)

    p = sub.add_parser("register", parents=[common], help="register an ATM or issue a user card")
    p.add_argument("role", choices=("atm", "user"))
    p.add_argument("--pin")
    p.add_argument("--limit", type=int, default=0, help="withdrawal limit for a user")
    p.set_defaults(func=cmd_register)

    p = sub.add_parser("serve", parents=[common], help="run the bank daemon")
    p.add_argument("--port", type=int, default=None)
    p.set_defaults(func=cmd_serve)

    p = sub.add_parser("atm", parents=[common], help="run one card session against the bank daemon")
    p.add_argument("--atm", help="ATM state file (default: first registered)")
    p.add_argument("--card", help="card file (default: first issued)")
    p.add_argument("--pin")
    p.add_argument("--amount", type=int, default=None)
    p.add_argument("--host", default=None)
    p.add_argument("--port", type=int, default=None)
    p.add_argument("--timeout", type=float, default=10.0)
    p.set_defaults(func=cmd_atm)

    p = sub.add_parser("attack", parents=[common], help="run a scripted attack drill")
    p.add_argument("kind", help=" | ".join(ATTACKS))
    p.set_defaults(func=cmd_attack)

    p = sub.add_parser("scenario", parents=[common], help="run scenario files (default: bundled set)")
    p.add_argument("files", nargs="*")
    p.add_argument("--list", action="store_true", help="list bundled scenarios")
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("audit-verify", parents=[common], help="check the audit hash chain")
    p.add_argument("--show", action="store_true", help="also print decrypted records")
    p.set_defaults(func=cmd_audit_verify)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, stream=sys.stderr)
    try:
        return args.func(args)
    except (ConnectionFailed, PortInUse) as exc:
        _error(args, "connectivity", exc)
        return EXIT_CONN
    except ParseError as exc:
        _error(args, "parse", exc)
        return EXIT_USAGE
    except (UsageError, UnknownAttack, PinRequired, DeploymentError, FileNotFoundError) as exc:
        _error(args, "usage", exc)
        return EXIT_USAGE
    except ProtocolError as exc:
        _error(args, exc.reason, exc)
        return EXIT_REJECT
    except StoreError as exc:
        _error(args, "store", exc)
        return EXIT_USAGE


def _error(args: argparse.Namespace, kind: str, exc: Exception) -> None:
    _emit({"command": args.command, "error": kind, "type": type(exc).__name__, "message": str(exc)})
    print(f"sfamss: {exc}", file=sys.stderr)


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
