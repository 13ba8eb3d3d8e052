import json
import os
import signal
import socket
import subprocess
import sys

import pytest

from sfamss.cli import main
from sfamss.deployment import Deployment
from sfamss.field import FieldElement, Polynomial, SharePoint, poly_eval, poly_shift

SEED = ["--seed", "42", "--backend", "test"]


def run(capsys, *argv):
    code = main(list(argv))
    out = capsys.readouterr().out
    return code, [json.loads(line) for line in out.splitlines() if line.startswith("{")]


@pytest.fixture
def dep_dir(tmp_path, capsys):
    d = tmp_path / "dep"
    assert run(capsys, "init", "--dir", str(d), *SEED)[0] == 0
    return d


def test_init_reports_clean_store(tmp_path, capsys):
    code, [report] = run(capsys, "init", "--dir", str(tmp_path / "d"), *SEED)
    assert code == 0 and report["audit_ok"] and report["audit_records"] == 0


def test_seeded_init_reproduces_polynomial(tmp_path, capsys):
    _, [a] = run(capsys, "init", "--dir", str(tmp_path / "a"), *SEED)
    _, [b] = run(capsys, "init", "--dir", str(tmp_path / "b"), *SEED)
    _, [c] = run(capsys, "init", "--dir", str(tmp_path / "c"), "--seed", "43", "--backend", "test")
    assert a["polynomial_digest"] == b["polynomial_digest"] != c["polynomial_digest"]
    with Deployment(tmp_path / "a").open_store() as sa, Deployment(tmp_path / "b").open_store() as sb:
        assert sa.polynomial == sb.polynomial


def test_init_nonempty_dir(dep_dir, capsys):
    code, [err] = run(capsys, "init", "--dir", str(dep_dir))
    assert code == 2 and err["type"] == "DirNotEmpty"


def test_env_var_default(dep_dir, capsys, monkeypatch):
    monkeypatch.setenv("SFAMSS_DIR", str(dep_dir))
    code, [rep] = run(capsys, "audit-verify")
    assert code == 0 and rep["ok"]


def test_missing_dir_is_usage_error(capsys, monkeypatch):
    monkeypatch.delenv("SFAMSS_DIR", raising=False)
    assert run(capsys, "audit-verify")[0] == 2


def test_bad_arguments(capsys):
    assert main(["nonsense"]) == 2
    assert main(["register", "wizard"]) == 2


def test_register_and_card_file(dep_dir, capsys):
    assert run(capsys, "register", "atm", "--dir", str(dep_dir))[0] == 0
    code, [u] = run(capsys, "register", "user", "--dir", str(dep_dir), "--pin", "1234", "--limit", "50")
    assert code == 0
    dep = Deployment(dep_dir)
    with dep.open_store() as store:
        assert len(store.atms) == 1 and len(store.users) == 1
        rec = store.users[u["user_id"]]
        card_bytes = open(u["file"], "rb").read()
        F = Polynomial.from_ints(store.polynomial, store.modulus)
        x = FieldElement(u["user_id"], store.modulus)
        d_user = SharePoint(x, poly_eval(poly_shift(F, FieldElement(rec.r_user, store.modulus)), x)).to_bytes()
    assert d_user not in card_bytes
    assert d_user.hex() not in card_bytes.decode()
    assert oct(os.stat(u["file"]).st_mode & 0o777) == "0o600"


def test_register_user_requires_pin(dep_dir, capsys):
    code, [err] = run(capsys, "register", "user", "--dir", str(dep_dir))
    assert code == 2 and err["type"] == "PinRequired"


def test_attack_commands(dep_dir, capsys):
    for kind in ("replay", "tamper", "impersonate", "eavesdrop"):
        code, [rep] = run(capsys, "attack", kind, "--dir", str(dep_dir), "--clock", "1700000000000")
        assert code == 0 and rep["passed"], rep
    code, [err] = run(capsys, "attack", "phish", "--dir", str(dep_dir))
    assert code == 2 and err["type"] == "UnknownAttack"


def test_scenario_command(tmp_path, capsys):
    code, reports = run(capsys, "scenario")
    assert code == 0 and reports and all(r["passed"] for r in reports)
    bad = tmp_path / "bad.scn"
    bad.write_text("scenario x\nteleport a b\n")
    code, [err] = run(capsys, "scenario", str(bad))
    assert code == 2 and "line 2" in err["message"]
    failing = tmp_path / "fail.scn"
    failing.write_text("scenario f\natm a\nuser u pin=1\nsession a u pin=1 as=s\nexpect s rejected\n")
    assert run(capsys, "scenario", str(failing))[0] == 1


def test_atm_without_daemon(dep_dir, capsys):
    run(capsys, "register", "atm", "--dir", str(dep_dir))
    run(capsys, "register", "user", "--dir", str(dep_dir), "--pin", "1234")
    code, [err] = run(capsys, "atm", "--dir", str(dep_dir), "--pin", "1234", "--port", "1", "--timeout", "1")
    assert code == 3 and err["error"] == "connectivity"
    code, [rep] = run(capsys, "atm", "--dir", str(dep_dir), "--pin", "0000", "--port", "1")
    assert code == 1 and rep["reason"] == "BAD_PIN" and rep["stage"] == "card"


def test_pin_lock_persists_across_invocations(dep_dir, capsys):
    run(capsys, "register", "atm", "--dir", str(dep_dir))
    run(capsys, "register", "user", "--dir", str(dep_dir), "--pin", "1234")
    reasons = [run(capsys, "atm", "--dir", str(dep_dir), "--pin", "0000", "--port", "1")[1][0]["reason"] for _ in range(3)]
    assert reasons == ["BAD_PIN", "BAD_PIN", "CARD_LOCKED"]
    code, [rep] = run(capsys, "atm", "--dir", str(dep_dir), "--pin", "1234", "--port", "1")
    assert code == 1 and rep["reason"] == "CARD_LOCKED"


def _serve(dep_dir):
    proc = subprocess.Popen(
        [sys.executable, "-m", "sfamss.cli", "serve", "--dir", str(dep_dir), "--port", "0"],
        stdout=subprocess.PIPE, stderr=subprocess.PIPE, text=True,
    )
    line = proc.stdout.readline()
    return proc, json.loads(line)["port"]


def test_serve_atm_and_clean_shutdown(dep_dir, capsys):
    run(capsys, "register", "atm", "--dir", str(dep_dir))
    run(capsys, "register", "user", "--dir", str(dep_dir), "--pin", "1234", "--limit", "100")
    proc, port = _serve(dep_dir)
    try:
        code, [ok] = run(capsys, "atm", "--dir", str(dep_dir), "--pin", "1234", "--port", str(port))
        assert code == 0 and ok["accepted"] and ok["reason"] == "ACCEPT"
        code, [deny] = run(capsys, "atm", "--dir", str(dep_dir), "--pin", "1234", "--port", str(port), "--amount", "101")
        assert code == 1 and deny["authz"] == "AUTHZ_DENY:LIMIT_EXCEEDED"
    finally:
        proc.send_signal(signal.SIGTERM)
        out, _ = proc.communicate(timeout=10)
    assert proc.returncode == 0
    final = json.loads(out.strip().splitlines()[-1])
    assert final["stopped"] and final["audit_ok"]
    code, lines = run(capsys, "audit-verify", "--dir", str(dep_dir), "--show")
    # two registrations, two authentications, one authorization
    assert code == 0 and lines[0]["ok"] and lines[0]["records"] == 5
    assert [line["audit"]["event"] for line in lines[1:]] == [
        "REGISTER_ATM", "REGISTER_USER", "AUTH_ACCEPT", "AUTH_ACCEPT", "AUTHZ_DENY",
    ]


def test_serve_port_in_use(dep_dir, capsys):
    with socket.socket() as squatter:
        squatter.bind(("127.0.0.1", 0))
        squatter.listen()
        port = squatter.getsockname()[1]
        code, [err] = run(capsys, "serve", "--dir", str(dep_dir), "--port", str(port))
    assert code == 3 and err["type"] == "PortInUse"


def test_second_daemon_on_same_store_refused(dep_dir, capsys):
    proc, _ = _serve(dep_dir)
    try:
        code, [err] = run(capsys, "serve", "--dir", str(dep_dir), "--port", "0")
        assert code == 2 and err["type"] == "StoreLocked"
    finally:
        proc.send_signal(signal.SIGINT)
        proc.communicate(timeout=10)


def test_audit_verify_detects_tamper(dep_dir, capsys):
    run(capsys, "register", "atm", "--dir", str(dep_dir))
    store = dep_dir / "bank.store"
    data = bytearray(store.read_bytes())
    data[-5] ^= 0x01
    store.write_bytes(bytes(data))
    code, [rep] = run(capsys, "audit-verify", "--dir", str(dep_dir))
    assert code == 1 and not rep["ok"]
