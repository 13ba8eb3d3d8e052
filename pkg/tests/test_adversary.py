import pytest

from sfamss.adversary import (
    Adversary,
    Deliver,
    Drop,
    Inject,
    Replay,
    ScriptError,
    ScriptExhausted,
    Tamper,
    apply_adversary,
    parse_action,
    parse_script,
)


def echo(frame):
    return b"re:" + frame


def test_parse_actions():
    assert parse_script("deliver drop replay:2 tamper:7 tamper:0x10:0x80 inject:beef") == [
        Deliver(), Drop(), Replay(2), Tamper(7, 1), Tamper(16, 0x80), Inject(b"\xbe\xef"),
    ]
    assert parse_script("deliver, DROP") == [Deliver(), Drop()]
    assert parse_script("") == []


@pytest.mark.parametrize("bad", ["replay", "replay:x", "tamper:", "inject:zz", "explode", "deliver:1"])
def test_parse_errors(bad):
    with pytest.raises(ScriptError):
        parse_action(bad)


def test_actions_on_link():
    # each exchange consumes one action for the request and one for the reply
    script = [Deliver(), Deliver(), Deliver(), Tamper(0, 0xFF), Drop(), Replay(0), Deliver(), Deliver(), Inject(b"evil")]
    adv = Adversary(script)
    link = adv.link(echo)
    assert link(b"a") == b"re:a"
    assert link(b"b") == bytes([ord("r") ^ 0xFF]) + b"e:b"
    assert link(b"c") is None
    assert link(b"d") == b"re:a"
    reply = link(b"e")
    assert reply == b"evil"
    assert adv.captured == [b"a", b"re:a", b"b", b"re:b", b"c", b"d", b"re:a", b"e", b"re:e"]


def test_transcript_records_directions_and_actions():
    adv = Adversary([Drop()], clock=lambda: 42)
    adv.one_way("card->atm")(b"x")
    e = adv.transcript.entries[0]
    assert (e.index, e.direction, e.frame, e.timestamp, e.action, e.delivered) == (0, "card->atm", b"x", 42, "drop", None)


def test_frames_include_delivered_variants():
    adv = Adversary([Tamper(0, 1)])
    adv.one_way("x")(b"\x00abc")
    assert adv.transcript.frames() == [b"\x00abc", b"\x01abc"]
    assert adv.transcript.contains(b"abc")
    assert not adv.transcript.contains(b"zzz")


def test_replay_of_future_frame_is_error():
    adv = Adversary([Replay(5)])
    with pytest.raises(ScriptError):
        adv.one_way("x")(b"a")


def test_tamper_offset_out_of_range():
    adv = Adversary([Tamper(10)])
    with pytest.raises(ScriptError):
        adv.one_way("x")(b"abc")


def test_strict_mode_exhaustion():
    adv = Adversary([Deliver()], strict=True)
    hop = adv.one_way("x")
    hop(b"a")
    with pytest.raises(ScriptExhausted):
        hop(b"b")


def test_default_is_deliver_after_script():
    adv = Adversary([Drop()])
    hop = adv.one_way("x")
    assert hop(b"a") is None
    assert hop(b"b") == b"b"


def test_set_script_keeps_history():
    adv = Adversary()
    hop = adv.one_way("x")
    hop(b"first")
    adv.set_script([Replay(0)])
    assert hop(b"second") == b"first"


def test_digest_is_stable():
    def run(adv):
        adv.link(echo)(b"a")
        return "done"

    t1 = apply_adversary([Deliver()], run)
    t2 = apply_adversary([Deliver()], run)
    t3 = apply_adversary([Tamper(0)], run)
    assert t1.result == "done"
    assert t1.digest() == t2.digest() != t3.digest()


def test_dropped_request_never_reaches_inner():
    calls = []
    adv = Adversary([Drop()])
    assert adv.link(lambda f: calls.append(f))(b"a") is None
    assert calls == []
