"""Scriptable in-process channel adversary.

Every frame crossing a hop is captured, then the next scripted action decides
what the receiver actually gets.  Once the script runs out, frames are
delivered untouched (or ``ScriptExhausted`` is raised in strict mode).
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Any, Callable, Iterable, Sequence, Union


class ScriptExhausted(RuntimeError):
    pass


class ScriptError(ValueError):
    pass


@dataclass(frozen=True)
class Deliver:
    pass


@dataclass(frozen=True)
class Drop:
    pass


@dataclass(frozen=True)
class Replay:
    index: int


@dataclass(frozen=True)
class Tamper:
    offset: int
    mask: int = 0x01


@dataclass(frozen=True)
class Inject:
    raw: bytes


Action = Union[Deliver, Drop, Replay, Tamper, Inject]


def parse_action(text: str) -> Action:
    """``deliver``, ``drop``, ``replay:N``, ``tamper:OFFSET[:MASK]``, ``inject:HEX``."""
    head, _, rest = text.strip().partition(":")
    head = head.lower()
    try:
        if head == "deliver" and not rest:
            return Deliver()
        if head == "drop" and not rest:
            return Drop()
        if head == "replay":
            return Replay(int(rest))
        if head == "tamper":
            off, _, mask = rest.partition(":")
            return Tamper(int(off, 0), int(mask, 0) if mask else 0x01)
        if head == "inject":
            return Inject(bytes.fromhex(rest))
    except ValueError as exc:
        raise ScriptError(f"bad action {text!r}: {exc}") from None
    raise ScriptError(f"unknown action {text!r}")


def parse_script(text: str) -> list[Action]:
    return [parse_action(tok) for tok in text.replace(",", " ").split()]


@dataclass(frozen=True)
class TranscriptEntry:
    index: int
    direction: str
    frame: bytes
    timestamp: int
    action: str
    delivered: bytes | None


@dataclass
class Transcript:
    entries: list[TranscriptEntry] = field(default_factory=list)
    result: Any = None

    def frames(self) -> list[bytes]:
        """Every byte string that crossed the wire, as sent and as delivered."""
        out = []
        for e in self.entries:
            out.append(e.frame)
            if e.delivered is not None and e.delivered != e.frame:
                out.append(e.delivered)
        return out

    def contains(self, needle: bytes) -> bool:
        return any(needle in f for f in self.frames())

    def digest(self) -> str:
        h = hashlib.sha256()
        for e in self.entries:
            h.update(e.direction.encode() + b"\0" + e.frame + b"\0" + (e.delivered or b""))
        return h.hexdigest()


class Adversary:
    def __init__(
        self, script: Iterable[Action] = (), strict: bool = False, clock: Callable[[], int] | None = None
    ) -> None:
        self.actions: list[Action] = list(script)
        self.cursor = 0
        self.strict = strict
        self.clock = clock or (lambda: 0)
        self.transcript = Transcript()

    def set_script(self, script: Iterable[Action]) -> None:
        """Replace the pending actions; captured frames stay addressable by index."""
        self.actions = list(script)
        self.cursor = 0

    @property
    def captured(self) -> list[bytes]:
        return [e.frame for e in self.transcript.entries]

    def _next_action(self) -> Action:
        if self.cursor < len(self.actions):
            action = self.actions[self.cursor]
            self.cursor += 1
            return action
        if self.strict:
            raise ScriptExhausted(f"no action for frame {len(self.transcript.entries)}")
        return Deliver()

    def intercept(self, direction: str, frame: bytes) -> bytes | None:
        index = len(self.transcript.entries)
        action = self._next_action()
        if isinstance(action, Deliver):
            out: bytes | None = frame
        elif isinstance(action, Drop):
            out = None
        elif isinstance(action, Replay):
            if not 0 <= action.index < index:
                raise ScriptError(f"replay of frame {action.index} before it was captured")
            out = self.transcript.entries[action.index].frame
        elif isinstance(action, Tamper):
            if not 0 <= action.offset < len(frame):
                raise ScriptError(f"tamper offset {action.offset} outside {len(frame)}-byte frame")
            buf = bytearray(frame)
            buf[action.offset] ^= action.mask & 0xFF
            out = bytes(buf)
        elif isinstance(action, Inject):
            out = action.raw
        else:  # pragma: no cover
            raise ScriptError(f"unknown action {action!r}")
        self.transcript.entries.append(
            TranscriptEntry(index, direction, frame, self.clock(), type(action).__name__.lower(), out)
        )
        return out

    def one_way(self, direction: str) -> Callable[[bytes], bytes | None]:
        return lambda frame: self.intercept(direction, frame)

    def link(
        self, inner: Callable[[bytes], bytes | None], out_dir: str = "atm->bank", in_dir: str = "bank->atm"
    ) -> Callable[[bytes], bytes | None]:
        """Wrap a request/response hop so both directions pass through the script."""

        def exchange(frame: bytes) -> bytes | None:
            sent = self.intercept(out_dir, frame)
            if sent is None:
                return None
            reply = inner(sent)
            if reply is None:
                return None
            return self.intercept(in_dir, reply)

        return exchange


def apply_adversary(
    script: Sequence[Action], session: Callable[[Adversary], Any], strict: bool = False,
    clock: Callable[[], int] | None = None,
) -> Transcript:
    """Run ``session`` with an adversary on every hop; the session's return value lands in ``result``."""
    adv = Adversary(script, strict=strict, clock=clock)
    adv.transcript.result = session(adv)
    return adv.transcript
