"""Shared domain types and the turn-identifier algebra.

Everything here is an immutable value with a canonical JSON form
(``to_dict`` / ``from_dict``). No I/O happens in this module.
"""

from __future__ import annotations

import json
import math
import re
from dataclasses import dataclass, field, replace
from datetime import datetime
from enum import Enum
from typing import Any, Iterable, Sequence

from .errors import InvariantViolation, MalformedId, MalformedTimestamp

TIMESTAMP_FORMAT = "%Y-%m-%dT%H:%M:%S"

_TURN_ID_RE = re.compile(r"D_\{([0-9]+):([0-9]+)\}")

# Accepted spellings on input; output is always TIMESTAMP_FORMAT.
_TIMESTAMP_PATTERNS = (
    (re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}"), "%Y-%m-%dT%H:%M:%S"),
    (re.compile(r"\d{4}-\d{2}-\d{2} \d{2}:\d{2}:\d{2}"), "%Y-%m-%d %H:%M:%S"),
    (re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}"), "%Y-%m-%dT%H:%M"),
    (re.compile(r"\d{4}-\d{2}-\d{2} \d{2}:\d{2}"), "%Y-%m-%d %H:%M"),
    (re.compile(r"\d{4}-\d{2}-\d{2}"), "%Y-%m-%d"),
)


def canonical_json(value: Any) -> str:
    """Serialize to the byte-stable JSON form used on disk and on the wire."""
    if hasattr(value, "to_dict"):
        value = value.to_dict()
    return json.dumps(value, sort_keys=True, separators=(",", ":"), ensure_ascii=False, allow_nan=False)


# --- time --------------------------------------------------------------------


def format_timestamp(ts: datetime | None) -> str | None:
    return None if ts is None else ts.strftime(TIMESTAMP_FORMAT)


def parse_timestamp(text: str) -> datetime:
    """Parse one of the normalized time spellings into a naive datetime.

    Minute-precision input is widened with ``:00``; a bare date maps to
    midnight.
    """
    if not isinstance(text, str):
        raise MalformedTimestamp(f"timestamp must be text, got {type(text).__name__}")
    candidate = text.strip()
    for pattern, fmt in _TIMESTAMP_PATTERNS:
        if pattern.fullmatch(candidate):
            try:
                return datetime.strptime(candidate, fmt)
            except ValueError as exc:
                raise MalformedTimestamp(f"invalid calendar value {text!r}") from exc
    raise MalformedTimestamp(f"unrecognized timestamp {text!r}")


def _seconds(ts: datetime | None) -> datetime | None:
    if ts is None:
        return None
    return ts.replace(microsecond=0, tzinfo=None)


# --- enums -------------------------------------------------------------------


class Speaker(str, Enum):
    USER = "user"
    ASSISTANT = "assistant"


class Granularity(str, Enum):
    RAW = "raw"
    FACT = "fact"
    EPISODE = "episode"


class Action(str, Enum):
    PASS = "Pass"
    RETRY = "Retry"
    REFRESH = "Refresh"


class RefreshAction(str, Enum):
    UPDATE = "Update"
    DELETE = "Delete"
    NOOP = "No-Op"


# --- identifiers -------------------------------------------------------------


@dataclass(frozen=True, order=True)
class TurnId:
    """The ``j``-th turn of session ``s``; orders lexicographically."""

    session: int
    turn: int

    def __post_init__(self):
        for name in ("session", "turn"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v < 0:
                raise MalformedId(f"{name} must be a non-negative integer, got {v!r}")

    def __str__(self) -> str:
        return format_turn_id(self)


def format_turn_id(t: TurnId) -> str:
    return f"D_{{{t.session}:{t.turn}}}"


def parse_turn_id(text: str) -> TurnId:
    if not isinstance(text, str):
        raise MalformedId(f"turn id must be text, got {type(text).__name__}")
    m = _TURN_ID_RE.fullmatch(text)
    if m is None:
        raise MalformedId(f"malformed turn id {text!r}")
    return TurnId(int(m.group(1)), int(m.group(2)))


# --- memory ------------------------------------------------------------------


@dataclass(frozen=True)
class MetaInfo:
    """When, where in the dialogue, and by whom a memory was produced.

    ``timestamp`` is None when the time is Unknown.
    """

    timestamp: datetime | None
    turn_id: TurnId
    speaker: Speaker

    def __post_init__(self):
        object.__setattr__(self, "timestamp", _seconds(self.timestamp))
        object.__setattr__(self, "speaker", Speaker(self.speaker))

    def to_dict(self) -> dict:
        return {
            "timestamp": format_timestamp(self.timestamp),
            "turn_id": format_turn_id(self.turn_id),
            "speaker": self.speaker.value,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MetaInfo":
        ts = d.get("timestamp")
        return cls(
            timestamp=None if ts is None else datetime.strptime(ts, TIMESTAMP_FORMAT),
            turn_id=parse_turn_id(d["turn_id"]),
            speaker=Speaker(d["speaker"]),
        )


@dataclass(frozen=True)
class MemoryEntry:
    """One stored memory at a single granularity.

    ``id`` and ``created_at`` are None until the store assigns them;
    ``embedding`` is empty until the entry is encoded.
    """

    granularity: Granularity
    content: str
    meta: MetaInfo
    relations: tuple[TurnId, ...] = ()
    title: str | None = None
    embedding: tuple[float, ...] = ()
    id: int | None = None
    created_at: int | None = None
    deleted: bool = False

    def __post_init__(self):
        object.__setattr__(self, "granularity", Granularity(self.granularity))
        object.__setattr__(self, "relations", tuple(self.relations))
        object.__setattr__(self, "embedding", tuple(float(x) for x in self.embedding))
        if not self.deleted and not (isinstance(self.content, str) and self.content.strip()):
            raise InvariantViolation("content must be non-empty unless deleted")
        if (self.title is not None) != (self.granularity is Granularity.EPISODE):
            raise InvariantViolation("title is present iff granularity is episode")
        if any(not isinstance(r, TurnId) for r in self.relations):
            raise InvariantViolation("relations must be TurnId values")
        if any(not math.isfinite(x) for x in self.embedding):
            raise InvariantViolation("embedding must be finite")

    def with_(self, **changes) -> "MemoryEntry":
        return replace(self, **changes)

    def to_dict(self) -> dict:
        return {
            "id": self.id,
            "granularity": self.granularity.value,
            "content": self.content,
            "title": self.title,
            "relations": [format_turn_id(r) for r in self.relations],
            "meta": self.meta.to_dict(),
            "embedding": list(self.embedding),
            "created_at": self.created_at,
            "deleted": self.deleted,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "MemoryEntry":
        return cls(
            id=d.get("id"),
            granularity=Granularity(d["granularity"]),
            content=d["content"],
            title=d.get("title"),
            relations=tuple(parse_turn_id(r) for r in d.get("relations", ())),
            meta=MetaInfo.from_dict(d["meta"]),
            embedding=tuple(d.get("embedding", ())),
            created_at=d.get("created_at"),
            deleted=bool(d.get("deleted", False)),
        )


# --- routing -----------------------------------------------------------------


@dataclass(frozen=True)
class IntentVector:
    b_fine: int
    b_abs: int
    b_event: int
    b_atomic: int
    k_dyn: int = 1

    def __post_init__(self):
        for name in ("b_fine", "b_abs", "b_event", "b_atomic"):
            v = getattr(self, name)
            if isinstance(v, bool):
                object.__setattr__(self, name, int(v))
            elif v not in (0, 1) or not isinstance(v, int):
                raise InvariantViolation(f"{name} must be 0 or 1, got {v!r}")
        if isinstance(self.k_dyn, bool) or not isinstance(self.k_dyn, int) or self.k_dyn < 1:
            raise InvariantViolation(f"k_dyn must be a positive integer, got {self.k_dyn!r}")

    @classmethod
    def from_bits(cls, bits: Sequence[int], k_dyn: int = 1) -> "IntentVector":
        if len(bits) != 4:
            raise InvariantViolation("intent vector has exactly four bits")
        return cls(*bits, k_dyn=k_dyn)

    @property
    def bits(self) -> tuple[int, int, int, int]:
        return (self.b_fine, self.b_abs, self.b_event, self.b_atomic)

    def to_dict(self) -> dict:
        return {
            "b_fine": self.b_fine,
            "b_abs": self.b_abs,
            "b_event": self.b_event,
            "b_atomic": self.b_atomic,
            "k_dyn": self.k_dyn,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "IntentVector":
        return cls(d["b_fine"], d["b_abs"], d["b_event"], d["b_atomic"], k_dyn=d["k_dyn"])


# --- verification / refresh --------------------------------------------------


@dataclass(frozen=True)
class JudgeVerdict:
    action: Action
    relevant: tuple[int, ...] = ()
    conflicts: tuple[int, ...] = ()
    reason: str = ""
    confidence: float = 1.0

    def __post_init__(self):
        object.__setattr__(self, "action", Action(self.action))
        object.__setattr__(self, "relevant", tuple(self.relevant))
        object.__setattr__(self, "conflicts", tuple(self.conflicts))
        if not 0.0 <= self.confidence <= 1.0:
            raise InvariantViolation(f"confidence out of [0,1]: {self.confidence!r}")
        if self.action is Action.REFRESH and not self.conflicts:
            raise InvariantViolation("Refresh requires a non-empty conflict set")
        if self.action is not Action.REFRESH and self.conflicts:
            raise InvariantViolation(f"{self.action.value} must carry no conflicts")

    def to_dict(self) -> dict:
        return {
            "action": self.action.value,
            "relevant": list(self.relevant),
            "conflicts": list(self.conflicts),
            "reason": self.reason,
            "confidence": self.confidence,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "JudgeVerdict":
        return cls(
            action=Action(d["action"]),
            relevant=tuple(d.get("relevant", ())),
            conflicts=tuple(d.get("conflicts", ())),
            reason=d.get("reason", ""),
            confidence=d.get("confidence", 1.0),
        )


@dataclass(frozen=True)
class RefreshPlan:
    action: RefreshAction
    edits: tuple[tuple[int, str], ...] = ()
    granularity: Granularity | None = None
    timestamp: datetime | None = None
    reason: str = ""

    def __post_init__(self):
        object.__setattr__(self, "action", RefreshAction(self.action))
        object.__setattr__(self, "edits", tuple((int(i), c) for i, c in self.edits))
        object.__setattr__(self, "timestamp", _seconds(self.timestamp))
        if self.action is RefreshAction.UPDATE:
            if not self.edits or any(not (c or "").strip() for _, c in self.edits):
                raise InvariantViolation("Update requires edits with non-empty content")
        elif self.action is RefreshAction.DELETE:
            if not self.edits:
                raise InvariantViolation("Delete requires at least one target id")
        elif self.edits:
            raise InvariantViolation("No-Op carries no edits")

    @property
    def target_ids(self) -> tuple[int, ...]:
        return tuple(i for i, _ in self.edits)

    def to_dict(self) -> dict:
        return {
            "action": self.action.value,
            "edits": [[i, c] for i, c in self.edits],
            "granularity": None if self.granularity is None else self.granularity.value,
            "timestamp": format_timestamp(self.timestamp),
            "reason": self.reason,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "RefreshPlan":
        g = d.get("granularity")
        ts = d.get("timestamp")
        return cls(
            action=RefreshAction(d["action"]),
            edits=tuple((i, c) for i, c in d.get("edits", ())),
            granularity=None if g is None else Granularity(g),
            timestamp=None if ts is None else datetime.strptime(ts, TIMESTAMP_FORMAT),
            reason=d.get("reason", ""),
        )


# --- dialogue ----------------------------------------------------------------


@dataclass(frozen=True)
class TurnRecord:
    turn_id: TurnId
    speaker: Speaker
    text: str
    timestamp_hint: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "speaker", Speaker(self.speaker))
        if not isinstance(self.text, str) or not self.text.strip():
            raise InvariantViolation("turn text must be non-empty")

    def render(self) -> str:
        return f"[{format_turn_id(self.turn_id)}] {self.speaker.value}: {self.text}"

    def to_dict(self) -> dict:
        return {
            "turn_id": format_turn_id(self.turn_id),
            "speaker": self.speaker.value,
            "text": self.text,
            "timestamp_hint": self.timestamp_hint,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "TurnRecord":
        return cls(parse_turn_id(d["turn_id"]), Speaker(d["speaker"]), d["text"], d.get("timestamp_hint"))


@dataclass(frozen=True)
class ContextWindow:
    """Short ordered buffer of the most recent turns."""

    capacity: int = 20
    recent: tuple[TurnRecord, ...] = field(default=())

    def __post_init__(self):
        object.__setattr__(self, "recent", tuple(self.recent))
        if isinstance(self.capacity, bool) or not isinstance(self.capacity, int) or self.capacity < 1:
            raise InvariantViolation("window capacity must be a positive integer")
        if len(self.recent) > self.capacity:
            raise InvariantViolation("window holds more turns than its capacity")
        ids = [t.turn_id for t in self.recent]
        if any(a >= b for a, b in zip(ids, ids[1:])):
            raise InvariantViolation("window turns must be strictly ordered by TurnId")

    def __len__(self) -> int:
        return len(self.recent)

    @property
    def saturated(self) -> bool:
        return len(self.recent) >= self.capacity

    @property
    def turn_ids(self) -> tuple[TurnId, ...]:
        return tuple(t.turn_id for t in self.recent)

    def push(self, turn: TurnRecord) -> "ContextWindow":
        """Append ``turn``, dropping the oldest turn when full."""
        recent = self.recent + (turn,)
        return ContextWindow(self.capacity, recent[-self.capacity:])

    def reset(self, keep: Iterable[TurnRecord] = ()) -> "ContextWindow":
        return ContextWindow(self.capacity, tuple(keep))

    def render(self) -> str:
        return "\n".join(t.render() for t in self.recent)

    def to_dict(self) -> dict:
        return {"capacity": self.capacity, "recent": [t.to_dict() for t in self.recent]}

    @classmethod
    def from_dict(cls, d: dict) -> "ContextWindow":
        return cls(d["capacity"], tuple(TurnRecord.from_dict(t) for t in d.get("recent", ())))
