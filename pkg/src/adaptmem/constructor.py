"""Turn dialogue into raw, fact and episode memories.

The flow for one turn is ``extract_facts`` -> ``assemble_meta`` ->
``materialize`` for the raw/fact batch, plus ``check_trigger`` and, when it
fires, ``synthesize_episode`` over the window that just closed. All
entries of a turn go through ``encode_and_commit`` together.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from datetime import datetime
from typing import Sequence

from .errors import EmptyWindow, InvariantViolation
from .llm import Gateway
from .store import MemoryStore
from .types import (
    ContextWindow,
    Granularity,
    MemoryEntry,
    MetaInfo,
    TurnId,
    TurnRecord,
    format_timestamp,
    format_turn_id,
    parse_timestamp,
)

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class FactSet:
    facts: tuple[str, ...]
    related: tuple[TurnId, ...] = ()
    timestamp_raw: str = "empty"

    def __post_init__(self):
        object.__setattr__(self, "facts", tuple(self.facts))
        object.__setattr__(self, "related", tuple(self.related))
        for f in self.facts:
            if not f.strip() or ";" in f:
                raise InvariantViolation(f"fact must be a single non-empty clause: {f!r}")


@dataclass(frozen=True)
class EpisodeDraft:
    title: str
    content: str
    timestamp: datetime

    def __post_init__(self):
        if not self.title.strip() or not self.content.strip():
            raise InvariantViolation("episode title and content must be non-empty")


@dataclass(frozen=True)
class TriggerDecision:
    fire: int
    reason: str = ""
    confidence: float = 1.0
    topic_summary: str = ""

    def __post_init__(self):
        if self.fire not in (0, 1):
            raise InvariantViolation("fire must be 0 or 1")
        if not self.fire and self.topic_summary:
            object.__setattr__(self, "topic_summary", "")


def render_entries(entries: Sequence[MemoryEntry]) -> str:
    """One line per entry, with the id the model must quote back."""
    if not entries:
        return "(none)"
    lines = []
    for e in entries:
        ts = format_timestamp(e.meta.timestamp) or "unknown time"
        head = f"[id={e.id}] ({e.granularity.value}, {ts}, {format_turn_id(e.meta.turn_id)})"
        body = f"{e.title}: {e.content}" if e.title else e.content
        lines.append(f"{head} {body}")
    return "\n".join(lines)


def _window_text(w: ContextWindow) -> str:
    return w.render() or "(empty)"


def extract_facts(
    u: TurnRecord,
    w: ContextWindow,
    validated: Sequence[MemoryEntry],
    gateway: Gateway,
) -> FactSet:
    """Decompose ``u`` into atomic facts plus the historical turns it relates to.

    Related ids are kept only if they name a turn visible to the model (in
    the window or on a validated memory) and do not lie after ``u``.
    """
    if not u.text.strip():
        raise ValueError("turn text must be non-empty")
    out = gateway.call(
        gateway.prompts.con,
        {
            "memory_window": _window_text(w),
            "retrieved_memory": render_entries(validated),
            "turn_id": format_turn_id(u.turn_id),
            "user_input": u.text,
        },
        "facts",
    )
    visible = set(w.turn_ids)
    for e in validated:
        visible.add(e.meta.turn_id)
        visible.update(e.relations)
    related = tuple(t for t in out["related_id"] if t in visible and t <= u.turn_id)
    return FactSet(tuple(out["facts"]), related, out["timestamp"])


def assemble_meta(u: TurnRecord, fs: FactSet, now: datetime) -> MetaInfo:
    """Build the meta-info: explicit time from the facts, else ``now``."""
    if fs.timestamp_raw.strip().lower() == "empty":
        ts = now
    else:
        ts = parse_timestamp(fs.timestamp_raw)
    return MetaInfo(ts, u.turn_id, u.speaker)


def materialize(u: TurnRecord, fs: FactSet, meta: MetaInfo) -> list[MemoryEntry]:
    raw = MemoryEntry(Granularity.RAW, u.text, meta, relations=fs.related)
    facts = [MemoryEntry(Granularity.FACT, f, meta, relations=fs.related) for f in fs.facts]
    return [raw, *facts]


def check_trigger(u: TurnRecord, w: ContextWindow, gateway: Gateway) -> TriggerDecision:
    """Decide whether ``u`` closes the current episode.

    Empty history never fires and skips the model call. A saturated window
    always fires, whatever the model says.
    """
    if not len(w):
        return TriggerDecision(0, "conversation history is empty", 1.0)
    out = gateway.call(
        gateway.prompts.tri,
        {"conversation_history": _window_text(w), "new_messages": u.render()},
        "trigger",
    )
    decision = TriggerDecision(out["T_t"], out["reason"], out["confidence"], out["topic_summary"])
    if w.saturated and not decision.fire:
        return TriggerDecision(1, f"context window saturated ({len(w)}/{w.capacity} turns)", 1.0,
                               out["topic_summary"] or "context window saturated")
    return decision


def synthesize_episode(w: ContextWindow, boundary_reason: str, gateway: Gateway) -> EpisodeDraft:
    if not len(w):
        raise EmptyWindow("cannot summarize an empty window")
    out = gateway.call(
        gateway.prompts.epi,
        {"conversation": w.render(), "boundary_reason": boundary_reason or "(unspecified)"},
        "episode",
    )
    return EpisodeDraft(out["title"], out["content"], parse_timestamp(out["timestamp"]))


def episode_entry(draft: EpisodeDraft, w: ContextWindow) -> MemoryEntry:
    """Unencoded episode entry covering every turn of ``w``."""
    last = w.recent[-1]
    meta = MetaInfo(draft.timestamp, last.turn_id, last.speaker)
    return MemoryEntry(Granularity.EPISODE, draft.content, meta, relations=w.turn_ids, title=draft.title)


def encode_and_commit(entries: Sequence[MemoryEntry], gateway: Gateway, store: MemoryStore) -> list[int]:
    """Embed each entry's core text and insert the batch atomically.

    Episodes are embedded from their narrative, never the title. Nothing
    is written unless every embedding succeeds.
    """
    encoded = [e.with_(embedding=gateway.embed_text(e.content).values) for e in entries]
    return store.insert_many(encoded)

