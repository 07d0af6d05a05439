"""Conflict resolution: turn a conflict set into edits and apply them."""

from __future__ import annotations

import logging
import re
from datetime import datetime
from typing import Sequence

from .constructor import render_entries
from .errors import ContractViolation
from .llm import Gateway
from .store import MemoryStore
from .types import Granularity, MemoryEntry, RefreshAction, RefreshPlan, TurnRecord, parse_timestamp

logger = logging.getLogger(__name__)

# Delete is only honoured when the user asks for it in so many words.
FORGET_RE = re.compile(
    r"\b(forget|delete|remove|erase|cancel(?:l?ed)?|invalidate|disregard|scratch that|"
    r"no longer (?:valid|true|applies)|don't remember|do not remember|wipe)\b",
    re.IGNORECASE,
)


def has_forget_instruction(text: str) -> bool:
    return FORGET_RE.search(text) is not None


def plan(conflicts: Sequence[MemoryEntry], u: TurnRecord, gateway: Gateway) -> RefreshPlan:
    """Ask the model how to resolve ``conflicts`` given the new input ``u``.

    Edits may only target conflict entries. A Delete without an explicit
    forget/cancel instruction in ``u`` is downgraded to No-Op.
    """
    if not conflicts:
        raise ValueError("plan needs at least one conflicting entry")
    known = {e.id for e in conflicts}

    def check(out: dict) -> None:
        stray = [i for i, _ in out["dataList"] if i not in known]
        if stray:
            raise ContractViolation(f"refresh: dataList names unknown ids {stray}", schema="refresh")

    out = gateway.call(
        gateway.prompts.ref,
        {"memory_entries": render_entries(conflicts), "user_input": u.text},
        "refresh",
        check,
    )
    action = RefreshAction(out["Action"])
    edits = tuple(dict(out["dataList"]).items())
    ts = None if out["timestamp"] == "empty" else parse_timestamp(out["timestamp"])
    granularity = Granularity(out["memory_type"]) if out["memory_type"] else None
    if action is RefreshAction.DELETE and not has_forget_instruction(u.text):
        logger.info("downgrading Delete to No-Op: no explicit forget instruction in %r", u.text)
        return RefreshPlan(RefreshAction.NOOP, (), granularity, ts, f"downgraded Delete: {out['reason']}")
    if action is RefreshAction.NOOP:
        edits = ()
    return RefreshPlan(action, edits, granularity, ts, out["reason"])


def apply(
    plan: RefreshPlan,
    conflicts: Sequence[MemoryEntry],
    store: MemoryStore,
    gateway: Gateway,
    now: datetime,
    relevant: Sequence[MemoryEntry] = (),
) -> list[MemoryEntry]:
    """Execute ``plan`` and return the consistent evidence set.

    Updates re-embed the new content and keep id, granularity, relations
    and speaker. Retention purging runs over the conflict ids every time.
    The result is the surviving conflict entries (post-edit) followed by
    untouched ``relevant`` entries, ordered by creation.
    """
    conflict_ids = [e.id for e in conflicts]
    known = set(conflict_ids)
    stray = [i for i in plan.target_ids if i not in known]
    if stray:
        raise ValueError(f"plan targets entries outside the conflict set: {stray}")

    if plan.action is RefreshAction.UPDATE:
        vectors = [gateway.embed_text(content) for _, content in plan.edits]
        store.apply_edits(
            [(i, content, vec, plan.timestamp) for (i, content), vec in zip(plan.edits, vectors)],
            [],
        )
    elif plan.action is RefreshAction.DELETE:
        store.apply_edits([], plan.target_ids)

    store.purge_expired(conflict_ids, now)

    seen: set[int] = set()
    out: list[MemoryEntry] = []
    for e in [*conflicts, *relevant]:
        if e.id in seen:
            continue
        seen.add(e.id)
        current = store.audit(e.id)
        if not current.deleted:
            out.append(current)
    return sorted(out, key=lambda e: e.created_at)
