"""Relevance gating and conflict detection over retrieved candidates."""

from __future__ import annotations

from typing import Sequence

from .constructor import render_entries
from .errors import ContractViolation
from .llm import Gateway
from .store import ScoredEntry
from .types import Action, ContextWindow, JudgeVerdict, TurnRecord


def verify(
    u: TurnRecord,
    candidates: Sequence[ScoredEntry],
    w: ContextWindow,
    gateway: Gateway,
) -> JudgeVerdict:
    """Return Pass, Retry or Refresh for ``candidates`` against ``u``.

    An empty candidate set is a Retry without consulting the model. Every
    id the model names must belong to the candidates; anything else is
    treated as a contract violation and retried by the gateway.
    """
    if not candidates:
        return JudgeVerdict(Action.RETRY, reason="no candidates retrieved", confidence=1.0)

    ids = [c.entry.id for c in candidates]
    known = set(ids)

    def check(out: dict) -> None:
        for key in ("relevant_ids", "conflict_ids"):
            stray = [i for i in out[key] or () if i not in known]
            if stray:
                raise ContractViolation(f"verdict: {key} names unknown ids {stray}", schema="verdict")

    out = gateway.call(
        gateway.prompts.jud,
        {
            "information": render_entries([c.entry for c in candidates]),
            "memory_window": w.render() or "(empty)",
            "user_input": u.text,
        },
        "verdict",
        check,
    )
    action = Action(out["Action"])
    relevant = out["relevant_ids"]
    if action is Action.PASS:
        return JudgeVerdict(action, tuple(ids if relevant is None else relevant), (), out["reason"], out["confidence"])
    if action is Action.REFRESH:
        return JudgeVerdict(
            action, tuple(ids if relevant is None else relevant), tuple(out["conflict_ids"]),
            out["reason"], out["confidence"],
        )
    return JudgeVerdict(action, tuple(relevant or ()), (), out["reason"], out["confidence"])
