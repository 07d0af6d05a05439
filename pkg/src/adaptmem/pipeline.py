"""One conversational turn end to end.

Retriever -> Judge -> (bounded Retry loop | one Refresh) -> Constructor ->
response. ``MemoryEngine`` owns the store, the gateway and the open
sessions; each ``Session`` carries its own context window.
"""

from __future__ import annotations

import logging
import threading
import time
from dataclasses import dataclass, field
from datetime import datetime
from enum import Enum
from typing import Callable

from . import constructor, judge, refresher, retriever
from .errors import GatewayError, MalformedTimestamp
from .llm import CallUsage, Gateway, total_usage
from .prompts import render_prompt
from .store import MemoryStore, ScoredEntry
from .types import (
    Action,
    ContextWindow,
    JudgeVerdict,
    MemoryEntry,
    RefreshPlan,
    Speaker,
    TurnId,
    TurnRecord,
    format_timestamp,
    format_turn_id,
    parse_timestamp,
)

logger = logging.getLogger(__name__)


class Mode(str, Enum):
    FULL_INFERENCE = "full_inference"
    RETRIEVAL_ONLY = "retrieval_only"


class Step(str, Enum):
    RETRIEVE = "Retrieve"
    RETRY = "Retry"
    REFRESH = "Refresh"
    CONSTRUCT = "Construct"
    RESPOND = "Respond"


@dataclass(frozen=True)
class PipelineConfig:
    k_r: int = 2
    k_min: int = 5
    window_capacity: int = 20
    mode: Mode = Mode.FULL_INFERENCE
    commit_queries: bool = False

    def __post_init__(self):
        object.__setattr__(self, "mode", Mode(self.mode))
        if self.k_r < 1:
            raise ValueError("k_r must be >= 1")
        if self.k_min < 1:
            raise ValueError("k_min must be >= 1")
        if self.window_capacity < 1:
            raise ValueError("window_capacity must be >= 1")


@dataclass
class TurnOutcome:
    turn_id: TurnId
    response: str | None
    validated: list[MemoryEntry]
    actions_taken: list[Step]
    rounds_used: int
    token_usage: list[CallUsage]
    latency: float
    evidence_validated: bool = True
    verdicts: list[JudgeVerdict] = field(default_factory=list)
    route: retriever.RouteResult | None = None
    refresh_plan: RefreshPlan | None = None
    committed_ids: list[int] = field(default_factory=list)
    episode_created: bool = False
    degraded: bool = False
    errors: list[str] = field(default_factory=list)

    @property
    def tokens(self) -> dict:
        return total_usage(self.token_usage)

    def to_dict(self, include_latency: bool = True) -> dict:
        d = {
            "turn_id": format_turn_id(self.turn_id),
            "response": self.response,
            "validated": [e.to_dict() for e in self.validated],
            "evidence_validated": self.evidence_validated,
            "actions_taken": [a.value for a in self.actions_taken],
            "rounds_used": self.rounds_used,
            "token_usage": {"calls": [c.to_dict() for c in self.token_usage], **self.tokens},
            "verdicts": [v.to_dict() for v in self.verdicts],
            "route": None if self.route is None else self.route.to_dict(),
            "refresh_plan": None if self.refresh_plan is None else self.refresh_plan.to_dict(),
            "committed_ids": list(self.committed_ids),
            "episode_created": self.episode_created,
            "degraded": self.degraded,
            "errors": list(self.errors),
        }
        if include_latency:
            d["latency"] = self.latency
        return d


@dataclass
class Session:
    id: int
    window: ContextWindow
    last_turn: TurnId | None = None
    lock: threading.Lock = field(default_factory=threading.Lock, repr=False, compare=False)

    def next_turn_id(self) -> TurnId:
        if self.last_turn is None:
            return TurnId(self.id, 0)
        return TurnId(self.id, self.last_turn.turn + 1)


@dataclass
class _Recall:
    validated: list[MemoryEntry]
    rounds: int
    route: retriever.RouteResult | None
    verdicts: list[JudgeVerdict]
    plan: RefreshPlan | None
    validated_ok: bool


def render_evidence(entries: list[MemoryEntry]) -> str:
    if not entries:
        return "(none)"
    newest_first = sorted(entries, key=lambda e: e.created_at or 0, reverse=True)
    lines = []
    for e in newest_first:
        ts = format_timestamp(e.meta.timestamp) or "unknown time"
        text = f"{e.title}: {e.content}" if e.title else e.content
        lines.append(f"- [{ts}] ({e.granularity.value}) {text}")
    return "\n".join(lines)


class MemoryEngine:
    """Runs the agent pipeline over a store for any number of sessions."""

    def __init__(
        self,
        store: MemoryStore,
        gateway: Gateway,
        config: PipelineConfig | None = None,
        *,
        clock: Callable[[], datetime] = datetime.now,
        timer: Callable[[], float] = time.perf_counter,
    ):
        self.store = store
        self.gateway = gateway
        self.config = config or PipelineConfig(k_min=store.config.k_min)
        self.clock = clock
        self.timer = timer
        self.sessions: dict[int, Session] = {}
        self._sessions_lock = threading.Lock()

    # --- sessions ------------------------------------------------------------

    def open_session(self, session_id: int | None = None) -> Session:
        with self._sessions_lock:
            if session_id is None:
                session_id = max(self.sessions, default=-1) + 1
            if session_id not in self.sessions:
                self.sessions[session_id] = Session(session_id, ContextWindow(self.config.window_capacity))
            return self.sessions[session_id]

    def session(self, session_id: int) -> Session:
        return self.sessions[session_id]

    # --- public API ----------------------------------------------------------

    def process_turn(self, session: Session, u: TurnRecord | str, *, mode: Mode | None = None,
                     speaker: Speaker = Speaker.USER, timestamp_hint: str | None = None) -> TurnOutcome:
        """Recall, verify, maintain, commit ``u`` to memory and (optionally) answer."""
        with session.lock:
            if isinstance(u, str):
                u = TurnRecord(session.next_turn_id(), speaker, u, timestamp_hint)
            if session.last_turn is not None and u.turn_id <= session.last_turn:
                raise ValueError(f"turn {u.turn_id} does not follow {session.last_turn}")
            return self._run(session, u, Mode(mode or self.config.mode), commit=True)

    def answer_query(self, session: Session, question: str, *, mode: Mode | None = None) -> TurnOutcome:
        """Answer ``question`` from memory without storing it (unless configured to)."""
        with session.lock:
            u = TurnRecord(session.next_turn_id(), Speaker.USER, question)
            return self._run(session, u, Mode(mode or self.config.mode), commit=self.config.commit_queries)

    # --- stages --------------------------------------------------------------

    def _now_for(self, u: TurnRecord) -> datetime:
        if u.timestamp_hint:
            try:
                return parse_timestamp(u.timestamp_hint)
            except MalformedTimestamp:
                logger.debug("ignoring unparseable timestamp hint %r", u.timestamp_hint)
        return self.clock()

    def _recall(self, u: TurnRecord, w: ContextWindow, actions: list[Step], now: datetime) -> _Recall:
        gw, store, cfg = self.gateway, self.store, self.config
        actions.append(Step.RETRIEVE)
        route = retriever.rewrite_and_classify(u, w, gw)
        q = retriever.query_vector(route, gw)
        pool: list[ScoredEntry] = retriever.retrieve(route, store, gw, cfg.k_min, q)
        verdicts: list[JudgeVerdict] = []
        rounds = 0
        while True:
            rounds += 1
            verdict = judge.verify(u, pool, w, gw)
            verdicts.append(verdict)
            by_id = {s.entry.id: s.entry for s in pool}
            if verdict.action is Action.PASS:
                return _Recall([by_id[i] for i in verdict.relevant], rounds, route, verdicts, None, True)
            if verdict.action is Action.REFRESH:
                actions.append(Step.REFRESH)
                conflicts = [by_id[i] for i in verdict.conflicts]
                relevant = [by_id[i] for i in verdict.relevant]
                plan = refresher.plan(conflicts, u, gw)
                validated = refresher.apply(plan, conflicts, store, gw, now, relevant)
                return _Recall(validated, rounds, route, verdicts, plan, True)
            actions.append(Step.RETRY)
            if rounds >= cfg.k_r:
                # Out of rounds: keep everything gathered, flagged unvalidated.
                return _Recall([s.entry for s in pool], rounds, route, verdicts, None, False)
            pool = retriever.retry_expand(pool, route, store, rounds, gw, cfg.k_min, q)

    def _construct(self, u: TurnRecord, w: ContextWindow, validated: list[MemoryEntry], now: datetime):
        gw = self.gateway
        fs = constructor.extract_facts(u, w, validated, gw)
        meta = constructor.assemble_meta(u, fs, now)
        entries = constructor.materialize(u, fs, meta)
        decision = constructor.check_trigger(u, w, gw)
        if decision.fire:
            reason = decision.reason if not decision.topic_summary else f"{decision.reason} ({decision.topic_summary})"
            draft = constructor.synthesize_episode(w, reason, gw)
            entries.append(constructor.episode_entry(draft, w))
        ids = constructor.encode_and_commit(entries, gw, self.store)
        return ids, bool(decision.fire)

    def _respond(self, u: TurnRecord, w: ContextWindow, validated: list[MemoryEntry]) -> str:
        prompt = render_prompt(
            self.gateway.prompts.respond,
            {"memory_window": w.render() or "(empty)", "evidence": render_evidence(validated), "question": u.text},
        )
        return self.gateway.complete_text(self.gateway.request(prompt, "response")).strip()

    def _run(self, session: Session, u: TurnRecord, mode: Mode, commit: bool) -> TurnOutcome:
        start = self.timer()
        w = session.window
        now = self._now_for(u)
        actions: list[Step] = []
        errors: list[str] = []
        degraded = False
        recall = _Recall([], 0, None, [], None, False)
        ids: list[int] = []
        episode = False
        response = None

        with self.gateway.track_usage() as calls:
            try:
                recall = self._recall(u, w, actions, now)
            except GatewayError as exc:
                logger.warning("recall degraded for %s: %s", u.turn_id, exc)
                degraded = True
                errors.append(f"{type(exc).__name__}: {exc}")

            if commit:
                if not degraded:
                    try:
                        ids, episode = self._construct(u, w, recall.validated, now)
                        actions.append(Step.CONSTRUCT)
                    except GatewayError as exc:
                        logger.warning("construction skipped for %s: %s", u.turn_id, exc)
                        degraded = True
                        errors.append(f"{type(exc).__name__}: {exc}")
                session.window = w.reset([u]) if episode else w.push(u)
                session.last_turn = u.turn_id

            if mode is Mode.FULL_INFERENCE:
                response = self._respond(u, w, recall.validated)
                actions.append(Step.RESPOND)

        return TurnOutcome(
            turn_id=u.turn_id,
            response=response,
            validated=recall.validated,
            actions_taken=actions,
            rounds_used=recall.rounds,
            token_usage=list(calls),
            latency=self.timer() - start,
            evidence_validated=recall.validated_ok,
            verdicts=recall.verdicts,
            route=recall.route,
            refresh_plan=recall.plan,
            committed_ids=ids,
            episode_created=episode,
            degraded=degraded,
            errors=errors,
        )
