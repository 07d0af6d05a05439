"""Query rewriting, granularity routing and bounded similarity retrieval."""

from __future__ import annotations

from dataclasses import dataclass

from .llm import EmbeddingVector, Gateway
from .store import MemoryStore, ScoredEntry
from .types import ContextWindow, Granularity, IntentVector, TurnRecord

# Fallback order used by retry rounds.
FALLBACK_CYCLE = (Granularity.FACT, Granularity.RAW, Granularity.EPISODE)


@dataclass(frozen=True)
class RouteResult:
    rewritten: str
    intent: IntentVector
    target: Granularity
    model_memory_type: str | None = None

    def __post_init__(self):
        if not self.rewritten.strip():
            raise ValueError("rewritten query must be non-empty")
        if self.target is not route_granularity(self.intent):
            raise ValueError("target disagrees with the routing rule")

    def to_dict(self) -> dict:
        return {
            "rewritten": self.rewritten,
            "intent": self.intent.to_dict(),
            "target": self.target.value,
            "model_memory_type": self.model_memory_type,
        }


def route_granularity(b: IntentVector) -> Granularity:
    if b.b_fine:
        return Granularity.RAW
    if b.b_abs or b.b_event:
        return Granularity.EPISODE
    return Granularity.FACT


def effective_k(k_dyn: int, k_min: int) -> int:
    return max(k_dyn, k_min)


def rewrite_and_classify(u: TurnRecord, w: ContextWindow, gateway: Gateway) -> RouteResult:
    """Ask the model for a standalone query and intent bits; route locally.

    The model's own ``memory_type`` is kept for inspection only.
    """
    if not u.text.strip():
        raise ValueError("turn text must be non-empty")
    out = gateway.call(
        gateway.prompts.ret,
        {"memory_window": w.render() or "(empty)", "user_input": u.text},
        "route",
    )
    bits = out["intent_vector"]
    intent = IntentVector(bits["b_fine"], bits["b_abs"], bits["b_event"], bits["b_atomic"], k_dyn=out["K_dyn"])
    return RouteResult(out["rewrite_query"], intent, route_granularity(intent), out["memory_type"])


def query_vector(route: RouteResult, gateway: Gateway) -> EmbeddingVector:
    return gateway.embed_text(route.rewritten)


def retrieve(
    route: RouteResult,
    store: MemoryStore,
    gateway: Gateway,
    k_min: int,
    query_vec: EmbeddingVector | None = None,
) -> list[ScoredEntry]:
    q = query_vec if query_vec is not None else query_vector(route, gateway)
    return store.top_k(route.target, q, effective_k(route.intent.k_dyn, k_min))


def fallback_granularity(target: Granularity, round: int) -> Granularity:
    i = FALLBACK_CYCLE.index(target)
    return FALLBACK_CYCLE[(i + round) % len(FALLBACK_CYCLE)]


def retry_expand(
    prev: list[ScoredEntry],
    route: RouteResult,
    store: MemoryStore,
    round: int,
    gateway: Gateway,
    k_min: int,
    query_vec: EmbeddingVector | None = None,
) -> list[ScoredEntry]:
    """Widen the candidate pool for retry ``round`` (1-based).

    The result is ``prev`` plus the top-k of the next granularity in the
    fallback cycle plus every entry linked through the relations of
    ``prev``; each entry appears once, ranked by the same query vector.
    """
    if round < 1:
        raise ValueError("round must be >= 1")
    q = query_vec if query_vec is not None else query_vector(route, gateway)
    k = effective_k(route.intent.k_dyn, k_min)
    pool: dict[int, ScoredEntry] = {s.entry.id: s for s in prev}

    for s in store.top_k(fallback_granularity(route.target, round), q, k):
        pool.setdefault(s.entry.id, s)

    linked = {t for s in prev for t in s.entry.relations}
    if linked:
        fresh = [e for e in store.get_by_turn_ids(sorted(linked)) if e.id not in pool]
        for s in store.score(fresh, q):
            pool[s.entry.id] = s

    return sorted(pool.values(), key=lambda s: (-s.score, s.entry.created_at))
