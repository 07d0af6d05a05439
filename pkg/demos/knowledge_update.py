"""Walk through a knowledge update: the user moves from Paris to Tokyo.

The model is scripted, so the demo needs no network and shows exactly
which agent decided what. Run with ``python demos/knowledge_update.py``.
"""

from __future__ import annotations

import json
import re
import tempfile

from adaptmem import Gateway, MemoryEngine, MemoryStore, ScriptedBackend, StoreConfig
from adaptmem.types import Granularity

DIM = 32


def ids_mentioning(prompt: str, word: str) -> list[int]:
    return [int(m.group(1)) for m in re.finditer(r"\[id=(\d+)\][^\n]*", prompt) if word in m.group(0)]


def route(query: str) -> str:
    return json.dumps({
        "rewrite_query": query,
        "intent_vector": {"b_fine": 0, "b_abs": 0, "b_event": 0, "b_atomic": 1},
        "memory_type": "fact",
        "K_dyn": 3,
    })


def facts(*contents: str) -> str:
    return json.dumps({"facts": [{"content": c} for c in contents], "related_id": [], "timestamp": "empty"})


script = {
    "route": [route("Where does the user live?")] * 3,
    "facts": [facts("User lives in Paris"), facts("User moved to Tokyo")],
    "trigger": [json.dumps({"T_t": 0, "reason": "same topic", "confidence": 0.9})],
    "verdict": [
        # Turn 2: the stored Paris fact contradicts the new input.
        lambda req: json.dumps({"Action": "Refresh", "reason": "residence changed", "confidence": 0.95,
                                "conflict_ids": ids_mentioning(req.prompt, "Paris")}),
        # Follow-up question: the refreshed fact answers it.
        lambda req: json.dumps({"Action": "Pass", "reason": "sufficient", "confidence": 0.9,
                                "relevant_ids": ids_mentioning(req.prompt, "Tokyo")}),
    ],
    "refresh": [
        lambda req: json.dumps({
            "Action": "Update", "memory_type": "fact", "timestamp": "empty", "reason": "user moved",
            "dataList": [{"id": str(ids_mentioning(req.prompt, "Paris")[0]), "new_content": "User lives in Tokyo"}],
        })
    ],
    "response": ["Noted, Paris it is.", "Congratulations on the move!", "You live in Tokyo."],
}


def show_facts(store: MemoryStore) -> None:
    for e in store.scan(Granularity.FACT):
        print(f"    [id={e.id}] {e.content}")


def main() -> None:
    with tempfile.TemporaryDirectory() as tmp:
        store = MemoryStore(StoreConfig(tmp, DIM, fsync=False))
        engine = MemoryEngine(store, Gateway(ScriptedBackend(by_tag=script, dim=DIM), dim=DIM))
        session = engine.open_session(0)

        print("user: I live in Paris")
        out = engine.process_turn(session, "I live in Paris")
        print(f"  actions: {[a.value for a in out.actions_taken]}")
        print("  (empty memory, so both retry rounds come back empty and the turn is simply stored)")
        show_facts(store)

        print("\nuser: I moved to Tokyo")
        out = engine.process_turn(session, "I moved to Tokyo")
        print(f"  actions: {[a.value for a in out.actions_taken]}")
        print(f"  judge: {out.verdicts[0].action.value} ({out.verdicts[0].reason})")
        print(f"  refresher: {out.refresh_plan.action.value} {out.refresh_plan.edits}")
        show_facts(store)

        print("\nquestion: Where do I live?")
        q = engine.answer_query(session, "Where do I live?")
        print(f"  evidence: {[e.content for e in q.validated]}")
        print(f"  answer: {q.response}")
        print(f"  tokens used: {q.tokens}")


if __name__ == "__main__":
    main()
