from __future__ import annotations

import re
import threading

import pytest

import scripts as S
from adaptmem.errors import BackendUnavailable, StorageFailure
from adaptmem.llm import ScriptedBackend, whitespace_tokens
from adaptmem.pipeline import Mode, PipelineConfig, Step
from adaptmem.types import Granularity, Speaker, TurnId, TurnRecord

from conftest import DIM, make_engine


def ids_with(prompt: str, word: str) -> list[int]:
    """Entry ids shown in a prompt whose line mentions ``word``."""
    return [int(m.group(1)) for m in re.finditer(r"\[id=(\d+)\][^\n]*", prompt) if word in m.group(0)]


def quiet_backend(**overrides) -> ScriptedBackend:
    """Every contract answered with a benign default unless overridden."""
    tags = {
        "route": S.repeat(S.route("q", (0, 0, 0, 1), 3)),
        "verdict": S.repeat(S.verdict("Pass")),
        "facts": S.repeat(S.facts()),
        "trigger": S.repeat(S.trigger(0)),
        "episode": S.repeat(S.episode()),
        "refresh": S.repeat(S.refresh("No-Op")),
        "response": S.repeat("ok"),
        "judge_label": S.repeat(S.label()),
    }
    tags.update(overrides)
    return ScriptedBackend(by_tag=tags, dim=DIM)


def test_knowledge_update_scenario(tmp_path):
    b = ScriptedBackend(by_tag={
        "route": [S.route("Where does the user live?", (0, 0, 0, 1), 3)] * 3,
        "facts": [S.facts("User lives in Paris"), S.facts("User moved to Tokyo")],
        "trigger": [S.trigger(0)],
        "verdict": [
            lambda r: S.verdict("Refresh", conflicts=ids_with(r.prompt, "Paris")),
            lambda r: S.verdict("Pass", relevant=ids_with(r.prompt, "Tokyo")),
        ],
        "refresh": [lambda r: S.refresh("Update", [(ids_with(r.prompt, "Paris")[0], "User lives in Tokyo")])],
        "response": ["Noted.", "Got it.", "You live in Tokyo."],
    }, dim=DIM)
    eng = make_engine(tmp_path, b)
    s = eng.open_session(1)

    first = eng.process_turn(s, "I live in Paris")
    assert first.actions_taken == [Step.RETRIEVE, Step.RETRY, Step.RETRY, Step.CONSTRUCT, Step.RESPOND]

    second = eng.process_turn(s, "I moved to Tokyo")
    assert second.actions_taken == [Step.RETRIEVE, Step.REFRESH, Step.CONSTRUCT, Step.RESPOND]
    assert second.refresh_plan.edits[0][1] == "User lives in Tokyo"
    assert second.rounds_used == 1

    q = eng.answer_query(s, "Where do I live?")
    assert q.response == "You live in Tokyo."
    texts = [e.content for e in q.validated]
    assert any("Tokyo" in t for t in texts) and not any("Paris" in t for t in texts)
    facts = [e.content for e in eng.store.scan(Granularity.FACT)]
    assert "User lives in Tokyo" in facts and "User lives in Paris" not in facts


@pytest.mark.parametrize("k_r", [1, 2, 5])
def test_retry_bound(tmp_path, k_r):
    b = quiet_backend(verdict=S.repeat(S.verdict("Retry")), facts=S.repeat(S.facts("a stored fact")))
    eng = make_engine(tmp_path, b, k_r=k_r)
    s = eng.open_session(0)
    eng.process_turn(s, "seed memory one")
    eng.process_turn(s, "seed memory two")
    out = eng.process_turn(s, "what did I say?")
    assert out.rounds_used == k_r
    assert out.actions_taken.count(Step.RETRY) == k_r
    assert not out.evidence_validated
    assert out.validated  # best-effort union, flagged unvalidated


def test_retrieval_only_mode(tmp_path):
    b = quiet_backend()
    eng = make_engine(tmp_path, b)
    s = eng.open_session(0)
    out = eng.process_turn(s, "hello there", mode=Mode.RETRIEVAL_ONLY)
    assert out.response is None
    assert Step.RESPOND not in out.actions_taken
    assert b.calls("response") == []


def test_full_mode_has_response(tmp_path):
    eng = make_engine(tmp_path, quiet_backend())
    r = eng.process_turn(eng.open_session(0), "hi")
    assert r.response == "ok"


def test_construction_and_window(tmp_path):
    b = quiet_backend(facts=[S.facts("fact a", "fact b")] + S.repeat(S.facts()))
    eng = make_engine(tmp_path, b)
    s = eng.open_session(3)
    out = eng.process_turn(s, "first turn")
    assert len(out.committed_ids) == 3
    raw = eng.store.get(out.committed_ids[0])
    assert raw.granularity is Granularity.RAW and raw.meta.turn_id == TurnId(3, 0)
    assert s.window.turn_ids == (TurnId(3, 0),)
    eng.process_turn(s, "second turn")
    assert s.window.turn_ids == (TurnId(3, 0), TurnId(3, 1))


def test_episode_resets_window(tmp_path):
    b = quiet_backend(trigger=[S.trigger(1, "topic shift", topic="trip")],
                      episode=[S.episode("Trip", "The user talked about a trip.")])
    eng = make_engine(tmp_path, b)
    s = eng.open_session(0)
    eng.process_turn(s, "planning a trip")
    out = eng.process_turn(s, "now about cooking")
    assert out.episode_created
    [ep] = eng.store.scan(Granularity.EPISODE)
    assert ep.title == "Trip" and ep.relations == (TurnId(0, 0),)
    assert s.window.turn_ids == (TurnId(0, 1),)


def test_saturation_forces_episode(tmp_path):
    eng = make_engine(tmp_path, quiet_backend(), window_capacity=3)
    s = eng.open_session(0)
    created = [eng.process_turn(s, f"turn {j}").episode_created for j in range(5)]
    # Window holds 3 turns after the third call; the fourth turn sees it saturated.
    assert created == [False, False, False, True, False]
    assert len(eng.store.scan(Granularity.EPISODE)) == 1


def test_answer_query_does_not_commit(tmp_path):
    eng = make_engine(tmp_path, quiet_backend())
    s = eng.open_session(0)
    eng.process_turn(s, "store me")
    n = len(eng.store)
    out = eng.answer_query(s, "what did I store?")
    assert len(eng.store) == n and out.committed_ids == []
    assert s.window.turn_ids == (TurnId(0, 0),)


def test_commit_queries_option(tmp_path):
    eng = make_engine(tmp_path, quiet_backend(), commit_queries=True)
    s = eng.open_session(0)
    eng.answer_query(s, "remember this question")
    assert len(eng.store.scan(Granularity.RAW)) == 1


def test_query_on_empty_store(tmp_path):
    b = quiet_backend()
    eng = make_engine(tmp_path, b)
    out = eng.answer_query(eng.open_session(0), "anything?")
    assert out.rounds_used == 2 and not out.evidence_validated and out.validated == []
    assert out.response == "ok"
    assert b.calls("verdict") == []  # empty pools never reach the model


def test_same_question_is_deterministic(tmp_path):
    eng = make_engine(tmp_path, quiet_backend())
    s = eng.open_session(0)
    eng.process_turn(s, "I like green tea")
    a = eng.answer_query(s, "What do I like?").to_dict(include_latency=False)
    b = eng.answer_query(s, "What do I like?").to_dict(include_latency=False)
    assert a == b


def test_gateway_failure_degrades(tmp_path):
    def down(req):
        raise BackendUnavailable("connection refused")

    b = quiet_backend(route=[down])
    eng = make_engine(tmp_path, b)
    s = eng.open_session(0)
    out = eng.process_turn(s, "hello")
    assert out.degraded and out.committed_ids == [] and len(eng.store) == 0
    assert out.response == "ok" and "BackendUnavailable" in out.errors[0]
    assert s.window.turn_ids == (TurnId(0, 0),)  # the turn still happened


def test_contract_failure_in_judge_degrades(tmp_path):
    b = quiet_backend(verdict=S.repeat("garbage"))
    eng = make_engine(tmp_path, b)
    s = eng.open_session(0)
    eng.process_turn(s, "seed")  # empty pool: no judge call
    out = eng.process_turn(s, "second")
    assert out.degraded and "ContractViolation" in out.errors[0]


def test_storage_failure_aborts(tmp_path, monkeypatch):
    eng = make_engine(tmp_path, quiet_backend())
    s = eng.open_session(0)

    def boom(payload):
        raise OSError("read-only file system")

    monkeypatch.setattr(eng.store, "_write_log", boom)
    with pytest.raises(StorageFailure):
        eng.process_turn(s, "hello")
    assert len(eng.store) == 0 and s.window.turn_ids == () and s.last_turn is None


def test_turn_order_enforced(tmp_path):
    eng = make_engine(tmp_path, quiet_backend())
    s = eng.open_session(0)
    eng.process_turn(s, TurnRecord(TurnId(0, 5), Speaker.USER, "five"))
    with pytest.raises(ValueError):
        eng.process_turn(s, TurnRecord(TurnId(0, 4), Speaker.USER, "four"))
    assert eng.process_turn(s, "next").turn_id == TurnId(0, 6)


def test_token_usage_matches_prompts(tmp_path):
    b = quiet_backend()
    eng = make_engine(tmp_path, b)
    s = eng.open_session(0)
    eng.process_turn(s, "warm up the store")
    start = len(b.requests)
    out = eng.process_turn(s, "count my tokens please")
    reqs = b.requests[start:]
    assert out.tokens["prompt_tokens"] == sum(whitespace_tokens(r.prompt) for r in reqs)
    assert [c.agent for c in out.token_usage] == [r.tag for r in reqs]


def test_timestamp_hint_sets_now(tmp_path):
    eng = make_engine(tmp_path, quiet_backend())
    s = eng.open_session(0)
    out = eng.process_turn(s, "hello", timestamp_hint="2023-05-07 14:30")
    assert eng.store.get(out.committed_ids[0]).meta.timestamp.isoformat() == "2023-05-07T14:30:00"


def test_sessions_run_concurrently(tmp_path):
    eng = make_engine(tmp_path, quiet_backend(**{
        k: S.repeat(v, 2000) for k, v in {
            "route": S.route(), "verdict": S.verdict("Pass"), "facts": S.facts("x"),
            "trigger": S.trigger(0), "response": "ok",
        }.items()
    }))
    errors = []

    def run(sid):
        try:
            s = eng.open_session(sid)
            for j in range(15):
                eng.process_turn(s, f"session {sid} turn {j}")
        except Exception as exc:  # pragma: no cover - reported below
            errors.append(exc)

    threads = [threading.Thread(target=run, args=(sid,)) for sid in range(4)]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    assert not errors
    raws = eng.store.scan(Granularity.RAW)
    assert len(raws) == 60
    for sid in range(4):
        turns = [e.meta.turn_id.turn for e in raws if e.meta.turn_id.session == sid]
        assert turns == list(range(15))


def test_config_validation():
    with pytest.raises(ValueError):
        PipelineConfig(k_r=0)
    with pytest.raises(ValueError):
        PipelineConfig(window_capacity=0)
    assert PipelineConfig(mode="retrieval_only").mode is Mode.RETRIEVAL_ONLY
