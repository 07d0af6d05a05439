from __future__ import annotations

import json

import pytest
from hypothesis import given
from hypothesis import strategies as st

import scripts as S
from adaptmem.contracts import SCHEMAS, extract_objects, first_valid, validate
from adaptmem.errors import ContractViolation
from adaptmem.types import TurnId


def test_extract_objects_skips_garbage():
    objs = list(extract_objects('x {bad {"a": 1} y {"b": {"c": 2}} z'))
    assert objs == [{"a": 1}, {"b": {"c": 2}}]


def test_extract_rejects_non_finite():
    assert list(extract_objects('{"confidence": NaN}')) == []


def test_deeply_nested_input_does_not_crash():
    assert list(extract_objects("{" * 5000)) == []
    # Deeper than the decoder's recursion limit: skipped, not crashed.
    deep = '{"a":' * 200_000 + "1" + "}" * 200_000
    assert isinstance(list(extract_objects(deep)), list)


def test_first_valid_takes_first_conforming_object():
    text = '{"label": "MAYBE"} then {"label": "CORRECT"}'
    assert first_valid(text, "judge_label")["label"] == "CORRECT"


def test_facts_contract():
    out = validate(json.loads(S.facts("John moved to Tokyo", related=["D_{1:2}", "D_1:3"], timestamp="2023-05-07 14:30")), "facts")
    assert out["facts"] == ["John moved to Tokyo"]
    assert out["related_id"] == [TurnId(1, 2), TurnId(1, 3)]
    assert out["timestamp"] == "2023-05-07T14:30:00"
    assert validate({"facts": [], "related_id": [], "timestamp": "empty"}, "facts")["timestamp"] == "empty"


@pytest.mark.parametrize("obj", [
    {"related_id": [], "timestamp": "empty"},
    {"facts": [{"content": "a; b"}], "timestamp": "empty"},
    {"facts": [{"content": ""}], "timestamp": "empty"},
    {"facts": ["plain string"], "timestamp": "empty"},
    {"facts": [], "timestamp": "next week"},
    {"facts": [], "related_id": ["turn 3"], "timestamp": "empty"},
    {"facts": []},
])
def test_facts_contract_rejects(obj):
    with pytest.raises(ContractViolation):
        validate(obj, "facts")


def test_episode_timestamp_is_strict():
    validate(json.loads(S.episode(timestamp="2023-05-07T14:30:00")), "episode")
    for ts in ("May 7", "2023-05-07 14:30:00", "2023-13-07T14:30:00"):
        with pytest.raises(ContractViolation):
            validate(json.loads(S.episode(timestamp=ts)), "episode")


def test_route_contract():
    out = validate(json.loads(S.route("q", (1, 0, 0, 0), 4, "raw")), "route")
    assert out["intent_vector"]["b_fine"] == 1 and out["K_dyn"] == 4
    for bad in (S.route(k=0), S.route(bits=(2, 0, 0, 0)), S.route(query=" "), S.route(memory_type="graph")):
        with pytest.raises(ContractViolation):
            validate(json.loads(bad), "route")
    with pytest.raises(ContractViolation):
        validate({"rewrite_query": "q", "intent_vector": {"b_fine": True, "b_abs": 0, "b_event": 0, "b_atomic": 0}, "K_dyn": 1}, "route")


def test_verdict_contract():
    out = validate(json.loads(S.verdict("Refresh", relevant=["3"], conflicts=[3, 3])), "verdict")
    assert out["conflict_ids"] == [3] and out["relevant_ids"] == [3]
    with pytest.raises(ContractViolation):
        validate(json.loads(S.verdict("Refresh")), "verdict")
    with pytest.raises(ContractViolation):
        validate(json.loads(S.verdict("Pass", confidence=2)), "verdict")
    with pytest.raises(ContractViolation):
        validate(json.loads(S.verdict("pass")), "verdict")


def test_refresh_contract():
    out = validate(json.loads(S.refresh("Update", [(4, "User lives in Tokyo")], timestamp="2024-03-01")), "refresh")
    assert out["dataList"] == [(4, "User lives in Tokyo")]
    assert out["timestamp"] == "2024-03-01T00:00:00"
    # An unparseable refresh timestamp degrades to "empty" rather than failing the plan.
    assert validate(json.loads(S.refresh("No-Op", timestamp="last week")), "refresh")["timestamp"] == "empty"
    for bad in (S.refresh("Update"), S.refresh("Update", [(1, "")]), S.refresh("Delete"), S.refresh("Remove")):
        with pytest.raises(ContractViolation):
            validate(json.loads(bad), "refresh")


def test_judge_label_contract():
    assert validate({"label": "WRONG"}, "judge_label")["reasoning"] == ""
    with pytest.raises(ContractViolation):
        validate({"label": "CORRECT | WRONG"}, "judge_label")


json_values = st.recursive(
    st.none() | st.booleans() | st.integers() | st.floats(allow_nan=False, allow_infinity=False) | st.text(max_size=20),
    lambda children: st.lists(children, max_size=4) | st.dictionaries(st.text(max_size=10), children, max_size=5),
    max_leaves=20,
)


@pytest.mark.parametrize("schema", SCHEMAS)
@given(obj=json_values)
def test_validate_never_raises_anything_else(schema, obj):
    try:
        validate(obj, schema)
    except ContractViolation:
        pass


@pytest.mark.parametrize("schema", SCHEMAS)
@given(text=st.text(max_size=200))
def test_first_valid_on_arbitrary_text(schema, text):
    try:
        first_valid(text, schema)
    except ContractViolation:
        pass
