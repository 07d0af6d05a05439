"""Strict JSON output contracts for every model call.

``extract_objects`` pulls candidate JSON objects out of free-form model
text; ``validate`` checks one object against a named contract and returns
a normalized copy. Both raise only :class:`ContractViolation`.
"""

from __future__ import annotations

import json
import math
import re
from typing import Any, Callable, Iterator

from .errors import ContractViolation, MalformedTimestamp
from .types import TurnId, parse_timestamp

SCHEMAS = ("facts", "trigger", "episode", "route", "verdict", "refresh", "judge_label")

EPISODE_TS_RE = re.compile(r"\d{4}-\d{2}-\d{2}T\d{2}:\d{2}:\d{2}")
# Models echo the B.1 placeholder loosely: D_{1:2}, D_1:2, D_1,2, D_{1,2}.
_LOOSE_TURN_ID_RE = re.compile(r"\s*<?D_\{?([0-9]+)[:,]\s*([0-9]+)\}?>?\s*")

_decoder = json.JSONDecoder(parse_constant=lambda name: _reject_constant(name))


def _reject_constant(name: str):
    raise ValueError(f"non-finite constant {name}")


def extract_objects(text: str) -> Iterator[dict]:
    """Yield every JSON object decodable from ``text``, leftmost first.

    A candidate starts at each ``{``; objects nested inside an accepted
    one are skipped.
    """
    if not isinstance(text, str):
        return
    pos = text.find("{")
    while pos != -1:
        try:
            obj, end = _decoder.raw_decode(text, pos)
        except RecursionError:
            # Pathologically nested; rescanning every inner brace is quadratic.
            return
        except ValueError:
            pos = text.find("{", pos + 1)
            continue
        if isinstance(obj, dict):
            yield obj
            pos = text.find("{", end)
        else:
            pos = text.find("{", pos + 1)


def first_valid(text: str, schema: str, check: Callable[[dict], None] | None = None) -> dict:
    """Return the first object in ``text`` satisfying ``schema`` (and ``check``)."""
    last_error = "no JSON object found"
    for obj in extract_objects(text):
        try:
            value = validate(obj, schema)
            if check is not None:
                check(value)
            return value
        except ContractViolation as exc:
            last_error = str(exc)
    raise ContractViolation(last_error, raw=text, schema=schema)


# --- field helpers -----------------------------------------------------------


def _fail(schema: str, message: str):
    raise ContractViolation(f"{schema}: {message}", schema=schema)


def _text(obj: dict, key: str, schema: str, *, required=True, non_empty=False, default=""):
    if key not in obj:
        if required:
            _fail(schema, f"missing key {key!r}")
        return default
    v = obj[key]
    if not isinstance(v, str):
        _fail(schema, f"{key!r} must be a string")
    if non_empty and not v.strip():
        _fail(schema, f"{key!r} must be non-empty")
    return v


def _confidence(obj: dict, schema: str, *, required=True) -> float:
    if "confidence" not in obj:
        if required:
            _fail(schema, "missing key 'confidence'")
        return 1.0
    v = obj["confidence"]
    if isinstance(v, bool) or not isinstance(v, (int, float)) or not math.isfinite(v):
        _fail(schema, "'confidence' must be a number")
    if not 0.0 <= v <= 1.0:
        _fail(schema, "'confidence' out of [0,1]")
    return float(v)


def _bit(v: Any, schema: str, key: str) -> int:
    if isinstance(v, bool) or v not in (0, 1) or not isinstance(v, int):
        _fail(schema, f"{key!r} must be 0 or 1")
    return int(v)


def _entry_id(v: Any, schema: str) -> int:
    if isinstance(v, bool):
        _fail(schema, "memory id must be an integer")
    if isinstance(v, int) and v >= 0:
        return v
    if isinstance(v, str) and v.strip().isdigit() and v.strip().isascii():
        return int(v.strip())
    _fail(schema, f"memory id {v!r} is not a non-negative integer")


def _id_list(obj: dict, key: str, schema: str) -> list[int] | None:
    if key not in obj or obj[key] is None:
        return None
    v = obj[key]
    if not isinstance(v, list):
        _fail(schema, f"{key!r} must be a list")
    out: list[int] = []
    for item in v:
        i = _entry_id(item, schema)
        if i not in out:
            out.append(i)
    return out


def coerce_turn_id(text: Any, schema: str = "facts") -> TurnId:
    if not isinstance(text, str):
        _fail(schema, "related id must be a string")
    m = _LOOSE_TURN_ID_RE.fullmatch(text)
    if m is None:
        _fail(schema, f"malformed related id {text!r}")
    return TurnId(int(m.group(1)), int(m.group(2)))


def _time_or_empty(obj: dict, schema: str, *, strict: bool) -> str:
    """Return "empty" or a canonical timestamp string.

    With ``strict=False`` an unparseable value degrades to "empty".
    """
    v = obj.get("timestamp", "empty")
    if v is None:
        v = "empty"
    if not isinstance(v, str):
        _fail(schema, "'timestamp' must be a string")
    if v.strip().lower() in ("empty", ""):
        return "empty"
    try:
        return parse_timestamp(v).strftime("%Y-%m-%dT%H:%M:%S")
    except MalformedTimestamp:
        if strict:
            _fail(schema, f"unparseable timestamp {v!r}")
        return "empty"


# --- per-schema validators ---------------------------------------------------


def _facts(obj: dict) -> dict:
    s = "facts"
    facts = obj.get("facts")
    if not isinstance(facts, list):
        _fail(s, "'facts' must be a list")
    contents = []
    for f in facts:
        if not isinstance(f, dict):
            _fail(s, "each fact must be an object")
        c = _text(f, "content", s, non_empty=True).strip()
        if ";" in c:
            _fail(s, f"fact is not a single clause: {c!r}")
        contents.append(c)
    related = obj.get("related_id", [])
    if related is None:
        related = []
    if not isinstance(related, list):
        _fail(s, "'related_id' must be a list")
    turn_ids = []
    for r in related:
        t = coerce_turn_id(r, s)
        if t not in turn_ids:
            turn_ids.append(t)
    if "timestamp" not in obj:
        _fail(s, "missing key 'timestamp'")
    return {
        "facts": contents,
        "related_id": turn_ids,
        "timestamp": _time_or_empty(obj, s, strict=True),
        "source": obj.get("source") if isinstance(obj.get("source"), str) else "user",
    }


def _trigger(obj: dict) -> dict:
    s = "trigger"
    if "T_t" not in obj:
        _fail(s, "missing key 'T_t'")
    return {
        "T_t": _bit(obj["T_t"], s, "T_t"),
        "reason": _text(obj, "reason", s),
        "confidence": _confidence(obj, s),
        "topic_summary": _text(obj, "topic_summary", s, required=False),
    }


def _episode(obj: dict) -> dict:
    s = "episode"
    ts = _text(obj, "timestamp", s)
    if not EPISODE_TS_RE.fullmatch(ts):
        _fail(s, f"timestamp {ts!r} is not YYYY-MM-DDTHH:MM:SS")
    try:
        parse_timestamp(ts)
    except MalformedTimestamp:
        _fail(s, f"timestamp {ts!r} is not a calendar time")
    return {
        "title": _text(obj, "title", s, non_empty=True).strip(),
        "content": _text(obj, "content", s, non_empty=True).strip(),
        "timestamp": ts,
    }


def _route(obj: dict) -> dict:
    s = "route"
    iv = obj.get("intent_vector")
    if not isinstance(iv, dict):
        _fail(s, "'intent_vector' must be an object")
    bits = {}
    for key in ("b_fine", "b_abs", "b_event", "b_atomic"):
        if key not in iv:
            _fail(s, f"intent_vector missing {key!r}")
        bits[key] = _bit(iv[key], s, key)
    k = obj.get("K_dyn")
    if isinstance(k, bool) or not isinstance(k, int) or k < 1:
        _fail(s, "'K_dyn' must be a positive integer")
    mt = obj.get("memory_type")
    if mt is not None and mt not in ("raw", "fact", "episode"):
        _fail(s, f"unknown memory_type {mt!r}")
    return {
        "rewrite_query": _text(obj, "rewrite_query", s, non_empty=True).strip(),
        "intent_vector": bits,
        "memory_type": mt,
        "K_dyn": k,
    }


def _verdict(obj: dict) -> dict:
    s = "verdict"
    action = obj.get("Action")
    if action not in ("Pass", "Retry", "Refresh"):
        _fail(s, f"Action must be Pass, Retry or Refresh, got {action!r}")
    out = {
        "Action": action,
        "reason": _text(obj, "reason", s),
        "confidence": _confidence(obj, s),
        "relevant_ids": _id_list(obj, "relevant_ids", s),
        "conflict_ids": _id_list(obj, "conflict_ids", s),
    }
    if action == "Refresh" and not out["conflict_ids"]:
        _fail(s, "Refresh requires non-empty 'conflict_ids'")
    return out


def _refresh(obj: dict) -> dict:
    s = "refresh"
    action = obj.get("Action")
    if action not in ("Update", "Delete", "No-Op"):
        _fail(s, f"Action must be Update, Delete or No-Op, got {action!r}")
    data = obj.get("dataList", [])
    if data is None:
        data = []
    if not isinstance(data, list):
        _fail(s, "'dataList' must be a list")
    edits = []
    for item in data:
        if not isinstance(item, dict) or "id" not in item:
            _fail(s, "each dataList item must be an object with 'id'")
        i = _entry_id(item["id"], s)
        content = item.get("new_content", "")
        if content is None:
            content = ""
        if not isinstance(content, str):
            _fail(s, "'new_content' must be a string")
        edits.append((i, content.strip()))
    if action == "Update":
        if not edits:
            _fail(s, "Update requires a non-empty dataList")
        if any(not c for _, c in edits):
            _fail(s, "Update requires non-empty new_content")
    if action == "Delete" and not edits:
        _fail(s, "Delete requires a non-empty dataList")
    mt = obj.get("memory_type")
    return {
        "Action": action,
        "memory_type": mt if mt in ("raw", "fact", "episode") else None,
        "dataList": [] if action == "No-Op" else edits,
        "timestamp": _time_or_empty(obj, s, strict=False),
        "reason": _text(obj, "reason", s, required=False),
    }


def _judge_label(obj: dict) -> dict:
    s = "judge_label"
    label = obj.get("label")
    if label not in ("CORRECT", "WRONG"):
        _fail(s, f"label must be CORRECT or WRONG, got {label!r}")
    return {"label": label, "reasoning": _text(obj, "reasoning", s, required=False)}


_VALIDATORS = {
    "facts": _facts,
    "trigger": _trigger,
    "episode": _episode,
    "route": _route,
    "verdict": _verdict,
    "refresh": _refresh,
    "judge_label": _judge_label,
}


def validate(obj: Any, schema: str) -> dict:
    if schema not in _VALIDATORS:
        raise ValueError(f"unknown contract {schema!r}")
    if not isinstance(obj, dict):
        _fail(schema, "top-level value must be an object")
    return _VALIDATORS[schema](obj)
