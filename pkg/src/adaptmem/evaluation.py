"""Corpus ingestion and the question-answering evaluation harness."""

from __future__ import annotations

import json
import logging
from collections import defaultdict
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Iterator

from .errors import ContractViolation, GatewayError, MalformedRecord
from .llm import Gateway
from .metrics import metric_bleu1, metric_f1
from .pipeline import MemoryEngine, Mode, Session
from .types import Speaker, TurnId, TurnRecord

logger = logging.getLogger(__name__)

UNCATEGORIZED = "uncategorized"


@dataclass(frozen=True)
class CorpusTurn:
    session: int
    turn: int
    speaker: str
    text: str
    timestamp: str | None = None

    def to_turn_record(self) -> TurnRecord:
        return TurnRecord(TurnId(self.session, self.turn), Speaker(self.speaker.lower()), self.text, self.timestamp)


@dataclass(frozen=True)
class QAItem:
    question: str
    gold: str
    category: str | None = None


@dataclass
class IngestSummary:
    sessions: int = 0
    turns: int = 0
    entries_committed: int = 0
    degraded_turns: int = 0

    def to_dict(self) -> dict:
        return asdict(self)


def _read_jsonl(path) -> Iterator[tuple[int, dict]]:
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except ValueError as exc:
                raise MalformedRecord(f"invalid JSON: {exc}", lineno) from exc
            if not isinstance(obj, dict):
                raise MalformedRecord("record must be a JSON object", lineno)
            yield lineno, obj


def _int_field(obj: dict, key: str, lineno: int) -> int:
    v = obj.get(key)
    if isinstance(v, bool) or not isinstance(v, int) or v < 0:
        raise MalformedRecord(f"{key!r} must be a non-negative integer", lineno)
    return v


def parse_corpus_turn(obj: dict, lineno: int = 0) -> CorpusTurn:
    speaker = obj.get("speaker")
    if not isinstance(speaker, str) or speaker.lower() not in (s.value for s in Speaker):
        raise MalformedRecord(f"speaker must be 'user' or 'assistant', got {speaker!r}", lineno)
    text = obj.get("text")
    if not isinstance(text, str) or not text.strip():
        raise MalformedRecord("'text' must be a non-empty string", lineno)
    ts = obj.get("timestamp")
    if ts is not None and not isinstance(ts, str):
        raise MalformedRecord("'timestamp' must be a string when present", lineno)
    return CorpusTurn(_int_field(obj, "session", lineno), _int_field(obj, "turn", lineno), speaker.lower(), text, ts)


def ingest_corpus(path, engine: MemoryEngine) -> IngestSummary:
    """Run every corpus turn through the pipeline, in file order.

    Records must be grouped by session and turn-ordered within it. On a
    malformed record the turns before it stay committed and the raised
    :class:`MalformedRecord` carries the partial summary.
    """
    summary = IngestSummary()
    seen_sessions: set[int] = set()
    current: Session | None = None
    last: TurnId | None = None
    try:
        for lineno, obj in _read_jsonl(path):
            rec = parse_corpus_turn(obj, lineno)
            tid = TurnId(rec.session, rec.turn)
            if current is None or rec.session != current.id:
                if rec.session in seen_sessions:
                    raise MalformedRecord(f"session {rec.session} is not contiguous", lineno)
                seen_sessions.add(rec.session)
                current = engine.open_session(rec.session)
                summary.sessions += 1
                last = current.last_turn
            if last is not None and tid <= last:
                raise MalformedRecord(f"turn {tid} is out of order (after {last})", lineno)
            outcome = engine.process_turn(current, rec.to_turn_record(), mode=Mode.RETRIEVAL_ONLY)
            last = tid
            summary.turns += 1
            summary.entries_committed += len(outcome.committed_ids)
            summary.degraded_turns += int(outcome.degraded)
    except MalformedRecord as exc:
        exc.summary = summary
        raise
    return summary


def load_qa(path) -> list[QAItem]:
    items = []
    for lineno, obj in _read_jsonl(path):
        q, gold, cat = obj.get("question"), obj.get("gold", obj.get("answer")), obj.get("category")
        if not isinstance(q, str) or not q.strip():
            raise MalformedRecord("'question' must be a non-empty string", lineno)
        if isinstance(gold, (int, float)) and not isinstance(gold, bool):
            gold = str(gold)
        if not isinstance(gold, str) or not gold.strip():
            raise MalformedRecord("'gold' must be a non-empty string", lineno)
        if cat is not None and not isinstance(cat, str):
            cat = str(cat)
        items.append(QAItem(q, gold, cat))
    return items


@dataclass(frozen=True)
class JudgeLabel:
    label: str
    reasoning: str = ""
    flagged: bool = False


def llm_judge(question: str, gold: str, prediction: str, gateway: Gateway) -> JudgeLabel:
    """Binary CORRECT/WRONG label; a broken judge output counts as WRONG and is flagged."""
    try:
        out = gateway.call(
            gateway.prompts.llm_judge,
            {"question": question, "gold_answer": gold, "generated_answer": prediction},
            "judge_label",
        )
    except ContractViolation as exc:
        logger.warning("judge output unusable, scoring WRONG: %s", exc)
        return JudgeLabel("WRONG", f"unparseable judge output: {exc}", True)
    return JudgeLabel(out["label"], out["reasoning"])


@dataclass
class EvalRow:
    question: str
    gold: str
    category: str | None
    prediction: str
    f1: float
    bleu1: float
    llm_label: str
    judge_flagged: bool = False
    tokens: int = 0
    latency: float = 0.0
    error: str | None = None


def _means(rows: list[EvalRow]) -> dict:
    n = len(rows)
    return {
        "count": n,
        "mean_f1": sum(r.f1 for r in rows) / n if n else 0.0,
        "mean_bleu1": sum(r.bleu1 for r in rows) / n if n else 0.0,
        "llm_score": sum(r.llm_label == "CORRECT" for r in rows) / n if n else 0.0,
    }


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    @property
    def by_category(self) -> dict[str, dict]:
        groups: dict[str, list[EvalRow]] = defaultdict(list)
        for r in self.rows:
            groups[r.category or UNCATEGORIZED].append(r)
        return {k: _means(v) for k, v in sorted(groups.items())}

    @property
    def aggregates(self) -> dict:
        agg = _means(self.rows)
        cats = self.by_category
        agg["llm_score_micro"] = agg["llm_score"]
        agg["llm_score_macro"] = sum(c["llm_score"] for c in cats.values()) / len(cats) if cats else 0.0
        agg["total_tokens"] = sum(r.tokens for r in self.rows)
        agg["mean_latency"] = sum(r.latency for r in self.rows) / len(self.rows) if self.rows else 0.0
        agg["failed_items"] = sum(r.error is not None for r in self.rows)
        return agg

    def to_dict(self) -> dict:
        return {
            "rows": [asdict(r) for r in self.rows],
            "aggregates": self.aggregates,
            "by_category": self.by_category,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True, ensure_ascii=False) + "\n"

    def to_table(self) -> str:
        header = f"{'category':<24}{'n':>5}{'LLM':>8}{'F1':>8}{'BLEU-1':>8}"
        lines = [header, "-" * len(header)]
        for name, m in self.by_category.items():
            lines.append(f"{name:<24}{m['count']:>5}{m['llm_score']:>8.3f}{m['mean_f1']:>8.3f}{m['mean_bleu1']:>8.3f}")
        a = self.aggregates
        lines.append("-" * len(header))
        lines.append(f"{'overall':<24}{a['count']:>5}{a['llm_score']:>8.3f}{a['mean_f1']:>8.3f}{a['mean_bleu1']:>8.3f}")
        lines.append(f"LLM score macro {a['llm_score_macro']:.3f} | tokens {a['total_tokens']} | "
                     f"mean latency {a['mean_latency']:.3f}s")
        return "\n".join(lines)


def run_eval(
    qa_path,
    engine: MemoryEngine,
    *,
    session: Session | None = None,
    judge_gateway: Gateway | None = None,
) -> EvalReport:
    """Answer every QA item from memory and score it.

    Questions are never written to memory. A failing item is recorded with
    its error and scored as WRONG; the run carries on.
    """
    items = load_qa(qa_path)
    session = session or engine.open_session()
    judge_gw = judge_gateway or engine.gateway
    report = EvalReport()
    for item in items:
        try:
            outcome = engine.answer_query(session, item.question, mode=Mode.FULL_INFERENCE)
        except (GatewayError, ValueError) as exc:
            logger.warning("eval item failed: %s", exc)
            report.rows.append(EvalRow(item.question, item.gold, item.category, "", 0.0, 0.0, "WRONG",
                                       True, error=f"{type(exc).__name__}: {exc}"))
            continue
        pred = outcome.response or ""
        label = llm_judge(item.question, item.gold, pred, judge_gw)
        tokens = outcome.tokens
        report.rows.append(
            EvalRow(
                question=item.question,
                gold=item.gold,
                category=item.category,
                prediction=pred,
                f1=metric_f1(pred, item.gold),
                bleu1=metric_bleu1(pred, item.gold),
                llm_label=label.label,
                judge_flagged=label.flagged,
                tokens=tokens["prompt_tokens"] + tokens["completion_tokens"],
                latency=outcome.latency,
            )
        )
    return report
