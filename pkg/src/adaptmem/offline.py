"""A rule-based chat backend for running the CLI without a hosted model.

It reads the sections of the default prompts and answers every contract
with a plausible, always-valid JSON object: the user input becomes one
fact per sentence, routing always targets facts, the judge passes
whatever was retrieved and the responder quotes the evidence. Useful for
smoke tests and demos; it has no language understanding.
"""

from __future__ import annotations

import json
import re
from datetime import datetime

from .llm import ChatRequest, Completion, HashEmbedder, whitespace_tokens
from .metrics import tokenize

_SENTENCE_RE = re.compile(r"(?<=[.!?])\s+")


def _section(prompt: str, header: str, *, line: bool = False) -> str:
    """Text following ``header`` up to the next blank line (or line end)."""
    i = prompt.rfind(header)
    if i < 0:
        return ""
    rest = prompt[i + len(header):]
    if line:
        return rest.split("\n", 1)[0].strip()
    return rest.lstrip(" \n").split("\n\n", 1)[0].strip()


class OfflineBackend:
    model_tag = "offline-hash"

    def __init__(self, dim: int = 64, clock=datetime.now):
        self.embedder = HashEmbedder(dim, mode="tokens")
        self.clock = clock

    def embed(self, text: str) -> list[float]:
        return self.embedder.embed(text)

    def _reply(self, req: ChatRequest) -> str:
        p = req.prompt
        tag = req.tag
        if tag == "facts":
            text = _section(p, "Current user input u_t:")
            facts = [s.replace(";", ",").strip() for s in _SENTENCE_RE.split(text) if s.strip()]
            return json.dumps({"facts": [{"content": f} for f in facts], "related_id": [], "timestamp": "empty"})
        if tag == "trigger":
            return json.dumps({"T_t": 0, "reason": "offline backend never segments", "confidence": 1.0})
        if tag == "episode":
            conv = _section(p, "Conversation episode E_t:") or "the recent conversation"
            return json.dumps({
                "title": "Conversation summary",
                "content": f"The participants discussed: {conv[:400]}",
                "timestamp": self.clock().strftime("%Y-%m-%dT%H:%M:%S"),
            })
        if tag == "route":
            q = _section(p, "Current user input u_t:") or "conversation"
            return json.dumps({
                "rewrite_query": q,
                "intent_vector": {"b_fine": 0, "b_abs": 0, "b_event": 0, "b_atomic": 1},
                "memory_type": "fact",
                "K_dyn": 5,
            })
        if tag == "verdict":
            return json.dumps({"Action": "Pass", "reason": "offline backend accepts retrieval", "confidence": 0.5})
        if tag == "refresh":
            return json.dumps({"Action": "No-Op", "dataList": [], "timestamp": "empty", "reason": "offline"})
        if tag == "judge_label":
            gold = set(tokenize(_section(p, "Gold Answer:", line=True)))
            gen = set(tokenize(_section(p, "Generated Answer:", line=True)))
            label = "CORRECT" if gold and gold <= gen else "WRONG"
            return json.dumps({"reasoning": "token containment check", "label": label})
        evidence = _section(p, "Memory evidence (newest first):")
        if not evidence or evidence == "(none)":
            return "I don't have anything stored about that."
        question = set(tokenize(_section(p, "Current input:")))
        lines = [ln.lstrip("- ") for ln in evidence.splitlines()]
        # Quote the evidence line sharing the most words with the question.
        best = max(lines, key=lambda ln: len(question & set(tokenize(ln))))
        return best.split(") ", 1)[-1]

    def complete(self, request: ChatRequest) -> Completion:
        text = self._reply(request)
        return Completion(text, whitespace_tokens(request.prompt), whitespace_tokens(text))
