"""Prompt templates and placeholder rendering.

Placeholders are ``{identifier}``; anything else in braces (the JSON
output blocks) is left alone. Rendering is a single pass, so bound values
that happen to contain braces are never re-expanded.
"""

from __future__ import annotations

import re
from dataclasses import dataclass, fields, replace
from typing import Mapping

from .errors import MissingBinding

PLACEHOLDER_RE = re.compile(r"\{([a-z_][a-z0-9_]*)\}")


CONSTRUCTOR = """\
You are a Constructor Agent for structured memory construction.
Given the current user input u_t, decompose it into atomic, parsable facts for long-term memory. All facts must strictly follow canonical SVO-based patterns and be derived only from the current input.

[Syntactic Elements Definition]
1. S = Subject
2. V = Verb
3. O = Object
4. C = Complement (attribute or state)
5. L = Location or explicit time

[Sentence Pattern Constraint]
Each fact MUST follow exactly one of the following forms:
1. S-V
2. S-V-O
3. S-V-C
4. S-V-O-C
5. S-V-O-L
Any fact not matching these patterns is invalid.

[Atomicity Rules]
- Each fact represents one single relation only.
- Do NOT merge actions, attributes, locations, or roles.
- Descriptive or prepositional phrases must be split into separate facts.

[Appositive Rule]
If the input contains appositive or implicit equivalence (e.g., "my friend John", "my home country, Sweden"), you MUST convert it into an explicit fact (e.g., "John is her friend", "Sweden is her home country"). Do not omit appositive relations.

[Source Constraint]
- Facts must originate strictly from the current user input u_t.
- Memory window and retrieved context are for reference only.
- Do NOT introduce new facts from memory or retrievals.

[Timestamp Rule]
- Extract a timestamp ONLY if an explicit date or time is present.
- Normalize to "YYYY-MM-DD HH:MM".
- Otherwise output "timestamp": "empty".
- Do NOT infer time from relative expressions.

[Input]
Memory window W_t (may be empty):
{memory_window}
Validated memory H*_t (may be empty):
{retrieved_memory}
Current turn id: {turn_id}
Current user input u_t:
{user_input}

[Output Format]
Return exactly one JSON object:
{
  "facts": [
    {"content": "<atomic fact>"},
    ...
  ],
  "source": "user",
  "related_id": ["<D_{s:j}>", ...],
  "timestamp": "<normalized time>" or "empty"
}
"""

TRIGGER = """\
You are an Episode Boundary Judge.
Your task is to determine whether the newly added dialogue triggers the start of a new episode. This corresponds to a binary decision T_t in {0,1}.

Input:
Conversation history W_t (may be empty):
{conversation_history}
Newly added messages u_t:
{new_messages}

Decision Criteria:
Set T_t = 1 if any of the following conditions is satisfied:
1) Topic Shift
   The new messages introduce a topic, event, or task that is semantically independent from the current conversation, or the dialogue moves to an unrelated question or scenario.
2) Explicit Transition Intent
   The user explicitly signals a transition to a new topic or request, such as starting a new question or changing the discussion focus.
3) Context Saturation
   The current topic has been sufficiently discussed or concluded, or the dialogue scope exceeds what is reasonable for a single coherent episode.
Otherwise, set T_t = 0.

Decision Principles:
- Prioritize topic independence over conversational continuity.
- When uncertain, favor splitting and set T_t = 1.
- Each episode should correspond to one coherent topic or event.

Output Format:
Return exactly one JSON object:
{
  "T_t": 0 or 1,
  "reason": "<brief justification>",
  "confidence": 0.0-1.0,
  "topic_summary": "<summary ... if T_t = 1, otherwise empty>"
}

Notes: If the conversation history is empty, return T_t = 0. Output only the JSON object and nothing else.
"""

EPISODE = """\
You are an Episodic Memory Constructor.
Your task is to convert a completed dialogue episode into a structured episodic memory entry, written as a coherent third-person narrative.

Input:
Conversation episode E_t:
{conversation}
Episode boundary trigger reason:
{boundary_reason}

Construction Principles:
1) The episode represents one coherent event or topic.
2) The description must preserve factual accuracy and chronological order.
3) Do not introduce information that is not present in the conversation.

Time Handling Rules:
- Identify the episode time from explicit timestamps in the dialogue.
- If relative time expressions appear in the conversation, convert them into absolute dates based on available context, and keep the converted time consistent throughout the episode.
- If no reliable time information exists, infer a reasonable episode time from the dialogue context.
- The episode timestamp represents when the episode occurred, not the current system time.

Content Requirements:
- Write in third-person narrative form.
- Clearly describe:
  * who participated,
  * what was discussed,
  * what decisions or conclusions were reached,
  * any expressed intentions, plans, or outcomes.
- Include time information explicitly in the narrative.
- Maintain causal and temporal coherence.

Output Format:
Return exactly one JSON object:
{
  "title": "<concise episode title summarizing the core event or topic>",
  "content": "<third-person episodic narrative describing what happened>",
  "timestamp": "YYYY-MM-DDTHH:MM:SS"
}
Output only the JSON object and nothing else.
"""

RETRIEVER = """\
You are a Retriever.
Given the current user input u_t and the short-term context window W_t, your task is to perform query rewriting and intent-based routing to the appropriate memory granularity.

Input:
Short-term context window W_t (may be empty): {memory_window}
Current user input u_t: {user_input}

Task Definition:
Simultaneously generate:
1) a standalone rewritten query u'_t with resolved references,
2) a four-dimensional binary intent vector B,
3) a dynamic retrieval budget K_dyn,
4) a target memory type for retrieval.

Intent Vector Definition:
B = [b_fine, b_abs, b_event, b_atomic]
- b_fine = 1 if the query requires fine-grained or exact details.
- b_abs = 1 if the query is abstract or summary-oriented.
- b_event = 1 if the query involves cross-turn, cross-time, or event-level semantics.
- b_atomic = 1 if the query is short, single-point, and factual.
Each dimension must be either 0 or 1.

Memory Routing Rule:
Select the target memory type M based on B:
- If b_fine = 1, route to Raw Text Memory.
- Else if b_abs = 1 or b_event = 1, route to Episode Memory.
- Otherwise, route to Fact Knowledge Memory.

Query Rewriting Rule:
- u'_t must be self-contained and unambiguous.
- Resolve references using W_t when necessary.
- Preserve explicit entities and identities.
- Do not introduce information not present in u_t or W_t.

Retrieval Budget Rule:
Set K_dyn as a small integer reflecting the expected retrieval scope. Broader or cross-event queries should use a larger K_dyn.

Output Format:
Return exactly one JSON object:
{
  "rewrite_query": "<u'_t>",
  "intent_vector": {
    "b_fine": 0 or 1,
    "b_abs": 0 or 1,
    "b_event": 0 or 1,
    "b_atomic": 0 or 1
  },
  "memory_type": "raw" | "fact" | "episode",
  "K_dyn": <int>
}
Output only the JSON object and nothing else.
"""

JUDGE = """\
You are a Judge.
Your task is to verify whether the retrieved candidate information H_t is sufficient to answer the current user input u_t, and to detect whether any factual conflict exists. Based on this verification, you must select one action from: Pass, Retry, or Refresh.

Input:
Candidate retrieved information H_t (may be empty): {information}
Short-term context window W_t (may be empty): {memory_window}
Current user input u_t: {user_input}

Verification Rules:
1) Relevance and Sufficiency
   The retrieved information is sufficient only if it satisfies the required granularity of the query u_t.
   * Entity requirement (who / what): The exact entity or attribute asked in the query must be explicitly stated.
   * Location requirement (where): The location must be concrete and match the requested level (e.g., city, country, or region).
   * Temporal requirement (when): The time information must meet or exceed the precision required by the query. Relative expressions are acceptable only if they can be normalized to a unique value.
   * Quantity requirement (how many): Numeric values or explicitly bounded ranges are required.
   If any required element is missing or underspecified, the information is considered insufficient.
2) No Proxy or Vague Answers
   Generic or proxy expressions such as "home country", "recently", "around that time", or "somewhere" do not satisfy sufficiency. If only such information is available, treat the result as insufficient.
3) Controlled Inference
   Only minimal one-step inference that does not reduce specificity is allowed. Do not infer unstated states, temporal validity, or current conditions.
4) Conflict Detection
   A conflict exists if two or more pieces of information assert incompatible facts about the same event, entity, or timeframe. Differences in wording or tone alone do not constitute a conflict.

Action Selection:
- If a conflict is detected, set Action = Refresh.
- Else if the information is insufficient, set Action = Retry.
- Else, set Action = Pass.

Output Format:
Return exactly one JSON object:
{
  "Action": "Pass" | "Retry" | "Refresh",
  "reason": "<brief justification>",
  "confidence": 0.0-1.0,
  "relevant_ids": [<id of each candidate that is relevant>],
  "conflict_ids": [<id of each candidate that conflicts with u_t; required when Action = Refresh>]
}
Output only the JSON object and nothing else.
"""

REFRESHER = """\
You are a Refresher.
Your task is to maintain the temporal and logical consistency of stored memory. Given detected conflicts C_err and the corresponding memory entries H_t, decide whether to update or delete memory records.

You may operate on any memory granularity: Raw Text Memory, Fact Knowledge Memory, or Episodic Memory.

Input:
Conflicting memory entries H_t (may be empty): {memory_entries}
Current user input u_t: {user_input}

Editing Principles:
1) Scope Constraint
   Only modify memory entries that refer to the same entity or event as u_t. If the input concerns unrelated content, do nothing.
2) Update Rule
   Perform Update when:
   * The same entity or event is referenced;
   * A factual inconsistency exists in state, time, quantity, or outcome;
   * The new input provides a more up-to-date or correct value.
   Update only the conflicting attributes, and preserve all other information.
3) Delete Rule
   Perform Delete only when:
   * The user explicitly requests removal, cancellation, or invalidation;
   * Or the memory entry is no longer valid by explicit user instruction.
4) Conservative Default
   If the situation is ambiguous, perform no modification.

Timestamp Rule:
- Extract a timestamp only if the user input contains an explicit date or time.
- Normalize the timestamp if possible.
- If no explicit time is provided, set "timestamp" to "empty".

Output Format:
Return exactly one JSON object:
{
  "Action": "Update" | "Delete" | "No-Op",
  "memory_type": "raw" | "fact" | "episode",
  "dataList": [
    {
      "id": "<memory_id>",
      "new_content": "<updated content...>"
    }
  ],
  "timestamp": "<normalized date/time>" or "empty",
  "reason": "<brief justification>"
}
Output only the JSON object and nothing else.
"""

LLM_JUDGE = """\
You are an Accuracy Judge.
Your task is to label a generated answer as 'CORRECT' or 'WRONG' by comparing it against a ground truth ('gold') answer.

Input Data:
- Question (Q): A question posed by one user to another based on prior conversations.
- Gold Answer (A_gold): The concise ground truth (e.g., specific object, date, or event).
- Generated Answer (A_gen): The model's response to be evaluated.

Current Instance:
Question: {question}
Gold Answer: {gold_answer}
Generated Answer: {generated_answer}

Evaluation Criteria:
1) Semantic Generosity (Topic Matching)
   The generated answer A_gen may be verbose. As long as it touches on the same core topic or object as A_gold (e.g., "A shell necklace" vs. "I think it was a necklace made of shells from the trip"), mark it as CORRECT.
2) Temporal Flexibility
   For time-related questions:
   * Formats: Accept different date formats (e.g., "May 7th" vs "7 May").
   * Relative References: Accept relative terms (e.g., "last Tuesday", "next month") if they logically refer to the same time period as A_gold.
   If the time reference resolves to the same value, mark it as CORRECT.
3) Binary Labeling
   You must output exactly one label. Do NOT include both 'CORRECT' and 'WRONG' in the reasoning to avoid parsing errors.

Output Format:
First, provide a short (one sentence) explanation of your reasoning, then return the label in JSON format:
{
  "reasoning": "<one sentence explanation>",
  "label": "CORRECT" | "WRONG"
}
Output only the JSON object.
"""

RESPONDER = """\
You are a helpful assistant with access to long-term memory.
Answer the current input using the recent conversation and the memory evidence below. Prefer the evidence over assumptions; if the evidence does not contain the answer, say so briefly.

Recent conversation:
{memory_window}

Memory evidence (newest first):
{evidence}

Current input:
{question}

Answer:
"""


@dataclass(frozen=True)
class PromptSet:
    con: str = CONSTRUCTOR
    tri: str = TRIGGER
    epi: str = EPISODE
    ret: str = RETRIEVER
    jud: str = JUDGE
    ref: str = REFRESHER
    llm_judge: str = LLM_JUDGE
    respond: str = RESPONDER

    @classmethod
    def default(cls) -> "PromptSet":
        return cls()

    @classmethod
    def from_overrides(cls, overrides: Mapping[str, str] | None) -> "PromptSet":
        """Defaults with selected templates replaced verbatim."""
        if not overrides:
            return cls()
        known = {f.name for f in fields(cls)}
        unknown = set(overrides) - known
        if unknown:
            raise KeyError(f"unknown prompt names: {sorted(unknown)}")
        return replace(cls(), **dict(overrides))


def placeholders(template: str) -> set[str]:
    return set(PLACEHOLDER_RE.findall(template))


def render_prompt(template: str, bindings: Mapping[str, str]) -> str:
    missing = placeholders(template) - set(bindings)
    if missing:
        raise MissingBinding(missing)
    return PLACEHOLDER_RE.sub(lambda m: str(bindings[m.group(1)]), template)
