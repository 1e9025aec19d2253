"""Model backend interface, prompt templates, and the envelope grammar.

Every model interaction goes through :class:`ModelBackend.generate` with
an explicit purpose tag, so a scripted backend can stand in for a live
model and make whole runs deterministic. The dual envelope grammar
accepts both the JSON object form::

    {"think": "...", "tools": [{"name": "web_search", "arguments": {...}}]}

and the tagged form::

    <think>...</think><tools>[...]</tools>

with ``plan`` and ``summary`` as the other phase tags.
"""

from __future__ import annotations

import json
import os
import re
import threading
from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from functools import lru_cache
from importlib import resources
from typing import Mapping, Optional, Sequence

from .errors import (
    BackendUnavailable,
    EnvelopeParseError,
    JudgeParseError,
    ScriptExhausted,
    UnboundPlaceholder,
)
from .tools import FINAL_ANSWER, ToolCall, ToolSpec

PURPOSE_PLAN = "plan"
PURPOSE_ACT = "act"
PURPOSE_SUMMARIZE = "summarize"
PURPOSE_JUDGE = "judge"
PURPOSE_SUMMARIZE_PAGE = "summarize_page"

PHASES = ("plan", "think", "summary")


@dataclass(frozen=True)
class DialogueTurn:
    role: str  # system | user | assistant | tool
    content: str


class ModelBackend(ABC):
    """A text-in/text-out model slot; implementations must tolerate
    concurrent ``generate`` calls."""

    @abstractmethod
    def generate(self, turns: Sequence[DialogueTurn], purpose: str) -> str:
        raise NotImplementedError


class ScriptedBackend(ModelBackend):
    """Replays a fixed list of (purpose, reply) pairs, in order.

    Purpose mismatches and exhaustion raise immediately: in tests they
    mean the engine asked for something the script did not anticipate.
    The cursor is lock-protected, so concurrent calls serialize (a
    test-only constraint; live backends are independent requests).
    """

    def __init__(self, script: Sequence[tuple[str, str]]):
        self._script = list(script)
        self._cursor = 0
        self._lock = threading.Lock()

    def generate(self, turns: Sequence[DialogueTurn], purpose: str) -> str:
        with self._lock:
            if self._cursor >= len(self._script):
                raise ScriptExhausted(f"script exhausted; extra {purpose!r} request")
            expected, reply = self._script[self._cursor]
            if expected != purpose:
                raise ScriptExhausted(
                    f"script expected purpose {expected!r} at index {self._cursor}, got {purpose!r}"
                )
            self._cursor += 1
            return reply

    @property
    def remaining(self) -> int:
        return len(self._script) - self._cursor


class HttpChatBackend(ModelBackend):
    """Generic chat-completions client for a live model endpoint.

    The wire shape is POST ``{base_url}/chat/completions`` with
    ``{"model", "messages", "temperature"}`` plus any opaque ``extra``
    fields (e.g. a reasoning-effort setting some models accept).
    """

    def __init__(
        self,
        base_url: str,
        model: str,
        api_key_env: Optional[str] = None,
        temperature: float = 1.0,
        timeout: float = 180.0,
        extra: Optional[dict] = None,
        session=None,
    ):
        import requests

        self.base_url = base_url.rstrip("/")
        self.model = model
        self.api_key_env = api_key_env
        self.temperature = temperature
        self.timeout = timeout
        self.extra = dict(extra or {})
        self._http = session or requests.Session()

    def generate(self, turns: Sequence[DialogueTurn], purpose: str) -> str:
        import requests

        headers = {"Content-Type": "application/json"}
        if self.api_key_env:
            key = os.environ.get(self.api_key_env, "")
            if not key:
                raise BackendUnavailable(f"API key env var {self.api_key_env} is not set")
            headers["Authorization"] = f"Bearer {key}"
        # Chat endpoints know no "tool" role in our plain-text protocol;
        # observation turns travel as user messages.
        messages = [
            {"role": ("user" if t.role == "tool" else t.role), "content": t.content}
            for t in turns
        ]
        payload = {"model": self.model, "messages": messages, "temperature": self.temperature}
        payload.update(self.extra)
        try:
            response = self._http.post(
                f"{self.base_url}/chat/completions", json=payload, headers=headers, timeout=self.timeout
            )
        except requests.RequestException as exc:
            raise BackendUnavailable(str(exc)) from exc
        if response.status_code >= 400:
            raise BackendUnavailable(f"{response.status_code}: {response.text[:200]}")
        try:
            return response.json()["choices"][0]["message"]["content"]
        except (KeyError, IndexError, ValueError) as exc:
            raise BackendUnavailable(f"malformed completion payload: {exc}") from exc


# ---------------------------------------------------------------------------
# Prompt templates
# ---------------------------------------------------------------------------

# Declared placeholders per shipped template. Rendering replaces only
# these tokens, so literal braces elsewhere in the prompt bodies (JSON
# examples, schema snippets) survive untouched.
TEMPLATE_PLACEHOLDERS: dict[str, frozenset[str]] = {
    "system": frozenset({"tools"}),
    "dag_plan": frozenset({"task", "tools"}),
    "execution": frozenset({"task", "tools", "max_tool_calls"}),
    "summary_system": frozenset(),
    "summary_instruction": frozenset(),
    "judge": frozenset({"question", "gold_answer", "predicted_answer"}),
    "sft_system": frozenset(),
    "page_summary": frozenset({"query", "content"}),
}


@dataclass(frozen=True)
class PromptTemplate:
    name: str
    body: str
    placeholders: frozenset[str] = field(default_factory=frozenset)


@lru_cache(maxsize=None)
def load_template(name: str) -> PromptTemplate:
    """Load a shipped template by name from the package's prompts/ data."""
    if name not in TEMPLATE_PLACEHOLDERS:
        raise KeyError(f"unknown template {name!r}")
    body = resources.files("dagent").joinpath(f"prompts/{name}.txt").read_text(encoding="utf-8")
    return PromptTemplate(name=name, body=body, placeholders=TEMPLATE_PLACEHOLDERS[name])


def render_prompt(template: PromptTemplate, bindings: Mapping[str, str]) -> str:
    """Exact textual substitution of the declared placeholders.

    Raises :class:`UnboundPlaceholder` when any declared placeholder is
    missing from ``bindings``.
    """
    missing = sorted(template.placeholders - set(bindings))
    if missing:
        raise UnboundPlaceholder(
            f"template {template.name!r} is missing bindings for: {', '.join(missing)}"
        )
    text = template.body
    for key in sorted(template.placeholders):
        text = text.replace("{" + key + "}", str(bindings[key]))
    return text


def render_tool_schemas(specs: Sequence[ToolSpec]) -> str:
    """The tool list block embedded in prompts, one entry per tool."""
    blocks = []
    for spec in specs:
        blocks.append(
            f"- {spec.name}: {spec.description}\n\n"
            f"    Takes inputs: {spec.inputs!r}\n\n"
            f"    Returns an output of type: {spec.output_type}"
        )
    return "\n\n".join(blocks)


# ---------------------------------------------------------------------------
# Action envelopes
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ActionEnvelope:
    """One assistant turn: a phase marker plus its tool calls.

    Parsed (act-phase) envelopes always carry 1-5 calls; plan and
    summary records the engine synthesizes itself carry none.
    """

    phase: str  # plan | think | summary
    phase_text: str
    tool_calls: tuple[ToolCall, ...] = ()

    @property
    def final_answer_call(self) -> Optional[ToolCall]:
        for call in self.tool_calls:
            if call.name == FINAL_ANSWER:
                return call
        return None


_TAGGED_PHASE_RE = re.compile(r"<(think|plan|summary)>(.*?)</\1>", re.DOTALL)
_TOOLS_OPEN_RE = re.compile(r"<tools>")
_TOOLS_CLOSE_RE = re.compile(r"</tools>")
_FENCE_RE = re.compile(r"^```[a-zA-Z]*\n(.*)\n```$", re.DOTALL)


def _tagged_tools_body(text: str) -> Optional[str]:
    """Extract the JSON body of a <tools> block.

    A closing tag may legitimately appear inside a JSON string value, so
    candidate closing positions are tried in order until one yields
    parseable JSON; the raw (unparsed) first candidate is returned when
    none does, so the caller reports a useful span.
    """
    open_match = _TOOLS_OPEN_RE.search(text)
    if not open_match:
        return None
    start = open_match.end()
    candidates = [m.start() for m in _TOOLS_CLOSE_RE.finditer(text, start)]
    if not candidates:
        return None
    for end in candidates:
        body = text[start:end].strip()
        try:
            json.loads(body)
        except json.JSONDecodeError:
            continue
        return body
    return text[start : candidates[0]].strip()


def _strip_fence(text: str) -> str:
    m = _FENCE_RE.match(text.strip())
    return m.group(1) if m else text.strip()


def _coerce_call(item, span: str) -> ToolCall:
    if not isinstance(item, dict) or "name" not in item:
        raise EnvelopeParseError("tool call items need a 'name'", span)
    name = str(item["name"])
    arguments = item.get("arguments", {})
    if isinstance(arguments, str):
        # The prompt examples allow a bare answer string for final_answer.
        if name != FINAL_ANSWER:
            raise EnvelopeParseError(f"string arguments only allowed for {FINAL_ANSWER}", span)
        arguments = {"answer": arguments}
    if not isinstance(arguments, dict):
        raise EnvelopeParseError("arguments must be an object", span)
    clean: dict[str, str] = {}
    for key, value in arguments.items():
        clean[str(key)] = value if isinstance(value, str) else json.dumps(value, ensure_ascii=False)
    return ToolCall(name=name, arguments=clean)


def _validate_calls(calls: list[ToolCall], max_calls: int, span: str) -> tuple[ToolCall, ...]:
    if not calls:
        raise EnvelopeParseError("envelope carries no tool calls", span)
    if len(calls) > max_calls:
        raise EnvelopeParseError(f"{len(calls)} tool calls exceed the cap of {max_calls}", span)
    if any(c.name == FINAL_ANSWER for c in calls) and len(calls) > 1:
        raise EnvelopeParseError(f"{FINAL_ANSWER} must be the only call in its envelope", span)
    return tuple(calls)


def parse_envelope(reply: str, max_calls: int = 5) -> ActionEnvelope:
    """Parse a model reply in either accepted grammar into an envelope.

    A reply that is one complete JSON object is taken in the object
    form (tag-like text inside its strings stays inert); anything else
    goes through the tagged grammar. Enforces 1..``max_calls`` tool
    calls and final-answer exclusivity.
    """
    text = _strip_fence(reply)

    try:
        obj = json.loads(text)
    except json.JSONDecodeError:
        obj = None
    if isinstance(obj, dict):
        if "tools" not in obj:
            raise EnvelopeParseError("JSON reply needs a 'tools' array", text[:200])
        phase = next((p for p in ("think", "plan", "summary") if p in obj), None)
        if phase is None:
            raise EnvelopeParseError("JSON reply needs a think/plan/summary field", text[:200])
        items = obj["tools"]
        if not isinstance(items, list):
            raise EnvelopeParseError("'tools' must be a JSON array", text[:200])
        calls = [_coerce_call(item, text[:200]) for item in items]
        return ActionEnvelope(
            phase=phase,
            phase_text=str(obj[phase]).strip(),
            tool_calls=_validate_calls(calls, max_calls, text[:200]),
        )

    raw = _tagged_tools_body(text)
    if raw is None:
        raise EnvelopeParseError("reply is neither tagged nor a JSON object", text[:200])
    phase_match = _TAGGED_PHASE_RE.search(text)
    if not phase_match:
        raise EnvelopeParseError("tagged reply is missing a phase tag", text[:120])
    try:
        items = json.loads(raw)
    except json.JSONDecodeError as exc:
        raise EnvelopeParseError(f"tools block is not JSON: {exc}", raw[:200])
    if not isinstance(items, list):
        raise EnvelopeParseError("tools block must be a JSON array", raw[:200])
    calls = [_coerce_call(item, raw[:200]) for item in items]
    return ActionEnvelope(
        phase=phase_match.group(1),
        phase_text=phase_match.group(2).strip(),
        tool_calls=_validate_calls(calls, max_calls, raw[:200]),
    )


def serialize_tool_calls(calls: Sequence[ToolCall]) -> str:
    return json.dumps(
        [{"name": c.name, "arguments": dict(c.arguments)} for c in calls],
        ensure_ascii=False,
        separators=(", ", ": "),
    )


def serialize_envelope(envelope: ActionEnvelope) -> str:
    """Canonical tagged form; re-parsing yields the same envelope."""
    text = f"<{envelope.phase}>{envelope.phase_text}</{envelope.phase}>"
    if envelope.tool_calls:
        text += f"<tools>{serialize_tool_calls(envelope.tool_calls)}</tools>"
    return text


# ---------------------------------------------------------------------------
# LLM-as-judge
# ---------------------------------------------------------------------------

JUDGEMENT_CORRECT = "correct"
JUDGEMENT_INCORRECT = "incorrect"


@dataclass(frozen=True)
class JudgeVerdict:
    judgement: str
    rationale: str

    @property
    def is_correct(self) -> bool:
        return self.judgement == JUDGEMENT_CORRECT


def _extract_json_object(text: str) -> dict:
    text = _strip_fence(text)
    decoder = json.JSONDecoder()
    for start, ch in enumerate(text):
        if ch != "{":
            continue
        try:
            obj, _ = decoder.raw_decode(text[start:])
        except json.JSONDecodeError:
            continue
        if isinstance(obj, dict):
            return obj
    raise JudgeParseError(f"no JSON object in judge reply: {text[:200]!r}")


def judge(question: str, gold: str, predicted: str, backend: ModelBackend) -> JudgeVerdict:
    """Binary equivalence check between a predicted and a labeled answer.

    The judgement string must be exactly 'correct' or 'incorrect';
    anything else raises :class:`JudgeParseError`.
    """
    for label, value in (("question", question), ("gold", gold), ("predicted", predicted)):
        if not str(value).strip():
            raise ValueError(f"judge requires a non-empty {label}")
    prompt = render_prompt(
        load_template("judge"),
        {"question": question, "gold_answer": gold, "predicted_answer": predicted},
    )
    reply = backend.generate([DialogueTurn("user", prompt)], PURPOSE_JUDGE)
    obj = _extract_json_object(reply)
    judgement = obj.get("judgement")
    if judgement not in (JUDGEMENT_CORRECT, JUDGEMENT_INCORRECT):
        raise JudgeParseError(f"judgement must be 'correct' or 'incorrect', got {judgement!r}")
    return JudgeVerdict(judgement=judgement, rationale=str(obj.get("rationale", "")))


def page_summarizer(backend: ModelBackend):
    """Summarize-page callable for the crawl tool, backed by a model."""
    template = load_template("page_summary")

    def summarize(content: str, query: str) -> str:
        prompt = render_prompt(template, {"query": query, "content": content})
        return backend.generate([DialogueTurn("user", prompt)], PURPOSE_SUMMARIZE_PAGE)

    return summarize
