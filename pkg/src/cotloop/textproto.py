"""Prompt rendering, think/answer parsing, leak detection, format gates.

Everything here is pure string work. Low-level parsers raise
MalformedAnswer; ParsedOutput.from_text captures the failure as a value
so scoring never aborts on bad model text.
"""

from __future__ import annotations

import ast
import re
from dataclasses import dataclass
from importlib import resources
from typing import Optional

from .domain import (Annotation, Box, BoxSet, Classification, Detection,
                     Distribution, TaskKind, validate_annotation)
from .errors import MalformedAnswer, MissingVariable, TemplateError

PLACEHOLDER_RE = re.compile(r"\{([A-Za-z_][A-Za-z0-9_]*)\}")

STAGE_VARS = {
    "reasoning": {"prob_distribution", "bbox", "target"},
    "reconstruction": {"CoTs", "target", "categories"},
    "r1": {"target", "categories"},
}


@dataclass(frozen=True)
class PromptTemplate:
    id: str
    task: str      # "classification" | "detection"
    stage: str     # "reasoning" | "reconstruction" | "r1"
    body: str

    def __post_init__(self):
        if self.stage not in STAGE_VARS:
            raise TemplateError(f"unknown stage: {self.stage!r}")
        bad = set(self.placeholders()) - STAGE_VARS[self.stage]
        if bad:
            raise TemplateError(
                f"placeholders {sorted(bad)} not allowed in stage {self.stage!r}")

    def placeholders(self) -> list[str]:
        return PLACEHOLDER_RE.findall(self.body)


def load_template(task: str, stage: str) -> PromptTemplate:
    """Load a shipped template file, one per (task, stage)."""
    name = f"{task}_{stage}.txt"
    body = resources.files("cotloop.templates").joinpath(name).read_text(encoding="utf-8")
    return PromptTemplate(id=f"{task}/{stage}", task=task, stage=stage, body=body.rstrip("\n"))


def render_prompt(template: PromptTemplate, variables: dict[str, str]) -> str:
    """Exact placeholder substitution; the body is otherwise untouched."""
    def sub(m: re.Match) -> str:
        name = m.group(1)
        if name not in variables:
            raise MissingVariable(name)
        return variables[name]

    return PLACEHOLDER_RE.sub(sub, template.body)


# --- think/answer extraction -------------------------------------------------

_ANSWER_RE = re.compile(r"<answer>(.*?)</answer>", re.IGNORECASE | re.DOTALL)
_THINK_RE = re.compile(r"<think>(.*?)</think>", re.IGNORECASE | re.DOTALL)


def parse_think_answer(text: str) -> tuple[Optional[str], str]:
    """Extract the first <think> pair (optional) and first <answer> pair.

    Tag matching is case-insensitive; surrounding prose and code fences
    are ignored. Raises MalformedAnswer when no answer pair exists.
    """
    m_answer = _ANSWER_RE.search(text)
    if m_answer is None:
        raise MalformedAnswer("no <answer>...</answer> section found")
    m_think = _THINK_RE.search(text)
    think = m_think.group(1) if m_think else None
    return think, m_answer.group(1)


# --- answer-body parsers -----------------------------------------------------

def _first_balanced(text: str, open_ch: str, close_ch: str) -> str:
    start = text.find(open_ch)
    if start < 0:
        raise MalformedAnswer(f"no {open_ch}...{close_ch} literal found")
    depth = 0
    for i in range(start, len(text)):
        if text[i] == open_ch:
            depth += 1
        elif text[i] == close_ch:
            depth -= 1
            if depth == 0:
                return text[start:i + 1]
    raise MalformedAnswer(f"unbalanced {open_ch} literal")


def _as_number(v) -> float:
    if isinstance(v, bool) or not isinstance(v, (int, float)):
        raise MalformedAnswer(f"non-numeric value: {v!r}")
    return float(v)


def parse_distribution_answer(answer_raw: str, categories) -> Distribution:
    """Parse a map literal into a Distribution over exactly the task's categories.

    Quoting style and key order are free; the category set is not.
    No sum constraint is enforced here.
    """
    literal = _first_balanced(answer_raw, "{", "}")
    try:
        obj = ast.literal_eval(literal)
    except (ValueError, SyntaxError) as e:
        raise MalformedAnswer(f"unparseable map literal: {e}") from e
    if not isinstance(obj, dict):
        raise MalformedAnswer("answer literal is not a map")
    got = {str(k): _as_number(v) for k, v in obj.items()}
    want = set(categories)
    missing = sorted(want - set(got))
    extra = sorted(set(got) - want)
    if missing or extra:
        raise MalformedAnswer(f"category set mismatch: missing={missing} extra={extra}")
    for cat, v in got.items():
        if v < 0:
            raise MalformedAnswer(f"negative probability for {cat!r}: {v}")
    return Distribution(got)


def parse_box_answer(answer_raw: str) -> tuple[BoxSet, bool]:
    """Parse one [x1,y1,x2,y2] tuple, or a list of them, into a BoxSet.

    Swapped corners are auto-normalized (min/max) and negative
    coordinates clamped to 0; the second return value flags whether any
    normalization happened.
    """
    literal = _first_balanced(answer_raw, "[", "]")
    try:
        obj = ast.literal_eval(literal)
    except (ValueError, SyntaxError) as e:
        raise MalformedAnswer(f"unparseable box literal: {e}") from e
    if not isinstance(obj, (list, tuple)):
        raise MalformedAnswer("answer literal is not a list")
    if len(obj) > 0 and all(isinstance(x, (list, tuple)) for x in obj):
        tuples = obj
    else:
        tuples = [obj]
    boxes = []
    normalized = False
    for t in tuples:
        if not isinstance(t, (list, tuple)) or len(t) != 4:
            raise MalformedAnswer(f"box tuple must have 4 numbers, got {t!r}")
        x1, y1, x2, y2 = (_as_number(v) for v in t)
        cx1, cy1 = max(x1, 0.0), max(y1, 0.0)
        cx2, cy2 = max(x2, 0.0), max(y2, 0.0)
        nx1, nx2 = min(cx1, cx2), max(cx1, cx2)
        ny1, ny2 = min(cy1, cy2), max(cy1, cy2)
        if (nx1, ny1, nx2, ny2) != (x1, y1, x2, y2):
            normalized = True
        boxes.append(Box(nx1, ny1, nx2, ny2))
    return BoxSet(tuple(boxes)), normalized


def parse_answer_for_task(answer_raw: str, task: TaskKind) -> Annotation:
    if isinstance(task, Classification):
        return parse_distribution_answer(answer_raw, task.categories)
    boxset, _ = parse_box_answer(answer_raw)
    return boxset


# --- leakage detection -------------------------------------------------------

_ENUMERATOR_RE = re.compile(r"(?m)^\s*\d+[.)]\s*")
_DECIMAL_01_RE = re.compile(r"(?<![\d.])(?:0?\.\d+|1\.0+)(?!\d)")
_PERCENT_RE = re.compile(r"\b\d+(?:\.\d+)?\s*%")
_BRACKET_TUPLE_RE = re.compile(
    r"\[\s*-?\d+(?:\.\d+)?(?:\s*,\s*-?\d+(?:\.\d+)?)+\s*\]")
_COORD_RUN_RE = re.compile(
    r"(?<![\w.])[1-9]\d+(?:\s*,\s*|\s+)[1-9]\d+(?:(?:\s*,\s*|\s+)[1-9]\d+)*")
_XY_TOKEN_RE = re.compile(r"\b[xy][12]\b", re.IGNORECASE)
_DIRECTIONAL_RE = re.compile(
    r"\b(?:top|bottom|upper|lower)[-\s](?:left|right)\b", re.IGNORECASE)


def detect_leak(cot: str, task: TaskKind) -> tuple[bool, list[str]]:
    """Pattern-table leak check for annotation specifics inside a CoT.

    Line-initial list enumerators ("1.", "2)") are exempt in both tasks;
    spelled-out number words never count as leaks.
    """
    text = _ENUMERATOR_RE.sub("", cot)
    evidence: list[str] = []
    if isinstance(task, Classification):
        evidence += [m.group(0) for m in _DECIMAL_01_RE.finditer(text)]
        evidence += [m.group(0) for m in _PERCENT_RE.finditer(text)]
        for cat in task.categories:
            pair_re = re.compile(rf"\b{re.escape(cat)}\b\s*[:=]\s*\d", re.IGNORECASE)
            evidence += [m.group(0) for m in pair_re.finditer(text)]
    else:
        evidence += [m.group(0) for m in _BRACKET_TUPLE_RE.finditer(text)]
        evidence += [m.group(0) for m in _COORD_RUN_RE.finditer(text)]
        evidence += [m.group(0) for m in _XY_TOKEN_RE.finditer(text)]
        evidence += [m.group(0) for m in _DIRECTIONAL_RE.finditer(text)]
    return bool(evidence), evidence


# --- format gates ------------------------------------------------------------

MIN_NARRATIVE_CHARS = 15


def _is_bare_literal(text: str) -> bool:
    stripped = text.strip()
    if not stripped or stripped[0] not in "{[(":
        return False
    try:
        ast.literal_eval(stripped)
        return True
    except (ValueError, SyntaxError):
        return False


def validate_f_cot(cot: str, reconstruction: Optional[Annotation]) -> bool:
    """Closed-loop format gate: descriptive narrative + parsed reconstruction."""
    narrative = cot.strip()
    if len(narrative) < MIN_NARRATIVE_CHARS:
        return False
    if _is_bare_literal(narrative):
        return False
    return reconstruction is not None


def validate_f_r1(raw_model_output: str, task: TaskKind) -> bool:
    """Think-answer format gate: non-empty think, then a parseable answer."""
    m_think = _THINK_RE.search(raw_model_output)
    m_answer = _ANSWER_RE.search(raw_model_output)
    if m_think is None or m_answer is None:
        return False
    if m_think.start() > m_answer.start():
        return False
    if not m_think.group(1).strip():
        return False
    try:
        answer = parse_answer_for_task(m_answer.group(1), task)
    except MalformedAnswer:
        return False
    return not validate_annotation(answer, task)


@dataclass(frozen=True)
class ParsedOutput:
    """Outcome of parsing one raw model output against a task."""

    think: Optional[str]
    answer_raw: str
    answer: Optional[Annotation]
    error: Optional[str] = None

    @classmethod
    def from_text(cls, text: str, task: TaskKind) -> "ParsedOutput":
        try:
            think, answer_raw = parse_think_answer(text)
        except MalformedAnswer as e:
            return cls(think=None, answer_raw="", answer=None, error=str(e))
        try:
            answer = parse_answer_for_task(answer_raw, task)
        except MalformedAnswer as e:
            return cls(think=think, answer_raw=answer_raw, answer=None, error=str(e))
        violations = validate_annotation(answer, task)
        if violations:
            return cls(think=think, answer_raw=answer_raw, answer=None,
                       error="; ".join(violations))
        return cls(think=think, answer_raw=answer_raw, answer=answer)
