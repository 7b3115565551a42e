"""Prompt rendering and response parsing for the five LLM agents.

Each agent's prompt lives as a UTF-8 template file under
``data/prompts`` with ``{{ placeholder }}`` markers; rendering is a
single-pass substitution. The parsers cover the three structured
response grammars: ``<search>`` tags, ``Judgement:`` verdict lines, and
(in lean_source) fenced code blocks. Pure logic, no I/O beyond reading
packaged template files.
"""

from __future__ import annotations

import hashlib
import re
from dataclasses import dataclass
from enum import Enum
from functools import lru_cache
from importlib import resources

from .errors import MissingVariable, NoJudgement, NoQueries
from .services import LeanError, VerificationResult

#: Cap on retrieved-theorem hints injected into decomposer prompts.
HINT_CAP = 20


class PromptKind(Enum):
    FORMALIZER = "formalizer"
    PROVER_INITIAL = "prover_initial"
    PROVER_CORRECTION = "prover_correction"
    SEMANTIC_CHECK = "semantic_check"
    QUERY_INITIAL = "query_initial"
    QUERY_BACKTRACK = "query_backtrack"
    DECOMPOSER_INITIAL = "decomposer_initial"
    DECOMPOSER_CORRECTION = "decomposer_correction"
    DECOMPOSER_BACKTRACK = "decomposer_backtrack"


@dataclass(frozen=True)
class PromptVars:
    """Values for the template placeholders; unused fields may stay None."""

    formal_statement_name: str | None = None
    informal_statement: str | None = None
    formal_statement: str | None = None
    formal_theorem: str | None = None
    prev_round_num: str | None = None
    error_message_for_prev_round: str | None = None
    theorem_hints_section: str | None = None


class Verdict(Enum):
    APPROPRIATE = "Appropriate"
    INAPPROPRIATE = "Inappropriate"


@dataclass(frozen=True)
class Judgement:
    verdict: Verdict
    rationale: str = ""


_PLACEHOLDER_RE = re.compile(r"\{\{\s*(\w+)\s*\}\}")


@lru_cache(maxsize=None)
def _template_text(kind: PromptKind) -> str:
    ref = resources.files("leandecomp.data.prompts") / f"{kind.value}.md"
    return ref.read_text(encoding="utf-8")


def render_prompt(kind: PromptKind, vars: PromptVars) -> str:
    """
    Fill a prompt template with the given variables.

    Substitution is single-pass: values containing ``{{`` are inserted
    verbatim, never re-expanded. Raises MissingVariable when the
    template references a field left as None.
    """
    template = _template_text(kind)

    def substitute(match: re.Match) -> str:
        name = match.group(1)
        value = getattr(vars, name, None)
        if value is None:
            raise MissingVariable(f"template {kind.value!r} needs variable {name!r}")
        return value

    return _PLACEHOLDER_RE.sub(substitute, template)


_SEARCH_RE = re.compile(r"<search>(.*?)</search>", re.DOTALL)


def parse_search_queries(response: str) -> list[str]:
    """
    Extract search queries from ``<search>…</search>`` tags, in order.

    Raises NoQueries when no non-empty tag is present.
    """
    queries = [m.strip() for m in _SEARCH_RE.findall(response)]
    queries = [q for q in queries if q]
    if not queries:
        raise NoQueries("completion contains no <search> tags")
    return queries


def parse_judgement(response: str) -> Judgement:
    """
    Parse the semantic checker's verdict.

    The last line starting with ``Judgement:`` wins, so chain-of-thought
    restatements of the expected format do not confuse the parse. The
    rationale is the text of the last ``Thought:`` line before the
    verdict, when present. Raises NoJudgement.
    """
    lines = response.splitlines()
    verdict = None
    verdict_idx = -1
    for idx, line in enumerate(lines):
        stripped = line.strip()
        if not stripped.lower().startswith("judgement:"):
            continue
        payload = stripped[len("judgement:") :].lower()
        # check the negative first: "inappropriate" contains "appropriate"
        if "inappropriate" in payload:
            verdict, verdict_idx = Verdict.INAPPROPRIATE, idx
        elif "appropriate" in payload:
            verdict, verdict_idx = Verdict.APPROPRIATE, idx
    if verdict is None:
        raise NoJudgement("completion contains no parseable Judgement line")
    rationale = ""
    for line in lines[:verdict_idx]:
        stripped = line.strip()
        if stripped.lower().startswith("thought:"):
            rationale = stripped[len("thought:") :].strip()
    return Judgement(verdict=verdict, rationale=rationale)


def generate_theorem_name(informal: str) -> str:
    """Stable content-digest name, e.g. ``theorem_b2f45cfb951a``."""
    digest = hashlib.sha256(informal.strip().encode("utf-8")).hexdigest()
    return "theorem_" + digest[:12]


def _span_offsets(code: str, span) -> tuple[int, int] | None:
    """Convert a 1-based (line, column) span to byte offsets into code."""
    line_starts = [0]
    for idx, ch in enumerate(code):
        if ch == "\n":
            line_starts.append(idx + 1)
    (l1, c1), (l2, c2) = span
    if not (1 <= l1 <= len(line_starts) and 1 <= l2 <= len(line_starts)):
        return None
    start = line_starts[l1 - 1] + (c1 - 1)
    end = line_starts[l2 - 1] + (c2 - 1)
    if start > len(code) or end > len(code) or end < start:
        return None
    return start, end


def build_error_annotation(code: str, result: VerificationResult) -> str:
    """
    Reproduce code with ``<error></error>`` around each reported span,
    then append the error messages. Feeds the correction prompts'
    ``error_message_for_prev_round`` variable.

    Unpositioned errors contribute only trailing messages; an empty
    error list degenerates to an "unknown error" trailer.
    """
    annotated = code
    positioned: list[tuple[tuple[int, int], LeanError]] = []
    for err in result.errors:
        offsets = _span_offsets(code, err.span) if err.span else None
        if offsets:
            positioned.append((offsets, err))
    # insert from the end so earlier offsets stay valid
    for (start, end), _ in sorted(positioned, key=lambda p: p[0][0], reverse=True):
        annotated = annotated[:start] + "<error>" + annotated[start:end] + "</error>" + annotated[end:]
    messages = [err.message for err in result.errors if err.message]
    if not messages:
        messages = ["unknown error"]
    return annotated + "\n\nErrors:\n" + "\n".join(f"- {m}" for m in messages)


def format_theorem_hints(hits) -> str:
    """
    Render retrieved theorems as the decomposer's hint list.

    Accepts TheoremHit objects or (name, statement) pairs; capped at
    HINT_CAP entries to bound prompt size. Empty input yields a short
    placeholder line so templates never render an empty section.
    """
    lines = []
    for hit in list(hits)[:HINT_CAP]:
        if hasattr(hit, "full_name"):
            name, statement = hit.full_name, hit.statement
        else:
            name, statement = hit
        lines.append(f"- {name} : {' '.join(statement.split())}")
    if not lines:
        return "(no potentially useful theorems were found)"
    return "Potentially useful theorems:\n\n" + "\n".join(lines)
