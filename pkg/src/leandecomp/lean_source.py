"""Deterministic text-level manipulation of Lean 4 source.

Covers the operations the proving pipeline needs without a real Lean
parser: splitting a unit into preamble and body, normalizing preambles,
pulling tactic bodies out of declarations, splicing sub-proofs into
sketch placeholders, and counting ``sorry`` tokens. Everything here is a
pure function over immutable inputs.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

from .errors import AmbiguousSubgoal, NoByBlock, NoCodeBlock, SubgoalNotFound

#: Header lines every formal artifact is required to carry, in order.
CANONICAL_PREAMBLE_LINES = (
    "import Mathlib",
    "import Aesop",
    "set_option maxHeartbeats 0",
    "open BigOperators Real Nat Topology Rat",
)

#: Line-initial keywords that may appear in a preamble.
HEADER_KEYWORDS = frozenset({"import", "open", "set_option", "variable", "variables"})

#: Line-initial keywords that start the body of a unit.
DECLARATION_KEYWORDS = frozenset(
    {"theorem", "lemma", "def", "example", "abbrev", "instance", "structure", "inductive", "axiom"}
)

_OPEN_BRACKETS = "([{⟨"
_CLOSE_BRACKETS = ")]}⟩"

_FENCE_RE = re.compile(r"```(?:lean4|lean)[ \t]*\r?\n(.*?)```", re.DOTALL)


@dataclass(frozen=True)
class LeanSource:
    """A Lean unit split into a header preamble and a declaration body."""

    preamble: str
    body: str

    def combined(self) -> str:
        """Recombine preamble and body into a compilable unit."""
        if not self.preamble.strip():
            return self.body
        return self.preamble.rstrip("\n") + "\n\n" + self.body


@dataclass(frozen=True)
class CanonicalPreamble:
    """A normalized preamble: the canonical block plus deduplicated extras."""

    lines: tuple[str, ...]

    @property
    def text(self) -> str:
        return "\n".join(self.lines)


@dataclass(frozen=True)
class Token:
    """A code token with byte offsets and the bracket depth at its start."""

    text: str
    start: int
    end: int
    depth: int


def _is_word_char(ch: str) -> bool:
    return ch.isalnum() or ch in "_'!?"


def tokenize(code: str) -> list[Token]:
    """
    Tokenize Lean code, skipping comments and string literals.

    Line comments (``--``), nested block comments (``/- -/``) and string
    literals produce no tokens. Bracket depth tracks ``()[]{}⟨⟩``.
    ``:=`` is emitted as a single token; identifier-like runs (including
    ``'`` as in ``cases'``) are kept together.
    """
    tokens: list[Token] = []
    i, n = 0, len(code)
    depth = 0
    while i < n:
        ch = code[i]
        if code.startswith("--", i):
            nl = code.find("\n", i)
            i = n if nl < 0 else nl
            continue
        if code.startswith("/-", i):
            level = 1
            i += 2
            while i < n and level:
                if code.startswith("/-", i):
                    level += 1
                    i += 2
                elif code.startswith("-/", i):
                    level -= 1
                    i += 2
                else:
                    i += 1
            continue
        if ch == '"':
            i += 1
            while i < n:
                if code[i] == "\\":
                    i += 2
                elif code[i] == '"':
                    i += 1
                    break
                else:
                    i += 1
            continue
        if ch.isspace():
            i += 1
            continue
        if code.startswith(":=", i):
            tokens.append(Token(":=", i, i + 2, depth))
            i += 2
            continue
        if ch in _OPEN_BRACKETS:
            tokens.append(Token(ch, i, i + 1, depth))
            depth += 1
            i += 1
            continue
        if ch in _CLOSE_BRACKETS:
            depth = max(0, depth - 1)
            tokens.append(Token(ch, i, i + 1, depth))
            i += 1
            continue
        if _is_word_char(ch):
            j = i + 1
            while j < n and _is_word_char(code[j]):
                j += 1
            tokens.append(Token(code[i:j], i, j, depth))
            i = j
            continue
        tokens.append(Token(ch, i, i + 1, depth))
        i += 1
    return tokens


def _line_outside_comments(line: str, block_depth: int) -> tuple[str, int]:
    """Return the non-comment content of one line and the new block-comment depth."""
    out: list[str] = []
    i, n = 0, len(line)
    while i < n:
        if block_depth > 0:
            if line.startswith("/-", i):
                block_depth += 1
                i += 2
            elif line.startswith("-/", i):
                block_depth -= 1
                i += 2
            else:
                i += 1
            continue
        if line.startswith("--", i):
            break
        if line.startswith("/-", i):
            block_depth += 1
            i += 2
            continue
        out.append(line[i])
        i += 1
    return "".join(out), block_depth


def split_source(code: str) -> LeanSource:
    """
    Split a Lean unit into preamble and body.

    The preamble is the maximal prefix of lines that are imports,
    ``open``, ``set_option``, ``variable``, comments, or blank; the body
    is the remainder, starting at the first declaration line. A unit
    with no declaration yields an empty body.
    """
    offset = 0
    block_depth = 0
    for line in code.splitlines(keepends=True):
        content, new_depth = _line_outside_comments(line, block_depth)
        stripped = content.strip()
        if stripped and stripped.split()[0] not in HEADER_KEYWORDS:
            break
        offset += len(line)
        block_depth = new_depth
    preamble = code[:offset].rstrip()
    body = code[offset:]
    return LeanSource(preamble=preamble, body=body)


def normalize_preamble(preamble: str) -> CanonicalPreamble:
    """
    Normalize a preamble to the canonical header block.

    The canonical lines always come first, in order; any extra
    user-supplied lines (additional imports, opens, variables, comments)
    follow, deduplicated, in order of first appearance. Idempotent.
    """
    canonical = set(CANONICAL_PREAMBLE_LINES)
    extras: list[str] = []
    seen: set[str] = set()
    for raw in preamble.splitlines():
        line = raw.strip()
        if not line or line in canonical or line in seen:
            continue
        seen.add(line)
        extras.append(line)
    lines = [
        CANONICAL_PREAMBLE_LINES[0],
        CANONICAL_PREAMBLE_LINES[1],
        "",
        CANONICAL_PREAMBLE_LINES[2],
        "",
        CANONICAL_PREAMBLE_LINES[3],
    ]
    if extras:
        lines.append("")
        lines.extend(extras)
    return CanonicalPreamble(lines=tuple(lines))


def _dedent_tail(tail: str) -> str:
    """Dedent the text following a ``by`` / ``:=`` token, preserving relative indentation."""
    if "\n" in tail:
        head, rest = tail.split("\n", 1)
        lines = rest.split("\n")
    else:
        head, lines = tail, []
    head = head.strip()
    while lines and not lines[0].strip():
        lines.pop(0)
    while lines and not lines[-1].strip():
        lines.pop()
    if lines:
        cut = min(len(ln) - len(ln.lstrip(" ")) for ln in lines if ln.strip())
        lines = [ln[cut:] if ln.strip() else "" for ln in lines]
    if head and lines:
        return "\n".join([head, *lines])
    if head:
        return head
    return "\n".join(lines)


def _first_top_level_assign(proof: str) -> tuple[Token, Token | None]:
    """Find the declaration's first depth-0 ``:=`` and the token after it."""
    tokens = tokenize(proof)
    for idx, tok in enumerate(tokens):
        if tok.text == ":=" and tok.depth == 0:
            nxt = tokens[idx + 1] if idx + 1 < len(tokens) else None
            return tok, nxt
    raise NoByBlock("declaration has no top-level ':='")


def extract_proof_body(proof: str) -> str:
    """
    Return the tactic block after the declaration's first top-level ``:= by``.

    Raises NoByBlock for term-mode proofs (no top-level ``by``). The
    result never begins with the ``by`` token itself; relative
    indentation of the tactic lines is preserved.
    """
    assign, nxt = _first_top_level_assign(proof)
    if nxt is None or nxt.text != "by" or nxt.depth != 0:
        raise NoByBlock("proof term does not start with 'by'")
    return _dedent_tail(proof[nxt.end :])


def extract_term_value(proof: str) -> str:
    """Return the proof term after the first top-level ``:=`` (term-mode proofs)."""
    assign, _ = _first_top_level_assign(proof)
    return _dedent_tail(proof[assign.end :])


def _indent_block(body: str, columns: int) -> str:
    pad = " " * columns
    lines = body.rstrip("\n").split("\n")
    return "\n".join(pad + ln if ln.strip() else "" for ln in lines)


def _find_unproven_have_sites(sketch: str, name: str) -> list[tuple[Token, Token, Token]]:
    """Locate every ``have <name> … := by sorry`` as (have, by, sorry) tokens."""
    tokens = tokenize(sketch)
    sites = []
    for idx, tok in enumerate(tokens):
        if tok.text != "have" or idx + 1 >= len(tokens):
            continue
        if tokens[idx + 1].text != name:
            continue
        depth = tok.depth
        j = idx + 2
        assign = None
        while j < len(tokens):
            tj = tokens[j]
            if tj.depth == depth and tj.text == ":=":
                assign = j
                break
            if tj.depth == depth and tj.text == "have":
                break  # ran into the next have without seeing ':='
            j += 1
        if assign is None or assign + 2 >= len(tokens):
            continue
        by_tok, sorry_tok = tokens[assign + 1], tokens[assign + 2]
        if by_tok.text == "by" and sorry_tok.text == "sorry":
            sites.append((tok, by_tok, sorry_tok))
    return sites


def replace_subgoal(sketch: str, name: str, proof_body: str) -> str:
    """
    Replace the ``sorry`` of ``have <name> : … := by sorry`` with a proof body.

    Inserted lines are re-indented one level (2 spaces) under the
    ``have`` column; all other text is left byte-identical. Handles both
    the inline form (``:= by sorry``) and the sorry-on-next-line form.

    Raises SubgoalNotFound if no unproven ``have`` named ``name``
    exists, AmbiguousSubgoal if more than one does.
    """
    sites = _find_unproven_have_sites(sketch, name)
    if not sites:
        raise SubgoalNotFound(f"no unproven have named {name!r} in sketch")
    if len(sites) > 1:
        raise AmbiguousSubgoal(f"have named {name!r} occurs {len(sites)} times unproven")
    have_tok, by_tok, sorry_tok = sites[0]
    have_col = have_tok.start - (sketch.rfind("\n", 0, have_tok.start) + 1)
    body = proof_body.rstrip()
    inline = "\n" not in sketch[by_tok.end : sorry_tok.start]
    if inline:
        if "\n" not in body.strip():
            return sketch[: sorry_tok.start] + body.strip() + sketch[sorry_tok.end :]
        return sketch[: by_tok.end] + "\n" + _indent_block(body, have_col + 2) + sketch[sorry_tok.end :]
    line_start = sketch.rfind("\n", 0, sorry_tok.start) + 1
    return sketch[:line_start] + _indent_block(body, have_col + 2) + sketch[sorry_tok.end :]


def extract_code_block(response: str) -> str:
    """
    Return the contents of the last fenced ```lean4 (or ```lean) block.

    Correction prompts elicit analysis followed by code, so the last
    block wins. Raises NoCodeBlock when no fenced Lean block exists.
    """
    matches = _FENCE_RE.findall(response)
    if not matches:
        raise NoCodeBlock("completion contains no ```lean4 code block")
    return matches[-1].strip("\r\n")


def count_sorries(code: str) -> int:
    """Count ``sorry`` tokens outside comments and string literals."""
    return sum(1 for tok in tokenize(code) if tok.text == "sorry")
