"""Structured view of the AST returned by the Lean AST export endpoint.

The endpoint returns a nested JSON syntax tree plus a ``sorries`` list
with goal metadata for each placeholder. This module parses that
payload, enumerates the unproven subgoals (``have`` statements proved
by ``sorry``), and renders each one as a standalone theorem that can be
proved independently.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from typing import Any

from .errors import AnonymousSorry, DuplicateSubgoalName, MalformedAst, SubgoalNotFound
from .lean_source import CanonicalPreamble

#: Syntax kinds marking a ``have`` tactic and its name.
HAVE_KINDS = frozenset({"Lean.Parser.Tactic.tacticHave_", "Lean.Parser.Term.have"})
HAVE_ID_KIND = "Lean.Parser.Term.haveId"

#: Syntax kinds marking a sorry placeholder.
SORRY_KINDS = frozenset({"Lean.Parser.Tactic.tacticSorry", "Lean.Parser.Term.sorry"})


@dataclass
class AstNode:
    """One node of the exported syntax tree."""

    kind: str
    value: str | None = None
    children: list["AstNode"] = field(default_factory=list)

    def walk(self):
        """Yield this node and all descendants in depth-first source order."""
        yield self
        for child in self.children:
            yield from child.walk()


@dataclass(frozen=True)
class SorryInfo:
    """Goal metadata for one sorry placeholder, from the ``sorries`` list."""

    goal_type: str
    binders: tuple[tuple[str, str], ...]
    position: tuple[int, int]  # 1-based (line, column)


@dataclass(frozen=True)
class Subgoal:
    """An unproven ``have`` subgoal, self-contained enough to prove on its own."""

    name: str
    goal_type: str
    context_binders: tuple[tuple[str, str], ...]
    standalone_statement: str


def _normalize_ws(text: str) -> str:
    return " ".join(text.split())


def _parse_node(raw: Any) -> AstNode:
    if isinstance(raw, str):
        return AstNode(kind="atom", value=raw)
    if not isinstance(raw, dict):
        raise MalformedAst(f"AST node must be an object or string, got {type(raw).__name__}")
    kind = raw.get("kind")
    value = raw.get("val", raw.get("value"))
    if kind is None and value is None:
        raise MalformedAst(f"AST node has neither 'kind' nor 'val': {sorted(raw)}")
    if kind is None:
        kind = "atom"
    if not isinstance(kind, str) or not kind:
        raise MalformedAst("AST node 'kind' must be a non-empty string")
    raw_children = raw.get("args", raw.get("children", []))
    if raw_children is None:
        raw_children = []
    if not isinstance(raw_children, list):
        raise MalformedAst(f"AST node children must be a list in kind {kind!r}")
    children = [_parse_node(c) for c in raw_children if c is not None]
    return AstNode(kind=kind, value=None if value is None else str(value), children=children)


def _parse_goal(goal: str) -> tuple[str, tuple[tuple[str, str], ...]]:
    """Split a pretty-printed goal into (target type, hypothesis binders)."""
    if "⊢" in goal:
        context, target = goal.rsplit("⊢", 1)
    else:
        context, target = "", goal
    binders: list[tuple[str, str]] = []
    for line in context.splitlines():
        if not line.strip():
            continue
        if line[0].isspace() and binders:
            # continuation of the previous binder's wrapped type
            name, typ = binders[-1]
            binders[-1] = (name, typ + " " + line.strip())
            continue
        if ":" not in line:
            continue
        names, typ = line.split(":", 1)
        for name in names.split():
            binders.append((name, typ.strip()))
    return target.strip(), tuple(binders)


def _parse_sorry(raw: Any) -> SorryInfo:
    if not isinstance(raw, dict):
        raise MalformedAst("sorries entry must be an object")
    goal = raw.get("goal")
    pos = raw.get("pos")
    if not isinstance(goal, str) or not isinstance(pos, dict):
        raise MalformedAst("sorries entry needs 'goal' text and 'pos' object")
    try:
        position = (int(pos["line"]), int(pos["column"]))
    except (KeyError, TypeError, ValueError) as exc:
        raise MalformedAst(f"sorries entry has bad position: {pos!r}") from exc
    goal_type, binders = _parse_goal(goal)
    return SorryInfo(goal_type=goal_type, binders=binders, position=position)


def parse_ast(payload: str | dict[str, Any]) -> tuple[AstNode, list[SorryInfo]]:
    """
    Parse an AST-endpoint payload into a node tree and sorry metadata.

    Accepts either the JSON text or the decoded object; the object may
    be ``{"ast": …, "sorries": […]}`` or a bare root node.

    Raises MalformedAst on missing kinds or non-tree shapes.
    """
    if isinstance(payload, str):
        try:
            payload = json.loads(payload)
        except json.JSONDecodeError as exc:
            raise MalformedAst(f"payload is not valid JSON: {exc}") from exc
    if not isinstance(payload, dict):
        raise MalformedAst("payload must be a JSON object")
    if "ast" in payload:
        root_raw = payload["ast"]
        sorries_raw = payload.get("sorries", [])
    else:
        root_raw, sorries_raw = payload, []
    if not isinstance(sorries_raw, list):
        raise MalformedAst("'sorries' must be a list")
    root = _parse_node(root_raw)
    sorries = [_parse_sorry(s) for s in sorries_raw]
    return root, sorries


def _have_name(node: AstNode) -> str | None:
    for desc in node.walk():
        if desc.kind == HAVE_ID_KIND:
            for part in desc.walk():
                if part.value:
                    return part.value
    return None


def _sorry_events(root: AstNode) -> list[str | None]:
    """Names of the nearest enclosing have for each sorry, in source order."""
    events: list[str | None] = []

    def visit(node: AstNode, enclosing: str | None) -> None:
        if node.kind in SORRY_KINDS or (node.kind == "atom" and node.value == "sorry"):
            events.append(enclosing)
            return
        if node.kind in HAVE_KINDS:
            enclosing = _have_name(node) or enclosing
        for child in node.children:
            visit(child, enclosing)

    visit(root, None)
    return events


def _mentions(goal_type: str, name: str) -> bool:
    return re.search(rf"(?<![A-Za-z0-9_']){re.escape(name)}(?![A-Za-z0-9_'])", goal_type) is not None


def _render_binders(binders) -> str:
    return "".join(f" ({name} : {_normalize_ws(typ)})" for name, typ in binders)


def _render_statement(name: str, binders, goal_type: str) -> str:
    return f"theorem {name}{_render_binders(binders)} : {_normalize_ws(goal_type)} := by\n  sorry"


def extract_subgoals(ast: AstNode, sorries: list[SorryInfo]) -> list[Subgoal]:
    """
    Enumerate unproven subgoals: one per ``have`` proved by ``sorry``.

    Subgoals come out in source order, each paired by position with its
    SorryInfo. Hypotheses naming an earlier sibling subgoal are kept
    only when this subgoal's goal type mentions them, so that proofs of
    independent siblings stay independent.

    Raises AnonymousSorry for a sorry outside any named have, and
    MalformedAst when the tree and the sorries metadata disagree.
    """
    events = _sorry_events(ast)
    ordered = sorted(sorries, key=lambda s: s.position)
    if len(events) != len(ordered):
        raise MalformedAst(
            f"AST has {len(events)} sorry nodes but metadata lists {len(ordered)}"
        )
    subgoals: list[Subgoal] = []
    earlier: set[str] = set()
    for name, info in zip(events, ordered):
        if name is None:
            raise AnonymousSorry(
                f"sorry at line {info.position[0]} is not attached to a named have"
            )
        kept = tuple(
            (bname, btype)
            for bname, btype in info.binders
            if bname not in earlier or _mentions(info.goal_type, bname)
        )
        subgoals.append(
            Subgoal(
                name=name,
                goal_type=info.goal_type,
                context_binders=kept,
                standalone_statement=_render_statement(name, kept, info.goal_type),
            )
        )
        earlier.add(name)
    return subgoals


def get_unproven_subgoal_names(ast: AstNode) -> list[str]:
    """
    Names of all sorry-proved haves in source order, duplicates included.

    Raises AnonymousSorry for a sorry with no enclosing named have.
    """
    events = _sorry_events(ast)
    for idx, name in enumerate(events):
        if name is None:
            raise AnonymousSorry(f"sorry #{idx + 1} is not attached to a named have")
    return events  # type: ignore[return-value]


def get_named_subgoal_code(
    subgoals: list[Subgoal],
    name: str,
    preamble: CanonicalPreamble,
    enclosing_binders: list[tuple[str, str]] | None = None,
) -> str:
    """
    Render one subgoal as a complete, self-contained Lean unit.

    The unit is the canonical preamble plus a sorry-proved theorem whose
    hypotheses are the enclosing theorem's binders followed by the
    subgoal's own context binders (deduplicated by name).

    Raises SubgoalNotFound when `name` is absent and DuplicateSubgoalName
    when several subgoals share it.
    """
    matches = [sg for sg in subgoals if sg.name == name]
    if not matches:
        raise SubgoalNotFound(f"no subgoal named {name!r}")
    if len(matches) > 1:
        raise DuplicateSubgoalName(f"{len(matches)} subgoals share the name {name!r}")
    subgoal = matches[0]
    enclosing = list(enclosing_binders or [])
    seen = {bname for bname, _ in enclosing}
    binders = enclosing + [b for b in subgoal.context_binders if b[0] not in seen]
    return preamble.text + "\n\n" + _render_statement(name, binders, subgoal.goal_type)
