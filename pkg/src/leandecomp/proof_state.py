"""Tree-structured proof state.

Each node is a theorem being proved: the root carries the user's
target, children carry subgoals produced by decomposition. Nodes track
status, per-agent conversations, a never-cleared provenance history,
and the retry counters that drive scheduling. The tree serializes to a
versioned JSON checkpoint and reconstructs complete proofs from proven
subtrees by splicing child proof bodies into parent sketches.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from enum import Enum
from typing import Any

from .config import Limits
from .errors import IncompleteSubtree, LeandecompError, NoByBlock, UnknownNode
from .lean_source import (
    LeanSource,
    extract_proof_body,
    extract_term_value,
    normalize_preamble,
    replace_subgoal,
    split_source,
)
from .ast_model import Subgoal, get_named_subgoal_code
from .services import VerificationResult

CHECKPOINT_VERSION = 1


class NodeStatus(Enum):
    AWAITING_FORMALIZATION = "AwaitingFormalization"
    AWAITING_SYNTAX_CHECK = "AwaitingSyntaxCheck"
    AWAITING_SEMANTIC_CHECK = "AwaitingSemanticCheck"
    AWAITING_PROOF = "AwaitingProof"
    AWAITING_VERIFICATION = "AwaitingVerification"
    AWAITING_AST_PARSE = "AwaitingAstParse"
    AWAITING_QUERY_GEN = "AwaitingQueryGen"
    AWAITING_LOOKUP = "AwaitingLookup"
    AWAITING_SKETCH = "AwaitingSketch"
    AWAITING_SKETCH_CHECK = "AwaitingSketchCheck"
    AWAITING_CHILDREN = "AwaitingChildren"
    PROVEN = "Proven"
    FAILED = "Failed"


TERMINAL_STATUSES = frozenset({NodeStatus.PROVEN, NodeStatus.FAILED})


@dataclass
class Counters:
    formalize_retries: int = 0
    self_correction_in_pass: int = 0
    passes_used: int = 0
    sketch_corrections_used: int = 0
    decompositions_used: int = 0

    def to_dict(self) -> dict[str, int]:
        return dict(vars(self))

    @classmethod
    def from_dict(cls, data: dict[str, int]) -> "Counters":
        return cls(**{k: int(v) for k, v in data.items() if k in vars(cls())})


@dataclass
class ProofNode:
    id: str
    parent: str | None
    depth: int
    status: NodeStatus
    informal_statement: str | None = None
    formal: LeanSource | None = None
    name: str | None = None  # subgoal name when this node came from a have
    proof_attempt: str | None = None
    sketch: str | None = None
    children: list[str] = field(default_factory=list)
    conversations: dict[str, list[tuple[str, str]]] = field(default_factory=dict)
    history: list[dict[str, Any]] = field(default_factory=list)
    counters: Counters = field(default_factory=Counters)
    # working data for the current phase
    queries: list[str] = field(default_factory=list)
    hints: list[tuple[str, str]] = field(default_factory=list)
    candidate_formalization: str | None = None
    candidate_sketch: str | None = None
    pending_prompt: str | None = None
    pending_response: str | None = None
    last_failure: str | None = None
    last_sketch_failure: str | None = None
    sketch_attempts_total: int = 0
    insertion_seq: int = 0

    def conversation(self, agent: str) -> list[tuple[str, str]]:
        return self.conversations.setdefault(agent, [])


class ProofTree:
    """Owner of all nodes; every mutation goes through these methods."""

    def __init__(self, limits: Limits):
        self.limits = limits
        self.nodes: dict[str, ProofNode] = {}
        self.root: str | None = None
        self._seq = 0

    # ------------------------------------------------------------------ setup

    def _new_id(self) -> str:
        self._seq += 1
        return f"n{self._seq:04d}"

    @classmethod
    def from_informal(cls, informal: str, limits: Limits) -> "ProofTree":
        tree = cls(limits)
        node = ProofNode(
            id=tree._new_id(),
            parent=None,
            depth=0,
            status=NodeStatus.AWAITING_FORMALIZATION,
            informal_statement=informal,
            insertion_seq=tree._seq,
        )
        tree.nodes[node.id] = node
        tree.root = node.id
        return tree

    @classmethod
    def from_formal(cls, code: str, limits: Limits, informal: str | None = None) -> "ProofTree":
        tree = cls(limits)
        source = split_source(code)
        node = ProofNode(
            id=tree._new_id(),
            parent=None,
            depth=0,
            status=NodeStatus.AWAITING_PROOF,
            informal_statement=informal,
            formal=LeanSource(
                preamble=normalize_preamble(source.preamble).text, body=source.body.strip()
            ),
            insertion_seq=tree._seq,
        )
        tree.nodes[node.id] = node
        tree.root = node.id
        return tree

    # ------------------------------------------------------------- navigation

    def node(self, node_id: str) -> ProofNode:
        try:
            return self.nodes[node_id]
        except KeyError:
            raise UnknownNode(f"no node with id {node_id!r}") from None

    def root_node(self) -> ProofNode:
        assert self.root is not None
        return self.node(self.root)

    def ancestors(self, node_id: str):
        """Yield (distance, ancestor) pairs walking toward the root."""
        node = self.node(node_id)
        distance = 0
        while node.parent is not None:
            node = self.node(node.parent)
            distance += 1
            yield distance, node

    # -------------------------------------------------------------- mutations

    def add_child(self, parent_id: str, subgoal: Subgoal) -> str:
        """
        Attach a subgoal as a new leaf one level below its parent.

        The child's formal unit is the subgoal rendered standalone under
        the parent's normalized preamble; it starts at AwaitingProof
        since it is already formal.
        """
        parent = self.node(parent_id)
        preamble = normalize_preamble(parent.formal.preamble if parent.formal else "")
        code = get_named_subgoal_code([subgoal], subgoal.name, preamble)
        source = split_source(code)
        child = ProofNode(
            id=self._new_id(),
            parent=parent_id,
            depth=parent.depth + 1,
            status=NodeStatus.AWAITING_PROOF,
            name=subgoal.name,
            formal=LeanSource(preamble=preamble.text, body=source.body.strip()),
            insertion_seq=self._seq,
        )
        self.nodes[child.id] = child
        parent.children.append(child.id)
        return child.id

    def record_attempt(
        self,
        node_id: str,
        role: str,
        prompt: str,
        response: str,
        verdict: VerificationResult | None = None,
        failed: bool | None = None,
    ) -> None:
        """
        Log one agent round and apply the role's counter rules.

        A failed prover round consumes one self-correction attempt;
        filling the per-pass budget rolls over into a new pass with a
        fresh prover conversation. Formalizer and semantics failures
        consume formalization retries; decomposer failures consume
        sketch corrections.
        """
        node = self.node(node_id)
        if failed is None:
            failed = verdict is not None and not verdict.passed
        node.history.append(
            {
                "role": role,
                "prompt": prompt,
                "response": response,
                "failed": failed,
                "verdict": None
                if verdict is None
                else {"passed": verdict.passed, "complete": verdict.complete},
            }
        )
        conversation = node.conversation(role)
        conversation.append(("user", prompt))
        conversation.append(("assistant", response))
        if not failed:
            return
        counters = node.counters
        if role == "prover":
            counters.self_correction_in_pass += 1
            if counters.self_correction_in_pass >= self.limits.prover_self_correction:
                counters.passes_used += 1
                counters.self_correction_in_pass = 0
                node.conversations["prover"] = []
        elif role in ("formalizer", "semantics"):
            counters.formalize_retries += 1
        elif role == "decomposer":
            counters.sketch_corrections_used += 1

    def find_backtrack_ancestor(self, node_id: str) -> str | None:
        """
        Nearest ancestor at distance >= 2 that can still re-decompose:
        sketch-correction budget not exhausted and decomposition budget
        (same size as the decomposer's correction budget) not spent.
        Returns None when no such ancestor exists.
        """
        budget = self.limits.decomposer_self_correction
        for distance, ancestor in self.ancestors(node_id):
            if distance < 2:
                continue
            if (
                ancestor.counters.sketch_corrections_used < budget
                and ancestor.counters.decompositions_used < budget
            ):
                return ancestor.id
        return None

    def prune_subtree(self, node_id: str) -> None:
        """
        Drop all descendants and queue the node for re-decomposition.

        The node returns to AwaitingQueryGen with one decomposition
        consumed and a fresh sketch-correction budget; conversations and
        history are kept for the backtrack prompts. Raises
        LeandecompError when the node's decomposition budget is already
        spent (callers select ancestors with find_backtrack_ancestor,
        which never picks such a node).
        """
        node = self.node(node_id)
        if node.counters.decompositions_used >= self.limits.decomposer_self_correction:
            raise LeandecompError(
                f"node {node_id} has no decomposition budget left to re-decompose"
            )
        stack = list(node.children)
        while stack:
            child_id = stack.pop()
            child = self.nodes.pop(child_id, None)
            if child is not None:
                stack.extend(child.children)
        node.children = []
        node.status = NodeStatus.AWAITING_QUERY_GEN
        node.counters.decompositions_used += 1
        node.counters.sketch_corrections_used = 0
        node.sketch = None
        node.candidate_sketch = None

    # ---------------------------------------------------------- reconstruction

    def _reconstruct_decl(self, node: ProofNode) -> str:
        if node.status is not NodeStatus.PROVEN:
            raise IncompleteSubtree(f"node {node.id} is {node.status.value}, not Proven")
        if not node.children:
            if node.proof_attempt is None:
                raise IncompleteSubtree(f"proven leaf {node.id} has no proof text")
            return split_source(node.proof_attempt).body.strip() or node.proof_attempt.strip()
        if node.sketch is None:
            raise IncompleteSubtree(f"internal node {node.id} has no sketch")
        text = split_source(node.sketch).body.strip()
        for child_id in node.children:
            child = self.node(child_id)
            child_decl = self._reconstruct_decl(child)
            try:
                body = extract_proof_body(child_decl)
            except NoByBlock:
                # term-mode child proof: keep it a tactic block
                body = "exact (" + extract_term_value(child_decl) + ")"
            if child.name is None:
                raise IncompleteSubtree(f"child {child.id} has no subgoal name")
            text = replace_subgoal(text, child.name, body)
        return text

    def reconstruct(self, node_id: str) -> str:
        """
        Assemble the complete proof of a proven subtree.

        A leaf contributes its verified proof attempt; an internal node
        contributes its sketch with every child's sorry replaced by that
        child's reconstructed proof body. The result is a full unit
        under the node's stored canonical preamble.

        Raises IncompleteSubtree if any descendant is not Proven.
        """
        node = self.node(node_id)
        decl = self._reconstruct_decl(node)
        preamble = normalize_preamble(node.formal.preamble if node.formal else "")
        return preamble.text + "\n\n" + decl

    # ------------------------------------------------------------- invariants

    def validate(self) -> None:
        """Check structural invariants; raises AssertionError on violation."""
        assert self.root is not None and self.root in self.nodes, "missing root"
        seen: set[str] = set()
        stack = [self.root]
        while stack:
            node_id = stack.pop()
            assert node_id not in seen, f"cycle through {node_id}"
            seen.add(node_id)
            node = self.nodes[node_id]
            for child_id in node.children:
                assert child_id in self.nodes, f"dangling child {child_id}"
                child = self.nodes[child_id]
                assert child.parent == node_id, f"parent link broken at {child_id}"
                assert child.depth == node.depth + 1, f"depth law broken at {child_id}"
                stack.append(child_id)
        assert seen == set(self.nodes), "unreachable nodes present"
        root = self.nodes[self.root]
        assert root.parent is None and root.depth == 0, "root must be depth 0"
        limits = self.limits
        for node in self.nodes.values():
            if node.children:
                assert node.sketch is not None, f"internal node {node.id} lacks a sketch"
            c = node.counters
            assert c.formalize_retries <= limits.formalizer_max_retries
            assert c.self_correction_in_pass <= limits.prover_self_correction
            assert c.passes_used <= limits.prover_max_pass
            assert c.sketch_corrections_used <= limits.decomposer_self_correction
            assert c.decompositions_used <= limits.decomposer_self_correction

    # ------------------------------------------------------------ persistence

    def to_dict(self) -> dict[str, Any]:
        return {
            "version": CHECKPOINT_VERSION,
            "root": self.root,
            "seq": self._seq,
            "limits": vars(self.limits),
            "nodes": {
                node.id: {
                    "id": node.id,
                    "parent": node.parent,
                    "depth": node.depth,
                    "status": node.status.value,
                    "informal_statement": node.informal_statement,
                    "formal": None
                    if node.formal is None
                    else {"preamble": node.formal.preamble, "body": node.formal.body},
                    "name": node.name,
                    "proof_attempt": node.proof_attempt,
                    "sketch": node.sketch,
                    "children": list(node.children),
                    "conversations": {
                        agent: [list(turn) for turn in turns]
                        for agent, turns in node.conversations.items()
                    },
                    "history": node.history,
                    "counters": node.counters.to_dict(),
                    "queries": list(node.queries),
                    "hints": [list(h) for h in node.hints],
                    "candidate_formalization": node.candidate_formalization,
                    "candidate_sketch": node.candidate_sketch,
                    "pending_prompt": node.pending_prompt,
                    "pending_response": node.pending_response,
                    "last_failure": node.last_failure,
                    "last_sketch_failure": node.last_sketch_failure,
                    "sketch_attempts_total": node.sketch_attempts_total,
                    "insertion_seq": node.insertion_seq,
                }
                for node in self.nodes.values()
            },
        }

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> "ProofTree":
        if data.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {data.get('version')!r}")
        tree = cls(Limits(**{k: int(v) for k, v in data["limits"].items()}))
        tree.root = data["root"]
        tree._seq = int(data.get("seq", len(data["nodes"])))
        for node_id, raw in data["nodes"].items():
            formal = raw.get("formal")
            node = ProofNode(
                id=node_id,
                parent=raw.get("parent"),
                depth=int(raw["depth"]),
                status=NodeStatus(raw["status"]),
                informal_statement=raw.get("informal_statement"),
                formal=None if formal is None else LeanSource(**formal),
                name=raw.get("name"),
                proof_attempt=raw.get("proof_attempt"),
                sketch=raw.get("sketch"),
                children=list(raw.get("children", [])),
                conversations={
                    agent: [tuple(turn) for turn in turns]
                    for agent, turns in raw.get("conversations", {}).items()
                },
                history=list(raw.get("history", [])),
                counters=Counters.from_dict(raw.get("counters", {})),
                queries=list(raw.get("queries", [])),
                hints=[tuple(h) for h in raw.get("hints", [])],
                candidate_formalization=raw.get("candidate_formalization"),
                candidate_sketch=raw.get("candidate_sketch"),
                pending_prompt=raw.get("pending_prompt"),
                pending_response=raw.get("pending_response"),
                last_failure=raw.get("last_failure"),
                last_sketch_failure=raw.get("last_sketch_failure"),
                sketch_attempts_total=int(raw.get("sketch_attempts_total", 0)),
                insertion_seq=int(raw.get("insertion_seq", 0)),
            )
            tree.nodes[node_id] = node
        return tree

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as handle:
            json.dump(self.to_dict(), handle, ensure_ascii=False, indent=2)

    @classmethod
    def load(cls, path) -> "ProofTree":
        with open(path, encoding="utf-8") as handle:
            return cls.from_dict(json.load(handle))

    def export_triples(self) -> list[tuple[str, str, str]]:
        """(informal statement, formal theorem, verified proof) for every
        proven node that has an informal statement."""
        triples = []
        for node in self.nodes.values():
            if node.status is NodeStatus.PROVEN and node.informal_statement and node.formal:
                triples.append(
                    (node.informal_statement, node.formal.combined(), self.reconstruct(node.id))
                )
        return triples
