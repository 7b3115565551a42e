import json
from pathlib import Path

import pytest
from hypothesis import given
from hypothesis import strategies as st

from leandecomp.ast_model import (
    AstNode,
    SorryInfo,
    extract_subgoals,
    get_named_subgoal_code,
    get_unproven_subgoal_names,
    parse_ast,
)
from leandecomp.errors import (
    AnonymousSorry,
    DuplicateSubgoalName,
    MalformedAst,
    SubgoalNotFound,
)
from leandecomp.lean_source import count_sorries, normalize_preamble
from tests.ast_builder import build_sketch_payload
from tests.sample_proofs import (
    INDUCTION_SKETCH,
    INDUCTION_SUBGOAL_NAMES,
    INFINITUDE_SKETCH,
    INFINITUDE_SUBGOAL_NAMES,
)

FIXTURES = Path(__file__).parent / "fixtures"


def load_payload(name):
    return json.loads((FIXTURES / name).read_text())


class TestParseAst:
    def test_infinitude_fixture(self):
        root, sorries = parse_ast(load_payload("infinitude_ast.json"))
        sorry_nodes = [n for n in root.walk() if n.kind == "Lean.Parser.Tactic.tacticSorry"]
        assert len(sorry_nodes) == 5
        assert len(sorries) == 5
        assert all(isinstance(s, SorryInfo) for s in sorries)

    def test_bare_single_node(self):
        root, sorries = parse_ast({"kind": "module", "children": []})
        assert root.kind == "module"
        assert root.children == []
        assert sorries == []

    def test_missing_kind_raises(self):
        with pytest.raises(MalformedAst):
            parse_ast({"ast": {"args": [{"nope": 1}], "kind": "module"}})

    def test_json_text_accepted(self):
        root, _ = parse_ast('{"kind": "module", "args": [{"val": "x"}]}')
        assert root.children[0].value == "x"

    def test_positions_are_one_based(self):
        _, sorries = parse_ast(load_payload("induction_ast.json"))
        assert [s.position for s in sorries] == [(4, 5), (8, 5), (12, 5)]

    def test_goal_context_split_at_turnstile(self):
        _, sorries = parse_ast(load_payload("infinitude_ast.json"))
        last = sorted(sorries, key=lambda s: s.position)[-1]
        assert last.goal_type == "∀ n, ∃ p, p > n ∧ Prime p"
        assert last.binders[0][0] == "prod_primes_def"

    def test_grouped_binder_names_expand(self):
        _, sorries = parse_ast(
            {"ast": {"kind": "m", "args": []},
             "sorries": [{"goal": "a b : Nat\n⊢ a = b", "pos": {"line": 1, "column": 1}}]}
        )
        assert sorries[0].binders == (("a", "Nat"), ("b", "Nat"))


class TestExtractSubgoals:
    def test_infinitude_names_in_order(self):
        root, sorries = parse_ast(load_payload("infinitude_ast.json"))
        names = [sg.name for sg in extract_subgoals(root, sorries)]
        assert names == INFINITUDE_SUBGOAL_NAMES

    def test_induction_names_in_order(self):
        root, sorries = parse_ast(load_payload("induction_ast.json"))
        names = [sg.name for sg in extract_subgoals(root, sorries)]
        assert names == INDUCTION_SUBGOAL_NAMES

    def test_fully_proven_tree_yields_nothing(self):
        root, sorries = parse_ast({"kind": "module", "args": [{"val": "rfl"}]})
        assert extract_subgoals(root, sorries) == []

    def test_count_matches_source_sorries(self):
        for sketch, payload in [
            (INFINITUDE_SKETCH, load_payload("infinitude_ast.json")),
            (INDUCTION_SKETCH, load_payload("induction_ast.json")),
        ]:
            root, sorries = parse_ast(payload)
            assert len(extract_subgoals(root, sorries)) == count_sorries(sketch)

    def test_anonymous_sorry_raises(self):
        payload = {
            "ast": {
                "kind": "module",
                "args": [{"kind": "Lean.Parser.Tactic.tacticSorry", "args": [{"val": "sorry"}]}],
            },
            "sorries": [{"goal": "⊢ True", "pos": {"line": 1, "column": 1}}],
        }
        root, sorries = parse_ast(payload)
        with pytest.raises(AnonymousSorry):
            extract_subgoals(root, sorries)

    def test_tree_metadata_mismatch_raises(self):
        root, _ = parse_ast(load_payload("infinitude_ast.json"))
        with pytest.raises(MalformedAst):
            extract_subgoals(root, [])

    def test_sibling_binder_dropped_unless_mentioned(self):
        payload = {
            "ast": build_sketch_payload(
                "theorem t : True := by\n"
                "  have step_one : P 1 := by sorry\n"
                "  have step_two : Q (step_one) := by sorry\n"
                "  have step_three : R 3 := by sorry\n"
                "  trivial"
            )["ast"],
            "sorries": [
                {"goal": "⊢ P 1", "pos": {"line": 2, "column": 25}},
                {"goal": "step_one : P 1\n⊢ Q (step_one)", "pos": {"line": 3, "column": 30}},
                {"goal": "step_one : P 1\nstep_two : Q (step_one)\n⊢ R 3",
                 "pos": {"line": 4, "column": 27}},
            ],
        }
        root, sorries = parse_ast(payload)
        subgoals = extract_subgoals(root, sorries)
        # step_two's goal mentions step_one, so the hypothesis is kept
        assert subgoals[1].context_binders == (("step_one", "P 1"),)
        # step_three's goal mentions neither sibling
        assert subgoals[2].context_binders == ()

    def test_nested_sorry_attaches_to_nearest_have(self):
        payload = {
            "kind": "module",
            "args": [
                {
                    "kind": "Lean.Parser.Tactic.tacticHave_",
                    "args": [
                        {"kind": "Lean.Parser.Term.haveId", "args": [{"val": "outer"}]},
                        {
                            "kind": "Lean.Parser.Tactic.tacticHave_",
                            "args": [
                                {"kind": "Lean.Parser.Term.haveId", "args": [{"val": "inner"}]},
                                {"kind": "Lean.Parser.Tactic.tacticSorry", "args": [{"val": "sorry"}]},
                            ],
                        },
                    ],
                }
            ],
        }
        root, _ = parse_ast(payload)
        assert get_unproven_subgoal_names(root) == ["inner"]


class TestUnprovenNames:
    def test_infinitude(self):
        root, _ = parse_ast(load_payload("infinitude_ast.json"))
        assert get_unproven_subgoal_names(root) == INFINITUDE_SUBGOAL_NAMES

    def test_empty_module(self):
        root, _ = parse_ast({"kind": "module", "args": []})
        assert get_unproven_subgoal_names(root) == []

    def test_duplicate_names_both_listed(self):
        payload = build_sketch_payload(
            "theorem t : True := by\n"
            "  have h : P := by sorry\n"
            "  have h : P := by sorry\n"
            "  trivial"
        )
        root, _ = parse_ast(payload)
        assert get_unproven_subgoal_names(root) == ["h", "h"]


class TestNamedSubgoalCode:
    def setup_method(self):
        self.preamble = normalize_preamble("")

    def test_base_case_unit(self):
        root, sorries = parse_ast(load_payload("induction_ast.json"))
        subgoals = extract_subgoals(root, sorries)
        code = get_named_subgoal_code(subgoals, "base_case", self.preamble)
        assert code.startswith("import Mathlib\nimport Aesop\n")
        assert code.endswith("theorem base_case : 4 ^ 2 ≤ 4 ! := by\n  sorry")

    def test_absent_name_raises(self):
        root, sorries = parse_ast(load_payload("induction_ast.json"))
        subgoals = extract_subgoals(root, sorries)
        with pytest.raises(SubgoalNotFound):
            get_named_subgoal_code(subgoals, "missing", self.preamble)

    def test_duplicate_name_raises(self):
        payload = build_sketch_payload(
            "theorem t : True := by\n"
            "  have h : P := by sorry\n"
            "  have h : P := by sorry\n"
            "  trivial"
        )
        root, sorries = parse_ast(payload)
        subgoals = extract_subgoals(root, sorries)
        with pytest.raises(DuplicateSubgoalName):
            get_named_subgoal_code(subgoals, "h", self.preamble)

    def test_context_binder_rendered_before_colon(self):
        payload = {
            "ast": build_sketch_payload(
                "theorem t (n : ℕ) : True := by\n  have bound : n ≤ n + 1 := by sorry\n  trivial"
            )["ast"],
            "sorries": [{"goal": "n : ℕ\n⊢ n ≤ n + 1", "pos": {"line": 2, "column": 29}}],
        }
        root, sorries = parse_ast(payload)
        subgoals = extract_subgoals(root, sorries)
        code = get_named_subgoal_code(subgoals, "bound", self.preamble)
        assert "theorem bound (n : ℕ) : n ≤ n + 1 := by" in code

    def test_enclosing_binders_come_first_and_dedupe(self):
        root, sorries = parse_ast(load_payload("induction_ast.json"))
        subgoals = extract_subgoals(root, sorries)
        code = get_named_subgoal_code(
            subgoals, "final_proof", self.preamble, enclosing_binders=[("m", "ℕ")]
        )
        assert "theorem final_proof (m : ℕ) : ∀ n ≥ 4, n ^ 2 ≤ n ! := by" in code

    @given(st.sampled_from(INFINITUDE_SUBGOAL_NAMES))
    def test_standalone_statement_is_sorry_proved_theorem(self, name):
        root, sorries = parse_ast(load_payload("infinitude_ast.json"))
        subgoals = extract_subgoals(root, sorries)
        sg = next(s for s in subgoals if s.name == name)
        assert sg.standalone_statement.startswith(f"theorem {name}")
        assert sg.standalone_statement.endswith(":= by\n  sorry")
        assert count_sorries(sg.standalone_statement) == 1


class TestAstNodeShape:
    def test_walk_is_depth_first(self):
        root = AstNode("a", children=[AstNode("b", children=[AstNode("c")]), AstNode("d")])
        assert [n.kind for n in root.walk()] == ["a", "b", "c", "d"]

    @given(st.integers(min_value=0, max_value=6))
    def test_parse_rejects_non_node_children(self, depth):
        node = {"kind": "k", "args": []}
        for _ in range(depth):
            node = {"kind": "k", "args": [node]}
        node["args"].append(42)
        with pytest.raises(MalformedAst):
            parse_ast(node)
