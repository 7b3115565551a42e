"""Recursive Lean 4 theorem proving via decomposition into have-statement subgoals.

The public Python API mirrors the CLI: build a :class:`ProofTree` from an
informal statement or a formal Lean unit, construct an
:class:`Orchestrator` with configured backends, and call ``run()``.
"""

from .config import Config, Limits, load_config
from .errors import LeandecompError
from .orchestrator import Orchestrator, Outcome, next_action
from .proof_state import NodeStatus, ProofNode, ProofTree

__version__ = "0.1.0"

__all__ = [
    "Config",
    "LeandecompError",
    "Limits",
    "NodeStatus",
    "Orchestrator",
    "Outcome",
    "ProofNode",
    "ProofTree",
    "load_config",
    "next_action",
    "__version__",
]
