"""Exception hierarchy shared across the package."""


class LeandecompError(Exception):
    """Base class for all package-specific errors."""


# --- Lean source manipulation ---


class NoByBlock(LeandecompError):
    """The declaration has no top-level `:= by`; the proof is term-mode."""


class NoCodeBlock(LeandecompError):
    """A model completion contained no fenced ```lean4 / ```lean block."""


class SubgoalNotFound(LeandecompError):
    """The named subgoal does not exist in the sketch or subgoal list."""


class AmbiguousSubgoal(LeandecompError):
    """More than one unproven `have` with the requested name."""


# --- AST handling ---


class MalformedAst(LeandecompError):
    """The AST payload is not a well-formed tree (missing kind, bad shape)."""


class AnonymousSorry(LeandecompError):
    """A sorry placeholder is not attached to a named `have` statement."""


class DuplicateSubgoalName(LeandecompError):
    """Two extracted subgoals share a name; code generation is ambiguous."""


# --- Proof tree ---


class UnknownNode(LeandecompError):
    """A node id that is not present in the proof tree."""


class IncompleteSubtree(LeandecompError):
    """Reconstruction requested while some descendant is not yet proven."""


# --- Prompt rendering / response parsing ---


class MissingVariable(LeandecompError):
    """A prompt template placeholder has no value."""


class NoQueries(LeandecompError):
    """A search-query response contained no <search> tags."""


class NoJudgement(LeandecompError):
    """A semantic-check response contained no parseable Judgement line."""


# --- Service clients ---


class RemoteExhausted(LeandecompError):
    """A chat backend kept failing after all configured retries."""


class BadResponse(LeandecompError):
    """A service answered with an unusable payload (e.g. no choices)."""


class ServiceUnavailable(LeandecompError):
    """The verification / AST / search service could not be reached."""


class InvalidModuleName(LeandecompError):
    """Module name rejected (must match [A-Za-z0-9_.]+)."""


class AstExportFailed(LeandecompError):
    """The AST endpoint reported an export error for the submitted code."""


# --- Configuration ---


class ConfigError(LeandecompError):
    """Base class for configuration problems."""


class ConfigParseError(ConfigError):
    """INI text could not be parsed."""


class ConfigTypeError(ConfigError, TypeError):
    """A configuration option has the wrong type (e.g. non-integer limit)."""


# --- Orchestration / CLI ---


class FormalizationExhausted(LeandecompError):
    """All formalization retries were spent without an accepted statement."""


class MissingHeader(LeandecompError):
    """A formal input file lacks the required Lean import header."""


class MissingDeclaration(LeandecompError):
    """A formal input file contains a header but no declaration."""
