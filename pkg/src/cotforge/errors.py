"""Exception hierarchy shared across the pipeline."""

from __future__ import annotations


class CotforgeError(Exception):
    """Base class for all package errors."""


class ValidationError(CotforgeError):
    """A value violates a documented invariant.

    ``rule`` names the violated invariant so callers and tests can assert on
    the failing rule rather than on message text.
    """

    def __init__(self, rule: str, message: str = ""):
        self.rule = rule
        super().__init__(f"{rule}: {message}" if message else rule)


class TraceValidationError(ValidationError):
    """A chain-of-thought trace violates the wire-format invariants."""


class CotParseError(CotforgeError):
    """Malformed chain-of-thought text.

    ``code`` is the error variant (``unclosed_tag``, ``interleaved_tags``,
    ``missing_final_code``, ...); ``offset`` is the byte offset into the
    input where the problem was detected.
    """

    def __init__(self, code: str, offset: int, message: str = ""):
        self.code = code
        self.offset = offset
        detail = f" ({message})" if message else ""
        super().__init__(f"{code} at offset {offset}{detail}")


class BackendError(CotforgeError):
    """Base class for completion-backend failures."""


class TransportFailure(BackendError):
    """Network-level failure talking to a backend."""


class BackendTimeout(BackendError):
    """Request exceeded the configured timeout."""


class HttpStatusError(BackendError):
    """Non-2xx response; the body is preserved for diagnosis."""

    def __init__(self, status_code: int, body: str):
        self.status_code = status_code
        self.body = body
        super().__init__(f"HTTP {status_code}: {body[:200]}")


class MalformedResponseError(BackendError):
    """Response body did not match the expected completion shape."""


class ScriptExhaustedError(BackendError):
    """Mock script for a matching request has no replies left."""

    def __init__(self, key: str, consumed: int):
        self.key = key
        self.consumed = consumed
        super().__init__(f"script {key!r} exhausted after {consumed} replies")


class UnmatchedRequestError(BackendError):
    """No mock script matches the request fingerprint."""

    def __init__(self, fingerprint: str, nearest: list[str]):
        self.fingerprint = fingerprint
        self.nearest = nearest
        hint = f"; nearest keys: {nearest}" if nearest else "; no scripts registered"
        super().__init__(f"no script for fingerprint {fingerprint}{hint}")


class SandboxEnvironmentError(CotforgeError):
    """The sandbox itself is unusable (shim missing, spawn failure).

    Distinct from candidate-code failures, which are reported via Verdict.
    """


class TestGenerationError(CotforgeError):
    """All attempts to generate executable test code failed."""


class WorkflowInterrupted(CotforgeError):
    """Infrastructure failure aborted a workflow; carries a state snapshot."""

    def __init__(self, message: str, snapshot: dict):
        self.snapshot = snapshot
        super().__init__(message)


class SearchInfrastructureError(CotforgeError):
    """Repeated backend/executor failures aborted a tree search.

    ``tree`` holds the partial tree so callers can persist it.
    """

    def __init__(self, message: str, tree=None):
        self.tree = tree
        super().__init__(message)


class ConfigError(CotforgeError):
    """Invalid pipeline configuration; all violations reported at once."""

    def __init__(self, problems: list[str]):
        self.problems = problems
        super().__init__("; ".join(problems))


class CheckpointMismatch(CotforgeError):
    """Resume refused because the config hash changed."""


class ExportError(CotforgeError):
    """A record failed its export-time invariant gate."""
