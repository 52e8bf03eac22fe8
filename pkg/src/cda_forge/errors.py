"""Exception types raised across the package.

Every error that callers are expected to catch lives here so the CLI can map
them onto exit codes in one place.
"""

from __future__ import annotations


class CdaForgeError(Exception):
    """Base class for all cda-forge errors."""


# --- dataset handling ---

class MalformedRowError(CdaForgeError):
    """A source row violates the instance invariants."""

    def __init__(self, row: int, reason: str):
        super().__init__(f"row {row}: {reason}")
        self.row = row
        self.reason = reason


class UnknownLabelValueError(CdaForgeError):
    """A label cell holds a value outside the configured encoding."""

    def __init__(self, row: int, value: str):
        super().__init__(f"row {row}: unknown label value {value!r}")
        self.row = row
        self.value = value


class InsufficientClassCountError(CdaForgeError):
    """A balanced sample was requested from a class with too few instances."""

    def __init__(self, label: str, have: int, need: int):
        super().__init__(f"class {label}: have {have}, need {need}")
        self.label = label
        self.have = have
        self.need = need


class CorrectnessCoverageMismatchError(CdaForgeError):
    """A correctness map does not cover the dataset ids exactly once."""


# --- inference client ---

class ClientError(CdaForgeError):
    """Base class for completion-request failures."""


class TransportError(ClientError):
    """Connection/timeout/retryable-status failure after retries were exhausted."""


class ProtocolError(ClientError):
    """Non-retryable HTTP status or unparseable response body."""

    def __init__(self, status: int, body_excerpt: str):
        super().__init__(f"HTTP {status}: {body_excerpt}")
        self.status = status
        self.body_excerpt = body_excerpt


class EmptyChoiceError(ClientError):
    """The endpoint answered but returned no usable choice."""


class NoRuleMatchesError(ClientError):
    """A mock model received a prompt matched by no rule and has no default."""


class EndpointUnavailableError(CdaForgeError):
    """Every request in a batch failed at the transport level."""


# --- evaluator ---

class EmptyConfusionError(CdaForgeError):
    """Metrics were requested for a confusion matrix with zero total count."""


# --- augmenter ---

class PolarityMismatchError(CdaForgeError):
    """An augmentation method was applied to a seed of the opposite label."""


# --- trainer gateway ---

class HookFailedError(CdaForgeError):
    """The trainer hook exited nonzero or reported a failed job."""

    def __init__(self, status: object, log_excerpt: str):
        super().__init__(f"trainer hook failed ({status}): {log_excerpt}")
        self.status = status
        self.log_excerpt = log_excerpt


class ManifestMissingError(CdaForgeError):
    """The trainer hook finished without writing a manifest file."""


class ManifestMalformedError(CdaForgeError):
    """The trainer manifest exists but does not parse or lacks required keys."""


# --- pipeline ---

class StageFailedError(CdaForgeError):
    """A pipeline stage failed; the run directory records which one."""

    def __init__(self, stage: str, cause: BaseException):
        super().__init__(f"stage {stage!r} failed: {cause}")
        self.stage = stage
        self.cause = cause


class IncompleteRunError(CdaForgeError):
    """A report was requested for a run that has not completed."""
