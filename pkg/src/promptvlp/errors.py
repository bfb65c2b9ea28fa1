"""Exception types shared across the package.

Input/contract problems subclass ValueError so callers can catch either the
specific class or the builtin; backend trouble is a RuntimeError because it
is environmental, not a caller mistake.
"""

from __future__ import annotations


class PromptVlpError(Exception):
    """Base class for all package errors."""


class TemplateError(PromptVlpError, ValueError):
    """Malformed prompt template (zero or multiple placeholders)."""


class ManifestError(PromptVlpError, ValueError):
    """Corpus/manifest construction failed (duplicates, dangling references, empty inputs)."""


class SamplingError(PromptVlpError, ValueError):
    """Batch sampling cannot satisfy its preconditions."""


class ContractError(PromptVlpError, ValueError):
    """A tensor/shape/norm contract was violated."""


class ReportError(PromptVlpError, ValueError):
    """Evaluation inputs are unusable (empty query set, missing relevance)."""


class BackendError(PromptVlpError, RuntimeError):
    """A language-model backend call failed."""


class PartialResultError(BackendError):
    """Backend failed after retries; carries the records completed so far."""

    def __init__(self, message: str, completed, failures):
        super().__init__(message)
        self.completed = list(completed)
        self.failures = list(failures)


class TrainingDivergedError(PromptVlpError, RuntimeError):
    """Training hit a non-finite loss; carries the last good checkpoint path."""

    def __init__(self, message: str, step: int, last_checkpoint=None):
        super().__init__(message)
        self.step = step
        self.last_checkpoint = last_checkpoint
