"""
Error hierarchy shared by every perfrank module.

Each error carries a human-readable detail and the process exit code the CLI
uses when the error escapes a command. Errors pickle with all their fields, so
they cross worker-process boundaries intact.
"""

from typing import Optional


def _restore(cls: type, state: dict) -> "PerfRankError":
    error = cls.__new__(cls)
    Exception.__init__(error, state["detail"])
    error.__dict__.update(state)
    return error


class PerfRankError(Exception):
    """Base error; `exit_code` is what the CLI returns when this escapes."""

    exit_code: int = 1

    def __init__(self, detail: str):
        super().__init__(detail)
        self.detail = detail

    def __reduce__(self):
        return _restore, (type(self), dict(self.__dict__))


class ConfigurationError(PerfRankError):
    """Invalid configuration, schema violation, or incompatible inputs."""

    exit_code = 2

    def __init__(self, detail: str, messages: Optional[list[str]] = None):
        super().__init__(detail)
        self.messages = messages or [detail]


class DimensionMismatchError(ConfigurationError):
    """Vectors that must share a dimension do not."""


class DegenerateInputError(PerfRankError):
    """Input for which the requested quantity is undefined (zero mean, one label class)."""


class AmbiguousRankingError(PerfRankError):
    """A hard permutation was requested for scores with ties."""


class NonFiniteValueError(PerfRankError):
    """A NaN or infinity appeared in a differentiated computation."""

    def __init__(self, op: str, detail: Optional[str] = None):
        super().__init__(detail or f"non-finite value produced by op '{op}'")
        self.op = op


class RoundDivergenceError(PerfRankError):
    """Training loss diverged inside a round."""

    exit_code = 1

    def __init__(self, policy: str, round_: int, detail: str):
        super().__init__(f"policy '{policy}' diverged in round {round_}: {detail}")
        self.policy = policy
        self.round = round_


class IngestionError(PerfRankError):
    """CSV ingestion failed; `report` holds the aggregated row-level errors."""

    def __init__(self, detail: str, report=None):
        super().__init__(detail)
        self.report = report


class ReportError(PerfRankError):
    """A metrics file could not be summarised."""
