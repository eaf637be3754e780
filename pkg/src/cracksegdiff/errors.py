"""Exception types shared across the package.

Each carries a short ``category`` used by the CLI to emit a single
machine-parsable error line.
"""


class CrackSegDiffError(Exception):
    category = "error"


class ConfigError(CrackSegDiffError, ValueError):
    category = "config"


class DegenerateStepError(CrackSegDiffError, ZeroDivisionError):
    category = "degenerate-step"


class ContractError(CrackSegDiffError, ValueError):
    """A tensor shape does not satisfy the feature-pyramid contract."""

    category = "contract"


class IngestionError(CrackSegDiffError, ValueError):
    category = "ingestion"


class TrainingError(CrackSegDiffError, RuntimeError):
    category = "training"
