"""Exception taxonomy shared across the package.

The CLI maps these onto exit codes, so stage code should raise the most
specific class that applies rather than bare ValueError/RuntimeError.
"""


class EngineError(ValueError):
    """Shape or argument violation inside the array engine; message names the op."""


class NumericError(RuntimeError):
    """Non-finite values or a diverging optimization."""


class ArtifactError(RuntimeError):
    """Missing, corrupt, or mismatched on-disk artifact."""


class ConfigError(ValueError):
    """Invalid configuration value or file."""
