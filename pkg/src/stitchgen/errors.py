"""Shared error types mapped to CLI exit codes."""


class ConfigError(Exception):
    """Bad or unknown configuration (exit code 2)."""


class MissingArtifactError(Exception):
    """A required checkpoint/dataset is absent (exit code 3)."""


class NumericError(Exception):
    """Non-finite values where finite ones are required (exit code 4)."""


class TrainingError(Exception):
    """A training run failed its own acceptance bar (e.g. critic at chance)."""
