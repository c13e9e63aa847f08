"""Exceptions that map onto CLI exit codes."""


class DataError(Exception):
    """Dataset files missing or inconsistent (exit code 3)."""


class CheckpointError(Exception):
    """Checkpoint file corrupt or mismatched (exit code 4)."""


class NumericalError(Exception):
    """Non-finite values encountered during optimization (exit code 5)."""
