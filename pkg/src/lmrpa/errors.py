"""Errors shared across modules."""


class ConfigError(ValueError):
    """Invalid or incomplete configuration; the CLI maps this to exit code 2."""


class IoFailure(Exception):
    """A durable write failed. Data integrity beats liveness: the run aborts."""
