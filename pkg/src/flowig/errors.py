"""Shared exception types, grouped by the failure class they map to at the CLI."""


class FlowigError(Exception):
    pass


class ConfigError(FlowigError):
    """Bad configuration: invalid shapes, unknown keys, impossible hyperparameters."""


class DataError(FlowigError):
    """Bad or missing input data."""


class SchemaError(DataError):
    """CSV does not provide the columns the schema requires."""


class UnknownLabelError(DataError):
    """A raw label string is not in the known label set."""


class TruncationError(DataError):
    """Tokenized sequence does not fit max_seq_len; silent truncation is forbidden."""


class NumericError(FlowigError):
    """Non-finite value produced where a finite one is required."""


class AuditError(FlowigError):
    """A leak-safety audit failed (split overlap detected)."""
