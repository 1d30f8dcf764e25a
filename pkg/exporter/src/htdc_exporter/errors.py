"""Exporter error taxonomy, mirrored by the CLI's exit codes."""


class ExportError(Exception):
    """Base class for everything this package raises on purpose."""


class UsageError(ExportError):
    """Bad flags or an invalid job description. Exit code 1."""


class ModelError(ExportError):
    """The model cannot be loaded or lacks a capability we need. Exit code 2."""


class DataError(ExportError):
    """Unreadable inputs or outputs that cannot be written. Exit code 2."""
