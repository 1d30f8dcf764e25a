"""Trace exporter: records vision-language model branch logits for replay."""

from .errors import DataError, ExportError, ModelError, UsageError
from .export import ExportResult, run_export
from .job import ExportJob, StoredPolicy, V0Spec, register_template, resolve_template

__all__ = [
    "DataError",
    "ExportError",
    "ExportJob",
    "ExportResult",
    "ModelError",
    "StoredPolicy",
    "UsageError",
    "V0Spec",
    "register_template",
    "resolve_template",
    "run_export",
]
