"""Offline figures and tables from the solver package's CSV outputs."""

from .render import KINDS, ReportJob, render
from .schemas import SchemaError

__all__ = ["KINDS", "ReportJob", "SchemaError", "render"]
