"""Command line and rendered reports."""

from .cli import build_parser, dispatch, emit
from .report import collect_run_summary, generate_pdf_report_bytes, write_report

__all__ = ['build_parser', 'collect_run_summary', 'dispatch', 'emit', 'generate_pdf_report_bytes', 'write_report']
