"""
Reporting module for benchmark results.

This module provides:
- Latency statistics (quantiles, five-number summaries, pooled cells)
- Median/IQR tables and setup comparisons
- CSV/JSON/boxplot-data exports
- The on-disk result store and run activity log
"""

from .stats import (
    POOLING, QUANTILE_METHOD, EmptyInput, RepetitionSummary, ResultCell, SummaryStats,
    quantile, summarize, summarize_values,
)
from .tables import (
    EMPTY_CELL, format_cell, parse_cell, render_broker_header, render_median_iqr_table,
    render_report, render_setup_delta, setup_deltas,
)
from .export import EXPORT_FORMATS, IoError, boxplot_filename, export, import_cells_json
from .result_store import ResultStore, load_cells

__all__ = [
    'POOLING', 'QUANTILE_METHOD', 'EmptyInput', 'RepetitionSummary', 'ResultCell', 'SummaryStats',
    'quantile', 'summarize', 'summarize_values',
    'EMPTY_CELL', 'format_cell', 'parse_cell', 'render_broker_header', 'render_median_iqr_table',
    'render_report', 'render_setup_delta', 'setup_deltas',
    'EXPORT_FORMATS', 'IoError', 'boxplot_filename', 'export', 'import_cells_json',
    'ResultStore', 'load_cells',
]
