"""
Machine-readable exports: CSV, JSON and boxplot data files.
"""

import csv
import json
import logging
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

from .stats import ResultCell

logger = logging.getLogger(__name__)

EXPORT_FORMATS = ('csv', 'json', 'boxplot-data')
STAT_COLUMNS = ['n', 'min', 'q1', 'median', 'q3', 'max', 'iqr', 'mean']
CSV_COLUMNS = (['broker', 'scenario', 'test', 'repetition'] + STAT_COLUMNS
               + ['exclusions', 'undelivered', 'setup', 'payload_size', 'status'])


class IoError(Exception):
    """Raised when results cannot be written or read"""
    pass


def _stat_fields(stats) -> Dict[str, Any]:
    if stats is None:
        return {column: '' for column in STAT_COLUMNS}
    return {column: getattr(stats, column) for column in STAT_COLUMNS}


def _csv_rows(cells: Sequence[ResultCell]) -> Tuple[List[Dict[str, Any]], List[Dict[str, Any]]]:
    summary, repetitions = [], []
    for cell in cells:
        common = {'broker': cell.broker, 'scenario': cell.scenario, 'test': cell.test,
                  'setup': cell.setup, 'payload_size': cell.payload_size, 'status': cell.status}
        summary.append({**common, 'repetition': 'pooled', **_stat_fields(cell.pooled),
                        'exclusions': cell.exclusions, 'undelivered': cell.undelivered})
        for rep in cell.repetitions:
            repetitions.append({**common, 'repetition': rep.repetition, **_stat_fields(rep.stats),
                                'exclusions': rep.exclusions, 'undelivered': rep.undelivered})
    return summary, repetitions


def _write_csv(path: Path, rows: List[Dict[str, Any]]) -> None:
    with open(path, 'w', newline='', encoding='utf-8') as f:
        writer = csv.DictWriter(f, fieldnames=CSV_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)


def boxplot_filename(cell: ResultCell) -> str:
    return f"{cell.broker}__{cell.scenario}__{cell.test}.json"


def _boxplot_data(cell: ResultCell) -> Dict[str, Any]:
    data = {'broker': cell.broker, 'scenario': cell.scenario, 'test': cell.test,
            'setup': cell.setup, 'payload_size': cell.payload_size, 'unit': 'ms'}
    stats = cell.pooled
    for name in ('n', 'min', 'whisker_low', 'q1', 'median', 'q3', 'whisker_high', 'max'):
        data[name] = getattr(stats, name) if stats else None
    data['outliers'] = list(stats.outliers) if stats else []
    return data


def export(cells: Sequence[ResultCell], fmt: str, out_dir, metadata: Optional[Dict[str, Any]] = None) -> List[Path]:
    """
    Write cells in one of the export formats.

    Args:
        cells: Result cells to export
        fmt: 'csv' (summary.csv, repetitions.csv), 'json' (summary.json) or
             'boxplot-data' (one file per cell under boxplot/)
        out_dir: Target directory, created if missing
        metadata: Run metadata embedded in the JSON export

    Returns:
        Paths written

    Raises:
        IoError: if a file cannot be written
    """
    if fmt not in EXPORT_FORMATS:
        raise ValueError(f"Unknown export format {fmt!r}, expected one of {', '.join(EXPORT_FORMATS)}")
    out = Path(out_dir)
    written: List[Path] = []
    try:
        out.mkdir(parents=True, exist_ok=True)
        if fmt == 'csv':
            summary, repetitions = _csv_rows(cells)
            for name, rows in (('summary.csv', summary), ('repetitions.csv', repetitions)):
                _write_csv(out / name, rows)
                written.append(out / name)
        elif fmt == 'json':
            document = {'metadata': metadata or {}, 'cells': [cell.to_dict() for cell in cells]}
            path = out / 'summary.json'
            with open(path, 'w', encoding='utf-8') as f:
                json.dump(document, f, indent=2, sort_keys=True)
            written.append(path)
        else:
            box_dir = out / 'boxplot'
            box_dir.mkdir(exist_ok=True)
            for cell in cells:
                path = box_dir / boxplot_filename(cell)
                with open(path, 'w', encoding='utf-8') as f:
                    json.dump(_boxplot_data(cell), f, indent=2, sort_keys=True)
                written.append(path)
    except OSError as e:
        raise IoError(f"Cannot write {fmt} export to {out}: {e}")

    logger.info(f"Exported {len(cells)} cells as {fmt} to {out}")
    return written


def import_cells_json(path) -> Tuple[List[ResultCell], Dict[str, Any]]:
    """Read a summary.json back into ResultCells and its metadata."""
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = json.load(f)
    except (OSError, json.JSONDecodeError) as e:
        raise IoError(f"Cannot read results from {path}: {e}")
    return [ResultCell.from_dict(c) for c in document.get('cells', [])], document.get('metadata', {})
