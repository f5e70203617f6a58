"""
Human-readable result tables.

Rows are payload sizes (one line per hardware setup), columns are
broker x scenario, and every cell reads "<median> - <iqr>" in milliseconds.
"""

import logging
from typing import Any, Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

from client import format_size
from .stats import ResultCell

logger = logging.getLogger(__name__)

EMPTY_CELL = '—'
EMPTY_FOOTNOTE = f"{EMPTY_CELL} no results (failed or missing cell)"
UNITS_NOTE = 'Latency in ms (median - IQR). Sizes in binary units: 1KB = 1024 B, 10KB = 10240 B, 1MB = 1048576 B.'


def format_cell(median: float, iqr: float) -> str:
    return f"{median:.2f} - {iqr:.2f}"


def parse_cell(text: str) -> Tuple[float, float]:
    """Inverse of format_cell: "5.39 - 1.00" -> (5.39, 1.0)."""
    median, iqr = text.split(' - ')
    return float(median), float(iqr)


def _family(cell: ResultCell) -> str:
    return cell.family or cell.broker


def _ordered(values: Iterable[Any]) -> List[Any]:
    seen: List[Any] = []
    for value in values:
        if value not in seen:
            seen.append(value)
    return seen


def _grid(cells: Sequence[ResultCell]):
    columns = _ordered((_family(c), c.scenario) for c in cells)
    rows = sorted(_ordered((c.payload_size, c.setup) for c in cells))
    lookup: Dict[Tuple, ResultCell] = {}
    for cell in cells:
        lookup[(cell.payload_size, cell.setup, _family(cell), cell.scenario)] = cell
    return rows, columns, lookup


def _render(header: List[str], body: List[List[str]], fmt: str) -> List[str]:
    if fmt == 'markdown':
        lines = ['| ' + ' | '.join(header) + ' |', '|' + '|'.join('---' for _ in header) + '|']
        lines += ['| ' + ' | '.join(row) + ' |' for row in body]
        return lines
    widths = [max(len(row[i]) for row in [header] + body) for i in range(len(header))]
    lines = ['  '.join(value.ljust(width) for value, width in zip(header, widths)).rstrip()]
    lines.append('  '.join('-' * width for width in widths))
    lines += ['  '.join(value.ljust(width) for value, width in zip(row, widths)).rstrip() for row in body]
    return lines


def render_median_iqr_table(cells: Sequence[ResultCell], fmt: str = 'text') -> str:
    """
    Render cells as a payload-size x (broker, scenario) table.

    Args:
        cells: Result cells, usually all cells of one run
        fmt: 'text' (aligned columns) or 'markdown' (pipe-delimited)

    Returns:
        The table, followed by a footnote when any cell is empty
    """
    if fmt not in ('text', 'markdown'):
        raise ValueError(f"Unknown table format {fmt!r}")
    rows, columns, lookup = _grid(cells)
    show_setup = len({setup for _, setup in rows}) > 1

    header = ['Payload'] + (['Setup'] if show_setup else []) + [f"{broker} {scenario}" for broker, scenario in columns]
    body = []
    empty = False
    for size, setup in rows:
        line = [format_size(size)] + ([setup] if show_setup else [])
        for broker, scenario in columns:
            cell = lookup.get((size, setup, broker, scenario))
            if cell is None or cell.pooled is None:
                line.append(EMPTY_CELL)
                empty = True
            else:
                line.append(format_cell(cell.pooled.median, cell.pooled.iqr))
        body.append(line)

    lines = _render(header, body, fmt)
    if empty:
        lines += ['', EMPTY_FOOTNOTE]
    return '\n'.join(lines)


def setup_deltas(cells: Sequence[ResultCell]) -> List[Dict[str, Any]]:
    """
    Pooled-median differences between hardware setups of the same broker.

    One entry per (broker, scenario, payload size) present on two or more
    setups, comparing each setup with the first one seen.
    """
    groups: Dict[Tuple[str, str, int], List[ResultCell]] = {}
    for cell in cells:
        if cell.pooled is not None:
            groups.setdefault((_family(cell), cell.scenario, cell.payload_size), []).append(cell)

    deltas = []
    for (broker, scenario, size), group in groups.items():
        base = group[0]
        for other in group[1:]:
            if other.setup == base.setup:
                continue
            deltas.append({
                'broker': broker,
                'scenario': scenario,
                'payload_size': size,
                'setups': (other.setup, base.setup),
                'delta_ms': other.pooled.median - base.pooled.median,
            })
    return deltas


def render_setup_delta(cells: Sequence[ResultCell]) -> str:
    deltas = setup_deltas(cells)
    if not deltas:
        return ''
    lines = ['Setup deltas (pooled median):']
    for d in deltas:
        lines.append(f"  {d['broker']} {d['scenario']} {format_size(d['payload_size'])}: "
                     f"{d['setups'][0]} - {d['setups'][1]} = {d['delta_ms']:+.2f} ms")
    return '\n'.join(lines)


def render_broker_header(brokers: Mapping[str, Mapping[str, Any]]) -> str:
    """One line per broker: implementation language and ARM64 / MQTT version support."""
    def flag(value: Optional[bool]) -> str:
        return 'yes' if value else 'no'

    lines = ['Broker    Language  ARM64  MQTT 3.1.1  MQTT 5.0']
    for name, meta in brokers.items():
        lines.append(f"{name:<9} {meta.get('language', 'unknown'):<9} {flag(meta.get('arm64_supported')):<6} "
                     f"{flag(meta.get('mqtt311')):<11} {flag(meta.get('mqtt5'))}")
    return '\n'.join(lines)


def render_report(cells: Sequence[ResultCell], metadata: Optional[Mapping[str, Any]] = None,
                  fmt: str = 'text') -> str:
    """Full report: broker header, units note, one table per test, setup deltas."""
    metadata = metadata or {}
    sections = []
    brokers = metadata.get('brokers')
    if brokers:
        sections.append(render_broker_header(brokers))
    sections.append(UNITS_NOTE)
    if metadata.get('filters'):
        sections.append(f"Partial run, filters: {metadata['filters']}")

    tests = _ordered(c.test for c in cells)
    sizes = {c.test: c.payload_size for c in cells}
    if len(set(sizes.values())) == len(tests):
        sections.append(f"Tests: {', '.join(tests)}\n" + render_median_iqr_table(cells, fmt))
    else:
        # Tests sharing a payload size would share a row
        for test in tests:
            test_cells = [c for c in cells if c.test == test]
            sections.append(f"Test: {test}\n" + render_median_iqr_table(test_cells, fmt))

    delta = render_setup_delta(cells)
    if delta:
        sections.append(delta)
    return '\n\n'.join(sections)
