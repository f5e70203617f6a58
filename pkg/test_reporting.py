#!/usr/bin/env python3
"""
Tests for result exports and the on-disk result store.
"""

import csv
import json
import os
import sys

import pytest

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from client import LatencyRecord
from reporting import (
    IoError, RepetitionSummary, ResultCell, ResultStore, boxplot_filename, export, import_cells_json,
    load_cells, summarize,
)
from reporting.export import CSV_COLUMNS


def _records(broker='stub', scenario='local', test='offset', repetition=0, latencies=(4.0, 5.0, 6.5)):
    return [
        LatencyRecord(broker=broker, scenario=scenario, test=test, repetition=repetition, publisher=i,
                      publisher_sequence=0, latency_ns=int(ms * 1_000_000), payload_size=27,
                      received_at='2026-01-01T00:00:00+00:00')
        for i, ms in enumerate(latencies)
    ]


def _cell(broker='stub', scenario='local', test='offset', reps=2):
    runs = []
    for k in range(reps):
        records = _records(broker, scenario, test, k, latencies=(4.0 + k, 5.0 + k, 6.5 + k))
        runs.append((RepetitionSummary(repetition=k, stats=summarize(records), expected=4, exclusions=0,
                                       undelivered=1), records))
    return ResultCell.from_repetitions(broker, scenario, test, runs, setup='VM', family=broker, payload_size=27)


def test_csv_export_one_cell(tmp_path):
    cell = _cell()
    written = export([cell], 'csv', tmp_path)
    assert [p.name for p in written] == ['summary.csv', 'repetitions.csv']

    with open(tmp_path / 'summary.csv', newline='') as f:
        reader = csv.DictReader(f)
        assert reader.fieldnames[:13] == ['broker', 'scenario', 'test', 'repetition', 'n', 'min', 'q1',
                                          'median', 'q3', 'max', 'iqr', 'mean', 'exclusions']
        rows = list(reader)
    assert len(rows) == 1
    assert rows[0]['repetition'] == 'pooled'
    assert int(rows[0]['n']) == 6
    assert int(rows[0]['undelivered']) == 2
    assert float(rows[0]['median']) == pytest.approx(cell.pooled.median)

    with open(tmp_path / 'repetitions.csv', newline='') as f:
        assert [row['repetition'] for row in csv.DictReader(f)] == ['0', '1']
    assert CSV_COLUMNS[-1] == 'status'


def test_json_round_trip(tmp_path):
    cells = [_cell(), _cell(scenario='worst')]
    failed = ResultCell(broker='emqx', scenario='local', test='offset', status='failed', error='unreachable')
    metadata = {'seed': 42, 'loss_model': {'segment_size': 1460, 'rtt_multiplier': 3.0}}
    export(cells + [failed], 'json', tmp_path, metadata)

    document = json.loads((tmp_path / 'summary.json').read_text())
    assert set(document) == {'metadata', 'cells'}
    assert document['metadata']['seed'] == 42

    loaded, loaded_metadata = import_cells_json(tmp_path / 'summary.json')
    assert loaded == cells + [failed]
    assert loaded_metadata == metadata


def test_boxplot_files_for_full_matrix(tmp_path):
    cells = [_cell(b, s, t, reps=1)
             for b in ('mosquitto', 'emqx', 'rabbitmq', 'vernemq', 'hivemq')
             for s in ('local', 'optimal', 'worst')
             for t in ('offset', '1KB', '10KB', '1MB')]
    written = export(cells, 'boxplot-data', tmp_path)
    assert len(written) == 60
    assert len(list((tmp_path / 'boxplot').iterdir())) == 60
    assert boxplot_filename(cells[0]) == 'mosquitto__local__offset.json'

    data = json.loads((tmp_path / 'boxplot' / 'emqx__worst__1MB.json').read_text())
    for key in ('min', 'whisker_low', 'q1', 'median', 'q3', 'whisker_high', 'max', 'outliers'):
        assert key in data
    assert data['unit'] == 'ms'


def test_export_rejects_unknown_format(tmp_path):
    with pytest.raises(ValueError):
        export([_cell()], 'xml', tmp_path)


def test_export_io_error(tmp_path):
    blocker = tmp_path / 'file'
    blocker.write_text('not a directory')
    with pytest.raises(IoError):
        export([_cell()], 'json', blocker / 'sub')


def test_import_missing_file(tmp_path):
    with pytest.raises(IoError):
        import_cells_json(tmp_path / 'summary.json')


# Result store

def test_store_repetitions_and_cells(tmp_path):
    store = ResultStore(tmp_path)
    try:
        records = _records()
        path = store.write_repetition('stub', 'local', 'offset', 3, records)
        assert path == tmp_path / 'stub' / 'local' / 'offset' / 'rep3.csv'
        assert store.read_repetition('stub', 'local', 'offset', 3) == records
        assert not list(path.parent.glob('*.tmp'))

        assert not store.is_cell_complete('stub', 'local', 'offset')
        cell = _cell()
        store.write_cell(cell, {'proxy_totals': {'chunks': 10}})
        assert store.is_cell_complete('stub', 'local', 'offset')
        assert store.load_cell('stub', 'local', 'offset') == cell
        assert store.load_cell_document('stub', 'local', 'offset')['proxy_totals'] == {'chunks': 10}

        failed = ResultCell(broker='emqx', scenario='local', test='offset', status='failed')
        store.write_cell(failed)
        assert not store.is_cell_complete('emqx', 'local', 'offset')
        assert [c.broker for c in store.load_cells()] == ['emqx', 'stub']
        assert load_cells(tmp_path) == store.load_cells()
    finally:
        store.close()


def test_store_activity_log(tmp_path):
    store = ResultStore(tmp_path)
    try:
        entry = store.log_event('CELL_COMPLETED', broker='stub', scenario='local', test='offset')
        store.log_event('CELL_SKIPPED', broker='emqx', scenario='local', test='offset')
        assert entry['type'] == 'cell_completed'
        assert (tmp_path / 'run_activity.log').exists()

        completed = store.read_events('CELL_COMPLETED')
        assert len(completed) == 1
        assert completed[0]['broker'] == 'stub'
        assert len(store.read_events()) == 2
    finally:
        store.close()


def test_store_summary(tmp_path):
    store = ResultStore(tmp_path)
    try:
        written = store.write_summary([_cell()], {'seed': 1})
    finally:
        store.close()
    assert {p.name for p in written} == {'summary.json', 'summary.csv', 'repetitions.csv'}
    cells, metadata = import_cells_json(tmp_path / 'summary.json')
    assert metadata == {'seed': 1}
    assert len(cells) == 1


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
