"""
On-disk result store and run activity log.

Layout under the output directory:
    <broker>/<scenario>/<test>/rep<k>.csv   samples of one recorded repetition
    <broker>/<scenario>/<test>/cell.json    cell summary; status "completed" marks it done
    summary.json, summary.csv, repetitions.csv
    run_activity.log                        EVENT_TYPE: {json} lines
"""

import csv
import json
import logging
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence

import pytz

from client import LatencyRecord
from config import settings
from .export import IoError, export
from .stats import ResultCell

logger = logging.getLogger(__name__)

ACTIVITY_LOGGER = 'benchkit.activity'
ACTIVITY_LOG_FILE = 'run_activity.log'
CELL_MARKER = 'cell.json'
RECORD_COLUMNS = list(LatencyRecord.__dataclass_fields__) + ['latency_ms']


class ResultStore:
    """
    Incremental, crash-safe result writing for one output directory.

    Every repetition is written as soon as it finishes; a cell counts as
    done only once its cell.json says "completed".
    """

    def __init__(self, output_dir, log_directory: Optional[str] = None):
        """
        Args:
            output_dir: Results root
            log_directory: Where run_activity.log goes (defaults to BENCHKIT_LOG_DIR, then output_dir)
        """
        self.output_dir = Path(output_dir)
        self.log_directory = Path(log_directory or settings.BENCHKIT_LOG_DIR or output_dir)
        try:
            self.output_dir.mkdir(parents=True, exist_ok=True)
            self.log_directory.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise IoError(f"Cannot create output directory {self.output_dir}: {e}")

        self.file_handler = None
        self._setup_logging()

    def _setup_logging(self):
        """Point the activity logger at this store's run_activity.log."""
        self.activity_logger = logging.getLogger(ACTIVITY_LOGGER)
        self.activity_logger.setLevel(logging.INFO)

        # Only one store logs at a time
        for handler in list(self.activity_logger.handlers):
            if isinstance(handler, logging.FileHandler):
                self.activity_logger.removeHandler(handler)
                handler.close()

        self.log_file = self.log_directory / ACTIVITY_LOG_FILE
        self.file_handler = logging.FileHandler(self.log_file, mode='a', encoding='utf-8')
        self.file_handler.setLevel(logging.INFO)
        self.file_handler.setFormatter(logging.Formatter('%(asctime)s - %(name)s - %(levelname)s - %(message)s'))
        self.activity_logger.addHandler(self.file_handler)

    def close(self) -> None:
        if self.file_handler is not None:
            self.activity_logger.removeHandler(self.file_handler)
            self.file_handler.close()
            self.file_handler = None

    def log_event(self, event_type: str, **fields) -> Dict[str, Any]:
        """
        Write one structured event, e.g. CELL_COMPLETED.

        Returns:
            The logged entry
        """
        entry = {'timestamp': datetime.now(pytz.UTC).isoformat(), 'type': event_type.lower(), **fields}
        self.activity_logger.info(f"{event_type}: {json.dumps(entry, default=str)}")
        return entry

    def read_events(self, event_type: Optional[str] = None) -> List[Dict[str, Any]]:
        """Events from run_activity.log, optionally only one type."""
        if not self.log_file.exists():
            return []
        events = []
        try:
            with open(self.log_file, 'r', encoding='utf-8') as f:
                for line in f:
                    if event_type and f"{event_type}:" not in line:
                        continue
                    json_start = line.find('{')
                    if json_start == -1:
                        continue
                    try:
                        events.append(json.loads(line[json_start:]))
                    except json.JSONDecodeError:
                        continue
        except OSError as e:
            logger.error(f"Error reading activity log {self.log_file}: {e}")
        return events

    def cell_dir(self, broker: str, scenario: str, test: str) -> Path:
        return self.output_dir / broker / scenario / test

    def repetition_path(self, broker: str, scenario: str, test: str, repetition: int) -> Path:
        return self.cell_dir(broker, scenario, test) / f"rep{repetition}.csv"

    def write_repetition(self, broker: str, scenario: str, test: str, repetition: int,
                         records: Sequence[LatencyRecord]) -> Path:
        path = self.repetition_path(broker, scenario, test, repetition)
        tmp = path.with_suffix('.csv.tmp')
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, 'w', newline='', encoding='utf-8') as f:
                writer = csv.DictWriter(f, fieldnames=RECORD_COLUMNS)
                writer.writeheader()
                for record in records:
                    writer.writerow({**record.to_dict(), 'latency_ms': record.latency_ms})
            tmp.replace(path)
        except OSError as e:
            raise IoError(f"Cannot write {path}: {e}")
        return path

    def read_repetition(self, broker: str, scenario: str, test: str, repetition: int) -> List[LatencyRecord]:
        path = self.repetition_path(broker, scenario, test, repetition)
        try:
            with open(path, 'r', newline='', encoding='utf-8') as f:
                return [LatencyRecord.from_dict(row) for row in csv.DictReader(f)]
        except OSError as e:
            raise IoError(f"Cannot read {path}: {e}")

    def write_cell(self, cell: ResultCell, extra: Optional[Dict[str, Any]] = None) -> Path:
        path = self.cell_dir(cell.broker, cell.scenario, cell.test) / CELL_MARKER
        tmp = path.with_suffix('.json.tmp')
        try:
            path.parent.mkdir(parents=True, exist_ok=True)
            with open(tmp, 'w', encoding='utf-8') as f:
                json.dump({**cell.to_dict(), **(extra or {})}, f, indent=2, sort_keys=True)
            tmp.replace(path)
        except OSError as e:
            raise IoError(f"Cannot write {path}: {e}")
        return path

    def load_cell_document(self, broker: str, scenario: str, test: str) -> Optional[Dict[str, Any]]:
        path = self.cell_dir(broker, scenario, test) / CELL_MARKER
        if not path.exists():
            return None
        try:
            with open(path, 'r', encoding='utf-8') as f:
                return json.load(f)
        except (OSError, json.JSONDecodeError) as e:
            logger.warning(f"Ignoring unreadable cell marker {path}: {e}")
            return None

    def load_cell(self, broker: str, scenario: str, test: str) -> Optional[ResultCell]:
        document = self.load_cell_document(broker, scenario, test)
        return ResultCell.from_dict(document) if document else None

    def is_cell_complete(self, broker: str, scenario: str, test: str) -> bool:
        document = self.load_cell_document(broker, scenario, test)
        return bool(document) and document.get('status') == 'completed'

    def load_cells(self) -> List[ResultCell]:
        return load_cells(self.output_dir)

    def write_summary(self, cells: Sequence[ResultCell], metadata: Dict[str, Any]) -> List[Path]:
        """summary.json plus the CSV exports."""
        return export(cells, 'json', self.output_dir, metadata) + export(cells, 'csv', self.output_dir)


def load_cells(output_dir) -> List[ResultCell]:
    """Every cell.json below an output directory, in path order."""
    cells = []
    for path in sorted(Path(output_dir).glob(f"*/*/*/{CELL_MARKER}")):
        try:
            with open(path, 'r', encoding='utf-8') as f:
                cells.append(ResultCell.from_dict(json.load(f)))
        except (OSError, json.JSONDecodeError, KeyError) as e:
            logger.warning(f"Skipping unreadable cell {path}: {e}")
    return cells
