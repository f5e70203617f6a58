"""
Latency statistics: quantiles, five-number summaries and per-cell aggregation.

All values are milliseconds. Quantiles use linear interpolation between
closest ranks; repetitions are pooled into one distribution per cell.
"""

import logging
from dataclasses import asdict, dataclass, field
from typing import Any, Dict, Iterable, List, Optional, Sequence, Tuple, Union

import numpy as np

from client import LatencyRecord

logger = logging.getLogger(__name__)

QUANTILE_METHOD = 'linear interpolation between closest ranks'
POOLING = 'repetitions pooled into one distribution per cell'
TUKEY_K = 1.5


class EmptyInput(ValueError):
    """Raised when statistics are requested for no samples"""
    pass


def quantile(sorted_samples: Sequence[float], q: float) -> float:
    """
    Quantile of ascending samples: h = (n-1)q, x[floor h] + (h - floor h)(x[floor h + 1] - x[floor h]).

    Args:
        sorted_samples: Samples in ascending order
        q: Quantile within 0..1

    Returns:
        The interpolated value
    """
    if len(sorted_samples) == 0:
        raise EmptyInput("quantile of an empty sample")
    if not 0 <= q <= 1:
        raise ValueError(f"q must be within 0..1, got {q}")
    return float(np.quantile(np.asarray(sorted_samples, dtype=float), q, method='linear'))


@dataclass(frozen=True)
class SummaryStats:
    n: int
    min: float
    q1: float
    median: float
    q3: float
    max: float
    iqr: float
    mean: float
    whisker_low: float
    whisker_high: float
    outlier_count: int
    outliers: Tuple[float, ...] = ()

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['outliers'] = list(self.outliers)
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'SummaryStats':
        values = dict(data)
        values['outliers'] = tuple(values.get('outliers', ()))
        return cls(**values)


def summarize_values(values_ms: Iterable[float]) -> SummaryStats:
    """Summary of raw millisecond values."""
    x = np.sort(np.asarray(list(values_ms), dtype=float))
    if x.size == 0:
        raise EmptyInput("Cannot summarize an empty sample")

    q1, median, q3 = (quantile(x, q) for q in (0.25, 0.5, 0.75))
    iqr = q3 - q1
    low_fence, high_fence = q1 - TUKEY_K * iqr, q3 + TUKEY_K * iqr
    inside = x[(x >= low_fence) & (x <= high_fence)]
    outliers = x[(x < low_fence) | (x > high_fence)]

    return SummaryStats(
        n=int(x.size),
        min=float(x[0]),
        q1=q1,
        median=median,
        q3=q3,
        max=float(x[-1]),
        iqr=iqr,
        mean=float(x.mean()),
        whisker_low=float(inside[0]) if inside.size else q1,
        whisker_high=float(inside[-1]) if inside.size else q3,
        outlier_count=int(outliers.size),
        outliers=tuple(float(v) for v in outliers),
    )


def summarize(records: Iterable[Union[LatencyRecord, float]]) -> SummaryStats:
    """
    SummaryStats over LatencyRecords (or plain millisecond values).

    Raises:
        EmptyInput: if there are no records
    """
    return summarize_values(r.latency_ms if isinstance(r, LatencyRecord) else r for r in records)


@dataclass
class RepetitionSummary:
    repetition: int
    stats: Optional[SummaryStats]
    expected: int = 0
    exclusions: int = 0
    undelivered: int = 0
    duplicates: int = 0
    drain_timed_out: bool = False

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['stats'] = self.stats.to_dict() if self.stats else None
        return data

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'RepetitionSummary':
        values = dict(data)
        values['stats'] = SummaryStats.from_dict(values['stats']) if values.get('stats') else None
        return cls(**values)


@dataclass
class ResultCell:
    """Aggregated results of one (broker, scenario, test) cell."""
    broker: str
    scenario: str
    test: str
    setup: str = 'VM'
    family: str = ''
    payload_size: int = 0
    status: str = 'completed'
    repetitions: List[RepetitionSummary] = field(default_factory=list)
    pooled: Optional[SummaryStats] = None
    error: Optional[str] = None

    @property
    def key(self) -> Tuple[str, str, str]:
        return self.broker, self.scenario, self.test

    @property
    def exclusions(self) -> int:
        return sum(r.exclusions for r in self.repetitions)

    @property
    def undelivered(self) -> int:
        return sum(r.undelivered for r in self.repetitions)

    @property
    def duplicates(self) -> int:
        return sum(r.duplicates for r in self.repetitions)

    @classmethod
    def from_repetitions(cls, broker: str, scenario: str, test: str,
                         runs: Sequence[Tuple[RepetitionSummary, Sequence[LatencyRecord]]],
                         **fields) -> 'ResultCell':
        """Build a cell from per-repetition tallies and their records; pooled stats cover every record."""
        pooled_records = [record for _, records in runs for record in records]
        return cls(
            broker=broker,
            scenario=scenario,
            test=test,
            repetitions=[summary for summary, _ in runs],
            pooled=summarize(pooled_records) if pooled_records else None,
            **fields,
        )

    def to_dict(self) -> Dict[str, Any]:
        return {
            'broker': self.broker,
            'scenario': self.scenario,
            'test': self.test,
            'setup': self.setup,
            'family': self.family,
            'payload_size': self.payload_size,
            'status': self.status,
            'error': self.error,
            'exclusions': self.exclusions,
            'undelivered': self.undelivered,
            'duplicates': self.duplicates,
            'pooled': self.pooled.to_dict() if self.pooled else None,
            'repetitions': [r.to_dict() for r in self.repetitions],
        }

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'ResultCell':
        return cls(
            broker=data['broker'],
            scenario=data['scenario'],
            test=data['test'],
            setup=data.get('setup', 'VM'),
            family=data.get('family', ''),
            payload_size=data.get('payload_size', 0),
            status=data.get('status', 'completed'),
            error=data.get('error'),
            repetitions=[RepetitionSummary.from_dict(r) for r in data.get('repetitions', [])],
            pooled=SummaryStats.from_dict(data['pooled']) if data.get('pooled') else None,
        )
