"""
Network scenarios and the impairment model applied per direction.

The three presets are the edge-network conditions the benchmark runs under:
local (no impairment), optimal and worst. Each value applies to each
direction of a connection independently.
"""

import logging
import math
from dataclasses import asdict, dataclass
from typing import Any, Dict

import numpy as np

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class Scenario:
    """Per-direction impairment: mean latency, jitter (standard deviation) and loss."""
    name: str
    latency_ms: float = 0.0
    jitter_ms: float = 0.0
    loss_pct: float = 0.0

    def __post_init__(self):
        if not self.name:
            raise ValueError("Scenario name must not be empty")
        if self.latency_ms < 0 or self.jitter_ms < 0:
            raise ValueError(f"Scenario {self.name}: latency and jitter must be >= 0")
        if not 0 <= self.loss_pct <= 100:
            raise ValueError(f"Scenario {self.name}: loss_pct must be within 0..100")

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'Scenario':
        return cls(
            name=data['name'],
            latency_ms=float(data.get('latency_ms', 0.0)),
            jitter_ms=float(data.get('jitter_ms', 0.0)),
            loss_pct=float(data.get('loss_pct', 0.0)),
        )


PRESETS: Dict[str, Scenario] = {
    'local': Scenario('local', 0.0, 0.0, 0.0),
    'optimal': Scenario('optimal', 2.5, 0.5, 0.04),
    'worst': Scenario('worst', 6.25, 1.25, 0.1),
}


@dataclass(frozen=True)
class LossModel:
    """
    Loss as a retransmission-time penalty.

    A relayed chunk is split into virtual segments of ``segment_size`` bytes;
    if any of them is lost the whole chunk is delayed by the penalty.
    """
    segment_size: int = 1460
    rtt_multiplier: float = 1.5

    def __post_init__(self):
        if self.segment_size <= 0:
            raise ValueError("segment_size must be positive")
        if self.rtt_multiplier < 0:
            raise ValueError("rtt_multiplier must be >= 0")

    def penalty_ms(self, scenario: Scenario) -> float:
        return max(1.0, self.rtt_multiplier * 2 * scenario.latency_ms)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['approximation'] = 'virtual-segment loss applied as a retransmission delay penalty'
        return data


def sample_delay(s: Scenario, rng: np.random.Generator) -> float:
    """
    One-way delay in milliseconds drawn from Normal(latency_ms, jitter_ms), truncated at 0.

    A zero-jitter scenario returns latency_ms exactly and consumes no randomness.
    """
    if s.jitter_ms == 0:
        return s.latency_ms
    return max(0.0, float(rng.normal(s.latency_ms, s.jitter_ms)))


def apply_loss(chunk_len: int, s: Scenario, m: LossModel, rng: np.random.Generator) -> float:
    """Extra delay in milliseconds: the model penalty if any virtual segment is lost, else 0."""
    if s.loss_pct == 0 or chunk_len <= 0:
        return 0.0
    segments = math.ceil(chunk_len / m.segment_size)
    lost = rng.random(segments) < s.loss_pct / 100.0
    return m.penalty_ms(s) if lost.any() else 0.0
