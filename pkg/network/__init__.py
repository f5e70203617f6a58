"""
Network impairment module.

Provides the scenario presets, the delay/jitter/loss model and the
userspace TCP proxy that applies them per direction.
"""

from .scenarios import PRESETS, LossModel, Scenario, apply_loss, sample_delay
from .proxy import (
    BindError, ImpairmentProxy, ProxyError, ProxyStats, ReleaseSchedule, UpstreamUnreachable,
    run_proxy, schedule_chunk,
)

__all__ = [
    'PRESETS', 'LossModel', 'Scenario', 'apply_loss', 'sample_delay',
    'BindError', 'ImpairmentProxy', 'ProxyError', 'ProxyStats', 'ReleaseSchedule',
    'UpstreamUnreachable', 'run_proxy', 'schedule_chunk',
]
