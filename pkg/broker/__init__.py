"""
Minimal in-process MQTT 3.1.1 broker used as a hermetic benchmark target.
"""

from .subscriptions import Subscription, SubscriptionTable, match_filter
from .stub import FaultPlan, FaultPlanError, ProtocolViolation, StubBroker, StubSession, StubStats, run_stub

__all__ = [
    'Subscription', 'SubscriptionTable', 'match_filter',
    'FaultPlan', 'FaultPlanError', 'ProtocolViolation', 'StubBroker', 'StubSession', 'StubStats',
    'run_stub',
]
