"""
Core module for benchmark planning and execution.

This module provides:
- Plan loading and schema validation (brokers, scenarios, tests)
- The orchestrator that runs the broker x scenario x test matrix
"""

from .plan import (
    KNOWN_BROKERS, BrokerEndpoint, BrokerMetadata, ClientSettings, PlanError, ProxySettings, SchemaError,
    TestPlan, TestSpec, UnknownScenario, broker_family, load_plan, load_plan_file,
)
from .orchestrator import (
    BenchmarkOrchestrator, BrokerUnreachable, PlanOutcome, RunResult, cell_topic, derive_seed,
    staggered_start,
)

__all__ = [
    'KNOWN_BROKERS', 'BrokerEndpoint', 'BrokerMetadata', 'ClientSettings', 'PlanError', 'ProxySettings',
    'SchemaError', 'TestPlan', 'TestSpec', 'UnknownScenario', 'broker_family', 'load_plan', 'load_plan_file',
    'BenchmarkOrchestrator', 'BrokerUnreachable', 'PlanOutcome', 'RunResult', 'cell_topic', 'derive_seed',
    'staggered_start',
]
