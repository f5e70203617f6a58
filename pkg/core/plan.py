"""
Benchmark plan: broker endpoints, scenarios, tests and their validation.

A plan document is YAML with the top-level keys brokers, scenarios, tests,
proxy, output_dir and seed (plus the optional client and loss_model
sections). It is checked against PLAN_SCHEMA before any value is used.
"""

import logging
import os
from dataclasses import asdict, dataclass, field, replace
from typing import Any, Dict, Iterable, List, Mapping, Optional, Tuple

import yaml
from jsonschema import Draft202012Validator
from jsonschema.exceptions import best_match

from client import OFFSET_PAYLOAD_SIZE, ClientConfig, format_size, parse_size
from client.payload import HEADER_SIZE, MIB
from config import settings
from network import PRESETS, LossModel, Scenario

logger = logging.getLogger(__name__)

MIN_RECOMMENDED_REPETITIONS = 10
TEST_KINDS = ('offset', 'payload')
DEFAULT_MESSAGES_PER_PUBLISHER = {'offset': 1, 'payload': 10}


# Custom Exceptions
class PlanError(Exception):
    """Base exception for plan loading and validation errors"""
    pass


class SchemaError(PlanError):
    """Raised when the plan document does not match the schema"""

    def __init__(self, path: str, message: str):
        super().__init__(f"{path or '<root>'}: {message}")
        self.path = path
        self.message = message


class UnknownScenario(PlanError):
    """Raised when a scenario name is neither a preset nor defined in the plan"""

    def __init__(self, name: str, known: Iterable[str]):
        super().__init__(f"Unknown scenario {name!r} (known: {', '.join(sorted(known))})")
        self.name = name


@dataclass(frozen=True)
class BrokerMetadata:
    language: str = 'unknown'
    arm64_supported: bool = False
    mqtt311: bool = True
    mqtt5: bool = False

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


KNOWN_BROKERS: Dict[str, BrokerMetadata] = {
    'mosquitto': BrokerMetadata('C', arm64_supported=True, mqtt311=True, mqtt5=True),
    'emqx': BrokerMetadata('Erlang', arm64_supported=True, mqtt311=True, mqtt5=True),
    'rabbitmq': BrokerMetadata('Starlark', arm64_supported=True, mqtt311=True, mqtt5=False),
    'vernemq': BrokerMetadata('Erlang', arm64_supported=False, mqtt311=True, mqtt5=True),
    'hivemq': BrokerMetadata('Java', arm64_supported=False, mqtt311=True, mqtt5=True),
    'stub': BrokerMetadata('Python', arm64_supported=True, mqtt311=True, mqtt5=False),
}


def broker_family(name: str) -> str:
    """Registry key for an endpoint name: "mosquitto-rp" -> "mosquitto"; unknown names map to themselves."""
    lowered = name.lower()
    if lowered in KNOWN_BROKERS:
        return lowered
    for separator in ('-', '_', '@'):
        head = lowered.split(separator, 1)[0]
        if head in KNOWN_BROKERS:
            return head
    return name


@dataclass(frozen=True)
class BrokerEndpoint:
    name: str
    host: str
    port: int
    setup: str = 'VM'
    metadata: BrokerMetadata = BrokerMetadata()

    @property
    def family(self) -> str:
        return broker_family(self.name)

    def to_dict(self) -> Dict[str, Any]:
        data = asdict(self)
        data['family'] = self.family
        return data


@dataclass(frozen=True)
class TestSpec:
    """One experiment's parameters."""
    name: str
    kind: str = 'payload'
    publisher_threads: int = 100
    publish_interval_ms: float = 250.0
    messages_per_publisher: int = 10
    payload_size: int = 1024
    qos: int = 1
    repetitions: int = 10
    warmup_runs: int = settings.DEFAULT_WARMUP_RUNS
    drain_timeout_s: Optional[float] = None

    __test__ = False  # not a pytest class

    @property
    def expected_messages(self) -> int:
        return self.publisher_threads * self.messages_per_publisher

    @property
    def drain_timeout(self) -> float:
        """Seconds to wait after the last publish: 10 s plus 1 s per MB unless set explicitly."""
        if self.drain_timeout_s is not None:
            return self.drain_timeout_s
        return settings.DEFAULT_DRAIN_BASE_S + settings.DEFAULT_DRAIN_PER_MB_S * self.payload_size / MIB

    @property
    def size_label(self) -> str:
        return format_size(self.payload_size)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ClientSettings:
    keep_alive_s: int = settings.DEFAULT_KEEP_ALIVE_S
    connect_timeout_s: float = settings.DEFAULT_CONNECT_TIMEOUT_S
    ack_timeout_s: float = settings.DEFAULT_ACK_TIMEOUT_S
    max_retransmits: int = settings.DEFAULT_MAX_RETRANSMITS

    def client_config(self, client_id: str) -> ClientConfig:
        return ClientConfig(
            client_id=client_id,
            keep_alive_s=self.keep_alive_s,
            connect_timeout=self.connect_timeout_s,
            ack_timeout=self.ack_timeout_s,
            max_retransmits=self.max_retransmits,
        )

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass(frozen=True)
class ProxySettings:
    host: str = settings.DEFAULT_PROXY_HOST
    port: int = 0

    @property
    def address(self) -> Tuple[str, int]:
        return self.host, self.port


@dataclass
class TestPlan:
    brokers: List[BrokerEndpoint]
    scenarios: List[Scenario]
    tests: List[TestSpec]
    proxy: ProxySettings = field(default_factory=ProxySettings)
    output_dir: str = settings.BENCHKIT_OUT
    seed: Optional[int] = None
    client: ClientSettings = field(default_factory=ClientSettings)
    loss_model: LossModel = field(default_factory=LossModel)
    filters: Dict[str, Any] = field(default_factory=dict)

    __test__ = False

    def cells(self) -> List[Tuple[BrokerEndpoint, Scenario, TestSpec]]:
        """The broker x scenario x test matrix, in execution order."""
        return [(b, s, t) for b in self.brokers for s in self.scenarios for t in self.tests]

    def scenario(self, name: str) -> Scenario:
        for scenario in self.scenarios:
            if scenario.name == name:
                return scenario
        if name in PRESETS:
            return PRESETS[name]
        raise UnknownScenario(name, set(PRESETS) | {s.name for s in self.scenarios})

    @property
    def custom_scenarios(self) -> List[Scenario]:
        return [s for s in self.scenarios if s.name not in PRESETS]

    def filtered(self, only: Optional[Iterable[str]] = None, scenario: Optional[str] = None,
                 arm64_only: bool = False) -> 'TestPlan':
        """
        Restrict the plan for a partial rerun.

        Args:
            only: Broker names to keep
            scenario: Single scenario name to run
            arm64_only: Keep only brokers whose metadata reports ARM64 support

        Returns:
            A new plan; the applied filters are recorded in ``filters``
        """
        brokers = list(self.brokers)
        scenarios = list(self.scenarios)
        filters = dict(self.filters)

        if only:
            wanted = [name.strip() for name in only if name.strip()]
            unknown = sorted(set(wanted) - {b.name for b in brokers})
            if unknown:
                raise PlanError(f"Unknown broker(s) in --only: {', '.join(unknown)}")
            brokers = [b for b in brokers if b.name in wanted]
            filters['only'] = wanted
        if scenario:
            scenarios = [self.scenario(scenario)]
            filters['scenario'] = scenario
        if arm64_only:
            brokers = [b for b in brokers if b.metadata.arm64_supported]
            filters['arm64_only'] = True
        if not brokers:
            raise PlanError("No brokers left after applying filters")
        return replace(self, brokers=brokers, scenarios=scenarios, filters=filters)

    def to_dict(self) -> Dict[str, Any]:
        return {
            'brokers': [b.to_dict() for b in self.brokers],
            'scenarios': [s.to_dict() for s in self.scenarios],
            'tests': [t.to_dict() for t in self.tests],
            'proxy': asdict(self.proxy),
            'output_dir': self.output_dir,
            'seed': self.seed,
            'client': self.client.to_dict(),
            'loss_model': self.loss_model.to_dict(),
            'filters': dict(self.filters),
        }


_NAME = {'type': 'string', 'pattern': r'^[A-Za-z0-9][A-Za-z0-9_.-]*$'}
_NON_NEGATIVE = {'type': 'number', 'minimum': 0}

PLAN_SCHEMA: Dict[str, Any] = {
    '$schema': 'https://json-schema.org/draft/2020-12/schema',
    'type': 'object',
    'additionalProperties': False,
    'required': ['brokers', 'tests'],
    'properties': {
        'brokers': {'type': 'array', 'minItems': 1, 'items': {'$ref': '#/$defs/broker'}},
        'scenarios': {
            'type': 'array',
            'minItems': 1,
            'items': {'anyOf': [{'type': 'string', 'minLength': 1}, {'$ref': '#/$defs/scenario'}]},
        },
        'tests': {'type': 'array', 'minItems': 1, 'items': {'$ref': '#/$defs/test'}},
        'proxy': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'host': {'type': 'string', 'minLength': 1},
                'port': {'type': 'integer', 'minimum': 0, 'maximum': 65535},
            },
        },
        'output_dir': {'type': 'string', 'minLength': 1},
        'seed': {'type': ['integer', 'null'], 'minimum': 0},
        'client': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'keep_alive_s': {'type': 'integer', 'minimum': 1, 'maximum': 65535},
                'connect_timeout_s': {'type': 'number', 'exclusiveMinimum': 0},
                'ack_timeout_s': {'type': 'number', 'exclusiveMinimum': 0},
                'max_retransmits': {'type': 'integer', 'minimum': 0},
            },
        },
        'loss_model': {
            'type': 'object',
            'additionalProperties': False,
            'properties': {
                'segment_size': {'type': 'integer', 'minimum': 1},
                'rtt_multiplier': _NON_NEGATIVE,
            },
        },
    },
    '$defs': {
        'broker': {
            'type': 'object',
            'additionalProperties': False,
            'required': ['name', 'host', 'port'],
            'properties': {
                'name': _NAME,
                'host': {'type': 'string', 'minLength': 1},
                'port': {'type': 'integer', 'minimum': 1, 'maximum': 65535},
                'setup': _NAME,
                'metadata': {
                    'type': 'object',
                    'additionalProperties': False,
                    'properties': {
                        'language': {'type': 'string'},
                        'arm64_supported': {'type': 'boolean'},
                        'mqtt311': {'type': 'boolean'},
                        'mqtt5': {'type': 'boolean'},
                    },
                },
            },
        },
        'scenario': {
            'type': 'object',
            'additionalProperties': False,
            'required': ['name'],
            'properties': {
                'name': _NAME,
                'latency_ms': _NON_NEGATIVE,
                'jitter_ms': _NON_NEGATIVE,
                'loss_pct': {'type': 'number', 'minimum': 0, 'maximum': 100},
            },
        },
        'test': {
            'type': 'object',
            'additionalProperties': False,
            'required': ['name', 'kind'],
            'properties': {
                'name': _NAME,
                'kind': {'enum': list(TEST_KINDS)},
                'publisher_threads': {'type': 'integer', 'minimum': 1},
                'publish_interval_ms': _NON_NEGATIVE,
                'messages_per_publisher': {'type': 'integer', 'minimum': 1},
                'payload_size': {'anyOf': [
                    {'type': 'integer', 'minimum': HEADER_SIZE},
                    {'type': 'string', 'pattern': r'^\s*\d+\s*([KkMm][Ii]?[Bb]|[Bb])?\s*$'},
                ]},
                'qos': {'const': 1},
                'repetitions': {'type': 'integer', 'minimum': 1},
                'warmup_runs': {'type': 'integer', 'minimum': 0},
                'drain_timeout_s': {'type': 'number', 'exclusiveMinimum': 0},
            },
        },
    },
}

_VALIDATOR = Draft202012Validator(PLAN_SCHEMA)


def _dotted(path: Iterable[Any]) -> str:
    return '.'.join(str(part) for part in path)


def _check_schema(document: Any) -> None:
    error = best_match(_VALIDATOR.iter_errors(document))
    if error is None:
        return
    path = list(error.absolute_path)
    if error.validator == 'additionalProperties' and isinstance(error.instance, dict):
        allowed = set(error.schema.get('properties', {}))
        extra = sorted(key for key in error.instance if key not in allowed)
        if extra:
            path.append(extra[0])
            raise SchemaError(_dotted(path), f"unknown key {extra[0]!r}")
    raise SchemaError(_dotted(path), error.message)


def _resolve_scenarios(entries: List[Any]) -> List[Scenario]:
    defined: Dict[str, Scenario] = {}
    for index, entry in enumerate(entries):
        if isinstance(entry, dict):
            if entry['name'] in defined or entry['name'] in PRESETS:
                raise SchemaError(f"scenarios.{index}.name", f"duplicate scenario name {entry['name']!r}")
            defined[entry['name']] = Scenario.from_dict(entry)

    resolved: List[Scenario] = []
    for index, entry in enumerate(entries):
        name = entry['name'] if isinstance(entry, dict) else entry
        if any(s.name == name for s in resolved):
            raise SchemaError(f"scenarios.{index}", f"duplicate scenario name {name!r}")
        if name in defined:
            resolved.append(defined[name])
        elif name in PRESETS:
            resolved.append(PRESETS[name])
        else:
            raise UnknownScenario(name, set(PRESETS) | set(defined))
    return resolved


def _build_test(index: int, data: Mapping[str, Any]) -> TestSpec:
    kind = data['kind']
    if kind == 'offset':
        if 'payload_size' in data and parse_size(data['payload_size']) != OFFSET_PAYLOAD_SIZE:
            raise SchemaError(f"tests.{index}.payload_size",
                              f"offset tests always publish {OFFSET_PAYLOAD_SIZE} bytes")
        payload_size = OFFSET_PAYLOAD_SIZE
    else:
        payload_size = parse_size(data.get('payload_size', 1024))
        if payload_size < HEADER_SIZE:
            raise SchemaError(f"tests.{index}.payload_size",
                              f"payload must be at least {HEADER_SIZE} bytes")

    test = TestSpec(
        name=data['name'],
        kind=kind,
        publisher_threads=data.get('publisher_threads', 100),
        publish_interval_ms=float(data.get('publish_interval_ms', 250.0)),
        messages_per_publisher=data.get('messages_per_publisher', DEFAULT_MESSAGES_PER_PUBLISHER[kind]),
        payload_size=payload_size,
        qos=1,
        repetitions=data.get('repetitions', settings.DEFAULT_REPETITIONS),
        warmup_runs=data.get('warmup_runs', settings.DEFAULT_WARMUP_RUNS),
        drain_timeout_s=data.get('drain_timeout_s'),
    )
    if test.repetitions < MIN_RECOMMENDED_REPETITIONS:
        logger.warning(f"Test {test.name}: {test.repetitions} repetitions is below the "
                       f"recommended minimum of {MIN_RECOMMENDED_REPETITIONS}")
    return test


def _build_broker(data: Mapping[str, Any]) -> BrokerEndpoint:
    known = KNOWN_BROKERS.get(broker_family(data['name']), BrokerMetadata())
    metadata = replace(known, **data.get('metadata', {}))
    return BrokerEndpoint(
        name=data['name'],
        host=data['host'],
        port=data['port'],
        setup=data.get('setup', 'VM'),
        metadata=metadata,
    )


def _unique(names: List[str], section: str) -> None:
    seen = set()
    for index, name in enumerate(names):
        if name in seen:
            raise SchemaError(f"{section}.{index}.name", f"duplicate name {name!r}")
        seen.add(name)


def load_plan(document: Mapping[str, Any]) -> TestPlan:
    """
    Validate a parsed plan document and build the TestPlan.

    Raises:
        SchemaError: with the dotted path of the first offending key
        UnknownScenario: if a scenario name is neither a preset nor defined in the plan
    """
    _check_schema(document)
    _unique([b['name'] for b in document['brokers']], 'brokers')
    _unique([t['name'] for t in document['tests']], 'tests')

    proxy = document.get('proxy', {})
    plan = TestPlan(
        brokers=[_build_broker(b) for b in document['brokers']],
        scenarios=_resolve_scenarios(document.get('scenarios', list(PRESETS))),
        tests=[_build_test(i, t) for i, t in enumerate(document['tests'])],
        proxy=ProxySettings(host=proxy.get('host', settings.DEFAULT_PROXY_HOST), port=proxy.get('port', 0)),
        output_dir=document.get('output_dir') or settings.BENCHKIT_OUT,
        seed=document.get('seed'),
        client=ClientSettings(**document.get('client', {})),
        loss_model=LossModel(**document.get('loss_model', {})),
    )
    logger.info(f"Loaded plan: {len(plan.brokers)} brokers x {len(plan.scenarios)} scenarios x "
                f"{len(plan.tests)} tests = {len(plan.cells())} cells")
    return plan


def load_plan_file(path: str) -> TestPlan:
    """Read a YAML plan document from disk and validate it."""
    if not os.path.exists(path):
        raise PlanError(f"Config file not found: {path}")
    try:
        with open(path, 'r', encoding='utf-8') as f:
            document = yaml.safe_load(f)
    except yaml.YAMLError as e:
        raise PlanError(f"Cannot parse {path}: {e}")
    except OSError as e:
        raise PlanError(f"Cannot read {path}: {e}")
    if document is None:
        raise SchemaError('', f"{path} is empty")
    return load_plan(document)
