"""
Benchmark orchestrator.

Runs the broker x scenario x test matrix one cell at a time: for every
repetition an impairment proxy is started in front of the broker, a
subscriber subscribes to the repetition's topic, then the publisher fleet
sends its payloads. Results are written as soon as they exist, so an
interrupted plan resumes at the first unfinished cell.
"""

import asyncio
import logging
import time
import zlib
from dataclasses import dataclass, field
from datetime import datetime
from typing import Any, Callable, Dict, List, Optional, Tuple

import numpy as np
import pytz

from client import (
    HELLO_WORLD, ClientError, LatencyRecord, MQTTSession, SubscriberCollector, make_bench_payload,
    publisher_topic,
)
from client.payload import KIB, MIB
from network import ImpairmentProxy, ProxyError, Scenario
from reporting import POOLING, QUANTILE_METHOD, IoError, RepetitionSummary, ResultCell, ResultStore, summarize
from .plan import BrokerEndpoint, TestPlan, TestSpec

logger = logging.getLogger(__name__)

PROBE_TIMEOUT_S = 2.0
UNREACHABLE_ATTEMPTS = 2
RETRY_BACKOFF_S = 1.0

Fingerprint = List[Tuple[int, str, Tuple[int, ...]]]


class BrokerUnreachable(Exception):
    """Raised when a broker does not accept TCP connections"""
    pass


def staggered_start(i: int, n: int, interval_ms: float) -> float:
    """
    Start offset in milliseconds for publisher i of n, spreading first publishes over one interval.

    Returns:
        i * interval_ms / n
    """
    if n < 1:
        raise ValueError(f"Publisher count must be >= 1, got {n}")
    if not 0 <= i < n:
        raise ValueError(f"Publisher index {i} outside 0..{n - 1}")
    return i * interval_ms / n


def cell_topic(broker: str, scenario: str, test: str, label: str) -> str:
    """Topic unique to one repetition of one cell."""
    return f"bench/{broker}/{scenario}/{test}/{label}"


def derive_seed(plan_seed: int, broker: str, scenario: str, test: str, label: str) -> int:
    """Per-repetition proxy seed; depends only on the plan seed and the repetition's identity."""
    key = zlib.crc32(f"{broker}/{scenario}/{test}/{label}".encode('utf-8'))
    return int(np.random.SeedSequence([plan_seed, key]).generate_state(1, dtype=np.uint64)[0])


@dataclass
class RunResult:
    """Outcome of one repetition (or warm-up run) of one cell."""
    broker: str
    scenario: str
    test: str
    repetition: int
    expected: int
    records: List[LatencyRecord] = field(default_factory=list)
    exclusions: int = 0
    duplicates: int = 0
    publish_failures: int = 0
    drain_timed_out: bool = False
    warmup: bool = False
    seed: Optional[int] = None
    started_at: str = ''
    finished_at: str = ''
    proxy: Dict[str, Any] = field(default_factory=dict)
    schedule: Fingerprint = field(default_factory=list)
    events: List[Tuple[str, Optional[int], int]] = field(default_factory=list)

    @property
    def undelivered(self) -> int:
        return self.expected - len(self.records) - self.exclusions

    def summary(self) -> RepetitionSummary:
        return RepetitionSummary(
            repetition=self.repetition,
            stats=summarize(self.records) if self.records else None,
            expected=self.expected,
            exclusions=self.exclusions,
            undelivered=self.undelivered,
            duplicates=self.duplicates,
            drain_timed_out=self.drain_timed_out,
        )


@dataclass
class PlanOutcome:
    cells: List[ResultCell]
    metadata: Dict[str, Any]
    planned_cells: int
    interrupted: bool = False

    @property
    def failed_cells(self) -> List[ResultCell]:
        return [c for c in self.cells if c.status != 'completed']

    @property
    def complete(self) -> bool:
        return not self.interrupted and not self.failed_cells and len(self.cells) == self.planned_cells


class BenchmarkOrchestrator:
    """
    Main orchestrator for benchmark plans.
    Runs cells sequentially and hands results to the ResultStore.
    """

    def __init__(self, plan: TestPlan, store: Optional[ResultStore] = None,
                 clock: Callable[[], int] = time.monotonic_ns):
        self.plan = plan
        self.clock = clock
        self.store = store
        self.seed = plan.seed if plan.seed is not None else int(np.random.SeedSequence().entropy)
        self.running = False
        self.schedules: Dict[Tuple[str, str, str, int], Fingerprint] = {}
        self._proxy_stats: Dict[str, Dict[str, int]] = {}
        self._stop_requested = False
        if plan.seed is None:
            logger.info(f"No seed in plan, using {self.seed}")
        logger.info("Benchmark orchestrator initialized")

    def run(self) -> PlanOutcome:
        """Run the whole plan on a fresh event loop."""
        return asyncio.run(self.run_plan())

    @property
    def stopping(self) -> bool:
        return self._stop_requested

    def stop(self) -> None:
        """Finish the current repetition, then stop. Unfinished cells stay resumable."""
        if not self.running:
            return
        self._stop_requested = True
        logger.info("Stop requested, finishing current repetition")

    async def run_plan(self) -> PlanOutcome:
        if self.running:
            raise RuntimeError("Orchestrator is already running")
        self.running = True
        self._stop_requested = False
        if self.store is None:
            self.store = ResultStore(self.plan.output_dir)

        started_at = datetime.now(pytz.UTC).isoformat()
        matrix = self.plan.cells()
        self.store.log_event('PLAN_STARTED', seed=self.seed, cells=len(matrix), filters=self.plan.filters,
                             output_dir=str(self.store.output_dir))
        logger.info(f"Running {len(matrix)} cells into {self.store.output_dir} (seed {self.seed})")

        cells: List[ResultCell] = []
        try:
            for broker, scenario, test in matrix:
                if self._stop_requested:
                    break
                if self.store.is_cell_complete(broker.name, scenario.name, test.name):
                    cells.append(self._resume_cell(broker, scenario, test))
                    continue
                cells.append(await self._run_matrix_cell(broker, scenario, test))
        finally:
            interrupted = self._stop_requested or len(cells) < len(matrix)
            metadata = self.metadata(started_at, datetime.now(pytz.UTC).isoformat())
            try:
                self.store.write_summary(cells, metadata)
            except IoError as e:
                logger.error(f"Failed to write summary: {e}")
            failed = [c.key for c in cells if c.status != 'completed']
            self.store.log_event('PLAN_FINISHED', cells=len(cells), failed=failed, interrupted=interrupted)
            self.store.close()
            self.running = False

        logger.info(f"Plan finished: {len(cells) - len(failed)}/{len(matrix)} cells completed")
        return PlanOutcome(cells=cells, metadata=metadata, planned_cells=len(matrix), interrupted=interrupted)

    def _resume_cell(self, broker: BrokerEndpoint, scenario: Scenario, test: TestSpec) -> ResultCell:
        document = self.store.load_cell_document(broker.name, scenario.name, test.name)
        self._proxy_stats[f"{broker.name}/{scenario.name}/{test.name}"] = document.get('proxy_totals', {})
        self.store.log_event('CELL_SKIPPED', broker=broker.name, scenario=scenario.name, test=test.name,
                             reason='already completed')
        logger.info(f"Skipping completed cell {broker.name}/{scenario.name}/{test.name}")
        return ResultCell.from_dict(document)

    async def _run_matrix_cell(self, broker: BrokerEndpoint, scenario: Scenario, test: TestSpec) -> ResultCell:
        key = f"{broker.name}/{scenario.name}/{test.name}"
        self.store.log_event('CELL_STARTED', broker=broker.name, scenario=scenario.name, test=test.name,
                             repetitions=test.repetitions, warmup_runs=test.warmup_runs)
        runs: List[Tuple[RepetitionSummary, List[LatencyRecord]]] = []
        totals = {'connections': 0, 'chunks': 0, 'bytes': 0, 'penalties': 0}
        cell_fields = dict(setup=broker.setup, family=broker.family, payload_size=test.payload_size)

        try:
            for k in range(test.warmup_runs):
                await self._run_with_retry(broker, scenario, test, k, warmup=True)
            for k in range(test.repetitions):
                if self._stop_requested:
                    break
                result = await self._run_with_retry(broker, scenario, test, k)
                self.store.write_repetition(broker.name, scenario.name, test.name, k, result.records)
                self.schedules[(broker.name, scenario.name, test.name, k)] = result.schedule
                for name in totals:
                    totals[name] += result.proxy.get(name, 0)
                runs.append((result.summary(), result.records))
                self.store.log_event('REPETITION_RECORDED', broker=broker.name, scenario=scenario.name,
                                     test=test.name, repetition=k, records=len(result.records),
                                     exclusions=result.exclusions, undelivered=result.undelivered,
                                     drain_timed_out=result.drain_timed_out, seed=result.seed)
        except (BrokerUnreachable, ClientError, ProxyError, IoError) as e:
            logger.error(f"Cell {key} failed: {e}")
            cell = ResultCell.from_repetitions(broker.name, scenario.name, test.name, runs,
                                               status='failed', error=str(e), **cell_fields)
            self._finish_cell(cell, totals)
            self.store.log_event('CELL_FAILED', broker=broker.name, scenario=scenario.name, test=test.name,
                                 error=str(e), recorded=len(runs))
            return cell

        status = 'completed' if len(runs) == test.repetitions else 'interrupted'
        cell = ResultCell.from_repetitions(broker.name, scenario.name, test.name, runs, status=status,
                                           **cell_fields)
        self._finish_cell(cell, totals)
        self.store.log_event('CELL_COMPLETED', broker=broker.name, scenario=scenario.name, test=test.name,
                             status=status, repetitions=len(runs), undelivered=cell.undelivered,
                             median_ms=cell.pooled.median if cell.pooled else None)
        return cell

    def _finish_cell(self, cell: ResultCell, totals: Dict[str, int]) -> None:
        self._proxy_stats["/".join(cell.key)] = totals
        try:
            self.store.write_cell(cell, {'proxy_totals': totals,
                                         'completed_at': datetime.now(pytz.UTC).isoformat()})
        except IoError as e:
            logger.error(f"Failed to write cell marker for {'/'.join(cell.key)}: {e}")

    async def _run_with_retry(self, broker: BrokerEndpoint, scenario: Scenario, test: TestSpec,
                              repetition: int, warmup: bool = False) -> RunResult:
        last_error = None
        for attempt in range(1, UNREACHABLE_ATTEMPTS + 1):
            try:
                return await self.run_cell(broker, scenario, test, repetition, warmup=warmup)
            except BrokerUnreachable as e:
                last_error = e
                logger.warning(f"{e} (attempt {attempt}/{UNREACHABLE_ATTEMPTS})")
                if attempt < UNREACHABLE_ATTEMPTS:
                    await asyncio.sleep(RETRY_BACKOFF_S)
        raise last_error

    async def probe(self, broker: BrokerEndpoint) -> None:
        """Check the broker accepts TCP connections."""
        try:
            _, writer = await asyncio.wait_for(asyncio.open_connection(broker.host, broker.port), PROBE_TIMEOUT_S)
        except (OSError, asyncio.TimeoutError) as e:
            raise BrokerUnreachable(f"Broker {broker.name} at {broker.host}:{broker.port} unreachable: {e}")
        writer.close()
        try:
            await writer.wait_closed()
        except (ConnectionError, OSError):
            pass

    async def run_cell(self, broker: BrokerEndpoint, scenario: Scenario, test: TestSpec,
                       repetition: int, warmup: bool = False) -> RunResult:
        """
        Run one repetition of one cell through a fresh impairment proxy.

        The subscriber is subscribed before any publisher connects; the run ends
        when every expected message arrived or the drain timeout expired.

        Raises:
            BrokerUnreachable: before any client starts, if the broker is down
        """
        label = f"w{repetition}" if warmup else str(repetition)
        await self.probe(broker)

        topic = cell_topic(broker.name, scenario.name, test.name, label)
        client_prefix = f"bench-{zlib.crc32(topic.encode('utf-8')) & 0xFFFF:04x}"
        result = RunResult(
            broker=broker.name, scenario=scenario.name, test=test.name, repetition=repetition,
            expected=test.expected_messages, warmup=warmup,
            seed=derive_seed(self.seed, broker.name, scenario.name, test.name, label),
            started_at=datetime.now(pytz.UTC).isoformat(),
        )
        proxy = ImpairmentProxy(self.plan.proxy.address, (broker.host, broker.port), scenario,
                                seed=result.seed, loss_model=self.plan.loss_model, clock=self.clock)
        sessions: List[MQTTSession] = []
        collector_task = None
        try:
            await proxy.start()
            host, port = proxy.address

            subscriber = MQTTSession(self.plan.client.client_config(f"{client_prefix}-sub"), clock=self.clock)
            sessions.append(subscriber)
            await subscriber.connect(host, port)
            await subscriber.subscribe(f"{topic}/#", qos=test.qos)
            self._event(result, 'subscribed')

            collector = SubscriberCollector(subscriber, topic, broker.name, scenario.name, test.name,
                                            repetition, test.expected_messages)
            collector_task = asyncio.create_task(collector.run())

            # Sequential connects keep proxy connection indices stable across runs
            publishers = []
            for i in range(test.publisher_threads):
                session = MQTTSession(self.plan.client.client_config(f"{client_prefix}-p{i}"), clock=self.clock)
                sessions.append(session)
                await session.connect(host, port)
                publishers.append(session)

            start = asyncio.get_running_loop().time()
            await asyncio.gather(*(self._publish(result, session, i, test, topic, start)
                                   for i, session in enumerate(publishers)))
            self._event(result, 'publishing_done')

            try:
                await asyncio.wait_for(collector.complete.wait(), test.drain_timeout)
            except asyncio.TimeoutError:
                result.drain_timed_out = True
                logger.warning(f"{topic}: drain timeout after {test.drain_timeout:.1f}s, "
                               f"{len(collector.records)}/{test.expected_messages} received")

            result.records = list(collector.records)
            result.exclusions = collector.exclusions
            result.duplicates = collector.duplicates
        finally:
            if collector_task is not None:
                collector_task.cancel()
                try:
                    await collector_task
                except asyncio.CancelledError:
                    pass
            for session in sessions:
                await session.disconnect()
            await proxy.close()
            result.proxy = proxy.report()
            result.schedule = proxy.release_fingerprint()
            result.finished_at = datetime.now(pytz.UTC).isoformat()

        level = logging.DEBUG if warmup else logging.INFO
        logger.log(level, f"{topic}: {len(result.records)}/{result.expected} records, "
                          f"{result.exclusions} excluded, {result.undelivered} undelivered")
        return result

    async def _publish(self, result: RunResult, session: MQTTSession, index: int, test: TestSpec,
                       topic: str, start: float) -> None:
        loop = asyncio.get_running_loop()
        offset_s = staggered_start(index, test.publisher_threads, test.publish_interval_ms) / 1000
        interval_s = test.publish_interval_ms / 1000
        body = HELLO_WORLD if test.kind == 'offset' else b''
        target = publisher_topic(topic, index)

        for sequence in range(test.messages_per_publisher):
            delay = start + offset_s + sequence * interval_s - loop.time()
            if delay > 0:
                await asyncio.sleep(delay)
            if sequence == 0:
                self._event(result, 'first_publish', index)
            payload = make_bench_payload(test.payload_size, sequence, self.clock(), body=body)
            try:
                await session.publish_qos1(target, payload)
            except ClientError as e:
                result.publish_failures += 1
                logger.warning(f"Publisher {index} on {topic} stopped: {e}")
                return

    def _event(self, result: RunResult, name: str, publisher: Optional[int] = None) -> None:
        result.events.append((name, publisher, self.clock()))

    def metadata(self, started_at: str, finished_at: str) -> Dict[str, Any]:
        """Run metadata stored in summary.json."""
        client = self.plan.client
        return {
            'seed': self.seed,
            'filters': dict(self.plan.filters),
            'units': {'1KB': KIB, '10KB': 10 * KIB, '1MB': MIB, 'latency': 'ms'},
            'quantile_method': QUANTILE_METHOD,
            'pooling': POOLING,
            'loss_model': self.plan.loss_model.to_dict(),
            'retransmit_policy': {
                'ack_timeout_s': client.ack_timeout_s,
                'max_retransmits': client.max_retransmits,
                'note': 'harness choice, not a measured property of the brokers',
            },
            'publish_alignment': 'staggered: publisher i of n starts at i * interval / n',
            'tests': {t.name: {**t.to_dict(), 'drain_timeout_s': t.drain_timeout} for t in self.plan.tests},
            'brokers': {b.family: b.metadata.to_dict() for b in self.plan.brokers},
            'endpoints': [b.to_dict() for b in self.plan.brokers],
            'scenarios': [s.to_dict() for s in self.plan.scenarios],
            'proxy_stats': dict(self._proxy_stats),
            'started_at': started_at,
            'finished_at': finished_at,
        }
