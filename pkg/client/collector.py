"""
Subscriber-side sample collection.

The collector is the single consumer of a subscriber session's message
queue. It turns benchmark payloads into LatencyRecords, counts excluded
samples and drops duplicate deliveries (first arrival wins).
"""

import asyncio
import logging
from datetime import datetime
from typing import List, Optional, Set, Tuple

import pytz

from protocol import Malformed, Publish
from .payload import LatencyRecord, extract_latency, parse_bench_payload
from .session import MQTTSession

logger = logging.getLogger(__name__)


def publisher_topic(cell_topic: str, index: int) -> str:
    """Topic publisher ``index`` sends on; the subscriber listens on ``<cell_topic>/#``."""
    return f"{cell_topic}/p{index}"


def publisher_index(cell_topic: str, topic: str) -> Optional[int]:
    prefix = f"{cell_topic}/p"
    if not topic.startswith(prefix):
        return None
    suffix = topic[len(prefix):]
    return int(suffix) if suffix.isdigit() else None


class SubscriberCollector:
    """Collects LatencyRecords for one repetition of one cell."""

    def __init__(self, session: MQTTSession, cell_topic: str, broker: str, scenario: str,
                 test: str, repetition: int, expected: int):
        self.session = session
        self.cell_topic = cell_topic
        self.broker = broker
        self.scenario = scenario
        self.test = test
        self.repetition = repetition
        self.expected = expected

        self.records: List[LatencyRecord] = []
        self.exclusions = 0
        self.duplicates = 0
        self.exclusion_reasons = {}
        self.complete = asyncio.Event()
        self._seen: Set[Tuple[int, int]] = set()

    async def run(self) -> None:
        """Consume the session's messages until cancelled."""
        if self.expected == 0:
            self.complete.set()
        while True:
            publish, received_at = await self.session.messages.get()
            self.accept(publish, received_at)
            if len(self.records) + self.exclusions >= self.expected:
                self.complete.set()

    def accept(self, publish: Publish, received_at: int) -> Optional[LatencyRecord]:
        """Account one delivery; returns the new record or None if excluded or duplicate."""
        publisher = publisher_index(self.cell_topic, publish.topic)
        if publisher is None:
            self._exclude('unknown_publisher_topic', publish.topic)
            return None

        header = parse_bench_payload(publish.payload)
        if isinstance(header, Malformed):
            self._exclude(header.reason, publish.topic)
            return None

        key = (publisher, header.sequence)
        if key in self._seen:
            self.duplicates += 1
            logger.debug(f"Duplicate delivery {key} on {publish.topic} dropped")
            return None
        self._seen.add(key)

        latency = extract_latency(publish.payload, received_at)
        if isinstance(latency, Malformed):
            self._exclude(latency.reason, publish.topic)
            return None

        record = LatencyRecord(
            broker=self.broker,
            scenario=self.scenario,
            test=self.test,
            repetition=self.repetition,
            publisher=publisher,
            publisher_sequence=header.sequence,
            latency_ns=latency,
            payload_size=len(publish.payload),
            received_at=datetime.now(pytz.UTC).isoformat(),
        )
        self.records.append(record)
        return record

    def _exclude(self, reason: str, topic: str) -> None:
        self.exclusions += 1
        self.exclusion_reasons[reason] = self.exclusion_reasons.get(reason, 0) + 1
        logger.warning(f"Excluded sample on {topic}: {reason}")
