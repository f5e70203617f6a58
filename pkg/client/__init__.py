"""
Client engine for the benchmark harness.

This module provides:
- MQTT 3.1.1 client sessions (connect, subscribe, QoS 1 publish, keepalive)
- Benchmark payload construction and latency extraction
- Subscriber-side sample collection with duplicate suppression
"""

from .session import (
    AckExhausted, AckTimeout, ClientConfig, ClientError, ConnectRefused, ConnectTimeout,
    InvalidTopic, MQTTSession, NotConnected, Phase, SessionState, SubscriptionFailed, TransportError,
)
from .payload import (
    HEADER_SIZE, HELLO_WORLD, OFFSET_PAYLOAD_SIZE, BenchHeader, LatencyRecord, SizeTooSmall,
    extract_latency, format_size, make_bench_payload, parse_bench_payload, parse_size,
)
from .collector import SubscriberCollector, publisher_index, publisher_topic

__all__ = [
    'AckExhausted', 'AckTimeout', 'ClientConfig', 'ClientError', 'ConnectRefused', 'ConnectTimeout',
    'InvalidTopic', 'MQTTSession', 'NotConnected', 'Phase', 'SessionState', 'SubscriptionFailed',
    'TransportError',
    'HEADER_SIZE', 'HELLO_WORLD', 'OFFSET_PAYLOAD_SIZE', 'BenchHeader', 'LatencyRecord', 'SizeTooSmall',
    'extract_latency', 'format_size', 'make_bench_payload', 'parse_bench_payload', 'parse_size',
    'SubscriberCollector', 'publisher_index', 'publisher_topic',
]
