"""
Benchmark payload layout and latency records.

Every published message carries its send timestamp so the subscriber can
subtract it from its own receive time. Publisher and subscriber share the
harness process and therefore the same monotonic clock.

Layout (big-endian):
    0..4    magic "MQBK"
    4..12   send timestamp, monotonic nanoseconds
    12..16  publisher-local sequence number
    16..    optional body, then 0x5A padding up to the requested size
"""

import re
import struct
from dataclasses import asdict, dataclass
from typing import Any, Dict, Union

from protocol import Malformed

MAGIC = b'MQBK'
HEADER = struct.Struct('!4sQI')
HEADER_SIZE = HEADER.size  # 16
PADDING_BYTE = 0x5A

HELLO_WORLD = b'hello world'
OFFSET_PAYLOAD_SIZE = HEADER_SIZE + len(HELLO_WORLD)  # 27

# Binary units: 1KB = 1024 B, 1MB = 1048576 B
KIB = 1024
MIB = 1024 * 1024
SIZE_UNITS = {'': 1, 'B': 1, 'KB': KIB, 'KIB': KIB, 'MB': MIB, 'MIB': MIB}
SIZE_PATTERN = re.compile(r'^\s*(\d+)\s*([A-Za-z]*)\s*$')


class SizeTooSmall(ValueError):
    """Raised when a payload is requested below the 16-byte header size"""
    pass


@dataclass(frozen=True)
class BenchHeader:
    send_timestamp_ns: int
    sequence: int


@dataclass(frozen=True)
class LatencyRecord:
    """One measured publish-to-subscribe sample."""
    broker: str
    scenario: str
    test: str
    repetition: int
    publisher: int
    publisher_sequence: int
    latency_ns: int
    payload_size: int
    received_at: str

    @property
    def latency_ms(self) -> float:
        return self.latency_ns / 1e6

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)

    @classmethod
    def from_dict(cls, data: Dict[str, Any]) -> 'LatencyRecord':
        return cls(
            broker=data['broker'],
            scenario=data['scenario'],
            test=data['test'],
            repetition=int(data['repetition']),
            publisher=int(data['publisher']),
            publisher_sequence=int(data['publisher_sequence']),
            latency_ns=int(data['latency_ns']),
            payload_size=int(data['payload_size']),
            received_at=data['received_at'],
        )


def make_bench_payload(size: int, sequence: int, now: int, body: bytes = b'') -> bytes:
    """
    Build a benchmark payload of exactly ``size`` bytes.

    Args:
        size: Total payload length in bytes (minimum 16)
        sequence: Publisher-local message counter
        now: Send timestamp in monotonic nanoseconds, strictly positive
        body: Optional bytes placed right after the header (e.g. b'hello world')

    Returns:
        The payload bytes
    """
    if size < HEADER_SIZE:
        raise SizeTooSmall(f"Payload size {size} below the {HEADER_SIZE}-byte header")
    if now <= 0:
        raise ValueError(f"Send timestamp must be positive, got {now}")
    if len(body) > size - HEADER_SIZE:
        raise SizeTooSmall(f"Body of {len(body)} bytes does not fit a {size}-byte payload")

    padding = size - HEADER_SIZE - len(body)
    return HEADER.pack(MAGIC, now, sequence & 0xFFFFFFFF) + body + bytes([PADDING_BYTE]) * padding


def parse_bench_payload(payload: bytes) -> Union[BenchHeader, Malformed]:
    if len(payload) < HEADER_SIZE:
        return Malformed('short_payload')
    magic, timestamp, sequence = HEADER.unpack_from(payload)
    if magic != MAGIC:
        return Malformed('bad_magic')
    if timestamp == 0:
        return Malformed('zero_timestamp')
    return BenchHeader(send_timestamp_ns=timestamp, sequence=sequence)


def extract_latency(payload: bytes, receive_time: int) -> Union[int, Malformed]:
    """
    Latency in nanoseconds between the embedded send timestamp and ``receive_time``.

    Returns Malformed for non-benchmark payloads or a receive time that
    precedes the send time.
    """
    header = parse_bench_payload(payload)
    if isinstance(header, Malformed):
        return header
    latency = receive_time - header.send_timestamp_ns
    if latency < 0:
        return Malformed('negative_latency')
    return latency


def parse_size(value: Union[int, str]) -> int:
    """
    Payload size in bytes from an integer or a label like "1KB", "10KB", "1MB".

    Labels are case-insensitive; KB/KiB and MB/MiB are binary units.
    """
    if isinstance(value, bool):
        raise ValueError(f"Invalid payload size {value!r}")
    if isinstance(value, int):
        if value < 0:
            raise ValueError(f"Payload size must be >= 0, got {value}")
        return value
    match = SIZE_PATTERN.match(str(value))
    if not match or match.group(2).upper() not in SIZE_UNITS:
        raise ValueError(f"Invalid payload size {value!r}")
    return int(match.group(1)) * SIZE_UNITS[match.group(2).upper()]


def format_size(size: int) -> str:
    """Label used in tables: 1048576 -> "1MB", 10240 -> "10KB", 27 -> "27B"."""
    if size >= MIB and size % MIB == 0:
        return f"{size // MIB}MB"
    if size >= KIB and size % KIB == 0:
        return f"{size // KIB}KB"
    return f"{size}B"
