"""
MQTT 3.1.1 control packet model.

Each packet variant is an immutable dataclass; ``ControlPacket`` is the
union over them. QoS 2 packets (PUBREC/PUBREL/PUBCOMP) are not modelled.
"""

from dataclasses import dataclass, field
from enum import IntEnum
from typing import ClassVar, Optional, Tuple, Union

MAX_REMAINING_LENGTH = 268_435_455
MAX_PACKET_ID = 65535

# Granted-QoS value signalling a refused subscription in SUBACK
SUBACK_FAILURE = 0x80


class PacketType(IntEnum):
    CONNECT = 1
    CONNACK = 2
    PUBLISH = 3
    PUBACK = 4
    SUBSCRIBE = 8
    SUBACK = 9
    UNSUBSCRIBE = 10
    UNSUBACK = 11
    PINGREQ = 12
    PINGRESP = 13
    DISCONNECT = 14


# Fixed flag nibble the standard mandates for every type except PUBLISH
FIXED_FLAGS = {
    PacketType.CONNECT: 0b0000,
    PacketType.CONNACK: 0b0000,
    PacketType.PUBACK: 0b0000,
    PacketType.SUBSCRIBE: 0b0010,
    PacketType.SUBACK: 0b0000,
    PacketType.UNSUBSCRIBE: 0b0010,
    PacketType.UNSUBACK: 0b0000,
    PacketType.PINGREQ: 0b0000,
    PacketType.PINGRESP: 0b0000,
    PacketType.DISCONNECT: 0b0000,
}


@dataclass(frozen=True)
class FixedHeader:
    """First byte plus remaining length of a control packet."""
    packet_type: PacketType
    dup: bool = False
    qos: int = 0
    retain: bool = False
    remaining_length: int = 0

    @property
    def flags(self) -> int:
        if self.packet_type == PacketType.PUBLISH:
            return (int(self.dup) << 3) | (self.qos << 1) | int(self.retain)
        return FIXED_FLAGS[self.packet_type]


@dataclass(frozen=True)
class Connect:
    packet_type: ClassVar[PacketType] = PacketType.CONNECT
    client_id: str
    keep_alive_s: int = 60
    clean_session: bool = True


@dataclass(frozen=True)
class ConnAck:
    packet_type: ClassVar[PacketType] = PacketType.CONNACK
    session_present: bool = False
    return_code: int = 0


@dataclass(frozen=True)
class Publish:
    packet_type: ClassVar[PacketType] = PacketType.PUBLISH
    topic: str
    payload: bytes = b''
    qos: int = 0
    packet_id: Optional[int] = None
    dup: bool = False
    retain: bool = False

    def __post_init__(self):
        if not isinstance(self.payload, bytes):
            object.__setattr__(self, 'payload', bytes(self.payload))


@dataclass(frozen=True)
class PubAck:
    packet_type: ClassVar[PacketType] = PacketType.PUBACK
    packet_id: int


@dataclass(frozen=True)
class Subscribe:
    packet_type: ClassVar[PacketType] = PacketType.SUBSCRIBE
    packet_id: int
    filters: Tuple[Tuple[str, int], ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'filters', tuple((f, q) for f, q in self.filters))


@dataclass(frozen=True)
class SubAck:
    packet_type: ClassVar[PacketType] = PacketType.SUBACK
    packet_id: int
    granted: Tuple[int, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'granted', tuple(self.granted))


@dataclass(frozen=True)
class Unsubscribe:
    packet_type: ClassVar[PacketType] = PacketType.UNSUBSCRIBE
    packet_id: int
    filters: Tuple[str, ...] = field(default_factory=tuple)

    def __post_init__(self):
        object.__setattr__(self, 'filters', tuple(self.filters))


@dataclass(frozen=True)
class UnsubAck:
    packet_type: ClassVar[PacketType] = PacketType.UNSUBACK
    packet_id: int


@dataclass(frozen=True)
class PingReq:
    packet_type: ClassVar[PacketType] = PacketType.PINGREQ


@dataclass(frozen=True)
class PingResp:
    packet_type: ClassVar[PacketType] = PacketType.PINGRESP


@dataclass(frozen=True)
class Disconnect:
    packet_type: ClassVar[PacketType] = PacketType.DISCONNECT


ControlPacket = Union[
    Connect, ConnAck, Publish, PubAck, Subscribe, SubAck,
    Unsubscribe, UnsubAck, PingReq, PingResp, Disconnect,
]


@dataclass(frozen=True)
class NeedMoreBytes:
    """The buffer holds a valid prefix; at least this many more bytes are required."""
    minimum_additional: int


@dataclass(frozen=True)
class Decoded:
    packet: ControlPacket
    consumed: int


@dataclass(frozen=True)
class Malformed:
    """Protocol violation. The connection carrying these bytes must be closed."""
    reason: str


DecodeOutcome = Union[NeedMoreBytes, Decoded, Malformed]
