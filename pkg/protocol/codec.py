"""
MQTT 3.1.1 wire codec.

Encoding raises on packets that break their invariants; decoding never raises
and reports protocol violations as ``Malformed`` values. The decoder is a pure
function over a byte buffer, so the client, the broker stub and the tests all
share it without any I/O inside.
"""

import logging
import struct
from typing import List, Optional, Tuple, Union

from .packets import (
    FIXED_FLAGS, MAX_PACKET_ID, MAX_REMAINING_LENGTH, SUBACK_FAILURE,
    ConnAck, Connect, ControlPacket, Decoded, DecodeOutcome, Disconnect,
    FixedHeader, Malformed, NeedMoreBytes, PacketType, PingReq, PingResp,
    PubAck, Publish, SubAck, Subscribe, UnsubAck, Unsubscribe,
)
from .topics import validate_topic_filter, validate_topic_name

logger = logging.getLogger(__name__)

PROTOCOL_NAME = 'MQTT'
PROTOCOL_LEVEL = 4


# Custom Exceptions
class CodecError(Exception):
    """Base exception for encoding errors"""
    pass


class OutOfRange(CodecError, ValueError):
    """Raised when a remaining length exceeds 268 435 455"""
    pass


class InvalidPacket(CodecError, ValueError):
    """Raised when a packet violates its invariants and cannot be encoded"""
    pass


def encode_remaining_length(n: int) -> bytes:
    """
    Encode a remaining-length value as a base-128 varint.

    Args:
        n: Byte count, 0..268 435 455

    Returns:
        1 to 4 bytes, least significant group first, continuation bit 0x80
    """
    if n < 0 or n > MAX_REMAINING_LENGTH:
        raise OutOfRange(f"Remaining length {n} outside 0..{MAX_REMAINING_LENGTH}")

    out = bytearray()
    while True:
        digit = n % 128
        n //= 128
        if n > 0:
            digit |= 0x80
        out.append(digit)
        if n == 0:
            return bytes(out)


def decode_remaining_length(data, offset: int = 0) -> Union[Tuple[int, int], NeedMoreBytes, Malformed]:
    """
    Decode a remaining-length varint starting at ``offset``.

    Returns:
        (value, bytes consumed), NeedMoreBytes if the varint is truncated,
        or Malformed if it would need a fifth byte.
    """
    value = 0
    multiplier = 1
    for i in range(4):
        position = offset + i
        if position >= len(data):
            return NeedMoreBytes(1)
        byte = data[position]
        value += (byte & 0x7F) * multiplier
        if not byte & 0x80:
            return value, i + 1
        multiplier *= 128
    return Malformed('remaining_length_too_long')


def _encode_string(s: str) -> bytes:
    raw = s.encode('utf-8')
    if len(raw) > 0xFFFF:
        raise InvalidPacket(f"String of {len(raw)} bytes exceeds 65535")
    return struct.pack('!H', len(raw)) + raw


def _check_packet_id(packet_id) -> None:
    if packet_id is None or not 1 <= packet_id <= MAX_PACKET_ID:
        raise InvalidPacket(f"Packet id {packet_id!r} outside 1..{MAX_PACKET_ID}")


def _publish_body(p: Publish) -> bytes:
    if p.qos not in (0, 1):
        raise InvalidPacket(f"Unsupported PUBLISH QoS {p.qos}")
    check = validate_topic_name(p.topic)
    if not check:
        raise InvalidPacket(f"Invalid topic name {p.topic!r}: {check.reason}")
    body = _encode_string(p.topic)
    if p.qos == 0:
        if p.packet_id is not None:
            raise InvalidPacket("QoS 0 PUBLISH must not carry a packet id")
        if p.dup:
            raise InvalidPacket("QoS 0 PUBLISH must not set DUP")
    else:
        _check_packet_id(p.packet_id)
        body += struct.pack('!H', p.packet_id)
    return body + p.payload


def _body(p: ControlPacket) -> bytes:
    if isinstance(p, Publish):
        return _publish_body(p)

    if isinstance(p, Connect):
        if not 0 <= p.keep_alive_s <= 0xFFFF:
            raise InvalidPacket(f"Keep alive {p.keep_alive_s} outside 0..65535")
        flags = 0x02 if p.clean_session else 0x00
        return (_encode_string(PROTOCOL_NAME) + bytes([PROTOCOL_LEVEL, flags])
                + struct.pack('!H', p.keep_alive_s) + _encode_string(p.client_id))

    if isinstance(p, ConnAck):
        if not 0 <= p.return_code <= 5:
            raise InvalidPacket(f"CONNACK return code {p.return_code} outside 0..5")
        return bytes([0x01 if p.session_present else 0x00, p.return_code])

    if isinstance(p, (PubAck, UnsubAck)):
        _check_packet_id(p.packet_id)
        return struct.pack('!H', p.packet_id)

    if isinstance(p, Subscribe):
        _check_packet_id(p.packet_id)
        if not p.filters:
            raise InvalidPacket("SUBSCRIBE needs at least one filter")
        body = struct.pack('!H', p.packet_id)
        for topic_filter, qos in p.filters:
            check = validate_topic_filter(topic_filter)
            if not check:
                raise InvalidPacket(f"Invalid topic filter {topic_filter!r}: {check.reason}")
            if qos not in (0, 1):
                raise InvalidPacket(f"Unsupported requested QoS {qos}")
            body += _encode_string(topic_filter) + bytes([qos])
        return body

    if isinstance(p, SubAck):
        _check_packet_id(p.packet_id)
        if not p.granted:
            raise InvalidPacket("SUBACK needs at least one return code")
        for code in p.granted:
            if code not in (0, 1, SUBACK_FAILURE):
                raise InvalidPacket(f"Unsupported SUBACK return code {code}")
        return struct.pack('!H', p.packet_id) + bytes(p.granted)

    if isinstance(p, Unsubscribe):
        _check_packet_id(p.packet_id)
        if not p.filters:
            raise InvalidPacket("UNSUBSCRIBE needs at least one filter")
        body = struct.pack('!H', p.packet_id)
        for topic_filter in p.filters:
            check = validate_topic_filter(topic_filter)
            if not check:
                raise InvalidPacket(f"Invalid topic filter {topic_filter!r}: {check.reason}")
            body += _encode_string(topic_filter)
        return body

    if isinstance(p, (PingReq, PingResp, Disconnect)):
        return b''

    raise InvalidPacket(f"Not a control packet: {p!r}")


def encode_packet(p: ControlPacket) -> bytes:
    """
    Encode a control packet to its wire bytes.

    Raises:
        InvalidPacket: if the packet breaks its invariants
        OutOfRange: if the body exceeds the maximum remaining length
    """
    body = _body(p)
    if isinstance(p, Publish):
        header = FixedHeader(PacketType.PUBLISH, dup=p.dup, qos=p.qos,
                             retain=p.retain, remaining_length=len(body))
    else:
        header = FixedHeader(p.packet_type, remaining_length=len(body))
    return bytes([(header.packet_type << 4) | header.flags]) + encode_remaining_length(len(body)) + body


class _BodyError(Exception):
    pass


class _Reader:
    """Bounds-checked reader over one packet body."""

    def __init__(self, body: memoryview):
        self.body = body
        self.pos = 0

    @property
    def remaining(self) -> int:
        return len(self.body) - self.pos

    def u8(self) -> int:
        if self.remaining < 1:
            raise _BodyError('truncated_body')
        value = self.body[self.pos]
        self.pos += 1
        return value

    def u16(self) -> int:
        if self.remaining < 2:
            raise _BodyError('truncated_body')
        value = (self.body[self.pos] << 8) | self.body[self.pos + 1]
        self.pos += 2
        return value

    def packet_id(self) -> int:
        value = self.u16()
        if value == 0:
            raise _BodyError('zero_packet_id')
        return value

    def string(self) -> str:
        length = self.u16()
        if self.remaining < length:
            raise _BodyError('string_exceeds_remaining_length')
        raw = bytes(self.body[self.pos:self.pos + length])
        self.pos += length
        try:
            text = raw.decode('utf-8')
        except UnicodeDecodeError:
            raise _BodyError('invalid_utf8')
        if '\x00' in text:
            raise _BodyError('null_character_in_string')
        return text

    def rest(self) -> bytes:
        value = bytes(self.body[self.pos:])
        self.pos = len(self.body)
        return value

    def end(self) -> None:
        if self.remaining:
            raise _BodyError('trailing_bytes')


def _decode_connect(r: _Reader) -> Connect:
    if r.string() != PROTOCOL_NAME:
        raise _BodyError('unsupported_protocol_name')
    level = r.u8()
    if level == 5:
        raise _BodyError('mqtt5_not_supported')
    if level != PROTOCOL_LEVEL:
        raise _BodyError('unsupported_protocol_level')
    flags = r.u8()
    if flags & 0x01:
        raise _BodyError('reserved_connect_flag')
    if flags & 0x3C:
        raise _BodyError('will_not_supported')
    if flags & 0xC0:
        raise _BodyError('authentication_not_supported')
    keep_alive = r.u16()
    client_id = r.string()
    r.end()
    return Connect(client_id=client_id, keep_alive_s=keep_alive, clean_session=bool(flags & 0x02))


def _decode_publish(flags: int, r: _Reader) -> Publish:
    qos = (flags >> 1) & 0x03
    if qos == 3:
        raise _BodyError('invalid_qos')
    if qos == 2:
        raise _BodyError('qos2_not_supported')
    dup = bool(flags & 0x08)
    if dup and qos == 0:
        raise _BodyError('dup_on_qos0')
    topic = r.string()
    check = validate_topic_name(topic)
    if not check:
        raise _BodyError(f"invalid_topic_name:{check.reason}")
    packet_id = r.packet_id() if qos else None
    return Publish(topic=topic, payload=r.rest(), qos=qos, packet_id=packet_id,
                   dup=dup, retain=bool(flags & 0x01))


def _decode_subscribe(r: _Reader) -> Subscribe:
    packet_id = r.packet_id()
    filters = []
    while r.remaining:
        topic_filter = r.string()
        check = validate_topic_filter(topic_filter)
        if not check:
            raise _BodyError(f"invalid_topic_filter:{check.reason}")
        options = r.u8()
        if options & 0xFC:
            raise _BodyError('reserved_subscription_bits')
        if options == 3:
            raise _BodyError('invalid_qos')
        if options == 2:
            raise _BodyError('qos2_not_supported')
        filters.append((topic_filter, options))
    if not filters:
        raise _BodyError('empty_subscription')
    return Subscribe(packet_id=packet_id, filters=tuple(filters))


def _decode_suback(r: _Reader) -> SubAck:
    packet_id = r.packet_id()
    granted = r.rest()
    if not granted:
        raise _BodyError('empty_suback')
    for code in granted:
        if code == 2:
            raise _BodyError('qos2_not_supported')
        if code not in (0, 1, SUBACK_FAILURE):
            raise _BodyError('invalid_granted_qos')
    return SubAck(packet_id=packet_id, granted=tuple(granted))


def _decode_unsubscribe(r: _Reader) -> Unsubscribe:
    packet_id = r.packet_id()
    filters = []
    while r.remaining:
        topic_filter = r.string()
        check = validate_topic_filter(topic_filter)
        if not check:
            raise _BodyError(f"invalid_topic_filter:{check.reason}")
        filters.append(topic_filter)
    if not filters:
        raise _BodyError('empty_unsubscribe')
    return Unsubscribe(packet_id=packet_id, filters=tuple(filters))


def _decode_body(packet_type: PacketType, flags: int, r: _Reader) -> ControlPacket:
    if packet_type == PacketType.PUBLISH:
        return _decode_publish(flags, r)
    if packet_type == PacketType.CONNECT:
        return _decode_connect(r)
    if packet_type == PacketType.CONNACK:
        ack_flags = r.u8()
        if ack_flags & 0xFE:
            raise _BodyError('reserved_connack_flags')
        return_code = r.u8()
        if return_code > 5:
            raise _BodyError('invalid_return_code')
        r.end()
        return ConnAck(session_present=bool(ack_flags & 0x01), return_code=return_code)
    if packet_type in (PacketType.PUBACK, PacketType.UNSUBACK):
        packet_id = r.packet_id()
        r.end()
        return PubAck(packet_id) if packet_type == PacketType.PUBACK else UnsubAck(packet_id)
    if packet_type == PacketType.SUBSCRIBE:
        return _decode_subscribe(r)
    if packet_type == PacketType.SUBACK:
        return _decode_suback(r)
    if packet_type == PacketType.UNSUBSCRIBE:
        return _decode_unsubscribe(r)

    r.end()
    if packet_type == PacketType.PINGREQ:
        return PingReq()
    if packet_type == PacketType.PINGRESP:
        return PingResp()
    return Disconnect()


def _check_first_byte(first: int) -> Optional[Malformed]:
    type_code = first >> 4
    if type_code in (5, 6, 7):
        return Malformed('qos2_not_supported')
    if type_code == 15:
        return Malformed('mqtt5_not_supported')
    try:
        packet_type = PacketType(type_code)
    except ValueError:
        return Malformed('reserved_packet_type')
    if packet_type != PacketType.PUBLISH and first & 0x0F != FIXED_FLAGS[packet_type]:
        return Malformed('invalid_fixed_header_flags')
    return None


def decode_packet(data) -> DecodeOutcome:
    """
    Decode one control packet from the front of ``data``.

    Args:
        data: bytes-like buffer, possibly holding a partial or several packets

    Returns:
        Decoded with the packet and the bytes consumed, NeedMoreBytes for a
        valid prefix, or Malformed on any protocol violation.
    """
    if not data:
        return NeedMoreBytes(2)

    rejected = _check_first_byte(data[0])
    if rejected:
        return rejected
    if len(data) < 2:
        return NeedMoreBytes(2 - len(data))

    length = decode_remaining_length(data, 1)
    if not isinstance(length, tuple):
        return length
    remaining_length, length_size = length

    header_size = 1 + length_size
    total = header_size + remaining_length
    if len(data) < total:
        return NeedMoreBytes(total - len(data))

    first = data[0]
    view = memoryview(data)
    body = view[header_size:total]
    try:
        packet = _decode_body(PacketType(first >> 4), first & 0x0F, _Reader(body))
    except _BodyError as e:
        return Malformed(str(e))
    finally:
        body.release()
        view.release()
    return Decoded(packet=packet, consumed=total)


class PacketStream:
    """
    Incremental decoder over a growable buffer.

    Bytes from a socket are fed in as they arrive; complete packets are
    drained out in order.
    """

    def __init__(self):
        self._buffer = bytearray()

    def feed(self, data: bytes) -> None:
        self._buffer += data

    def drain(self) -> List[Union[ControlPacket, Malformed]]:
        """
        Pop every complete packet currently buffered.

        A Malformed entry ends the list and discards the buffer, since the
        connection must be closed anyway.
        """
        packets = []
        while True:
            outcome = decode_packet(self._buffer)
            if isinstance(outcome, Decoded):
                del self._buffer[:outcome.consumed]
                packets.append(outcome.packet)
            elif isinstance(outcome, Malformed):
                logger.warning(f"Malformed packet in stream: {outcome.reason}")
                self._buffer.clear()
                packets.append(outcome)
                return packets
            else:
                return packets

    def __len__(self):
        return len(self._buffer)
