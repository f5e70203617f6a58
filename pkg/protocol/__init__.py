"""
MQTT 3.1.1 protocol module.

Provides the control packet model, the byte-exact wire codec and
topic name/filter validation shared by the client, proxy and broker stub.
"""

from .packets import (
    MAX_PACKET_ID, MAX_REMAINING_LENGTH, SUBACK_FAILURE,
    ConnAck, Connect, ControlPacket, Decoded, DecodeOutcome, Disconnect,
    FixedHeader, Malformed, NeedMoreBytes, PacketType, PingReq, PingResp,
    PubAck, Publish, SubAck, Subscribe, UnsubAck, Unsubscribe,
)
from .codec import (
    CodecError, InvalidPacket, OutOfRange, PacketStream,
    decode_packet, decode_remaining_length, encode_packet, encode_remaining_length,
)
from .topics import TopicCheck, validate_topic_filter, validate_topic_name

__all__ = [
    'MAX_PACKET_ID', 'MAX_REMAINING_LENGTH', 'SUBACK_FAILURE',
    'ConnAck', 'Connect', 'ControlPacket', 'Decoded', 'DecodeOutcome', 'Disconnect',
    'FixedHeader', 'Malformed', 'NeedMoreBytes', 'PacketType', 'PingReq', 'PingResp',
    'PubAck', 'Publish', 'SubAck', 'Subscribe', 'UnsubAck', 'Unsubscribe',
    'CodecError', 'InvalidPacket', 'OutOfRange', 'PacketStream',
    'decode_packet', 'decode_remaining_length', 'encode_packet', 'encode_remaining_length',
    'TopicCheck', 'validate_topic_filter', 'validate_topic_name',
]
