#!/usr/bin/env python3
"""
Tests for the in-process broker stub: topic matching, fan-out, fault injection.
"""

import asyncio
import os
import random
import re
import sys

import pytest

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from broker import (
    FaultPlan, FaultPlanError, ProtocolViolation, StubBroker, StubSession, SubscriptionTable,
    match_filter, run_stub,
)
from client import ClientConfig, MQTTSession
from network import BindError
from protocol import (
    ConnAck, Connect, PacketStream, PingReq, PingResp, PubAck, Publish, SubAck, Subscribe,
    UnsubAck, Unsubscribe, encode_packet,
)


def _session(name):
    session = StubSession(peer=name)
    session.client_id = name
    session.connected = True
    return session


async def _read_packets(reader, count, timeout=2.0):
    """Read until ``count`` packets arrived or the peer closed; returns (packets, closed)."""
    stream = PacketStream()
    packets = []
    while len(packets) < count:
        data = await asyncio.wait_for(reader.read(65536), timeout)
        if not data:
            return packets, True
        stream.feed(data)
        packets.extend(stream.drain())
    return packets, False


# Topic matching

@pytest.mark.parametrize("topic_filter,topic,expected", [
    ("sport/+", "sport/tennis", True),
    ("sport/#", "sport", True),
    ("sport/+", "sport/tennis/player1", False),
    ("sport/#", "sport/tennis/player1", True),
    ("#", "a/b/c", True),
    ("+/+", "a/b", True),
    ("+", "a/b", False),
    ("sport/tennis", "sport/tennis", True),
    ("sport/tennis", "sport/Tennis", False),
    ("+/monitor", "$SYS/monitor", False),
    ("#", "$SYS/uptime", False),
    ("$SYS/#", "$SYS/uptime", True),
    ("a/+/c", "a//c", True),
])
def test_match_filter(topic_filter, topic, expected):
    assert match_filter(topic_filter, topic) is expected


def _regex_oracle(topic_filter, topic):
    levels = topic_filter.split('/')
    tail = levels[-1] == '#'
    if tail:
        levels = levels[:-1]
    pattern = '/'.join('[^/]*' if level == '+' else re.escape(level) for level in levels)
    if tail:
        pattern = '.*' if not levels else pattern + '(/.*)?'
    return re.fullmatch(pattern, topic) is not None


def _random_filter(rng):
    levels = [rng.choice(['a', 'b', 'c', '+']) for _ in range(rng.randint(1, 4))]
    if rng.random() < 0.3:
        levels.append('#')
    return '/'.join(levels)


def test_fan_out_matches_brute_force_oracle():
    rng = random.Random(11)
    for _ in range(300):
        table = SubscriptionTable()
        sessions = [_session(f"s{i}") for i in range(rng.randint(1, 6))]
        subscriptions = []
        for _ in range(rng.randint(1, 12)):
            session = rng.choice(sessions)
            topic_filter = _random_filter(rng)
            qos = rng.randint(0, 1)
            table.subscribe(session, topic_filter, qos)
            subscriptions = [s for s in subscriptions if not (s[0] is session and s[1] == topic_filter)]
            subscriptions.append((session, topic_filter, qos))

        topic = '/'.join(rng.choice(['a', 'b', 'c']) for _ in range(rng.randint(1, 4)))
        oracle = {}
        for session, topic_filter, qos in subscriptions:
            if _regex_oracle(topic_filter, topic):
                oracle[session] = max(qos, oracle.get(session, 0))
        assert table.matching(topic) == oracle


def test_resubscribe_replaces_granted_qos():
    table = SubscriptionTable()
    session = _session("s")
    table.subscribe(session, "a/#", 0)
    table.subscribe(session, "a/#", 1)
    assert len(table) == 1
    assert table.matching("a/b") == {session: 1}
    assert table.unsubscribe(session, "a/#")
    assert not table.unsubscribe(session, "a/#")
    assert table.matching("a/b") == {}


# handle_publish

def test_publish_with_one_subscriber():
    broker = StubBroker()
    publisher, subscriber = _session("pub"), _session("sub")
    broker.table.subscribe(subscriber, "bench/#", 1)

    effects = broker.handle_publish(publisher, Publish("bench/x", b"data", qos=1, packet_id=7))
    assert effects == [
        (publisher, PubAck(packet_id=7)),
        (subscriber, Publish("bench/x", b"data", qos=1, packet_id=1)),
    ]


def test_publish_without_subscribers_is_acked_and_dropped():
    broker = StubBroker()
    publisher = _session("pub")
    effects = broker.handle_publish(publisher, Publish("nobody/here", b"x", qos=1, packet_id=3))
    assert effects == [(publisher, PubAck(packet_id=3))]
    assert broker.stats.deliveries == 0


def test_overlapping_filters_deliver_one_copy_each():
    broker = StubBroker()
    publisher = _session("pub")
    subscribers = [_session(f"sub{i}") for i in range(3)]
    for session, topic_filter in zip(subscribers, ["a/#", "a/+", "a/b"]):
        broker.table.subscribe(session, topic_filter, 1)
    greedy = _session("greedy")
    for topic_filter in ["a/#", "a/+", "a/b"]:
        broker.table.subscribe(greedy, topic_filter, 1)

    effects = broker.handle_publish(publisher, Publish("a/b", b"x", qos=1, packet_id=1))
    targets = [target for target, packet in effects if isinstance(packet, Publish)]
    assert sorted(targets, key=repr) == sorted(subscribers + [greedy], key=repr)


def test_forward_qos_is_min_of_publish_and_granted():
    broker = StubBroker()
    publisher, low, high = _session("pub"), _session("low"), _session("high")
    broker.table.subscribe(low, "t", 0)
    broker.table.subscribe(high, "t", 1)

    forwards = dict(broker.handle_publish(publisher, Publish("t", b"x", qos=1, packet_id=9))[1:])
    assert forwards[low] == Publish("t", b"x", qos=0)
    assert forwards[high].qos == 1 and forwards[high].packet_id == 1

    forwards = dict(broker.handle_publish(publisher, Publish("t", b"y", qos=0)))
    assert forwards[high] == Publish("t", b"y", qos=0)


def test_forward_packet_ids_are_per_subscriber_and_fresh():
    broker = StubBroker()
    publisher, subscriber = _session("pub"), _session("sub")
    broker.table.subscribe(subscriber, "t", 1)
    ids = [broker.handle_publish(publisher, Publish("t", b"x", qos=1, packet_id=42))[1][1].packet_id
           for _ in range(3)]
    assert ids == [1, 2, 3]


def test_disconnected_subscriber_gets_nothing():
    broker = StubBroker()
    publisher, subscriber = _session("pub"), _session("sub")
    broker.table.subscribe(subscriber, "#", 1)
    subscriber.connected = False
    assert broker.handle_publish(publisher, Publish("t", b"x", qos=1, packet_id=1)) == [
        (publisher, PubAck(packet_id=1))]


def test_dropped_pubacks():
    broker = StubBroker(faults=FaultPlan(drop_first_n_pubacks=1))
    publisher = _session("pub")
    assert broker.handle_publish(publisher, Publish("t", b"x", qos=1, packet_id=1)) == []
    assert broker.handle_publish(publisher, Publish("t", b"x", qos=1, packet_id=1, dup=True)) == [
        (publisher, PubAck(packet_id=1))]
    assert broker.stats.pubacks_dropped == 1


def test_publish_protocol_violations():
    broker = StubBroker()
    with pytest.raises(ProtocolViolation):
        broker.handle_publish(_session("pub"), Publish("t", b"x", qos=1, packet_id=None))
    stranger = StubSession()
    with pytest.raises(ProtocolViolation):
        broker.handle_publish(stranger, Publish("t", b"x", qos=0))


# FaultPlan

def test_fault_plan_parse():
    assert FaultPlan.parse("") == FaultPlan()
    assert FaultPlan.parse("drop_first_n_pubacks=2, connack_return_code=5") == FaultPlan(2, 5, None)
    assert FaultPlan.parse("grant_qos_override=0").grant_qos_override == 0
    assert FaultPlan.parse("grant_qos_override=0x80").grant_qos_override == 0x80


@pytest.mark.parametrize("text", [
    "drop_first_n_pubacks=-1",
    "connack_return_code=6",
    "grant_qos_override=2",
    "unknown=1",
    "drop_first_n_pubacks",
    "drop_first_n_pubacks=many",
])
def test_fault_plan_rejects(text):
    with pytest.raises(FaultPlanError):
        FaultPlan.parse(text)


# Served over TCP

def test_happy_path_over_tcp():
    async def scenario():
        async with StubBroker() as broker:
            reader, writer = await asyncio.open_connection(*broker.address)
            writer.write(encode_packet(Connect(client_id="raw", keep_alive_s=30)))
            writer.write(encode_packet(Subscribe(packet_id=1, filters=(("bench/#", 1),))))
            writer.write(encode_packet(Publish("bench/a", b"hi", qos=1, packet_id=2)))
            writer.write(encode_packet(PingReq()))
            writer.write(encode_packet(Unsubscribe(packet_id=3, filters=("bench/#",))))
            await writer.drain()
            packets, closed = await _read_packets(reader, 6)
            writer.close()
            return packets, closed, broker.stats

    packets, closed, stats = asyncio.run(scenario())
    assert not closed
    assert packets[0] == ConnAck(session_present=False, return_code=0)
    assert packets[1] == SubAck(packet_id=1, granted=(1,))
    assert set(packets[2:]) == {
        PubAck(packet_id=2), Publish("bench/a", b"hi", qos=1, packet_id=1), PingResp(), UnsubAck(packet_id=3)}
    assert stats.publishes_received == 1
    assert stats.pings == 1


def test_refused_connack_closes_connection():
    async def scenario():
        async with StubBroker(faults=FaultPlan(connack_return_code=2)) as broker:
            reader, writer = await asyncio.open_connection(*broker.address)
            writer.write(encode_packet(Connect(client_id="refused")))
            await writer.drain()
            packets, closed = await _read_packets(reader, 2)
            writer.close()
            return packets, closed

    packets, closed = asyncio.run(scenario())
    assert packets == [ConnAck(session_present=False, return_code=2)]
    assert closed


@pytest.mark.parametrize("first_bytes", [
    encode_packet(PingReq()),
    bytes([0x60, 0x02, 0x00, 0x01]),
    bytes([0x00, 0x00]),
])
def test_connection_closed_on_violation(first_bytes):
    async def scenario():
        async with StubBroker() as broker:
            reader, writer = await asyncio.open_connection(*broker.address)
            writer.write(first_bytes)
            await writer.drain()
            packets, closed = await _read_packets(reader, 1)
            writer.close()
            return packets, closed, broker.stats.protocol_violations

    packets, closed, violations = asyncio.run(scenario())
    assert packets == [] and closed
    assert violations == 1


def test_keepalive_expiry_disconnects_silent_client():
    async def scenario():
        async with StubBroker() as broker:
            reader, writer = await asyncio.open_connection(*broker.address)
            writer.write(encode_packet(Connect(client_id="quiet", keep_alive_s=1)))
            await writer.drain()
            loop = asyncio.get_running_loop()
            started = loop.time()
            packets, closed = await _read_packets(reader, 2, timeout=5.0)
            writer.close()
            return packets, closed, loop.time() - started

    packets, closed, elapsed = asyncio.run(scenario())
    assert packets == [ConnAck(session_present=False, return_code=0)]
    assert closed
    assert 1.0 <= elapsed < 4.0


def test_publishes_from_many_publishers_all_delivered():
    async def scenario():
        async with StubBroker() as broker:
            host, port = broker.address
            subscriber = await MQTTSession(ClientConfig("sub")).connect(host, port)
            await subscriber.subscribe("#")
            publishers = [await MQTTSession(ClientConfig(f"pub{i}")).connect(host, port) for i in range(4)]
            await asyncio.gather(*(
                publisher.publish_qos1(f"load/p{i}", f"{i}-{n}".encode())
                for i, publisher in enumerate(publishers) for n in range(25)))

            received = []
            while len(received) < 100:
                packet, _ = await asyncio.wait_for(subscriber.messages.get(), 2.0)
                received.append(packet.payload)
            for session in publishers + [subscriber]:
                await session.disconnect()
            return received, subscriber.messages.qsize(), broker.stats.deliveries

    received, leftover, deliveries = asyncio.run(scenario())
    assert len(set(received)) == 100
    assert leftover == 0
    assert deliveries == 100


def test_bind_error_on_taken_port():
    async def scenario():
        async with StubBroker() as broker:
            with pytest.raises(BindError):
                await run_stub(broker.address)

    asyncio.run(scenario())


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
