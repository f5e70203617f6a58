#!/usr/bin/env python3
"""
Tests for network scenarios, the impairment model and the TCP impairment proxy.
"""

import asyncio
import os
import socket
import struct
import sys
import time

import numpy as np
import pytest

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from broker import StubBroker
from network import (
    PRESETS, BindError, ImpairmentProxy, LossModel, ReleaseSchedule, Scenario, UpstreamUnreachable,
    apply_loss, run_proxy, sample_delay, schedule_chunk,
)
from protocol import ConnAck, Connect, PacketStream, encode_packet


def _free_port():
    with socket.socket() as s:
        s.bind(('127.0.0.1', 0))
        return s.getsockname()[1]


async def _echo_server():
    async def handle(reader, writer):
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                writer.write(data)
                await writer.drain()
        except (ConnectionError, OSError):
            pass
        finally:
            writer.close()

    return await asyncio.start_server(handle, '127.0.0.1', 0)


def _address(server):
    return server.sockets[0].getsockname()[:2]


# Scenarios and sampling

def test_presets_are_exact():
    assert PRESETS['local'] == Scenario('local', 0, 0, 0)
    assert PRESETS['optimal'] == Scenario('optimal', 2.5, 0.5, 0.04)
    assert PRESETS['worst'] == Scenario('worst', 6.25, 1.25, 0.1)


@pytest.mark.parametrize("kwargs", [
    dict(name=''), dict(name='x', latency_ms=-1), dict(name='x', jitter_ms=-0.1), dict(name='x', loss_pct=101),
])
def test_scenario_validation(kwargs):
    with pytest.raises(ValueError):
        Scenario(**kwargs)


def test_sample_delay_degenerate_cases():
    rng = np.random.default_rng(0)
    assert all(sample_delay(PRESETS['local'], rng) == 0 for _ in range(100))
    no_jitter = Scenario('optimal', 2.5, 0.0, 0.04)
    assert all(sample_delay(no_jitter, rng) == 2.5 for _ in range(100))


@pytest.mark.parametrize("name,mean_range,sd_range", [
    ('optimal', (2.45, 2.55), (0.45, 0.55)),
    ('worst', (6.15, 6.35), (1.15, 1.35)),
])
def test_sample_delay_statistics(name, mean_range, sd_range):
    rng = np.random.default_rng(2024)
    draws = np.array([sample_delay(PRESETS[name], rng) for _ in range(10_000)])
    assert draws.min() >= 0
    assert mean_range[0] <= draws.mean() <= mean_range[1]
    assert sd_range[0] <= draws.std(ddof=1) <= sd_range[1]


# Loss model

def test_penalty_formula():
    model = LossModel()
    assert model.penalty_ms(PRESETS['worst']) == pytest.approx(18.75)
    assert model.penalty_ms(PRESETS['optimal']) == pytest.approx(7.5)
    assert model.penalty_ms(PRESETS['local']) == 1.0


def test_apply_loss_extremes():
    rng = np.random.default_rng(1)
    lossless = Scenario('lossless', 2.0, 0.0, 0.0)
    total = Scenario('total', 2.0, 0.0, 100.0)
    assert all(apply_loss(1460, lossless, LossModel(), rng) == 0 for _ in range(100))
    assert all(apply_loss(n, total, LossModel(), rng) == 6.0 for n in (1, 1460, 4380, 16384))


def test_apply_loss_bernoulli_frequency():
    rng = np.random.default_rng(7)
    model = LossModel()
    hits = sum(1 for _ in range(100_000) if apply_loss(1460, PRESETS['worst'], model, rng) > 0)
    assert 0.0007 <= hits / 100_000 <= 0.0013


def test_larger_chunks_lose_more_often():
    rng = np.random.default_rng(8)
    lossy = Scenario('lossy', 1.0, 0.0, 5.0)
    model = LossModel()
    one = sum(apply_loss(1460, lossy, model, rng) > 0 for _ in range(20_000)) / 20_000
    three = sum(apply_loss(4380, lossy, model, rng) > 0 for _ in range(20_000)) / 20_000
    assert one == pytest.approx(0.05, abs=0.006)
    assert three == pytest.approx(1 - 0.95 ** 3, abs=0.01)


# Release scheduling

def test_schedule_chunk_fifo_clamp():
    schedule = ReleaseSchedule()
    rng = np.random.default_rng(3)
    slow = Scenario('slow', 10.0, 0.0, 0.0)
    fast = Scenario('fast', 0.0, 0.0, 0.0)
    first = schedule_chunk(schedule, b'a', 1_000_000, slow, rng)
    second = schedule_chunk(schedule, b'b', 2_000_000, fast, rng)
    assert first == 11_000_000
    assert second == first
    assert [chunk for chunk, _ in schedule.queue] == [b'a', b'b']
    assert schedule.added_delays_ns == [10_000_000, 0]
    with pytest.raises(ValueError):
        schedule_chunk(schedule, b'', 3_000_000, fast, rng)


def test_release_times_never_decrease():
    schedule = ReleaseSchedule()
    rng = np.random.default_rng(4)
    releases = [schedule_chunk(schedule, b'x' * 100, now, PRESETS['worst'], rng)
                for now in range(0, 2_000_000_000, 100_000)]
    assert all(b >= a for a, b in zip(releases, releases[1:]))


def test_added_delay_statistics_over_chunks():
    """Jitter realised on 10^4 chunks; the latency component only shifts the mean."""
    schedule = ReleaseSchedule()
    rng = np.random.default_rng(5)
    for i in range(10_000):
        schedule_chunk(schedule, b'x' * 200, (i + 1) * 20_000_000, PRESETS['optimal'], rng)
    added_ms = np.array(schedule.added_delays_ns) / 1e6
    assert 2.3 <= added_ms.mean() <= 2.7
    assert 0.4 <= added_ms.std(ddof=1) <= 0.6


def test_local_scenario_adds_nothing_to_schedule():
    schedule = ReleaseSchedule()
    rng = np.random.default_rng(6)
    for i in range(1000):
        schedule_chunk(schedule, b'x' * 1000, i + 1, PRESETS['local'], rng)
    assert set(schedule.added_delays_ns) == {0}
    assert schedule.penalties == 0


# Relay

def test_mqtt_connect_through_local_proxy():
    async def scenario():
        async with StubBroker() as broker:
            async with ImpairmentProxy(('127.0.0.1', 0), broker.address, PRESETS['local'], seed=1) as proxy:
                reader, writer = await asyncio.open_connection(*proxy.address)
                writer.write(encode_packet(Connect(client_id="via-proxy")))
                await writer.drain()
                stream = PacketStream()
                packets = []
                while not packets:
                    stream.feed(await asyncio.wait_for(reader.read(1024), 2.0))
                    packets = stream.drain()
                writer.close()
                return packets, proxy.stats

    packets, stats = asyncio.run(scenario())
    assert packets == [ConnAck(session_present=False, return_code=0)]
    assert stats.connections == 1


@pytest.mark.parametrize("scenario_name", ['local', 'worst'])
def test_relay_preserves_bytes_and_order(scenario_name):
    data = np.random.default_rng(9).integers(0, 256, 300_000, dtype=np.uint8).tobytes()

    async def scenario():
        echo = await _echo_server()
        async with ImpairmentProxy(('127.0.0.1', 0), _address(echo), PRESETS[scenario_name], seed=2) as proxy:
            reader, writer = await asyncio.open_connection(*proxy.address)

            async def send():
                for offset in range(0, len(data), 1000):
                    writer.write(data[offset:offset + 1000])
                    await writer.drain()

            sender = asyncio.create_task(send())
            received = await asyncio.wait_for(reader.readexactly(len(data)), 30.0)
            await sender
            writer.close()
        echo.close()
        await echo.wait_closed()
        return received

    assert asyncio.run(scenario()) == data


def test_local_relay_median_added_delay_below_1ms():
    async def scenario():
        arrivals = []
        done = asyncio.Event()

        async def sink(reader, writer):
            while True:
                data = await reader.read(8)
                if not data:
                    break
                arrivals.append(time.monotonic_ns() - struct.unpack('!Q', data)[0])
                if len(arrivals) == 200:
                    done.set()
            writer.close()

        server = await asyncio.start_server(sink, '127.0.0.1', 0)
        async with ImpairmentProxy(('127.0.0.1', 0), _address(server), PRESETS['local'], seed=1) as proxy:
            _, writer = await asyncio.open_connection(*proxy.address)
            for _ in range(200):
                writer.write(struct.pack('!Q', time.monotonic_ns()))
                await writer.drain()
                await asyncio.sleep(0.002)
            await asyncio.wait_for(done.wait(), 5.0)
            writer.close()
        server.close()
        await server.wait_closed()
        return arrivals

    arrivals = asyncio.run(scenario())
    assert np.median(arrivals) / 1e6 < 1.0


def _fingerprint_run(seed):
    async def scenario():
        echo = await _echo_server()
        jittery = Scenario('jittery', 0.5, 0.2, 1.0)
        async with ImpairmentProxy(('127.0.0.1', 0), _address(echo), jittery, seed=seed) as proxy:
            for _ in range(2):
                reader, writer = await asyncio.open_connection(*proxy.address)
                for i in range(20):
                    writer.write(bytes([i]) * 100)
                    await writer.drain()
                    await reader.readexactly(100)
                writer.close()
                await asyncio.sleep(0.05)
            fingerprint = proxy.release_fingerprint()
        echo.close()
        await echo.wait_closed()
        return fingerprint

    return asyncio.run(scenario())


def test_equal_seeds_give_identical_schedules():
    first, second = _fingerprint_run(42), _fingerprint_run(42)
    assert len(first) == 4
    assert first == second
    assert _fingerprint_run(43) != first


def test_unreachable_upstream_closes_client():
    async def scenario():
        proxy = await ImpairmentProxy(('127.0.0.1', 0), ('127.0.0.1', _free_port()), PRESETS['local']).start()
        reader, writer = await asyncio.open_connection(*proxy.address)
        data = await asyncio.wait_for(reader.read(10), 3.0)
        writer.close()
        await proxy.close()
        await proxy.close()
        return data, proxy.stats

    data, stats = asyncio.run(scenario())
    assert data == b''
    assert stats.refused == 1
    assert stats.connections == 0


def test_run_proxy_checks_upstream():
    async def scenario():
        with pytest.raises(UpstreamUnreachable):
            await run_proxy(('127.0.0.1', 0), ('127.0.0.1', _free_port()), PRESETS['local'])

    asyncio.run(scenario())


def test_proxy_bind_error():
    async def scenario():
        echo = await _echo_server()
        async with ImpairmentProxy(('127.0.0.1', 0), _address(echo), PRESETS['local']) as proxy:
            with pytest.raises(BindError):
                await ImpairmentProxy(proxy.address, _address(echo), PRESETS['local']).start()
        echo.close()
        await echo.wait_closed()

    asyncio.run(scenario())


def test_report_includes_model_metadata():
    proxy = ImpairmentProxy(('127.0.0.1', 0), ('127.0.0.1', 1), PRESETS['worst'])
    report = proxy.report()
    assert report['scenario'] == PRESETS['worst'].to_dict()
    assert report['loss_model']['segment_size'] == 1460
    assert 'approximation' in report['loss_model']


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
