#!/usr/bin/env python3
"""
Tests for the benchkit command line.
"""

import asyncio
import json
import os
import socket
import sys
import threading
import time

import pytest

# Add the project root to the path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

import core.orchestrator as orchestrator_module
import main
from broker import StubBroker
from client import ClientConfig, MQTTSession, Phase
from config import settings


def _free_port():
    with socket.socket() as s:
        s.bind(('127.0.0.1', 0))
        return s.getsockname()[1]


@pytest.fixture
def stub_address():
    """Broker stub on its own event loop thread, so main() can run its own loop."""
    loop = asyncio.new_event_loop()
    stub = StubBroker()
    ready = threading.Event()

    def serve():
        asyncio.set_event_loop(loop)
        loop.run_until_complete(stub.start())
        ready.set()
        loop.run_forever()

    thread = threading.Thread(target=serve, daemon=True)
    thread.start()
    assert ready.wait(5)
    yield stub.address
    asyncio.run_coroutine_threadsafe(stub.close(), loop).result(5)
    loop.call_soon_threadsafe(loop.stop)
    thread.join(5)


@pytest.fixture
def no_default_config(monkeypatch, tmp_path):
    monkeypatch.setattr(settings, 'BENCHKIT_CONFIG', str(tmp_path / 'absent.yml'))


def _write_config(path, brokers, scenarios="[local]", extra=""):
    lines = ["brokers:"]
    for name, host, port in brokers:
        lines.append(f"  - {{name: {name}, host: {host}, port: {port}}}")
    lines += [
        f"scenarios: {scenarios}",
        "tests:",
        "  - {name: offset, kind: offset, publisher_threads: 5, publish_interval_ms: 20,"
        " repetitions: 2, warmup_runs: 0, drain_timeout_s: 5}",
        "seed: 11",
    ]
    path.write_text('\n'.join(lines) + '\n' + extra)
    return str(path)


def test_scenarios_lists_presets(capsys, no_default_config):
    assert main.main(['scenarios']) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 4
    assert lines[1].split() == ['local', '0', '0', '0']
    assert lines[2].split() == ['optimal', '2.5', '0.5', '0.04']
    assert lines[3].split() == ['worst', '6.25', '1.25', '0.1']


def test_scenarios_include_custom(capsys, tmp_path):
    config = _write_config(tmp_path / 'plan.yml', [('stub', '127.0.0.1', 1883)],
                           scenarios="[local, {name: lan, latency_ms: 0.5, jitter_ms: 0.1, loss_pct: 0}]")
    assert main.main(['scenarios', '--config', config]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert len(lines) == 5
    assert lines[4].split() == ['lan', '0.5', '0.1', '0']


def test_scenarios_duplicate_name(capsys, tmp_path):
    config = _write_config(tmp_path / 'plan.yml', [('stub', '127.0.0.1', 1883)],
                           scenarios="[{name: lan}, {name: lan, latency_ms: 1}]")
    assert main.main(['scenarios', '--config', config]) == 1
    assert 'duplicate' in capsys.readouterr().err


def test_run_rejects_misspelled_scenario(capsys, tmp_path):
    config = _write_config(tmp_path / 'plan.yml', [('stub', '127.0.0.1', 1883)])
    assert main.main(['run', '--config', config, '--scenario', 'optimaal']) == 1
    assert 'optimaal' in capsys.readouterr().err


def test_run_missing_config(capsys, tmp_path):
    assert main.main(['run', '--config', str(tmp_path / 'nope.yml')]) == 1
    assert 'not found' in capsys.readouterr().err


def test_run_and_report(capsys, tmp_path, stub_address):
    host, port = stub_address
    config = _write_config(tmp_path / 'plan.yml', [('stub', host, port)])
    out = tmp_path / 'out'
    assert main.main(['run', '--config', config, '--out', str(out), '--seed', '5']) == 0

    summary = json.loads((out / 'summary.json').read_text())
    assert summary['metadata']['seed'] == 5
    assert summary['cells'][0]['status'] == 'completed'
    capsys.readouterr()

    assert main.main(['report', '--in', str(out)]) == 0
    report = capsys.readouterr().out
    assert 'stub local' in report
    assert '27B' in report

    assert main.main(['report', '--in', str(out), '--format', 'markdown']) == 0
    assert '| Payload | stub local |' in capsys.readouterr().out

    exports = tmp_path / 'exports'
    assert main.main(['report', '--in', str(out), '--format', 'boxplot-data', '--out', str(exports)]) == 0
    assert (exports / 'boxplot' / 'stub__local__offset.json').exists()


def test_run_with_unreachable_broker_is_partial(tmp_path, stub_address, monkeypatch):
    monkeypatch.setattr(orchestrator_module, 'RETRY_BACKOFF_S', 0.0)
    host, port = stub_address
    config = _write_config(tmp_path / 'plan.yml', [('emqx', '127.0.0.1', _free_port()), ('stub', host, port)])
    out = tmp_path / 'out'
    assert main.main(['run', '--config', config, '--out', str(out)]) == 2

    cells = {c['broker']: c for c in json.loads((out / 'summary.json').read_text())['cells']}
    assert cells['emqx']['status'] == 'failed'
    assert cells['stub']['status'] == 'completed'


def test_run_only_filter(tmp_path, stub_address):
    host, port = stub_address
    config = _write_config(tmp_path / 'plan.yml', [('emqx', '127.0.0.1', _free_port()), ('stub', host, port)])
    out = tmp_path / 'out'
    assert main.main(['run', '--config', config, '--out', str(out), '--only', 'stub']) == 0
    metadata = json.loads((out / 'summary.json').read_text())['metadata']
    assert metadata['filters'] == {'only': ['stub']}
    assert not (out / 'emqx').exists()


def test_report_empty_dir(capsys, tmp_path):
    assert main.main(['report', '--in', str(tmp_path)]) == 1
    assert 'no results found' in capsys.readouterr().err


def test_usage_errors_exit_one(capsys):
    with pytest.raises(SystemExit) as excinfo:
        main.main(['bogus'])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main.main(['scenarios', '--colour'])
    assert excinfo.value.code == 1
    with pytest.raises(SystemExit) as excinfo:
        main.main([])
    assert excinfo.value.code == 1


def test_stub_rejects_bad_faults(capsys):
    assert main.main(['stub', '--listen', '127.0.0.1:0', '--faults', 'explode=1']) == 1
    assert 'explode' in capsys.readouterr().err


def test_stub_bind_error(capsys):
    with socket.socket() as taken:
        taken.bind(('127.0.0.1', 0))
        taken.listen()
        port = taken.getsockname()[1]
        assert main.main(['stub', '--listen', f'127.0.0.1:{port}']) == 1


def test_proxy_argument_errors(capsys, no_default_config):
    assert main.main(['proxy', '--listen', 'nowhere', '--upstream', '127.0.0.1:1883']) == 1
    assert main.main(['proxy', '--listen', '127.0.0.1:0', '--upstream', '127.0.0.1:1883',
                      '--scenario', 'optimaal']) == 1
    assert main.main(['proxy', '--listen', '127.0.0.1:0', '--upstream', f'127.0.0.1:{_free_port()}']) == 1


def _serve_in_thread(argv, port):
    """Start a long-running subcommand on a daemon thread and wait until its port accepts."""
    thread = threading.Thread(target=main.main, args=(argv,), daemon=True)
    thread.start()
    deadline = time.monotonic() + 5
    while time.monotonic() < deadline:
        try:
            socket.create_connection(('127.0.0.1', port), timeout=0.5).close()
            return thread
        except OSError:
            time.sleep(0.05)
    raise AssertionError(f"nothing listening on {port}")


def _connack_through(port):
    async def handshake():
        session = await MQTTSession(ClientConfig('cli-check')).connect('127.0.0.1', port)
        connected = session.phase == Phase.CONNECTED
        await session.disconnect()
        return connected
    return asyncio.run(handshake())


def test_proxy_relays_to_broker(stub_address, no_default_config):
    host, port = stub_address
    listen = _free_port()
    _serve_in_thread(['proxy', '--listen', f'127.0.0.1:{listen}', '--upstream', f'{host}:{port}',
                      '--scenario', 'local', '--seed', '1'], listen)
    assert _connack_through(listen)


def test_stub_serves_clients():
    listen = _free_port()
    _serve_in_thread(['stub', '--listen', f'127.0.0.1:{listen}'], listen)
    assert _connack_through(listen)


@pytest.mark.parametrize('command', ['run', 'proxy', 'stub', 'scenarios', 'report'])
def test_subcommand_help_exits_zero(command, capsys):
    with pytest.raises(SystemExit) as excinfo:
        main.main([command, '--help'])
    assert excinfo.value.code == 0
    assert 'usage:' in capsys.readouterr().out


@pytest.mark.parametrize('text,address', [
    ('127.0.0.1:1883', ('127.0.0.1', 1883)),
    ('0.0.0.0:0', ('0.0.0.0', 0)),
    ('1884', ('127.0.0.1', 1884)),
    (':1885', ('127.0.0.1', 1885)),
])
def test_parse_address(text, address):
    assert main.parse_address(text) == address


if __name__ == "__main__":
    sys.exit(pytest.main([__file__, '-v']))
