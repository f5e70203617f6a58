#!/usr/bin/env python3
"""
Main entry point for benchkit.

Subcommands:
    run        run a benchmark plan (broker x scenario x test matrix)
    proxy      run the impairment proxy standalone
    stub       run the broker stub standalone
    scenarios  list network scenarios (presets plus any defined in the config)
    report     re-render tables or exports from stored results

Exit codes: 0 success, 1 usage/config/bind/IO error, 2 partial run (failed cells).
"""

import argparse
import asyncio
import json
import logging
import os
import signal
import sys
from dataclasses import replace
from pathlib import Path
from typing import List, Optional, Sequence, Tuple

from broker import FaultPlan, FaultPlanError, run_stub
from config import settings
from core import BenchmarkOrchestrator, PlanError, TestPlan, load_plan_file
from network import PRESETS, LossModel, ProxyError, Scenario, run_proxy
from reporting import EXPORT_FORMATS, IoError, export, import_cells_json, load_cells, render_report

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_PARTIAL = 2

REPORT_FORMATS = ('table', 'markdown') + EXPORT_FORMATS


class UsageError(Exception):
    """Raised for invalid command-line values"""
    pass


class BenchParser(argparse.ArgumentParser):
    """ArgumentParser that exits with 1 on usage errors."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_ERROR, f"{self.prog}: error: {message}\n")


def configure_logging(level: str) -> None:
    logging.basicConfig(
        level=getattr(logging, level.upper(), logging.INFO),
        format='%(asctime)s - %(name)s - %(levelname)s - %(message)s'
    )


def parse_address(text: str, default_host: str = settings.DEFAULT_PROXY_HOST) -> Tuple[str, int]:
    """'host:port' or bare 'port' -> (host, port)."""
    host, sep, port = text.rpartition(':')
    if not sep:
        host, port = default_host, text
    try:
        number = int(port)
    except ValueError:
        raise UsageError(f"Invalid address {text!r}, expected host:port")
    if not 0 <= number <= 65535:
        raise UsageError(f"Port out of range in {text!r}")
    return host or default_host, number


def _fail(message: str) -> int:
    print(f"error: {message}", file=sys.stderr)
    return EXIT_ERROR


def _load_optional_plan(path: Optional[str]) -> Optional[TestPlan]:
    """Plan from an explicit --config, or from the default config when it exists."""
    if path is None:
        if not os.path.exists(settings.BENCHKIT_CONFIG):
            return None
        path = settings.BENCHKIT_CONFIG
    return load_plan_file(path)


def cmd_run(args) -> int:
    try:
        plan = load_plan_file(args.config)
        only = args.only.split(',') if args.only else None
        plan = plan.filtered(only=only, scenario=args.scenario, arm64_only=args.arm64_only)
    except PlanError as e:
        return _fail(str(e))
    if args.seed is not None:
        plan = replace(plan, seed=args.seed)
    if args.out:
        plan = replace(plan, output_dir=args.out)

    orchestrator = BenchmarkOrchestrator(plan)

    def signal_handler(signum, frame):
        if orchestrator.stopping:
            raise KeyboardInterrupt
        logger.info(f"Received signal {signum}, stopping after the current repetition")
        orchestrator.stop()

    previous = {sig: signal.signal(sig, signal_handler) for sig in (signal.SIGINT, signal.SIGTERM)}
    try:
        outcome = orchestrator.run()
    except IoError as e:
        return _fail(str(e))
    except KeyboardInterrupt:
        logger.info("Shutdown requested by user")
        return EXIT_PARTIAL
    finally:
        for sig, handler in previous.items():
            signal.signal(sig, handler)

    for cell in outcome.failed_cells:
        print(f"cell {'/'.join(cell.key)}: {cell.status}" + (f" ({cell.error})" if cell.error else ''),
              file=sys.stderr)
    print(f"results in {plan.output_dir} (seed {orchestrator.seed})")
    return EXIT_OK if outcome.complete else EXIT_PARTIAL


async def _serve_proxy(listen, upstream, scenario: Scenario, seed: Optional[int], loss_model: LossModel) -> None:
    proxy = await run_proxy(listen, upstream, scenario, seed=seed, loss_model=loss_model)
    host, port = proxy.address
    print(f"proxy {scenario.name} listening on {host}:{port} -> {upstream[0]}:{upstream[1]}", flush=True)
    try:
        await asyncio.Event().wait()
    finally:
        await proxy.close()
        logger.info(f"Proxy statistics: {json.dumps(proxy.report(), default=str)}")


def cmd_proxy(args) -> int:
    try:
        listen = parse_address(args.listen)
        upstream = parse_address(args.upstream)
        plan = _load_optional_plan(args.config)
        scenario = plan.scenario(args.scenario) if plan else PRESETS.get(args.scenario)
        if scenario is None:
            raise PlanError(f"Unknown scenario {args.scenario!r} (known: {', '.join(sorted(PRESETS))})")
    except (UsageError, PlanError) as e:
        return _fail(str(e))

    loss_model = plan.loss_model if plan else LossModel()
    try:
        asyncio.run(_serve_proxy(listen, upstream, scenario, args.seed, loss_model))
    except ProxyError as e:
        return _fail(str(e))
    except KeyboardInterrupt:
        logger.info("Proxy stopped")
    return EXIT_OK


async def _serve_stub(listen, faults: FaultPlan) -> None:
    stub = await run_stub(listen, faults)
    host, port = stub.address
    print(f"stub broker listening on {host}:{port}", flush=True)
    try:
        await stub.serve_forever()
    finally:
        await stub.close()
        logger.info(f"Stub statistics: {json.dumps(stub.stats.to_dict())}")


def cmd_stub(args) -> int:
    try:
        listen = parse_address(args.listen)
        faults = FaultPlan.parse(args.faults)
    except (UsageError, FaultPlanError) as e:
        return _fail(str(e))
    try:
        asyncio.run(_serve_stub(listen, faults))
    except ProxyError as e:
        return _fail(str(e))
    except KeyboardInterrupt:
        logger.info("Stub stopped")
    return EXIT_OK


def format_scenarios(scenarios: Sequence[Scenario]) -> str:
    lines = [f"{'Scenario':<12} {'Latency ms':>10} {'Jitter ms':>10} {'Loss %':>8}"]
    for s in scenarios:
        lines.append(f"{s.name:<12} {s.latency_ms:>10g} {s.jitter_ms:>10g} {s.loss_pct:>8g}")
    return '\n'.join(lines)


def cmd_scenarios(args) -> int:
    try:
        plan = _load_optional_plan(args.config)
    except PlanError as e:
        return _fail(str(e))
    scenarios: List[Scenario] = list(PRESETS.values()) + (plan.custom_scenarios if plan else [])
    print(format_scenarios(scenarios))
    return EXIT_OK


def cmd_report(args) -> int:
    source = Path(args.input or settings.BENCHKIT_OUT)
    summary = source / 'summary.json'
    try:
        if summary.exists():
            cells, metadata = import_cells_json(summary)
        else:
            cells, metadata = load_cells(source), {}
    except IoError as e:
        return _fail(str(e))
    if not cells:
        return _fail(f"no results found in {source}")

    if args.format in ('table', 'markdown'):
        text = render_report(cells, metadata, 'markdown' if args.format == 'markdown' else 'text')
        if args.out:
            try:
                Path(args.out).write_text(text + '\n', encoding='utf-8')
            except OSError as e:
                return _fail(f"Cannot write {args.out}: {e}")
        else:
            print(text)
        return EXIT_OK

    try:
        written = export(cells, args.format, args.out or source, metadata)
    except IoError as e:
        return _fail(str(e))
    for path in written:
        print(path)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = BenchParser(prog='benchkit', description='MQTT broker latency benchmarking harness')
    parser.add_argument('--log-level', default=settings.BENCHKIT_LOG_LEVEL,
                        choices=['DEBUG', 'INFO', 'WARNING', 'ERROR'], type=str.upper)
    sub = parser.add_subparsers(dest='command', required=True)

    run = sub.add_parser('run', help='Run a benchmark plan')
    run.add_argument('--config', default=settings.BENCHKIT_CONFIG, help='Plan file (YAML)')
    run.add_argument('--only', help='Comma-separated broker names to run')
    run.add_argument('--scenario', help='Run a single scenario')
    run.add_argument('--seed', type=int, help='Seed for all proxy randomness')
    run.add_argument('--out', help='Output directory')
    run.add_argument('--arm64-only', action='store_true', help='Only brokers reporting ARM64 support')
    run.set_defaults(handler=cmd_run)

    proxy = sub.add_parser('proxy', help='Run the impairment proxy standalone')
    proxy.add_argument('--listen', required=True, help='host:port to accept clients on')
    proxy.add_argument('--upstream', required=True, help='host:port of the broker')
    proxy.add_argument('--scenario', default='local')
    proxy.add_argument('--seed', type=int)
    proxy.add_argument('--config', help='Plan file providing custom scenarios and the loss model')
    proxy.set_defaults(handler=cmd_proxy)

    stub = sub.add_parser('stub', help='Run the broker stub standalone')
    stub.add_argument('--listen', default=f"{settings.DEFAULT_PROXY_HOST}:{settings.DEFAULT_STUB_PORT}")
    stub.add_argument('--faults', default='', help='e.g. drop_first_n_pubacks=1,connack_return_code=0')
    stub.set_defaults(handler=cmd_stub)

    scenarios = sub.add_parser('scenarios', help='List network scenarios')
    scenarios.add_argument('--config', help='Plan file with custom scenarios')
    scenarios.set_defaults(handler=cmd_scenarios)

    report = sub.add_parser('report', help='Summarize stored results')
    report.add_argument('--in', dest='input', help='Results directory')
    report.add_argument('--format', choices=REPORT_FORMATS, default='table')
    report.add_argument('--out', help='Write here instead of stdout (or next to the results for exports)')
    report.set_defaults(handler=cmd_report)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    return args.handler(args)


if __name__ == "__main__":
    sys.exit(main())
