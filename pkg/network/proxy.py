"""
Userspace TCP impairment proxy.

Sits between benchmark clients and a broker and delays every relayed chunk
according to a Scenario, independently per direction. Release times within a
direction never decrease, so the byte stream is never reordered.
"""

import asyncio
import logging
import time
from collections import deque
from dataclasses import asdict, dataclass
from typing import Any, Callable, Deque, Dict, List, Optional, Tuple

import numpy as np

from config.settings import CHUNK_READ_SIZE
from .scenarios import LossModel, Scenario, apply_loss, sample_delay

logger = logging.getLogger(__name__)

Address = Tuple[str, int]

# Wake this long before a release time, then yield until it is reached
SPIN_MARGIN_S = 0.001


# Custom Exceptions
class ProxyError(Exception):
    """Base exception for impairment proxy errors"""
    pass


class UpstreamUnreachable(ProxyError):
    """Raised when the upstream broker does not accept connections"""
    pass


class BindError(ProxyError):
    """Raised when a listener cannot bind its address"""
    pass


@dataclass
class ProxyStats:
    connections: int = 0
    refused: int = 0
    chunks: int = 0
    bytes: int = 0
    penalties: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class ReleaseSchedule:
    """
    One direction's FIFO of (chunk, release_time_ns) plus its accounting.

    With a ``loss_rng`` the loss draws use their own stream, so the sequence
    of sampled delays does not depend on chunk sizes.
    """

    def __init__(self, loss_rng: Optional[np.random.Generator] = None):
        self.loss_rng = loss_rng
        self.queue: Deque[Tuple[bytes, int]] = deque()
        self.last_release = 0
        self.added_delays_ns: List[int] = []
        self.chunks = 0
        self.bytes = 0
        self.penalties = 0


def schedule_chunk(dir_state: ReleaseSchedule, chunk: bytes, now: int, s: Scenario,
                   rng: np.random.Generator, loss_model: LossModel = LossModel()) -> int:
    """
    Queue a chunk and return its release time in monotonic nanoseconds.

    release = max(previous release, now + sampled delay + loss penalty)
    """
    if not chunk:
        raise ValueError("Cannot schedule an empty chunk")
    delay_ms = sample_delay(s, rng)
    loss_rng = dir_state.loss_rng if dir_state.loss_rng is not None else rng
    penalty_ms = apply_loss(len(chunk), s, loss_model, loss_rng)
    added = int(round((delay_ms + penalty_ms) * 1e6))

    release = max(dir_state.last_release, now + added)
    dir_state.last_release = release
    dir_state.queue.append((chunk, release))
    dir_state.added_delays_ns.append(added)
    dir_state.chunks += 1
    dir_state.bytes += len(chunk)
    if penalty_ms:
        dir_state.penalties += 1
    return release


class ImpairmentProxy:
    """
    Impairing relay between clients and one upstream broker.

    Every accepted client connection is paired with one upstream connection;
    both directions get their own ReleaseSchedule and random stream.
    """

    def __init__(self, listen: Address, upstream: Address, scenario: Scenario,
                 seed: Optional[int] = None, loss_model: LossModel = LossModel(),
                 connect_timeout: float = 2.0, clock: Callable[[], int] = time.monotonic_ns):
        self.listen = listen
        self.upstream = upstream
        self.scenario = scenario
        self.seed = seed
        self.loss_model = loss_model
        self.connect_timeout = connect_timeout
        self.clock = clock
        self.stats = ProxyStats()
        self.schedules: Dict[Tuple[int, str], ReleaseSchedule] = {}

        self._seed_sequence = np.random.SeedSequence(seed)
        self._server: Optional[asyncio.AbstractServer] = None
        self._handlers = set()
        self._next_index = 0
        self._closed = False

    @property
    def address(self) -> Address:
        if self._server is None:
            raise ProxyError("Proxy is not running")
        host, port = self._server.sockets[0].getsockname()[:2]
        return host, port

    async def start(self) -> 'ImpairmentProxy':
        try:
            self._server = await asyncio.start_server(self._handle, self.listen[0], self.listen[1])
        except OSError as e:
            raise BindError(f"Cannot bind proxy to {self.listen[0]}:{self.listen[1]}: {e}")
        logger.info(f"Impairment proxy {self.address[0]}:{self.address[1]} -> "
                    f"{self.upstream[0]}:{self.upstream[1]} ({self.scenario.name})")
        return self

    async def close(self) -> None:
        """Stop accepting, cut every relayed connection. Safe to call repeatedly."""
        if self._closed:
            return
        self._closed = True
        if self._server is not None:
            self._server.close()
        for task in list(self._handlers):
            task.cancel()
        if self._handlers:
            await asyncio.gather(*self._handlers, return_exceptions=True)
        if self._server is not None:
            await self._server.wait_closed()
        logger.debug(f"Impairment proxy closed ({self.stats.connections} connections)")

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, exc_type, exc, tb):
        await self.close()

    def release_fingerprint(self) -> List[Tuple[int, str, Tuple[int, ...]]]:
        """Sampled added delays per (connection index, direction); identical under equal seeds and chunking."""
        return [(index, direction, tuple(schedule.added_delays_ns))
                for (index, direction), schedule in sorted(self.schedules.items())]

    def report(self) -> Dict[str, Any]:
        data = self.stats.to_dict()
        data['seed'] = self.seed
        data['scenario'] = self.scenario.to_dict()
        data['loss_model'] = self.loss_model.to_dict()
        return data

    async def _handle(self, client_reader: asyncio.StreamReader, client_writer: asyncio.StreamWriter):
        task = asyncio.current_task()
        self._handlers.add(task)
        index = self._next_index
        self._next_index += 1
        upstream_writer = None
        try:
            try:
                upstream_reader, upstream_writer = await asyncio.wait_for(
                    asyncio.open_connection(*self.upstream), self.connect_timeout)
            except (OSError, asyncio.TimeoutError) as e:
                self.stats.refused += 1
                logger.warning(f"Upstream {self.upstream[0]}:{self.upstream[1]} unreachable, "
                               f"closing client connection {index}: {e}")
                return

            self.stats.connections += 1
            rng_up, loss_up, rng_down, loss_down = (
                np.random.default_rng(child) for child in self._seed_sequence.spawn(4))
            up = self.schedules[(index, 'c2b')] = ReleaseSchedule(loss_rng=loss_up)
            down = self.schedules[(index, 'b2c')] = ReleaseSchedule(loss_rng=loss_down)
            await asyncio.gather(
                self._pump(client_reader, upstream_writer, up, rng_up),
                self._pump(upstream_reader, client_writer, down, rng_down),
            )
        except asyncio.CancelledError:
            pass
        finally:
            for writer in (client_writer, upstream_writer):
                if writer is not None:
                    writer.close()
            self._handlers.discard(task)

    async def _pump(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter,
                    schedule: ReleaseSchedule, rng: np.random.Generator) -> None:
        tokens: asyncio.Queue = asyncio.Queue()
        releaser = asyncio.create_task(self._release(tokens, writer, schedule))
        try:
            while True:
                chunk = await reader.read(CHUNK_READ_SIZE)
                if not chunk:
                    break
                penalties_before = schedule.penalties
                schedule_chunk(schedule, chunk, self.clock(), self.scenario, rng, self.loss_model)
                self.stats.chunks += 1
                self.stats.bytes += len(chunk)
                self.stats.penalties += schedule.penalties - penalties_before
                tokens.put_nowait(True)
        except (ConnectionError, OSError) as e:
            logger.debug(f"Relay read ended: {e}")
        except asyncio.CancelledError:
            releaser.cancel()
            raise
        finally:
            tokens.put_nowait(None)
            try:
                await releaser
            finally:
                writer.close()

    async def _release(self, tokens: asyncio.Queue, writer: asyncio.StreamWriter,
                       schedule: ReleaseSchedule) -> None:
        try:
            while await tokens.get():
                chunk, release = schedule.queue.popleft()
                wait = (release - self.clock()) / 1e9
                if wait > SPIN_MARGIN_S:
                    await asyncio.sleep(wait - SPIN_MARGIN_S)
                while self.clock() < release:
                    await asyncio.sleep(0)
                writer.write(chunk)
                await writer.drain()
        except (ConnectionError, OSError) as e:
            logger.debug(f"Relay write ended: {e}")


async def run_proxy(listen: Address, upstream: Address, s: Scenario, seed: Optional[int] = None,
                    loss_model: LossModel = LossModel(), probe_timeout: float = 2.0) -> ImpairmentProxy:
    """
    Check the upstream accepts connections, then start a proxy for it.

    Raises:
        UpstreamUnreachable: if the upstream refuses or times out
        BindError: if the listen address is taken
    """
    try:
        _, writer = await asyncio.wait_for(asyncio.open_connection(*upstream), probe_timeout)
    except (OSError, asyncio.TimeoutError) as e:
        raise UpstreamUnreachable(f"Upstream {upstream[0]}:{upstream[1]} unreachable: {e}")
    writer.close()
    try:
        await writer.wait_closed()
    except (ConnectionError, OSError):
        pass
    return await ImpairmentProxy(listen, upstream, s, seed=seed, loss_model=loss_model).start()
