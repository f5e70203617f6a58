"""
MQTT 3.1.1 client session for the benchmark harness.

One session owns one TCP connection and its protocol state. It supports the
two roles the harness needs: subscriber (QoS 1 subscription, incoming
messages queued with their receive timestamp) and publisher (QoS 1 publish
with PUBACK tracking and DUP retransmission).
"""

import asyncio
import logging
import time
from dataclasses import dataclass, field, replace
from enum import Enum
from typing import Callable, Dict, Optional, Tuple

from config.settings import (
    DEFAULT_ACK_TIMEOUT_S, DEFAULT_CONNECT_TIMEOUT_S, DEFAULT_KEEP_ALIVE_S, DEFAULT_MAX_RETRANSMITS,
)
from protocol import (
    MAX_PACKET_ID, SUBACK_FAILURE, ConnAck, Connect, ControlPacket, Disconnect, Malformed,
    PacketStream, PingReq, PingResp, PubAck, Publish, SubAck, Subscribe, UnsubAck, Unsubscribe,
    encode_packet, validate_topic_filter, validate_topic_name,
)

logger = logging.getLogger(__name__)

# Fraction of keep_alive_s of send-side idleness after which a PINGREQ goes out
PING_FRACTION = 0.75
RECONNECT_BACKOFF_S = 0.1
READ_SIZE = 65536


# Custom Exceptions
class ClientError(Exception):
    """Base exception for client session errors"""
    pass


class ConnectTimeout(ClientError):
    """Raised when no CONNACK arrives within connect_timeout"""
    pass


class ConnectRefused(ClientError):
    """Raised when the broker answers CONNACK with a non-zero return code"""

    def __init__(self, return_code: int):
        super().__init__(f"Connection refused by broker (return code {return_code})")
        self.return_code = return_code


class TransportError(ClientError):
    """Raised when the connection fails or the broker violates the protocol"""
    pass


class AckTimeout(ClientError):
    """Raised when an acknowledgement does not arrive within ack_timeout"""
    pass


class SubscriptionFailed(ClientError):
    """Raised when SUBACK carries the failure code 0x80"""
    pass


class AckExhausted(ClientError):
    """Raised when a QoS 1 publish stays unacknowledged after max_retransmits"""
    pass


class NotConnected(ClientError):
    """Raised when an operation needs a Connected session"""
    pass


class InvalidTopic(ValueError):
    """Raised when a topic name or filter is rejected before sending"""
    pass


class Phase(Enum):
    DISCONNECTED = 'disconnected'
    CONNECTING = 'connecting'
    CONNECTED = 'connected'
    CLOSED = 'closed'


@dataclass
class ClientConfig:
    """Per-session client settings."""
    client_id: str
    keep_alive_s: int = DEFAULT_KEEP_ALIVE_S
    connect_timeout: float = DEFAULT_CONNECT_TIMEOUT_S
    ack_timeout: float = DEFAULT_ACK_TIMEOUT_S
    max_retransmits: int = DEFAULT_MAX_RETRANSMITS

    def __post_init__(self):
        if not 0 < self.keep_alive_s <= 65535:
            raise ValueError(f"keep_alive_s must be in 1..65535, got {self.keep_alive_s}")
        if self.max_retransmits < 0:
            raise ValueError(f"max_retransmits must be >= 0, got {self.max_retransmits}")
        if self.connect_timeout <= 0 or self.ack_timeout <= 0:
            raise ValueError("Timeouts must be positive")


@dataclass
class PendingPublish:
    topic: str
    payload: bytes
    first_sent_at: int
    future: asyncio.Future
    retries: int = 0


@dataclass
class SessionState:
    phase: Phase = Phase.DISCONNECTED
    inflight: Dict[int, PendingPublish] = field(default_factory=dict)
    next_packet_id: int = 1

    def allocate_packet_id(self, busy=()) -> int:
        """Next free packet id, wrapping 65535 -> 1 and skipping ids still in use."""
        for _ in range(MAX_PACKET_ID):
            packet_id = self.next_packet_id
            self.next_packet_id = 1 if packet_id == MAX_PACKET_ID else packet_id + 1
            if packet_id not in self.inflight and packet_id not in busy:
                return packet_id
        raise ClientError("All 65535 packet ids are in flight")


class MQTTSession:
    """
    Client session: connection state machine plus publisher/subscriber operations.

    Incoming PUBLISH packets are queued on ``messages`` as
    (packet, receive_time_ns) tuples for a single consumer.
    """

    def __init__(self, cfg: ClientConfig, clock: Callable[[], int] = time.monotonic_ns):
        self.cfg = cfg
        self.clock = clock
        self.state = SessionState()
        self.messages: "asyncio.Queue[Tuple[Publish, int]]" = asyncio.Queue()
        self.session_present = False
        self.pings_sent = 0
        self.pongs_received = 0
        self.retransmits = 0

        self._reader: Optional[asyncio.StreamReader] = None
        self._writer: Optional[asyncio.StreamWriter] = None
        self._stream = PacketStream()
        self._connack: Optional[asyncio.Future] = None
        self._pending_acks: Dict[int, asyncio.Future] = {}
        self._tasks = []
        self._write_lock = asyncio.Lock()
        self._last_sent = 0.0
        self.error: Optional[ClientError] = None

    @property
    def phase(self) -> Phase:
        return self.state.phase

    @property
    def connected(self) -> bool:
        return self.state.phase == Phase.CONNECTED

    async def connect(self, host: str, port: int) -> 'MQTTSession':
        """
        Open the TCP connection and complete the CONNECT/CONNACK handshake.

        Connection attempts are retried until connect_timeout expires, so an
        unreachable endpoint surfaces as ConnectTimeout.
        """
        if self.state.phase != Phase.DISCONNECTED:
            raise ClientError(f"connect() needs a Disconnected session, phase is {self.state.phase.value}")
        self.state.phase = Phase.CONNECTING
        loop = asyncio.get_running_loop()
        deadline = loop.time() + self.cfg.connect_timeout

        while True:
            remaining = deadline - loop.time()
            if remaining <= 0:
                self.state.phase = Phase.CLOSED
                raise ConnectTimeout(f"No connection to {host}:{port} within {self.cfg.connect_timeout}s")
            try:
                self._reader, self._writer = await asyncio.wait_for(
                    asyncio.open_connection(host, port), remaining)
                break
            except asyncio.TimeoutError:
                continue
            except OSError as e:
                logger.debug(f"{self.cfg.client_id}: connect to {host}:{port} failed ({e}), retrying")
                await asyncio.sleep(min(RECONNECT_BACKOFF_S, max(0.0, deadline - loop.time())))

        self._connack = loop.create_future()
        self._tasks.append(asyncio.create_task(self._read_loop()))
        try:
            await self._send(Connect(client_id=self.cfg.client_id, keep_alive_s=self.cfg.keep_alive_s,
                                     clean_session=True))
            connack = await asyncio.wait_for(self._connack, max(0.0, deadline - loop.time()))
        except asyncio.TimeoutError:
            await self._teardown()
            raise ConnectTimeout(f"No CONNACK from {host}:{port} within {self.cfg.connect_timeout}s")
        except Exception:
            await self._teardown()
            raise

        if connack.return_code != 0:
            await self._teardown()
            raise ConnectRefused(connack.return_code)

        self.session_present = connack.session_present
        self.state.phase = Phase.CONNECTED
        self._tasks.append(asyncio.create_task(self._keep_alive_loop()))
        logger.debug(f"{self.cfg.client_id}: connected to {host}:{port}")
        return self

    async def subscribe(self, topic_filter: str, qos: int = 1) -> int:
        """
        Subscribe and wait for SUBACK.

        Returns:
            The QoS granted by the broker
        """
        check = validate_topic_filter(topic_filter)
        if not check:
            raise InvalidTopic(f"Invalid topic filter {topic_filter!r}: {check.reason}")
        self._require_connected()

        packet_id = self.state.allocate_packet_id(self._pending_acks)
        suback = await self._request(Subscribe(packet_id=packet_id, filters=((topic_filter, qos),)), packet_id)

        granted = suback.granted[0]
        if granted == SUBACK_FAILURE:
            raise SubscriptionFailed(f"Broker refused subscription to {topic_filter!r}")
        if granted < qos:
            logger.warning(f"{self.cfg.client_id}: subscription {topic_filter!r} downgraded "
                           f"from QoS {qos} to QoS {granted}")
        return granted

    async def unsubscribe(self, topic_filter: str) -> None:
        check = validate_topic_filter(topic_filter)
        if not check:
            raise InvalidTopic(f"Invalid topic filter {topic_filter!r}: {check.reason}")
        self._require_connected()
        packet_id = self.state.allocate_packet_id(self._pending_acks)
        await self._request(Unsubscribe(packet_id=packet_id, filters=(topic_filter,)), packet_id)

    async def publish_qos1(self, topic: str, payload: bytes) -> int:
        """
        Publish at QoS 1 and wait for the PUBACK.

        Unacknowledged publishes are retransmitted with DUP=1 every ack_timeout,
        up to max_retransmits times.

        Returns:
            Ack latency in nanoseconds (first send to PUBACK)
        """
        self._require_connected()
        if not payload:
            raise ValueError("Payload must not be empty")
        check = validate_topic_name(topic)
        if not check:
            raise InvalidTopic(f"Invalid topic name {topic!r}: {check.reason}")

        packet_id = self.state.allocate_packet_id(self._pending_acks)
        pending = PendingPublish(topic=topic, payload=payload, first_sent_at=self.clock(),
                                 future=asyncio.get_running_loop().create_future())
        self.state.inflight[packet_id] = pending
        packet = Publish(topic=topic, payload=payload, qos=1, packet_id=packet_id)

        try:
            await self._send(packet)
            while True:
                try:
                    acked_at = await asyncio.wait_for(asyncio.shield(pending.future), self.cfg.ack_timeout)
                    return acked_at - pending.first_sent_at
                except asyncio.TimeoutError:
                    if pending.retries >= self.cfg.max_retransmits:
                        raise AckExhausted(f"No PUBACK for packet {packet_id} after "
                                           f"{pending.retries} retransmits")
                    pending.retries += 1
                    self.retransmits += 1
                    logger.warning(f"{self.cfg.client_id}: retransmitting packet {packet_id} "
                                   f"(attempt {pending.retries}/{self.cfg.max_retransmits})")
                    await self._send(replace(packet, dup=True))
        finally:
            if self.state.inflight.get(packet_id) is pending:
                del self.state.inflight[packet_id]
            if not pending.future.done():
                pending.future.cancel()

    async def disconnect(self) -> None:
        """Send DISCONNECT if connected and close the connection."""
        if self.state.phase == Phase.CONNECTED:
            try:
                await self._send(Disconnect())
            except ClientError as e:
                logger.debug(f"{self.cfg.client_id}: DISCONNECT not sent: {e}")
        await self._teardown()

    def _require_connected(self) -> None:
        if self.state.phase != Phase.CONNECTED:
            raise NotConnected(f"Session {self.cfg.client_id} is {self.state.phase.value}")

    async def _request(self, packet: ControlPacket, packet_id: int) -> ControlPacket:
        future = asyncio.get_running_loop().create_future()
        self._pending_acks[packet_id] = future
        try:
            await self._send(packet)
            return await asyncio.wait_for(future, self.cfg.ack_timeout)
        except asyncio.TimeoutError:
            raise AckTimeout(f"No acknowledgement for packet {packet_id} within {self.cfg.ack_timeout}s")
        finally:
            self._pending_acks.pop(packet_id, None)

    async def _send(self, packet: ControlPacket) -> None:
        if self._writer is None or self.state.phase == Phase.CLOSED:
            raise NotConnected(f"Session {self.cfg.client_id} has no open connection")
        data = encode_packet(packet)
        try:
            async with self._write_lock:
                self._writer.write(data)
                await self._writer.drain()
        except (ConnectionError, OSError) as e:
            error = TransportError(f"Send failed: {e}")
            self._fail(error)
            raise error
        self._last_sent = asyncio.get_running_loop().time()

    async def _read_loop(self) -> None:
        try:
            while True:
                data = await self._reader.read(READ_SIZE)
                if not data:
                    raise TransportError("Connection closed by broker")
                received_at = self.clock()
                self._stream.feed(data)
                for packet in self._stream.drain():
                    if isinstance(packet, Malformed):
                        raise TransportError(f"Malformed packet from broker: {packet.reason}")
                    await self._dispatch(packet, received_at)
        except asyncio.CancelledError:
            raise
        except ClientError as e:
            self._fail(e)
        except (ConnectionError, OSError) as e:
            self._fail(TransportError(str(e)))

    async def _dispatch(self, packet: ControlPacket, received_at: int) -> None:
        if isinstance(packet, Publish):
            if packet.qos == 1:
                await self._send(PubAck(packet_id=packet.packet_id))
            self.messages.put_nowait((packet, received_at))
        elif isinstance(packet, PubAck):
            pending = self.state.inflight.pop(packet.packet_id, None)
            if pending is None:
                logger.debug(f"{self.cfg.client_id}: PUBACK for unknown packet {packet.packet_id}")
            elif not pending.future.done():
                pending.future.set_result(received_at)
        elif isinstance(packet, (SubAck, UnsubAck)):
            future = self._pending_acks.get(packet.packet_id)
            if future is not None and not future.done():
                future.set_result(packet)
        elif isinstance(packet, ConnAck):
            if self._connack is not None and not self._connack.done():
                self._connack.set_result(packet)
        elif isinstance(packet, PingResp):
            self.pongs_received += 1
        else:
            raise TransportError(f"Unexpected {type(packet).__name__} from broker")

    async def _keep_alive_loop(self) -> None:
        loop = asyncio.get_running_loop()
        interval = self.cfg.keep_alive_s * PING_FRACTION
        try:
            while self.state.phase == Phase.CONNECTED:
                wait = self._last_sent + interval - loop.time()
                if wait > 0:
                    await asyncio.sleep(wait)
                    continue
                await self._send(PingReq())
                self.pings_sent += 1
                logger.debug(f"{self.cfg.client_id}: PINGREQ sent")
        except ClientError as e:
            logger.debug(f"{self.cfg.client_id}: keepalive stopped: {e}")

    def _fail(self, error: ClientError) -> None:
        if self.state.phase == Phase.CLOSED:
            return
        if self.state.phase == Phase.CONNECTED:
            logger.error(f"{self.cfg.client_id}: session failed: {error}")
        self.state.phase = Phase.CLOSED
        self.error = error
        waiters = [self._connack] + list(self._pending_acks.values())
        waiters += [pending.future for pending in self.state.inflight.values()]
        for future in waiters:
            if future is not None and not future.done():
                future.set_exception(error)
        if self._writer is not None:
            self._writer.close()

    async def _teardown(self) -> None:
        self.state.phase = Phase.CLOSED
        current = asyncio.current_task()
        for task in self._tasks:
            if task is not current and not task.done():
                task.cancel()
        for task in self._tasks:
            if task is not current:
                try:
                    await task
                except (asyncio.CancelledError, Exception):
                    pass
        self._tasks.clear()
        if self._writer is not None:
            self._writer.close()
            try:
                await self._writer.wait_closed()
            except (ConnectionError, OSError):
                pass
