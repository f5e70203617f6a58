"""
In-process MQTT 3.1.1 broker stub.

Serves CONNECT, SUBSCRIBE, UNSUBSCRIBE, PUBLISH (QoS 0 and 1) and PINGREQ
with wildcard fan-out, so the harness can be exercised without an external
broker. A FaultPlan injects the failures the client engine must survive.
"""

import asyncio
import logging
from dataclasses import asdict, dataclass
from typing import Any, Dict, List, Optional, Set, Tuple

from network.proxy import BindError
from protocol import (
    MAX_PACKET_ID, SUBACK_FAILURE, ConnAck, Connect, ControlPacket, Disconnect, Malformed,
    PacketStream, PingReq, PingResp, PubAck, Publish, SubAck, Subscribe, UnsubAck, Unsubscribe,
    encode_packet,
)
from .subscriptions import SubscriptionTable

logger = logging.getLogger(__name__)

Address = Tuple[str, int]
Effect = Tuple['StubSession', ControlPacket]

# A session silent for keep_alive * this factor is disconnected
KEEP_ALIVE_GRACE = 1.5
# A connection must send CONNECT within this many seconds
CONNECT_WAIT_S = 10.0
READ_SIZE = 65536
FLUSH_TIMEOUT_S = 1.0


# Custom Exceptions
class ProtocolViolation(Exception):
    """Raised when a client breaks the protocol; the connection is closed"""
    pass


class FaultPlanError(ValueError):
    """Raised for an invalid fault plan"""
    pass


@dataclass(frozen=True)
class FaultPlan:
    """Failures the stub injects. The zero plan is a well-behaved broker."""
    drop_first_n_pubacks: int = 0
    connack_return_code: int = 0
    grant_qos_override: Optional[int] = None

    def __post_init__(self):
        if self.drop_first_n_pubacks < 0:
            raise FaultPlanError("drop_first_n_pubacks must be >= 0")
        if not 0 <= self.connack_return_code <= 5:
            raise FaultPlanError(f"connack_return_code must be within 0..5, got {self.connack_return_code}")
        if self.grant_qos_override not in (None, 0, 1, SUBACK_FAILURE):
            raise FaultPlanError(f"grant_qos_override must be 0, 1 or 128, got {self.grant_qos_override}")

    @classmethod
    def parse(cls, text: str) -> 'FaultPlan':
        """
        Parse "key=value,key=value" as given on the command line.

        Example: "drop_first_n_pubacks=1,connack_return_code=0"
        """
        values: Dict[str, Any] = {}
        for item in filter(None, (part.strip() for part in (text or '').split(','))):
            key, sep, value = item.partition('=')
            key = key.strip()
            if not sep or key not in cls.__dataclass_fields__:
                raise FaultPlanError(f"Unknown fault setting {item!r}")
            try:
                values[key] = None if value.strip().lower() == 'none' else int(value, 0)
            except ValueError:
                raise FaultPlanError(f"Fault setting {key} needs an integer, got {value!r}")
        return cls(**values)

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


@dataclass
class StubStats:
    sessions: int = 0
    publishes_received: int = 0
    deliveries: int = 0
    pubacks_dropped: int = 0
    pings: int = 0
    protocol_violations: int = 0

    def to_dict(self) -> Dict[str, Any]:
        return asdict(self)


class StubSession:
    """Per-connection protocol state and outgoing queue."""

    def __init__(self, peer: Any = None):
        self.peer = peer
        self.client_id: Optional[str] = None
        self.keep_alive_s = 0
        self.connected = False
        self.outgoing: "asyncio.Queue[Optional[ControlPacket]]" = asyncio.Queue()
        self._next_packet_id = 1

    def next_packet_id(self) -> int:
        packet_id = self._next_packet_id
        self._next_packet_id = 1 if packet_id == MAX_PACKET_ID else packet_id + 1
        return packet_id

    def __repr__(self):
        return f"StubSession({self.client_id or self.peer})"


class StubBroker:
    """Broker handle returned by run_stub."""

    def __init__(self, listen: Address = ('127.0.0.1', 0), faults: FaultPlan = FaultPlan()):
        self.listen = listen
        self.faults = faults
        self.table = SubscriptionTable()
        self.sessions: Set[StubSession] = set()
        self.stats = StubStats()
        self._server: Optional[asyncio.AbstractServer] = None
        self._handlers = set()

    @property
    def address(self) -> Address:
        if self._server is None:
            raise RuntimeError("Broker stub is not running")
        host, port = self._server.sockets[0].getsockname()[:2]
        return host, port

    async def start(self) -> 'StubBroker':
        try:
            self._server = await asyncio.start_server(self._handle, self.listen[0], self.listen[1])
        except OSError as e:
            raise BindError(f"Cannot bind broker stub to {self.listen[0]}:{self.listen[1]}: {e}")
        logger.info(f"Broker stub listening on {self.address[0]}:{self.address[1]} "
                    f"(faults: {self.faults.to_dict()})")
        return self

    async def close(self) -> None:
        if self._server is None:
            return
        self._server.close()
        for task in list(self._handlers):
            task.cancel()
        if self._handlers:
            await asyncio.gather(*self._handlers, return_exceptions=True)
        await self._server.wait_closed()
        self._server = None
        logger.info(f"Broker stub stopped: {self.stats.to_dict()}")

    async def __aenter__(self):
        return await self.start()

    async def __aexit__(self, exc_type, exc, tb):
        await self.close()

    async def serve_forever(self) -> None:
        if self._server is None:
            await self.start()
        await self._server.serve_forever()

    def handle_publish(self, session: StubSession, p: Publish) -> List[Effect]:
        """
        Acknowledge a PUBLISH and fan it out.

        Returns:
            (target session, packet) pairs to send, the PUBACK first
        """
        if not session.connected:
            raise ProtocolViolation("PUBLISH before CONNECT")
        if p.qos == 1 and p.packet_id is None:
            raise ProtocolViolation("QoS 1 PUBLISH without packet id")

        self.stats.publishes_received += 1
        effects: List[Effect] = []
        if p.qos == 1:
            if self.stats.pubacks_dropped < self.faults.drop_first_n_pubacks:
                self.stats.pubacks_dropped += 1
                logger.info(f"Dropping PUBACK for packet {p.packet_id} from {session}")
            else:
                effects.append((session, PubAck(packet_id=p.packet_id)))

        for subscriber, granted in self.table.matching(p.topic).items():
            if not subscriber.connected:
                continue
            qos = min(p.qos, granted)
            forward = Publish(topic=p.topic, payload=p.payload, qos=qos,
                              packet_id=subscriber.next_packet_id() if qos else None)
            effects.append((subscriber, forward))
            self.stats.deliveries += 1
        return effects

    def _on_packet(self, session: StubSession, packet: ControlPacket) -> bool:
        """Apply one packet; returns False when the connection must close."""
        if isinstance(packet, Connect):
            if session.connected:
                raise ProtocolViolation("Second CONNECT on one connection")
            code = self.faults.connack_return_code
            session.outgoing.put_nowait(ConnAck(session_present=False, return_code=code))
            if code != 0:
                logger.info(f"Refusing CONNECT from {packet.client_id!r} with return code {code}")
                return False
            session.client_id = packet.client_id
            session.keep_alive_s = packet.keep_alive_s
            session.connected = True
            return True

        if not session.connected:
            raise ProtocolViolation(f"{type(packet).__name__} before CONNECT")

        if isinstance(packet, Publish):
            for target, out in self.handle_publish(session, packet):
                target.outgoing.put_nowait(out)
        elif isinstance(packet, PubAck):
            pass
        elif isinstance(packet, Subscribe):
            granted = []
            for topic_filter, requested in packet.filters:
                qos = self.faults.grant_qos_override
                if qos is None:
                    qos = min(requested, 1)
                if qos != SUBACK_FAILURE:
                    self.table.subscribe(session, topic_filter, qos)
                granted.append(qos)
            session.outgoing.put_nowait(SubAck(packet_id=packet.packet_id, granted=tuple(granted)))
        elif isinstance(packet, Unsubscribe):
            for topic_filter in packet.filters:
                self.table.unsubscribe(session, topic_filter)
            session.outgoing.put_nowait(UnsubAck(packet_id=packet.packet_id))
        elif isinstance(packet, PingReq):
            self.stats.pings += 1
            session.outgoing.put_nowait(PingResp())
        elif isinstance(packet, Disconnect):
            return False
        else:
            raise ProtocolViolation(f"Unexpected {type(packet).__name__} from client")
        return True

    async def _handle(self, reader: asyncio.StreamReader, writer: asyncio.StreamWriter):
        task = asyncio.current_task()
        self._handlers.add(task)
        session = StubSession(peer=writer.get_extra_info('peername'))
        self.sessions.add(session)
        self.stats.sessions += 1
        sender = asyncio.create_task(self._send_loop(session, writer))
        stream = PacketStream()
        try:
            open_ = True
            while open_:
                timeout = session.keep_alive_s * KEEP_ALIVE_GRACE if session.connected else CONNECT_WAIT_S
                try:
                    data = await asyncio.wait_for(reader.read(READ_SIZE), timeout or None)
                except asyncio.TimeoutError:
                    logger.info(f"{session}: keepalive expired, disconnecting")
                    break
                if not data:
                    break
                stream.feed(data)
                for packet in stream.drain():
                    if isinstance(packet, Malformed):
                        raise ProtocolViolation(f"Malformed packet: {packet.reason}")
                    if not self._on_packet(session, packet):
                        open_ = False
                        break
        except ProtocolViolation as e:
            self.stats.protocol_violations += 1
            logger.warning(f"{session}: {e}, closing connection")
        except (ConnectionError, OSError) as e:
            logger.debug(f"{session}: connection error: {e}")
        except asyncio.CancelledError:
            pass
        finally:
            session.connected = False
            self.table.remove_session(session)
            self.sessions.discard(session)
            session.outgoing.put_nowait(None)
            try:
                await asyncio.wait_for(sender, FLUSH_TIMEOUT_S)
            except (asyncio.TimeoutError, asyncio.CancelledError):
                sender.cancel()
            writer.close()
            self._handlers.discard(task)

    async def _send_loop(self, session: StubSession, writer: asyncio.StreamWriter) -> None:
        try:
            while True:
                packet = await session.outgoing.get()
                if packet is None:
                    return
                writer.write(encode_packet(packet))
                await writer.drain()
        except (ConnectionError, OSError) as e:
            logger.debug(f"{session}: send failed: {e}")


async def run_stub(listen: Address = ('127.0.0.1', 0), faults: FaultPlan = FaultPlan()) -> StubBroker:
    """
    Start a broker stub.

    Args:
        listen: Host and port; port 0 picks a free port (see StubBroker.address)
        faults: Failures to inject

    Raises:
        BindError: if the port is taken
    """
    return await StubBroker(listen, faults).start()
