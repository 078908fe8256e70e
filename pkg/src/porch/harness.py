"""Transports and drivers for the node state machines.

Simulated mode is a single-threaded discrete-event loop over a virtual clock
(1 tick = 1 ms). Links are reliable and FIFO, like TCP; a link can drop whole
messages with a seeded probability to model a failed connection. Each node
handles one message at a time and spends ``processing_ticks`` on it, so a node
flooded with messages falls behind the way a real single-threaded server would.

TCP mode runs the same nodes over real localhost sockets with asyncio, so the
bytes on the wire are exactly the DNP3m frames.
"""

from __future__ import annotations

import asyncio
import functools
import heapq
import itertools
import json
import random
import time
from collections import deque
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from .dnp3m import Direction, Message, MessageAssembler, StreamDecoder, decode_frame, encode_message
from .nodes import (
    CancelTimer,
    Node,
    Note,
    ProtocolMessage,
    Send,
    SetTimer,
)

DEFAULT_BASE_PORT = 20000
HELLO = b"hello|"


class HarnessError(RuntimeError):
    pass


class UnknownEndpoint(HarnessError):
    pass


class BindFailure(HarnessError):
    pass


class ConnectFailure(HarnessError):
    pass


@dataclass(frozen=True)
class Endpoint:
    node: str
    address: str = "127.0.0.1"
    port: int = 0


def allocate_endpoints(
    names: Iterable[str], address: str = "127.0.0.1", base_port: int = DEFAULT_BASE_PORT
) -> dict[str, Endpoint]:
    """Assign consecutive ports from ``base_port`` (``base_port=0`` lets the OS pick)."""
    endpoints = {}
    for i, name in enumerate(names):
        endpoints[name] = Endpoint(name, address, base_port + i if base_port else 0)
    return endpoints


@dataclass
class NetworkPolicy:
    """Per-link latency and drop probability, plus per-message handling cost.

    ``latency`` is a fixed tick count or an inclusive ``(lo, hi)`` range drawn
    uniformly per message. ``link_latency`` and ``drop`` override per link,
    keyed by ``(src, dst)``; ``drop_nodes`` drops every link touching a node.
    """

    latency: int | tuple[int, int] = 1
    drop_probability: float = 0.0
    seed: int = 0
    processing_ticks: int = 1
    link_latency: dict[tuple[str, str], int | tuple[int, int]] = field(default_factory=dict)
    drop: dict[tuple[str, str], float] = field(default_factory=dict)
    drop_nodes: dict[str, float] = field(default_factory=dict)

    def latency_for(self, src: str, dst: str) -> int | tuple[int, int]:
        return self.link_latency.get((src, dst), self.latency)

    def drop_for(self, src: str, dst: str) -> float:
        p = self.drop.get((src, dst), self.drop_probability)
        return max(p, self.drop_nodes.get(src, 0.0), self.drop_nodes.get(dst, 0.0))


@dataclass(frozen=True)
class TraceEvent:
    tick: int
    kind: str
    src: str
    dst: str
    cycle: int
    detail: str

    def to_dict(self) -> dict:
        return {
            "tick": self.tick,
            "kind": self.kind,
            "from": self.src,
            "to": self.dst,
            "cycle": self.cycle,
            "detail": self.detail,
        }


def trace_to_jsonl(trace: list[TraceEvent]) -> str:
    return "".join(json.dumps(e.to_dict(), separators=(",", ":")) + "\n" for e in trace)


def write_trace(trace: list[TraceEvent], path: str | Path) -> None:
    Path(path).write_text(trace_to_jsonl(trace), encoding="utf-8")


class VirtualClock:
    def __init__(self) -> None:
        self.now = 0

    def advance_to(self, tick: int) -> None:
        if tick < self.now:
            raise HarnessError(f"clock cannot move back from {self.now} to {tick}")
        self.now = tick


def wire_frames(msg: ProtocolMessage) -> list[bytes]:
    return encode_message(msg.to_message())


# a broadcast delivers the same frames to every peer; messages are immutable,
# so one decode can serve all of them
@functools.lru_cache(maxsize=64)
def _decode_cached(frames: tuple[bytes, ...]) -> ProtocolMessage:
    return _decode_frames(frames)


def _decode_frames(frames) -> ProtocolMessage:
    assembler = MessageAssembler()
    message = None
    for raw in frames:
        frame, rest = decode_frame(raw)
        if rest:
            raise HarnessError("frame carries trailing bytes")
        message = assembler.push(frame)
    if message is None:
        raise HarnessError("frames do not complete a message")
    return ProtocolMessage.from_message(message)


class SimNetwork:
    """Deterministic event loop. Events at equal ticks run in enqueue order."""

    def __init__(
        self,
        nodes: dict[str, Node],
        policy: NetworkPolicy | None = None,
        endpoints: dict[str, Endpoint] | None = None,
        record_trace: bool = True,
        realtime: bool = False,
    ):
        self.nodes = nodes
        self.policy = policy or NetworkPolicy()
        self.endpoints = endpoints or allocate_endpoints(nodes)
        self.clock = VirtualClock()
        self.rng = random.Random(f"net:{self.policy.seed}")
        self.record_trace = record_trace
        self.realtime = realtime
        self.trace: list[TraceEvent] = []
        self._queue: list = []
        self._seq = itertools.count()
        self._link_tail: dict[tuple[str, str], int] = {}
        self._inbox: dict[str, deque] = {n: deque() for n in nodes}
        self._busy_until: dict[str, int] = dict.fromkeys(nodes, 0)
        self._scheduled: dict[str, bool] = dict.fromkeys(nodes, False)
        self._timers: dict[tuple[str, str], int] = {}
        self._started = False

    def _push(self, tick: int, kind: str, *payload) -> None:
        heapq.heappush(self._queue, (tick, next(self._seq), kind, payload))

    def _record(self, kind: str, src: str, dst: str, cycle: int, detail: str) -> None:
        if self.record_trace:
            self.trace.append(TraceEvent(self.clock.now, kind, src, dst, cycle, detail))

    def send(self, src: Endpoint | str, dst: Endpoint | str, frames: list[bytes],
             at: int | None = None, cycle: int = -1, detail: str = "") -> None:
        """Enqueue ``frames`` on the link; they arrive whole, in order, or not at all."""
        src_name = src.node if isinstance(src, Endpoint) else src
        dst_name = dst.node if isinstance(dst, Endpoint) else dst
        for name in (src_name, dst_name):
            if name not in self.endpoints or name not in self.nodes:
                raise UnknownEndpoint(name)
        at = self.clock.now if at is None else at
        p = self.policy.drop_for(src_name, dst_name)
        if p > 0 and self.rng.random() < p:
            self._record("drop", src_name, dst_name, cycle, detail)
            return
        lat = self.policy.latency_for(src_name, dst_name)
        delay = self.rng.randint(*lat) if isinstance(lat, tuple) else lat
        link = (src_name, dst_name)
        arrive = max(at + delay, self._link_tail.get(link, 0))
        self._link_tail[link] = arrive
        self._push(arrive, "deliver", src_name, dst_name, tuple(frames))

    def _apply(self, node: str, actions, at: int) -> None:
        encoded: dict[int, tuple[bytes, ...]] = {}
        for action in actions:
            if isinstance(action, Send):
                msg = action.message
                frames = encoded.get(id(msg))
                if frames is None:
                    frames = encoded[id(msg)] = tuple(wire_frames(msg))
                self._record("send", node, action.to, msg.cycle, msg.kind.value)
                self.send(node, action.to, frames, at=at, cycle=msg.cycle,
                          detail=msg.kind.value)
            elif isinstance(action, SetTimer):
                gen = self._timers.get((node, action.key), 0) + 1
                self._timers[(node, action.key)] = gen
                self._push(max(action.at, at), "timer", node, action.key, gen)
            elif isinstance(action, CancelTimer):
                self._timers[(node, action.key)] = self._timers.get((node, action.key), 0) + 1
            elif isinstance(action, Note):
                self._record(action.kind, node, node, action.cycle, action.detail)

    def start(self) -> None:
        if self._started:
            return
        self._started = True
        for name, node in self.nodes.items():
            self._apply(name, node.on_start(self.clock.now), self.clock.now)

    def _step(self, tick: int, kind: str, payload) -> None:
        self.clock.advance_to(tick)
        if kind == "deliver":
            src, dst, frames = payload
            msg = _decode_cached(frames)
            self._record("deliver", src, dst, msg.cycle, msg.kind.value)
            self._inbox[dst].append(msg)
            if not self._scheduled[dst]:
                self._scheduled[dst] = True
                self._push(max(tick, self._busy_until[dst]), "process", dst)
        elif kind == "process":
            (name,) = payload
            msg = self._inbox[name].popleft()
            done = tick + self.policy.processing_ticks
            self._busy_until[name] = done
            self._apply(name, self.nodes[name].on_message(msg, tick), done)
            if self._inbox[name]:
                self._push(done, "process", name)
            else:
                self._scheduled[name] = False
        elif kind == "timer":
            name, key, gen = payload
            if self._timers.get((name, key)) != gen:
                return
            self._record("timer", name, name, -1, key)
            self._apply(name, self.nodes[name].on_timer(key, tick), tick)

    def run_until_idle(self, max_ticks: int) -> list[TraceEvent]:
        """Process events with tick < ``max_ticks`` until the queue drains."""
        self.start()
        wall0 = time.monotonic()
        while self._queue and self._queue[0][0] < max_ticks:
            tick, _, kind, payload = heapq.heappop(self._queue)
            if self.realtime:
                lag = wall0 + tick / 1000.0 - time.monotonic()
                if lag > 0:
                    time.sleep(lag)
            self._step(tick, kind, payload)
        return self.trace

    @property
    def idle(self) -> bool:
        return not self._queue


def run_until_idle(
    nodes: dict[str, Node],
    policy: NetworkPolicy | None = None,
    max_ticks: int = 10**12,
    record_trace: bool = True,
) -> list[TraceEvent]:
    return SimNetwork(nodes, policy, record_trace=record_trace).run_until_idle(max_ticks)


# --- TCP -----------------------------------------------------------------


class TcpTransport:
    """Frames over real localhost sockets, one listening socket per node.

    Incoming connections each get a reader task that splits the byte stream
    into frames and feeds complete messages into the owning node's queue.
    Outgoing links are opened lazily and reused, which keeps them FIFO.
    """

    def __init__(self, endpoints: dict[str, Endpoint], keep_wire: bool = False):
        self.endpoints = dict(endpoints)
        self.keep_wire = keep_wire
        self.wire: dict[tuple[str, str], bytearray] = {}
        self.inbox: dict[str, asyncio.Queue] = {}
        self._servers: list[asyncio.base_events.Server] = []
        self._writers: dict[tuple[str, str], asyncio.StreamWriter] = {}
        self._readers: set[asyncio.Task] = set()

    async def start(self) -> None:
        for name, ep in list(self.endpoints.items()):
            self.inbox[name] = asyncio.Queue()
            try:
                server = await asyncio.start_server(
                    lambda r, w, name=name: self._on_connect(name, r, w), ep.address, ep.port
                )
            except OSError as exc:
                await self.close()
                raise BindFailure(f"{name} cannot bind {ep.address}:{ep.port}: {exc}") from exc
            self._servers.append(server)
            port = server.sockets[0].getsockname()[1]
            self.endpoints[name] = Endpoint(name, ep.address, port)

    def _on_connect(self, name: str, reader: asyncio.StreamReader, writer) -> None:
        task = asyncio.ensure_future(self._read_loop(name, reader, writer))
        self._readers.add(task)
        task.add_done_callback(self._readers.discard)

    async def _read_loop(self, name: str, reader: asyncio.StreamReader, writer) -> None:
        # the first message on a connection names the peer; the rest are protocol traffic
        decoder, assembler = StreamDecoder(), MessageAssembler()
        raw = bytearray()
        src = None
        try:
            while True:
                data = await reader.read(65536)
                if not data:
                    break
                raw.extend(data)
                for frame in decoder.feed(data):
                    message = assembler.push(frame)
                    if message is None:
                        continue
                    if src is None:
                        src = _parse_hello(message)
                        if self.keep_wire:
                            self.wire[(src, name)] = raw
                        continue
                    await self.inbox[name].put((src, message))
        finally:
            writer.close()

    async def _writer(self, src: str, dst: str) -> asyncio.StreamWriter:
        link = (src, dst)
        if link not in self._writers:
            if dst not in self.endpoints:
                raise UnknownEndpoint(dst)
            ep = self.endpoints[dst]
            try:
                _, writer = await asyncio.open_connection(ep.address, ep.port)
            except OSError as exc:
                raise ConnectFailure(f"{src} -> {dst} at {ep.address}:{ep.port}: {exc}") from exc
            writer.write(b"".join(encode_message(Message(Direction.REQUEST, HELLO + src.encode("utf-8")))))
            self._writers[link] = writer
        return self._writers[link]

    async def send(self, src: str, dst: str, frames: list[bytes]) -> None:
        if src not in self.endpoints:
            raise UnknownEndpoint(src)
        writer = await self._writer(src, dst)
        writer.write(b"".join(frames))
        await writer.drain()

    async def receive(self, name: str):
        """Next ``(sender, Message)`` for node ``name``."""
        return await self.inbox[name].get()

    async def close(self) -> None:
        for writer in self._writers.values():
            writer.close()
        for writer in self._writers.values():
            try:
                await writer.wait_closed()
            except (ConnectionError, OSError):
                pass
        self._writers.clear()
        for server in self._servers:
            server.close()
            await server.wait_closed()
        self._servers.clear()
        for task in list(self._readers):
            task.cancel()
        await asyncio.gather(*self._readers, return_exceptions=True)


def _parse_hello(message: Message) -> str:
    if not message.body.startswith(HELLO):
        raise HarnessError("connection did not open with a hello message")
    return message.body[len(HELLO):].decode("utf-8")


def wall_clock_ms() -> int:
    return int(time.time() * 1000)


class TcpRunner:
    """Drive nodes over :class:`TcpTransport`; each node is one asyncio task."""

    def __init__(self, nodes: dict[str, Node], endpoints: dict[str, Endpoint] | None = None,
                 base_port: int = DEFAULT_BASE_PORT, keep_wire: bool = False):
        self.nodes = nodes
        self.transport = TcpTransport(endpoints or allocate_endpoints(nodes, base_port=base_port),
                                      keep_wire=keep_wire)
        self.trace: list[TraceEvent] = []
        self._timers: dict[str, dict[str, int]] = {n: {} for n in nodes}
        self._wake: dict[str, asyncio.Event] = {}

    def _record(self, kind, src, dst, cycle, detail) -> None:
        self.trace.append(TraceEvent(wall_clock_ms(), kind, src, dst, cycle, detail))

    async def _apply(self, name: str, actions) -> None:
        for action in actions:
            if isinstance(action, Send):
                msg = action.message
                self._record("send", name, action.to, msg.cycle, msg.kind.value)
                await self.transport.send(name, action.to, wire_frames(msg))
            elif isinstance(action, SetTimer):
                self._timers[name][action.key] = action.at
            elif isinstance(action, CancelTimer):
                self._timers[name].pop(action.key, None)
            elif isinstance(action, Note):
                self._record(action.kind, name, name, action.cycle, action.detail)

    async def _node_loop(self, name: str) -> None:
        node = self.nodes[name]
        await self._apply(name, node.on_start(wall_clock_ms()))
        while True:
            timers = self._timers[name]
            timeout = None
            if timers:
                key, due = min(timers.items(), key=lambda kv: kv[1])
                timeout = max(0.0, (due - wall_clock_ms()) / 1000.0)
            try:
                src, message = await asyncio.wait_for(self.transport.receive(name), timeout)
            except asyncio.TimeoutError:
                if self._timers[name].get(key) == due:
                    del self._timers[name][key]
                    self._record("timer", name, name, -1, key)
                    await self._apply(name, node.on_timer(key, wall_clock_ms()))
                continue
            msg = ProtocolMessage.from_message(message)
            self._record("deliver", src, name, msg.cycle, msg.kind.value)
            await self._apply(name, node.on_message(msg, wall_clock_ms()))

    async def run_async(self, done, timeout_s: float = 30.0) -> list[TraceEvent]:
        await self.transport.start()
        tasks = [asyncio.ensure_future(self._node_loop(n)) for n in self.nodes]
        deadline = time.monotonic() + timeout_s
        try:
            while not done():
                for t in tasks:
                    if t.done() and t.exception():
                        raise t.exception()
                if time.monotonic() > deadline:
                    raise HarnessError(f"TCP run did not finish within {timeout_s} s")
                await asyncio.sleep(0.002)
        finally:
            for t in tasks:
                t.cancel()
            await asyncio.gather(*tasks, return_exceptions=True)
            await self.transport.close()
        return self.trace

    def run(self, done, timeout_s: float = 30.0) -> list[TraceEvent]:
        return asyncio.run(self.run_async(done, timeout_s))


def tcp_transport(endpoints: dict[str, Endpoint], keep_wire: bool = False) -> TcpTransport:
    return TcpTransport(endpoints, keep_wire=keep_wire)
