"""Central polling collector.

Each cycle the collector sends one `POLL <token>` datagram to every due
node, gathers responses on a single socket until the per-node timeout,
stamps arrival times, and forwards decoded points to the storage sink.
Fan-out is parallel on the wire while all registry mutation happens
serially after the gather, keeping the accounting deterministic:

    polls_sent - responses_received == timeouts + parse_failures

Sequence gaps (node resets, lost responses) are recorded per node, and a
(node, sequence) pair is forwarded at most once.
"""

from __future__ import annotations

import logging
import re
import socket
import threading
import time
from collections import deque
from dataclasses import dataclass, field

from .clock import Clock, SystemClock
from .errors import ParseError, StorageUnavailable, ValidationError
from .storage import Store
from .wire import DataPoint, SEQUENCE_MODULUS, decode_node_payload, payload_to_points

logger = logging.getLogger(__name__)

DEFAULT_INTERVAL_S = 20.0
RESPONSE_TIMEOUT_CAP_S = 5.0
FORWARD_QUEUE_LIMIT = 10_000

_STALE_ACK = re.compile(rb"ACK \d+ ")


@dataclass
class NodeRegistryEntry:
    room_id: str
    device_id: str
    host: str
    port: int
    interval_s: float = DEFAULT_INTERVAL_S
    last_sequence: int | None = None
    polls_sent: int = 0
    responses_received: int = 0
    parse_failures: int = 0
    timeouts: int = 0
    gaps_detected: int = 0
    next_poll_ns: int = 0
    # (ts_ns, outcome) with outcome in {ok, timeout, parse_failure}
    events: deque = field(default_factory=deque)
    # (ts_ns, first_missing, last_missing)
    gaps: list = field(default_factory=list)

    @property
    def name(self) -> str:
        return f"{self.room_id}/{self.device_id}"

    @property
    def address(self) -> tuple[str, int]:
        return (self.host, self.port)


def load_registry(path: str) -> list[NodeRegistryEntry]:
    """One node per line: `room device host:port interval_s`."""
    entries = []
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 4:
                raise ValidationError(
                    f"line {lineno}: expected `room device host:port interval_s`"
                )
            room, device, addr, interval = parts
            host, _, port = addr.rpartition(":")
            entries.append(NodeRegistryEntry(
                room, device, host, int(port), float(interval)
            ))
    return entries


@dataclass
class DeliveryReport:
    start_ns: int
    end_ns: int
    per_node: dict[str, float | None]
    aggregate: float | None
    gaps: dict[str, list[tuple[int, int]]]


class EngineSink:
    """Writes straight into an in-process store."""

    def __init__(self, store: Store):
        self.store = store

    def write_points(self, points: list[DataPoint]):
        try:
            self.store.write(points)
        except Exception as exc:
            raise StorageUnavailable(str(exc)) from None


class HttpSink:
    """Writes through the HTTP API, for a collector deployed standalone."""

    def __init__(self, url: str, timeout: float = 5.0):
        from .node import HttpWriteClient
        from .wire import encode_line

        self._client = HttpWriteClient(url, timeout)
        self._encode = encode_line

    def write_points(self, points: list[DataPoint]):
        if points:
            self._client.write_lines("\n".join(self._encode(p) for p in points))


class Collector:
    def __init__(
        self,
        registry: list[NodeRegistryEntry],
        sink,
        clock: Clock | None = None,
        response_timeout_s: float | None = None,
    ):
        self.registry = list(registry)
        self.sink = sink
        self.clock = clock or SystemClock()
        self.response_timeout_s = response_timeout_s
        self.healthy = True
        self.forward_queue: deque = deque()
        self.forward_drops = 0
        self._token = 0
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # ------------------------------------------------------------------

    def _timeout_for(self, entry: NodeRegistryEntry) -> float:
        if self.response_timeout_s is not None:
            return self.response_timeout_s
        return min(entry.interval_s / 2.0, RESPONSE_TIMEOUT_CAP_S)

    def _socket(self) -> socket.socket:
        if self._sock is None:
            self._sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
            self._sock.bind(("127.0.0.1", 0))
        return self._sock

    def poll_cycle(self, now_ns: int | None = None) -> list[DataPoint]:
        """Poll every due node once; returns the stamped, decoded points."""
        now = self.clock.now_ns() if now_ns is None else int(now_ns)
        due = [e for e in self.registry if e.next_poll_ns <= now]
        if not due:
            return []
        sock = self._socket()
        outstanding: dict[tuple[str, int], tuple[NodeRegistryEntry, int]] = {}
        for entry in due:
            self._token += 1
            try:
                sock.sendto(f"POLL {self._token}".encode(), entry.address)
            except OSError as exc:
                logger.warning("poll send to %s failed: %s", entry.name, exc)
            entry.polls_sent += 1
            entry.next_poll_ns = now + int(entry.interval_s * 1e9)
            outstanding[entry.address] = (entry, self._token)

        # gather until every node answered or its (wall) deadline passed
        wall_timeout = max(self.clock.wall_seconds(self._timeout_for(e)) for e in due)
        deadline = time.monotonic() + wall_timeout
        replies: dict[tuple[str, int], tuple[bytes, int]] = {}
        while len(replies) < len(outstanding):
            remaining = deadline - time.monotonic()
            if remaining <= 0:
                break
            sock.settimeout(remaining)
            try:
                data, addr = sock.recvfrom(4096)
            except socket.timeout:
                break
            except OSError:
                break
            if addr not in outstanding or addr in replies:
                continue
            token = outstanding[addr][1]
            if not data.startswith(b"ACK %d " % token) and _STALE_ACK.match(data):
                continue  # late reply to an earlier poll: keep waiting
            replies[addr] = (data, self.clock.now_ns())

        batch: list[DataPoint] = []
        for addr, (entry, token) in outstanding.items():
            reply = replies.get(addr)
            if reply is None:
                entry.timeouts += 1
                entry.events.append((now, "timeout"))
                continue
            data, received_ns = reply
            payload = self._parse_reply(entry, token, data)
            if payload is None:
                entry.parse_failures += 1
                entry.events.append((now, "parse_failure"))
                continue
            entry.responses_received += 1
            entry.events.append((now, "ok"))
            if self._note_sequence(entry, payload.sequence, now):
                batch.extend(payload_to_points(payload, received_ns))
        self.forward(batch)
        return batch

    @staticmethod
    def _parse_reply(entry, token, data: bytes):
        prefix = b"ACK %d " % token
        if not data.startswith(prefix):
            logger.debug("%s: bad ack framing", entry.name)
            return None
        try:
            return decode_node_payload(data[len(prefix):])
        except ParseError as exc:
            logger.debug("%s: %s", entry.name, exc)
            return None

    @staticmethod
    def _note_sequence(entry: NodeRegistryEntry, seq: int, now_ns: int) -> bool:
        """Update gap accounting; False means duplicate (do not forward).

        seq == last is the only duplicate case (token matching already
        filters same-cycle and stale replies); a backward jump is a node
        reset and its data is new, so it is forwarded with a gap record.
        """
        last = entry.last_sequence
        if last is not None:
            if seq == last:
                return False
            expected = (last + 1) % SEQUENCE_MODULUS
            if seq != expected:
                entry.gaps_detected += 1
                if seq > expected:
                    entry.gaps.append((now_ns, expected, seq - 1))
                else:
                    # counter went backwards: node reset, surfaced as a gap
                    entry.gaps.append((now_ns, expected, expected))
        entry.last_sequence = seq
        return True

    # ------------------------------------------------------------------

    def forward(self, batch: list[DataPoint]):
        """All-or-none handoff to storage; failures queue for retry."""
        queued = list(self.forward_queue)
        pending = queued + list(batch)
        if not pending:
            return
        try:
            self.sink.write_points(pending)
        except StorageUnavailable as exc:
            self.forward_queue.clear()
            self.forward_queue.extend(pending[-FORWARD_QUEUE_LIMIT:])
            self.forward_drops += max(0, len(pending) - FORWARD_QUEUE_LIMIT)
            self.healthy = False
            logger.warning("storage unavailable (%s); %d points queued",
                           exc, len(self.forward_queue))
            return
        self.forward_queue.clear()
        self.healthy = True

    # ------------------------------------------------------------------

    def delivery_efficiency(
        self, start_ns: int, end_ns: int
    ) -> DeliveryReport:
        """responses/polls per node over the window; absent when no polls."""
        if start_ns >= end_ns:
            raise ValidationError("window must satisfy start < end")
        per_node: dict[str, float | None] = {}
        gaps: dict[str, list[tuple[int, int]]] = {}
        total_polls = 0
        total_ok = 0
        for entry in self.registry:
            polls = ok = 0
            for ts, outcome in entry.events:
                if start_ns <= ts < end_ns:
                    polls += 1
                    if outcome == "ok":
                        ok += 1
            per_node[entry.name] = (ok / polls) if polls else None
            node_gaps = [(a, b) for ts, a, b in entry.gaps if start_ns <= ts < end_ns]
            if node_gaps:
                gaps[entry.name] = node_gaps
            total_polls += polls
            total_ok += ok
        aggregate = (total_ok / total_polls) if total_polls else None
        return DeliveryReport(start_ns, end_ns, per_node, aggregate, gaps)

    def efficiency_snapshot(self) -> dict[str, float | None]:
        """Lifetime per-node efficiency, for the health endpoint."""
        out = {}
        for entry in self.registry:
            out[entry.name] = (
                entry.responses_received / entry.polls_sent
                if entry.polls_sent else None
            )
        return out

    # ------------------------------------------------------------------

    def run(self):
        """Cycle scheduler: keeps the configured cadence, free-runs if behind."""
        interval = min((e.interval_s for e in self.registry), default=DEFAULT_INTERVAL_S)
        next_wall = time.monotonic()
        while not self._stop.is_set():
            self.poll_cycle()
            next_wall += self.clock.wall_seconds(interval)
            delay = next_wall - time.monotonic()
            if delay > 0:
                self._stop.wait(delay)
            else:
                next_wall = time.monotonic()

    def start(self):
        self._thread = threading.Thread(target=self.run, daemon=True, name="collector")
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
        if self._sock is not None:
            self._sock.close()
            self._sock = None
