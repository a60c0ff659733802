"""Simulated measurement node.

A node reads its (simulated) sensors and either answers collector polls
over UDP (pull mode) or pushes line-protocol points straight to the write
endpoint (push mode). A watchdog resets the node when no poll has been
seen for the configured timeout. One agent is one logical event loop;
several agents can share a process without sharing state.
"""

from __future__ import annotations

import logging
import math
import random
import re
import socket
import threading
import time
import urllib.error
import urllib.request
import zlib
from collections import deque
from dataclasses import dataclass, field

from .clock import Clock, SystemClock
from .errors import StorageUnavailable, UnknownCouplingSource, ValidationError
from .wire import (
    NodePayload,
    SEQUENCE_MODULUS,
    encode_line,
    encode_node_payload,
    payload_to_points,
)

logger = logging.getLogger(__name__)

POLL_RE = re.compile(rb"POLL (\d+)\Z")
UNITS = ("degC", "mbar", "mW", "mT", "dimensionless")
SENSOR_KINDS = ("constant", "drift", "sine", "random-walk", "ar1", "coupled")

PUSH_QUEUE_LIMIT = 10_000
BACKOFF_BASE_S = 1.0
BACKOFF_CAP_S = 60.0
DEFAULT_WATCHDOG_TIMEOUT_S = 60.0  # three missed polls at the 20 s cadence


def watchdog_tick(last_contact_ns: int, now_ns: int, timeout_s: float) -> str:
    """Pure reset decision: reset once the silence reaches the timeout.

    The boundary is inclusive (elapsed == timeout resets): fail-safe bias.
    """
    if now_ns < last_contact_ns:
        raise ValidationError("now precedes last contact")
    return "reset" if now_ns - last_contact_ns >= timeout_s * 1e9 else "none"


@dataclass(frozen=True)
class SensorModel:
    """Phenomenological signal generator standing in for real hardware.

    kinds: constant, drift (base + rate*t), sine (base + amplitude*sin),
    random-walk (integrated noise), ar1 (first-order autoregressive,
    stationary colored noise), coupled (gain * scenario signal + offset).
    Gaussian noise of noise_std is added on top of every kind.
    """

    kind: str = "constant"
    base: float = 0.0
    unit: str = "dimensionless"
    noise_std: float = 0.0
    drift_per_hour: float = 0.0
    amplitude: float = 0.0
    period_s: float = 86400.0
    phi: float = 0.9  # ar1 memory
    source: str = ""  # coupled: scenario signal name
    gain: float = 1.0

    def __post_init__(self):
        if self.kind not in SENSOR_KINDS:
            raise ValidationError(f"unknown sensor kind {self.kind!r}")
        if self.noise_std < 0:
            raise ValidationError("noise_std must be >= 0")
        if self.kind == "sine" and self.period_s <= 0:
            raise ValidationError("sine needs period_s > 0")
        if self.kind == "ar1" and not 0 <= self.phi < 1:
            raise ValidationError("ar1 needs 0 <= phi < 1")
        if self.kind == "coupled" and not self.source:
            raise ValidationError("coupled sensor needs a source signal")

    @property
    def nominal(self) -> float:
        """Long-run mean of the generator, used as the coupling reference."""
        return self.base


class SensorInstance:
    """Stateful evaluator for one sensor binding; deterministic per seed."""

    def __init__(self, model: SensorModel, seed: int, t0_ns: int = 0):
        self.model = model
        self._rng = random.Random(seed)
        self._walk = 0.0
        self._ar = 0.0
        self._t0_ns = t0_ns

    def value(self, sim_time_ns: int, environment=None) -> float:
        m = self.model
        t_s = (sim_time_ns - self._t0_ns) / 1e9
        if m.kind == "constant":
            base = m.base
        elif m.kind == "drift":
            base = m.base + m.drift_per_hour * (t_s / 3600.0)
        elif m.kind == "sine":
            base = m.base + m.amplitude * math.sin(2.0 * math.pi * t_s / m.period_s)
        elif m.kind == "random-walk":
            self._walk += self._rng.gauss(0.0, m.noise_std)
            return m.base + self._walk
        elif m.kind == "ar1":
            # innovation scaled so the stationary std equals noise_std
            innov = m.noise_std * math.sqrt(1.0 - m.phi**2)
            self._ar = m.phi * self._ar + self._rng.gauss(0.0, innov)
            return m.base + self._ar
        else:  # coupled
            if environment is None:
                raise UnknownCouplingSource(m.source)
            try:
                src = environment.value(m.source, sim_time_ns)
            except KeyError:
                raise UnknownCouplingSource(m.source) from None
            base = m.base + m.gain * src
        if m.noise_std > 0:
            base += self._rng.gauss(0.0, m.noise_std)
        return base


@dataclass(frozen=True)
class SensorBinding:
    measurement: str
    field_key: str
    model: SensorModel

    @property
    def unit(self) -> str:
        return self.model.unit


@dataclass
class NodeConfig:
    room_id: str
    device_id: str
    mode: str = "pull"  # pull | push
    listen_host: str = "127.0.0.1"
    listen_port: int = 0
    sensors: list[SensorBinding] = field(default_factory=list)
    watchdog_timeout_s: float = DEFAULT_WATCHDOG_TIMEOUT_S
    push_url: str = ""
    push_interval_s: float = 20.0
    seed: int = 0

    def validate(self):
        NodePayload(self.room_id, self.device_id, 0)  # identifier check
        if self.mode not in ("pull", "push"):
            raise ValidationError(f"mode must be pull or push, got {self.mode!r}")
        if self.mode == "push":
            if not self.push_url:
                raise ValidationError("push mode needs push_url")
            if self.push_interval_s <= 0:
                raise ValidationError("push_interval_s must be positive")
        if self.watchdog_timeout_s <= 0:
            raise ValidationError("watchdog_timeout_s must be positive")
        seen = set()
        for binding in self.sensors:
            pair = (binding.measurement, binding.field_key)
            if pair in seen:
                raise ValidationError(f"duplicate sensor binding {pair}")
            seen.add(pair)


def load_node_config(path: str) -> NodeConfig:
    """Flat key-value config; see docs/formats.md for the key list."""
    cfg = NodeConfig(room_id="", device_id="")
    with open(path, encoding="utf-8") as fh:
        for lineno, raw in enumerate(fh, start=1):
            line = raw.strip()
            if not line or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            rest = rest.strip()
            if key == "room_id":
                cfg.room_id = rest
            elif key == "device_id":
                cfg.device_id = rest
            elif key == "mode":
                cfg.mode = rest
            elif key == "listen":
                host, _, port = rest.rpartition(":")
                cfg.listen_host, cfg.listen_port = host, int(port)
            elif key == "watchdog_timeout_s":
                cfg.watchdog_timeout_s = float(rest)
            elif key == "push_url":
                cfg.push_url = rest
            elif key == "push_interval_s":
                cfg.push_interval_s = float(rest)
            elif key == "seed":
                cfg.seed = int(rest)
            elif key == "sensor":
                cfg.sensors.append(_parse_sensor_line(rest, lineno))
            else:
                raise ValidationError(f"line {lineno}: unknown config key {key!r}")
    cfg.validate()
    return cfg


def _parse_sensor_line(rest: str, lineno: int) -> SensorBinding:
    # sensor <measurement> <field> <kind> key=value...
    parts = rest.split()
    if len(parts) < 3:
        raise ValidationError(f"line {lineno}: sensor needs measurement, field, kind")
    meas, fkey, kind = parts[:3]
    params: dict[str, object] = {"kind": kind}
    numeric = {
        "base", "noise_std", "drift_per_hour", "amplitude", "period_s", "phi", "gain",
    }
    for item in parts[3:]:
        pkey, _, pval = item.partition("=")
        if pkey in numeric:
            params[pkey] = float(pval)
        elif pkey in ("unit", "source"):
            params[pkey] = pval
        else:
            raise ValidationError(f"line {lineno}: unknown sensor parameter {pkey!r}")
    return SensorBinding(meas, fkey, SensorModel(**params))


class PushQueue:
    """Bounded FIFO of points awaiting delivery; overflow drops the oldest."""

    def __init__(self, limit: int = PUSH_QUEUE_LIMIT):
        self._items: deque = deque()
        self.limit = limit
        self.dropped = 0

    def extend(self, points):
        for point in points:
            if len(self._items) >= self.limit:
                self._items.popleft()
                self.dropped += 1
            self._items.append(point)

    def __len__(self):
        return len(self._items)

    def drain(self) -> list:
        items = list(self._items)
        self._items.clear()
        return items

    def requeue_front(self, points):
        for point in reversed(points):
            self._items.appendleft(point)
        while len(self._items) > self.limit:
            self._items.popleft()
            self.dropped += 1


class HttpWriteClient:
    """POSTs line-protocol batches to the write endpoint."""

    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url.rstrip("/")
        self.timeout = timeout

    def write_lines(self, body: str):
        req = urllib.request.Request(
            f"{self.url}/write",
            data=body.encode("utf-8"),
            headers={"Content-Type": "text/plain; charset=utf-8"},
            method="POST",
        )
        try:
            with urllib.request.urlopen(req, timeout=self.timeout) as resp:
                if resp.status >= 300:
                    raise StorageUnavailable(f"write endpoint status {resp.status}")
        except (urllib.error.URLError, OSError, TimeoutError) as exc:
            raise StorageUnavailable(str(exc)) from None


class NodeAgent:
    """One measurement node: poll answering, pushing, watchdog."""

    def __init__(
        self,
        config: NodeConfig,
        clock: Clock | None = None,
        environment=None,
        write_client=None,
    ):
        config.validate()
        self.config = config
        self.clock = clock or SystemClock()
        self.environment = environment
        self.write_client = write_client or (
            HttpWriteClient(config.push_url) if config.push_url else None
        )
        self.sequence = 0
        self.malformed_count = 0
        self.reset_count = 0
        self.drop_probability = 0.0  # fault-injection hook
        self.frozen = False  # fault-injection hook: ignore polls entirely
        self.queue = PushQueue()
        self.last_contact_ns = self.clock.now_ns()
        self._drop_rng = random.Random(config.seed ^ 0x5EED)
        self._sensors = self._build_sensors()
        self._backoff_s = 0.0
        self._next_push_attempt_ns = 0
        self._sock: socket.socket | None = None
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    def _build_sensors(self) -> list[tuple[SensorBinding, SensorInstance]]:
        out = []
        for i, binding in enumerate(self.config.sensors):
            # crc32, not hash(): reproducible across processes
            tag = (
                f"{self.config.seed}:{self.config.room_id}:{self.config.device_id}"
                f":{binding.measurement}:{binding.field_key}:{i}"
            )
            seed = zlib.crc32(tag.encode("utf-8"))
            out.append((binding, SensorInstance(binding.model, seed)))
        return out

    # -- sampling --------------------------------------------------------

    def sample_sensors(self, sim_time_ns: int) -> NodePayload:
        """One reading per binding; the sequence advances by exactly one."""
        readings = tuple(
            (binding.measurement, binding.field_key,
             instance.value(sim_time_ns, self.environment))
            for binding, instance in self._sensors
        )
        payload = NodePayload(
            self.config.room_id, self.config.device_id, self.sequence, readings
        )
        self.sequence = (self.sequence + 1) % SEQUENCE_MODULUS
        return payload

    # -- pull mode --------------------------------------------------------

    def handle_poll(self, data: bytes, now_ns: int | None = None) -> bytes | None:
        """Answer one poll datagram; malformed input is silently dropped."""
        now = self.clock.now_ns() if now_ns is None else int(now_ns)
        if self.frozen:
            return None
        if self.drop_probability > 0 and self._drop_rng.random() < self.drop_probability:
            return None
        m = POLL_RE.fullmatch(data)
        if not m:
            self.malformed_count += 1
            return None
        self.last_contact_ns = now
        payload = self.sample_sensors(now)
        return b"ACK " + m.group(1) + b" " + encode_node_payload(payload)

    def watchdog_check(self, now_ns: int | None = None) -> bool:
        now = self.clock.now_ns() if now_ns is None else int(now_ns)
        if watchdog_tick(self.last_contact_ns, now, self.config.watchdog_timeout_s) == "reset":
            self.reset(now)
            return True
        return False

    def reset(self, now_ns: int):
        """Watchdog action: reopen the socket, zero the sequence."""
        self.sequence = 0
        self.last_contact_ns = now_ns
        self.reset_count += 1
        if self._sock is not None:
            try:
                self._sock.close()
            except OSError:
                pass
            self._sock = self._open_socket()
        logger.info(
            "node %s/%s watchdog reset #%d",
            self.config.room_id, self.config.device_id, self.reset_count,
        )

    # -- push mode ---------------------------------------------------------

    def push_cycle(self, now_ns: int | None = None) -> int:
        """Sample, enqueue, and try to deliver. Returns points delivered."""
        now = self.clock.now_ns() if now_ns is None else int(now_ns)
        payload = self.sample_sensors(now)
        self.queue.extend(payload_to_points(payload, now))
        return self.flush_queue(now)

    def flush_queue(self, now_ns: int) -> int:
        """Deliver everything queued, honoring the retry backoff window."""
        if len(self.queue) == 0 or self.write_client is None:
            return 0
        if now_ns < self._next_push_attempt_ns:
            return 0
        points = self.queue.drain()
        body = "\n".join(encode_line(p) for p in points)
        try:
            self.write_client.write_lines(body)
        except StorageUnavailable as exc:
            self.queue.requeue_front(points)
            self._backoff_s = min(
                BACKOFF_CAP_S, self._backoff_s * 2 if self._backoff_s else BACKOFF_BASE_S
            )
            self._next_push_attempt_ns = now_ns + int(self._backoff_s * 1e9)
            logger.warning(
                "push failed (%s); retrying in %.0f s with %d queued",
                exc, self._backoff_s, len(self.queue),
            )
            return 0
        self._backoff_s = 0.0
        self._next_push_attempt_ns = 0
        return len(points)

    # -- event loop ----------------------------------------------------------

    def _open_socket(self) -> socket.socket:
        sock = socket.socket(socket.AF_INET, socket.SOCK_DGRAM)
        sock.setsockopt(socket.SOL_SOCKET, socket.SO_REUSEADDR, 1)
        sock.bind((self.config.listen_host, self.config.listen_port))
        if self.config.listen_port == 0:
            self.config.listen_port = sock.getsockname()[1]
        sock.settimeout(0.05)
        return sock

    @property
    def address(self) -> tuple[str, int]:
        return (self.config.listen_host, self.config.listen_port)

    def run(self):
        if self.config.mode == "pull" and self._sock is None:
            self._sock = self._open_socket()
        next_push_ns = self.clock.now_ns()
        while not self._stop.is_set():
            if self.config.mode == "pull":
                try:
                    data, addr = self._sock.recvfrom(2048)
                except socket.timeout:
                    data = None
                except OSError:
                    # watchdog reset swapped the socket from under us
                    if self._stop.is_set():
                        break
                    data = None
                if data is not None:
                    response = self.handle_poll(data)
                    if response is not None:
                        try:
                            self._sock.sendto(response, addr)
                        except OSError:
                            pass
                self.watchdog_check()
            else:
                now = self.clock.now_ns()
                if now >= next_push_ns:
                    try:
                        self.push_cycle(now)
                    except Exception:
                        logger.exception("push cycle failed")
                    next_push_ns += int(self.config.push_interval_s * 1e9)
                time.sleep(self.clock.wall_seconds(0.05))
        if self._sock is not None:
            self._sock.close()
            self._sock = None

    def start(self):
        if self.config.mode == "pull" and self._sock is None:
            self._sock = self._open_socket()  # bind before returning: port is known
        self._thread = threading.Thread(
            target=self.run, daemon=True,
            name=f"node-{self.config.room_id}-{self.config.device_id}",
        )
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)
