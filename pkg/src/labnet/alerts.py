"""Rule evaluation: static thresholds, rate-of-change, and the seed-power
amplifier interlock, plus notification dispatch.

Per rule the engine keeps a firing flag; the event stream it produces
always alternates firing -> resolved. Rate rules use a least-squares
slope over the lookback window rather than a two-point difference, which
is robust against sampling noise at the 20 s cadence. Interlock rules are
a pure two-state machine (armed/tripped) with hysteresis and optional
latching; trip commands are published on a command bus that the simulated
laser chain consumes in place of real hardware I/O.
"""

from __future__ import annotations

import json
import logging
import math
import operator
import threading
import time
import urllib.request
from dataclasses import dataclass, field

import numpy as np

from .errors import ValidationError
from .storage import SeriesFrame, SeriesQuery, Store

logger = logging.getLogger(__name__)

COMPARATORS = {
    ">": operator.gt,
    "<": operator.lt,
    ">=": operator.ge,
    "<=": operator.le,
}

AMPLIFIER_OFF = "amplifier_off"
AMPLIFIER_ON = "amplifier_on"


@dataclass
class AlertRule:
    """Declarative rule. kind selects which parameter block applies."""

    id: str
    measurement: str
    field: str
    tags: dict[str, str] = field(default_factory=dict)
    kind: str = "threshold"  # threshold | rate | interlock
    comparator: str = ">"
    limit: float = 0.0
    unit: str = ""
    max_rate_per_min: float = 0.0
    lookback_s: float = 600.0
    min_value: float = 0.0
    max_value: float = 0.0
    margin: float | None = None  # None: 5% of the allowed range
    latching: bool = True
    period_s: float = 20.0
    sink: str = "console"
    target: str = ""  # interlock command routing; defaults to RoomID tag

    def validate(self):
        if not self.id:
            raise ValidationError("rule needs an id")
        if not self.measurement or not self.field:
            raise ValidationError("rule needs a measurement and field")
        if self.period_s <= 0:
            raise ValidationError("evaluation period must be positive")
        if self.kind == "threshold":
            if self.comparator not in COMPARATORS:
                raise ValidationError(f"unknown comparator {self.comparator!r}")
            if not math.isfinite(self.limit):
                raise ValidationError("threshold limit must be finite")
        elif self.kind == "rate":
            if self.max_rate_per_min <= 0:
                raise ValidationError("rate limit must be positive")
            if self.lookback_s < 2 * self.period_s:
                raise ValidationError("lookback must cover >= 2 evaluation periods")
        elif self.kind == "interlock":
            if not self.min_value < self.max_value:
                raise ValidationError("interlock needs min < max")
            if self.margin is not None and self.margin < 0:
                raise ValidationError("margin must be >= 0")
        else:
            raise ValidationError(f"unknown rule kind {self.kind!r}")

    @property
    def effective_margin(self) -> float:
        if self.margin is not None:
            return self.margin
        return 0.05 * (self.max_value - self.min_value)

    @property
    def command_target(self) -> str:
        return self.target or self.tags.get("RoomID", self.id)

    def to_doc(self) -> dict:
        doc = {
            "id": self.id,
            "measurement": self.measurement,
            "field": self.field,
            "tags": dict(self.tags),
            "kind": self.kind,
            "period_s": self.period_s,
            "sink": self.sink,
        }
        if self.kind == "threshold":
            doc |= {"comparator": self.comparator, "limit": self.limit, "unit": self.unit}
        elif self.kind == "rate":
            doc |= {"max_rate_per_min": self.max_rate_per_min, "lookback_s": self.lookback_s}
        else:
            doc |= {
                "min": self.min_value,
                "max": self.max_value,
                "margin": self.margin,
                "latching": self.latching,
                "target": self.target,
            }
        return doc

    @staticmethod
    def from_doc(doc: dict) -> "AlertRule":
        known = {
            "id", "measurement", "field", "tags", "kind", "comparator", "limit",
            "unit", "max_rate_per_min", "lookback_s", "min", "max", "margin",
            "latching", "period_s", "sink", "target",
        }
        unknown = set(doc) - known
        if unknown:
            raise ValidationError(f"unknown rule keys: {sorted(unknown)}")
        rule = AlertRule(
            id=str(doc["id"]),
            measurement=str(doc["measurement"]),
            field=str(doc["field"]),
            tags={str(k): str(v) for k, v in doc.get("tags", {}).items()},
            kind=doc.get("kind", "threshold"),
            comparator=doc.get("comparator", ">"),
            limit=float(doc.get("limit", 0.0)),
            unit=str(doc.get("unit", "")),
            max_rate_per_min=float(doc.get("max_rate_per_min", 0.0)),
            lookback_s=float(doc.get("lookback_s", 600.0)),
            min_value=float(doc.get("min", 0.0)),
            max_value=float(doc.get("max", 0.0)),
            margin=None if doc.get("margin") is None else float(doc["margin"]),
            latching=bool(doc.get("latching", True)),
            period_s=float(doc.get("period_s", 20.0)),
            sink=str(doc.get("sink", "console")),
            target=str(doc.get("target", "")),
        )
        rule.validate()
        return rule


@dataclass(frozen=True)
class AlertEvent:
    rule_id: str
    ts_ns: int
    value: float
    state: str  # firing | resolved
    message: str


@dataclass(frozen=True)
class InterlockState:
    state: str = "armed"  # armed | tripped
    since_ns: int = 0
    cause: str | None = None  # below-min | above-max


def evaluate_threshold(
    rule: AlertRule, frame: SeriesFrame, firing: bool
) -> tuple[list[AlertEvent], bool]:
    """Walk samples in order; emit on each armed->firing / firing->armed edge."""
    cmp = COMPARATORS[rule.comparator]
    events: list[AlertEvent] = []
    for ts, val in zip(frame.timestamps, frame.values):
        violating = cmp(val, rule.limit)
        if violating and not firing:
            firing = True
            events.append(AlertEvent(
                rule.id, ts, val, "firing",
                f"{rule.measurement}.{rule.field} {val!r} {rule.comparator} {rule.limit!r}",
            ))
        elif not violating and firing:
            firing = False
            events.append(AlertEvent(
                rule.id, ts, val, "resolved",
                f"{rule.measurement}.{rule.field} back in range at {val!r}",
            ))
    return events, firing


def least_squares_slope(ts_ns, values) -> float:
    """Slope in value units per minute via an ordinary least-squares fit."""
    t = (np.asarray(ts_ns, dtype=np.float64) - ts_ns[0]) / 60e9
    v = np.asarray(values, dtype=np.float64)
    dt = t - t.mean()
    denom = float(dt @ dt)
    if denom == 0.0:
        return 0.0
    return float(dt @ (v - v.mean())) / denom


def evaluate_rate(
    rule: AlertRule, frame: SeriesFrame, firing: bool
) -> tuple[list[AlertEvent], bool]:
    """One slope per evaluation over the lookback window; same alternation."""
    events: list[AlertEvent] = []
    slope = least_squares_slope(frame.timestamps, frame.values)
    ts = frame.timestamps[-1]
    violating = abs(slope) > rule.max_rate_per_min
    if violating and not firing:
        firing = True
        events.append(AlertEvent(
            rule.id, ts, slope, "firing",
            f"{rule.measurement}.{rule.field} changing at {slope:.4g}/min "
            f"(limit {rule.max_rate_per_min:.4g}/min)",
        ))
    elif not violating and firing:
        firing = False
        events.append(AlertEvent(
            rule.id, ts, slope, "resolved",
            f"{rule.measurement}.{rule.field} rate back to {slope:.4g}/min",
        ))
    return events, firing


def interlock_step(
    state: InterlockState, rule: AlertRule, value: float, ts_ns: int
) -> tuple[InterlockState, str | None]:
    """Pure transition of the seed-power interlock for one sample.

    armed + out-of-range trips and cuts the amplifier; a non-latching
    tripped state re-arms only once the value is inside the guard band
    [min+margin, max-margin]. Latching states hold until a manual reset.
    """
    margin = rule.effective_margin
    if state.state == "armed":
        if value < rule.min_value:
            return InterlockState("tripped", ts_ns, "below-min"), AMPLIFIER_OFF
        if value > rule.max_value:
            return InterlockState("tripped", ts_ns, "above-max"), AMPLIFIER_OFF
        return state, None
    # tripped
    if rule.latching:
        return state, None
    if rule.min_value + margin <= value <= rule.max_value - margin:
        return InterlockState("armed", ts_ns, None), AMPLIFIER_ON
    return state, None


# ----------------------------------------------------------------------
# notification sinks


@dataclass
class DeliveryRecord:
    rule_id: str
    event_ts_ns: int
    sink: str
    attempts: int
    ok: bool


class ConsoleSink:
    def send(self, payload: dict):
        print(f"[alert] {payload['message']}")


class LogFileSink:
    def __init__(self, path: str):
        self.path = path

    def send(self, payload: dict):
        stamp = _rfc3339(payload["ts_ns"])
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{stamp} {payload['rule_id']} {payload['state']} {payload['message']}\n")


class WebhookSink:
    def __init__(self, url: str, timeout: float = 5.0):
        self.url = url
        self.timeout = timeout

    def send(self, payload: dict):
        req = urllib.request.Request(
            self.url,
            data=json.dumps(payload).encode("utf-8"),
            headers={"Content-Type": "application/json"},
            method="POST",
        )
        with urllib.request.urlopen(req, timeout=self.timeout) as resp:
            if resp.status >= 300:
                raise OSError(f"webhook status {resp.status}")


def _rfc3339(ts_ns: int) -> str:
    from datetime import datetime, timezone

    dt = datetime.fromtimestamp(ts_ns / 1e9, tz=timezone.utc)
    return dt.strftime("%Y-%m-%dT%H:%M:%S.%f") + "Z"


class Notifier:
    """At-least-once delivery with backoff and duplicate suppression.

    The suppression key is (rule id, event timestamp); a re-observed event
    is acknowledged without a second delivery.
    """

    def __init__(self, sinks: dict[str, object] | None = None,
                 max_attempts: int = 5, sleep=time.sleep):
        self.sinks = sinks if sinks is not None else {"console": ConsoleSink()}
        self.max_attempts = max_attempts
        self.records: list[DeliveryRecord] = []
        self._seen: set[tuple[str, int]] = set()
        self._sleep = sleep

    def deliver(self, event: AlertEvent, sink_id: str) -> DeliveryRecord | None:
        key = (event.rule_id, event.ts_ns)
        if key in self._seen:
            return None
        self._seen.add(key)
        sink = self.sinks.get(sink_id)
        if sink is None:
            logger.warning("no sink %r for rule %s; dropping to console", sink_id, event.rule_id)
            sink = self.sinks.get("console", ConsoleSink())
            sink_id = "console"
        payload = {
            "rule_id": event.rule_id,
            "ts_ns": event.ts_ns,
            "time": _rfc3339(event.ts_ns),
            "state": event.state,
            "value": event.value,
            "message": event.message,
        }
        backoff = 1.0
        attempts = 0
        ok = False
        while attempts < self.max_attempts:
            attempts += 1
            try:
                sink.send(payload)
                ok = True
                break
            except Exception as exc:
                logger.warning("sink %s failed (attempt %d): %s", sink_id, attempts, exc)
                if attempts < self.max_attempts:
                    self._sleep(backoff)
                    backoff = min(backoff * 2.0, 60.0)
        record = DeliveryRecord(event.rule_id, event.ts_ns, sink_id, attempts, ok)
        self.records.append(record)
        return record


# ----------------------------------------------------------------------
# command bus (simulation stand-in for amplifier control hardware)


@dataclass(frozen=True)
class AmplifierCommand:
    target: str
    action: str  # amplifier_off | amplifier_on
    ts_ns: int


class CommandBus:
    def __init__(self):
        self._off: dict[str, bool] = {}
        self.history: list[AmplifierCommand] = []
        self._lock = threading.Lock()

    def publish(self, target: str, action: str, ts_ns: int):
        with self._lock:
            self._off[target] = action == AMPLIFIER_OFF
            self.history.append(AmplifierCommand(target, action, ts_ns))

    def is_off(self, target: str) -> bool:
        with self._lock:
            return self._off.get(target, False)


# ----------------------------------------------------------------------
# rule persistence + evaluation loop


class RuleStore:
    """Rules live in the store's metadata area; CRUD is picked up by the
    engine on its next pass."""

    def __init__(self, store: Store):
        self._store = store
        self._lock = threading.Lock()

    def list(self) -> list[AlertRule]:
        docs = self._store.load_meta("alert_rules") or {}
        return [AlertRule.from_doc(doc) for doc in docs.values()]

    def get(self, rule_id: str) -> AlertRule | None:
        docs = self._store.load_meta("alert_rules") or {}
        doc = docs.get(rule_id)
        return AlertRule.from_doc(doc) if doc else None

    def put(self, rule: AlertRule):
        rule.validate()
        with self._lock:
            docs = self._store.load_meta("alert_rules") or {}
            docs[rule.id] = rule.to_doc()
            self._store.save_meta("alert_rules", docs)

    def delete(self, rule_id: str) -> bool:
        with self._lock:
            docs = self._store.load_meta("alert_rules") or {}
            if rule_id not in docs:
                return False
            del docs[rule_id]
            self._store.save_meta("alert_rules", docs)
            return True


@dataclass
class _RuleRuntime:
    firing: bool = False
    cursor_ns: int | None = None
    staleness: int = 0
    interlock: InterlockState = field(default_factory=InterlockState)
    last_event: AlertEvent | None = None


class AlertEngine:
    def __init__(
        self,
        store: Store,
        rules: RuleStore | None = None,
        notifier: Notifier | None = None,
        command_bus: CommandBus | None = None,
        clock=None,
    ):
        from .clock import SystemClock

        self.store = store
        self.rules = rules or RuleStore(store)
        self.notifier = notifier or Notifier()
        self.commands = command_bus or CommandBus()
        self.clock = clock or SystemClock()
        self.events: list[AlertEvent] = []
        self._runtime: dict[str, _RuleRuntime] = {}
        self._stop = threading.Event()
        self._thread: threading.Thread | None = None

    # -- evaluation ----------------------------------------------------

    def run_once(self, now_ns: int | None = None) -> list[AlertEvent]:
        now = self.clock.now_ns() if now_ns is None else int(now_ns)
        emitted: list[AlertEvent] = []
        for rule in self.rules.list():
            runtime = self._runtime.setdefault(rule.id, _RuleRuntime())
            try:
                emitted.extend(self._evaluate_rule(rule, runtime, now))
            except Exception:
                logger.exception("rule %s evaluation failed", rule.id)
        for event in emitted:
            rule = self.rules.get(event.rule_id)
            sink = rule.sink if rule else "console"
            self.notifier.deliver(event, sink)
        self.events.extend(emitted)
        return emitted

    def _evaluate_rule(self, rule, runtime, now_ns) -> list[AlertEvent]:
        if rule.kind == "rate":
            start = now_ns - int(rule.lookback_s * 1e9)
        elif runtime.cursor_ns is not None:
            start = runtime.cursor_ns + 1
        else:
            start = -(2**62)  # first pass walks the full stored history
        if start >= now_ns:
            return []
        q = SeriesQuery(
            measurement=rule.measurement,
            tags=dict(rule.tags),
            fields=[rule.field],
            start_ns=start,
            end_ns=now_ns + 1,
        )
        frames = self.store.query(q)
        frame = frames[0] if frames else None
        if frame is None or len(frame) == 0 or (rule.kind == "rate" and len(frame) < 2):
            runtime.staleness += 1
            return []
        events: list[AlertEvent]
        if rule.kind == "threshold":
            events, runtime.firing = evaluate_threshold(rule, frame, runtime.firing)
        elif rule.kind == "rate":
            events, runtime.firing = evaluate_rate(rule, frame, runtime.firing)
        else:
            events = []
            for ts, val in zip(frame.timestamps, frame.values):
                state, command = interlock_step(runtime.interlock, rule, val, ts)
                if command is not None:
                    self.commands.publish(rule.command_target, command, ts)
                    kind = "firing" if command == AMPLIFIER_OFF else "resolved"
                    events.append(AlertEvent(
                        rule.id, ts, val, kind,
                        f"interlock {rule.command_target}: {command} "
                        f"(seed {val!r}, range [{rule.min_value!r}, {rule.max_value!r}])",
                    ))
                runtime.interlock = state
            runtime.firing = runtime.interlock.state == "tripped"
        runtime.cursor_ns = frame.timestamps[-1]
        if events:
            runtime.last_event = events[-1]
        return events

    def reset_interlock(self, rule_id: str, now_ns: int | None = None):
        """Manual re-arm of a latched interlock."""
        now = self.clock.now_ns() if now_ns is None else int(now_ns)
        runtime = self._runtime.get(rule_id)
        rule = self.rules.get(rule_id)
        if runtime is None or rule is None:
            return
        if runtime.interlock.state == "tripped":
            runtime.interlock = InterlockState("armed", now, None)
            runtime.firing = False
            self.commands.publish(rule.command_target, AMPLIFIER_ON, now)

    # -- status for the API ---------------------------------------------

    def rule_states(self) -> dict[str, dict]:
        out = {}
        for rule_id, runtime in self._runtime.items():
            out[rule_id] = {
                "state": "firing" if runtime.firing else (
                    "resolved" if runtime.last_event else "none"
                ),
                "staleness": runtime.staleness,
                "last_event_ns": runtime.last_event.ts_ns if runtime.last_event else None,
                "last_message": runtime.last_event.message if runtime.last_event else None,
            }
        return out

    def active_count(self) -> int:
        return sum(1 for r in self._runtime.values() if r.firing)

    # -- loop -----------------------------------------------------------

    def run(self, period_s: float = 20.0):
        while not self._stop.is_set():
            started = time.monotonic()
            try:
                self.run_once()
            except Exception:
                logger.exception("alert evaluation pass failed")
            wall = self.clock.wall_seconds(period_s)
            remaining = wall - (time.monotonic() - started)
            if remaining > 0:
                self._stop.wait(remaining)

    def start(self, period_s: float = 20.0):
        self._thread = threading.Thread(
            target=self.run, args=(period_s,), daemon=True, name="alert-engine"
        )
        self._thread.start()

    def stop(self):
        self._stop.set()
        if self._thread:
            self._thread.join(timeout=5)


__all__ = [
    "AlertRule", "AlertEvent", "InterlockState", "AlertEngine", "RuleStore",
    "Notifier", "CommandBus", "AmplifierCommand", "ConsoleSink", "LogFileSink",
    "WebhookSink", "DeliveryRecord", "evaluate_threshold", "evaluate_rate",
    "interlock_step", "least_squares_slope", "AMPLIFIER_OFF", "AMPLIFIER_ON",
]
