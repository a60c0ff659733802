"""The two text formats crossing the network.

Node payload (one UDP datagram, ASCII):

    room ";" device ";" seq "|" [group ("|" group)*]
    group = measurement ":" key "=" float ("," key "=" float)*

Storage line (one record per line):

    measurement[,tag=value...] field=value[,field=value...] [timestamp_ns]

Tags are always emitted in sorted order; commas, spaces, equals signs and
backslashes inside names are backslash-escaped. Floats are rendered with
the shortest representation that round-trips. Both decoders are total:
arbitrary bytes produce either a value or a ParseError, never a crash.
"""

from __future__ import annotations

import math
import re
from dataclasses import dataclass, field

from .errors import (
    InvalidIdentifier,
    MissingTimestamp,
    OversizePayload,
    ParseError,
    ValidationError,
)

MAX_DATAGRAM_BYTES = 1400
SEQUENCE_MODULUS = 2**32
_TS_MIN, _TS_MAX = -(2**63), 2**63 - 1

_IDENT_RE = re.compile(r"[A-Za-z0-9_-]+\Z")
_KEY_RE = re.compile(r"[A-Za-z0-9_.-]+\Z")
_FLOAT_AT = re.compile(r"[+-]?(?:\d+\.?\d*|\.\d+)(?:[eE][+-]?\d+)?")
_INT_AT = re.compile(r"-?\d+")


def format_float(value: float) -> str:
    """Shortest decimal text that parses back to the same 64-bit float."""
    return repr(float(value))


@dataclass(frozen=True)
class DataPoint:
    """One timestamped, tagged measurement record.

    Tags are re-sorted into canonical (lexicographic) order on
    construction; field order is preserved. The timestamp is optional on
    ingress and immutable once set.
    """

    measurement: str
    tags: dict[str, str] = field(default_factory=dict)
    fields: dict[str, float] = field(default_factory=dict)
    timestamp: int | None = None

    def __post_init__(self):
        if not self.measurement:
            raise ValidationError("measurement name is empty")
        if not self.fields:
            raise ValidationError("point has no fields")
        for key, val in self.tags.items():
            if not key:
                raise ValidationError("empty tag key")
            if not val:
                raise ValidationError(f"empty value for tag {key!r}")
        clean = {}
        for key, val in self.fields.items():
            if not key:
                raise ValidationError("empty field key")
            val = float(val)
            if not math.isfinite(val):
                raise ValidationError(f"non-finite value for field {key!r}")
            clean[key] = val
        if self.timestamp is not None and not (_TS_MIN <= self.timestamp <= _TS_MAX):
            raise ValidationError("timestamp outside 64-bit range")
        object.__setattr__(self, "tags", dict(sorted(self.tags.items())))
        object.__setattr__(self, "fields", clean)

    def with_timestamp(self, ts_ns: int) -> "DataPoint":
        """Stamp an unstamped point. Existing timestamps are immutable."""
        if self.timestamp is not None:
            if self.timestamp != ts_ns:
                raise ValidationError("timestamp already assigned")
            return self
        return DataPoint(self.measurement, self.tags, self.fields, int(ts_ns))


@dataclass(frozen=True)
class NodePayload:
    """One node's answer to a poll: location stamp plus readings.

    readings is a sequence of (measurement, field key, value) triples in
    acquisition order. sequence increases by exactly one per answered
    poll, wrapping at 2^32.
    """

    room_id: str
    device_id: str
    sequence: int
    readings: tuple[tuple[str, str, float], ...] = ()

    def __post_init__(self):
        for name, value in (("room_id", self.room_id), ("device_id", self.device_id)):
            if not _IDENT_RE.fullmatch(value or ""):
                raise InvalidIdentifier(f"{name} {value!r} must match [A-Za-z0-9_-]+")
        if not 0 <= self.sequence < SEQUENCE_MODULUS:
            raise ValidationError("sequence outside [0, 2^32)")
        readings = tuple(
            (meas, key, float(val)) for meas, key, val in self.readings
        )
        for meas, key, val in readings:
            if not _KEY_RE.fullmatch(meas):
                raise InvalidIdentifier(f"measurement {meas!r} must match [A-Za-z0-9_.-]+")
            if not _KEY_RE.fullmatch(key):
                raise InvalidIdentifier(f"field key {key!r} must match [A-Za-z0-9_.-]+")
            if not math.isfinite(val):
                raise ValidationError(f"non-finite reading {meas}:{key}")
        object.__setattr__(self, "readings", readings)


def encode_node_payload(payload: NodePayload) -> bytes:
    """Render a payload as a single ASCII datagram (<= 1400 bytes)."""
    groups: list[str] = []
    current_meas: str | None = None
    for meas, key, val in payload.readings:
        kv = f"{key}={format_float(val)}"
        if meas != current_meas:
            groups.append(f"{meas}:{kv}")
            current_meas = meas
        else:
            groups[-1] += f",{kv}"
    text = f"{payload.room_id};{payload.device_id};{payload.sequence}|" + "|".join(groups)
    raw = text.encode("ascii")
    if len(raw) > MAX_DATAGRAM_BYTES:
        raise OversizePayload(f"{len(raw)} bytes exceeds {MAX_DATAGRAM_BYTES}")
    return raw


class _Cursor:
    __slots__ = ("text", "pos")

    def __init__(self, text: str):
        self.text = text
        self.pos = 0

    def fail(self, reason: str):
        raise ParseError(reason, self.pos)

    def at_end(self) -> bool:
        return self.pos >= len(self.text)

    def peek(self) -> str:
        return self.text[self.pos] if self.pos < len(self.text) else ""

    def expect(self, ch: str):
        if self.peek() != ch:
            self.fail(f"expected {ch!r}")
        self.pos += 1

    def take_regex(self, pattern: re.Pattern, what: str) -> str:
        m = pattern.match(self.text, self.pos)
        if not m or m.start() == m.end():
            self.fail(f"expected {what}")
        self.pos = m.end()
        return m.group()

    def take_charset(self, allowed: str, what: str) -> str:
        start = self.pos
        while self.pos < len(self.text) and (
            self.text[self.pos].isalnum() or self.text[self.pos] in allowed
        ):
            self.pos += 1
        if self.pos == start:
            self.fail(f"expected {what}")
        return self.text[start : self.pos]

    def take_float(self, what: str = "number") -> float:
        at = self.pos
        raw = self.take_regex(_FLOAT_AT, what)
        value = float(raw)
        if not math.isfinite(value):
            self.pos = at
            self.fail("value overflows to non-finite")
        return value


def _decode_ascii(raw: bytes) -> str:
    try:
        return raw.decode("ascii")
    except UnicodeDecodeError as exc:
        raise ParseError("non-ASCII byte", exc.start) from None


def decode_node_payload(raw: bytes) -> NodePayload:
    """Parse a datagram back into a NodePayload. Total over arbitrary bytes."""
    cur = _Cursor(_decode_ascii(raw))
    room = cur.take_charset("_-", "room identifier")
    cur.expect(";")
    device = cur.take_charset("_-", "device identifier")
    cur.expect(";")
    seq_at = cur.pos
    seq = int(cur.take_regex(_INT_AT, "sequence number"))
    if not 0 <= seq < SEQUENCE_MODULUS:
        raise ParseError("sequence outside [0, 2^32)", seq_at)
    cur.expect("|")
    readings: list[tuple[str, str, float]] = []
    if not cur.at_end():
        while True:
            meas = cur.take_charset("_.-", "measurement name")
            cur.expect(":")
            while True:
                key = cur.take_charset("_.-", "field key")
                cur.expect("=")
                readings.append((meas, key, cur.take_float("reading value")))
                if cur.peek() == ",":
                    cur.pos += 1
                    continue
                break
            if cur.at_end():
                break
            cur.expect("|")
    return NodePayload(room, device, seq, tuple(readings))


def payload_to_points(payload: NodePayload, received_at: int) -> list[DataPoint]:
    """Expand a payload into one point per distinct measurement.

    RoomID/DevID become tags, readings of the same measurement become the
    point's fields, and everything is stamped with the arrival time.
    """
    grouped: dict[str, dict[str, float]] = {}
    for meas, key, val in payload.readings:
        grouped.setdefault(meas, {})[key] = val
    tags = {"RoomID": payload.room_id, "DevID": payload.device_id}
    return [
        DataPoint(meas, tags, fields, int(received_at))
        for meas, fields in grouped.items()
    ]


_ESCAPABLE = "\\, ="


def escape_name(name: str) -> str:
    out = []
    for ch in name:
        if ch in _ESCAPABLE:
            out.append("\\")
        out.append(ch)
    return "".join(out)


def encode_line(point: DataPoint) -> str:
    """Canonical single-line encoding of a stamped point."""
    if point.timestamp is None:
        raise MissingTimestamp("point must be stamped before line encoding")
    parts = [escape_name(point.measurement)]
    for key, val in point.tags.items():  # already sorted canonically
        parts.append(f",{escape_name(key)}={escape_name(val)}")
    fields = ",".join(
        f"{escape_name(k)}={format_float(v)}" for k, v in point.fields.items()
    )
    return f"{''.join(parts)} {fields} {point.timestamp}"


def _take_escaped(cur: _Cursor, stops: str, what: str) -> str:
    out: list[str] = []
    while not cur.at_end():
        ch = cur.text[cur.pos]
        if ch == "\\":
            if cur.pos + 1 >= len(cur.text):
                cur.fail("dangling escape")
            out.append(cur.text[cur.pos + 1])
            cur.pos += 2
        elif ch in stops:
            break
        else:
            out.append(ch)
            cur.pos += 1
    if not out:
        cur.fail(f"expected {what}")
    return "".join(out)


def parse_line(line: str) -> DataPoint:
    """Parse one storage line. The timestamp section may be absent."""
    cur = _Cursor(line)
    measurement = _take_escaped(cur, ", ", "measurement name")
    tags: dict[str, str] = {}
    while cur.peek() == ",":
        cur.pos += 1
        key_at = cur.pos
        key = _take_escaped(cur, "=, ", "tag key")
        cur.expect("=")
        value = _take_escaped(cur, ", ", "tag value")
        if key in tags:
            raise ParseError(f"duplicate tag key {key!r}", key_at)
        tags[key] = value
    if cur.at_end():
        cur.fail("no fields")
    cur.expect(" ")
    fields: dict[str, float] = {}
    while True:
        key_at = cur.pos
        key = _take_escaped(cur, "=, ", "field key")
        cur.expect("=")
        value = cur.take_float("field value")
        if key in fields:
            raise ParseError(f"duplicate field key {key!r}", key_at)
        fields[key] = value
        if cur.peek() == ",":
            cur.pos += 1
            continue
        break
    timestamp: int | None = None
    if cur.peek() == " ":
        cur.pos += 1
        ts_at = cur.pos
        timestamp = int(cur.take_regex(_INT_AT, "timestamp"))
        if not _TS_MIN <= timestamp <= _TS_MAX:
            raise ParseError("timestamp outside 64-bit range", ts_at)
    if not cur.at_end():
        cur.fail("trailing data")
    try:
        return DataPoint(measurement, tags, fields, timestamp)
    except ValidationError as exc:
        raise ParseError(str(exc), 0) from None


def parse_lines(body: str) -> list[tuple[int, DataPoint | ParseError]]:
    """Parse a multi-line body; blank lines are skipped.

    Returns (1-based line number, point or error) so callers can report
    partial failures per line.
    """
    out: list[tuple[int, DataPoint | ParseError]] = []
    for lineno, raw in enumerate(body.splitlines(), start=1):
        if not raw.strip():
            continue
        try:
            out.append((lineno, parse_line(raw)))
        except ParseError as exc:
            out.append((lineno, exc))
    return out
