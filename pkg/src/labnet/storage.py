"""Embedded time-series store.

Write path: points are appended to a write-ahead log (line protocol text)
and an in-memory table, which is flushed to immutable per-series segment
files once it grows past a threshold. Segments hold one series each, with
delta-encoded zlib-compressed timestamps and zlib-compressed float64
values. Duplicate (series, timestamp) writes resolve last-write-wins,
ordered by segment id with the memtable newest of all.

Layout under the store directory:

    wal/wal-<n>.log        append-only line-protocol text, replayed on open
    segments/seg-<n>.seg   immutable, one series per file (format below)
    meta/<name>.json       small metadata documents (rules, units, ...)

Segment format, little-endian:

    magic "LSEG" | version u8 | key_len u16 | key utf8
    count u32 | min_ts i64 | max_ts i64
    ts_blob_len u32 | zlib(int64 deltas, first absolute)
    val_blob_len u32 | zlib(float64 values)
    crc32 u32 over both compressed blobs
"""

from __future__ import annotations

import errno
import hashlib
import logging
import os
import re
import shutil
import struct
import threading
import time
import zlib
from dataclasses import dataclass, field

import numpy as np

from .errors import DiskFull, IoError, ValidationError
from .wire import DataPoint, encode_line, escape_name, parse_line

logger = logging.getLogger(__name__)

SEGMENT_MAGIC = b"LSEG"
SEGMENT_VERSION = 1
AGGREGATORS = ("mean", "min", "max", "last")

# Back-derived from ten devices times ten measurements at 20 s cadence
# filling ~6.25 GB/year; used as the default cost model input.
DEFAULT_BYTES_PER_POINT = 39.6

_DEFAULT_UNITS = (
    ("temperature", "degC"),
    ("pressure", "mbar"),
    ("laser_power", "mW"),
    ("power", "mW"),
    ("magnetic_field", "mT"),
)


@dataclass(frozen=True)
class SeriesKey:
    """Identity of one stored series: measurement + sorted tags + field."""

    measurement: str
    tags: tuple[tuple[str, str], ...]
    field: str

    def __post_init__(self):
        object.__setattr__(self, "tags", tuple(sorted(self.tags)))

    def canonical(self) -> str:
        parts = [escape_name(self.measurement)]
        for k, v in self.tags:
            parts.append(f",{escape_name(k)}={escape_name(v)}")
        return f"{''.join(parts)} {escape_name(self.field)}"

    @staticmethod
    def from_canonical(text: str) -> "SeriesKey":
        point = parse_line(text + "=0")
        return SeriesKey(
            point.measurement,
            tuple(point.tags.items()),
            next(iter(point.fields)),
        )

    def tag_dict(self) -> dict[str, str]:
        return dict(self.tags)


@dataclass
class SeriesQuery:
    """Structured query: which series, which time range, how to reduce."""

    measurement: str
    tags: dict[str, str] = field(default_factory=dict)
    fields: list[str] | None = None
    start_ns: int = 0
    end_ns: int = 0
    agg: str | None = None
    bucket_s: float | None = None
    limit: int | None = None

    def validate(self):
        if not self.measurement:
            raise ValidationError("query needs a measurement")
        if self.start_ns >= self.end_ns:
            raise ValidationError("query range must satisfy start < end")
        if self.agg is not None:
            if self.agg not in AGGREGATORS:
                raise ValidationError(f"unknown aggregator {self.agg!r}")
            if not self.bucket_s or self.bucket_s <= 0:
                raise ValidationError("aggregation needs bucket_s > 0")
        if self.limit is not None and self.limit <= 0:
            raise ValidationError("limit must be positive")


@dataclass
class SeriesFrame:
    """A queried, time-ordered slice of one series."""

    key: SeriesKey
    unit: str
    timestamps: list[int]
    values: list[float]

    def __len__(self):
        return len(self.timestamps)


@dataclass
class WriteResult:
    accepted: int
    rejected: list[tuple[int, str]] = field(default_factory=list)

    def __int__(self):
        return self.accepted


@dataclass
class SnapshotManifest:
    path: str
    files: list[tuple[str, str]]  # (relative path, sha256)
    total_points: int
    created_ns: int


class _SegmentRef:
    __slots__ = ("path", "seg_id", "key", "count", "min_ts", "max_ts", "_cache")

    def __init__(self, path, seg_id, key, count, min_ts, max_ts):
        self.path = path
        self.seg_id = seg_id
        self.key = key
        self.count = count
        self.min_ts = min_ts
        self.max_ts = max_ts
        self._cache = None

    def load(self) -> tuple[np.ndarray, np.ndarray]:
        if self._cache is None:
            self._cache = _read_segment_data(self.path)
        return self._cache

    @property
    def bytes(self) -> int:
        try:
            return os.path.getsize(self.path)
        except OSError:
            return 0


def _write_segment(path: str, key: SeriesKey, ts: np.ndarray, vals: np.ndarray):
    """ts must be strictly increasing int64; vals float64 of equal length."""
    key_raw = key.canonical().encode("utf-8")
    deltas = np.empty_like(ts)
    deltas[0] = ts[0]
    np.subtract(ts[1:], ts[:-1], out=deltas[1:])
    ts_blob = zlib.compress(deltas.tobytes(), 6)
    val_blob = zlib.compress(vals.tobytes(), 6)
    crc = zlib.crc32(ts_blob)
    crc = zlib.crc32(val_blob, crc)
    header = SEGMENT_MAGIC + struct.pack(
        "<BH", SEGMENT_VERSION, len(key_raw)
    ) + key_raw + struct.pack(
        "<Iqq", len(ts), int(ts[0]), int(ts[-1])
    )
    tmp = path + ".tmp"
    try:
        with open(tmp, "wb") as fh:
            fh.write(header)
            fh.write(struct.pack("<I", len(ts_blob)))
            fh.write(ts_blob)
            fh.write(struct.pack("<I", len(val_blob)))
            fh.write(val_blob)
            fh.write(struct.pack("<I", crc))
        os.replace(tmp, path)
    except OSError as exc:
        if exc.errno == errno.ENOSPC:
            raise DiskFull(str(exc)) from None
        raise


def _read_segment_header(path: str) -> tuple[SeriesKey, int, int, int]:
    with open(path, "rb") as fh:
        magic = fh.read(4)
        if magic != SEGMENT_MAGIC:
            raise IoError(f"{path}: bad magic")
        version, key_len = struct.unpack("<BH", fh.read(3))
        if version != SEGMENT_VERSION:
            raise IoError(f"{path}: unsupported segment version {version}")
        key = SeriesKey.from_canonical(fh.read(key_len).decode("utf-8"))
        count, min_ts, max_ts = struct.unpack("<Iqq", fh.read(20))
    return key, count, min_ts, max_ts


def _read_segment_data(path: str) -> tuple[np.ndarray, np.ndarray]:
    with open(path, "rb") as fh:
        fh.read(4)
        _, key_len = struct.unpack("<BH", fh.read(3))
        fh.read(key_len)
        count, _, _ = struct.unpack("<Iqq", fh.read(20))
        (ts_len,) = struct.unpack("<I", fh.read(4))
        ts_blob = fh.read(ts_len)
        (val_len,) = struct.unpack("<I", fh.read(4))
        val_blob = fh.read(val_len)
        (crc,) = struct.unpack("<I", fh.read(4))
    if zlib.crc32(val_blob, zlib.crc32(ts_blob)) != crc:
        raise IoError(f"{path}: checksum mismatch")
    deltas = np.frombuffer(zlib.decompress(ts_blob), dtype=np.int64)
    vals = np.frombuffer(zlib.decompress(val_blob), dtype=np.float64)
    if len(deltas) != count or len(vals) != count:
        raise IoError(f"{path}: truncated data")
    return np.cumsum(deltas), vals


class Store:
    """Single-writer embedded store. All public methods are thread-safe."""

    def __init__(
        self,
        path: str,
        flush_threshold: int = 200_000,
        sync: bool = False,
        read_only: bool = False,
    ):
        self.path = os.path.abspath(path)
        self.wal_dir = os.path.join(self.path, "wal")
        self.seg_dir = os.path.join(self.path, "segments")
        self.meta_dir = os.path.join(self.path, "meta")
        if not read_only:
            for d in (self.path, self.wal_dir, self.seg_dir, self.meta_dir):
                os.makedirs(d, exist_ok=True)
        elif not os.path.isdir(self.path):
            raise IoError(f"{path}: no such store")
        self.flush_threshold = flush_threshold
        self.sync = sync
        self.read_only = read_only
        self._lock = threading.RLock()
        self._mem: dict[SeriesKey, list[tuple[int, float]]] = {}
        self._mem_points = 0
        self._segments: dict[SeriesKey, list[_SegmentRef]] = {}
        self._next_seg_id = 1
        self._wal_seq = 1
        self._wal_file = None
        self._units: dict[str, str] = {}
        self.points_written = 0
        self._closed = False
        self._open()

    # ------------------------------------------------------------------
    # open / recovery

    def _open(self):
        for name in sorted(os.listdir(self.seg_dir)):
            m = re.fullmatch(r"seg-(\d+)\.seg", name)
            if not m:
                continue
            path = os.path.join(self.seg_dir, name)
            try:
                key, count, min_ts, max_ts = _read_segment_header(path)
            except (IoError, OSError, struct.error) as exc:
                logger.warning("skipping unreadable segment %s: %s", name, exc)
                continue
            seg_id = int(m.group(1))
            ref = _SegmentRef(path, seg_id, key, count, min_ts, max_ts)
            self._segments.setdefault(key, []).append(ref)
            self._next_seg_id = max(self._next_seg_id, seg_id + 1)
            self.points_written += count
        for refs in self._segments.values():
            refs.sort(key=lambda r: r.seg_id)
        replayed = 0
        for name in sorted(os.listdir(self.wal_dir)):
            m = re.fullmatch(r"wal-(\d+)\.log", name)
            if not m:
                continue
            self._wal_seq = max(self._wal_seq, int(m.group(1)) + 1)
            replayed += self._replay_wal(os.path.join(self.wal_dir, name))
        if replayed:
            logger.info("replayed %d points from write-ahead log", replayed)
        self._units = self.load_meta("units") or {}
        if not self.read_only:
            self._open_wal()

    def _replay_wal(self, path: str) -> int:
        count = 0
        with open(path, "r", encoding="utf-8", errors="replace") as fh:
            for raw in fh:
                line = raw.rstrip("\n")
                if not line:
                    continue
                try:
                    point = parse_line(line)
                except Exception:
                    logger.warning("stopping WAL replay at corrupt tail of %s", path)
                    break
                if point.timestamp is None:
                    continue
                self._mem_insert(point)
                count += 1
        return count

    def _open_wal(self):
        path = os.path.join(self.wal_dir, f"wal-{self._wal_seq:08d}.log")
        self._wal_file = open(path, "a", encoding="utf-8")
        self._wal_path = path

    # ------------------------------------------------------------------
    # write path

    def _mem_insert(self, point: DataPoint):
        tags = tuple(point.tags.items())
        for fkey, val in point.fields.items():
            skey = SeriesKey(point.measurement, tags, fkey)
            self._mem.setdefault(skey, []).append((point.timestamp, val))
            self._mem_points += 1

    def write(self, points: list[DataPoint], now_ns: int | None = None) -> WriteResult:
        """Append points; unstamped ones are stamped with now_ns.

        Durable once this returns: the batch is on the WAL before the
        memtable is updated. Per-point validation failures are reported by
        index while the remaining points are still accepted.
        """
        if self._closed:
            raise IoError("store is closed")
        if self.read_only:
            raise IoError("store is read-only")
        now = time.time_ns() if now_ns is None else int(now_ns)
        result = WriteResult(0)
        with self._lock:
            stamped: list[DataPoint] = []
            lines: list[str] = []
            for idx, point in enumerate(points):
                try:
                    if point.timestamp is None:
                        point = point.with_timestamp(now)
                    # re-check despite constructor validation: dicts are mutable
                    if any(not np.isfinite(v) for v in point.fields.values()):
                        raise ValidationError("non-finite field value")
                    lines.append(encode_line(point))
                    stamped.append(point)
                except Exception as exc:
                    result.rejected.append((idx, str(exc)))
            if lines:
                try:
                    self._wal_file.write("\n".join(lines) + "\n")
                    self._wal_file.flush()
                    if self.sync:
                        os.fsync(self._wal_file.fileno())
                except OSError as exc:
                    if exc.errno == errno.ENOSPC:
                        raise DiskFull(str(exc)) from None
                    raise
            for point in stamped:
                self._mem_insert(point)
            result.accepted = len(stamped)
            self.points_written += len(stamped)
            if self._mem_points >= self.flush_threshold:
                self._flush_locked()
        return result

    def flush(self):
        with self._lock:
            self._flush_locked()

    def _flush_locked(self):
        if self.read_only:
            return
        if not self._mem:
            self._rotate_wal()
            return
        for skey, entries in self._mem.items():
            ts, vals = _dedup_sorted(entries)
            ref = self._new_segment(skey, ts, vals)
            self._segments.setdefault(skey, []).append(ref)
        self._mem.clear()
        self._mem_points = 0
        self._rotate_wal()

    def _new_segment(self, skey, ts, vals) -> _SegmentRef:
        seg_id = self._next_seg_id
        self._next_seg_id += 1
        path = os.path.join(self.seg_dir, f"seg-{seg_id:08d}.seg")
        _write_segment(path, skey, ts, vals)
        return _SegmentRef(path, seg_id, skey, len(ts), int(ts[0]), int(ts[-1]))

    def _rotate_wal(self):
        old = getattr(self, "_wal_path", None)
        self._wal_file.close()
        self._wal_seq += 1
        self._open_wal()
        for name in os.listdir(self.wal_dir):
            path = os.path.join(self.wal_dir, name)
            if path != self._wal_path:
                os.unlink(path)
        del old

    # ------------------------------------------------------------------
    # query path

    def _matching_keys(self, q: SeriesQuery) -> list[SeriesKey]:
        keys = set(self._segments) | set(self._mem)
        out = []
        for key in keys:
            if key.measurement != q.measurement:
                continue
            tags = key.tag_dict()
            if any(tags.get(k) != v for k, v in q.tags.items()):
                continue
            if q.fields is not None and key.field not in q.fields:
                continue
            out.append(key)
        return sorted(out, key=lambda k: k.canonical())

    def _series_arrays(
        self,
        key: SeriesKey,
        start_ns: int | None = None,
        end_ns: int | None = None,
    ) -> tuple[np.ndarray, np.ndarray]:
        """Merged series slice, sorted by time, duplicates last-write-wins."""
        with self._lock:
            refs = [
                ref
                for ref in self._segments.get(key, ())
                if (start_ns is None or ref.max_ts >= start_ns)
                and (end_ns is None or ref.min_ts < end_ns)
            ]
            mem = list(self._mem.get(key, ()))
        merged: dict[int, float] = {}
        for ref in refs:  # ascending seg id: later segments overwrite
            ts, vals = ref.load()
            merged.update(zip(ts.tolist(), vals.tolist()))
        for ts, val in mem:  # memtable newest of all
            merged[ts] = val
        if not merged:
            return np.empty(0, np.int64), np.empty(0, np.float64)
        ts = np.fromiter(merged.keys(), np.int64, len(merged))
        vals = np.fromiter(merged.values(), np.float64, len(merged))
        order = np.argsort(ts, kind="stable")
        return ts[order], vals[order]

    def query(self, q: SeriesQuery) -> list[SeriesFrame]:
        q.validate()
        frames = []
        with self._lock:
            keys = self._matching_keys(q)
        for key in keys:
            ts, vals = self._series_arrays(key, q.start_ns, q.end_ns)
            lo = np.searchsorted(ts, q.start_ns, "left")
            hi = np.searchsorted(ts, q.end_ns, "left")
            ts, vals = ts[lo:hi], vals[lo:hi]
            if q.agg is not None and len(ts):
                ts, vals = _aggregate(ts, vals, q.agg, int(q.bucket_s * 1e9))
            if q.limit is not None:
                ts, vals = ts[: q.limit], vals[: q.limit]
            if len(ts) == 0:
                continue
            frames.append(
                SeriesFrame(key, self.unit_for(key), ts.tolist(), vals.tolist())
            )
        return frames

    # ------------------------------------------------------------------
    # maintenance

    def _writable(self):
        if self.read_only:
            raise IoError("store is read-only")

    def measurements(self) -> list[str]:
        with self._lock:
            keys = set(self._segments) | set(self._mem)
        return sorted({k.measurement for k in keys})

    def series_keys(self, measurement: str | None = None) -> list[SeriesKey]:
        with self._lock:
            keys = set(self._segments) | set(self._mem)
        if measurement is not None:
            keys = {k for k in keys if k.measurement == measurement}
        return sorted(keys, key=lambda k: k.canonical())

    def time_range(self) -> tuple[int, int] | None:
        """(min_ts, max_ts) over everything stored, or None when empty."""
        lo, hi = None, None
        with self._lock:
            for refs in self._segments.values():
                for ref in refs:
                    lo = ref.min_ts if lo is None else min(lo, ref.min_ts)
                    hi = ref.max_ts if hi is None else max(hi, ref.max_ts)
            for entries in self._mem.values():
                for ts, _ in entries:
                    lo = ts if lo is None else min(lo, ts)
                    hi = ts if hi is None else max(hi, ts)
        return None if lo is None else (lo, hi)

    def compact(self):
        """Merge each series' segments into one; drops shadowed duplicates."""
        self._writable()
        with self._lock:
            self._flush_locked()
            for key in list(self._segments):
                refs = self._segments[key]
                if len(refs) <= 1:
                    continue
                ts, vals = self._series_arrays(key)
                new = self._new_segment(key, ts, vals)
                self._segments[key] = [new]
                for ref in refs:
                    os.unlink(ref.path)

    def downsample(
        self,
        measurement: str,
        older_than_ns: int,
        bucket_s: float,
        agg: str = "mean",
    ) -> int:
        """Replace raw points older than the cutoff with per-bucket aggregates.

        Idempotent: a per-series watermark records the span already
        aggregated, so re-running replaces nothing.
        """
        self._writable()
        if agg not in AGGREGATORS:
            raise ValidationError(f"unknown aggregator {agg!r}")
        bucket_ns = int(bucket_s * 1e9)
        if bucket_ns <= 0:
            raise ValidationError("bucket must be positive")
        replaced = 0
        with self._lock:
            self._flush_locked()
            marks = self.load_meta("downsample") or {}
            for key in [k for k in self._segments if k.measurement == measurement]:
                canon = key.canonical()
                watermark = marks.get(canon, -(2**63))
                ts, vals = self._series_arrays(key)
                lo = np.searchsorted(ts, watermark, "left")
                hi = np.searchsorted(ts, older_than_ns, "left")
                if hi <= lo:
                    continue
                agg_ts, agg_vals = _aggregate(ts[lo:hi], vals[lo:hi], agg, bucket_ns)
                new_ts = np.concatenate([ts[:lo], agg_ts, ts[hi:]])
                new_vals = np.concatenate([vals[:lo], agg_vals, vals[hi:]])
                old_refs = self._segments[key]
                self._segments[key] = [self._new_segment(key, new_ts, new_vals)]
                for ref in old_refs:
                    os.unlink(ref.path)
                replaced += int(hi - lo)
                marks[canon] = int(older_than_ns)
            if replaced:
                self.save_meta("downsample", marks)
        return replaced

    def apply_retention(
        self,
        max_age_s: float | None = None,
        max_bytes: int | None = None,
        now_ns: int | None = None,
    ) -> int:
        """Delete oldest data first until the policy holds. Returns points deleted."""
        self._writable()
        if max_age_s is None and max_bytes is None:
            raise ValidationError("retention policy is empty")
        deleted = 0
        with self._lock:
            self._flush_locked()
            if max_age_s is not None:
                now = time.time_ns() if now_ns is None else int(now_ns)
                deleted += self._delete_older_than(now - int(max_age_s * 1e9))
            if max_bytes is not None:
                for _ in range(32):
                    total = self.disk_bytes()
                    if total <= max_bytes:
                        break
                    cutoff = self._byte_cap_cutoff(total, max_bytes)
                    if cutoff is None:
                        break
                    got = self._delete_older_than(cutoff)
                    if got == 0:
                        break
                    deleted += got
        return deleted

    def _byte_cap_cutoff(self, total: int, cap: int) -> int | None:
        all_ts = [ref.load()[0] for refs in self._segments.values() for ref in refs]
        if not all_ts:
            return None
        merged = np.sort(np.concatenate(all_ts))
        # drop at least the over-budget fraction of points, plus headroom
        frac = min(1.0, (total - cap) / max(total, 1) * 1.25 + 0.02)
        idx = min(len(merged) - 1, max(1, int(len(merged) * frac)))
        return int(merged[idx])

    def _delete_older_than(self, cutoff_ns: int) -> int:
        deleted = 0
        for key in list(self._segments):
            refs = self._segments[key]
            if all(ref.max_ts < cutoff_ns for ref in refs):
                deleted += sum(ref.count for ref in refs)
                for ref in refs:
                    os.unlink(ref.path)
                del self._segments[key]
                continue
            if all(ref.min_ts >= cutoff_ns for ref in refs):
                continue
            ts, vals = self._series_arrays(key)
            keep = int(np.searchsorted(ts, cutoff_ns, "left"))
            if keep == 0:
                continue
            deleted += keep
            if keep == len(ts):
                del self._segments[key]
            else:
                self._segments[key] = [self._new_segment(key, ts[keep:], vals[keep:])]
            for ref in refs:
                os.unlink(ref.path)
        return deleted

    # ------------------------------------------------------------------
    # snapshot / restore

    def snapshot(self, destination: str) -> SnapshotManifest:
        """Consistent point-in-time copy; the destination opens as a store."""
        dest = os.path.abspath(destination)
        if dest == self.path:
            raise IoError("snapshot destination is the store itself")
        os.makedirs(dest, exist_ok=True)
        with self._lock:
            self._flush_locked()
            files: list[tuple[str, str]] = []
            total = 0
            for sub in ("segments", "meta"):
                os.makedirs(os.path.join(dest, sub), exist_ok=True)
            for refs in self._segments.values():
                for ref in refs:
                    rel = os.path.join("segments", os.path.basename(ref.path))
                    files.append((rel, _copy_hash(ref.path, os.path.join(dest, rel))))
                    total += ref.count
            for name in sorted(os.listdir(self.meta_dir)):
                src = os.path.join(self.meta_dir, name)
                rel = os.path.join("meta", name)
                files.append((rel, _copy_hash(src, os.path.join(dest, rel))))
            created = time.time_ns()
            manifest = SnapshotManifest(dest, files, total, created)
            with open(os.path.join(dest, "MANIFEST"), "w", encoding="utf-8") as fh:
                fh.write(f"labnet-snapshot v{SEGMENT_VERSION}\n")
                fh.write(f"created_ns {created}\n")
                fh.write(f"points {total}\n")
                for rel, digest in files:
                    fh.write(f"{digest}  {rel}\n")
        return manifest

    @staticmethod
    def verify_snapshot(path: str) -> SnapshotManifest:
        manifest_path = os.path.join(path, "MANIFEST")
        if not os.path.exists(manifest_path):
            raise IoError(f"{path}: no MANIFEST")
        files = []
        points = 0
        created = 0
        with open(manifest_path, encoding="utf-8") as fh:
            for line in fh:
                line = line.rstrip("\n")
                if line.startswith("points "):
                    points = int(line.split()[1])
                elif line.startswith("created_ns "):
                    created = int(line.split()[1])
                elif "  " in line:
                    digest, rel = line.split("  ", 1)
                    actual = _hash_file(os.path.join(path, rel))
                    if actual != digest:
                        raise IoError(f"{rel}: checksum mismatch")
                    files.append((rel, digest))
        return SnapshotManifest(path, files, points, created)

    # ------------------------------------------------------------------
    # metadata and units

    def _meta_path(self, name: str) -> str:
        return os.path.join(self.meta_dir, f"{name}.json")

    def load_meta(self, name: str):
        import json

        path = self._meta_path(name)
        if not os.path.exists(path):
            return None
        with open(path, encoding="utf-8") as fh:
            return json.load(fh)

    def save_meta(self, name: str, doc) -> None:
        import json

        path = self._meta_path(name)
        tmp = path + ".tmp"
        with open(tmp, "w", encoding="utf-8") as fh:
            json.dump(doc, fh, indent=1)
        os.replace(tmp, path)

    def set_unit(self, measurement: str, field_key: str, unit: str):
        self._writable()
        with self._lock:
            self._units[f"{measurement}\x00{field_key}"] = unit
            self.save_meta("units", self._units)

    def unit_for(self, key: SeriesKey) -> str:
        unit = self._units.get(f"{key.measurement}\x00{key.field}")
        if unit is not None:
            return unit
        for prefix, default in _DEFAULT_UNITS:
            if key.measurement.startswith(prefix):
                return default
        return ""

    # ------------------------------------------------------------------
    # stats / lifecycle

    def disk_bytes(self) -> int:
        total = 0
        for root, _, names in os.walk(self.path):
            for name in names:
                try:
                    total += os.path.getsize(os.path.join(root, name))
                except OSError:
                    pass
        return total

    def stats(self) -> dict:
        with self._lock:
            stored = sum(
                sum(ref.count for ref in refs) for refs in self._segments.values()
            )
            return {
                "points_written": self.points_written,
                "points_stored": stored + self._mem_points,
                "series": len(set(self._segments) | set(self._mem)),
                "disk_bytes": self.disk_bytes(),
                "memtable_points": self._mem_points,
            }

    def close(self):
        with self._lock:
            if self._closed:
                return
            self._flush_locked()
            if self._wal_file is not None:
                self._wal_file.close()
            self._closed = True

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


def _dedup_sorted(entries: list[tuple[int, float]]) -> tuple[np.ndarray, np.ndarray]:
    merged: dict[int, float] = {}
    for ts, val in entries:
        merged[ts] = val
    ts = np.fromiter(merged.keys(), np.int64, len(merged))
    vals = np.fromiter(merged.values(), np.float64, len(merged))
    order = np.argsort(ts, kind="stable")
    return ts[order], vals[order]


def _aggregate(
    ts: np.ndarray, vals: np.ndarray, agg: str, bucket_ns: int
) -> tuple[np.ndarray, np.ndarray]:
    """Epoch-aligned buckets; bucket timestamp is the bucket start.

    Input must be time-sorted. Empty buckets are naturally omitted.
    """
    buckets = (ts // bucket_ns) * bucket_ns
    starts = np.flatnonzero(np.diff(buckets, prepend=buckets[0] - 1))
    if agg == "mean":
        sums = np.add.reduceat(vals, starts)
        counts = np.diff(np.append(starts, len(vals)))
        out = sums / counts
    elif agg == "min":
        out = np.minimum.reduceat(vals, starts)
    elif agg == "max":
        out = np.maximum.reduceat(vals, starts)
    else:  # last
        out = vals[np.append(starts[1:] - 1, len(vals) - 1)]
    return buckets[starts], out


def _copy_hash(src: str, dst: str) -> str:
    shutil.copyfile(src, dst)
    return _hash_file(dst)


def _hash_file(path: str) -> str:
    digest = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            digest.update(chunk)
    return digest.hexdigest()


def estimate_storage(
    devices: int,
    measurements_per_device: int,
    interval_s: float,
    duration_s: float,
    bytes_per_point: float = DEFAULT_BYTES_PER_POINT,
) -> float:
    """Cost model: devices x measurements x (duration/interval) x bytes/point."""
    if min(devices, measurements_per_device) < 0:
        raise ValidationError("counts must be non-negative")
    if interval_s <= 0 or duration_s < 0 or bytes_per_point <= 0:
        raise ValidationError("interval, duration and bytes/point must be positive")
    return devices * measurements_per_device * (duration_s / interval_s) * bytes_per_point
