"""Signal toolkit: alignment, Pearson matrices, lagged cross-correlation,
power spectral density, and windowed stability summaries.

Conventions: Pearson uses the population (n) divisor internally, which
cancels in the coefficient; stability summaries report the sample (n-1)
standard deviation to match conventional "mean +/- std" quoting. Series
of different cadences must be aligned onto a common grid before any
correlation is computed.
"""

from __future__ import annotations

import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import (
    InsufficientData,
    NoOverlap,
    SingletonSeries,
    TooShort,
    ZeroVariance,
)
from .storage import SeriesFrame, SeriesKey

ALIGN_METHODS = ("linear", "nearest", "previous")
WINDOWS = ("rectangular", "hann")


@dataclass
class AlignedMatrix:
    """Series resampled onto one regular grid, one column per input."""

    times: np.ndarray  # int64 ns, regular step
    names: list[str]
    units: list[str]
    values: np.ndarray  # (n_rows, n_cols) float64
    observed: np.ndarray  # bool mask, True where the grid hit a real sample
    step_ns: int

    @property
    def n_rows(self) -> int:
        return self.values.shape[0]

    def column(self, name: str) -> np.ndarray:
        return self.values[:, self.names.index(name)]


@dataclass
class CorrelationMatrix:
    names: list[str]
    r: np.ndarray  # (k, k), symmetric, unit diagonal
    samples: int

    def value(self, a: str, b: str) -> float:
        return float(self.r[self.names.index(a), self.names.index(b)])


@dataclass
class CrossCorrelation:
    lags: np.ndarray  # int, [-max_lag .. max_lag]
    values: np.ndarray  # per-lag Pearson r over the overlap
    best_lag: int

    def at(self, lag: int) -> float:
        return float(self.values[list(self.lags).index(lag)])


@dataclass
class SpectrumEstimate:
    frequencies: np.ndarray  # Hz, 0 .. Nyquist
    power: np.ndarray  # unit^2 / Hz, one-sided
    sample_rate: float
    segment_length: int
    overlap: float
    window: str
    n_segments: int


@dataclass
class StabilitySummary:
    start_ns: int
    end_ns: int
    mean: float
    std: float  # sample (n-1) convention
    unit: str
    count: int


def _frame_name(frame: SeriesFrame) -> str:
    key = frame.key
    tags = "".join(f",{k}={v}" for k, v in key.tags)
    return f"{key.measurement}{tags}.{key.field}"


def align(
    frames: list[SeriesFrame], step_s: float, method: str = "linear"
) -> AlignedMatrix:
    """Resample frames onto a shared grid covering the overlap of all ranges.

    The grid starts at the latest first-sample and never extends past the
    earliest last-sample, so no series is extrapolated.
    """
    if method not in ALIGN_METHODS:
        raise ValueError(f"unknown alignment method {method!r}")
    if not frames:
        raise NoOverlap("no input series")
    for frame in frames:
        if len(frame) < 2:
            raise SingletonSeries(_frame_name(frame))
    step_ns = int(step_s * 1e9)
    if step_ns <= 0:
        raise ValueError("step must be positive")
    start = max(frame.timestamps[0] for frame in frames)
    end = min(frame.timestamps[-1] for frame in frames)
    if start > end:
        raise NoOverlap("series time ranges do not intersect")
    grid = np.arange(start, end + 1, step_ns, dtype=np.int64)
    cols = []
    masks = []
    for frame in frames:
        ts = np.asarray(frame.timestamps, dtype=np.int64)
        vals = np.asarray(frame.values, dtype=np.float64)
        if method == "linear":
            col = np.interp(grid, ts, vals)
        elif method == "nearest":
            idx = np.searchsorted(ts, grid, "left")
            idx = np.clip(idx, 1, len(ts) - 1)
            left_closer = (grid - ts[idx - 1]) <= (ts[idx] - grid)
            col = vals[np.where(left_closer, idx - 1, idx)]
        else:  # previous
            idx = np.searchsorted(ts, grid, "right") - 1
            col = vals[np.clip(idx, 0, None)]
        hit = np.searchsorted(ts, grid, "left")
        hit = np.clip(hit, 0, len(ts) - 1)
        masks.append(ts[hit] == grid)
        cols.append(col)
    return AlignedMatrix(
        times=grid,
        names=[_frame_name(f) for f in frames],
        units=[f.unit for f in frames],
        values=np.column_stack(cols),
        observed=np.column_stack(masks),
        step_ns=step_ns,
    )


def pearson(x: np.ndarray, y: np.ndarray) -> float:
    """Pearson r: covariance scaled by both standard deviations.

    Computed as sum(dx*dy)/sqrt(sum(dx^2)*sum(dy^2)); the n divisor
    cancels, so population vs sample convention cannot be observed here.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    if len(x) != len(y):
        raise ValueError("length mismatch")
    if len(x) < 2:
        raise TooShort("need at least two samples")
    dx = x - x.mean()
    dy = y - y.mean()
    sxx = float(dx @ dx)
    syy = float(dy @ dy)
    if sxx == 0.0:
        raise ZeroVariance("x")
    if syy == 0.0:
        raise ZeroVariance("y")
    return float((dx @ dy) / math.sqrt(sxx * syy))


def pearson_matrix(m: AlignedMatrix) -> CorrelationMatrix:
    """Pairwise Pearson coefficients over the aligned rows."""
    if m.n_rows < 2:
        raise TooShort("need at least two aligned rows")
    centered = m.values - m.values.mean(axis=0)
    norms = np.sqrt((centered**2).sum(axis=0))
    for j, norm in enumerate(norms):
        if norm == 0.0:
            raise ZeroVariance(m.names[j])
    r = (centered.T @ centered) / np.outer(norms, norms)
    r = (r + r.T) / 2.0
    np.fill_diagonal(r, 1.0)
    return CorrelationMatrix(list(m.names), r, m.n_rows)


def cross_correlation(
    x: np.ndarray, y: np.ndarray, max_lag: int
) -> CrossCorrelation:
    """Per-lag Pearson r between x[i] and y[i+k] for k in [-max_lag, max_lag].

    Normalizing per overlap keeps every value in [-1, 1]. The best lag is
    the argmax; ties break toward the smallest |k|.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = len(x)
    if len(y) != n:
        raise ValueError("length mismatch")
    if max_lag < 0:
        raise ValueError("max_lag must be non-negative")
    if n <= 2 * max_lag:
        raise TooShort(f"need more than {2 * max_lag} samples")
    if np.ptp(x) == 0.0:
        raise ZeroVariance("x")
    if np.ptp(y) == 0.0:
        raise ZeroVariance("y")
    lags = np.arange(-max_lag, max_lag + 1)
    values = np.empty(len(lags))
    for i, k in enumerate(lags):
        if k >= 0:
            a, b = x[: n - k], y[k:]
        else:
            a, b = x[-k:], y[: n + k]
        try:
            values[i] = pearson(a, b)
        except ZeroVariance:
            values[i] = 0.0  # constant overlap carries no lag information
    best = 0
    best_r = -np.inf
    for k in sorted(lags.tolist(), key=lambda k: (abs(k), k)):
        r_k = values[k + max_lag]
        if r_k > best_r:
            best_r = r_k
            best = k
    return CrossCorrelation(lags, values, int(best))


def _hann(n: int) -> np.ndarray:
    # periodic flavor: better segment-averaging behavior than symmetric
    return 0.5 - 0.5 * np.cos(2.0 * np.pi * np.arange(n) / n)


def default_segment_length(n: int) -> int:
    """Smallest power of two >= n/8, clamped to the signal length."""
    target = max(2, -(-n // 8))
    p = 2
    while p < target:
        p *= 2
    while p > n:
        p //= 2
    return max(p, 2)


def psd(
    x: np.ndarray,
    sample_rate: float,
    segment_length: int | None = None,
    overlap: float = 0.5,
    window: str = "hann",
) -> SpectrumEstimate:
    """One-sided averaged-periodogram PSD in unit^2/Hz.

    Each segment is mean-removed, windowed, Fourier transformed, and the
    squared magnitudes are scaled by fs * sum(w^2) and averaged.
    """
    x = np.asarray(x, dtype=np.float64)
    n = len(x)
    if n < 2:
        raise TooShort("need at least two samples")
    if sample_rate <= 0:
        raise ValueError("sample_rate must be positive")
    if not 0.0 <= overlap <= 0.9:
        raise ValueError("overlap must be within [0, 0.9]")
    if window not in WINDOWS:
        raise ValueError(f"unknown window {window!r}")
    nseg = default_segment_length(n) if segment_length is None else int(segment_length)
    if nseg < 2 or nseg > n:
        raise TooShort(f"segment_length {nseg} outside [2, {n}]")
    w = _hann(nseg) if window == "hann" else np.ones(nseg)
    wsum2 = float(w @ w)
    step = max(1, int(round(nseg * (1.0 - overlap))))
    acc = None
    count = 0
    for start in range(0, n - nseg + 1, step):
        seg = x[start : start + nseg]
        seg = (seg - seg.mean()) * w
        spectrum = np.abs(np.fft.rfft(seg)) ** 2
        acc = spectrum if acc is None else acc + spectrum
        count += 1
    power = acc / (count * sample_rate * wsum2)
    power[1:] *= 2.0
    if nseg % 2 == 0:
        power[-1] /= 2.0  # Nyquist bin is not mirrored
    freqs = np.fft.rfftfreq(nseg, d=1.0 / sample_rate)
    return SpectrumEstimate(freqs, power, sample_rate, nseg, overlap, window, count)


def summarize(frame: SeriesFrame, start_ns: int, end_ns: int) -> StabilitySummary:
    """Mean and sample standard deviation over [start, end)."""
    ts = np.asarray(frame.timestamps, dtype=np.int64)
    vals = np.asarray(frame.values, dtype=np.float64)
    lo = np.searchsorted(ts, start_ns, "left")
    hi = np.searchsorted(ts, end_ns, "left")
    window = vals[lo:hi]
    if len(window) < 2:
        raise InsufficientData(f"{len(window)} samples in window, need >= 2")
    return StabilitySummary(
        start_ns=int(start_ns),
        end_ns=int(end_ns),
        mean=float(window.mean()),
        std=float(window.std(ddof=1)),
        unit=frame.unit,
        count=int(len(window)),
    )


# ----------------------------------------------------------------------
# CSV import/export


def frame_to_csv(frame: SeriesFrame) -> str:
    buf = io.StringIO()
    buf.write(f"# series={frame.key.canonical()}\n")
    buf.write(f"# unit={frame.unit}\n")
    buf.write("time,value\n")
    for ts, val in zip(frame.timestamps, frame.values):
        buf.write(f"{ts},{val!r}\n")
    return buf.getvalue()


def frame_from_csv(text: str) -> SeriesFrame:
    key = SeriesKey("imported", (), "value")
    unit = ""
    timestamps: list[int] = []
    values: list[float] = []
    for line in text.splitlines():
        line = line.strip()
        if not line:
            continue
        if line.startswith("#"):
            body = line[1:].strip()
            if body.startswith("series="):
                key = SeriesKey.from_canonical(body[len("series=") :])
            elif body.startswith("unit="):
                unit = body[len("unit=") :]
            continue
        if line.lower().startswith("time,"):
            continue
        ts_raw, val_raw = line.split(",", 1)
        timestamps.append(int(ts_raw))
        values.append(float(val_raw))
    return SeriesFrame(key, unit, timestamps, values)


def correlation_to_csv(matrix: CorrelationMatrix) -> str:
    import csv

    buf = io.StringIO()
    buf.write(f"# pearson correlation matrix, n={matrix.samples}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["series"] + matrix.names)
    for i, name in enumerate(matrix.names):
        writer.writerow([name] + [f"{v:.6f}" for v in matrix.r[i]])
    return buf.getvalue()


def spectrum_to_csv(spec: SpectrumEstimate) -> str:
    buf = io.StringIO()
    buf.write(
        f"# psd unit^2/Hz, fs={spec.sample_rate} Hz, segment={spec.segment_length}, "
        f"overlap={spec.overlap}, window={spec.window}, segments={spec.n_segments}\n"
    )
    buf.write("frequency_hz,power\n")
    for f, p in zip(spec.frequencies, spec.power):
        buf.write(f"{f!r},{p!r}\n")
    return buf.getvalue()
