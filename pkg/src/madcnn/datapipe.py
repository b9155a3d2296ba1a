"""Trace containers, min/max normalization, window extraction, dataset
assembly, and the on-disk trace format.

A trace is a 1 kHz recording of per-joint torque and velocity with a binary
contact label per sample. Network input frames gather 11 points per joint
spanning the last 100 samples (stride 10, oldest to newest), normalized
into [0, 1] with statistics frozen from the training traces.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError, ShapeError, TraceFormatError

SAMPLE_RATE_HZ = 1000
WINDOW_POINTS = 11
POINT_STRIDE = 10
HISTORY_SAMPLES = (WINDOW_POINTS - 1) * POINT_STRIDE  # 100
N_JOINTS = 2
N_CHANNELS = 4  # tau1, vel1, tau2, vel2

TRACE_HEADER = ("time_ms", "tau1", "vel1", "tau2", "vel2", "label", "stiffness")

_WINDOW_OFFSETS = np.arange(0, HISTORY_SAMPLES + 1, POINT_STRIDE)


@dataclass
class Trace:
    """One labeled recording at a fixed stiffness level.

    torque, velocity: (2, N) arrays in N·m and rad/s; label: (N,) in {0, 1}.
    """

    torque: np.ndarray
    velocity: np.ndarray
    label: np.ndarray
    stiffness_level: int
    sample_rate: int = SAMPLE_RATE_HZ

    def __post_init__(self):
        self.torque = np.asarray(self.torque, dtype=np.float64)
        self.velocity = np.asarray(self.velocity, dtype=np.float64)
        self.label = np.asarray(self.label, dtype=np.int8)
        if self.sample_rate != SAMPLE_RATE_HZ:
            raise ConfigError(f"sample rate is fixed at {SAMPLE_RATE_HZ} Hz")
        n = self.label.shape[0] if self.label.ndim == 1 else -1
        if self.torque.shape != (N_JOINTS, n) or self.velocity.shape != (N_JOINTS, n):
            raise ShapeError("torque/velocity must be (2, N) matching the label length")
        if n < 1:
            raise ShapeError("trace must contain at least one sample")
        if not np.isin(self.label, (0, 1)).all():
            raise ValueError("labels must be 0 or 1")
        if self.stiffness_level not in (2, 3, 4):
            raise ConfigError("stiffness level must be 2, 3, or 4")

    @property
    def n_samples(self) -> int:
        return self.label.shape[0]

    @property
    def duration_s(self) -> float:
        return self.n_samples / self.sample_rate

    def channel_matrix(self) -> np.ndarray:
        """(4, N) rows ordered tau1, vel1, tau2, vel2."""
        return np.stack(
            [self.torque[0], self.velocity[0], self.torque[1], self.velocity[1]]
        )


@dataclass
class NormalizationStats:
    """Per-channel min/max in native units; channels as in channel_matrix."""

    channel_min: np.ndarray
    channel_max: np.ndarray

    def __post_init__(self):
        self.channel_min = np.asarray(self.channel_min, dtype=np.float64)
        self.channel_max = np.asarray(self.channel_max, dtype=np.float64)
        if self.channel_min.shape != (N_CHANNELS,) or self.channel_max.shape != (N_CHANNELS,):
            raise ShapeError(f"stats must cover {N_CHANNELS} channels")
        if (self.channel_max < self.channel_min).any():
            raise ValueError("channel max must be >= channel min")


def fit_normalizer(traces) -> NormalizationStats:
    """Per-channel min/max over every sample of the given traces."""
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace to fit normalization stats")
    mats = [t.channel_matrix() for t in traces]
    lo = np.min([m.min(axis=1) for m in mats], axis=0)
    hi = np.max([m.max(axis=1) for m in mats], axis=0)
    return NormalizationStats(lo, hi)


def normalize(x, channel_min: float, channel_max: float):
    """(x - min) / (max - min), clipped into [0, 1]; constant channels map to 0."""
    x = np.asarray(x, dtype=np.float64)
    span = channel_max - channel_min
    if span == 0.0:
        out = np.zeros_like(x)
    else:
        out = np.clip((x - channel_min) / span, 0.0, 1.0)
    return out if out.ndim else float(out)


def normalized_signals(trace: Trace, stats: NormalizationStats) -> np.ndarray:
    """(joints, channels, N) array of normalized torque/velocity rows."""
    mat = trace.channel_matrix()
    rows = [normalize(mat[c], stats.channel_min[c], stats.channel_max[c]) for c in range(N_CHANNELS)]
    return np.stack(rows).reshape(N_JOINTS, 2, trace.n_samples)


@dataclass
class InputFrame:
    """One network input: values (joints, channels, steps) in [0, 1].

    Channel 0 is torque, channel 1 velocity; steps run oldest to newest
    with a stride of POINT_STRIDE samples, ending at source_time_ms.
    """

    values: np.ndarray
    label: int
    source_time_ms: int
    stiffness_level: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.shape != (N_JOINTS, 2, WINDOW_POINTS):
            raise ShapeError(f"frame values must be (2, 2, {WINDOW_POINTS})")
        if self.values.min() < 0.0 or self.values.max() > 1.0:
            raise ValueError("frame values must lie in [0, 1]")
        if self.label not in (0, 1):
            raise ValueError("frame label must be 0 or 1")


def window_frame(trace: Trace, t: int, stats: NormalizationStats) -> InputFrame:
    """Frame ending at sample t; needs the -100..0 history at stride 10."""
    t = int(t)
    if t < HISTORY_SAMPLES or t >= trace.n_samples:
        raise IndexError(
            f"t={t} out of range; need {HISTORY_SAMPLES} <= t < {trace.n_samples}"
        )
    idx = t - HISTORY_SAMPLES + _WINDOW_OFFSETS
    values = normalized_signals(trace, stats)[:, :, idx]
    return InputFrame(values, int(trace.label[t]), t, trace.stiffness_level)


def trace_windows(
    trace: Trace, stats: NormalizationStats, start: int | None = None, stop: int | None = None
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """All frames of a trace at once: (values (F,2,2,11), labels (F,), times (F,)).

    Equivalent to window_frame at every valid t, vectorized.
    """
    n = trace.n_samples
    start = HISTORY_SAMPLES if start is None else max(start, HISTORY_SAMPLES)
    stop = n if stop is None else min(stop, n)
    times = np.arange(start, stop)
    if times.size == 0:
        return np.zeros((0, N_JOINTS, 2, WINDOW_POINTS)), np.zeros(0, dtype=np.int8), times
    norm = normalized_signals(trace, stats)
    idx = times[:, None] - HISTORY_SAMPLES + _WINDOW_OFFSETS[None, :]
    values = norm[:, :, idx].transpose(2, 0, 1, 3).copy()
    return values, trace.label[times].copy(), times


def make_dataset(traces, stats: NormalizationStats, seed: int) -> list[InputFrame]:
    """One frame per valid sample of every trace, in a seeded shuffle order."""
    traces = list(traces)
    if not traces:
        raise ValueError("need at least one trace")
    frames: list[InputFrame] = []
    for trace in traces:
        values, labels, times = trace_windows(trace, stats)
        for k in range(times.size):
            frames.append(
                InputFrame(values[k], int(labels[k]), int(times[k]), trace.stiffness_level)
            )
    order = np.random.default_rng(seed).permutation(len(frames))
    return [frames[i] for i in order]


def frames_to_arrays(frames) -> tuple[np.ndarray, np.ndarray]:
    """Stack a frame list into (values (F,2,2,11), labels (F,))."""
    frames = list(frames)
    if not frames:
        raise ValueError("empty frame list")
    values = np.stack([f.values for f in frames])
    labels = np.asarray([f.label for f in frames], dtype=np.float64)
    return values, labels


# ---------------------------------------------------------------------------
# trace file format: CSV, one row per sample


def _format_float(x: float) -> str:
    return repr(float(x))


def write_trace(trace: Trace, path) -> None:
    """Plain-text CSV; float fields use shortest round-trip decimals."""
    tau, vel = trace.torque.tolist(), trace.velocity.tolist()
    label = trace.label.tolist()
    stiff = str(trace.stiffness_level)
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(",".join(TRACE_HEADER) + "\n")
        rows = []
        for t in range(trace.n_samples):
            rows.append(
                f"{t},{tau[0][t]!r},{vel[0][t]!r},{tau[1][t]!r},{vel[1][t]!r},"
                f"{label[t]},{stiff}\n"
            )
        fh.writelines(rows)


def _parse_rows_strict(lines) -> tuple[np.ndarray, int]:
    """Slow path: per-line parsing that reports the offending line number."""
    data = []
    for lineno, line in enumerate(lines, start=2):
        line = line.strip()
        if not line:
            raise TraceFormatError("blank row", line=lineno)
        fields = line.split(",")
        if len(fields) != len(TRACE_HEADER):
            raise TraceFormatError(
                f"expected {len(TRACE_HEADER)} fields, found {len(fields)}", line=lineno
            )
        try:
            data.append([float(f) for f in fields])
        except ValueError as exc:
            raise TraceFormatError(f"non-numeric field ({exc})", line=lineno) from None
    return np.asarray(data, dtype=np.float64), len(data)


def read_trace(path) -> Trace:
    """Parse a trace CSV; malformed input raises TraceFormatError with a line."""
    with open(path, "r", encoding="utf-8") as fh:
        header = fh.readline().strip()
        if header.split(",") != list(TRACE_HEADER):
            raise TraceFormatError(f"bad header {header!r}", line=1)
        lines = fh.readlines()
    if not lines:
        raise TraceFormatError("trace contains no samples", line=2)
    try:
        data = np.asarray(
            [line.split(",") for line in lines if line.strip()], dtype=np.float64
        )
        if data.ndim != 2 or data.shape[1] != len(TRACE_HEADER) or data.shape[0] != len(lines):
            data, _ = _parse_rows_strict(lines)
    except ValueError:
        data, _ = _parse_rows_strict(lines)

    times = data[:, 0]
    expected = np.arange(data.shape[0], dtype=np.float64)
    if not np.array_equal(times, expected):
        bad = int(np.argmax(times != expected))
        raise TraceFormatError(
            f"time_ms must count samples from 0; found {times[bad]:g}", line=bad + 2
        )
    labels = data[:, 5]
    if not np.isin(labels, (0.0, 1.0)).all():
        bad = int(np.argmax(~np.isin(labels, (0.0, 1.0))))
        raise TraceFormatError(f"label must be 0 or 1, found {labels[bad]:g}", line=bad + 2)
    stiff = data[:, 6]
    if not np.all(stiff == stiff[0]):
        bad = int(np.argmax(stiff != stiff[0]))
        raise TraceFormatError("stiffness must be constant over the file", line=bad + 2)
    if stiff[0] not in (2.0, 3.0, 4.0):
        raise TraceFormatError(f"stiffness must be 2, 3, or 4, found {stiff[0]:g}", line=2)
    torque = np.stack([data[:, 1], data[:, 3]])
    velocity = np.stack([data[:, 2], data[:, 4]])
    return Trace(torque, velocity, labels.astype(np.int8), int(stiff[0]))
