"""Event-camera streams: simulation from frames, voxel grids, windows and files.

Timestamps are integer microseconds throughout so that window arithmetic
is exact.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, NamedTuple, Optional, Sequence

import numpy as np

from .errors import DomainError, OrderingError, ParameterError, ParseError, ShapeError

DEFAULT_THRESHOLD = 0.2
MIN_INTENSITY = 1e-3
US = 1_000_000


class Event(NamedTuple):
    t: int
    x: int
    y: int
    p: int


@dataclass(frozen=True)
class EventStream:
    """Time-ordered events from a ``width`` x ``height`` sensor.

    ``t_start``/``t_end`` give the covered time span; they default to the
    first/last timestamp.
    """

    width: int
    height: int
    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    threshold: Optional[float] = None
    t_start: Optional[int] = None
    t_end: Optional[int] = None

    def __post_init__(self):
        t = np.asarray(self.t, dtype=np.int64).reshape(-1)
        x = np.asarray(self.x, dtype=np.int64).reshape(-1)
        y = np.asarray(self.y, dtype=np.int64).reshape(-1)
        p = np.asarray(self.p, dtype=np.int64).reshape(-1)
        if not (len(t) == len(x) == len(y) == len(p)):
            raise ShapeError("event field arrays differ in length")
        if len(t):
            if x.min() < 0 or x.max() >= self.width or y.min() < 0 or y.max() >= self.height:
                raise DomainError(f"event coordinates outside {self.width}x{self.height} sensor")
            if not np.all((p == 1) | (p == -1)):
                raise DomainError("polarity must be -1 or +1")
            if np.any(np.diff(t) < 0):
                raise OrderingError("event timestamps must be nondecreasing")
        for name, arr in (("t", t), ("x", x), ("y", y), ("p", p)):
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        if self.t_start is None:
            object.__setattr__(self, "t_start", int(t[0]) if len(t) else 0)
        if self.t_end is None:
            object.__setattr__(self, "t_end", int(t[-1]) if len(t) else self.t_start)

    @classmethod
    def from_events(cls, width: int, height: int, events: Sequence[Event], **kw) -> "EventStream":
        arr = np.array([tuple(e) for e in events], dtype=np.int64).reshape(-1, 4)
        return cls(width, height, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3], **kw)

    def __len__(self) -> int:
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for row in zip(self.t.tolist(), self.x.tolist(), self.y.tolist(), self.p.tolist()):
            yield Event(*row)

    @property
    def span_us(self) -> int:
        return self.t_end - self.t_start

    def between(self, t0: int, t1: int) -> "EventStream":
        """Events with ``t0 <= t <= t1``."""
        lo = np.searchsorted(self.t, t0, side="left")
        hi = np.searchsorted(self.t, t1, side="right")
        return EventStream(self.width, self.height, self.t[lo:hi], self.x[lo:hi], self.y[lo:hi],
                           self.p[lo:hi], self.threshold, t0, t1)


@dataclass(frozen=True)
class FrameSequence:
    """RGB frames in ``[0, 1]`` (N x H x W x 3) at uniformly spaced timestamps."""

    frames: np.ndarray
    timestamps: np.ndarray

    def __post_init__(self):
        frames = np.asarray(self.frames, dtype=np.float64)
        ts = np.asarray(self.timestamps, dtype=np.int64)
        if frames.ndim != 4 or frames.shape[-1] != 3:
            raise ShapeError(f"frames must be N x H x W x 3, got {frames.shape}")
        if len(ts) != len(frames):
            raise ShapeError("one timestamp per frame required")
        if len(ts) > 2 and len(set(np.diff(ts).tolist())) != 1:
            raise ParameterError("frame timestamps must be uniformly spaced")
        object.__setattr__(self, "frames", frames)
        object.__setattr__(self, "timestamps", ts)

    @classmethod
    def at_rate(cls, frames, rate_hz: float = 20.0, t0: int = 0) -> "FrameSequence":
        step = int(round(US / rate_hz))
        return cls(frames, t0 + step * np.arange(len(frames), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.frames)

    @property
    def height(self) -> int:
        return self.frames.shape[1]

    @property
    def width(self) -> int:
        return self.frames.shape[2]

    def index_at(self, t_us: int) -> int:
        """Index of the most recent frame at or before ``t_us`` (0 if none)."""
        return max(int(np.searchsorted(self.timestamps, t_us, side="right")) - 1, 0)


def log_intensity(frames: np.ndarray) -> np.ndarray:
    """Log of the RGB-mean luminance, clamped below at ``MIN_INTENSITY``."""
    lum = np.asarray(frames, dtype=np.float64).mean(axis=-1)
    return np.log(np.maximum(lum, MIN_INTENSITY))


def events_from_log_frames(log_frames: np.ndarray, timestamps: np.ndarray,
                           threshold: float = DEFAULT_THRESHOLD) -> tuple[EventStream, np.ndarray]:
    """Threshold-crossing events from a sequence of log-intensity images.

    Each pixel keeps a reference level. At every frame transition the gap
    between the new log intensity and the reference yields
    ``floor(|gap| / threshold)`` events of the gap's sign; the reference
    advances by that many thresholds, so the remainder carries forward.
    Crossing times are interpolated linearly inside the transition.

    Returns the stream and the final per-pixel residual (log - reference).
    """
    if not threshold > 0:
        raise ParameterError(f"event threshold must be > 0, got {threshold}")
    log_frames = np.asarray(log_frames, dtype=np.float64)
    timestamps = np.asarray(timestamps, dtype=np.int64)
    if len(log_frames) < 2:
        raise ParameterError("at least two frames are needed to simulate events")
    n_frames, h, w = log_frames.shape
    ref = log_frames[0].copy()
    ts, xs, ys, ps = [], [], [], []
    for k in range(1, n_frames):
        prev, cur = log_frames[k - 1], log_frames[k]
        gap = cur - ref
        count = np.floor(np.abs(gap) / threshold + 1e-9).astype(np.int64)
        yy, xx = np.nonzero(count)
        if len(yy):
            n = count[yy, xx]
            sign = np.sign(gap[yy, xx])
            rep = np.repeat(np.arange(len(yy)), n)
            j = np.concatenate([np.arange(1, m + 1) for m in n]).astype(np.float64)
            level = ref[yy, xx][rep] + sign[rep] * j * threshold
            p0, p1 = prev[yy, xx][rep], cur[yy, xx][rep]
            denom = p1 - p0
            frac = np.where(denom != 0, (level - p0) / np.where(denom != 0, denom, 1.0), 1.0)
            frac = np.clip(frac, 0.0, 1.0)
            t0, t1 = timestamps[k - 1], timestamps[k]
            ts.append(t0 + np.rint(frac * (t1 - t0)).astype(np.int64))
            xs.append(xx[rep])
            ys.append(yy[rep])
            ps.append(sign[rep].astype(np.int64))
            ref[yy, xx] += sign * n * threshold
    if ts:
        t, x, y, p = (np.concatenate(a) for a in (ts, xs, ys, ps))
        order = np.lexsort((x, y, t))
        t, x, y, p = t[order], x[order], y[order], p[order]
    else:
        t = x = y = p = np.zeros(0, dtype=np.int64)
    stream = EventStream(w, h, t, x, y, p, threshold=threshold,
                         t_start=int(timestamps[0]), t_end=int(timestamps[-1]))
    return stream, log_frames[-1] - ref


def simulate_events(frames: FrameSequence, threshold: float = DEFAULT_THRESHOLD) -> EventStream:
    """Synthetic event stream for an RGB frame sequence (see ``events_from_log_frames``)."""
    if not threshold > 0:
        raise ParameterError(f"event threshold must be > 0, got {threshold}")
    if len(frames) < 2:
        raise ParameterError("at least two frames are needed to simulate events")
    stream, _ = events_from_log_frames(log_intensity(frames.frames), frames.timestamps, threshold)
    return stream


@dataclass(frozen=True)
class VoxelGrid:
    """T x 2 x H x W event counts; channel 0 positive, channel 1 negative."""

    data: np.ndarray
    t0: int
    t1: int
    n_ignored: int = 0

    @property
    def bins(self) -> int:
        return self.data.shape[0]


def voxelize(events: EventStream, t0: int, t1: int, bins: int, normalize: bool = False) -> VoxelGrid:
    """Histogram events in ``[t0, t1]`` into ``bins`` equal time slices.

    An event at time t lands in ``floor(bins * (t - t0) / (t1 - t0))``,
    clamped to the last bin; events outside the interval are counted in
    ``n_ignored``. ``normalize`` divides by the grid maximum.
    """
    if bins < 1:
        raise ParameterError(f"bins must be >= 1, got {bins}")
    length = int(t1) - int(t0)
    if length <= 0:
        raise ParameterError(f"empty voxel interval [{t0}, {t1}]")
    inside = (events.t >= t0) & (events.t <= t1)
    t, x, y, p = events.t[inside], events.x[inside], events.y[inside], events.p[inside]
    b = np.minimum((bins * (t - t0)) // length, bins - 1)
    ch = (p < 0).astype(np.int64)
    h, w = events.height, events.width
    flat = ((b * 2 + ch) * h + y) * w + x
    counts = np.bincount(flat, minlength=bins * 2 * h * w).astype(np.float64)
    data = counts.reshape(bins, 2, h, w)
    if normalize and data.max() > 0:
        data = data / data.max()
    return VoxelGrid(data, int(t0), int(t1), int((~inside).sum()))


class Window(NamedTuple):
    start: int
    end: int

    @property
    def start_s(self) -> float:
        return self.start / US


def sliding_windows(stream: EventStream, length: float = 0.05, stride: float = 0.0125,
                    t_start: Optional[int] = None, t_end: Optional[int] = None) -> list[Window]:
    """Windows of ``length`` seconds starting every ``stride`` seconds.

    A window is kept while it ends at or before the stream end; a stream
    shorter than one window gives an empty list.
    """
    length_us, stride_us = int(round(length * US)), int(round(stride * US))
    if stride_us <= 0:
        raise ParameterError("stride must be > 0")
    if length_us < stride_us:
        raise ParameterError("window length must be >= stride")
    start = stream.t_start if t_start is None else int(t_start)
    end = stream.t_end if t_end is None else int(t_end)
    if end - start < length_us:
        return []
    count = (end - start - length_us) // stride_us + 1
    return [Window(start + k * stride_us, start + k * stride_us + length_us) for k in range(count)]


# -- files ---------------------------------------------------------------------

def write_events(stream: EventStream, path) -> None:
    """Text format: header ``w,h`` then ``t_us,x,y,p`` per line."""
    lines = [f"{stream.width},{stream.height}"]
    lines += [f"{t},{x},{y},{p}" for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(),
                                                       stream.y.tolist(), stream.p.tolist())]
    Path(path).write_text("\n".join(lines) + "\n", encoding="ascii")


def read_events(path) -> EventStream:
    text = Path(path).read_text(encoding="ascii")
    lines = text.splitlines()
    if not lines:
        raise ParseError("missing header", line=1)
    try:
        w, h = (int(v) for v in lines[0].split(","))
    except ValueError:
        raise ParseError(f"bad header {lines[0]!r}, expected 'w,h'", line=1) from None
    rows = []
    last_t = None
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        parts = line.split(",")
        try:
            if len(parts) != 4:
                raise ValueError
            t, x, y, p = (int(v) for v in parts)
        except ValueError:
            raise ParseError(f"expected 't_us,x,y,p', got {line!r}", line=lineno) from None
        if p not in (-1, 1):
            raise ParseError(f"polarity must be -1 or 1, got {p}", line=lineno)
        if not (0 <= x < w and 0 <= y < h):
            raise ParseError(f"pixel ({x},{y}) outside {w}x{h} sensor", line=lineno)
        if last_t is not None and t < last_t:
            raise OrderingError(f"timestamp {t} earlier than previous {last_t}", line=lineno)
        last_t = t
        rows.append((t, x, y, p))
    arr = np.array(rows, dtype=np.int64).reshape(-1, 4)
    return EventStream(w, h, arr[:, 0], arr[:, 1], arr[:, 2], arr[:, 3])


def write_ppm(path, image: np.ndarray) -> None:
    """Binary P6 PPM from an H x W x 3 float image in [0, 1]."""
    img = np.clip(np.rint(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    h, w, _ = img.shape
    with open(path, "wb") as fh:
        fh.write(f"P6\n{w} {h}\n255\n".encode("ascii"))
        fh.write(img.tobytes())


def read_ppm(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos:pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos].decode("ascii"))
    if tokens[0] != "P6" or tokens[3] != "255":
        raise ParseError(f"{path}: only 8-bit binary P6 PPM is supported")
    w, h = int(tokens[1]), int(tokens[2])
    data = np.frombuffer(raw[pos + 1:pos + 1 + w * h * 3], dtype=np.uint8)
    return data.reshape(h, w, 3).astype(np.float64) / 255.0


def write_frames(frames: FrameSequence, directory, index_name: str = "frames.txt") -> Path:
    """PPM files plus an index of ``timestamp_us,path`` lines; returns the index path."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    lines = []
    for i, (img, t) in enumerate(zip(frames.frames, frames.timestamps.tolist())):
        name = f"frame_{i:05d}.ppm"
        write_ppm(directory / name, img)
        lines.append(f"{t},{name}")
    index = directory / index_name
    index.write_text("\n".join(lines) + "\n", encoding="ascii")
    return index


def read_frames(index_path) -> FrameSequence:
    index_path = Path(index_path)
    ts, imgs = [], []
    for lineno, line in enumerate(index_path.read_text(encoding="ascii").splitlines(), start=1):
        if not line.strip():
            continue
        try:
            t, rel = line.split(",", 1)
            ts.append(int(t))
        except ValueError:
            raise ParseError(f"expected 'timestamp_us,path', got {line!r}", line=lineno) from None
        imgs.append(read_ppm(index_path.parent / rel))
    return FrameSequence(np.stack(imgs), np.array(ts, dtype=np.int64))
