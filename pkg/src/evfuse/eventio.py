"""Event stream parsing, time slicing and frame stacking.

Events are held column-wise in numpy arrays rather than as per-event objects;
``EventStream.__iter__`` yields :class:`Event` tuples when a per-event view is
convenient (tests, debugging).
"""

from __future__ import annotations

import io
from dataclasses import dataclass
from typing import BinaryIO, Iterator, NamedTuple, TextIO, Union

import cv2
import numpy as np

from .errors import FormatError, ParseError

BINARY_DTYPE = np.dtype([("t", "<u8"), ("x", "<u2"), ("y", "<u2"), ("p", "i1")])


class Event(NamedTuple):
    x: int
    y: int
    polarity: int
    timestamp: int


@dataclass(frozen=True, eq=False)
class EventStream:
    """Time-ordered events from one sensor of size ``sensor_width`` x ``sensor_height``."""

    t: np.ndarray
    x: np.ndarray
    y: np.ndarray
    p: np.ndarray
    sensor_width: int = 0
    sensor_height: int = 0
    t_begin: int = 0
    t_end: int = 0

    def __post_init__(self):
        for name, dtype in (("t", np.int64), ("x", np.int64), ("y", np.int64), ("p", np.int8)):
            arr = np.ascontiguousarray(getattr(self, name), dtype=dtype)
            arr.setflags(write=False)
            object.__setattr__(self, name, arr)
        n = len(self.t)
        if not (len(self.x) == len(self.y) == len(self.p) == n):
            raise ValueError("event columns have different lengths")

    @classmethod
    def from_arrays(cls, t, x, y, p, sensor_width=0, sensor_height=0, t_begin=None, t_end=None):
        """Build a stream, stably sorting by timestamp and inferring missing bounds."""
        t = np.asarray(t, dtype=np.int64)
        order = np.argsort(t, kind="stable")
        t = t[order]
        x = np.asarray(x, dtype=np.int64)[order]
        y = np.asarray(y, dtype=np.int64)[order]
        p = np.asarray(p, dtype=np.int8)[order]
        if t_begin is None:
            t_begin = int(t[0]) if len(t) else 0
        if t_end is None:
            t_end = int(t[-1]) if len(t) else 0
        if not sensor_width and len(x):
            sensor_width = int(x.max()) + 1
        if not sensor_height and len(y):
            sensor_height = int(y.max()) + 1
        return cls(t, x, y, p, int(sensor_width), int(sensor_height), int(t_begin), int(t_end))

    @classmethod
    def empty(cls, sensor_width=0, sensor_height=0, t_begin=0, t_end=0):
        z = np.zeros(0, dtype=np.int64)
        return cls(z, z, z, z.astype(np.int8), sensor_width, sensor_height, t_begin, t_end)

    def __len__(self):
        return len(self.t)

    def __iter__(self) -> Iterator[Event]:
        for x, y, p, t in zip(self.x.tolist(), self.y.tolist(), self.p.tolist(), self.t.tolist()):
            yield Event(x, y, p, t)

    def __eq__(self, other):
        if not isinstance(other, EventStream):
            return NotImplemented
        return (
            (self.sensor_width, self.sensor_height, self.t_begin, self.t_end)
            == (other.sensor_width, other.sensor_height, other.t_begin, other.t_end)
            and np.array_equal(self.t, other.t)
            and np.array_equal(self.x, other.x)
            and np.array_equal(self.y, other.y)
            and np.array_equal(self.p, other.p)
        )

    def concat(self, other: "EventStream") -> "EventStream":
        return EventStream.from_arrays(
            np.concatenate([self.t, other.t]),
            np.concatenate([self.x, other.x]),
            np.concatenate([self.y, other.y]),
            np.concatenate([self.p, other.p]),
            max(self.sensor_width, other.sensor_width),
            max(self.sensor_height, other.sensor_height),
            min(self.t_begin, other.t_begin),
            max(self.t_end, other.t_end),
        )


@dataclass(frozen=True, eq=False)
class EventFrame:
    """ON/OFF count surfaces over the half-open window ``[t_start, t_end)``.

    Channels are ``(height, width)`` arrays indexed ``[row, col]``. Counts are
    integers straight out of :func:`stack_events` and become non-negative reals
    after :func:`resize_event_frame`.
    """

    on_channel: np.ndarray
    off_channel: np.ndarray
    t_start: int = 0
    t_end: int = 0

    def __post_init__(self):
        if self.on_channel.shape != self.off_channel.shape or self.on_channel.ndim != 2:
            raise ValueError("on/off channels must be 2-D arrays of identical shape")

    @property
    def height(self) -> int:
        return self.on_channel.shape[0]

    @property
    def width(self) -> int:
        return self.on_channel.shape[1]


def _remap_polarity(p: np.ndarray, where) -> np.ndarray:
    vals = set(np.unique(p).tolist())
    if vals <= {-1, 1}:
        return p.astype(np.int8)
    if vals <= {0, 1}:
        return np.where(p > 0, 1, -1).astype(np.int8)
    bad = sorted(vals - {-1, 0, 1}) or sorted(vals)
    idx = int(np.flatnonzero(np.isin(p, bad))[0]) if bad else 0
    raise FormatError(f"polarity values {sorted(vals)} not in {{-1,+1}} or {{0,1}} {where(idx)}")


def parse_event_stream(
    source: Union[str, bytes, TextIO, BinaryIO],
    format: str = "csv",
    sensor_width: int = 0,
    sensor_height: int = 0,
) -> EventStream:
    """Decode ``t,x,y,p`` rows (csv) or packed little-endian records (binary).

    Polarity encoded as ``{0, 1}`` is remapped to ``{-1, +1}``. Out-of-order
    rows are stably sorted by timestamp. Mixing ``-1`` and ``0`` is rejected.
    """
    if format == "csv":
        if hasattr(source, "read"):
            source = source.read()
        if isinstance(source, bytes):
            source = source.decode("utf-8")
        rows = []
        for lineno, line in enumerate(source.splitlines(), start=1):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != 4:
                raise ParseError(f"expected 4 fields t,x,y,p, got {len(parts)}", line=lineno)
            try:
                rows.append([int(v) for v in parts])
            except ValueError:
                raise ParseError(f"non-integer field in {line!r}", line=lineno) from None
        arr = np.asarray(rows, dtype=np.int64).reshape(-1, 4)
        t, x, y, p = arr.T
        where = lambda i: f"(line {i + 1})"  # noqa: E731
    elif format in ("binary", "binary-packed", "bin"):
        if hasattr(source, "read"):
            source = source.read()
        if len(source) % BINARY_DTYPE.itemsize:
            raise ParseError(
                f"binary payload of {len(source)} bytes is not a multiple of the "
                f"{BINARY_DTYPE.itemsize}-byte record",
                offset=len(source) - len(source) % BINARY_DTYPE.itemsize,
            )
        rec = np.frombuffer(source, dtype=BINARY_DTYPE)
        t = rec["t"].astype(np.int64)
        x = rec["x"].astype(np.int64)
        y = rec["y"].astype(np.int64)
        p = rec["p"].astype(np.int64)
        where = lambda i: f"(offset {i * BINARY_DTYPE.itemsize})"  # noqa: E731
    else:
        raise ValueError(f"unknown event format {format!r}")

    if len(t) == 0:
        return EventStream.empty(sensor_width, sensor_height)
    p = _remap_polarity(p, where)
    if (x < 0).any() or (y < 0).any():
        raise FormatError(f"negative coordinate {where(int(np.flatnonzero((x < 0) | (y < 0))[0]))}")
    return EventStream.from_arrays(t, x, y, p, sensor_width, sensor_height)


def serialize_event_stream(stream: EventStream, format: str = "csv") -> bytes:
    if format == "csv":
        buf = io.StringIO()
        for t, x, y, p in zip(stream.t.tolist(), stream.x.tolist(), stream.y.tolist(), stream.p.tolist()):
            buf.write(f"{t},{x},{y},{p}\n")
        return buf.getvalue().encode("utf-8")
    if format in ("binary", "binary-packed", "bin"):
        rec = np.empty(len(stream), dtype=BINARY_DTYPE)
        rec["t"], rec["x"], rec["y"], rec["p"] = stream.t, stream.x, stream.y, stream.p
        return rec.tobytes()
    raise ValueError(f"unknown event format {format!r}")


def slice_events(stream: EventStream, t0: int, t1: int) -> EventStream:
    """Events with ``t0 <= t < t1``; the result's time bounds are ``[t0, t1)``."""
    if t0 > t1:
        raise ValueError(f"slice start {t0} is after end {t1}")
    lo = np.searchsorted(stream.t, t0, side="left")
    hi = np.searchsorted(stream.t, t1, side="left")
    return EventStream(
        stream.t[lo:hi], stream.x[lo:hi], stream.y[lo:hi], stream.p[lo:hi],
        stream.sensor_width, stream.sensor_height, int(t0), int(t1),
    )


def stack_events(stream: EventStream, width: int, height: int) -> EventFrame:
    bad = np.flatnonzero((stream.x < 0) | (stream.x >= width) | (stream.y < 0) | (stream.y >= height))
    if len(bad):
        i = int(bad[0])
        raise IndexError(
            f"event {i} at (x={stream.x[i]}, y={stream.y[i]}) lies outside {width}x{height}"
        )
    flat = stream.y * width + stream.x
    on = np.bincount(flat[stream.p > 0], minlength=width * height).reshape(height, width)
    off = np.bincount(flat[stream.p < 0], minlength=width * height).reshape(height, width)
    return EventFrame(on, off, stream.t_begin, stream.t_end)


def resize_event_frame(frame: EventFrame, target_w: int, target_h: int) -> EventFrame:
    """Bilinear resampling of each channel (half-pixel-centre convention)."""
    if target_w <= 0 or target_h <= 0:
        raise ValueError(f"target size must be positive, got {target_w}x{target_h}")
    if (target_w, target_h) == (frame.width, frame.height):
        return frame

    def rs(ch):
        out = cv2.resize(ch.astype(np.float64), (target_w, target_h), interpolation=cv2.INTER_LINEAR)
        return np.maximum(out, 0.0)

    return EventFrame(rs(frame.on_channel), rs(frame.off_channel), frame.t_start, frame.t_end)


def normalize_event_frame(frame: EventFrame) -> np.ndarray:
    """Render to an ``(H, W, 3)`` float image in ``[0, 1]``: on, off, on+off, each max-scaled."""
    chans = [frame.on_channel, frame.off_channel, frame.on_channel + frame.off_channel]
    out = np.zeros((frame.height, frame.width, 3), dtype=np.float64)
    for i, ch in enumerate(chans):
        m = float(np.max(ch)) if ch.size else 0.0
        if m > 0:
            out[..., i] = ch / m
    return out
