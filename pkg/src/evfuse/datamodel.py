"""Sequence records, on-disk layout, loose RGB/event pairing, cropping and a
synthetic unaligned-sequence generator.

Directory layout read and written here::

    <seq>/rgb/000000.png ...     one image per frame
    <seq>/timestamps.txt         one integer (microseconds) per frame
    <seq>/events.csv | .bin      t,x,y,p rows or packed records
    <seq>/groundtruth.txt        x,y,w,h per frame; ``nan,nan,nan,nan`` = absent
    <seq>/attributes.txt         optional, comma/whitespace separated codes
    <seq>/meta.json              optional: split, sensor size, stream bounds, synth settings
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence, Union

import cv2
import numpy as np
from scipy import ndimage

from .errors import IntegrityError, VocabularyError
from .eventio import (
    EventFrame,
    EventStream,
    normalize_event_frame,
    parse_event_stream,
    resize_event_frame,
    serialize_event_stream,
    slice_events,
    stack_events,
)

ATTRIBUTES = (
    "CM", "ROT", "DEF", "FOC", "LI", "OV", "POC", "VC", "SV",
    "BC", "MB", "ARC", "FM", "NM", "IV", "OE", "BOM",
)


@dataclass(frozen=True)
class BoundingBox:
    """Axis-aligned box: top-left ``(x, y)`` plus width and height, in pixels."""

    x: float
    y: float
    w: float
    h: float

    def __post_init__(self):
        if self.w < 0 or self.h < 0:
            raise ValueError(f"negative box size {self.w}x{self.h}")

    @property
    def cx(self) -> float:
        return self.x + self.w / 2

    @property
    def cy(self) -> float:
        return self.y + self.h / 2

    @property
    def area(self) -> float:
        return self.w * self.h

    @classmethod
    def from_center(cls, cx, cy, w, h):
        return cls(cx - w / 2, cy - h / 2, w, h)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.w, self.h], dtype=np.float64)

    def clip(self, width: float, height: float, min_size: float = 1.0) -> "BoundingBox":
        """Clip to ``[0, width] x [0, height]`` keeping at least ``min_size`` per side."""
        x0 = min(max(self.x, 0.0), width - min_size)
        y0 = min(max(self.y, 0.0), height - min_size)
        x1 = min(max(self.x + self.w, x0 + min_size), width)
        y1 = min(max(self.y + self.h, y0 + min_size), height)
        return BoundingBox(x0, y0, x1 - x0, y1 - y0)


@dataclass(eq=False)
class SequenceRecord:
    name: str
    timestamps: np.ndarray
    rgb_frames: list
    events: EventStream
    groundtruth: list
    attributes: tuple = ()
    split: str = "train"
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.int64)
        if len(self.rgb_frames) == 0:
            raise IntegrityError(f"sequence {self.name!r} has no frames")
        if not (len(self.rgb_frames) == len(self.timestamps) == len(self.groundtruth)):
            raise IntegrityError(
                f"sequence {self.name!r}: {len(self.rgb_frames)} frames, "
                f"{len(self.timestamps)} timestamps, {len(self.groundtruth)} groundtruth rows"
            )
        unknown = [a for a in self.attributes if a not in ATTRIBUTES]
        if unknown:
            raise VocabularyError(f"unknown attribute codes {unknown}")
        self.attributes = tuple(self.attributes)
        if self.split not in ("train", "test"):
            raise IntegrityError(f"split must be train or test, got {self.split!r}")

    def __len__(self):
        return len(self.rgb_frames)

    def frame(self, i: int) -> np.ndarray:
        """RGB frame ``i`` as ``(H, W, 3)`` uint8, loading from disk when stored as a path."""
        f = self.rgb_frames[i]
        if isinstance(f, np.ndarray):
            return f
        img = cv2.imread(str(f), cv2.IMREAD_COLOR)
        if img is None:
            raise IntegrityError(f"sequence {self.name!r}: cannot load frame {i} from {f}")
        return cv2.cvtColor(img, cv2.COLOR_BGR2RGB)

    @property
    def present(self) -> np.ndarray:
        return np.array([b is not None for b in self.groundtruth])

    def gt_array(self) -> np.ndarray:
        """``(N, 4)`` groundtruth with NaN rows for absent frames."""
        return np.array([b.as_array() if b is not None else [np.nan] * 4 for b in self.groundtruth])

    def materialize(self) -> "SequenceRecord":
        """Copy with all frames loaded into memory."""
        return SequenceRecord(
            self.name, self.timestamps.copy(), [self.frame(i) for i in range(len(self))],
            self.events, list(self.groundtruth), self.attributes, self.split, dict(self.meta),
        )

    def __eq__(self, other):
        if not isinstance(other, SequenceRecord):
            return NotImplemented
        return (
            self.name == other.name
            and np.array_equal(self.timestamps, other.timestamps)
            and self.events == other.events
            and self.groundtruth == other.groundtruth
            and self.attributes == other.attributes
            and self.split == other.split
            and all(np.array_equal(self.frame(i), other.frame(i)) for i in range(len(self)))
        )


@dataclass
class FramePair:
    rgb: np.ndarray
    event_frame: EventFrame
    frame_index: int
    misalignment: Optional[tuple] = None

    def __post_init__(self):
        if self.rgb.shape[:2] != (self.event_frame.height, self.event_frame.width):
            raise ValueError("rgb and event frame differ in size")

    def event_image(self) -> np.ndarray:
        return normalize_event_frame(self.event_frame)

    def rgb_image(self) -> np.ndarray:
        """RGB as float in ``[0, 1]``."""
        return self.rgb.astype(np.float64) / 255.0


@dataclass
class CropResult:
    """Square crop: patch pixel ``u`` maps to source coordinate ``crop_origin + u / scale``."""

    patch: np.ndarray
    scale: float
    crop_origin: tuple
    target_in_patch: Optional[BoundingBox] = None

    def to_patch(self, box: BoundingBox) -> BoundingBox:
        ox, oy = self.crop_origin
        s = self.scale
        return BoundingBox((box.x - ox) * s, (box.y - oy) * s, box.w * s, box.h * s)

    def to_source(self, box: BoundingBox) -> BoundingBox:
        ox, oy = self.crop_origin
        s = self.scale
        return BoundingBox(box.x / s + ox, box.y / s + oy, box.w / s, box.h / s)


# ---------------------------------------------------------------------------
# disk I/O


def _fmt(v: float) -> str:
    return repr(float(v))


def write_sequence(record: SequenceRecord, directory: Union[str, Path], event_format: str = "csv") -> Path:
    d = Path(directory)
    (d / "rgb").mkdir(parents=True, exist_ok=True)
    for i in range(len(record)):
        img = record.frame(i)
        cv2.imwrite(str(d / "rgb" / f"{i:06d}.png"), cv2.cvtColor(img, cv2.COLOR_RGB2BGR))
    (d / "timestamps.txt").write_text("".join(f"{int(t)}\n" for t in record.timestamps))
    ext = "csv" if event_format == "csv" else "bin"
    (d / f"events.{ext}").write_bytes(serialize_event_stream(record.events, event_format))
    lines = []
    for b in record.groundtruth:
        lines.append("nan,nan,nan,nan" if b is None else ",".join(_fmt(v) for v in b.as_array()))
    (d / "groundtruth.txt").write_text("\n".join(lines) + "\n")
    if record.attributes:
        (d / "attributes.txt").write_text(",".join(record.attributes) + "\n")
    meta = dict(record.meta)
    meta.update(
        split=record.split,
        sensor_width=record.events.sensor_width,
        sensor_height=record.events.sensor_height,
        t_begin=record.events.t_begin,
        t_end=record.events.t_end,
    )
    (d / "meta.json").write_text(json.dumps(meta, sort_keys=True, indent=1) + "\n")
    return d


def _parse_groundtruth(text: str) -> list:
    out = []
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.strip()
        if not line:
            continue
        parts = line.replace("\t", ",").replace(" ", ",").split(",")
        parts = [p for p in parts if p]
        if len(parts) != 4:
            raise IntegrityError(f"groundtruth line {lineno}: expected x,y,w,h")
        try:
            vals = [float(p) for p in parts]
        except ValueError:
            raise IntegrityError(f"groundtruth line {lineno}: non-numeric value") from None
        if any(math.isnan(v) for v in vals):
            out.append(None)
        else:
            out.append(BoundingBox(*vals))
    return out


def load_sequence(directory: Union[str, Path]) -> SequenceRecord:
    d = Path(directory)
    if not d.is_dir():
        raise IntegrityError(f"{d} is not a sequence directory")
    meta = json.loads((d / "meta.json").read_text()) if (d / "meta.json").exists() else {}
    frames = sorted((d / "rgb").glob("*.png")) + sorted((d / "rgb").glob("*.jpg"))
    frames.sort(key=lambda p: p.name)
    ts_path = d / "timestamps.txt"
    timestamps = [int(v) for v in ts_path.read_text().split()] if ts_path.exists() else []
    gt_path = d / "groundtruth.txt"
    if not gt_path.exists():
        raise IntegrityError(f"{d}: missing groundtruth.txt")
    gt = _parse_groundtruth(gt_path.read_text())
    if len(frames) == 0:
        raise IntegrityError(f"{d}: sequence has no frames")
    if len(gt) != len(frames) or len(timestamps) != len(frames):
        raise IntegrityError(
            f"{d}: {len(frames)} frames but {len(gt)} groundtruth lines and {len(timestamps)} timestamps"
        )
    sw, sh = meta.get("sensor_width", 0), meta.get("sensor_height", 0)
    if (d / "events.csv").exists():
        events = parse_event_stream((d / "events.csv").read_bytes(), "csv", sw, sh)
    elif (d / "events.bin").exists():
        events = parse_event_stream((d / "events.bin").read_bytes(), "binary", sw, sh)
    else:
        raise IntegrityError(f"{d}: no events.csv or events.bin")
    t_begin = meta.get("t_begin", min(int(events.t[0]) if len(events) else timestamps[0], 0))
    t_end = meta.get("t_end", max(int(events.t[-1]) if len(events) else 0, timestamps[-1]))
    events = EventStream(events.t, events.x, events.y, events.p, events.sensor_width,
                         events.sensor_height, t_begin, t_end)
    attrs = ()
    if (d / "attributes.txt").exists():
        attrs = tuple(a for a in (d / "attributes.txt").read_text().replace(",", " ").split() if a)
    extra = {k: v for k, v in meta.items() if k not in ("split", "sensor_width", "sensor_height", "t_begin", "t_end")}
    return SequenceRecord(d.name, np.array(timestamps), frames, events, gt, attrs,
                          meta.get("split", "train"), extra)


# ---------------------------------------------------------------------------
# pairing and cropping


def stacking_window(seq: SequenceRecord, frame_index: int) -> tuple:
    """``[t(F_{i-1}), t(F_i))``; frame 0 starts at the stream's ``t_begin``."""
    t1 = int(seq.timestamps[frame_index])
    t0 = int(seq.timestamps[frame_index - 1]) if frame_index > 0 else min(seq.events.t_begin, t1)
    return t0, t1


def pair_frame_with_events(seq: SequenceRecord, frame_index: int) -> FramePair:
    if not 0 <= frame_index < len(seq):
        raise IndexError(f"frame index {frame_index} outside [0, {len(seq)})")
    rgb = seq.frame(frame_index)
    h, w = rgb.shape[:2]
    ev = seq.events
    sw, sh = ev.sensor_width or w, ev.sensor_height or h
    frame = stack_events(slice_events(ev, *stacking_window(seq, frame_index)), sw, sh)
    frame = resize_event_frame(frame, w, h)
    mis = seq.meta.get("misalignment")
    return FramePair(rgb, frame, frame_index, tuple(mis) if mis is not None else None)


def crop_square(image: np.ndarray, center, side: float, out_side: int, pad_value=None) -> CropResult:
    """Resample the square of ``side`` source px centred at ``center`` to ``out_side`` px.

    Areas outside the image are filled with ``pad_value`` (per-channel image mean
    by default).
    """
    cx, cy = center
    scale = out_side / side
    ox, oy = cx - side / 2, cy - side / 2
    img = np.asarray(image, dtype=np.float64)
    squeeze = img.ndim == 2
    if squeeze:
        img = img[..., None]
    if pad_value is None:
        pad_value = img.reshape(-1, img.shape[-1]).mean(axis=0)
    pad = np.broadcast_to(np.asarray(pad_value, dtype=np.float64), (img.shape[-1],))
    # patch pixel centre u+0.5 <-> source continuous coord ox + (u+0.5)/scale; array index = coord - 0.5
    u = (np.arange(out_side) + 0.5) / scale - 0.5
    rows, cols = np.meshgrid(oy + u, ox + u, indexing="ij")
    patch = np.empty((out_side, out_side, img.shape[-1]))
    for c in range(img.shape[-1]):
        patch[..., c] = ndimage.map_coordinates(img[..., c], [rows, cols], order=1, mode="constant",
                                                cval=float(pad[c]), prefilter=False)
    if squeeze:
        patch = patch[..., 0]
    return CropResult(patch, scale, (ox, oy))


def crop_region(image, box: BoundingBox, context_factor: float, out_side: int, pad_value=None) -> CropResult:
    if box.w * box.h <= 0:
        raise ValueError(f"degenerate box {box}")
    if context_factor < 1:
        raise ValueError(f"context factor must be >= 1, got {context_factor}")
    side = context_factor * math.sqrt(box.w * box.h)
    res = crop_square(image, (box.cx, box.cy), side, out_side, pad_value)
    res.target_in_patch = res.to_patch(box)
    return res


# ---------------------------------------------------------------------------
# synthetic sequences


@dataclass
class SynthConfig:
    n_frames: int = 64
    width: int = 256
    height: int = 256
    object_size: tuple = (40, 32)
    speed: float = 3.0  # px per frame
    event_threshold: float = 0.2  # log-intensity contrast
    misalignment: tuple = (0, 0, 0)  # dx px, dy px, dt us
    noise: float = 0.0  # photometric noise std, intensity in [0, 1]
    frame_interval_us: int = 33_333
    subframes: int = 4
    event_resolution: Optional[tuple] = None  # (w, h); None = RGB resolution
    clutter: float = 0.3

    def validate(self):
        if self.n_frames < 2:
            raise ValueError("n_frames must be >= 2")
        ow, oh = self.object_size
        if not (0 < ow < self.width and 0 < oh < self.height):
            raise ValueError("object must fit inside the frame")
        if self.event_threshold <= 0 or self.subframes < 1 or self.frame_interval_us < self.subframes:
            raise ValueError("invalid event threshold / sub-frame settings")
        if len(self.misalignment) != 3:
            raise ValueError("misalignment is (dx, dy, dt)")


def _smooth_noise(rng, h, w, cells, channels=3):
    coarse = rng.random((cells, cells, channels))
    return cv2.resize(coarse, (w, h), interpolation=cv2.INTER_CUBIC).clip(0, 1)


def _bounce(p, lo, hi):
    """Reflect ``p`` into ``[lo, hi]`` (triangle wave)."""
    span = hi - lo
    if span <= 0:
        return lo
    q = np.mod(p - lo, 2 * span)
    return lo + np.where(q > span, 2 * span - q, q)


class _Scene:
    def __init__(self, cfg: SynthConfig, rng):
        self.cfg = cfg
        h, w = cfg.height, cfg.width
        bg = 0.5 + cfg.clutter * (_smooth_noise(rng, h, w, 8) - 0.5)
        bg += 0.5 * cfg.clutter * (_smooth_noise(rng, h, w, 32) - 0.5)
        self.background = bg.clip(0.05, 0.95)
        ow, oh = cfg.object_size
        tex = _smooth_noise(rng, oh, ow, 4)
        checks = ((np.arange(oh)[:, None] // 6 + np.arange(ow)[None, :] // 6) % 2).astype(float)
        color = rng.random(3) * 0.5 + 0.4
        tex = (0.55 * checks[..., None] * color + 0.35 * tex + 0.05).clip(0.02, 0.98)
        # point-symmetric texture with a dark rim keeps the event blob centred on the object
        tex = 0.5 * (tex + tex[::-1, ::-1])
        r = min(3, ow // 4, oh // 4)
        if r > 0:
            tex[:r], tex[-r:], tex[:, :r], tex[:, -r:] = 0.02, 0.02, 0.02, 0.02
        self.texture = tex
        self.p0 = np.array([rng.uniform(0, w - ow), rng.uniform(0, h - oh)])
        ang = rng.uniform(0, 2 * np.pi)
        self.velocity = cfg.speed * np.array([np.cos(ang), np.sin(ang)])
        self.ys, self.xs = np.mgrid[0:h, 0:w].astype(np.float32) + 0.5

    def position(self, t_frames: float) -> np.ndarray:
        ow, oh = self.cfg.object_size
        p = self.p0 + self.velocity * t_frames
        return np.array([_bounce(p[0], 0, self.cfg.width - ow), _bounce(p[1], 0, self.cfg.height - oh)], float)

    def render(self, t_frames: float) -> tuple:
        ow, oh = self.cfg.object_size
        x0, y0 = self.position(t_frames)
        u = self.xs - np.float32(x0)
        v = self.ys - np.float32(y0)
        mask = (u >= 0) & (u < ow) & (v >= 0) & (v < oh)
        obj = cv2.remap(self.texture.astype(np.float32), u - 0.5, v - 0.5, cv2.INTER_LINEAR,
                        borderMode=cv2.BORDER_REPLICATE)
        img = np.where(mask[..., None], obj.astype(np.float64), self.background)
        return img, BoundingBox(float(x0), float(y0), float(ow), float(oh))


def generate_synthetic_sequence(cfg: SynthConfig, seed: int, name: Optional[str] = None,
                                split: str = "train", attributes: Sequence[str] = ()) -> SequenceRecord:
    """Moving textured object over static clutter, with DVS-style events.

    Each RGB frame interval is rendered as ``cfg.subframes`` sub-frames. A pixel
    emits ``floor(|d log I| / threshold)`` events between consecutive sub-frames,
    stamped at the midpoint of that sub-interval. Events are then shifted by
    ``(dx, dy)`` event-sensor pixels and delayed by ``dt`` microseconds.
    """
    cfg.validate()
    rng = np.random.default_rng(seed)
    scene = _Scene(cfg, rng)
    S, T = cfg.subframes, cfg.frame_interval_us
    ew, eh = cfg.event_resolution or (cfg.width, cfg.height)
    dx, dy, dt = (int(v) for v in cfg.misalignment)

    def log_gray(img):
        g = img.mean(axis=2)
        if (ew, eh) != (cfg.width, cfg.height):
            g = cv2.resize(g, (ew, eh), interpolation=cv2.INTER_AREA)
        return np.log(g + 0.01)

    def noisy(img):
        if cfg.noise > 0:
            img = img + rng.normal(0.0, cfg.noise, img.shape)
        return img.clip(0.0, 1.0)

    frames, boxes, timestamps = [], [], []
    ts_list, xs_list, ys_list, ps_list = [], [], [], []
    prev = log_gray(noisy(scene.render(0.0)[0]))
    for j in range(1, S * cfg.n_frames + 1):
        img, box = scene.render(j / S)
        img = noisy(img)
        cur = log_gray(img)
        diff = cur - prev
        n = np.floor(np.abs(diff) / cfg.event_threshold).astype(np.int64)
        yy, xx = np.nonzero(n)
        if len(yy):
            counts = n[yy, xx]
            xx = np.repeat(xx, counts) + dx
            yy = np.repeat(yy, counts) + dy
            pol = np.repeat(np.sign(diff[n > 0]).astype(np.int8), counts)
            keep = (xx >= 0) & (xx < ew) & (yy >= 0) & (yy < eh)
            t_ev = (j - 1) * T // S + (T // S) // 2 + dt
            ts_list.append(np.full(int(keep.sum()), t_ev, dtype=np.int64))
            xs_list.append(xx[keep])
            ys_list.append(yy[keep])
            ps_list.append(pol[keep])
        prev = cur
        if j % S == 0:
            frames.append(np.round(img * 255).astype(np.uint8))
            boxes.append(box)
            timestamps.append(j * T // S)
    cat = lambda lst, dt_: np.concatenate(lst) if lst else np.zeros(0, dt_)  # noqa: E731
    t_all = cat(ts_list, np.int64)
    t_end = max(int(t_all.max()) if len(t_all) else 0, timestamps[-1])
    events = EventStream.from_arrays(
        t_all, cat(xs_list, np.int64), cat(ys_list, np.int64), cat(ps_list, np.int8),
        ew, eh, 0, t_end,
    )
    meta = {
        "seed": int(seed),
        "misalignment": [dx, dy, dt],
        "synth": {
            "n_frames": cfg.n_frames, "width": cfg.width, "height": cfg.height,
            "object_size": list(cfg.object_size), "speed": cfg.speed,
            "event_threshold": cfg.event_threshold, "noise": cfg.noise,
            "subframes": cfg.subframes, "frame_interval_us": cfg.frame_interval_us,
            "event_resolution": [ew, eh], "clutter": cfg.clutter,
        },
    }
    return SequenceRecord(name or f"synth_{seed:04d}", np.array(timestamps), frames, events,
                          boxes, tuple(attributes), split, meta)
