"""Online one-pass tracking with a frozen network."""

from __future__ import annotations

import hashlib
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import torch

from .datamodel import BoundingBox, FramePair, SequenceRecord, crop_region, pair_frame_with_events
from .errors import IntegrityError
from .head import decode_box, hann_window
from .model import FusionTracker, to_tensor


@dataclass
class TrackerState:
    rgb_template: torch.Tensor  # embedded template tokens, (1, n, d)
    ev_template: torch.Tensor
    template_tokens: tuple  # TokenSets handed to the network
    prev_box: BoundingBox
    frame_size: tuple  # (width, height)
    template_digest: str = ""

    def digest(self) -> str:
        h = hashlib.sha256()
        for t in (self.rgb_template, self.ev_template):
            h.update(t.detach().cpu().numpy().tobytes())
        return h.hexdigest()


@dataclass
class Trajectory:
    boxes: list
    confidences: list
    time_total: list = field(default_factory=list)  # incl. event stacking and cropping
    time_network: list = field(default_factory=list)  # network forward + decode only

    def write(self, path):
        path = Path(path)
        path.write_text("".join(f"{b.x!r},{b.y!r},{b.w!r},{b.h!r}\n" for b in self.boxes))
        return path


class Tracker:
    def __init__(self, model: FusionTracker, window_penalty: Optional[bool] = None):
        self.model = model.eval()
        cfg = model.cfg
        self.cfg = cfg
        self.window_penalty = cfg["head.window_penalty"] if window_penalty is None else window_penalty
        self.window = hann_window(model.grid) if self.window_penalty else None

    def init(self, pair: FramePair, init_box: BoundingBox) -> TrackerState:
        if init_box.w * init_box.h <= 0:
            raise ValueError(f"degenerate initial box {init_box}")
        h, w = pair.rgb.shape[:2]
        if init_box.x >= w or init_box.y >= h or init_box.x + init_box.w <= 0 or init_box.y + init_box.h <= 0:
            raise ValueError(f"initial box {init_box} lies outside the {w}x{h} frame")
        cfg = self.cfg
        size, factor = cfg["data.template_size"], cfg["data.template_factor"]
        rgb = crop_region(pair.rgb_image(), init_box, factor, size).patch
        ev = crop_region(pair.event_image(), init_box, factor, size, pad_value=0.0).patch
        with torch.no_grad():
            tv, te = self.model.embed_templates(to_tensor(rgb), to_tensor(ev))
        state = TrackerState(tv.tokens, te.tokens, (tv, te), init_box, (w, h))
        state.template_digest = state.digest()
        return state

    def track(self, state: TrackerState, pair: FramePair) -> tuple:
        """Returns ``(box in image px, confidence, network seconds)`` and updates ``state``."""
        cfg = self.cfg
        size, factor = cfg["data.search_size"], cfg["data.search_factor"]
        rgb_crop = crop_region(pair.rgb_image(), state.prev_box, factor, size)
        ev_crop = crop_region(pair.event_image(), state.prev_box, factor, size, pad_value=0.0)
        t0 = time.perf_counter()
        with torch.no_grad():
            out = self.model(None, to_tensor(rgb_crop.patch), None, to_tensor(ev_crop.patch),
                             templates=state.template_tokens)
        box, conf = decode_box(out.maps["fusion"], self.model.patch_size, self.window,
                               cfg["head.window_weight"])
        t_net = time.perf_counter() - t0
        w, h = state.frame_size
        box = rgb_crop.to_source(box)
        box = BoundingBox(box.x, box.y, max(box.w, 1.0), max(box.h, 1.0)).clip(w, h)
        state.prev_box = box
        return box, conf, t_net


def run_sequence(seq: SequenceRecord, model: FusionTracker, window_penalty: Optional[bool] = None) -> Trajectory:
    """Initialise on frame 0's groundtruth and track every remaining frame."""
    if seq.groundtruth[0] is None:
        raise IntegrityError(f"{seq.name}: frame 0 has no groundtruth to initialise from")
    tracker = Tracker(model, window_penalty)
    traj = Trajectory([], [])
    state = None
    for i in range(len(seq)):
        t0 = time.perf_counter()
        try:
            pair = pair_frame_with_events(seq, i)
        except IntegrityError as e:
            raise IntegrityError(f"{seq.name}: frame {i} could not be loaded ({e})") from None
        if i == 0:
            state = tracker.init(pair, seq.groundtruth[0])
            box, conf, t_net = seq.groundtruth[0], 1.0, 0.0
        else:
            box, conf, t_net = tracker.track(state, pair)
        traj.boxes.append(box)
        traj.confidences.append(conf)
        traj.time_total.append(time.perf_counter() - t0)
        traj.time_network.append(t_net)
    return traj


def read_trajectory(path) -> list:
    boxes = []
    for line in Path(path).read_text().splitlines():
        if line.strip():
            boxes.append(BoundingBox(*[float(v) for v in line.split(",")]))
    return boxes


def trajectory_array(boxes) -> np.ndarray:
    return np.array([b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)
