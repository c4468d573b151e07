"""Training pairs, the joint optimisation step, learning-rate schedule and checkpoints."""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np
import torch

from .config import RunConfig
from .datamodel import BoundingBox, SequenceRecord, crop_region, pair_frame_with_events
from .errors import IncompatibleCheckpointError, IntegrityError, NumericError
from .head import compute_branch_loss, gt_response_map, total_loss
from .model import FusionTracker, build_model, to_tensor
from .uncertainty import kl_regularizer

CHECKPOINT_MAGIC = b"EVFUSE-CKPT-1\n"


@dataclass
class TrainConfig:
    lr_backbone: float = 5e-6
    lr_other: float = 5e-5
    weight_decay: float = 1e-4
    lr_decay_factor: float = 0.2
    lr_decay_epoch: int = 50
    epochs: int = 20
    batch_size: int = 8
    seed: int = 0
    steps_per_epoch: int = 100
    grad_clip: float = 5.0

    def __post_init__(self):
        if self.lr_backbone <= 0 or self.lr_other <= 0:
            raise ValueError("learning rates must be positive")
        if not 0 < self.lr_decay_factor <= 1:
            raise ValueError("lr_decay_factor must lie in (0, 1]")

    @classmethod
    def from_run_config(cls, cfg: RunConfig) -> "TrainConfig":
        s = cfg.section("train")
        return cls(**{k: s[k] for k in cls.__dataclass_fields__})


def lr_schedule(epoch: int, tc: Optional[TrainConfig] = None) -> tuple:
    """``(lr_backbone, lr_other)``, multiplied by the decay factor from ``lr_decay_epoch`` on."""
    tc = tc or TrainConfig()
    if epoch < 0:
        raise ValueError("epoch must be non-negative")
    f = tc.lr_decay_factor if epoch >= tc.lr_decay_epoch else 1.0
    return tc.lr_backbone * f, tc.lr_other * f


# ---------------------------------------------------------------------------
# samples


class PreparedSequence:
    """Per-frame RGB and event images in [0, 1], computed once per sequence."""

    def __init__(self, seq: SequenceRecord):
        self.seq = seq
        self.rgb, self.event = [], []
        for i in range(len(seq)):
            pair = pair_frame_with_events(seq, i)
            self.rgb.append(pair.rgb_image())
            self.event.append(pair.event_image())
        self.present = np.flatnonzero(seq.present)

    def __len__(self):
        return len(self.seq)


@dataclass
class TrainingSample:
    template_index: int
    search_index: int
    rgb_template: np.ndarray
    ev_template: np.ndarray
    rgb_search: np.ndarray
    ev_search: np.ndarray
    search_box: BoundingBox  # gt in search-patch px
    template_box: BoundingBox  # gt in template-patch px


class SkipSample(Exception):
    """No valid training pair can be drawn."""


def sample_training_pair(prep: PreparedSequence, rng: np.random.Generator,
                         cfg: Optional[RunConfig] = None) -> TrainingSample:
    """Template frame before search frame, at most ``data.max_gap`` apart, both with gt."""
    cfg = cfg if cfg is not None else RunConfig()
    present = prep.present
    if len(present) < 2:
        raise SkipSample(f"{prep.seq.name}: fewer than two frames with groundtruth")
    gap = cfg["data.max_gap"]
    while True:
        i = int(rng.choice(present[:-1]))
        later = present[(present > i) & (present <= i + gap)]
        if len(later):
            break
    j = int(rng.choice(later))
    gt_t = prep.seq.groundtruth[i]
    gt_s = prep.seq.groundtruth[j]
    ts, ss = cfg["data.template_size"], cfg["data.search_size"]
    tf, sf = cfg["data.template_factor"], cfg["data.search_factor"]
    t_rgb = crop_region(prep.rgb[i], gt_t, tf, ts)
    t_ev = crop_region(prep.event[i], gt_t, tf, ts, pad_value=0.0)

    cj, sj = cfg["data.center_jitter"], cfg["data.scale_jitter"]
    size = math.sqrt(gt_s.w * gt_s.h)
    dx, dy = rng.uniform(-cj, cj, 2) * size if cj > 0 else (0.0, 0.0)
    scale = math.exp(rng.uniform(-math.log(sj), math.log(sj))) if sj > 1 else 1.0
    jittered = BoundingBox.from_center(gt_s.cx + dx, gt_s.cy + dy, gt_s.w * scale, gt_s.h * scale)
    s_rgb = crop_region(prep.rgb[j], jittered, sf, ss)
    s_ev = crop_region(prep.event[j], jittered, sf, ss, pad_value=0.0)
    return TrainingSample(i, j, t_rgb.patch, t_ev.patch, s_rgb.patch, s_ev.patch,
                          s_rgb.to_patch(gt_s), t_rgb.target_in_patch)


def collate(samples: Sequence[TrainingSample], cfg: RunConfig) -> dict:
    grid = cfg["data.search_size"] // cfg["backbone.patch_size"]
    targets = [gt_response_map(s.search_box, grid, cfg["backbone.patch_size"]) for s in samples]
    return {
        "rgb_template": to_tensor([s.rgb_template for s in samples]),
        "ev_template": to_tensor([s.ev_template for s in samples]),
        "rgb_search": to_tensor([s.rgb_search for s in samples]),
        "ev_search": to_tensor([s.ev_search for s in samples]),
        "gt_box": torch.tensor(np.array([s.search_box.as_array() for s in samples]), dtype=torch.float32),
        "target": torch.tensor(np.stack(targets), dtype=torch.float32),
    }


def sample_batch(preps: Sequence[PreparedSequence], rng, cfg: RunConfig, batch_size: int) -> dict:
    samples = []
    while len(samples) < batch_size:
        prep = preps[int(rng.integers(len(preps)))]
        try:
            s = sample_training_pair(prep, rng, cfg)
        except SkipSample:
            continue
        if gt_response_map(s.search_box, cfg["data.search_size"] // cfg["backbone.patch_size"],
                           cfg["backbone.patch_size"]) is None:
            continue
        samples.append(s)
    return collate(samples, cfg)


# ---------------------------------------------------------------------------
# optimisation


def make_optimizer(model: FusionTracker, tc: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        [
            {"params": model.backbone_parameters(), "lr": tc.lr_backbone, "name": "backbone"},
            {"params": model.other_parameters(), "lr": tc.lr_other, "name": "other"},
        ],
        weight_decay=tc.weight_decay,
    )


def set_learning_rates(optimizer, lrs: tuple):
    for group, lr in zip(optimizer.param_groups, lrs):
        group["lr"] = lr


@dataclass
class StepResult:
    branches: dict  # name -> LossBundle
    kl: dict
    total: torch.Tensor

    def record(self) -> dict:
        rec = {"total": float(self.total.detach())}
        for name, b in self.branches.items():
            rec[name] = b.items()
        rec.update({f"kl_{k}": float(v.detach()) for k, v in self.kl.items()})
        return rec


def compute_losses(model: FusionTracker, batch: dict, cfg: RunConfig) -> StepResult:
    out = model(batch["rgb_template"], batch["rgb_search"], batch["ev_template"], batch["ev_search"])
    li, l1 = cfg["loss.lambda_iou"], cfg["loss.lambda_l1"]
    branches = {
        name: compute_branch_loss(maps, batch["gt_box"], batch["target"], model.patch_size, li, l1)
        for name, maps in out.maps.items()
    }
    if model.variant == "baseline":
        zero = branches["fusion"].branch_total.new_zeros(())
        return StepResult(branches, {}, total_loss(branches["fusion"], zero, zero, zero, zero, 0.0))
    kl = {}
    for key, branch in (("v", "rgb"), ("cm", "cross")):
        try:
            kl[key] = kl_regularizer(out.gaussians[branch])
        except NumericError as e:
            raise NumericError(f"kl_{key}: {e}") from None
    total = total_loss(branches["fusion"], branches["cross"], branches["rgb"], kl["v"], kl["cm"],
                       cfg["loss.alpha_kl"])
    return StepResult(branches, kl, total)


def training_step(model: FusionTracker, optimizer, batch: dict, cfg: RunConfig,
                  grad_clip: Optional[float] = 5.0) -> StepResult:
    model.train()
    optimizer.zero_grad(set_to_none=True)
    res = compute_losses(model, batch, cfg)
    res.total.backward()
    if grad_clip:
        torch.nn.utils.clip_grad_norm_(model.parameters(), grad_clip)
    optimizer.step()
    return res


class Trainer:
    """Runs ``steps`` optimisation steps and writes one JSON record per logged step."""

    def __init__(self, cfg: RunConfig, sequences: Sequence[SequenceRecord], model: Optional[FusionTracker] = None):
        self.cfg = cfg
        self.tc = TrainConfig.from_run_config(cfg)
        torch.manual_seed(self.tc.seed)
        self.model = model if model is not None else build_model(cfg, self.tc.seed)
        self.optimizer = make_optimizer(self.model, self.tc)
        self.rng = np.random.default_rng(self.tc.seed)
        self.preps = [PreparedSequence(s) for s in sequences]
        self.step = 0
        self.history = []

    @property
    def epoch(self) -> int:
        return self.step // self.tc.steps_per_epoch

    def fit(self, steps: Optional[int] = None, log_file=None, log_every: Optional[int] = None):
        steps = self.tc.epochs * self.tc.steps_per_epoch if steps is None else steps
        log_every = log_every or self.cfg["train.log_every"]
        for _ in range(steps):
            lrs = lr_schedule(self.epoch, self.tc)
            set_learning_rates(self.optimizer, lrs)
            batch = sample_batch(self.preps, self.rng, self.cfg, self.tc.batch_size)
            res = training_step(self.model, self.optimizer, batch, self.cfg, self.tc.grad_clip)
            rec = {"step": self.step, "epoch": self.epoch, "variant": self.model.variant,
                   "lr_backbone": lrs[0], "lr_other": lrs[1], **res.record()}
            self.history.append(rec)
            if log_file is not None and self.step % log_every == 0:
                log_file.write(json.dumps(rec) + "\n")
                log_file.flush()
            self.step += 1
        return self.history


# ---------------------------------------------------------------------------
# checkpoints


@dataclass
class Checkpoint:
    params: dict
    shapes: dict
    config: dict
    config_hash: str
    step: int = 0
    epoch: int = 0
    optimizer: Optional[dict] = None
    metrics: dict = field(default_factory=dict)
    noise_state: Optional[torch.Tensor] = None

    def build_model(self) -> FusionTracker:
        model = FusionTracker(RunConfig(self.config))
        model.load_state_dict(self.params)
        if self.noise_state is not None:
            model.noise.set_state(self.noise_state)
        model.eval()
        return model


def save_checkpoint(path, model: FusionTracker, optimizer=None, step: int = 0, epoch: int = 0,
                    metrics: Optional[dict] = None) -> Path:
    """Atomic write: payload prefixed by a magic line and its SHA-256."""
    path = Path(path)
    state = {k: v.detach().clone() for k, v in model.state_dict().items()}
    payload = {
        "params": state,
        "shapes": {k: list(v.shape) for k, v in state.items()},
        "config": dict(model.cfg),
        "config_hash": model.cfg.structure_hash,
        "step": step,
        "epoch": epoch,
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "metrics": metrics or {},
        "noise_state": model.noise.get_state(),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    blob = buf.getvalue()
    digest = hashlib.sha256(blob).hexdigest().encode()
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as f:
        f.write(CHECKPOINT_MAGIC + digest + b"\n" + blob)
        f.flush()
        os.fsync(f.fileno())
    os.replace(tmp, path)
    return path


def load_checkpoint(path, expect: Optional[RunConfig] = None) -> Checkpoint:
    raw = Path(path).read_bytes()
    head_len = len(CHECKPOINT_MAGIC) + 65
    if not raw.startswith(CHECKPOINT_MAGIC) or len(raw) < head_len:
        raise IntegrityError(f"{path}: not a checkpoint file")
    digest, blob = raw[len(CHECKPOINT_MAGIC):head_len - 1], raw[head_len:]
    if hashlib.sha256(blob).hexdigest().encode() != digest:
        raise IntegrityError(f"{path}: checksum mismatch, file is corrupted")
    try:
        payload = torch.load(io.BytesIO(blob), map_location="cpu", weights_only=False)
    except Exception as e:  # noqa: BLE001 - any unpickling failure is corruption
        raise IntegrityError(f"{path}: unreadable payload ({e})") from None
    ck = Checkpoint(payload["params"], payload["shapes"], payload["config"], payload["config_hash"],
                    payload["step"], payload["epoch"], payload["optimizer"], payload["metrics"],
                    payload.get("noise_state"))
    for k, v in ck.params.items():
        if list(v.shape) != ck.shapes.get(k):
            raise IntegrityError(f"{path}: parameter {k} shape disagrees with its metadata")
    if expect is not None and expect.structure_hash != ck.config_hash:
        diff = {k: (ck.config.get(k), v) for k, v in expect.structure().items() if ck.config.get(k) != v}
        raise IncompatibleCheckpointError(f"{path}: checkpoint built with a different structure: {diff}")
    return ck

