"""Centre-based tracking head, box decoding, and the training losses.

Boxes inside this module are ``(x, y, w, h)`` in search-patch pixels unless a
name says otherwise. Tensor boxes have a trailing dimension of 4.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .datamodel import BoundingBox
from .errors import NumericError
from .layers import init_weights

FOCAL_EPS = 1e-6


@dataclass
class ScoreMaps:
    cls: torch.Tensor  # (B, H, W) in (0, 1)
    offset: torch.Tensor  # (B, 2, H, W), sub-cell (x, y) in (0, 1)
    size: torch.Tensor  # (B, 2, H, W), (w, h) / search side in (0, 1)

    @property
    def grid(self) -> int:
        return self.cls.shape[-1]


@dataclass
class LossBundle:
    cls: torch.Tensor
    iou: torch.Tensor
    l1: torch.Tensor
    branch_total: torch.Tensor

    def items(self) -> dict:
        return {k: float(torch.as_tensor(getattr(self, k)).detach())
                for k in ("cls", "iou", "l1", "branch_total")}


def tokens_to_grid(tokens: torch.Tensor, index: torch.Tensor, grid: int) -> torch.Tensor:
    """Scatter ``(B, n, d)`` live tokens to a ``(B, d, grid, grid)`` map; eliminated cells stay zero.

    ``index`` holds positions within the ``grid * grid`` region.
    """
    B, n, d = tokens.shape
    if n > grid * grid or (n and int(index.max()) >= grid * grid):
        raise ValueError(f"{n} tokens / max index {int(index.max())} do not fit a {grid}x{grid} grid")
    dense = tokens.new_zeros(B, grid * grid, d)
    dense = dense.scatter(1, index.unsqueeze(-1).expand(-1, -1, d), tokens)
    return dense.transpose(1, 2).reshape(B, d, grid, grid)


def _tower(dim, channels, out):
    return nn.Sequential(
        nn.Conv2d(dim, channels, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(channels, channels // 2, 3, padding=1), nn.ReLU(inplace=True),
        nn.Conv2d(channels // 2, out, 1),
    )


class CenterHead(nn.Module):
    """Classification, offset and size towers over the search-token grid."""

    def __init__(self, dim: int, channels: int = 64, prior: float = 0.01):
        super().__init__()
        self.cls = _tower(dim, channels, 1)
        self.offset = _tower(dim, channels, 2)
        self.size = _tower(dim, channels, 2)
        init_weights(self)
        for tower in (self.cls, self.offset, self.size):
            for m in tower:
                if isinstance(m, nn.Conv2d):
                    nn.init.kaiming_normal_(m.weight, nonlinearity="relu")
                    nn.init.zeros_(m.bias)
        nn.init.normal_(self.cls[-1].weight, std=0.01)
        nn.init.constant_(self.cls[-1].bias, -math.log((1 - prior) / prior))

    def forward(self, feat: torch.Tensor) -> ScoreMaps:
        return ScoreMaps(
            torch.sigmoid(self.cls(feat)).squeeze(1),
            torch.sigmoid(self.offset(feat)),
            torch.sigmoid(self.size(feat)),
        )


def predict_maps(head: CenterHead, search_tokens: torch.Tensor, index: torch.Tensor, grid: int) -> ScoreMaps:
    return head(tokens_to_grid(search_tokens, index, grid))


def hann_window(grid: int) -> np.ndarray:
    w = 0.5 * (1 - np.cos(2 * np.pi * np.arange(1, grid + 1) / (grid + 1)))
    return np.outer(w, w)


def peak_index(cls: torch.Tensor, window: Optional[torch.Tensor] = None, window_weight: float = 0.49):
    """Row-major argmax per sample (first occurrence wins on ties)."""
    score = cls if window is None else cls * ((1 - window_weight) + window_weight * window)
    flat = torch.nan_to_num(score.flatten(1), nan=-math.inf)
    # torch.argmax tie order is unspecified; take the smallest index among maxima
    is_max = flat == flat.max(dim=1, keepdim=True).values
    ar = torch.arange(flat.shape[1], device=flat.device).expand_as(flat)
    return torch.where(is_max, ar, flat.shape[1]).min(dim=1).values


def boxes_at(maps: ScoreMaps, idx: torch.Tensor, patch_size: int) -> torch.Tensor:
    """Differentiable ``(B, 4)`` boxes read out at flat cell ``idx``."""
    g = maps.grid
    search_side = g * patch_size
    row = torch.div(idx, g, rounding_mode="floor")
    col = idx % g
    b = torch.arange(len(idx), device=idx.device)
    off = maps.offset.flatten(2)[b, :, idx]  # (B, 2)
    size = maps.size.flatten(2)[b, :, idx]
    cx = (col.to(off.dtype) + off[:, 0]) * patch_size
    cy = (row.to(off.dtype) + off[:, 1]) * patch_size
    w = size[:, 0] * search_side
    h = size[:, 1] * search_side
    return torch.stack([cx - w / 2, cy - h / 2, w, h], dim=1)


def decode_box(maps: ScoreMaps, patch_size: int, window: Optional[np.ndarray] = None,
               window_weight: float = 0.49):
    """Decode the first sample of ``maps`` to ``(BoundingBox, confidence)`` in search-patch px.

    With ``window`` the peak is chosen on ``cls * (1 - w + w * window)``; the
    returned confidence is always the raw ``cls`` value at the peak.
    """
    win = None if window is None else torch.as_tensor(window, dtype=maps.cls.dtype)
    with torch.no_grad():
        idx = peak_index(maps.cls[:1], win, window_weight)
        box = boxes_at(ScoreMaps(maps.cls[:1], maps.offset[:1], maps.size[:1]), idx, patch_size)[0]
        conf = float(maps.cls[0].flatten()[idx[0]])
    return BoundingBox(*[float(v) for v in box]), conf


def gaussian_radius(h: float, w: float, min_overlap: float = 0.7) -> float:
    """CornerNet radius: largest corner shift keeping IoU >= ``min_overlap``."""
    a1, b1 = 1.0, h + w
    c1 = w * h * (1 - min_overlap) / (1 + min_overlap)
    r1 = (b1 + math.sqrt(b1 ** 2 - 4 * a1 * c1)) / 2
    a2, b2 = 4.0, 2 * (h + w)
    c2 = (1 - min_overlap) * w * h
    r2 = (b2 + math.sqrt(b2 ** 2 - 4 * a2 * c2)) / 2
    a3, b3 = 4 * min_overlap, -2 * min_overlap * (h + w)
    c3 = (min_overlap - 1) * w * h
    r3 = (b3 + math.sqrt(b3 ** 2 - 4 * a3 * c3)) / 2
    return min(r1, r2, r3)


def gt_response_map(gt_box: BoundingBox, grid: int, patch_size: int) -> Optional[np.ndarray]:
    """Gaussian target peaking at 1 on the cell containing the gt centre.

    Returns None when the centre falls outside the search patch (skip signal).
    """
    side = grid * patch_size
    if not (0 <= gt_box.cx < side and 0 <= gt_box.cy < side):
        return None
    col, row = int(gt_box.cx // patch_size), int(gt_box.cy // patch_size)
    r = max(1, int(gaussian_radius(gt_box.h / patch_size, gt_box.w / patch_size)))
    sigma = (2 * r + 1) / 6
    ys, xs = np.mgrid[0:grid, 0:grid]
    d2 = (xs - col) ** 2 + (ys - row) ** 2
    g = np.exp(-d2 / (2 * sigma ** 2))
    g[(np.abs(xs - col) > r) | (np.abs(ys - row) > r)] = 0.0
    g[row, col] = 1.0
    return g


def focal_loss(pred: torch.Tensor, target: torch.Tensor, alpha: float = 2.0, beta: float = 4.0) -> torch.Tensor:
    """CornerNet penalty-reduced focal loss, normalised by the number of positives."""
    pred = pred.clamp(FOCAL_EPS, 1 - FOCAL_EPS)
    pos = target.eq(1).to(pred.dtype)
    neg = 1 - pos
    pos_loss = torch.log(pred) * (1 - pred).pow(alpha) * pos
    neg_loss = torch.log(1 - pred) * pred.pow(alpha) * (1 - target).pow(beta) * neg
    num_pos = pos.sum()
    loss = -(pos_loss.sum() + neg_loss.sum())
    return loss / num_pos if num_pos > 0 else loss


def giou(pred: torch.Tensor, gt: torch.Tensor) -> tuple:
    """``(giou, iou)`` for ``(..., 4)`` xywh boxes. Two zero-area boxes give 0, 0."""
    px0, py0 = pred[..., 0], pred[..., 1]
    px1, py1 = px0 + pred[..., 2], py0 + pred[..., 3]
    gx0, gy0 = gt[..., 0], gt[..., 1]
    gx1, gy1 = gx0 + gt[..., 2], gy0 + gt[..., 3]
    iw = (torch.minimum(px1, gx1) - torch.maximum(px0, gx0)).clamp(min=0)
    ih = (torch.minimum(py1, gy1) - torch.maximum(py0, gy0)).clamp(min=0)
    inter = iw * ih
    union = pred[..., 2] * pred[..., 3] + gt[..., 2] * gt[..., 3] - inter
    enclose = (torch.maximum(px1, gx1) - torch.minimum(px0, gx0)) * (
        torch.maximum(py1, gy1) - torch.minimum(py0, gy0))
    safe_u = torch.where(union > 0, union, torch.ones_like(union))
    safe_c = torch.where(enclose > 0, enclose, torch.ones_like(enclose))
    iou = torch.where(union > 0, inter / safe_u, torch.zeros_like(union))
    g = torch.where(enclose > 0, iou - (enclose - union) / safe_c, iou)
    return g, iou


def giou_loss(pred: torch.Tensor, gt: torch.Tensor) -> torch.Tensor:
    """Mean ``1 - GIoU`` over boxes."""
    g, _ = giou(pred, gt)
    return (1 - g).mean()


def to_cxcywh(box: torch.Tensor) -> torch.Tensor:
    return torch.stack([box[..., 0] + box[..., 2] / 2, box[..., 1] + box[..., 3] / 2,
                        box[..., 2], box[..., 3]], dim=-1)


def l1_loss(pred: torch.Tensor, gt: torch.Tensor, search_side: float) -> torch.Tensor:
    """L1 on centre-size boxes normalised by the search side, averaged over coordinates."""
    return F.l1_loss(to_cxcywh(pred) / search_side, to_cxcywh(gt) / search_side)


def combine(cls, iou, l1, lambda_iou: float = 2.0, lambda_l1: float = 5.0) -> LossBundle:
    return LossBundle(cls, iou, l1, cls + lambda_iou * iou + lambda_l1 * l1)


def branch_loss(maps: ScoreMaps, pred_box: torch.Tensor, gt_box: torch.Tensor, target: torch.Tensor,
                patch_size: int, lambda_iou: float = 2.0, lambda_l1: float = 5.0) -> LossBundle:
    """Focal + GIoU + L1 for one branch.

    ``pred_box``/``gt_box`` are ``(B, 4)`` in search-patch px and ``target``
    is the ``(B, H, W)`` Gaussian response map.
    """
    side = maps.grid * patch_size
    return combine(
        focal_loss(maps.cls, target),
        giou_loss(pred_box, gt_box),
        l1_loss(pred_box, gt_box, side),
        lambda_iou, lambda_l1,
    )


def compute_branch_loss(maps: ScoreMaps, gt_box: torch.Tensor, target: torch.Tensor, patch_size: int,
                        lambda_iou: float = 2.0, lambda_l1: float = 5.0) -> LossBundle:
    """Decode the predicted peak (no gradient through the argmax) and score it."""
    idx = peak_index(maps.cls.detach())
    pred = boxes_at(maps, idx, patch_size)
    return branch_loss(maps, pred, gt_box, target, patch_size, lambda_iou, lambda_l1)


def total_loss(l_f, l_cm, l_v, kl_v, kl_cm, alpha: float = 0.001):
    """``L_f + L_cm + L_v + alpha (kl_v + kl_cm)``; accepts bundles or scalars."""
    terms = {}
    for name, v in (("fusion", l_f), ("cross-modal", l_cm), ("rgb", l_v), ("kl_v", kl_v), ("kl_cm", kl_cm)):
        v = v.branch_total if isinstance(v, LossBundle) else v
        value = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(value):
            raise NumericError(f"non-finite loss term {name}: {value}")
        terms[name] = v
    return terms["fusion"] + terms["cross-modal"] + terms["rgb"] + alpha * (terms["kl_v"] + terms["kl_cm"])
