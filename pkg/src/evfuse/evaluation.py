"""One-pass evaluation: precision, normalised precision and success curves.

All frames of all sequences are pooled before averaging. Frames without
groundtruth are dropped from every denominator.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .datamodel import ATTRIBUTES, BoundingBox, SequenceRecord
from .errors import IntegrityError, VocabularyError

PRECISION_THRESHOLDS = np.arange(51, dtype=np.float64)  # px
NORM_PRECISION_THRESHOLDS = np.linspace(0.0, 0.5, 51)
SUCCESS_THRESHOLDS = np.linspace(0.0, 1.0, 21)
PR_THRESHOLD = 20


@dataclass
class OPEResult:
    pr_at_20: float
    npr: float
    sr_auc: float
    precision_curve: np.ndarray
    norm_precision_curve: np.ndarray
    success_curve: np.ndarray
    n_frames: int
    per_attribute: dict = field(default_factory=dict)
    notes: list = field(default_factory=list)

    def summary(self) -> dict:
        return {"PR": self.pr_at_20, "NPR": self.npr, "SR": self.sr_auc, "frames": self.n_frames}


def _one_or_many(boxes):
    return [boxes] if isinstance(boxes, BoundingBox) else boxes


def _as_array(boxes) -> np.ndarray:
    if isinstance(boxes, np.ndarray):
        return boxes.astype(np.float64).reshape(-1, 4)
    return np.array([[np.nan] * 4 if b is None else b.as_array() for b in boxes], dtype=np.float64).reshape(-1, 4)


def center_error(pred, gt) -> np.ndarray:
    """Euclidean centre distance; works on BoundingBox pairs or ``(N, 4)`` arrays."""
    p, g = _as_array(_one_or_many(pred)), _as_array(_one_or_many(gt))
    d = (p[:, :2] + p[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2)
    out = np.hypot(d[:, 0], d[:, 1])
    return float(out[0]) if isinstance(pred, BoundingBox) else out


def normalized_center_error(pred, gt) -> np.ndarray:
    """Centre offset divided per axis by the gt size; NaN where gt has zero size."""
    p, g = _as_array(_one_or_many(pred)), _as_array(_one_or_many(gt))
    d = (p[:, :2] + p[:, 2:] / 2) - (g[:, :2] + g[:, 2:] / 2)
    with np.errstate(divide="ignore", invalid="ignore"):
        n = d / g[:, 2:]
        out = np.hypot(n[:, 0], n[:, 1])
    out[(g[:, 2] <= 0) | (g[:, 3] <= 0)] = np.nan
    return float(out[0]) if isinstance(pred, BoundingBox) else out


def overlap_ratio(pred, gt) -> np.ndarray:
    p, g = _as_array(pred), _as_array(gt)
    x0 = np.maximum(p[:, 0], g[:, 0])
    y0 = np.maximum(p[:, 1], g[:, 1])
    x1 = np.minimum(p[:, 0] + p[:, 2], g[:, 0] + g[:, 2])
    y1 = np.minimum(p[:, 1] + p[:, 3], g[:, 1] + g[:, 3])
    inter = np.clip(x1 - x0, 0, None) * np.clip(y1 - y0, 0, None)
    union = p[:, 2] * p[:, 3] + g[:, 2] * g[:, 3] - inter
    with np.errstate(divide="ignore", invalid="ignore"):
        iou = np.where(union > 0, inter / union, 0.0)
    # (x + w) - x is not always w in floating point; an exact copy must still reach 1
    same = (p == g).all(axis=1) & (union > 0)
    return np.where(same, 1.0, np.minimum(iou, 1.0))


def _frame_scores(pred, gt):
    p, g = _as_array(pred), _as_array(gt)
    if len(p) != len(g):
        raise IntegrityError(f"trajectory has {len(p)} boxes for {len(g)} frames")
    present = ~np.isnan(g).any(axis=1)
    p, g = p[present], g[present]
    return center_error(p, g), normalized_center_error(p, g), overlap_ratio(p, g)


def _curves(ce, nce, iou) -> OPEResult:
    n = len(ce)
    if n == 0:
        z = lambda k: np.zeros(k)  # noqa: E731
        return OPEResult(0.0, 0.0, 0.0, z(51), z(51), z(21), 0)
    prec = np.array([(ce <= t).mean() for t in PRECISION_THRESHOLDS])
    valid = ~np.isnan(nce)
    nv = nce[valid]
    nprec = np.array([(nv <= t).mean() if len(nv) else 0.0 for t in NORM_PRECISION_THRESHOLDS])
    succ = np.array([(iou >= t).mean() for t in SUCCESS_THRESHOLDS])
    return OPEResult(float(prec[PR_THRESHOLD]), float(nprec.mean()), float(succ.mean()),
                     prec, nprec, succ, n)


def check_monotone(res: OPEResult):
    if np.any(np.diff(res.precision_curve) < 0) or np.any(np.diff(res.norm_precision_curve) < 0):
        raise AssertionError("precision curve decreases with threshold")
    if np.any(np.diff(res.success_curve) > 0):
        raise AssertionError("success curve increases with overlap threshold")


def ope_evaluate(trajectories: Sequence, sequences: Sequence[SequenceRecord]) -> OPEResult:
    """Pool per-frame scores over all sequences and build the three curves."""
    if len(trajectories) != len(sequences):
        raise IntegrityError(f"{len(trajectories)} trajectories for {len(sequences)} sequences")
    parts = []
    for traj, seq in zip(trajectories, sequences):
        if len(traj) != len(seq):
            raise IntegrityError(f"{seq.name}: trajectory has {len(traj)} boxes for {len(seq)} frames")
        parts.append(_frame_scores(traj, seq.gt_array()))
    if parts:
        ce, nce, iou = (np.concatenate(x) for x in zip(*parts))
    else:
        ce = nce = iou = np.zeros(0)
    res = _curves(ce, nce, iou)
    check_monotone(res)
    return res


def attribute_report(trajectories: Sequence, sequences: Sequence[SequenceRecord]) -> dict:
    """Per-attribute results over the sequences carrying each code; empty codes are omitted."""
    report, notes = {}, []
    for seq in sequences:
        bad = [a for a in seq.attributes if a not in ATTRIBUTES]
        if bad:
            raise VocabularyError(f"{seq.name}: unknown attribute codes {bad}")
    for code in ATTRIBUTES:
        idx = [i for i, s in enumerate(sequences) if code in s.attributes]
        if not idx:
            notes.append(f"{code}: no sequences")
            continue
        report[code] = ope_evaluate([trajectories[i] for i in idx], [sequences[i] for i in idx])
    report["_notes"] = notes
    return report


# ---------------------------------------------------------------------------
# output files


def write_curves(res: OPEResult, path) -> Path:
    path = Path(path)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["metric", "threshold", "value"])
        for name, thr, curve in (("precision", PRECISION_THRESHOLDS, res.precision_curve),
                                 ("norm_precision", NORM_PRECISION_THRESHOLDS, res.norm_precision_curve),
                                 ("success", SUCCESS_THRESHOLDS, res.success_curve)):
            for t, v in zip(thr, curve):
                w.writerow([name, repr(float(t)), repr(float(v))])
    return path


def read_curves(path) -> OPEResult:
    curves = {"precision": [], "norm_precision": [], "success": []}
    with open(path, newline="") as f:
        for row in csv.DictReader(f):
            curves[row["metric"]].append(float(row["value"]))
    prec, nprec, succ = (np.array(curves[k]) for k in ("precision", "norm_precision", "success"))
    return OPEResult(float(prec[PR_THRESHOLD]), float(nprec.mean()), float(succ.mean()), prec, nprec, succ, 0)


def emit_plots(results, out_dir, title: str = "") -> dict:
    """Write precision/success plots and one curve CSV per tracker.

    ``results`` is an OPEResult or a ``{tracker name: OPEResult}`` mapping.
    Legends are ranked by PR (precision plot) and SR (success plot). Returns
    the written paths plus the legend order of each plot.
    """
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    if isinstance(results, OPEResult):
        results = {"tracker": results}
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = {"curves": {}}
    for name, res in results.items():
        files["curves"][name] = write_curves(res, out / f"curves_{name}.csv")

    prec_rank = sorted(results, key=lambda k: -results[k].pr_at_20)
    succ_rank = sorted(results, key=lambda k: -results[k].sr_auc)
    for kind, rank, thr, attr, score, xlabel in (
        ("precision", prec_rank, PRECISION_THRESHOLDS, "precision_curve", "pr_at_20", "Location error threshold (px)"),
        ("success", succ_rank, SUCCESS_THRESHOLDS, "success_curve", "sr_auc", "Overlap threshold"),
    ):
        fig, ax = plt.subplots(figsize=(5, 4))
        for name in rank:
            r = results[name]
            ax.plot(thr, getattr(r, attr), label=f"{name} [{getattr(r, score):.3f}]")
        ax.set_xlabel(xlabel)
        ax.set_ylabel("Precision" if kind == "precision" else "Success rate")
        ax.set_ylim(0, 1.02)
        ax.grid(alpha=0.3)
        ax.set_title(f"{kind.capitalize()} plots of OPE {title}".strip())
        ax.legend(loc="lower right" if kind == "precision" else "lower left", fontsize=8)
        path = out / f"{kind}_plot.png"
        fig.savefig(path, dpi=100, bbox_inches="tight")
        plt.close(fig)
        files[kind] = path
        files[f"{kind}_legend"] = rank
    return files


def result_to_dict(res: OPEResult) -> dict:
    d = res.summary()
    if res.per_attribute:
        d["attributes"] = {k: v.summary() for k, v in res.per_attribute.items() if isinstance(v, OPEResult)}
    return d


def evaluate_with_attributes(trajectories, sequences) -> OPEResult:
    res = ope_evaluate(trajectories, sequences)
    report = attribute_report(trajectories, sequences)
    res.notes = report.pop("_notes")
    res.per_attribute = report
    return res


def trajectories_from_mapping(mapping: Mapping, sequences: Sequence[SequenceRecord]) -> list:
    missing = [s.name for s in sequences if s.name not in mapping]
    if missing:
        raise IntegrityError(f"missing trajectories for sequences: {', '.join(missing)}")
    return [mapping[s.name] for s in sequences]

