"""
Overfit one sequence, then track it
===================================

Train the tracker on a single synthetic sequence, run one-pass tracking from
frame 0 and score the trajectory. The default is a small network that runs in
about a minute; ``--overfit`` uses the d=192 configuration from
``configs/overfit.yaml`` (2000 steps, about 20 minutes on one CPU core).

    python notebooks/02_train_track_evaluate.py --out demo_out/02
"""

# %%
import argparse
import time
from pathlib import Path

import numpy as np

from evfuse.config import RunConfig
from evfuse.datamodel import SynthConfig, generate_synthetic_sequence
from evfuse.evaluation import emit_plots, ope_evaluate, overlap_ratio
from evfuse.tracker import run_sequence
from evfuse.trainer import Trainer, save_checkpoint

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_out/02")
parser.add_argument("--overfit", action="store_true", help="full-size model and 2000 steps")
parser.add_argument("--steps", type=int)
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# %%
if args.overfit:
    cfg = RunConfig.from_file(Path(__file__).parents[1] / "configs" / "overfit.yaml")
    scene, steps = SynthConfig(), args.steps or 2000
else:
    cfg = RunConfig({
        "backbone.dim": 64, "backbone.depth": 3, "backbone.heads": 4, "uncert.heads": 4,
        "backbone.elim_blocks": [1], "head.channels": 32,
        "data.template_size": 48, "data.search_size": 96,
        "train.batch_size": 4, "train.lr_backbone": 5e-4, "train.lr_other": 1e-3,
        "train.steps_per_epoch": 100, "train.lr_decay_epoch": 4,
    })
    scene, steps = SynthConfig(n_frames=24, width=160, height=160, object_size=(28, 24)), args.steps or 500
seq = generate_synthetic_sequence(scene, seed=1, name="demo")
print(f"model d={cfg['backbone.dim']} depth={cfg['backbone.depth']}, {steps} steps on {len(seq)} frames")

# %%
# Each step samples a template frame and a later search frame, crops both
# modalities around the jittered target and sums the three branch losses.
trainer = Trainer(cfg, [seq])
t0 = time.perf_counter()
with open(out / "train_log.jsonl", "w") as log:
    history = trainer.fit(steps, log_file=log, log_every=10)
total = np.array([h["total"] for h in history])
k = max(1, steps // 10)
print(f"loss {total[:k].mean():.3f} -> {total[-k:].mean():.3f} in {time.perf_counter() - t0:.0f} s")
save_checkpoint(out / "checkpoint.pt", trainer.model, trainer.optimizer, step=trainer.step)

# %%
# Tracking is initialised once with the frame-0 groundtruth and never corrected.
traj = run_sequence(seq, trainer.model)
traj.write(out / "demo.txt")
iou = overlap_ratio(traj.boxes, seq.groundtruth)
print("per-frame IoU:", np.round(iou, 2))
fps = len(traj.boxes) / sum(traj.time_total)
print(f"{fps:.1f} fps including event stacking and cropping")

# %%
res = ope_evaluate([traj.boxes], [seq])
print(f"PR {res.pr_at_20:.3f}  NPR {res.npr:.3f}  SR {res.sr_auc:.3f}")
files = emit_plots({"demo": res}, out, title="overfit sequence")
print("plots:", files["precision"], files["success"])
