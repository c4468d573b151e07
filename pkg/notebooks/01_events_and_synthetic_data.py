"""
Synthetic unaligned RGB + event data
====================================

Generate one short sequence, look at how events pair with a frame, and see
what a sensor offset does to the event image.

Run from the repository root::

    python notebooks/01_events_and_synthetic_data.py --out demo_out/01
"""

# %%
import argparse
from pathlib import Path

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from evfuse.datamodel import SynthConfig, generate_synthetic_sequence, pair_frame_with_events, stacking_window

parser = argparse.ArgumentParser()
parser.add_argument("--out", default="demo_out/01")
args = parser.parse_args()
out = Path(args.out)
out.mkdir(parents=True, exist_ok=True)

# %%
# A textured square drifts over a cluttered background. Events are rendered
# from log-intensity changes between sub-frames, so they only fire where the
# object edges move.
aligned = generate_synthetic_sequence(SynthConfig(n_frames=12), seed=3, name="aligned")
print(f"{len(aligned)} frames, {len(aligned.events)} events, first box {aligned.groundtruth[0]}")

# %%
# Frame i owns the events between the previous frame timestamp and its own.
i = 6
t0, t1 = stacking_window(aligned, i)
pair = pair_frame_with_events(aligned, i)
n_ev = int(pair.event_frame.on_channel.sum() + pair.event_frame.off_channel.sum())
print(f"frame {i}: window [{t0}, {t1}) us, {n_ev} events")

# %%
# The same scene with the event sensor shifted by (8, 4) px. The groundtruth
# stays in RGB coordinates, so the event blob now sits off the box.
shifted = generate_synthetic_sequence(SynthConfig(n_frames=12, misalignment=(8, 4, 0)), seed=3, name="shifted")


def centroid(frame):
    mass = frame.on_channel + frame.off_channel
    ys, xs = np.nonzero(mass)
    w = mass[ys, xs]
    return np.average(xs, weights=w) + 0.5, np.average(ys, weights=w) + 0.5


for seq in (aligned, shifted):
    cx, cy = centroid(pair_frame_with_events(seq, i).event_frame)
    g = seq.groundtruth[i]
    print(f"{seq.name:8s} event centroid ({cx:6.1f}, {cy:6.1f})  box centre ({g.cx:6.1f}, {g.cy:6.1f})")

# %%
fig, axes = plt.subplots(1, 3, figsize=(12, 4))
axes[0].imshow(pair.rgb_image())
axes[0].set_title(f"RGB frame {i}")
for ax, seq in zip(axes[1:], (aligned, shifted)):
    img = pair_frame_with_events(seq, i).event_image()
    ax.imshow(img)
    g = seq.groundtruth[i]
    ax.add_patch(plt.Rectangle((g.x, g.y), g.w, g.h, fill=False, color="w"))
    ax.set_title(f"events, {seq.name}")
for ax in axes:
    ax.axis("off")
fig.tight_layout()
fig.savefig(out / "events.png", dpi=120)
print(f"wrote {out / 'events.png'}")
