"""The auto-mask at work.

A static camera is the classic failure mode of video self-supervision: every
warp looks perfect because nothing moved, so the loss would happily learn
arbitrary depth. The auto-mask compares each pixel's warped error against the
raw frame-to-frame error and silently drops pixels the warp does not improve.
This script shows the mask on a moving sequence and on a static one.

Run:  python demos/02_automask_and_losses.py
"""

import os

import numpy as np
import torch

from simdepth import data, geometry, losses

out_dir = "demo_outputs"
os.makedirs(out_dir, exist_ok=True)


def tensorize(a):
    return torch.from_numpy(a).permute(2, 0, 1).unsqueeze(0).double()


def mask_for(world, spec, label):
    trip = world.virtual[1]
    prev, center, next_ = (tensorize(f) for f in trip.frames)
    gt = trip.gt_depth
    depth = torch.from_numpy(np.where(gt.valid, gt.values, spec.far_plane).astype(np.float64))
    depth = depth.unsqueeze(0).unsqueeze(0)
    pose_p = torch.from_numpy(world.gt_relative_pose(trip.sequence, trip.index, trip.index - 1))
    pose_n = torch.from_numpy(world.gt_relative_pose(trip.sequence, trip.index, trip.index + 1))
    synth_p = geometry.synthesize_view(depth, prev, pose_p.unsqueeze(0), trip.intrinsics)
    synth_n = geometry.synthesize_view(depth, next_, pose_n.unsqueeze(0), trip.intrinsics)
    identity_pe = losses.pe_min(prev, center, next_)
    warped_pe = losses.pe_min(synth_p, center, synth_n)
    mask = losses.auto_mask(identity_pe, warped_pe)
    kept = mask.mean().item()
    print(f"{label:8s} kept {100 * kept:5.1f}% of pixels "
          f"(masked loss {losses.cpe(mask, warped_pe).item():.5f})")
    return trip.center, mask[0, 0].numpy()


print("fraction of pixels the auto-mask lets into the photometric loss:")
moving_spec = data.SceneSpec(scenes=1, frames=4)
moving = data.generate_toy_world(moving_spec, np.random.default_rng(3))
static_spec = data.SceneSpec(scenes=1, frames=4, speed_range=(0.0, 0.0), sway_amp=0.0, yaw_amp=0.0)
static = data.generate_toy_world(static_spec, np.random.default_rng(3))

img_m, mask_m = mask_for(moving, moving_spec, "moving")
img_s, mask_s = mask_for(static, static_spec, "static")
print("a static camera keeps 0%: the degenerate case contributes nothing")

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt

fig, axes = plt.subplots(2, 2, figsize=(9, 6))
axes[0, 0].imshow(img_m)
axes[0, 0].set_title("moving camera: frame")
axes[0, 1].imshow(mask_m, cmap="gray", vmin=0, vmax=1)
axes[0, 1].set_title("auto-mask (white = used)")
axes[1, 0].imshow(img_s)
axes[1, 0].set_title("static camera: frame")
axes[1, 1].imshow(mask_s, cmap="gray", vmin=0, vmax=1)
axes[1, 1].set_title("auto-mask (all dropped)")
for ax in axes.ravel():
    ax.axis("off")
fig.tight_layout()
fig.savefig(f"{out_dir}/automask.png", dpi=110)
print(f"wrote {out_dir}/automask.png")
