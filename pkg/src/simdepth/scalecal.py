"""Absolute-scale machinery: the global factor learned from virtual-world
self-supervision, and the per-image median scaling used by relative evaluation.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .data import DepthMap
from .losses import self_supervised_loss
from .networks import DepthNetwork, PoseNetwork, disp_to_depth
from .trainer import make_batch


@dataclass
class ScaleFactor:
    """A positive multiplicative depth correction and where it came from."""

    psi: float
    source: str                    # "global-virtual" or "per-image"
    gt_median: float | None = None
    pred_median: float | None = None

    def __post_init__(self):
        if not np.isfinite(self.psi) or self.psi <= 0:
            raise ValueError("scale factor must be positive and finite, got %r" % self.psi)


def _depth_arrays(pred, gt):
    pred = np.asarray(pred.values if isinstance(pred, DepthMap) else pred, dtype=np.float64)
    if isinstance(gt, DepthMap):
        gt_values = np.asarray(gt.values, dtype=np.float64)
        gt_valid = gt.valid
    else:
        gt_values = np.asarray(gt, dtype=np.float64)
        gt_valid = np.isfinite(gt_values) & (gt_values > 0)
    return pred, gt_values, gt_valid


def per_image_scale(pred, gt, d_eval_min=1e-3, cap=None):
    """Median(gt) / median(pred) over the valid-GT pixel set of one image."""
    pred, gt_values, valid = _depth_arrays(pred, gt)
    valid = valid & (gt_values > d_eval_min) & np.isfinite(pred)
    if cap is not None:
        valid = valid & (gt_values < cap)
    if not valid.any():
        raise ValueError("no overlapping valid pixels for per-image scaling")
    pred_median = float(np.median(pred[valid]))
    gt_median = float(np.median(gt_values[valid]))
    if pred_median <= 0:
        raise ValueError("non-positive prediction median %r" % pred_median)
    return ScaleFactor(gt_median / pred_median, "per-image",
                       gt_median=gt_median, pred_median=pred_median)


def apply_scale(pred, scale, d_eval_min=1e-3, d_max=80.0):
    """Multiply by the factor, then clamp into the evaluation range."""
    psi = scale.psi if isinstance(scale, ScaleFactor) else float(scale)
    if psi <= 0:
        raise ValueError("scale must be positive, got %r" % psi)
    if isinstance(pred, DepthMap):
        values = np.clip(pred.values * psi, d_eval_min, d_max).astype(np.float32)
        return DepthMap(np.where(pred.valid, values, 0.0).astype(np.float32), pred.valid)
    return np.clip(np.asarray(pred) * psi, d_eval_min, d_max)


def _self_supervised_calibration_run(virtual, cfg, rng):
    """Train a throwaway depth + pose pair on virtual triplets, SfM loss only."""
    torch.manual_seed(cfg.seed + 1)
    depth_net = DepthNetwork(backbone=cfg.backbone, pyramid_channels=cfg.pyramid_channels)
    pose_net = PoseNetwork(backbone=cfg.backbone)
    depth_net.train()
    pose_net.train()
    optimizer = torch.optim.Adam(
        list(depth_net.parameters()) + list(pose_net.parameters()), lr=cfg.calibration_lr)

    order = []
    for _ in range(cfg.calibration_steps):
        while len(order) < cfg.calibration_batch:
            order.extend(rng.permutation(len(virtual)).tolist())
        picked, order = order[:cfg.calibration_batch], order[cfg.calibration_batch:]
        samples = [virtual[i] for i in picked]
        batch = make_batch(samples, [], cfg, rng, augment=False)
        disps, _ = depth_net(batch.real_center)
        pose_prev = pose_net(batch.real_center, batch.real_prev)
        pose_next = pose_net(batch.real_center, batch.real_next)
        loss = self_supervised_loss(
            (batch.real_prev, batch.real_center, batch.real_next),
            disps, pose_prev, pose_next, batch.real_k,
            smooth_weight=cfg.smooth_weight, d_min=cfg.d_min, d_max_model=cfg.d_max_model)
        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        optimizer.step()

    depth_net.eval()

    def predict(image):
        x = torch.from_numpy(np.ascontiguousarray(image)).permute(2, 0, 1).unsqueeze(0)
        with torch.no_grad():
            d, _ = depth_net(x)
        return disp_to_depth(d[0], cfg.d_min, cfg.d_max_model)[0, 0].numpy()

    return predict


def calibrate_global_scale(virtual, cfg, model=None, rng=None, d_eval_min=1e-3):
    """Global scale from virtual data: GT median over prediction median.

    Trains a throwaway model with self-supervision only (unless `model`, an
    image -> depth callable, is injected), evaluates both medians over pixels
    with GT inside (d_eval_min, d_max), and discards the model.
    """
    if len(virtual) == 0:
        raise ValueError("calibration set is empty")
    if model is None:
        rng = rng or np.random.default_rng(cfg.seed + 1)
        model = _self_supervised_calibration_run(virtual, cfg, rng)

    preds, gts = [], []
    for trip in virtual:
        gt = trip.gt_depth
        sel = gt.valid & (gt.values > d_eval_min) & (gt.values < cfg.d_max)
        if not sel.any():
            continue
        pred = np.asarray(model(trip.center), dtype=np.float64)
        preds.append(pred[sel])
        gts.append(gt.values[sel].astype(np.float64))
    if not preds:
        raise ValueError("no valid GT pixels in the calibration set")
    pred_median = float(np.median(np.concatenate(preds)))
    gt_median = float(np.median(np.concatenate(gts)))
    if pred_median <= 0 or gt_median <= 0:
        raise ValueError("zero median in calibration: pred=%r gt=%r" % (pred_median, gt_median))
    return ScaleFactor(gt_median / pred_median, "global-virtual",
                       gt_median=gt_median, pred_median=pred_median)


def save_scale(scale, path):
    with open(path, "w") as fh:
        fh.write("%.17g\n" % scale.psi)


def load_scale(path):
    return float(open(path).read().strip())
