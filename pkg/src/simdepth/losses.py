"""Training losses: photometric self-supervision with auto-masking, masked
supervised L1, edge-aware smoothness, and the domain-classifier logistic loss.

All functions are pure and shape-strict; image tensors are (B, C, H, W) with
values in [0, 1], error maps are (B, 1, H, W).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .config import ConfigError
from .geometry import synthesize_view
from .networks import disp_to_depth

SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2
PE_ALPHA = 0.85


@dataclass
class LossBundle:
    """Per-step scalar losses, matching what the gradient composition consumes.

    The DA entries carry the beta_da trade-off factor already applied.
    """

    l_sp: float
    l_sf: float
    l_da_real: float
    l_da_virtual: float

    def check_finite(self):
        for name, value in self.__dict__.items():
            if not np.isfinite(value):
                raise RuntimeError("non-finite loss %s=%r, aborting step" % (name, value))
        if self.l_sp < 0 or self.l_sf < 0:
            raise RuntimeError("task losses must be non-negative: %r" % self)


def _check_same_shape(a, b, what):
    if a.shape != b.shape:
        raise ValueError("%s: shape mismatch %r vs %r" % (what, tuple(a.shape), tuple(b.shape)))


def _as_batched_pose(pose, batch):
    pose = pose.matrix if hasattr(pose, "matrix") else pose
    if pose.dim() == 2:
        pose = pose.unsqueeze(0).expand(batch, 4, 4)
    return pose


_BOX_WEIGHTS = {}


def _box3(x):
    """3x3 box mean with reflection padding, one depthwise conv per call."""
    k = x.shape[1]
    key = (k, x.dtype, x.device)
    weight = _BOX_WEIGHTS.get(key)
    if weight is None:
        weight = torch.full((k, 1, 3, 3), 1.0 / 9.0, dtype=x.dtype, device=x.device)
        _BOX_WEIGHTS[key] = weight
    return F.conv2d(F.pad(x, (1, 1, 1, 1), mode="reflect"), weight, groups=k)


def ssim(a, b):
    """Structural similarity map with 3x3 mean/variance pooling.

    Inputs share a (B, C, H, W) shape; the map is returned per channel in [-1, 1]
    (up to the C1/C2 stabilizers). Reflection padding keeps the output size.
    """
    _check_same_shape(a, b, "ssim")
    c = a.shape[1]
    # all five windowed means in one fused pooling pass
    pooled = _box3(torch.cat([a, b, a * a, b * b, a * b], dim=1))
    mu_a, mu_b = pooled[:, :c], pooled[:, c:2 * c]
    sigma_a = pooled[:, 2 * c:3 * c] - mu_a * mu_a
    sigma_b = pooled[:, 3 * c:4 * c] - mu_b * mu_b
    sigma_ab = pooled[:, 4 * c:] - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sigma_ab + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (sigma_a + sigma_b + SSIM_C2)
    return num / den


def pe(a, b, alpha=PE_ALPHA):
    """Photometric error map: alpha * (1 - SSIM)/2 + (1 - alpha) * |a - b|.

    Both terms are channel-averaged; result is (B, 1, H, W), zero iff a == b.
    """
    _check_same_shape(a, b, "pe")
    ssim_term = ((1 - ssim(a, b)) / 2).clamp(0, 1).mean(1, keepdim=True)
    l1_term = (a - b).abs().mean(1, keepdim=True)
    return alpha * ssim_term + (1 - alpha) * l1_term


def pe_min(prev, center, next_):
    """Pixelwise minimum of the photometric errors against both neighbors."""
    _check_same_shape(prev, center, "pe_min")
    _check_same_shape(next_, center, "pe_min")
    # one batched pe call over both neighbors, then the per-pixel minimum
    both = pe(torch.cat([center, center]), torch.cat([prev, next_]))
    b = center.shape[0]
    return torch.minimum(both[:b], both[b:])


def auto_mask(identity_pe, warped_pe):
    """Binary mask of pixels the warped error strictly improves on.

    1 where warped_pe < identity_pe (strict), else 0. The comparison detaches
    from the graph, so the mask is a constant during back-propagation.
    """
    _check_same_shape(identity_pe, warped_pe, "auto_mask")
    return (warped_pe < identity_pe).to(warped_pe.dtype)


def cpe(mask, warped_pe):
    """Mask-gated photometric error averaged over all pixels (not just kept ones)."""
    _check_same_shape(mask, warped_pe, "cpe")
    return (mask * warped_pe).mean()


def smoothness(disparity, image):
    """Edge-aware first-order smoothness of mean-normalized disparity.

    disparity: (B, 1, H, W) with strictly positive per-image mean;
    image: (B, C, H, W) whose gradients attenuate the penalty.
    """
    if disparity.shape[0] != image.shape[0] or disparity.shape[-2:] != image.shape[-2:]:
        raise ValueError("smoothness: disparity %r and image %r disagree"
                         % (tuple(disparity.shape), tuple(image.shape)))
    mean_disp = disparity.mean(dim=(2, 3), keepdim=True)
    if (mean_disp.abs() <= 1e-12).any():
        raise ValueError("smoothness requires non-zero mean disparity")
    norm = disparity / mean_disp
    grad_x = (norm[..., :, :-1] - norm[..., :, 1:]).abs()
    grad_y = (norm[..., :-1, :] - norm[..., 1:, :]).abs()
    img_gx = (image[..., :, :-1] - image[..., :, 1:]).abs().mean(1, keepdim=True)
    img_gy = (image[..., :-1, :] - image[..., 1:, :]).abs().mean(1, keepdim=True)
    grad_x = grad_x * torch.exp(-img_gx)
    grad_y = grad_y * torch.exp(-img_gy)
    return grad_x.mean() + grad_y.mean()


def self_supervised_loss(frames, disparities, pose_to_prev, pose_to_next, intrinsics,
                         smooth_weight=1e-3, d_min=0.1, d_max_model=100.0,
                         return_diagnostics=False):
    """Multi-scale view-synthesis loss for one mini-batch of frame triplets.

    frames: (prev, center, next) tensors (B, C, H, W) at full resolution.
    disparities: list of (B, 1, H/2^s, W/2^s) sigmoid outputs, finest first;
        each is upsampled to full resolution before synthesis, while the
        smoothness term stays at native scale with a 1/2^s attenuation.
    pose_to_prev / pose_to_next: (B, 4, 4) transforms from the center camera
        to each neighbor camera.
    Returns the scale-averaged scalar; with return_diagnostics=True also a dict
    holding per-scale masks and photometric terms.
    """
    prev, center, next_ = frames
    _check_same_shape(prev, center, "self_supervised_loss")
    _check_same_shape(next_, center, "self_supervised_loss")
    full_size = center.shape[-2:]
    b = center.shape[0]

    # both synthesis directions ride one doubled batch
    sources = torch.cat([prev, next_])
    poses = torch.cat([_as_batched_pose(pose_to_prev, b), _as_batched_pose(pose_to_next, b)])
    k2 = torch.cat([intrinsics, intrinsics]) if torch.is_tensor(intrinsics) and intrinsics.dim() == 2 \
        else intrinsics

    identity_pe = pe_min(prev, center, next_)
    total = 0.0
    diag = {"masks": [], "photometric": [], "smoothness": []}
    for scale, disp in enumerate(disparities):
        if disp.shape[-2:] != full_size:
            disp_full = F.interpolate(disp, size=full_size, mode="bilinear", align_corners=False)
        else:
            disp_full = disp
        depth = disp_to_depth(disp_full, d_min, d_max_model)
        synth = synthesize_view(torch.cat([depth, depth]), sources, poses, k2)
        warped_pe = pe_min(synth[:b], center, synth[b:])
        mask = auto_mask(identity_pe, warped_pe)
        photometric = cpe(mask, warped_pe)

        if disp.shape[-2:] != full_size:
            image_s = F.interpolate(center, size=disp.shape[-2:], mode="area")
        else:
            image_s = center
        smooth = smoothness(disp, image_s)
        total = total + photometric + smooth_weight * smooth / (2 ** scale)
        diag["masks"].append(mask)
        diag["photometric"].append(photometric)
        diag["smoothness"].append(smooth)

    loss = total / len(disparities)
    if return_diagnostics:
        return loss, diag
    return loss


def supervised_loss(pred, gt, mask):
    """Weighted L1 depth regression, averaged over all pixels.

    mask carries per-pixel weights in [0, 1]; invalid-GT pixels must already
    hold weight 0.
    """
    _check_same_shape(pred, gt, "supervised_loss")
    _check_same_shape(mask, gt, "supervised_loss mask")
    return (mask * (pred - gt).abs()).mean()


def build_supervision_mask(gt_depth, semantics, d_max, weight_table, sky_class="sky"):
    """Per-pixel supervision weights from semantics and the depth cap.

    gt_depth: (H, W) float array, non-positive/non-finite marking invalid pixels.
    semantics: ClassMap (values + id -> name legend).
    weight_table: class name -> weight in [0, 1]; must cover every legend class.
    Weight is forced to 0 for sky, invalid GT, and GT >= d_max. Computed once
    per sample before training; never differentiated through.
    """
    legend = semantics.legend
    ids_present = np.unique(semantics.values)
    lut_size = int(max(legend.keys()) + 1)
    lut = np.full(lut_size, -1.0, dtype=np.float32)
    for class_id, name in legend.items():
        if name not in weight_table:
            raise ConfigError("class %r (id %d) missing from the class-weight table" % (name, class_id))
        weight = float(weight_table[name])
        if not (0.0 <= weight <= 1.0):
            raise ConfigError("weight for class %r must lie in [0, 1], got %r" % (name, weight))
        lut[class_id] = 0.0 if name == sky_class else weight
    unknown = [int(i) for i in ids_present if i >= lut_size or lut[i] < 0]
    if unknown:
        raise ConfigError("semantic map holds ids %r absent from the legend" % unknown)

    mask = lut[semantics.values]
    invalid = ~np.isfinite(gt_depth) | (gt_depth <= 0) | (gt_depth >= d_max)
    mask = np.where(invalid, np.float32(0.0), mask)
    return mask.astype(np.float32)


def da_loss(logits_real=None, logits_virtual=None):
    """Domain-classifier logistic loss, one mean-reduced term per domain.

    Real samples carry label 1, virtual samples label 0. Either side may be
    None (the other domain's pass); its slot comes back as None.
    """
    l_real = None
    l_virtual = None
    if logits_real is not None:
        logits_real = logits_real.reshape(-1)
        l_real = F.binary_cross_entropy_with_logits(logits_real, torch.ones_like(logits_real))
    if logits_virtual is not None:
        logits_virtual = logits_virtual.reshape(-1)
        l_virtual = F.binary_cross_entropy_with_logits(logits_virtual, torch.zeros_like(logits_virtual))
    return l_real, l_virtual
