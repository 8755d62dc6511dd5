"""Pinhole-camera geometry and differentiable view synthesis.

All tensor operations follow the (B, C, H, W) layout, run in the dtype of
their inputs, and are pure (safe for concurrent use on distinct inputs).
Pixel convention: integer coordinate (u, v) is the center of texel (u, v).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import torch

# Points closer than this to the camera plane (in meters) count as out of view.
Z_CUTOFF = 1e-3


@dataclass(frozen=True)
class Intrinsics:
    """Pinhole camera parameters in pixels at a given resolution."""

    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive, got fx=%r fy=%r" % (self.fx, self.fy))
        if not (0 <= self.cx < self.width):
            raise ValueError("cx=%r outside [0, width=%r)" % (self.cx, self.width))
        if not (0 <= self.cy < self.height):
            raise ValueError("cy=%r outside [0, height=%r)" % (self.cy, self.height))

    def scaled(self, width, height):
        """Intrinsics rescaled to a new resolution (proportional in each axis)."""
        sx = width / self.width
        sy = height / self.height
        return Intrinsics(self.fx * sx, self.fy * sy, self.cx * sx, self.cy * sy, width, height)

    def tensor(self, dtype=torch.float32, device=None):
        """(fx, fy, cx, cy) as a 4-vector."""
        return torch.tensor([self.fx, self.fy, self.cx, self.cy], dtype=dtype, device=device)

    def save(self, path):
        Path(path).write_text("%.17g %.17g %.17g %.17g\n" % (self.fx, self.fy, self.cx, self.cy))

    @classmethod
    def from_file(cls, path, width, height):
        """Read 'fx fy cx cy' (pixels at native resolution) from a text file."""
        parts = Path(path).read_text().split()
        if len(parts) != 4:
            raise ValueError("intrinsics file %s must hold exactly 4 numbers, got %d" % (path, len(parts)))
        fx, fy, cx, cy = (float(p) for p in parts)
        return cls(fx, fy, cx, cy, width, height)


def rotation_from_axis_angle(axisangle):
    """Rodrigues' formula, differentiable and stable near zero rotation.

    axisangle: (..., 3) rotation vector (axis * angle, radians).
    Returns (..., 3, 3) rotation matrices.
    """
    theta_sq = (axisangle * axisangle).sum(dim=-1, keepdim=True)
    theta = torch.sqrt(theta_sq.clamp(min=1e-30))

    # sin(t)/t and (1-cos(t))/t^2 with Taylor fallbacks for tiny angles
    small = theta_sq < 1e-12
    a = torch.where(small, 1.0 - theta_sq / 6.0, torch.sin(theta) / theta)
    b = torch.where(small, 0.5 - theta_sq / 24.0, (1.0 - torch.cos(theta)) / theta_sq.clamp(min=1e-30))

    x, y, z = axisangle[..., 0], axisangle[..., 1], axisangle[..., 2]
    zero = torch.zeros_like(x)
    k = torch.stack([
        torch.stack([zero, -z, y], dim=-1),
        torch.stack([z, zero, -x], dim=-1),
        torch.stack([-y, x, zero], dim=-1),
    ], dim=-2)
    eye = torch.eye(3, dtype=axisangle.dtype, device=axisangle.device).expand(k.shape)
    return eye + a.unsqueeze(-1) * k + b.unsqueeze(-1) * (k @ k)


def pose_matrix(axisangle, translation):
    """4x4 rigid transform from an axis-angle rotation and a translation.

    axisangle, translation: (..., 3). Returns (..., 4, 4).
    """
    rot = rotation_from_axis_angle(axisangle)
    batch_shape = rot.shape[:-2]
    mat = torch.zeros(batch_shape + (4, 4), dtype=rot.dtype, device=rot.device)
    mat[..., :3, :3] = rot
    mat[..., :3, 3] = translation
    mat[..., 3, 3] = 1.0
    return mat


def invert_pose(mat):
    """Inverse of a rigid 4x4 transform (or a batch of them)."""
    rot = mat[..., :3, :3]
    t = mat[..., :3, 3:]
    inv = torch.zeros_like(mat)
    rot_t = rot.transpose(-1, -2)
    inv[..., :3, :3] = rot_t
    inv[..., :3, 3:] = -rot_t @ t
    inv[..., 3, 3] = 1.0
    return inv


def _check_rigid(mat, tol=1e-6):
    rot = mat[..., :3, :3]
    eye = torch.eye(3, dtype=mat.dtype, device=mat.device)
    if (rot @ rot.transpose(-1, -2) - eye).abs().max().item() > tol:
        raise ValueError("rotation block is not orthonormal within %g" % tol)
    if (torch.det(rot) - 1.0).abs().max().item() > 1e-4:
        raise ValueError("rotation block must have determinant +1")


@dataclass(frozen=True)
class PoseTransform:
    """6-DoF relative camera motion as a rigid 4x4 matrix."""

    matrix: torch.Tensor

    def __post_init__(self):
        if self.matrix.shape[-2:] != (4, 4):
            raise ValueError("pose matrix must be (..., 4, 4), got %r" % (tuple(self.matrix.shape),))
        _check_rigid(self.matrix)

    @classmethod
    def from_axis_angle(cls, rotation, translation, dtype=torch.float64):
        rotation = torch.as_tensor(rotation, dtype=dtype)
        translation = torch.as_tensor(translation, dtype=dtype)
        return cls(pose_matrix(rotation, translation))

    @classmethod
    def identity(cls, dtype=torch.float64):
        return cls(torch.eye(4, dtype=dtype))

    def inverse(self):
        return PoseTransform(invert_pose(self.matrix))

    @property
    def rotation(self):
        return self.matrix[..., :3, :3]

    @property
    def translation(self):
        return self.matrix[..., :3, 3]


def _k_params(intrinsics, dtype, device):
    """Normalize an Intrinsics / (4,) / (B, 4) spec to broadcastable fx, fy, cx, cy."""
    if isinstance(intrinsics, Intrinsics):
        k = intrinsics.tensor(dtype=dtype, device=device)
    else:
        k = torch.as_tensor(intrinsics, dtype=dtype, device=device)
    if k.shape[-1] != 4:
        raise ValueError("intrinsics tensor must end in 4 values (fx, fy, cx, cy)")
    if k.dim() == 1:
        k = k.unsqueeze(0)
    # (B, 4) -> four (B, 1, 1) tensors
    return tuple(k[:, i].view(-1, 1, 1) for i in range(4))


def _pose_tensor(pose, dtype, device):
    if pose is None:
        return None
    if isinstance(pose, PoseTransform):
        pose = pose.matrix
    pose = torch.as_tensor(pose, dtype=dtype, device=device)
    if pose.dim() == 2:
        pose = pose.unsqueeze(0)
    return pose


def backproject(depth, intrinsics):
    """Lift a dense depth map to camera-frame 3D points.

    depth: (B, 1, H, W) positive depth in meters (an (H, W) map is promoted).
    Returns points (B, 3, H, W) with points[:, 2] == depth.
    """
    if depth.dim() == 2:
        depth = depth.unsqueeze(0).unsqueeze(0)
    elif depth.dim() == 3:
        depth = depth.unsqueeze(1)
    if (depth <= 0).any():
        raise ValueError("backproject requires strictly positive depth at every pixel")
    b, _, h, w = depth.shape
    fx, fy, cx, cy = _k_params(intrinsics, depth.dtype, depth.device)
    v, u = torch.meshgrid(
        torch.arange(h, dtype=depth.dtype, device=depth.device),
        torch.arange(w, dtype=depth.dtype, device=depth.device),
        indexing="ij",
    )
    z = depth[:, 0]
    x = (u.unsqueeze(0) - cx) / fx * z
    y = (v.unsqueeze(0) - cy) / fy * z
    return torch.stack([x, y, z], dim=1)


def project(points, pose, intrinsics, z_cutoff=Z_CUTOFF):
    """Rigidly transform 3D points and project to continuous pixel coordinates.

    points: (B, 3, H, W) camera-frame points; pose: (B, 4, 4) / PoseTransform / None.
    Returns (grid, depth, in_view): grid (B, H, W, 2) pixel coords, depth (B, 1, H, W)
    z after the transform, in_view (B, 1, H, W) bool flagging z > z_cutoff.
    Out-of-view pixels keep a finite (clamped-z) projection so downstream border
    clamping stays well defined.
    """
    b, c, h, w = points.shape
    if c != 3:
        raise ValueError("points must be (B, 3, H, W)")
    pose = _pose_tensor(pose, points.dtype, points.device)
    if pose is not None:
        flat = points.reshape(b, 3, -1)
        flat = pose[:, :3, :3] @ flat + pose[:, :3, 3:]
        points = flat.reshape(b, 3, h, w)
    fx, fy, cx, cy = _k_params(intrinsics, points.dtype, points.device)
    z = points[:, 2]
    in_view = z > z_cutoff
    z_safe = z.clamp(min=z_cutoff)
    u = fx * points[:, 0] / z_safe + cx
    v = fy * points[:, 1] / z_safe + cy
    grid = torch.stack([u, v], dim=-1)
    return grid, z.unsqueeze(1), in_view.unsqueeze(1)


def warp(source, grid):
    """Bilinearly sample `source` at continuous pixel locations `grid`.

    source: (B, C, H, W); grid: (B, Ho, Wo, 2) as (u, v) pixel coordinates.
    Coordinates outside the image are clamped to the border. Differentiable in
    both `source` and `grid`; sampling at exact texel centers reproduces texels
    bit for bit.
    """
    if source.dim() != 4 or grid.dim() != 4 or grid.shape[-1] != 2:
        raise ValueError("warp expects source (B, C, H, W) and grid (B, Ho, Wo, 2)")
    if source.shape[0] != grid.shape[0]:
        raise ValueError("warp batch mismatch: source %d vs grid %d" % (source.shape[0], grid.shape[0]))
    b, c, h, w = source.shape
    u = grid[..., 0].clamp(0, w - 1)
    v = grid[..., 1].clamp(0, h - 1)
    u0f = u.floor()
    v0f = v.floor()
    wu = u - u0f
    wv = v - v0f
    u0 = u0f.long().clamp(0, w - 1)
    v0 = v0f.long().clamp(0, h - 1)
    u1 = (u0 + 1).clamp(max=w - 1)
    v1 = (v0 + 1).clamp(max=h - 1)

    flat = source.reshape(b, c, h * w)

    def take(vi, ui):
        idx = (vi * w + ui).reshape(b, 1, -1).expand(b, c, -1)
        return flat.gather(2, idx).reshape(b, c, *u.shape[1:])

    wu = wu.unsqueeze(1)
    wv = wv.unsqueeze(1)
    top = take(v0, u0) * (1 - wu) + take(v0, u1) * wu
    bot = take(v1, u0) * (1 - wu) + take(v1, u1) * wu
    return top * (1 - wv) + bot * wv


def identity_grid(height, width, batch=1, dtype=torch.float32, device=None):
    """Grid mapping every pixel to itself, shape (B, H, W, 2)."""
    v, u = torch.meshgrid(
        torch.arange(height, dtype=dtype, device=device),
        torch.arange(width, dtype=dtype, device=device),
        indexing="ij",
    )
    return torch.stack([u, v], dim=-1).unsqueeze(0).expand(batch, height, width, 2).contiguous()


def synthesize_view(target_depth, source, pose, intrinsics, return_diagnostics=False):
    """Render the target view by warping `source` through depth and relative pose.

    target_depth: (B, 1, H, W) depth of the target frame; source: (B, C, H, W)
    image of the adjacent frame; pose: transform taking target-camera points to
    source-camera points. Returns the synthesized image; with
    return_diagnostics=True also returns dict(in_view=..., out_of_view_fraction=...).
    """
    points = backproject(target_depth, intrinsics)
    grid, _, in_view = project(points, pose, intrinsics)
    image = warp(source, grid)
    if not return_diagnostics:
        return image
    frac = 1.0 - in_view.to(image.dtype).mean().item()
    return image, {"in_view": in_view, "out_of_view_fraction": frac}
