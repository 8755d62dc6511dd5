"""Dataset model for both domains plus the procedural toy-world generator.

On-disk layout (one dataset root):
    root/classes.txt                   JSON mapping class name -> integer id
    root/{real|virtual}/seq_NNNN/
        intrinsics.txt                 fx fy cx cy (pixels, native resolution)
        rgb_%06d.png                   8-bit RGB
        depth_%06d.png                 16-bit grayscale, centimeters, 0 = invalid  (virtual only)
        sem_%06d.png                   8-bit class-id index image                  (virtual only)

Images are float32 in [0, 1], depth maps float32 meters.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import Intrinsics

REAL = "real"
VIRTUAL = "virtual"

CLASS_IDS = {"sky": 0, "ground": 1, "building": 2, "object": 3}


@dataclass
class DepthMap:
    """Dense metric depth with an explicit validity mask."""

    values: np.ndarray
    valid: np.ndarray

    def __post_init__(self):
        if self.values.shape != self.valid.shape:
            raise ValueError("depth values %r and mask %r disagree"
                             % (self.values.shape, self.valid.shape))
        kept = self.values[self.valid]
        if kept.size and (not np.all(np.isfinite(kept)) or (kept <= 0).any()):
            raise ValueError("valid depth values must be finite and strictly positive")

    @classmethod
    def from_array(cls, values):
        values = np.asarray(values, dtype=np.float32)
        valid = np.isfinite(values) & (values > 0)
        return cls(np.where(valid, values, 0.0).astype(np.float32), valid)


@dataclass
class ClassMap:
    """Per-pixel integer class ids with an id -> name legend."""

    values: np.ndarray
    legend: dict

    def __post_init__(self):
        present = np.unique(self.values)
        missing = [int(i) for i in present if int(i) not in self.legend]
        if missing:
            raise ValueError("class ids %r missing from legend %r" % (missing, self.legend))


@dataclass
class ImageTriplet:
    """Three consecutive frames with intrinsics, domain tag, and optional GT."""

    frames: tuple
    intrinsics: Intrinsics
    domain: str
    gt_depth: DepthMap | None = None
    gt_semantics: ClassMap | None = None
    sequence: str = ""
    index: int = 0
    supervision_mask: np.ndarray | None = None

    def __post_init__(self):
        if len(self.frames) != 3:
            raise ValueError("a triplet holds exactly 3 frames")
        shape = self.frames[0].shape
        if any(f.shape != shape for f in self.frames):
            raise ValueError("triplet frames must share one shape")
        if self.domain == VIRTUAL:
            if self.gt_depth is None or self.gt_semantics is None:
                raise ValueError("virtual samples must carry depth and semantic GT")
        elif self.domain == REAL:
            if self.gt_depth is not None or self.gt_semantics is not None:
                raise ValueError("real samples carry no GT")
        else:
            raise ValueError("domain must be %r or %r, got %r" % (REAL, VIRTUAL, self.domain))

    @property
    def center(self):
        return self.frames[1]


class TripletDataset:
    """In-memory sequence of ImageTriplet."""

    def __init__(self, triplets):
        self.triplets = list(triplets)

    def __len__(self):
        return len(self.triplets)

    def __getitem__(self, i):
        return self.triplets[i]

    def __iter__(self):
        return iter(self.triplets)


# ---------------------------------------------------------------------------
# on-disk IO


def save_image(path, image):
    """8-bit RGB PNG from a float [0, 1] HxWx3 array."""
    arr = np.clip(np.round(np.asarray(image) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path)


def load_image(path):
    return np.asarray(Image.open(path).convert("RGB"), dtype=np.float32) / 255.0


def save_depth(path, values, valid):
    """16-bit grayscale PNG, value = centimeters, 0 = invalid."""
    cm = np.round(np.asarray(values, dtype=np.float64) * 100.0)
    cm = np.where(valid, np.clip(cm, 1, 65535), 0).astype(np.uint16)
    Image.fromarray(cm).save(path)


def load_depth(path, d_max):
    raw = np.asarray(Image.open(path), dtype=np.uint16)
    values = raw.astype(np.float32) / 100.0
    valid = raw > 0
    values = np.where(valid, np.minimum(values, np.float32(d_max)), 0.0).astype(np.float32)
    return DepthMap(values, valid)


def save_semantics(path, values):
    Image.fromarray(np.asarray(values, dtype=np.uint8), mode="L").save(path)


def load_semantics(path, legend):
    values = np.asarray(Image.open(path), dtype=np.int64)
    return ClassMap(values, legend)


def save_class_legend(root, name_to_id):
    Path(root, "classes.txt").write_text(json.dumps(name_to_id, indent=0, sort_keys=True) + "\n")


def load_class_legend(root):
    """Read the dataset-level class file; returns id -> name."""
    path = Path(root, "classes.txt")
    if not path.exists():
        raise FileNotFoundError("dataset class file not found: %s" % path)
    name_to_id = json.loads(path.read_text())
    return {int(v): k for k, v in name_to_id.items()}


def _resize_image(image, width, height):
    if image.shape[1] == width and image.shape[0] == height:
        return image
    arr = np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)
    out = Image.fromarray(arr, mode="RGB").resize((width, height), Image.LANCZOS)
    return np.asarray(out, dtype=np.float32) / 255.0


def _resize_nearest(arr, width, height):
    if arr.shape[1] == width and arr.shape[0] == height:
        return arr
    idx_y = (np.arange(height) + 0.5) * arr.shape[0] / height
    idx_x = (np.arange(width) + 0.5) * arr.shape[1] / width
    return arr[idx_y.astype(np.int64)[:, None], idx_x.astype(np.int64)[None, :]]


_FRAME_RE = re.compile(r"rgb_(\d{6})\.png$")


def load_sequence(root, domain, width=None, height=None, d_max=80.0):
    """Load every sequence of one domain into triplets of consecutive frames.

    Frames are resampled to (width, height) with LANCZOS when requested, GT
    maps with nearest neighbor, and the intrinsics rescaled proportionally.
    Triplets exist only for interior frames, so a sequence of N frames yields
    max(0, N - 2) samples.
    """
    root = Path(root)
    domain_dir = root / domain
    if not domain_dir.is_dir():
        raise FileNotFoundError("domain directory not found: %s" % domain_dir)
    legend = load_class_legend(root) if domain == VIRTUAL else None

    triplets = []
    for seq_dir in sorted(p for p in domain_dir.iterdir() if p.is_dir()):
        frame_files = sorted(seq_dir.glob("rgb_*.png"))
        indices = []
        for f in frame_files:
            m = _FRAME_RE.search(f.name)
            if not m:
                raise ValueError("unexpected frame filename %s" % f)
            indices.append(int(m.group(1)))
        if indices and indices != list(range(indices[0], indices[0] + len(indices))):
            raise ValueError("non-consecutive frame numbering in %s" % seq_dir)

        native = Image.open(frame_files[0]).size if frame_files else (0, 0)
        out_w = width or native[0]
        out_h = height or native[1]
        intr = Intrinsics.from_file(seq_dir / "intrinsics.txt", native[0], native[1])
        intr = intr.scaled(out_w, out_h)

        frames, depths, sems = [], [], []
        for f, idx in zip(frame_files, indices):
            frames.append(_resize_image(load_image(f), out_w, out_h))
            if domain == VIRTUAL:
                depth_path = seq_dir / ("depth_%06d.png" % idx)
                sem_path = seq_dir / ("sem_%06d.png" % idx)
                if not depth_path.exists() or not sem_path.exists():
                    raise FileNotFoundError("virtual frame %d in %s is missing depth or semantic GT"
                                            % (idx, seq_dir))
                dm = load_depth(depth_path, d_max)
                depths.append(DepthMap(_resize_nearest(dm.values, out_w, out_h),
                                       _resize_nearest(dm.valid, out_w, out_h)))
                sems.append(ClassMap(_resize_nearest(load_semantics(sem_path, legend).values,
                                                     out_w, out_h), legend))

        for t in range(1, len(frames) - 1):
            triplets.append(ImageTriplet(
                frames=(frames[t - 1], frames[t], frames[t + 1]),
                intrinsics=intr,
                domain=domain,
                gt_depth=depths[t] if domain == VIRTUAL else None,
                gt_semantics=sems[t] if domain == VIRTUAL else None,
                sequence=seq_dir.name,
                index=t,
            ))
    return TripletDataset(triplets)


# ---------------------------------------------------------------------------
# procedural toy world


@dataclass
class SceneSpec:
    """Knobs of the procedural street-corridor generator."""

    scenes: int = 2
    frames: int = 8
    width: int = 128
    height: int = 96
    speed_range: tuple = (0.12, 0.2)   # forward meters per frame
    sway_amp: float = 0.15             # lateral oscillation (meters)
    yaw_amp: float = 0.008             # heading oscillation (radians)
    far_plane: float = 300.0
    d_max: float = 80.0

    def intrinsics(self):
        fx = 0.5 * self.width / np.tan(np.deg2rad(65.0) / 2)
        return Intrinsics(fx, fx, (self.width - 1) / 2, (self.height - 1) / 2,
                          self.width, self.height)


@dataclass
class Box:
    """Axis-aligned box with a class and a texture phase."""

    lo: np.ndarray
    hi: np.ndarray
    class_id: int
    phase: float = 0.0


@dataclass
class Scene:
    """World content: a ground plane (y = 0, y points down) plus boxes."""

    boxes: list
    ground: bool = True
    ground_phase: float = 0.0
    texture_scale: float = 1.0   # multiplies texture spatial frequency


# per-class base colors; the real-world style shifts them and applies a
# photometric transform to create a measurable appearance gap
_PALETTES = {
    VIRTUAL: {
        CLASS_IDS["ground"]: (0.36, 0.37, 0.40),
        CLASS_IDS["building"]: (0.52, 0.44, 0.38),
        CLASS_IDS["object"]: (0.30, 0.52, 0.60),
    },
    REAL: {
        CLASS_IDS["ground"]: (0.40, 0.38, 0.35),
        CLASS_IDS["building"]: (0.46, 0.48, 0.50),
        CLASS_IDS["object"]: (0.55, 0.42, 0.33),
    },
}

# flat per-domain sky: view-independent, so exact-depth warps stay consistent
_SKY = {
    VIRTUAL: (0.62, 0.71, 0.88),
    REAL: (0.70, 0.73, 0.78),
}


def _texture(points, class_id, phase, domain, scale=1.0):
    """Smooth Lambertian per-class texture of world position."""
    x, y, z = points[:, 0] * scale, points[:, 1] * scale, points[:, 2] * scale
    base = np.asarray(_PALETTES[domain][class_id], dtype=np.float64)
    if class_id == CLASS_IDS["ground"]:
        pattern = 0.5 * np.sin(0.9 * x + phase) * np.sin(0.6 * z + 0.7 * phase) \
            + 0.5 * np.sin(0.35 * z + 2.1 * phase)
    elif class_id == CLASS_IDS["building"]:
        pattern = 0.6 * np.sin(1.2 * z + phase) * np.sin(1.5 * y + 0.3) \
            + 0.4 * np.sin(0.5 * z + 1.3 * phase)
    else:
        pattern = 0.6 * np.sin(2.0 * x + phase) * np.sin(1.6 * y + 0.5 * phase) \
            + 0.4 * np.sin(1.1 * z + phase)
    amp = np.array([0.14, 0.12, 0.10])
    color = base[None, :] + pattern[:, None] * amp[None, :]
    return color


def _style(color, domain):
    if domain == REAL:
        color = np.clip(color, 0.0, 1.0) ** 0.8
        color = color * np.array([1.08, 1.00, 0.88])
    return np.clip(color, 0.0, 1.0)


def _sky_color(dirs, domain):
    return np.broadcast_to(np.asarray(_SKY[domain]), (dirs.shape[0], 3)).copy()


def _intersect_box(origin, dirs, box):
    inv = 1.0 / np.where(np.abs(dirs) < 1e-12, 1e-12, dirs)
    t1 = (box.lo[None, :] - origin[None, :]) * inv
    t2 = (box.hi[None, :] - origin[None, :]) * inv
    tmin = np.minimum(t1, t2).max(axis=1)
    tmax = np.maximum(t1, t2).min(axis=1)
    hit = (tmax >= tmin) & (tmax > 0) & (tmin > 0)
    return np.where(hit, tmin, np.inf)


def _cast(scene, origin, dirs, domain, far_plane, shade=True):
    """Shared ray-cast core; returns (color Nx3 or None, z-depth N, class N)."""
    hits = []
    meta = []  # (class_id, phase)
    if scene.ground:
        dy = dirs[:, 1]
        t = np.where(dy > 1e-9, (0.0 - origin[1]) / np.where(np.abs(dy) < 1e-12, 1e-12, dy), np.inf)
        hits.append(np.where(t > 0, t, np.inf))
        meta.append((CLASS_IDS["ground"], scene.ground_phase))
    for box in scene.boxes:
        hits.append(_intersect_box(origin, dirs, box))
        meta.append((box.class_id, box.phase))

    all_t = np.stack(hits, axis=0) if hits else np.full((1, dirs.shape[0]), np.inf)
    winner = np.argmin(all_t, axis=0)
    t_best = all_t[winner, np.arange(dirs.shape[0])]
    sky = ~np.isfinite(t_best) | (t_best > far_plane)

    color = None
    if shade:
        color = _sky_color(dirs, domain)
        for i, (class_id, phase) in enumerate(meta):
            sel = (winner == i) & ~sky
            if not sel.any():
                continue
            pts = origin[None, :] + t_best[sel, None] * dirs[sel]
            color[sel] = _texture(pts, class_id, phase, domain, scale=scene.texture_scale)
        color = _style(color, domain)

    class_lut = np.array([m[0] for m in meta], dtype=np.int64)
    classes = np.where(sky, CLASS_IDS["sky"], class_lut[winner])
    depth = np.where(sky, 0.0, t_best)
    return color, depth, classes


def _ray_grid(intrinsics, cam_to_world):
    h, w = intrinsics.height, intrinsics.width
    v, u = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64), indexing="ij")
    dirs_cam = np.stack([
        (u - intrinsics.cx) / intrinsics.fx,
        (v - intrinsics.cy) / intrinsics.fy,
        np.ones_like(u),
    ], axis=-1).reshape(-1, 3)
    # z-component of dirs_cam is 1, so the ray parameter equals z-depth
    return dirs_cam @ cam_to_world[:3, :3].T


def render_frame(scene, cam_to_world, intrinsics, domain, far_plane=300.0, supersample=2):
    """Ray-cast one frame; returns (image HxWx3 float, z-depth HxW, class HxW).

    Depth is distance along the camera's optical axis (not ray length), so a
    fronto-parallel surface has constant depth; depth and class are
    point-sampled at pixel centers. Color is rendered `supersample` times
    finer and box-averaged (anti-aliasing). Sky pixels carry depth 0 and the
    sky class.
    """
    h, w = intrinsics.height, intrinsics.width
    origin = cam_to_world[:3, 3]

    dirs = _ray_grid(intrinsics, cam_to_world)
    color, depth, classes = _cast(scene, origin, dirs, domain, far_plane,
                                  shade=supersample <= 1)
    if supersample > 1:
        s = supersample
        fine = Intrinsics(intrinsics.fx * s, intrinsics.fy * s,
                          s * intrinsics.cx + (s - 1) / 2, s * intrinsics.cy + (s - 1) / 2,
                          w * s, h * s)
        fine_dirs = _ray_grid(fine, cam_to_world)
        color, _, _ = _cast(scene, origin, fine_dirs, domain, far_plane)
        color = color.reshape(h, s, w, s, 3).mean(axis=(1, 3))

    return color.reshape(h, w, 3), depth.reshape(h, w), classes.reshape(h, w)


def _yaw_matrix(angle):
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def make_scene(rng):
    """Random street: ground, segmented building rows, scattered object boxes.

    Buildings are discrete blocks (their camera-facing faces stay near
    fronto-parallel), which keeps world-space textures band-limited on screen.
    """
    boxes = []
    for side in (-1.0, 1.0):
        z = rng.uniform(4.0, 8.0)
        while z < 110.0:
            length = rng.uniform(8.0, 15.0)
            wall_x = side * rng.uniform(4.0, 6.0)
            height = rng.uniform(3.0, 6.0)
            lo = np.array([min(wall_x, wall_x + side * 2.0), -height, z])
            hi = np.array([max(wall_x, wall_x + side * 2.0), 0.0, z + length])
            boxes.append(Box(lo, hi, CLASS_IDS["building"], phase=rng.uniform(0, 6.28)))
            z += length + rng.uniform(2.0, 6.0)
    for _ in range(rng.integers(6, 11)):
        cx = rng.choice([-1.0, 1.0]) * rng.uniform(1.5, 3.0)
        cz = rng.uniform(6.0, 55.0)
        sx = rng.uniform(0.3, 0.9)
        sy = rng.uniform(0.8, 2.2)
        sz = rng.uniform(0.3, 0.9)
        lo = np.array([cx - sx, -sy, cz - sz])
        hi = np.array([cx + sx, 0.0, cz + sz])
        boxes.append(Box(lo, hi, CLASS_IDS["object"], phase=rng.uniform(0, 6.28)))
    return Scene(boxes=boxes, ground_phase=rng.uniform(0, 6.28))


def make_wall_scene(distance, texture_scale=3.0, phase=1.1):
    """Single fronto-parallel textured wall filling the view at z = distance."""
    wall = Box(np.array([-30.0, -8.0, distance]), np.array([30.0, 3.0, distance + 1.0]),
               CLASS_IDS["object"], phase=phase)
    return Scene(boxes=[wall], ground=False, texture_scale=texture_scale)


def lateral_camera_path(frames, step):
    """Camera translating sideways by `step` meters per frame, no rotation."""
    mats = []
    for t in range(frames):
        m = np.eye(4)
        m[:3, 3] = [step * t, -1.5, 0.0]
        mats.append(m)
    return np.stack(mats)


def camera_path(spec, rng):
    """Camera-to-world matrices of one drive-through (y down, looking +z)."""
    speed = rng.uniform(*spec.speed_range)
    phase = rng.uniform(0, 6.28)
    yaw_phase = rng.uniform(0, 6.28)
    mats = []
    for t in range(spec.frames):
        x = spec.sway_amp * np.sin(2 * np.pi * t / max(spec.frames, 2) + phase)
        pos = np.array([x, -1.5, speed * t])
        yaw = spec.yaw_amp * np.sin(2 * np.pi * t / max(spec.frames / 2, 2) + yaw_phase)
        mat = np.eye(4)
        mat[:3, :3] = _yaw_matrix(yaw)
        mat[:3, 3] = pos
        mats.append(mat)
    return np.stack(mats)


def _quantize_image(image):
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8).astype(np.float32) / 255.0


def _quantize_depth(depth, d_max):
    cm = np.round(depth * 100.0)
    cm = np.where(depth > 0, np.clip(cm, 1, 65535), 0)
    values = (cm / 100.0).astype(np.float32)
    valid = cm > 0
    return DepthMap(np.where(valid, np.minimum(values, np.float32(d_max)), 0.0).astype(np.float32),
                    valid)


@dataclass
class ToyWorld:
    """Paired real-style and virtual-style datasets plus exact camera motion."""

    real: TripletDataset
    virtual: TripletDataset
    cam_to_world: dict
    spec: SceneSpec
    legend: dict = field(default_factory=lambda: {v: k for k, v in CLASS_IDS.items()})

    def gt_relative_pose(self, sequence, t_from, t_to):
        """4x4 transform taking camera coordinates at t_from to those at t_to."""
        mats = self.cam_to_world[sequence]
        return np.linalg.inv(mats[t_to]) @ mats[t_from]


def generate_toy_world(spec, rng, out_dir=None):
    """Render paired datasets and optionally write the canonical layout.

    Both styles share geometry and camera paths per scene; only appearance
    differs. Depth/semantic GT is attached (and written) for the virtual style
    only. Returned pixel values are already 8-bit quantized, so the in-memory
    datasets match what a round trip through disk produces.
    """
    intr = spec.intrinsics()
    legend = {v: k for k, v in CLASS_IDS.items()}
    out_dir = Path(out_dir) if out_dir is not None else None
    if out_dir is not None:
        for domain in (REAL, VIRTUAL):
            (out_dir / domain).mkdir(parents=True, exist_ok=True)
        save_class_legend(out_dir, dict(CLASS_IDS))

    real_triplets, virtual_triplets = [], []
    cam_paths = {}
    for s in range(spec.scenes):
        scene = make_scene(rng)
        path = camera_path(spec, rng)
        seq = "seq_%04d" % s
        cam_paths[seq] = path

        renders = {REAL: [], VIRTUAL: []}
        depths, sems = [], []
        for t in range(spec.frames):
            image_v, depth, classes = render_frame(scene, path[t], intr, VIRTUAL, spec.far_plane)
            image_r, _, _ = render_frame(scene, path[t], intr, REAL, spec.far_plane)
            renders[VIRTUAL].append(_quantize_image(image_v))
            renders[REAL].append(_quantize_image(image_r))
            depths.append(_quantize_depth(depth, spec.d_max))
            sems.append(ClassMap(classes, legend))

        if out_dir is not None:
            for domain in (REAL, VIRTUAL):
                seq_dir = out_dir / domain / seq
                seq_dir.mkdir(parents=True, exist_ok=True)
                intr.save(seq_dir / "intrinsics.txt")
                for t in range(spec.frames):
                    save_image(seq_dir / ("rgb_%06d.png" % t), renders[domain][t])
                    if domain == VIRTUAL:
                        raw_depth = depths[t]
                        save_depth(seq_dir / ("depth_%06d.png" % t), raw_depth.values, raw_depth.valid)
                        save_semantics(seq_dir / ("sem_%06d.png" % t), sems[t].values)

        for t in range(1, spec.frames - 1):
            virtual_triplets.append(ImageTriplet(
                frames=tuple(renders[VIRTUAL][t + d] for d in (-1, 0, 1)),
                intrinsics=intr, domain=VIRTUAL,
                gt_depth=depths[t], gt_semantics=sems[t],
                sequence=seq, index=t,
            ))
            real_triplets.append(ImageTriplet(
                frames=tuple(renders[REAL][t + d] for d in (-1, 0, 1)),
                intrinsics=intr, domain=REAL,
                sequence=seq, index=t,
            ))

    return ToyWorld(TripletDataset(real_triplets), TripletDataset(virtual_triplets),
                    cam_paths, spec)
