"""Training loop: mixed mini-batches, per-group gradient composition with the
adaptive supervised/self-supervised equalizer, and the DA trade-off.

One control thread owns weights and optimizer state; with a fixed seed, runs
are bit-reproducible on CPU.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torchvision.transforms.functional as TF

from .config import RunConfig, TrainConfig, config_from_dict, config_to_dict  # noqa: F401 (re-export)
from .losses import LossBundle, build_supervision_mask, da_loss, self_supervised_loss, supervised_loss
from .networks import DepthNetwork, DomainClassifier, PoseNetwork, SmallEncoder, disp_to_depth

BETA_SF_MIN = 1e-3
BETA_SF_MAX = 1e3
SF_LOSS_FLOOR = 1e-8


def compute_beta_sf(l_sp, l_sf):
    """Adaptive equalizer: supervised / self-supervised loss ratio, clamped."""
    return float(min(max(l_sp / max(l_sf, SF_LOSS_FLOOR), BETA_SF_MIN), BETA_SF_MAX))


class Models:
    """The three trainable components and their named weight groups."""

    def __init__(self, depth, pose, domain):
        self.depth = depth
        self.pose = pose
        self.domain = domain

    def modules(self):
        return (self.depth, self.pose, self.domain)

    def groups(self):
        """name -> list of (param_name, param), one entry per weight group."""
        enc = list(self.depth.encoder.named_parameters(prefix="encoder"))
        pyde = (list(self.depth.pyramid.named_parameters(prefix="pyramid"))
                + list(self.depth.decoder.named_parameters(prefix="decoder")))
        sf = list(self.pose.named_parameters(prefix="pose"))
        da = list(self.domain.named_parameters(prefix="domain"))
        return {"enc": enc, "pyde": pyde, "sf": sf, "da": da}

    def all_parameters(self):
        params = []
        for group in self.groups().values():
            params.extend(p for _, p in group)
        return params

    def train(self):
        for m in self.modules():
            m.train()

    def eval(self):
        for m in self.modules():
            m.eval()

    def zero_grad(self):
        for m in self.modules():
            m.zero_grad(set_to_none=True)


def build_models(cfg):
    """Construct the depth, pose, and domain networks for a config."""
    def encoder_for(in_channels):
        if cfg.backbone == "small" and cfg.encoder_widths is not None:
            return SmallEncoder(widths=tuple(cfg.encoder_widths), in_channels=in_channels)
        return cfg.backbone

    kwargs = {}
    if cfg.decoder_widths is not None:
        kwargs["decoder_widths"] = tuple(cfg.decoder_widths)
    depth = DepthNetwork(backbone=encoder_for(3), pyramid_channels=cfg.pyramid_channels, **kwargs)
    pose = PoseNetwork(backbone=encoder_for(6))
    domain = DomainClassifier(depth.encoder.num_ch_enc[-1], reversal_scale=cfg.reversal_scale)
    return Models(depth, pose, domain)


@dataclass
class GradientSet:
    """Per-weight-group gradients of one composed step (param name -> tensor)."""

    enc: dict
    pyde: dict
    sf: dict
    da: dict

    def flat(self, group):
        grads = getattr(self, group)
        return torch.cat([grads[k].reshape(-1) for k in sorted(grads)])

    def check_finite(self):
        for group in ("enc", "pyde", "sf", "da"):
            for name, g in getattr(self, group).items():
                if not torch.isfinite(g).all():
                    raise RuntimeError("non-finite gradient in %s/%s" % (group, name))


@dataclass
class StepResult:
    grads: GradientSet
    losses: LossBundle
    beta_sf: float
    da_accuracy: float


@dataclass
class Batch:
    """One mixed mini-batch, already augmented and tensorized."""

    real_prev: torch.Tensor
    real_center: torch.Tensor
    real_next: torch.Tensor
    real_k: torch.Tensor          # (B, 4) fx fy cx cy per sample
    virt_image: torch.Tensor
    virt_depth: torch.Tensor      # (B, 1, H, W) GT meters, 0 where invalid
    virt_weight: torch.Tensor     # (B, 1, H, W) supervision weights


class MixedBatchSampler:
    """Uniform sampling without replacement within an epoch, per domain."""

    def __init__(self, real, virtual, cfg, rng):
        self.real = real
        self.virtual = virtual
        self.cfg = cfg
        self.rng = rng
        if len(real) < cfg.n_real or len(virtual) < cfg.n_virtual:
            raise ValueError("dataset smaller than one batch: %d real / %d virtual for %d + %d"
                             % (len(real), len(virtual), cfg.n_real, cfg.n_virtual))
        self._queues = {"real": [], "virtual": []}

    def _draw(self, domain, dataset, count):
        queue = self._queues[domain]
        while len(queue) < count:
            queue.extend(self.rng.permutation(len(dataset)).tolist())
        picked, self._queues[domain] = queue[:count], queue[count:]
        return [dataset[i] for i in picked]

    def sample_batch(self):
        real = self._draw("real", self.real, self.cfg.n_real)
        virtual = self._draw("virtual", self.virtual, self.cfg.n_virtual)
        return real, virtual


def _to_chw(frame):
    return torch.from_numpy(np.ascontiguousarray(frame)).permute(2, 0, 1)


def _draw_jitter(cfg, rng):
    if rng.random() >= cfg.jitter_prob:
        return None
    return {
        "brightness": 1.0 + rng.uniform(-cfg.brightness, cfg.brightness),
        "contrast": 1.0 + rng.uniform(-cfg.contrast, cfg.contrast),
        "saturation": 1.0 + rng.uniform(-cfg.saturation, cfg.saturation),
        "hue": rng.uniform(-cfg.hue, cfg.hue),
    }


def _apply_jitter(img, params):
    img = TF.adjust_brightness(img, params["brightness"])
    img = TF.adjust_contrast(img, params["contrast"])
    img = TF.adjust_saturation(img, params["saturation"])
    img = TF.adjust_hue(img, params["hue"])
    return img


def make_batch(real_samples, virtual_samples, cfg, rng, augment=True):
    """Tensorize triplets, applying one flip/jitter draw per sample to every
    frame of that sample (GT maps flip along; jitter never touches them)."""
    r_prev, r_center, r_next, r_k = [], [], [], []
    for trip in real_samples:
        flip = augment and rng.random() < cfg.flip_prob
        jitter = _draw_jitter(cfg, rng) if augment else None
        frames = [_to_chw(f) for f in trip.frames]
        if flip:
            frames = [torch.flip(f, dims=[-1]) for f in frames]
        if jitter is not None:
            frames = [_apply_jitter(f, jitter) for f in frames]
        k = trip.intrinsics
        cx = (k.width - 1) - k.cx if flip else k.cx
        r_prev.append(frames[0])
        r_center.append(frames[1])
        r_next.append(frames[2])
        r_k.append(torch.tensor([k.fx, k.fy, cx, k.cy], dtype=frames[1].dtype))

    v_img, v_depth, v_weight = [], [], []
    for trip in virtual_samples:
        flip = augment and rng.random() < cfg.flip_prob
        jitter = _draw_jitter(cfg, rng) if augment else None
        frame = _to_chw(trip.center)
        depth = torch.from_numpy(trip.gt_depth.values).unsqueeze(0)
        if trip.supervision_mask is None:
            raise ValueError("virtual sample lacks a precomputed supervision mask")
        weight = torch.from_numpy(trip.supervision_mask).unsqueeze(0)
        if flip:
            frame = torch.flip(frame, dims=[-1])
            depth = torch.flip(depth, dims=[-1])
            weight = torch.flip(weight, dims=[-1])
        if jitter is not None:
            frame = _apply_jitter(frame, jitter)
        v_img.append(frame)
        v_depth.append(depth)
        v_weight.append(weight)

    if not real_samples and not virtual_samples:
        raise ValueError("batch needs at least one sample")
    shape = (real_samples[0] if real_samples else virtual_samples[0]).frames[0].shape

    def stack(tensors, channels):
        if tensors:
            return torch.stack(tensors)
        return torch.empty(0, channels, shape[0], shape[1])

    return Batch(
        real_prev=stack(r_prev, 3), real_center=stack(r_center, 3),
        real_next=stack(r_next, 3),
        real_k=torch.stack(r_k) if r_k else torch.empty(0, 4),
        virt_image=stack(v_img, 3), virt_depth=stack(v_depth, 1),
        virt_weight=stack(v_weight, 1),
    )


def _domain_logits(models, features, cfg):
    if cfg.grl_enabled:
        return models.domain(features, reversal_scale=cfg.reversal_scale)
    # control mode: the classifier trains as a probe on frozen features
    return models.domain(features.detach(), reversal_scale=0.0)


def _collect(group):
    return {name: (p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p))
            for name, p in group}


def compute_gradients(batch, models, cfg):
    """One composed gradient evaluation over a mixed mini-batch.

    Two backward passes (virtual, then real) populate per-group gradients;
    the final vectors combine them with the adaptive equalizer applied to the
    self-supervised contribution of the shared depth weights. The DA loss
    reaches the encoder only through the reversal boundary and the classifier
    directly, never the pyramid/decoder; the supervised pass never touches the
    pose weights (asserted).
    """
    groups = models.groups()
    models.train()
    models.zero_grad()

    # supervision + DA over the virtual half
    disps_v, feats_v = models.depth(batch.virt_image)
    pred_depth = disp_to_depth(disps_v[0], cfg.d_min, cfg.d_max_model)
    l_sp = supervised_loss(pred_depth, batch.virt_depth, batch.virt_weight)
    logits_v = _domain_logits(models, feats_v[-1], cfg)
    _, bce_v = da_loss(logits_virtual=logits_v)
    l_da_s = cfg.beta_da * bce_v
    if not torch.isfinite(l_sp) or not torch.isfinite(l_da_s):
        raise RuntimeError("non-finite loss in the virtual pass: l_sp=%r l_da_s=%r"
                           % (l_sp.item(), l_da_s.item()))
    (l_sp + l_da_s).backward()
    if any(p.grad is not None for _, p in groups["sf"]):
        raise AssertionError("supervised pass leaked gradients into the pose network")
    g_s = {name: _collect(groups[name]) for name in ("enc", "pyde", "da")}
    models.zero_grad()

    # self-supervision + DA over the real half
    disps_r, feats_r = models.depth(batch.real_center)
    n_real = batch.real_center.shape[0]
    poses = models.pose(torch.cat([batch.real_center, batch.real_center]),
                        torch.cat([batch.real_prev, batch.real_next]))
    pose_prev, pose_next = poses[:n_real], poses[n_real:]
    l_sf = self_supervised_loss(
        (batch.real_prev, batch.real_center, batch.real_next),
        disps_r, pose_prev, pose_next, batch.real_k,
        smooth_weight=cfg.smooth_weight, d_min=cfg.d_min, d_max_model=cfg.d_max_model)
    logits_r = _domain_logits(models, feats_r[-1], cfg)
    bce_r, _ = da_loss(logits_real=logits_r)
    l_da_r = cfg.beta_da * bce_r
    if not torch.isfinite(l_sf) or not torch.isfinite(l_da_r):
        raise RuntimeError("non-finite loss in the real pass: l_sf=%r l_da_r=%r"
                           % (l_sf.item(), l_da_r.item()))
    (l_sf + l_da_r).backward()
    g_r = {name: _collect(groups[name]) for name in ("enc", "pyde", "sf", "da")}
    models.zero_grad()

    beta_sf = compute_beta_sf(l_sp.item(), l_sf.item())
    grads = GradientSet(
        enc={k: g_s["enc"][k] + beta_sf * g_r["enc"][k] for k in g_s["enc"]},
        pyde={k: g_s["pyde"][k] + beta_sf * g_r["pyde"][k] for k in g_s["pyde"]},
        sf=g_r["sf"],
        da={k: g_s["da"][k] + g_r["da"][k] for k in g_s["da"]},
    )
    grads.check_finite()

    bundle = LossBundle(l_sp.item(), l_sf.item(), l_da_r.item(), l_da_s.item())
    bundle.check_finite()
    with torch.no_grad():
        hits = (torch.sigmoid(logits_r) > 0.5).sum() + (torch.sigmoid(logits_v) <= 0.5).sum()
        da_accuracy = hits.item() / (logits_r.numel() + logits_v.numel())
    return StepResult(grads, bundle, beta_sf, da_accuracy)


def attach_supervision_masks(dataset, class_weights, d_max):
    """Precompute the per-sample supervision weights once, before training."""
    for trip in dataset:
        if trip.supervision_mask is None:
            trip.supervision_mask = build_supervision_mask(
                trip.gt_depth.values, trip.gt_semantics, d_max, class_weights)


class Trainer:
    """Owns the models, optimizer, sampler, and the append-only step log."""

    def __init__(self, real, virtual, cfg, output_dir=None, psi=None):
        self.cfg = cfg
        self.psi = psi
        torch.manual_seed(cfg.seed)
        self.rng = np.random.default_rng(cfg.seed)
        self.models = build_models(cfg)
        self.optimizer = torch.optim.Adam(self.models.all_parameters(), lr=cfg.lr)
        attach_supervision_masks(virtual, cfg.class_weights, cfg.d_max)
        self.sampler = MixedBatchSampler(real, virtual, cfg, self.rng)
        self.step_index = 0
        self.history = []
        self.output_dir = Path(output_dir) if output_dir is not None else None
        if self.output_dir is not None:
            self.output_dir.mkdir(parents=True, exist_ok=True)

    @property
    def log_path(self):
        return None if self.output_dir is None else self.output_dir / "train_log.jsonl"

    def _log(self, record):
        self.history.append(record)
        if self.log_path is not None:
            with open(self.log_path, "a") as fh:
                fh.write(json.dumps(record) + "\n")

    def step(self):
        real_samples, virtual_samples = self.sampler.sample_batch()
        batch = make_batch(real_samples, virtual_samples, self.cfg, self.rng)
        result = compute_gradients(batch, self.models, self.cfg)
        self._apply(result.grads)
        self.step_index += 1
        self._log({
            "step": self.step_index,
            "l_sp": result.losses.l_sp,
            "l_sf": result.losses.l_sf,
            "l_da_r": result.losses.l_da_real,
            "l_da_s": result.losses.l_da_virtual,
            "beta_sf": result.beta_sf,
            "da_accuracy": result.da_accuracy,
        })
        return result

    def _apply(self, grads):
        groups = self.models.groups()
        for group_name in ("enc", "pyde", "sf", "da"):
            tensors = getattr(grads, group_name)
            for name, param in groups[group_name]:
                param.grad = tensors[name]
        self.optimizer.step()
        self.models.zero_grad()

    def run(self, steps=None):
        target = self.cfg.steps if steps is None else steps
        while self.step_index < target:
            self.step()
            if self.output_dir is not None and self.cfg.checkpoint_every > 0 \
                    and self.step_index % self.cfg.checkpoint_every == 0:
                self.save_checkpoint(self.output_dir / "checkpoint.pt")
        if self.output_dir is not None:
            return self.save_checkpoint(self.output_dir / "checkpoint.pt")
        return None

    def save_checkpoint(self, path):
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        torch.save({
            "step": self.step_index,
            "config": config_to_dict(self.cfg),
            "psi": self.psi,
            "model": {
                "encoder": self.models.depth.encoder.state_dict(),
                "pyramid": self.models.depth.pyramid.state_dict(),
                "decoder": self.models.depth.decoder.state_dict(),
                "pose": self.models.pose.state_dict(),
                "domain": self.models.domain.state_dict(),
            },
            "optimizer": self.optimizer.state_dict(),
            "torch_rng": torch.get_rng_state(),
            "numpy_rng": self.rng.bit_generator.state,
        }, path)
        return path

    @classmethod
    def from_checkpoint(cls, path, real, virtual, output_dir=None):
        ckpt = load_checkpoint(path)
        cfg = config_from_dict(ckpt["config"])
        trainer = cls(real, virtual, cfg, output_dir=output_dir, psi=ckpt.get("psi"))
        _load_model_state(trainer.models, ckpt["model"])
        trainer.optimizer.load_state_dict(ckpt["optimizer"])
        trainer.step_index = ckpt["step"]
        torch.set_rng_state(ckpt["torch_rng"])
        trainer.rng.bit_generator.state = ckpt["numpy_rng"]
        return trainer


def _load_model_state(models, state):
    models.depth.encoder.load_state_dict(state["encoder"])
    models.depth.pyramid.load_state_dict(state["pyramid"])
    models.depth.decoder.load_state_dict(state["decoder"])
    models.pose.load_state_dict(state["pose"])
    models.domain.load_state_dict(state["domain"])


def load_checkpoint(path):
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError("checkpoint not found: %s" % path)
    return torch.load(path, map_location="cpu", weights_only=False)


def make_predictor(models, cfg):
    """Eval-mode image -> depth callable over the current weights."""

    def predict(image):
        was_training = models.depth.training
        models.depth.eval()
        x = _to_chw(np.asarray(image, dtype=np.float32)).unsqueeze(0)
        with torch.no_grad():
            disps, _ = models.depth(x)
            depth = disp_to_depth(disps[0], cfg.d_min, cfg.d_max_model)
        if was_training:
            models.depth.train()
        return depth[0, 0].numpy()

    return predict


def domain_classifier_accuracy(models, real_dataset, virtual_dataset):
    """Held-out accuracy of the domain classifier (real = 1, virtual = 0)."""
    models.eval()
    hits = total = 0
    with torch.no_grad():
        for dataset, is_real in ((real_dataset, True), (virtual_dataset, False)):
            for trip in dataset:
                x = _to_chw(np.asarray(trip.center, dtype=np.float32)).unsqueeze(0)
                _, feats = models.depth(x)
                logit = models.domain(feats[-1])
                pred_real = torch.sigmoid(logit).item() > 0.5
                hits += int(pred_real == is_real)
                total += 1
    models.train()
    return hits / total


def load_depth_model(path):
    """Rebuild the depth network from a checkpoint.

    Returns (predict_fn, config, psi) where predict_fn maps an HxWx3 float
    image in [0, 1] to an HxW depth map in meters.
    """
    ckpt = load_checkpoint(path)
    cfg = config_from_dict(ckpt["config"])
    models = build_models(cfg)
    _load_model_state(models, ckpt["model"])
    models.eval()

    def predict(image):
        x = _to_chw(np.asarray(image, dtype=np.float32)).unsqueeze(0)
        with torch.no_grad():
            disps, _ = models.depth(x)
            depth = disp_to_depth(disps[0], cfg.d_min, cfg.d_max_model)
        return depth[0, 0].numpy()

    return predict, cfg, ckpt.get("psi")


def train(real, virtual, cfg, output_dir, resume=None):
    """Train per config; returns (checkpoint_path, history)."""
    if resume is not None:
        trainer = Trainer.from_checkpoint(resume, real, virtual, output_dir=output_dir)
    else:
        trainer = Trainer(real, virtual, cfg, output_dir=output_dir, psi=_read_psi(cfg))
    path = trainer.run()
    return path, trainer.history


def _read_psi(cfg):
    psi_file = getattr(cfg, "psi_file", None)
    if psi_file and Path(psi_file).exists():
        return float(Path(psi_file).read_text().strip())
    return None
