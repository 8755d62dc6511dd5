"""Monocular depth estimation trained jointly from simulator depth/semantic
supervision and real-video structure-from-motion self-supervision, with
gradient-reversal domain adaptation and global absolute-scale calibration.
"""

from .config import ConfigError, RunConfig, TrainConfig, load_config
from .data import ClassMap, DepthMap, ImageTriplet, SceneSpec, TripletDataset, generate_toy_world, load_sequence
from .evaluation import MetricsRecord, binned_metrics, compute_metrics, evaluate, masked_metrics
from .geometry import Intrinsics, PoseTransform, backproject, project, synthesize_view, warp
from .losses import LossBundle, auto_mask, build_supervision_mask, cpe, da_loss, pe, pe_min, \
    self_supervised_loss, smoothness, ssim, supervised_loss
from .networks import DepthNetwork, DomainClassifier, PoseNetwork, disp_to_depth, reverse_gradient
from .scalecal import ScaleFactor, apply_scale, calibrate_global_scale, per_image_scale
from .trainer import GradientSet, MixedBatchSampler, Trainer, compute_beta_sf, compute_gradients, train

__all__ = [name for name in dir() if not name.startswith("_")]
__version__ = "0.1.0"
