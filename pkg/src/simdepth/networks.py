"""Trainable components: depth network (encoder / pyramid / decoder), pose
network, and the domain classifier behind a gradient-reversal boundary.

Every encoder honors one contract: forward(x) returns five feature maps at
strides (2, 4, 8, 16, 32) whose channel counts it declares in `num_ch_enc`.
Swapping backbones therefore changes no downstream shape.
"""

from __future__ import annotations

import torch
import torch.nn as nn
import torch.nn.functional as F

from .geometry import pose_matrix

POSE_OUT_SCALE = 0.01


def disp_to_depth(disp, d_min, d_max_model):
    """Map sigmoid disparity in (0, 1) to metric depth in (d_min, d_max_model).

    depth = 1 / (1/d_max_model + (1/d_min - 1/d_max_model) * disp), so disp -> 0
    gives d_max_model and disp -> 1 gives d_min, monotonically decreasing.
    """
    if d_min >= d_max_model:
        raise ValueError("d_min=%r must be below d_max_model=%r" % (d_min, d_max_model))
    inv = 1.0 / d_max_model + (1.0 / d_min - 1.0 / d_max_model) * disp
    return 1.0 / inv


def _check_resolution(x):
    h, w = x.shape[-2:]
    if h % 32 or w % 32 or h < 64 or w < 64:
        raise ValueError("input resolution %dx%d must be divisible by 32 and at least 64"
                         % (w, h))


class SmallEncoder(nn.Module):
    """Five strided conv stages; the desk-scale default backbone."""

    def __init__(self, widths=(16, 32, 64, 128, 256), in_channels=3):
        super().__init__()
        if len(widths) != 5:
            raise ValueError("encoder contract requires 5 stages, got %d" % len(widths))
        self.num_ch_enc = tuple(widths)
        stages = []
        prev = in_channels
        for width in widths:
            stages.append(nn.Sequential(
                nn.Conv2d(prev, width, 3, stride=2, padding=1),
                nn.BatchNorm2d(width),
                nn.ReLU(inplace=True),
            ))
            prev = width
        self.stages = nn.ModuleList(stages)

    def forward(self, x):
        _check_resolution(x)
        features = []
        for stage in self.stages:
            x = stage(x)
            features.append(x)
        return features


class ResnetEncoder(nn.Module):
    """torchvision resnet wrapped behind the 5-scale feature contract."""

    def __init__(self, depth=18, in_channels=3):
        super().__init__()
        import torchvision.models as models

        factory = {18: models.resnet18, 34: models.resnet34, 50: models.resnet50}
        if depth not in factory:
            raise ValueError("unsupported resnet depth %r" % depth)
        net = factory[depth](weights=None)
        if in_channels != 3:
            net.conv1 = nn.Conv2d(in_channels, 64, 7, stride=2, padding=3, bias=False)
        self.net = net
        mult = 4 if depth == 50 else 1
        self.num_ch_enc = (64, 64 * mult, 128 * mult, 256 * mult, 512 * mult)

    def forward(self, x):
        _check_resolution(x)
        net = self.net
        features = []
        x = net.relu(net.bn1(net.conv1(x)))
        features.append(x)
        x = net.layer1(net.maxpool(x))
        features.append(x)
        for layer in (net.layer2, net.layer3, net.layer4):
            x = layer(x)
            features.append(x)
        return features


BACKBONES = {
    "small": lambda in_channels=3: SmallEncoder(in_channels=in_channels),
    "resnet18": lambda in_channels=3: ResnetEncoder(18, in_channels=in_channels),
    "resnet50": lambda in_channels=3: ResnetEncoder(50, in_channels=in_channels),
}


def make_encoder(backbone, in_channels=3):
    """Resolve a backbone name to an encoder; module instances pass through."""
    if isinstance(backbone, nn.Module):
        return backbone
    if backbone not in BACKBONES:
        raise ValueError("unknown backbone %r (have %s)" % (backbone, sorted(BACKBONES)))
    return BACKBONES[backbone](in_channels=in_channels)


class PyramidAdapter(nn.Module):
    """Five blocks adapting encoder features to the decoder's channel plan.

    Each block is exactly one convolution -> batch norm -> ReLU pipeline.
    """

    def __init__(self, in_channels, out_channels=None):
        super().__init__()
        if out_channels is None:
            out_channels = in_channels
        if len(in_channels) != 5 or len(out_channels) != 5:
            raise ValueError("pyramid adapter needs 5 input and 5 output widths")
        self.num_ch_out = tuple(out_channels)
        self.blocks = nn.ModuleList([
            nn.Sequential(
                nn.Conv2d(cin, cout, 3, padding=1),
                nn.BatchNorm2d(cout),
                nn.ReLU(inplace=True),
            )
            for cin, cout in zip(in_channels, out_channels)
        ])

    def forward(self, features):
        if len(features) != 5:
            raise ValueError("expected 5 encoder features, got %d" % len(features))
        return [block(f) for block, f in zip(self.blocks, features)]


class _ConvBlock(nn.Module):
    """Reflection-padded 3x3 conv + ELU, the decoder's working unit."""

    def __init__(self, cin, cout):
        super().__init__()
        self.pad = nn.ReflectionPad2d(1)
        self.conv = nn.Conv2d(cin, cout, 3)
        self.act = nn.ELU(inplace=True)

    def forward(self, x):
        return self.act(self.conv(self.pad(x)))


class DepthDecoder(nn.Module):
    """Skip-connected upsampling head emitting sigmoid disparity at 4 scales."""

    def __init__(self, num_ch_skip, widths=(16, 32, 64, 128, 256), num_scales=4):
        super().__init__()
        self.num_scales = num_scales
        self.widths = tuple(widths)
        self.upconvs0 = nn.ModuleList()
        self.upconvs1 = nn.ModuleList()
        for i in range(4, -1, -1):
            cin = num_ch_skip[-1] if i == 4 else self.widths[i + 1]
            self.upconvs0.append(_ConvBlock(cin, self.widths[i]))
            cat = self.widths[i] + (num_ch_skip[i - 1] if i > 0 else 0)
            self.upconvs1.append(_ConvBlock(cat, self.widths[i]))
        self.disp_convs = nn.ModuleList([
            nn.Sequential(nn.ReflectionPad2d(1), nn.Conv2d(self.widths[s], 1, 3))
            for s in range(num_scales)
        ])

    def forward(self, skips):
        x = skips[-1]
        disps = [None] * self.num_scales
        for idx, i in enumerate(range(4, -1, -1)):
            x = self.upconvs0[idx](x)
            x = F.interpolate(x, scale_factor=2, mode="nearest")
            if i > 0:
                x = torch.cat([x, skips[i - 1]], dim=1)
            x = self.upconvs1[idx](x)
            if i < self.num_scales:
                disps[i] = torch.sigmoid(self.disp_convs[i](x))
        return disps


class DepthNetwork(nn.Module):
    """Encoder + pyramid adapter + decoder; sigmoid disparity at 4 scales.

    forward(x) -> (disparities finest-first, encoder features). Inputs are
    images in [0, 1] at a resolution divisible by 32.
    """

    def __init__(self, backbone="small", pyramid_channels=None, decoder_widths=(16, 32, 64, 128, 256)):
        super().__init__()
        self.encoder = make_encoder(backbone)
        self.pyramid = PyramidAdapter(self.encoder.num_ch_enc, pyramid_channels)
        self.decoder = DepthDecoder(self.pyramid.num_ch_out, decoder_widths)

    def forward(self, x):
        features = self.encoder(x)
        disps = self.decoder(self.pyramid(features))
        return disps, features

    def encoder_parameters(self):
        return list(self.encoder.parameters())

    def pyde_parameters(self):
        """Pyramid + decoder weights, optimized as one group."""
        return list(self.pyramid.parameters()) + list(self.decoder.parameters())


class PoseNetwork(nn.Module):
    """Relative camera motion from a channel-concatenated frame pair.

    forward(a, b) -> (B, 4, 4) transform taking points in a's camera to b's.
    The raw 6-vector (3 axis-angle, 3 translation in meters) is scaled by 0.01
    so a fresh network starts near the identity.
    """

    def __init__(self, backbone="small"):
        super().__init__()
        self.encoder = make_encoder(backbone, in_channels=6)
        c = self.encoder.num_ch_enc[-1]
        self.head = nn.Sequential(
            nn.Conv2d(c, c, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, c, 3, padding=1),
            nn.ReLU(inplace=True),
            nn.Conv2d(c, 6, 1),
        )

    def forward(self, frame_a, frame_b):
        if frame_a.shape != frame_b.shape:
            raise ValueError("pose input resolution mismatch: %r vs %r"
                             % (tuple(frame_a.shape), tuple(frame_b.shape)))
        x = torch.cat([frame_a, frame_b], dim=1)
        out = self.head(self.encoder(x)[-1])
        vec = POSE_OUT_SCALE * out.mean(dim=(2, 3))
        return pose_matrix(vec[:, :3], vec[:, 3:])


class _ReverseGradient(torch.autograd.Function):
    @staticmethod
    def forward(ctx, x, scale):
        ctx.scale = scale
        return x.clone()

    @staticmethod
    def backward(ctx, grad):
        return -ctx.scale * grad, None


def reverse_gradient(x, scale=1.0):
    """Identity in the forward pass; multiplies the backward gradient by -scale."""
    return _ReverseGradient.apply(x, scale)


class DomainClassifier(nn.Module):
    """Real-vs-virtual logit from the deepest encoder feature.

    The gradient-reversal boundary sits at the input: the classifier itself
    receives ordinary gradients while the encoder upstream sees them negated
    and scaled by `reversal_scale`.
    """

    def __init__(self, in_channels, hidden=(128, 64), reversal_scale=1.0):
        super().__init__()
        self.reversal_scale = reversal_scale
        self.conv = nn.Sequential(
            nn.Conv2d(in_channels, hidden[0], 3, padding=1),
            nn.ReLU(inplace=True),
        )
        self.fc = nn.Sequential(
            nn.Linear(hidden[0], hidden[0]),
            nn.ReLU(inplace=True),
            nn.Linear(hidden[0], hidden[1]),
            nn.ReLU(inplace=True),
            nn.Linear(hidden[1], 1),
        )

    def forward(self, features, reversal_scale=None):
        scale = self.reversal_scale if reversal_scale is None else reversal_scale
        x = reverse_gradient(features, scale)
        x = self.conv(x).mean(dim=(2, 3))
        return self.fc(x).squeeze(1)
