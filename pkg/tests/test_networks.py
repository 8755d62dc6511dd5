import pytest
import torch
import torch.nn as nn

from simdepth import networks as N

TINY = dict(widths=(4, 4, 8, 8, 8))


def tiny_depth_net(seed=0):
    torch.manual_seed(seed)
    return N.DepthNetwork(backbone=N.SmallEncoder(**TINY), decoder_widths=(4, 4, 8, 8, 8))


class TestDispToDepth:
    def test_limits(self):
        lo = N.disp_to_depth(torch.tensor(1e-9, dtype=torch.float64), 0.1, 100.0)
        hi = N.disp_to_depth(torch.tensor(1.0 - 1e-9, dtype=torch.float64), 0.1, 100.0)
        assert lo.item() == pytest.approx(100.0, rel=1e-6)
        assert hi.item() == pytest.approx(0.1, rel=1e-6)

    def test_direct_formula_oracle(self):
        d_min, d_max = 0.1, 100.0
        for disp in (0.1, 0.5, 0.9):
            expect = 1.0 / (1.0 / d_max + (1.0 / d_min - 1.0 / d_max) * disp)
            out = N.disp_to_depth(torch.tensor(disp, dtype=torch.float64), d_min, d_max)
            assert out.item() == pytest.approx(expect, rel=1e-12)

    def test_monotone_decreasing(self):
        disp = torch.linspace(0.01, 0.99, 50, dtype=torch.float64)
        depth = N.disp_to_depth(disp, 0.1, 100.0)
        assert (depth[1:] < depth[:-1]).all()
        assert depth.max() < 100.0 and depth.min() > 0.1

    def test_invalid_range(self):
        with pytest.raises(ValueError):
            N.disp_to_depth(torch.tensor(0.5), 10.0, 1.0)


class TestDepthNetwork:
    def test_outputs_strictly_inside_unit_interval(self):
        net = tiny_depth_net()
        disps, _ = net(torch.rand(2, 3, 64, 64))
        for d in disps:
            assert (d > 0).all() and (d < 1).all()

    def test_deterministic(self):
        net = tiny_depth_net()
        net.eval()
        x = torch.rand(1, 3, 64, 64)
        out1, _ = net(x)
        out2, _ = net(x)
        for a, b in zip(out1, out2):
            assert torch.equal(a, b)

    def test_output_shapes_follow_architecture(self):
        # shape oracle: scale s output is input / 2^s, features at strides 2..32
        net = tiny_depth_net()
        h, w = 96, 128
        disps, feats = net(torch.rand(1, 3, h, w))
        for s, d in enumerate(disps):
            assert d.shape == (1, 1, h // 2 ** s, w // 2 ** s)
        for i, f in enumerate(feats):
            stride = 2 ** (i + 1)
            assert f.shape[-2:] == (h // stride, w // stride)

    def test_rejects_bad_resolution(self):
        net = tiny_depth_net()
        with pytest.raises(ValueError):
            net(torch.rand(1, 3, 50, 64))

    def test_weight_groups_partition_depth_weights(self):
        net = tiny_depth_net()
        n_enc = sum(p.numel() for p in net.encoder_parameters())
        n_pyde = sum(p.numel() for p in net.pyde_parameters())
        n_all = sum(p.numel() for p in net.parameters())
        assert n_enc + n_pyde == n_all


class TestPyramid:
    def test_each_block_is_conv_bn_relu_once(self):
        net = tiny_depth_net()
        assert len(net.pyramid.blocks) == 5
        for block in net.pyramid.blocks:
            kinds = [type(m) for m in block.children()]
            assert kinds == [nn.Conv2d, nn.BatchNorm2d, nn.ReLU]

    def test_emits_five_maps_at_fixed_strides(self):
        net = tiny_depth_net()
        feats = net.encoder(torch.rand(1, 3, 64, 64))
        out = net.pyramid(feats)
        assert len(out) == 5
        for i, f in enumerate(out):
            assert f.shape[-2:] == (64 // 2 ** (i + 1), 64 // 2 ** (i + 1))

    def test_backbone_swap_keeps_downstream_shapes(self):
        torch.manual_seed(0)
        x = torch.rand(1, 3, 64, 64)
        shapes = []
        for backbone in (N.SmallEncoder(widths=(4, 4, 8, 8, 8)),
                         N.SmallEncoder(widths=(8, 16, 16, 32, 32))):
            net = N.DepthNetwork(backbone=backbone, pyramid_channels=(4, 4, 8, 8, 8),
                                 decoder_widths=(4, 4, 8, 8, 8))
            disps, _ = net(x)
            shapes.append([tuple(d.shape) for d in disps])
        assert shapes[0] == shapes[1]


class TestPoseNetwork:
    def pose_net(self):
        torch.manual_seed(1)
        return N.PoseNetwork(backbone=N.SmallEncoder(in_channels=6, **TINY))

    def test_near_identity_at_init(self):
        net = self.pose_net()
        net.eval()
        mat = net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64))
        assert (mat[0, :3, 3].abs() < 0.05).all()
        assert (mat[0, :3, :3] - torch.eye(3)).abs().max() < 0.05

    def test_deterministic(self):
        net = self.pose_net()
        net.eval()
        a, b = torch.rand(1, 3, 64, 64), torch.rand(1, 3, 64, 64)
        assert torch.equal(net(a, b), net(a, b))

    def test_rotation_block_orthonormal(self):
        net = self.pose_net()
        mat = net(torch.rand(3, 3, 64, 64), torch.rand(3, 3, 64, 64))
        rot = mat[:, :3, :3]
        eye = torch.eye(3).expand(3, 3, 3)
        assert (rot @ rot.transpose(-1, -2) - eye).abs().max() < 1e-6

    def test_resolution_mismatch(self):
        net = self.pose_net()
        with pytest.raises(ValueError):
            net(torch.rand(1, 3, 64, 64), torch.rand(1, 3, 32, 64))


class TestGradientReversal:
    def test_forward_identity_for_any_scale(self):
        x = torch.rand(2, 8, 4, 4)
        for scale in (0.5, 1.0, 2.0):
            assert torch.equal(N.reverse_gradient(x, scale), x)

    def test_backward_negates_and_scales(self):
        for scale in (0.5, 1.0, 2.0):
            x = torch.rand(5, dtype=torch.float64, requires_grad=True)
            (N.reverse_gradient(x, scale) * torch.arange(5.0, dtype=torch.float64)).sum().backward()
            expect = -scale * torch.arange(5.0, dtype=torch.float64)
            assert torch.allclose(x.grad, expect, atol=1e-12)


class TestDomainClassifier:
    def classifier(self, reversal=1.0):
        torch.manual_seed(2)
        return N.DomainClassifier(8, hidden=(8, 4), reversal_scale=reversal)

    def test_logit_independent_of_reversal_scale(self):
        clf = self.classifier()
        clf.eval()
        feats = torch.rand(3, 8, 4, 4)
        outs = [clf(feats, reversal_scale=s) for s in (0.5, 1.0, 2.0)]
        assert torch.equal(outs[0], outs[1]) and torch.equal(outs[1], outs[2])

    def grads(self, reversal_scale):
        clf = self.classifier()
        clf.eval()
        torch.manual_seed(3)
        feats = torch.rand(2, 8, 4, 4, dtype=torch.float64, requires_grad=True)
        clf.double()
        logits = clf(feats, reversal_scale=reversal_scale)
        loss = torch.nn.functional.binary_cross_entropy_with_logits(
            logits, torch.ones_like(logits))
        clf.zero_grad()
        loss.backward()
        return feats.grad.clone(), [p.grad.clone() for p in clf.parameters()]

    def test_feature_gradient_reversed_and_scaled(self):
        base_feat, base_params = self.grads(reversal_scale=0.0)
        # scale 0 kills the feature gradient entirely
        assert base_feat.abs().max() == 0
        ref_feat, _ = self.grads(reversal_scale=-1.0)  # -(-1) = +1: unreversed
        for k in (0.5, 1.0, 2.0):
            feat_k, params_k = self.grads(reversal_scale=k)
            rel = (feat_k + k * ref_feat).abs().max() / ref_feat.abs().max()
            assert rel < 1e-6
            for a, b in zip(params_k, base_params):
                assert torch.allclose(a, b, atol=1e-12)
