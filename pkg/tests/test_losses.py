import numpy as np
import pytest
import torch

from simdepth import losses as L
from simdepth.config import ConfigError
from simdepth.data import ClassMap
from simdepth.geometry import Intrinsics, pose_matrix

LEGEND = {0: "sky", 1: "ground", 2: "building", 3: "object"}
WEIGHTS = {"object": 1.0, "building": 0.5, "ground": 0.5, "sky": 0.0}


def rand(shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.rand(*shape, generator=g, dtype=torch.float64)


def central_difference(fn, x, idx, eps=1e-6):
    plus = x.detach().clone()
    plus[idx] += eps
    minus = x.detach().clone()
    minus[idx] -= eps
    return (fn(plus) - fn(minus)) / (2 * eps)


def assert_grad_matches(fn, x, indices, rtol=1e-4):
    x = x.detach().clone().requires_grad_(True)
    fn(x).backward()
    for idx in indices:
        fd = central_difference(fn, x, idx).item()
        rel = abs(x.grad[idx].item() - fd) / max(abs(fd), 1e-12)
        assert rel < rtol, "grad mismatch at %r: autograd %r vs fd %r" % (idx, x.grad[idx].item(), fd)


class TestSsim:
    def test_equal_images_give_one(self):
        a = rand((2, 3, 8, 8), seed=1)
        assert torch.equal(L.ssim(a, a), torch.ones_like(a))

    def test_constant_patch_closed_form(self):
        a = torch.full((1, 1, 8, 8), 0.2, dtype=torch.float64)
        b = torch.full((1, 1, 8, 8), 0.8, dtype=torch.float64)
        expect = (2 * 0.2 * 0.8 + L.SSIM_C1) / (0.2 ** 2 + 0.8 ** 2 + L.SSIM_C1)
        out = L.ssim(a, b)
        assert torch.allclose(out, torch.full_like(out, expect), atol=1e-12)

    def test_inverted_image_below_one(self):
        a = rand((1, 1, 8, 8), seed=2)
        assert (L.ssim(a, 1 - a) < 1).all()

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            L.ssim(rand((1, 1, 8, 8)), rand((1, 1, 8, 9)))


class TestPe:
    def test_zero_on_equal(self):
        a = rand((1, 3, 8, 8), seed=3)
        assert L.pe(a, a).abs().max() == 0

    def test_constants_closed_form(self):
        a = torch.zeros(1, 1, 8, 8, dtype=torch.float64)
        b = torch.ones(1, 1, 8, 8, dtype=torch.float64)
        s = L.SSIM_C1 / (1 + L.SSIM_C1)  # constant-patch formula at 0 vs 1
        expect = 0.85 * (1 - s) / 2 + 0.15 * 1.0
        assert torch.allclose(L.pe(a, b), torch.full((1, 1, 8, 8), expect, dtype=torch.float64),
                              atol=1e-12)

    def test_monotone_in_perturbation(self):
        a = rand((1, 1, 8, 8), seed=4) * 0.5 + 0.25
        noise = rand((1, 1, 8, 8), seed=5) - 0.5
        values = [L.pe(a, a + k * noise).mean().item() for k in (0.05, 0.15, 0.3)]
        assert values[0] < values[1] < values[2]

    def test_symmetry(self):
        a, b = rand((1, 3, 8, 8), seed=6), rand((1, 3, 8, 8), seed=7)
        assert (L.pe(a, b) - L.pe(b, a)).abs().max() < 1e-9

    def test_gradient_matches_finite_differences(self):
        b = rand((1, 1, 8, 8), seed=8)
        assert_grad_matches(lambda x: L.pe(x, b).mean(), rand((1, 1, 8, 8), seed=9),
                            [(0, 0, 2, 3), (0, 0, 5, 5), (0, 0, 0, 7)])


class TestPeMin:
    def test_prev_equals_center(self):
        center = rand((1, 3, 8, 8), seed=10)
        other = rand((1, 3, 8, 8), seed=11)
        assert L.pe_min(center, center, other).abs().max() == 0

    def test_prev_equals_next(self):
        center = rand((1, 3, 8, 8), seed=12)
        prev = rand((1, 3, 8, 8), seed=13)
        assert torch.allclose(L.pe_min(prev, center, prev), L.pe(center, prev), atol=1e-15)

    def test_elementwise_min_oracle(self):
        prev, center, next_ = (rand((2, 3, 8, 8), seed=s) for s in (14, 15, 16))
        expect = torch.minimum(L.pe(center, prev), L.pe(center, next_))
        assert torch.allclose(L.pe_min(prev, center, next_), expect, atol=1e-15)


class TestAutoMask:
    def test_static_triplet_masks_everything_out(self):
        frame = rand((1, 3, 8, 8), seed=17)
        identity = L.pe_min(frame, frame, frame)
        warped = L.pe_min(frame + 0.1, frame, frame + 0.1)
        assert L.auto_mask(identity, warped).abs().max() == 0

    def test_perfect_warp_keeps_everything(self):
        identity = rand((1, 1, 8, 8), seed=18) + 0.1
        warped = torch.zeros_like(identity)
        assert L.auto_mask(identity, warped).min() == 1

    def test_strict_inequality_on_ties(self):
        same = rand((1, 1, 8, 8), seed=19)
        assert L.auto_mask(same, same.clone()).abs().max() == 0

    def test_elementwise_oracle(self):
        a, b = rand((1, 1, 8, 8), seed=20), rand((1, 1, 8, 8), seed=21)
        mask = L.auto_mask(a, b)
        for i in range(8):
            for j in range(8):
                assert mask[0, 0, i, j].item() == float(b[0, 0, i, j] < a[0, 0, i, j])

    def test_detached_from_graph(self):
        a = rand((1, 1, 8, 8), seed=22).requires_grad_(True)
        b = rand((1, 1, 8, 8), seed=23).requires_grad_(True)
        mask = L.auto_mask(a * 1.0, b * 1.0)
        assert not mask.requires_grad


class TestCpe:
    def test_zero_mask(self):
        warped = rand((1, 1, 8, 8), seed=24)
        assert L.cpe(torch.zeros_like(warped), warped) == 0

    def test_full_mask(self):
        warped = rand((1, 1, 8, 8), seed=25)
        assert torch.allclose(L.cpe(torch.ones_like(warped), warped), warped.mean())

    def test_checkerboard_mean_over_all_pixels(self):
        warped = rand((1, 1, 8, 8), seed=26)
        mask = torch.zeros_like(warped)
        mask[0, 0, ::2, ::2] = 1
        mask[0, 0, 1::2, 1::2] = 1
        expect = warped[mask.bool()].sum() / warped.numel()
        assert torch.allclose(L.cpe(mask, warped), expect, atol=1e-15)


class TestSmoothness:
    def test_constant_disparity_zero(self):
        disp = torch.full((1, 1, 8, 8), 0.3, dtype=torch.float64)
        image = rand((1, 3, 8, 8), seed=27)
        assert L.smoothness(disp, image) == 0

    def test_ramp_oracle(self):
        w = 10
        ramp = (torch.linspace(0.2, 0.7, w, dtype=torch.float64)
                .view(1, 1, 1, w).expand(1, 1, 6, w).contiguous())
        image = torch.full((1, 3, 6, w), 0.5, dtype=torch.float64)
        slope = (0.7 - 0.2) / (w - 1)
        expect = slope / ramp.mean().item()
        assert L.smoothness(ramp, image).item() == pytest.approx(expect, rel=1e-12)

    def test_aligned_edges_reduce_penalty(self):
        w = 10
        ramp = (torch.linspace(0.2, 0.7, w, dtype=torch.float64)
                .view(1, 1, 1, w).expand(1, 1, 6, w).contiguous())
        flat = torch.full((1, 3, 6, w), 0.5, dtype=torch.float64)
        edgy = flat + torch.linspace(0, 3.0, w, dtype=torch.float64).view(1, 1, 1, w)
        assert L.smoothness(ramp, edgy) < L.smoothness(ramp, flat)

    def test_zero_mean_rejected(self):
        with pytest.raises(ValueError):
            L.smoothness(torch.zeros(1, 1, 8, 8, dtype=torch.float64),
                         torch.zeros(1, 3, 8, 8, dtype=torch.float64))

    def test_gradient_matches_finite_differences(self):
        image = rand((1, 3, 8, 8), seed=28)
        disp = rand((1, 1, 8, 8), seed=29) * 0.5 + 0.25
        assert_grad_matches(lambda x: L.smoothness(x, image), disp,
                            [(0, 0, 1, 1), (0, 0, 4, 6), (0, 0, 7, 0)])


class TestSupervisedLoss:
    def test_exact_prediction(self):
        gt = rand((1, 1, 8, 8), seed=30) * 50 + 1
        mask = torch.ones_like(gt)
        assert L.supervised_loss(gt, gt, mask) == 0

    def test_constant_offset(self):
        gt = rand((1, 1, 8, 8), seed=31) * 50 + 1
        mask = torch.ones_like(gt)
        assert torch.allclose(L.supervised_loss(gt + 1, gt, mask),
                              torch.tensor(1.0, dtype=torch.float64))

    def test_half_mask_double_error(self):
        gt = rand((1, 1, 8, 8), seed=32) * 50 + 1
        mask = torch.full_like(gt, 0.5)
        assert torch.allclose(L.supervised_loss(gt + 2, gt, mask),
                              torch.tensor(1.0, dtype=torch.float64))

    def test_absolute_homogeneity(self):
        gt = rand((1, 1, 8, 8), seed=33) * 50 + 1
        residual = rand((1, 1, 8, 8), seed=34) - 0.5
        mask = rand((1, 1, 8, 8), seed=35)
        base = L.supervised_loss(gt + residual, gt, mask)
        for k in (-3.0, 0.5, 7.0):
            scaled = L.supervised_loss(gt + k * residual, gt, mask)
            assert abs(scaled.item() - abs(k) * base.item()) < 1e-9

    def test_gradient_matches_finite_differences(self):
        gt = rand((1, 1, 8, 8), seed=36) * 10 + 1
        mask = rand((1, 1, 8, 8), seed=37)
        assert_grad_matches(lambda x: L.supervised_loss(x, gt, mask),
                            gt + rand((1, 1, 8, 8), seed=38),
                            [(0, 0, 0, 0), (0, 0, 3, 3), (0, 0, 7, 7)])


class TestSupervisionMask:
    def build(self, depths, classes, d_max=80.0):
        sem = ClassMap(np.asarray(classes, dtype=np.int64), LEGEND)
        return L.build_supervision_mask(np.asarray(depths, dtype=np.float32), sem, d_max, WEIGHTS)

    def test_dynamic_object_weight(self):
        mask = self.build([[30.0]], [[3]])
        assert mask[0, 0] == 1.0

    def test_static_structure_weight(self):
        mask = self.build([[30.0]], [[2]])
        assert mask[0, 0] == 0.5

    def test_depth_cap_zeroes(self):
        mask = self.build([[90.0]], [[1]])
        assert mask[0, 0] == 0.0

    def test_sky_always_zero(self):
        mask = self.build([[10.0]], [[0]])
        assert mask[0, 0] == 0.0

    def test_invalid_gt_zeroes(self):
        mask = self.build([[0.0]], [[3]])
        assert mask[0, 0] == 0.0

    def test_unknown_class_id_rejected(self):
        sem_values = np.array([[9]], dtype=np.int64)
        sem = ClassMap(sem_values, {**LEGEND, 9: "mystery"})
        with pytest.raises(ConfigError):
            L.build_supervision_mask(np.array([[10.0]], dtype=np.float32), sem, 80.0, WEIGHTS)


class TestDaLoss:
    def test_chance_probability_gives_ln2(self):
        logits = torch.zeros(5, dtype=torch.float64)
        l_r, l_v = L.da_loss(logits, logits)
        assert l_r.item() == pytest.approx(np.log(2), rel=1e-12)
        assert l_v.item() == pytest.approx(np.log(2), rel=1e-12)

    def test_confident_correct_approaches_zero(self):
        l_r, l_v = L.da_loss(torch.full((4,), 30.0), torch.full((4,), -30.0))
        assert l_r.item() < 1e-8 and l_v.item() < 1e-8

    def test_single_real_sample_is_minus_log_p(self):
        p = 0.37
        logit = torch.tensor([np.log(p / (1 - p))], dtype=torch.float64)
        l_r, _ = L.da_loss(logits_real=logit)
        assert l_r.item() == pytest.approx(-np.log(p), rel=1e-9)

    def test_one_sided(self):
        l_r, l_v = L.da_loss(logits_real=torch.zeros(3))
        assert l_v is None and l_r is not None

    def test_gradient_matches_finite_differences(self):
        logits = rand((6,), seed=39) * 4 - 2
        assert_grad_matches(lambda x: L.da_loss(logits_real=x)[0], logits, [(0,), (3,), (5,)])


def make_triplet(seed=40, b=2, size=64, static=False):
    g = torch.Generator().manual_seed(seed)
    center = torch.rand(b, 3, size, size, generator=g, dtype=torch.float64)
    if static:
        prev = center.clone()
        next_ = center.clone()
    else:
        prev = (center + 0.05 * torch.randn(b, 3, size, size, generator=g, dtype=torch.float64)).clamp(0, 1)
        next_ = (center + 0.05 * torch.randn(b, 3, size, size, generator=g, dtype=torch.float64)).clamp(0, 1)
    disps = [torch.rand(b, 1, size // 2 ** s, size // 2 ** s, generator=g, dtype=torch.float64) * 0.5 + 0.2
             for s in range(4)]
    pose = pose_matrix(torch.full((b, 3), 0.001, dtype=torch.float64),
                       torch.full((b, 3), 0.01, dtype=torch.float64))
    intr = Intrinsics(60.0, 60.0, (size - 1) / 2, (size - 1) / 2, size, size)
    return (prev, center, next_), disps, pose, intr


class TestSelfSupervisedLoss:
    def test_static_triplet_photometric_zero(self):
        frames, disps, pose, intr = make_triplet(static=True)
        loss, diag = L.self_supervised_loss(frames, disps, pose, pose, intr,
                                            smooth_weight=1e-3, return_diagnostics=True)
        for mask, photometric in zip(diag["masks"], diag["photometric"]):
            assert mask.abs().max() == 0
            assert photometric == 0
        smooth_only = sum(1e-3 * s / 2 ** i for i, s in enumerate(diag["smoothness"])) / 4
        assert torch.allclose(loss, smooth_only, atol=1e-15)

    def test_zero_smooth_weight_is_average_cpe(self):
        frames, disps, pose, intr = make_triplet(seed=41)
        loss, diag = L.self_supervised_loss(frames, disps, pose, pose, intr,
                                            smooth_weight=0.0, return_diagnostics=True)
        expect = sum(diag["photometric"]) / 4
        assert torch.allclose(loss, expect, atol=1e-15)

    def test_gradient_does_not_flow_through_mask(self):
        frames, disps, pose, intr = make_triplet(seed=42, b=1, size=32)
        disps = [d.requires_grad_(True) for d in disps]
        loss = L.self_supervised_loss(frames, disps, pose, pose, intr)
        loss.backward()
        for d in disps:
            assert d.grad is not None and torch.isfinite(d.grad).all()

    def test_gradient_matches_finite_differences(self):
        # the full loss is piecewise smooth in the disparity away from mask
        # flips; central differences with a tiny step stay on one piece
        frames, disps, pose, intr = make_triplet(seed=43, b=1, size=32)
        frames = tuple(f.contiguous() for f in frames)

        def full(x):
            ds = [x] + [d.detach() for d in disps[1:]]
            return L.self_supervised_loss(frames, ds, pose, pose, intr, smooth_weight=1e-3)

        assert_grad_matches(full, disps[0], [(0, 0, 3, 4), (0, 0, 10, 20), (0, 0, 30, 7)])
