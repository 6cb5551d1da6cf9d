import numpy as np
import pytest

from dvokit.errors import DegenerateDepth, DegenerateOverlap, GridTooSmall
from dvokit.geometry import CameraIntrinsics, Pose6D
from dvokit.imaging import ImageBuffer, InverseDepthMap
from dvokit.losses import (
    LossBreakdown,
    LossWeights,
    Triplet,
    appearance_loss,
    normalize_inverse_depth,
    normalize_inverse_depth_vjp,
    smoothness_prior,
    ssim,
    triplet_loss,
)
from dvokit.synth import SceneSpec, make_pair, make_triplet


def consistent_pair(seed=3, width=16, height=16):
    spec = SceneSpec(kind="smooth-height-field", texture_seed=seed, width=width, height=height)
    pose = Pose6D([0.02, -0.01, 0.01], [0.002, -0.003, 0.001])
    ref, depth, src, _ = make_pair(spec, pose)
    return ref, depth, src, pose, spec.intrinsics


def consistent_triplet(seed=5, width=32, height=32):
    spec = SceneSpec(kind="smooth-height-field", texture_seed=seed, width=width, height=height)
    p21 = Pose6D([-0.05, 0.0, 0.02], [0.0, 0.004, 0.0])
    p23 = Pose6D([0.05, 0.0, -0.02], [0.0, -0.003, 0.001])
    data = make_triplet(spec, p21, p23)
    t = Triplet(data["images"], data["gt_inv_depths"], p21, p23)
    return t, data["intrinsics"]


class TestNormalize:
    def test_constant(self):
        d = InverseDepthMap.from_array(np.full((2, 2), 2.0))
        assert np.array_equal(normalize_inverse_depth(d).values, np.ones((2, 2)))

    def test_two_values(self):
        d = InverseDepthMap.from_array(np.array([[1.0, 3.0]]))
        assert np.array_equal(normalize_inverse_depth(d).values, np.array([[0.5, 1.5]]))

    def test_idempotent_and_unit_mean(self):
        rng = np.random.default_rng(0)
        for _ in range(5):
            d = InverseDepthMap.from_array(rng.uniform(0.1, 2.0, size=(7, 9)))
            once = normalize_inverse_depth(d)
            twice = normalize_inverse_depth(once)
            assert abs(np.mean(once.values) - 1.0) < 1e-12
            assert np.max(np.abs(once.values - twice.values)) < 1e-14

    def test_collapsed_depth_raises(self):
        d = InverseDepthMap.from_array(np.full((4, 4), 1e-14))
        with pytest.raises(DegenerateDepth):
            normalize_inverse_depth(d)

    def test_vjp_matches_finite_differences(self):
        rng = np.random.default_rng(1)
        values = rng.uniform(0.2, 1.5, size=(6, 6))
        g_out = rng.normal(size=(6, 6))
        delta = rng.normal(size=(6, 6))
        h = 1e-7
        n = values.size

        def eta(v):
            return n * v / np.sum(v)

        fd = np.sum(g_out * (eta(values + h * delta) - eta(values - h * delta))) / (2 * h)
        an = np.sum(normalize_inverse_depth_vjp(values, g_out) * delta)
        assert abs(fd - an) < 1e-6 * max(abs(fd), 1.0)


class TestSsim:
    def test_identical_images(self):
        rng = np.random.default_rng(2)
        a = ImageBuffer(rng.uniform(0.0, 1.0, size=(8, 8)))
        assert np.max(np.abs(ssim(a, a) - 1.0)) < 1e-12

    def test_constant_equal(self):
        a = ImageBuffer(np.full((5, 5), 0.5))
        assert np.max(np.abs(ssim(a, a) - 1.0)) < 1e-12

    def test_constant_unequal_closed_form(self):
        w = LossWeights()
        a = ImageBuffer(np.full((5, 5), 0.2))
        b = ImageBuffer(np.full((5, 5), 0.8))
        expected = (
            (2.0 * 0.2 * 0.8 + w.ssim_c1) * w.ssim_c2
            / ((0.04 + 0.64 + w.ssim_c1) * w.ssim_c2)
        )
        assert np.max(np.abs(ssim(a, b, w) - expected)) < 1e-12

    def test_range(self):
        rng = np.random.default_rng(3)
        for _ in range(10):
            a = ImageBuffer(rng.uniform(0.0, 1.0, size=(10, 10)))
            b = ImageBuffer(rng.uniform(0.0, 1.0, size=(10, 10)))
            s = ssim(a, b)
            assert s.min() >= -1.0 - 1e-12
            assert s.max() <= 1.0 + 1e-12

    def test_grid_too_small(self):
        a = ImageBuffer(np.full((2, 5), 0.5))
        with pytest.raises(GridTooSmall):
            ssim(a, a)


class TestAppearanceLoss:
    def test_identity_zero(self):
        ref, depth, _, _, k = consistent_pair()
        for scale in range(4):
            loss, g_d, g_p = appearance_loss(ref, ref, depth, Pose6D.identity(), k, scale)
            assert loss < 1e-12
            assert np.max(np.abs(g_d)) < 1e-12
            assert np.max(np.abs(g_p)) < 1e-12

    def test_constant_offset_l1(self):
        ref, depth, _, _, k = consistent_pair()
        shifted = ImageBuffer(ref.gray() + 0.1)
        loss, _, _ = appearance_loss(ref, shifted, depth, Pose6D.identity(), k, 1)
        assert abs(loss - 0.1) < 1e-12

    def test_gradients_match_finite_differences(self):
        ref, depth, src, pose, k = consistent_pair()
        rng = np.random.default_rng(4)
        h = 1e-6
        for scale in (0, 2):
            loss, g_d, g_p = appearance_loss(ref, src, depth, pose, k, scale)
            assert loss >= 0.0
            for _ in range(3):
                delta = rng.normal(size=depth.values.shape)
                lp = appearance_loss(
                    ref, src, InverseDepthMap.from_array(depth.values + h * delta),
                    pose, k, scale,
                )[0]
                lm = appearance_loss(
                    ref, src, InverseDepthMap.from_array(depth.values - h * delta),
                    pose, k, scale,
                )[0]
                fd = (lp - lm) / (2.0 * h)
                an = float(np.sum(g_d * delta))
                assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-10)
                dp = rng.normal(size=6)
                lp = appearance_loss(
                    ref, src, depth, Pose6D.from_vector(pose.as_vector() + h * dp), k, scale
                )[0]
                lm = appearance_loss(
                    ref, src, depth, Pose6D.from_vector(pose.as_vector() - h * dp), k, scale
                )[0]
                fd = (lp - lm) / (2.0 * h)
                an = float(g_p @ dp)
                assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-10)

    def test_degenerate_overlap(self):
        ref, depth, src, _, k = consistent_pair()
        runaway = Pose6D([20.0, 0.0, 0.0], np.zeros(3))
        with pytest.raises(DegenerateOverlap):
            appearance_loss(ref, src, depth, runaway, k, 1)


class TestSmoothnessPrior:
    def test_affine_depth_zero(self):
        h, w = 10, 12
        y, x = np.mgrid[0:h, 0:w].astype(float)
        d = InverseDepthMap.from_array(0.3 + 0.01 * x + 0.02 * y)
        img = ImageBuffer(np.random.default_rng(5).uniform(0.0, 1.0, size=(h, w)))
        loss, grad = smoothness_prior(d, img)
        assert loss < 1e-12

    def test_quadratic_on_flat_image(self):
        h, w = 8, 8
        x = np.tile(np.arange(w, dtype=float), (h, 1))
        d = InverseDepthMap.from_array(x * x)
        img = ImageBuffer(np.full((h, w), 0.5))
        loss, _ = smoothness_prior(d, img)
        assert abs(loss - 2.0) < 1e-12

    def test_positive_homogeneity(self):
        rng = np.random.default_rng(6)
        vals = rng.uniform(0.1, 1.0, size=(9, 9))
        img = ImageBuffer(rng.uniform(0.0, 1.0, size=(9, 9)))
        base, _ = smoothness_prior(InverseDepthMap.from_array(vals), img)
        scaled, _ = smoothness_prior(InverseDepthMap.from_array(4.0 * vals), img)
        assert scaled == 4.0 * base

    def test_gradient_matches_finite_differences(self):
        rng = np.random.default_rng(7)
        vals = rng.uniform(0.1, 1.0, size=(8, 8))
        img = ImageBuffer(rng.uniform(0.0, 1.0, size=(8, 8)))
        _, grad = smoothness_prior(InverseDepthMap.from_array(vals), img)
        h = 1e-7
        delta = rng.normal(size=(8, 8))
        lp, _ = smoothness_prior(InverseDepthMap.from_array(vals + h * delta), img)
        lm, _ = smoothness_prior(InverseDepthMap.from_array(vals - h * delta), img)
        fd = (lp - lm) / (2.0 * h)
        an = float(np.sum(grad * delta))
        assert abs(fd - an) <= 1e-6 * max(abs(fd), 1.0)

    def test_grid_too_small(self):
        d = InverseDepthMap.from_array(np.full((2, 8), 0.5))
        img = ImageBuffer(np.full((2, 8), 0.5))
        with pytest.raises(GridTooSmall):
            smoothness_prior(d, img)


class TestTripletLoss:
    def test_static_triplet_zero(self):
        h, w = 24, 32
        rng = np.random.default_rng(8)
        img = ImageBuffer(rng.uniform(0.0, 1.0, size=(h, w)))
        y, x = np.mgrid[0:h, 0:w].astype(float)
        d = InverseDepthMap.from_array(0.3 + 0.001 * x + 0.002 * y)
        t = Triplet((img, img, img), (d, d, d), Pose6D.identity(), Pose6D.identity())
        k = CameraIntrinsics(float(w), float(w), (w - 1) / 2.0, (h - 1) / 2.0)
        bd = triplet_loss(t, k)
        assert bd.total < 1e-10

    def test_breakdown_invariant(self):
        t, k = consistent_triplet()
        w = LossWeights()
        bd = triplet_loss(t, k, w)
        recomputed = sum(bd.appearance_per_scale) + w.lambda_prior * sum(bd.prior_per_scale)
        assert abs(bd.total - recomputed) < 1e-12
        assert all(a >= 0.0 for a in bd.appearance_per_scale)
        assert all(p >= 0.0 for p in bd.prior_per_scale)
        assert abs(sum(bd.directions) - sum(bd.appearance_per_scale)) < 1e-12

    def test_appearance_scale_invariance(self):
        t, k = consistent_triplet()
        base = triplet_loss(t, k)
        s = 0.7
        scaled = Triplet(
            t.images,
            tuple(InverseDepthMap.from_array(d.values * s) for d in t.inv_depths),
            Pose6D(t.p21.t / s, t.p21.omega),
            Pose6D(t.p23.t / s, t.p23.omega),
        )
        other = triplet_loss(scaled, k)
        for a, b in zip(base.appearance_per_scale, other.appearance_per_scale):
            assert abs(a - b) < 1e-10
        # Priors scale by s exactly, so the total strictly drops for s < 1.
        for a, b in zip(base.prior_per_scale, other.prior_per_scale):
            assert abs(b - s * a) < 1e-12 * max(1.0, a)
        assert other.total < base.total

    def test_normalization_removes_scale_sensitivity(self):
        t, k = consistent_triplet()

        def normalized_total(s):
            depths = tuple(
                normalize_inverse_depth(InverseDepthMap.from_array(d.values * s))
                for d in t.inv_depths
            )
            return triplet_loss(Triplet(t.images, depths, t.p21, t.p23), k).total

        base = normalized_total(1.0)
        # Power-of-two scalings round identically, so equality is bitwise.
        assert normalized_total(2.0) == base
        assert normalized_total(0.25) == base
        assert abs(normalized_total(3.7) - base) < 1e-12

    def test_gradients_match_finite_differences(self):
        base, k = consistent_triplet()
        # Evaluate away from the photometric optimum so directional
        # derivatives are well above the finite-difference noise floor.
        t = Triplet(
            base.images,
            tuple(
                InverseDepthMap.from_array(d.values * 1.1) for d in base.inv_depths
            ),
            base.p21,
            base.p23,
        )
        bd = triplet_loss(t, k)
        rng = np.random.default_rng(9)
        # Small step: pixels whose photometric residual changes sign inside
        # the step contribute an O(h) kink error to the finite difference.
        h = 1e-7
        for i in range(3):
            delta = rng.normal(size=t.inv_depths[i].values.shape)

            def total(sign):
                depths = list(t.inv_depths)
                depths[i] = InverseDepthMap.from_array(depths[i].values + sign * h * delta)
                return triplet_loss(Triplet(t.images, tuple(depths), t.p21, t.p23), k).total

            fd = (total(1.0) - total(-1.0)) / (2.0 * h)
            an = float(np.sum(bd.grad_depths[i] * delta))
            assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-10)
        for pose, grad, slot in ((t.p21, bd.grad_p21, 0), (t.p23, bd.grad_p23, 1)):
            dp = rng.normal(size=6)

            def total(sign):
                q = Pose6D.from_vector(pose.as_vector() + sign * h * dp)
                poses = [t.p21, t.p23]
                poses[slot] = q
                return triplet_loss(Triplet(t.images, t.inv_depths, *poses), k).total

            fd = (total(1.0) - total(-1.0)) / (2.0 * h)
            an = float(grad @ dp)
            assert abs(fd - an) <= 1e-4 * max(abs(fd), 1e-10)

    def test_validation(self):
        with pytest.raises(ValueError):
            LossWeights(lambda_prior=-1.0)
        with pytest.raises(ValueError):
            LossWeights(ssim_weight=1.5)
        img = ImageBuffer(np.full((8, 8), 0.5))
        d_small = InverseDepthMap.from_array(np.full((4, 4), 0.5))
        d = InverseDepthMap.from_array(np.full((8, 8), 0.5))
        with pytest.raises(ValueError):
            Triplet((img, img, img), (d, d, d_small), Pose6D.identity(), Pose6D.identity())
