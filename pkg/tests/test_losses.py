"""Loss anchors, metric anchors, gradients."""

import numpy as np
import pytest

from unweather import tensor as T
from unweather.gradcheck import check_tensors
from unweather.losses import (
    LossReport,
    charbonnier,
    edge_loss,
    psnr,
    ssim,
    total_loss,
)
from unweather.validation import DimensionError, ValidationError


def rand_image(seed, h=16, w=16):
    return np.random.default_rng(seed).uniform(0, 1, size=(h, w, 3))


class TestCharbonnier:
    def test_identical_inputs_give_exactly_eps(self):
        img = rand_image(0)
        val = charbonnier(T.Tensor(img, dtype=np.float64), img).item()
        assert val == 1e-4

    def test_single_element_value(self):
        # sqrt(0.3^2 + 1e-8) worked out directly
        val = charbonnier(T.Tensor(np.array([[[0.3]]]), dtype=np.float64),
                          np.array([[[0.0]]])).item()
        assert val == pytest.approx(0.30000001666666574, rel=1e-12)

    def test_symmetric(self):
        a, b = rand_image(1), rand_image(2)
        ab = charbonnier(T.Tensor(a, dtype=np.float64), b).item()
        ba = charbonnier(T.Tensor(b, dtype=np.float64), a).item()
        assert ab == pytest.approx(ba, rel=1e-15)

    def test_lower_bound(self):
        a, b = rand_image(3), rand_image(4)
        assert charbonnier(T.Tensor(a, dtype=np.float64), b).item() > 1e-4

    def test_shape_mismatch(self):
        with pytest.raises(DimensionError):
            charbonnier(T.Tensor(np.zeros((2, 2, 3))), np.zeros((2, 3, 3)))

    def test_global_reduction_literal_form(self):
        a, b = rand_image(5), rand_image(6)
        val = charbonnier(T.Tensor(a, dtype=np.float64), b, reduction="global").item()
        assert val == pytest.approx(np.sqrt(((a - b) ** 2).sum() + 1e-8), rel=1e-14)
        same = charbonnier(T.Tensor(a, dtype=np.float64), a, reduction="global").item()
        assert same == 1e-4

    def test_unknown_reduction(self):
        with pytest.raises(ValidationError):
            charbonnier(T.Tensor(np.zeros((2, 2, 3))), np.zeros((2, 2, 3)), reduction="median")

    def test_gradient(self):
        rng = np.random.default_rng(7)
        pred = T.Tensor(rng.uniform(0, 1, (4, 4, 3)), requires_grad=True, dtype=np.float64)
        target = rng.uniform(0, 1, (4, 4, 3))

        def loss():
            return charbonnier(pred, target)

        assert check_tensors("charbonnier", loss, {"pred": pred}).passed


class TestEdgeLoss:
    def test_same_constant_images_give_eps(self):
        img = np.full((8, 8, 3), 0.4)
        assert edge_loss(T.Tensor(img, dtype=np.float64), img).item() == 1e-4

    def test_identical_content_gives_eps(self):
        img = rand_image(8)
        assert edge_loss(T.Tensor(img, dtype=np.float64), img).item() == 1e-4

    def test_different_constants_expose_border_laplacian(self):
        # zero padding makes the Laplacian nonzero on the border ring
        a = np.full((8, 8, 3), 0.2)
        b = np.full((8, 8, 3), 0.8)
        assert edge_loss(T.Tensor(a, dtype=np.float64), b).item() > 1e-4

    def test_gradient_wrt_pred(self):
        rng = np.random.default_rng(9)
        pred = T.Tensor(rng.uniform(0, 1, (5, 5, 3)), requires_grad=True, dtype=np.float64)
        target = rng.uniform(0, 1, (5, 5, 3))

        def loss():
            return edge_loss(pred, target)

        res = check_tensors("edge_loss", loss, {"pred": pred})
        assert res.passed and res.max_rel_error <= 1e-4


class TestTotalLoss:
    def test_identical_inputs_anchor(self):
        img = rand_image(10)
        _, report = total_loss(T.Tensor(img, dtype=np.float64), img, lam=0.05)
        assert report.total == 1.05e-4
        assert report.char == 1e-4 and report.edge == 1e-4

    def test_lambda_zero(self):
        a, b = rand_image(11), rand_image(12)
        _, report = total_loss(T.Tensor(a, dtype=np.float64), b, lam=0.0)
        assert report.total == report.char

    def test_monotone_in_components(self):
        a, b = rand_image(13), rand_image(14)
        _, r1 = total_loss(T.Tensor(a, dtype=np.float64), b)
        worse = np.clip(a + 0.2, 0, 1)
        _, r2 = total_loss(T.Tensor(worse, dtype=np.float64), b)
        if r2.char > r1.char and r2.edge >= r1.edge:
            assert r2.total > r1.total

    def test_report_identity(self):
        a, b = rand_image(15), rand_image(16)
        _, report = total_loss(T.Tensor(a, dtype=np.float64), b, lam=0.05)
        assert report.total == report.char + report.lam * report.edge

    def test_gradient_flows_to_pred_only(self):
        rng = np.random.default_rng(17)
        pred = T.Tensor(rng.uniform(0, 1, (4, 4, 3)), requires_grad=True, dtype=np.float64)
        target_t = T.Tensor(rng.uniform(0, 1, (4, 4, 3)), requires_grad=True, dtype=np.float64)
        loss, _ = total_loss(pred, target_t)
        T.backward(loss)
        assert pred.grad is not None
        assert target_t.grad is None


class TestPsnr:
    def test_identical_capped(self):
        img = rand_image(18)
        assert psnr(img, img) == 99.0

    def test_uniform_anchor(self):
        a = np.full((8, 8, 3), 0.5)
        b = np.full((8, 8, 3), 0.6)
        assert psnr(a, b) == pytest.approx(20.0, abs=1e-6)

    def test_symmetric(self):
        a, b = rand_image(19), rand_image(20)
        assert psnr(a, b) == psnr(b, a)

    def test_strictly_decreasing_in_noise(self):
        rng = np.random.default_rng(21)
        base = rand_image(22)
        noise = rng.standard_normal(base.shape)
        values = []
        for amp in (0.01, 0.05, 0.2):
            values.append(psnr(base, np.clip(base + amp * noise, 0, 1)))
        assert values[0] > values[1] > values[2]


class TestSsim:
    def test_identical_is_one(self):
        img = rand_image(23)
        assert ssim(img, img) == pytest.approx(1.0, abs=1e-9)

    def test_constant_zero_vs_one_closed_form(self):
        a = np.zeros((16, 16, 3))
        b = np.ones((16, 16, 3))
        c1 = 0.01 ** 2
        expected = c1 / (1.0 + c1)
        assert ssim(a, b) == pytest.approx(expected, rel=1e-9)

    def test_symmetric(self):
        a, b = rand_image(24), rand_image(25)
        assert ssim(a, b) == pytest.approx(ssim(b, a), rel=1e-12)

    def test_range(self):
        a, b = rand_image(26), rand_image(27)
        assert -1.0 <= ssim(a, b) <= 1.0

    def test_too_small_image_rejected(self):
        with pytest.raises(ValidationError):
            ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))


def test_loss_report_fields():
    report = LossReport(char=0.1, edge=0.2, total=0.11, lam=0.05)
    assert report.lam == 0.05
