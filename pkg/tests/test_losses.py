"""Loss zoo: pinned hand-computed values, oracles, and gradient checks."""

import numpy as np
import pytest
import torch

from retexture import losses
from retexture.errors import ConfigError, ParameterError
from retexture.rendering import Texture


def _finite_diff_check(fn, x0, rel_tol=1e-3, h=1e-5, n_probe=8):
    """Compare autograd gradient of fn at x0 against central differences."""
    x = x0.clone().double().requires_grad_(True)
    loss = fn(x)
    loss.backward()
    grad = x.grad.detach()
    rng = np.random.default_rng(0)
    flat = x0.reshape(-1)
    checked = 0
    for idx in rng.choice(flat.numel(), size=min(n_probe, flat.numel()), replace=False):
        idx = int(idx)
        xp = x0.clone().double().reshape(-1)
        xm = xp.clone()
        xp[idx] += h
        xm[idx] -= h
        fd = (fn(xp.reshape(x0.shape)) - fn(xm.reshape(x0.shape))).item() / (2 * h)
        g = grad.reshape(-1)[idx].item()
        if abs(fd) < 1e-9 and abs(g) < 1e-9:
            continue
        assert abs(fd - g) / max(abs(fd), abs(g)) < rel_tol
        checked += 1
    assert checked > 0


class TestWeightsAndTypes:
    def test_defaults(self):
        w = losses.LossWeights()
        assert w.lambda_reid == 5e3
        assert w.lambda_face == 1.0

    def test_negative_weight_rejected(self):
        with pytest.raises(ParameterError):
            losses.LossWeights(lambda_reid=-1.0)

    def test_nan_weight_rejected(self):
        with pytest.raises(ParameterError):
            losses.LossWeights(lambda_face=float("nan"))

    def test_negative_margin_rejected(self):
        with pytest.raises(ParameterError):
            losses.TripletMargin(-0.1)

    def test_reference_mask_dims_checked(self):
        tex = Texture(np.zeros((4, 4, 3)))
        with pytest.raises(ParameterError):
            losses.ReferenceTexture(tex, np.zeros((3, 4)))


class TestReidLoss:
    def test_identical_stacks_zero(self, rng):
        fx = [rng.normal(size=(2, 3, 4)) for _ in range(4)]
        assert float(losses.reid_loss(fx, [f.copy() for f in fx])) == 0.0

    def test_three_four_five(self):
        fx = [np.zeros(4)]
        fy = [np.array([3.0, 4.0, 0.0, 0.0])]
        assert float(losses.reid_loss(fx, fy)) == pytest.approx(5.0, abs=1e-12)

    def test_matches_flatten_norm_oracle(self, rng):
        fx = [rng.normal(size=(3, 5)) for _ in range(4)]
        fy = [rng.normal(size=(3, 5)) for _ in range(4)]
        expected = sum(np.linalg.norm((a - b).ravel()) for a, b in zip(fx, fy))
        assert float(losses.reid_loss(fx, fy)) == pytest.approx(expected, abs=1e-9)

    def test_symmetric(self, rng):
        fx = [rng.normal(size=(2, 2)) for _ in range(4)]
        fy = [rng.normal(size=(2, 2)) for _ in range(4)]
        assert float(losses.reid_loss(fx, fy)) == pytest.approx(
            float(losses.reid_loss(fy, fx)), abs=1e-12
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            losses.reid_loss([np.zeros(3)], [np.zeros(4)])
        with pytest.raises(ParameterError):
            losses.reid_loss([np.zeros(3)], [np.zeros(3), np.zeros(3)])

    def test_gradient(self, rng):
        fx = [torch.tensor(rng.normal(size=(2, 3))) for _ in range(2)]
        y0 = torch.tensor(rng.normal(size=(2, 2, 3)))
        _finite_diff_check(lambda y: losses.reid_loss(fx, [y[0], y[1]]), y0)


class TestFaceLoss:
    def test_equal_everywhere_zero(self, rng):
        px = rng.uniform(0, 1, size=(4, 4, 3))
        ref = losses.ReferenceTexture(Texture(px), np.ones((4, 4)))
        assert float(losses.face_loss(Texture(px.copy()), ref)) == 0.0

    def test_zero_mask_zero(self, rng):
        ref = losses.ReferenceTexture(
            Texture(rng.uniform(0, 1, size=(4, 4, 3))), np.zeros((4, 4))
        )
        t = Texture(rng.uniform(0, 1, size=(4, 4, 3)))
        assert float(losses.face_loss(t, ref)) == 0.0

    def test_hand_sum_is_1_5(self):
        # difference [[0.5,-0.5],[0,1]] in one channel, mask [[1,0],[0,1]]
        delta = np.array([[0.5, -0.5], [0.0, 1.0]])
        mask = np.array([[1, 0], [0, 1]])
        base = np.full((2, 2, 3), 0.0)
        t = base.copy()
        t[..., 0] = np.clip(delta, 0, 1)
        t[1, 1, 0] = 1.0
        t[0, 1, 0] = 0.0  # -0.5 is masked out anyway; keep pixels in range
        ref = losses.ReferenceTexture(Texture(base), mask)
        assert float(losses.face_loss(Texture(t), ref)) == pytest.approx(1.5, abs=1e-9)

    def test_dim_mismatch_rejected(self):
        ref = losses.ReferenceTexture(Texture(np.zeros((4, 4, 3))), np.ones((4, 4)))
        with pytest.raises(ParameterError):
            losses.face_loss(Texture(np.zeros((2, 2, 3))), ref)

    def test_gradient(self, rng):
        mask = (rng.uniform(size=(4, 4)) > 0.5).astype(float)
        ref = losses.ReferenceTexture(Texture(rng.uniform(0.3, 0.7, size=(4, 4, 3))), mask)
        t0 = torch.tensor(rng.uniform(0, 1, size=(4, 4, 3)))
        _finite_diff_check(lambda t: losses.face_loss(t, ref), t0)


class TestPixelL1:
    def test_identical_zero(self, rng):
        x = rng.uniform(size=(8, 8, 3))
        assert float(losses.pixel_l1_loss(x, x.copy())) == 0.0

    def test_single_pixel_quarter(self):
        x = np.zeros((8, 8, 3))
        y = x.copy()
        y[3, 5, 1] = 0.25
        assert float(losses.pixel_l1_loss(x, y)) == pytest.approx(0.25, abs=1e-12)

    def test_elementwise_oracle(self, rng):
        x = rng.uniform(size=(6, 6, 3))
        y = rng.uniform(size=(6, 6, 3))
        assert float(losses.pixel_l1_loss(x, y)) == pytest.approx(
            np.abs(x - y).sum(), abs=1e-9
        )

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            losses.pixel_l1_loss(np.zeros((4, 4, 3)), np.zeros((4, 5, 3)))

    def test_gradient(self, rng):
        x = torch.tensor(rng.uniform(size=(4, 4, 3)))
        y0 = torch.tensor(rng.uniform(size=(4, 4, 3)))
        _finite_diff_check(lambda y: losses.pixel_l1_loss(x, y), y0)


class TestPerceptualLoss:
    @staticmethod
    def _extractor(x):
        t = x if isinstance(x, torch.Tensor) else torch.as_tensor(np.asarray(x))
        return [t * (i + 1) for i in range(5)]

    def test_identical_zero(self, rng):
        x = rng.uniform(size=(3, 3))
        assert float(losses.perceptual_loss(self._extractor, x, x.copy())) == 0.0

    def test_matches_reid_formula_on_taps(self, rng):
        x = rng.uniform(size=(3, 3))
        y = rng.uniform(size=(3, 3))
        expected = float(losses.reid_loss(self._extractor(x), self._extractor(y)))
        assert float(losses.perceptual_loss(self._extractor, x, y)) == pytest.approx(
            expected, abs=1e-12
        )

    def test_flatten_norm_oracle(self, rng):
        x = rng.uniform(size=(3, 3))
        y = rng.uniform(size=(3, 3))
        expected = sum(np.linalg.norm(((i + 1) * (x - y)).ravel()) for i in range(5))
        assert float(losses.perceptual_loss(self._extractor, x, y)) == pytest.approx(
            expected, abs=1e-9
        )

    def test_symmetric(self, rng):
        x = rng.uniform(size=(3, 3))
        y = rng.uniform(size=(3, 3))
        assert float(losses.perceptual_loss(self._extractor, x, y)) == pytest.approx(
            float(losses.perceptual_loss(self._extractor, y, x)), abs=1e-12
        )

    def test_wrong_tap_count_rejected(self):
        with pytest.raises(ConfigError):
            losses.perceptual_loss(lambda x: [x] * 4, np.zeros((2, 2)), np.zeros((2, 2)))

    def test_gradient(self, rng):
        x = torch.tensor(rng.uniform(size=(3, 3)))
        y0 = torch.tensor(rng.uniform(size=(3, 3)))
        _finite_diff_check(lambda y: losses.perceptual_loss(self._extractor, x, y), y0)


class TestSoftmaxLoss:
    def test_equal_logits_attain_entropy(self, rng):
        gs = rng.normal(size=(6, 8))
        probs = torch.softmax(torch.tensor(gs), dim=-1).numpy()
        entropy = -(probs * np.log(probs)).sum()
        assert float(losses.softmax_loss(gs, gs.copy())) == pytest.approx(entropy, abs=1e-9)

    def test_uniform_vs_onehot_is_ln2(self):
        gs_x = np.array([[100.0, -100.0]])  # target effectively (1, 0)
        gs_y = np.array([[0.0, 0.0]])
        assert float(losses.softmax_loss(gs_y, gs_x)) == pytest.approx(np.log(2), abs=1e-6)

    def test_matches_direct_oracle(self, rng):
        gs_x = rng.normal(size=(3, 4))
        gs_y = rng.normal(size=(3, 4))
        q = torch.softmax(torch.tensor(gs_x), dim=-1).numpy()
        p = torch.log_softmax(torch.tensor(gs_y), dim=-1).numpy()
        assert float(losses.softmax_loss(gs_y, gs_x)) == pytest.approx(
            -(q * p).sum(), abs=1e-9
        )

    def test_at_least_target_entropy(self, rng):
        gs_x = rng.normal(size=(4, 5))
        gs_y = rng.normal(size=(4, 5))
        q = torch.softmax(torch.tensor(gs_x), dim=-1).numpy()
        entropy = -(q * np.log(q)).sum()
        assert float(losses.softmax_loss(gs_y, gs_x)) >= entropy - 1e-9

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            losses.softmax_loss(np.zeros((2, 3)), np.zeros((2, 4)))

    def test_gradient(self, rng):
        gs_x = torch.tensor(rng.normal(size=(2, 3)))
        y0 = torch.tensor(rng.normal(size=(2, 3)))
        _finite_diff_check(lambda y: losses.softmax_loss(y, gs_x), y0)


class TestTripletHardLoss:
    def test_hinge_inactive(self, rng):
        y = rng.normal(size=(2, 4))
        n = y + np.sqrt(10.0 / y.size)  # ||y - n||^2 = 10
        v = float(losses.triplet_hard_loss(y, y.copy(), n, losses.TripletMargin(1.0)))
        assert v == 0.0

    def test_direct_formula_3_3(self):
        y = np.zeros(4)
        p = np.array([2.0, 0.0, 0.0, 0.0])  # d_pos = 4
        n = np.array([1.0, 0.0, 0.0, 0.0])  # d_neg = 1
        v = float(losses.triplet_hard_loss(y, p, n, losses.TripletMargin(0.3)))
        assert v == pytest.approx(3.3, abs=1e-9)

    def test_zero_margin_p_equals_n(self, rng):
        y = rng.normal(size=(3,))
        pn = rng.normal(size=(3,))
        v = float(losses.triplet_hard_loss(y, pn, pn.copy(), losses.TripletMargin(0.0)))
        assert v == 0.0

    def test_translation_invariance(self, rng):
        y, p, n = (rng.normal(size=(2, 3)) for _ in range(3))
        c = rng.normal(size=(2, 3))
        m = losses.TripletMargin(0.3)
        assert float(losses.triplet_hard_loss(y, p, n, m)) == pytest.approx(
            float(losses.triplet_hard_loss(y + c, p + c, n + c, m)), abs=1e-9
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            losses.triplet_hard_loss(
                np.zeros(3), np.zeros(4), np.zeros(3), losses.TripletMargin()
            )

    def test_gradient(self, rng):
        p = torch.tensor(rng.normal(size=(4,)))
        n = torch.tensor(rng.normal(size=(4,)))
        y0 = torch.tensor(rng.normal(size=(4,)))
        m = losses.TripletMargin(5.0)  # keep the hinge active
        _finite_diff_check(lambda y: losses.triplet_hard_loss(y, p, n, m), y0)


class _PF:
    def __init__(self, g1, g2):
        self.g1, self.g2 = g1, g2


class TestDeepFeatureLoss:
    def test_identical_zero(self, rng):
        pf = _PF(rng.normal(size=(6, 8)), rng.normal(size=(6, 4)))
        assert float(losses.deep_feature_loss(pf, _PF(pf.g1.copy(), pf.g2.copy()))) == 0.0

    def test_hand_sum_2_plus_3(self):
        a = _PF(np.zeros((1, 4)), np.zeros((1, 3)))
        b = _PF(np.array([[0.5, -0.5, 1.0, 0.0]]), np.array([[1.0, -1.0, 1.0]]))
        assert float(losses.deep_feature_loss(a, b)) == pytest.approx(5.0, abs=1e-12)

    def test_concatenate_oracle(self, rng):
        a = _PF(rng.normal(size=(6, 8)), rng.normal(size=(6, 4)))
        b = _PF(rng.normal(size=(6, 8)), rng.normal(size=(6, 4)))
        cat_a = np.concatenate([a.g1.ravel(), a.g2.ravel()])
        cat_b = np.concatenate([b.g1.ravel(), b.g2.ravel()])
        assert float(losses.deep_feature_loss(a, b)) == pytest.approx(
            np.abs(cat_b - cat_a).sum(), abs=1e-9
        )

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            losses.deep_feature_loss(
                _PF(np.zeros((2, 3)), np.zeros((2, 2))),
                _PF(np.zeros((2, 4)), np.zeros((2, 2))),
            )

    def test_gradient(self, rng):
        a = _PF(torch.tensor(rng.normal(size=(2, 3))), torch.tensor(rng.normal(size=(2, 2))))
        y0 = torch.tensor(rng.normal(size=(2, 5)))
        _finite_diff_check(
            lambda y: losses.deep_feature_loss(a, _PF(y[:, :3], y[:, 3:])), y0
        )


class TestTotalLoss:
    def test_zero(self):
        assert float(losses.total_loss(0.0, 0.0)) == 0.0

    def test_default_weights_value(self):
        assert float(losses.total_loss(0.002, 1.0)) == pytest.approx(11.0, abs=1e-9)

    def test_reid_weight_linearity(self):
        base = float(losses.total_loss(0.5, 0.0, losses.LossWeights(1e3, 1.0)))
        double = float(losses.total_loss(0.5, 0.0, losses.LossWeights(2e3, 1.0)))
        assert double == pytest.approx(2 * base, abs=1e-9)

    def test_scaling_both_weights_scales_objective(self):
        w1 = losses.LossWeights(5e3, 1.0)
        w2 = losses.LossWeights(1e4, 2.0)
        assert float(losses.total_loss(0.3, 0.7, w2)) == pytest.approx(
            2 * float(losses.total_loss(0.3, 0.7, w1)), abs=1e-9
        )
