"""Metrics: SSIM exactness/symmetry, dense oracle, IS analytic cases."""

import numpy as np
import pytest

from retexture import metrics
from retexture.errors import ParameterError
from retexture.rendering import ImageTensor


def _dense_ssim_oracle(gx, gy):
    """Direct windowed SSIM on a single plane, loop form."""
    win = metrics._gaussian_window(metrics.SSIM_WINDOW, metrics.SSIM_SIGMA)
    c1, c2 = metrics.SSIM_K1**2, metrics.SSIM_K2**2
    n = metrics.SSIM_WINDOW
    h, w = gx.shape
    vals = []
    for r in range(h - n + 1):
        for c in range(w - n + 1):
            # convolution flips the kernel; the Gaussian window is symmetric
            px = gx[r : r + n, c : c + n]
            py = gy[r : r + n, c : c + n]
            mx, my = (win * px).sum(), (win * py).sum()
            vx = (win * px * px).sum() - mx * mx
            vy = (win * py * py).sum() - my * my
            cov = (win * px * py).sum() - mx * my
            vals.append(
                ((2 * mx * my + c1) * (2 * cov + c2))
                / ((mx * mx + my * my + c1) * (vx + vy + c2))
            )
    return float(np.mean(vals))


class TestSSIM:
    def test_self_similarity_exact(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        assert metrics.ssim(x, x.copy()) == 1.0

    def test_symmetry_exact(self, rng):
        for _ in range(5):
            x = rng.uniform(size=(16, 16, 3))
            y = rng.uniform(size=(16, 16, 3))
            assert metrics.ssim(x, y) == metrics.ssim(y, x)

    def test_inverted_binary_negative_matches_oracle(self, rng):
        x = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float64)
        y = 1.0 - x
        got = metrics.ssim(x, y)
        assert got < 0
        assert got == pytest.approx(_dense_ssim_oracle(x, y), abs=1e-12)

    def test_color_matches_per_channel_oracle(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        y = rng.uniform(size=(16, 16, 3))
        expected = np.mean([_dense_ssim_oracle(x[..., c], y[..., c]) for c in range(3)])
        assert metrics.ssim(x, y) == pytest.approx(expected, abs=1e-12)

    def test_range(self, rng):
        for _ in range(10):
            x = rng.uniform(size=(16, 16, 3))
            y = rng.uniform(size=(16, 16, 3))
            assert -1.0 <= metrics.ssim(x, y) <= 1.0

    def test_accepts_image_tensor(self, rng):
        x = ImageTensor(rng.uniform(size=(16, 16, 3)))
        assert metrics.ssim(x, x) == 1.0

    def test_too_small_rejected(self):
        with pytest.raises(ParameterError):
            metrics.ssim(np.zeros((8, 8, 3)), np.zeros((8, 8, 3)))

    def test_dim_mismatch_rejected(self):
        with pytest.raises(ParameterError):
            metrics.ssim(np.zeros((16, 16, 3)), np.zeros((16, 12, 3)))


class TestMaskSSIM:
    def test_full_mask_equals_ssim(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        y = rng.uniform(size=(16, 16, 3))
        assert metrics.mask_ssim(x, y, np.ones((16, 16))) == metrics.ssim(x, y)

    def test_zero_mask_is_one(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        y = rng.uniform(size=(16, 16, 3))
        assert metrics.mask_ssim(x, y, np.zeros((16, 16))) == 1.0

    def test_random_mask_matches_premask_oracle(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        y = rng.uniform(size=(16, 16, 3))
        m = (rng.uniform(size=(16, 16)) > 0.5).astype(np.float64)
        expected = metrics.ssim(x * m[..., None], y * m[..., None])
        assert metrics.mask_ssim(x, y, m) == expected

    def test_mask_dims_checked(self, rng):
        x = rng.uniform(size=(16, 16, 3))
        with pytest.raises(ParameterError):
            metrics.mask_ssim(x, x, np.ones((8, 8)))


def _const_classifier(probs):
    p = np.asarray(probs, dtype=np.float64)
    return lambda img: p


class TestInceptionScore:
    def test_constant_distribution_is_one(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(6)]
        assert metrics.inception_score(imgs, _const_classifier([0.2, 0.3, 0.5])) == 1.0

    def test_distinct_onehots_approach_class_count(self):
        c = 5
        eps = 1e-9
        imgs = [ImageTensor(np.full((16, 16, 3), i / c)) for i in range(c)]

        def classifier(img):
            i = int(round(img.pixels[0, 0, 0] * c))
            p = np.full(c, eps / (c - 1))
            p[i] = 1.0 - eps
            return p

        assert metrics.inception_score(imgs, classifier) == pytest.approx(c, abs=1e-3)

    def test_duplicated_list_splits_two_equals_one(self, rng):
        imgs = [ImageTensor(np.full((16, 16, 3), v)) for v in (0.1, 0.4, 0.7)]

        def classifier(img):
            v = img.pixels[0, 0, 0]
            p = np.array([v, 1.0 - v])
            return p / p.sum()

        s1 = metrics.inception_score(imgs, classifier, splits=1)
        s2 = metrics.inception_score(imgs + imgs, classifier, splits=2)
        assert s2 == pytest.approx(s1, abs=1e-12)

    def test_at_least_one(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(8)]

        def classifier(img):
            p = np.abs(img.pixels[0, 0]) + 1e-3
            return p / p.sum()

        assert metrics.inception_score(imgs, classifier) >= 1.0

    def test_empty_rejected(self):
        with pytest.raises(ParameterError):
            metrics.inception_score([], _const_classifier([1.0]))

    def test_bad_splits_rejected(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(5)]
        with pytest.raises(ParameterError):
            metrics.inception_score(imgs, _const_classifier([1.0]), splits=2)
        with pytest.raises(ParameterError):
            metrics.inception_score(imgs, _const_classifier([1.0]), splits=0)


class TestMaskIS:
    def test_full_masks_equal_is(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(4)]
        masks = [np.ones((16, 16))] * 4

        def classifier(img):
            p = img.pixels.mean(axis=(0, 1)) + 1e-3
            return p / p.sum()

        assert metrics.mask_is(imgs, masks, classifier) == pytest.approx(
            metrics.inception_score(imgs, classifier), abs=1e-12
        )

    def test_zero_masks_give_one(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(4)]
        masks = [np.zeros((16, 16))] * 4

        def classifier(img):
            p = img.pixels.mean(axis=(0, 1)) + 1e-3
            return p / p.sum()

        assert metrics.mask_is(imgs, masks, classifier) == pytest.approx(1.0, abs=1e-12)

    def test_matches_premasked_oracle(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(4)]
        masks = [(rng.uniform(size=(16, 16)) > 0.5).astype(np.float64) for _ in range(4)]

        def classifier(img):
            p = img.pixels.mean(axis=(0, 1)) + 1e-3
            return p / p.sum()

        pre = [ImageTensor(i.pixels * m[..., None]) for i, m in zip(imgs, masks)]
        assert metrics.mask_is(imgs, masks, classifier) == pytest.approx(
            metrics.inception_score(pre, classifier), abs=1e-12
        )

    def test_count_mismatch_rejected(self, rng):
        imgs = [ImageTensor(rng.uniform(size=(16, 16, 3))) for _ in range(3)]
        with pytest.raises(ParameterError):
            metrics.mask_is(imgs, [np.ones((16, 16))] * 2, _const_classifier([1.0]))


class TestMetricReport:
    def test_fields(self):
        r = metrics.MetricReport(0.5, 0.6, 1.5, 1.2, 10)
        assert r.n_images == 10

    def test_nonpositive_count_rejected(self):
        with pytest.raises(ParameterError):
            metrics.MetricReport(0.5, 0.6, 1.5, 1.2, 0)
