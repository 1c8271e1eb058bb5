"""core/mixing.py のテスト

テスト対象:
  - make_linear_mixing / make_mlp_mixing: 構築と性質
  - render_balls: ボール画像の描画と棄却
  - apply_mixing: 行ごとの適用
  - sample_environment: 画像の棄却サンプリング
"""

from __future__ import annotations

import numpy as np
import pytest

from core.mixing import (
    BALL_COLORS,
    MixingError,
    apply_mixing,
    invert_linear_mixing,
    lipschitz_bound,
    make_image_mixing,
    make_linear_mixing,
    make_mixing,
    make_mlp_mixing,
    mixing_jacobian,
    render_balls,
    sample_environment,
    save_preview,
)
from core.scm import sample_family
from utils.rng import make_rng

# ── 線形混合 ─────────────────────────────────────────────────────────────────


class TestLinearMixing:
    def test_scalar(self):
        f = make_linear_mixing(1, 1, make_rng(0))
        a = f.matrix[0, 0]
        assert a != 0
        X, _ = apply_mixing(f, np.array([[2.0]]))
        assert X[0, 0] == 2.0 * a

    def test_full_column_rank(self):
        f = make_linear_mixing(5, 10, make_rng(1))
        assert f.matrix.shape == (10, 5)
        assert np.linalg.svd(f.matrix, compute_uv=False).min() > 0

    def test_column_norm_mean(self):
        """d'=100 の列ノルムの平均 ≈ 10"""
        rng = make_rng(2)
        norms = [np.linalg.norm(make_linear_mixing(1, 100, rng).matrix) for _ in range(1000)]
        assert abs(np.mean(norms) - 10.0) < 0.3

    def test_rejects_d_prime_below_d(self):
        with pytest.raises(MixingError):
            make_linear_mixing(3, 2, make_rng(0))

    def test_matrix_product(self, rng):
        f = make_linear_mixing(3, 6, rng)
        Z = rng.standard_normal((20, 3))
        X, rejected = apply_mixing(f, Z)
        np.testing.assert_allclose(X, Z @ f.matrix.T)
        assert rejected.size == 0

    def test_pseudo_inverse(self, rng):
        f = make_linear_mixing(3, 6, rng)
        Z = rng.standard_normal((20, 3))
        X, _ = apply_mixing(f, Z)
        np.testing.assert_allclose(X @ invert_linear_mixing(f).T, Z, atol=1e-10)


# ── MLP 混合 ─────────────────────────────────────────────────────────────────


class TestMlpMixing:
    def test_architecture(self):
        f = make_mlp_mixing(5, 20, make_rng(0))
        shapes = [W.shape for W, _b in f.layers]
        assert shapes == [(512, 5), (512, 512), (512, 512), (20, 512)]
        assert all(np.all(b == 0) for _W, b in f.layers)

    def test_weight_bounds(self):
        f = make_mlp_mixing(5, 20, make_rng(0))
        for W, _b in f.layers:
            assert np.abs(W).max() <= 1.0 / np.sqrt(W.shape[1])

    def test_zero_maps_to_zero(self):
        f = make_mlp_mixing(4, 10, make_rng(1))
        X, _ = apply_mixing(f, np.zeros((1, 4)))
        np.testing.assert_array_equal(X, np.zeros((1, 10)))

    def test_local_injectivity(self):
        """ランダムな 100 点でヤコビアンがランク d"""
        f = make_mlp_mixing(5, 20, make_rng(3))
        rng = make_rng(4)
        for z in rng.standard_normal((100, 5)):
            assert np.linalg.svd(mixing_jacobian(f, z), compute_uv=False).min() > 1e-6

    def test_jacobian_matches_finite_differences(self):
        f = make_mlp_mixing(3, 8, make_rng(5))
        z = np.array([0.3, -0.7, 1.1])
        eps = 1e-6
        fd = np.empty((8, 3))
        for k in range(3):
            e = np.zeros(3)
            e[k] = eps
            plus, _ = apply_mixing(f, (z + e)[None])
            minus, _ = apply_mixing(f, (z - e)[None])
            fd[:, k] = (plus[0] - minus[0]) / (2 * eps)
        np.testing.assert_allclose(mixing_jacobian(f, z), fd, atol=1e-6)

    def test_lipschitz_bound(self):
        f = make_mlp_mixing(4, 12, make_rng(6))
        L = lipschitz_bound(f)
        rng = make_rng(7)
        z = rng.standard_normal((200, 4))
        delta = 0.1 * rng.standard_normal((200, 4))
        a, _ = apply_mixing(f, z + delta)
        b, _ = apply_mixing(f, z)
        assert np.all(np.linalg.norm(a - b, axis=1) <= L * np.linalg.norm(delta, axis=1) + 1e-12)

    @pytest.mark.parametrize('variant', ['linear', 'mlp'])
    def test_no_collisions(self, variant):
        """異なる z が同じ観測に写らない"""
        f = make_mixing(variant, 3, 9, make_rng(8))
        rng = make_rng(9)
        z1 = rng.standard_normal((10_000, 3))
        z2 = rng.standard_normal((10_000, 3))
        x1, _ = apply_mixing(f, z1)
        x2, _ = apply_mixing(f, z2)
        assert not np.any(np.all(x1 == x2, axis=1))

    def test_deterministic(self):
        a = make_mlp_mixing(3, 6, make_rng(10))
        b = make_mlp_mixing(3, 6, make_rng(10))
        z = np.ones((2, 3))
        np.testing.assert_array_equal(apply_mixing(a, z)[0], apply_mixing(b, z)[0])


# ── 画像混合 ─────────────────────────────────────────────────────────────────


class TestRenderBalls:
    def test_center_pixel(self):
        """z = (0, 0) → 中心 (32, 32) の円"""
        f = make_image_mixing(2)
        img = render_balls(np.zeros(2), f)
        assert img.shape == (64, 64, 3)
        red = np.all(img == np.array(BALL_COLORS[0]) / 255.0, axis=2)
        ys, xs = np.nonzero(red)
        assert (ys.mean(), xs.mean()) == (32.0, 32.0)

    def test_outside_frame_rejected(self):
        """z = (0.6, 0) → 中心列 70 で棄却"""
        f = make_image_mixing(2)
        assert render_balls(np.array([0.6, 0.0]), f) is None

    def test_two_disjoint_disks(self):
        f = make_image_mixing(4)
        img = render_balls(np.array([-0.25, -0.25, 0.25, 0.25]), f)
        r = f.radius
        for color in BALL_COLORS[:2]:
            count = int(np.all(img == np.array(color) / 255.0, axis=2).sum())
            assert abs(count - np.pi * r * r) <= 2 * r

    def test_values_are_palette_only(self):
        f = make_image_mixing(4)
        img = render_balls(np.array([-0.1, 0.2, 0.15, -0.2]), f)
        palette = {(0, 0, 0)} | set(BALL_COLORS[:2])
        values = {tuple(int(c) for c in px) for px in (img * 255).reshape(-1, 3).round()}
        assert values <= palette

    def test_pixel_count_translation_invariant(self):
        f = make_image_mixing(2)
        a = render_balls(np.array([0.0, 0.0]), f)
        b = render_balls(np.array([0.2, -0.3]), f)
        assert np.count_nonzero(a.sum(axis=2)) == np.count_nonzero(b.sum(axis=2))

    def test_odd_dimension_rejected(self):
        with pytest.raises(MixingError):
            make_image_mixing(3)


class TestApplyImageMixing:
    def test_rejected_rows_reported(self):
        f = make_image_mixing(2)
        Z = np.array([[0.0, 0.0], [0.6, 0.0], [0.1, 0.1]])
        X, rejected = apply_mixing(f, Z)
        assert X.shape == (2, 64 * 64 * 3)
        assert rejected.tolist() == [1]

    def test_dimension_mismatch(self):
        with pytest.raises(MixingError):
            apply_mixing(make_image_mixing(2), np.zeros((3, 4)))

    def test_rejection_rate_small_variance(self):
        """σ² ∈ [0.01, 0.02] の潜在変数では棄却率 20% 未満"""
        family = sample_family(4, 0, make_rng(1), variance_obs=(0.01, 0.02),
                               variance_int=(0.01, 0.02), shift_range=(0.1, 0.2))
        f = make_image_mixing(4)
        sample = sample_environment(family, f, 0, 2000, make_rng(2))
        assert sample.X.shape == (2000, f.d_prime)
        assert sample.X.dtype == np.uint8
        assert sample.rejected / (2000 + sample.rejected) < 0.2

    def test_kept_latents_match_images(self):
        family = sample_family(2, 1, make_rng(3), variance_obs=(0.01, 0.02),
                               variance_int=(0.01, 0.02), shift_range=(0.1, 0.2))
        f = make_image_mixing(2)
        sample = sample_environment(family, f, 1, 50, make_rng(4))
        X, _ = apply_mixing(f, sample.Z, as_uint8=True)
        np.testing.assert_array_equal(X, sample.X)

    def test_save_preview(self, tmp_path):
        f = make_image_mixing(2)
        X, _ = apply_mixing(f, np.zeros((3, 2)), as_uint8=True)
        path = save_preview(X, f, str(tmp_path / 'preview.png'))
        assert (tmp_path / 'preview.png').exists()
        assert path.endswith('preview.png')
