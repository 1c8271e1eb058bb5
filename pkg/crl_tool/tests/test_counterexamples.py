"""core/counterexamples.py のテスト

テスト対象:
  - energy_distance_test: 二標本置換検定
  - linear_fit_residual: アフィン近似の残差
  - uniform_counterexample_map: 一様分布の反例写像
  - shift_counterexample: 純粋シフト介入の反例
  - certify: 反例ごとの認証レポート
"""

from __future__ import annotations

import numpy as np
import pytest

from core.counterexamples import (
    CounterexampleError,
    certify,
    chain_matrix,
    energy_distance_test,
    linear_fit_residual,
    psi,
    shift_counterexample,
    shift_example_family,
    uniform_counterexample_map,
)
from core.mixing import make_mixing


class TestEnergyDistanceTest:
    def test_identical_samples(self, rng):
        a = rng.standard_normal((200, 2))
        result = energy_distance_test(a, a.copy(), 50, seed=1)
        assert result.p_value == 1.0
        assert result.statistic == pytest.approx(0.0, abs=1e-12)

    def test_shifted_means(self, rng):
        a = rng.standard_normal(300)
        b = rng.standard_normal(300) + 3.0
        result = energy_distance_test(a, b, 1000, seed=2)
        assert result.p_value < 0.001

    def test_deterministic(self, rng):
        a, b = rng.standard_normal((100, 2)), rng.standard_normal((100, 2))
        assert energy_distance_test(a, b, 30, seed=5) == energy_distance_test(a, b, 30, seed=5)

    def test_subsamples_large_inputs(self, rng):
        a, b = rng.standard_normal((400, 1)), rng.standard_normal((300, 1))
        result = energy_distance_test(a, b, 10, max_points=100)
        assert (result.n_a, result.n_b) == (100, 100)

    def test_logs_subsampling(self, rng, caplog):
        a, b = rng.standard_normal((50, 1)), rng.standard_normal((30, 1))
        with caplog.at_level('INFO', logger='core.counterexamples'):
            energy_distance_test(a, b, 5, max_points=20)
        assert '間引きます' in caplog.text

    def test_rejects_nonpositive_cap(self, rng):
        with pytest.raises(CounterexampleError):
            energy_distance_test(rng.standard_normal(5), rng.standard_normal(5), max_points=0)

    def test_dimension_mismatch(self, rng):
        with pytest.raises(CounterexampleError):
            energy_distance_test(rng.standard_normal((5, 2)), rng.standard_normal((5, 3)))

    @pytest.mark.slow
    def test_calibrated_under_null(self):
        """同一分布なら p < 0.05 となる割合はおよそ 5%"""
        rng = np.random.default_rng(0)
        rejections = sum(
            energy_distance_test(rng.standard_normal((100, 2)), rng.standard_normal((100, 2)),
                                 200, seed=s).p_value < 0.05
            for s in range(200)
        )
        assert rejections <= 20


class TestLinearFitResidual:
    def test_affine_map(self, rng):
        Z = rng.standard_normal((100, 2))
        hz = Z @ np.array([[1.0, 2.0], [-0.5, 3.0]]).T + 4.0
        assert linear_fit_residual(Z, hz) < 1e-10

    def test_nonlinear_map(self, rng):
        Z = rng.standard_normal((500, 2))
        assert linear_fit_residual(Z, Z ** 2) > 0.1


class TestUniformMap:
    def test_inner_region(self):
        np.testing.assert_allclose(uniform_counterexample_map(np.array([0.5, 0.5])), [0.5, 1.0])

    def test_outer_region(self):
        np.testing.assert_array_equal(uniform_counterexample_map(np.array([0.5, 2.8])), [0.5, 2.8])

    def test_psi_bounds(self):
        t = np.linspace(-4, 4, 8001)
        values = psi(t)
        assert values.max() == 1.0 and values.min() == 0.0
        assert np.abs(np.diff(values) / np.diff(t)).max() <= 8 / 9 + 1e-6

    @pytest.mark.parametrize('t0', [1.0, 2.5, -1.0, -2.5])
    def test_smooth_at_breakpoints(self, t0):
        """区間の境目の両側で 1 階・2 階差分がともにほぼ 0"""
        h = 1e-4
        for t in (t0 - 1e-3, t0 + 1e-3):
            first = (psi(t + h) - psi(t - h)) / (2 * h)
            second = (psi(t + h) - 2 * psi(t) + psi(t - h)) / h ** 2
            assert abs(first) < 1e-6
            assert abs(second) < 1e-3

    def test_second_difference_continuous(self):
        """2 階差分が遷移区間全体で跳ばない"""
        h = 1e-3
        t = np.arange(0.5, 3.0, h)
        second = np.diff(psi(t), 2) / h ** 2
        assert np.abs(np.diff(second)).max() < 0.5

    def test_monotone_in_second_coordinate(self):
        z2 = np.linspace(-3, 3, 601)
        for z1 in (-1.0, -0.3, 0.7, 1.0):
            out = uniform_counterexample_map(np.column_stack([np.full_like(z2, z1), z2]))
            assert np.all(np.diff(out[:, 1]) > 0)


class TestShiftCounterexample:
    def test_pathwise_equal(self, rng):
        family = shift_example_family()
        example = shift_counterexample(family, chain_matrix(3), make_mixing('mlp', 3, 6, rng))
        eps = rng.standard_normal((1000, 3))
        assert example.pathwise_difference(eps) < 1e-9
        assert example.graph_distance() > 0
        np.testing.assert_allclose(example.alternate.B, chain_matrix(3))

    def test_rejects_perfect_interventions(self, chain_family, rng):
        with pytest.raises(CounterexampleError):
            shift_counterexample(chain_family, np.eye(2), make_mixing('linear', 2, 2, rng))

    def test_rejects_cyclic_matrix(self, rng):
        B_alt = np.array([[1.0, 0.5, 0.0], [0.5, 1.0, 0.0], [0.0, 0.0, 1.0]])
        with pytest.raises(CounterexampleError):
            shift_counterexample(shift_example_family(), B_alt, make_mixing('linear', 3, 3, rng))

    def test_rejects_nonpositive_diagonal(self, rng):
        B_alt = np.diag([1.0, 0.0, 1.0])
        with pytest.raises(CounterexampleError):
            shift_counterexample(shift_example_family(), B_alt, make_mixing('linear', 3, 3, rng))


class TestCertify:
    def test_unknown(self):
        with pytest.raises(CounterexampleError):
            certify('spiral')

    def test_report_shape(self):
        report = certify('shift', seed=0, n=2000, permutations=20)
        assert report['passed']
        assert {c['name'] for c in report['checks']} >= {'経路ごとの最大差', 'グラフ間の SHD'}
        assert report['certified']

    def test_records_points_used(self):
        """分布の検定に実際に使った点数を報告する"""
        report = certify('rotation', seed=0, n=2000, permutations=20, max_points=500)
        assert report['max_points'] == 500
        assert report['n_used'] == 500
        tested = [c for c in report['checks'] if 'n_used' in c]
        assert tested and all(c['n_used'] == [500, 500] for c in tested)

    def test_small_n_uses_every_point(self):
        report = certify('rotation', seed=0, n=300, permutations=20)
        assert report['n_used'] == 300

    def test_uniform_lists_uncertified_environment(self):
        report = certify('uniform', seed=0, n=2000, permutations=50)
        assert report['passed']
        assert report['not_certified']

    @pytest.mark.slow
    @pytest.mark.parametrize('which', ['rotation', 'pair-flow', 'do-flow', 'shift', 'uniform'])
    def test_full_size(self, which):
        report = certify(which, seed=0)
        assert report['passed'], report['checks']
