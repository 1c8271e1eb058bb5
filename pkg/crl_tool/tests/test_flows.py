"""core/flows.py のテスト

テスト対象:
  - radial_bump / rk4 / radius_rotation: 基本部品
  - gaussian_pair_flow: 2 つのガウス分布を保つフロー
  - do_intervention_flow: 座標軸を固定するフロー
"""

from __future__ import annotations

import numpy as np
import pytest

from core.flows import (
    FlowError,
    FlowSpec,
    do_intervention_flow,
    gaussian_pair_flow,
    radial_bump,
    radius_rotation,
    rk4,
)


def _angle(r):
    return np.pi * (1.0 - np.exp(-r * r))


class TestRadialBump:
    def test_zero_outside_support(self):
        r = np.array([0.0, 0.5, 1.5, 2.0])
        np.testing.assert_array_equal(radial_bump(r, 0.5, 1.5), np.zeros(4))

    def test_peak_at_midpoint(self):
        assert radial_bump(np.array([1.0]), 0.5, 1.5, 0.2)[0] == pytest.approx(0.2)


class TestRk4:
    def test_zero_time_is_identity(self, rng):
        Y = rng.standard_normal((10, 2))
        np.testing.assert_array_equal(rk4(lambda y: y, Y, 0.0), Y)

    def test_linear_ode(self):
        """dy/dt = y → y(1) = e"""
        out = rk4(lambda y: y, np.ones((1, 1)), 1.0, 1e-2)
        assert out[0, 0] == pytest.approx(np.e, rel=1e-9)


class TestRadiusRotation:
    def test_origin_fixed(self):
        np.testing.assert_array_equal(radius_rotation(np.zeros(2), _angle), np.zeros(2))

    def test_norm_preserved(self, rng):
        Z = rng.standard_normal((500, 2))
        out = radius_rotation(Z, _angle)
        np.testing.assert_allclose(np.linalg.norm(out, axis=1), np.linalg.norm(Z, axis=1),
                                   atol=1e-12)

    def test_rejects_three_dimensions(self):
        with pytest.raises(FlowError):
            radius_rotation(np.zeros((4, 3)), _angle)


class TestFlowSpec:
    def test_unknown_variant(self):
        with pytest.raises(FlowError):
            FlowSpec('spiral')

    def test_step_too_large(self):
        with pytest.raises(FlowError):
            FlowSpec('gaussian_pair', step=0.05)

    def test_bad_support(self):
        with pytest.raises(FlowError):
            FlowSpec('gaussian_pair', r0=1.5, r1=0.5)


class TestGaussianPairFlow:
    @pytest.fixture
    def flow(self):
        return gaussian_pair_flow(np.eye(2), 2.0 * np.eye(2), FlowSpec('gaussian_pair'))

    def test_identity_at_zero_time(self, rng):
        h = gaussian_pair_flow(np.eye(2), 2.0 * np.eye(2), FlowSpec('gaussian_pair', t=0.0))
        Z = rng.standard_normal((20, 2))
        np.testing.assert_allclose(h(Z), Z, atol=1e-12)

    def test_inverse(self, flow, rng):
        Z = rng.standard_normal((200, 2))
        assert np.abs(flow.inverse(flow(Z)) - Z).max() < 1e-6

    def test_moves_points_in_annulus(self, flow):
        z = np.array([np.sqrt(2.0), 0.0])
        assert np.linalg.norm(flow(z) - z) > 0.01

    def test_fixes_points_near_origin(self, flow):
        z = np.array([0.1, -0.2])
        np.testing.assert_allclose(flow(z), z, atol=1e-12)

    def test_general_covariances(self, rng):
        sigma0 = np.array([[1.0, 0.3], [0.3, 0.5]])
        sigma1 = sigma0 + np.array([[1.0, 0.2], [0.2, 0.8]])
        h = gaussian_pair_flow(sigma0, sigma1, FlowSpec('gaussian_pair'))
        Z = rng.standard_normal((200, 2))
        assert np.abs(h.inverse(h(Z)) - Z).max() < 1e-6

    def test_requires_ordered_covariances(self):
        with pytest.raises(FlowError):
            gaussian_pair_flow(2.0 * np.eye(2), np.eye(2), FlowSpec('gaussian_pair'))

    def test_requires_positive_definite(self):
        with pytest.raises(FlowError):
            gaussian_pair_flow(np.diag([1.0, -1.0]), 2.0 * np.eye(2), FlowSpec('gaussian_pair'))

    def test_wrong_variant(self):
        with pytest.raises(FlowError):
            gaussian_pair_flow(np.eye(2), 2.0 * np.eye(2), FlowSpec('do_intervention'))


class TestDoInterventionFlow:
    @pytest.fixture
    def flow(self):
        return do_intervention_flow(FlowSpec('do_intervention'))

    def test_axes_fixed(self, flow, rng):
        axis = rng.standard_normal(100) * 3
        pts = np.concatenate([np.column_stack([axis, np.zeros(100)]),
                              np.column_stack([np.zeros(100), axis])])
        assert np.abs(flow(pts) - pts).max() < 1e-12

    def test_moves_points_in_bump(self, flow):
        z = np.array([1.25, 0.8])
        assert np.linalg.norm(flow(z) - z) > 0.01

    def test_inverse(self, flow, rng):
        Z = rng.uniform(0.0, 3.0, (200, 2))
        assert np.abs(flow.inverse(flow(Z)) - Z).max() < 1e-6

    def test_support_touching_axis(self):
        with pytest.raises(FlowError):
            do_intervention_flow(FlowSpec('do_intervention', center=(0.9, 2.0)))
