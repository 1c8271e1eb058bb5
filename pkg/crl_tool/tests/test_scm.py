"""core/scm.py のテスト

テスト対象:
  - sample_er_dag: ER グラフ生成
  - sample_weights: 重みと分散
  - apply_intervention: 完全・不完全・純粋シフト介入
  - sample_latents: 潜在変数サンプリング
  - gaussian_stats / precision_difference: 厳密統計量と精度行列の差
  - shift_center / row_replacement_residual: 平方完成・行置換恒等式
"""

from __future__ import annotations

import numpy as np
import pytest

from core.scm import (
    Dag,
    InterventionKind,
    ScmEnvironment,
    ScmError,
    ScmFamily,
    apply_intervention,
    gaussian_stats,
    matrix_rank,
    observational_family,
    precision_difference,
    row_replacement_residual,
    sample_er_dag,
    sample_family,
    sample_latents,
    sample_weights,
    shift_center,
)
from utils.rng import make_rng

# ── Dag ───────────────────────────────────────────────────────────────────────


class TestDag:
    def test_rejects_cycle(self):
        """閉路はエラー"""
        with pytest.raises(ScmError):
            Dag.from_edges(2, {(0, 1), (1, 0)})

    def test_rejects_inconsistent_order(self):
        """topo_order が辺と矛盾するとエラー"""
        with pytest.raises(ScmError):
            Dag(d=2, edges=frozenset({(0, 1)}), topo_order=(1, 0))

    def test_adjacency_orientation(self):
        """adj[j, i] = 1 ⇔ i → j"""
        adj = Dag.from_edges(3, {(0, 2)}).adjacency()
        assert adj[2, 0] == 1
        assert adj.sum() == 1


# ── sample_er_dag ─────────────────────────────────────────────────────────────


class TestSampleErDag:
    def test_k_zero_gives_empty_graph(self):
        """k=0 なら辺なし"""
        dag = sample_er_dag(5, 0, make_rng(7))
        assert len(dag.edges) == 0

    def test_probability_clamps_to_one(self):
        """p が 1 にクランプされ完全 DAG になる"""
        dag = sample_er_dag(3, 3, make_rng(1))
        assert len(dag.edges) == 3

    def test_rejects_zero_nodes(self):
        with pytest.raises(ScmError):
            sample_er_dag(0, 1, make_rng(0))

    def test_single_node(self):
        dag = sample_er_dag(1, 2, make_rng(0))
        assert dag.d == 1 and not dag.edges

    def test_mean_edge_count(self):
        """ER(10, 2) の平均辺数 ≈ 20"""
        counts = [len(sample_er_dag(10, 2, make_rng(s)).edges) for s in range(2000)]
        # 2000 回の標準誤差は約 0.07
        assert abs(np.mean(counts) - 20.0) < 0.5

    def test_orientation_follows_topo_order(self):
        dag = sample_er_dag(8, 2, make_rng(3))
        rank = {v: p for p, v in enumerate(dag.topo_order)}
        assert all(rank[i] < rank[j] for i, j in dag.edges)


# ── sample_weights ───────────────────────────────────────────────────────────


class TestSampleWeights:
    def test_empty_dag(self):
        """辺なしなら A = 0、D は範囲内"""
        dag = Dag.from_edges(4, set())
        A, D = sample_weights(dag, make_rng(0), (2.0, 4.0))
        assert np.all(A == 0)
        assert np.all((D >= 2.0) & (D <= 4.0))

    def test_support_and_magnitude(self):
        """支持が DAG と一致し |A| ∈ [0.25, 1.0]"""
        rng = make_rng(5)
        mags = []
        for _ in range(300):
            dag = sample_er_dag(6, 2, rng)
            A, _D = sample_weights(dag, rng)
            assert np.array_equal((A != 0).astype(int), dag.adjacency())
            mags.extend(np.abs(A[A != 0]).tolist())
        mags = np.array(mags)
        assert mags.min() >= 0.25 and mags.max() <= 1.0
        assert abs(mags.mean() - 0.625) < 0.02

    def test_chain_b_matrix(self, chain_base, chain_weight):
        """D = Id の連鎖で B = Id − A"""
        expected = np.array([[1.0, 0.0], [-chain_weight, 1.0]])
        np.testing.assert_allclose(chain_base.B, expected)

    def test_rejects_bad_range(self):
        with pytest.raises(ScmError):
            sample_weights(Dag.from_edges(2, set()), make_rng(0), (3.0, 1.0))


# ── apply_intervention ───────────────────────────────────────────────────────


class TestApplyIntervention:
    def test_perfect_on_identity(self):
        """B = Id、ノード 2 に λ=2 → diag(1, 2)"""
        base = observational_family(Dag.from_edges(2, set()), np.zeros((2, 2)), np.ones(2))
        env = apply_intervention(base, 1, 'perfect', {'lam': 2.0})
        np.testing.assert_array_equal(env.B, np.diag([1.0, 2.0]))
        assert env.kind is InterventionKind.PERFECT

    def test_perfect_removes_parents(self, chain_base):
        """連鎖の子に完全介入すると行が (0, λ)"""
        env = apply_intervention(chain_base, 1, 'perfect', {'lam': 1.3})
        np.testing.assert_array_equal(env.B[1], [0.0, 1.3])
        np.testing.assert_array_equal(env.B[0], chain_base.B[0])

    def test_pure_shift_keeps_b(self, chain_base):
        """純粋シフトは B を変えず μ = η B^{-1} e_t"""
        env = apply_intervention(chain_base, 1, 'pure_shift', {'eta': 1.5})
        np.testing.assert_array_equal(env.B, chain_base.B)
        stats = gaussian_stats(env)
        np.testing.assert_allclose(stats.mu, 1.5 * np.linalg.solve(chain_base.B, [0.0, 1.0]))

    def test_rejects_nonpositive_lambda(self, chain_base):
        with pytest.raises(ScmError):
            apply_intervention(chain_base, 0, 'perfect', {'lam': 0.0})

    def test_rejects_new_parent(self, chain_base):
        """不完全介入で親を追加するとエラー"""
        with pytest.raises(ScmError):
            apply_intervention(chain_base, 0, 'imperfect', {'row': np.array([1.0, 0.3])})

    def test_rejects_trivial(self, chain_base):
        """λ² = D_tt かつ η = 0 の源ノード介入は自明"""
        with pytest.raises(ScmError):
            apply_intervention(chain_base, 0, 'perfect', {'lam': 1.0})

    def test_rejects_zero_shift(self, chain_base):
        with pytest.raises(ScmError):
            apply_intervention(chain_base, 0, 'pure_shift', {'eta': 0.0})

    def test_imperfect_default_resamples_row(self, chain_base):
        """不完全介入の既定は親集合を保ったまま行を再サンプルする"""
        env = apply_intervention(chain_base, 1, 'imperfect', {}, make_rng(2))
        assert env.B[1, 1] > 0
        assert 0.25 <= abs(env.B[1, 0]) / env.B[1, 1] <= 1.0

    def test_only_target_row_changes(self, er5_family):
        for env in er5_family.interventions:
            diff = np.abs(env.B - er5_family.B).max(axis=1)
            assert np.all(np.delete(diff, env.target) == 0.0)


class TestScmFamily:
    def test_covers_all_nodes(self, er5_family):
        assert er5_family.covers_all_nodes()
        assert [env.target for env in er5_family.interventions] == list(range(5))

    def test_rejects_mismatched_support(self):
        dag = Dag.from_edges(2, {(0, 1)})
        with pytest.raises(ScmError):
            ScmFamily(dag, np.zeros((2, 2)), np.ones(2))

    def test_repeated_targets_allowed(self, chain_base):
        """同じノードへの複数介入は型として許される"""
        envs = [
            apply_intervention(chain_base, 0, 'perfect', {'lam': 2.0}),
            apply_intervention(chain_base, 0, 'perfect', {'lam': 3.0}),
        ]
        family = chain_base.with_interventions(envs)
        assert not family.covers_all_nodes()

    def test_environment_rejects_perfect_without_lambda(self):
        with pytest.raises(ScmError):
            ScmEnvironment(B=np.eye(2), target=0, kind=InterventionKind.PERFECT)

    @pytest.mark.parametrize('kind', ['perfect', 'imperfect', 'pure_shift'])
    def test_sample_family_kinds(self, kind):
        family = sample_family(4, 1, make_rng(11), kind=kind)
        assert all(env.kind.value == kind for env in family.interventions)


# ── sample_latents ───────────────────────────────────────────────────────────


class TestSampleLatents:
    def test_standard_normal(self):
        env = ScmEnvironment(B=np.eye(3))
        Z = sample_latents(env, 100_000, make_rng(1))
        assert np.abs(Z.mean(axis=0)).max() < 0.02
        assert np.abs(np.cov(Z.T) - np.eye(3)).max() < 0.05

    def test_scaled_variance(self):
        """B = diag(1, 2) → Var(Z₂) ≈ 0.25"""
        base = observational_family(Dag.from_edges(2, set()), np.zeros((2, 2)), np.ones(2))
        env = apply_intervention(base, 1, 'perfect', {'lam': 2.0})
        Z = sample_latents(env, 100_000, make_rng(2))
        assert abs(Z[:, 1].var() - 0.25) < 0.01

    def test_shift_mean(self):
        base = observational_family(Dag.from_edges(2, set()), np.zeros((2, 2)), np.ones(2))
        env = apply_intervention(base, 0, 'pure_shift', {'eta': 3.0})
        Z = sample_latents(env, 100_000, make_rng(3))
        np.testing.assert_allclose(Z.mean(axis=0), [3.0, 0.0], atol=0.02)

    def test_deterministic(self, chain_family):
        env = chain_family.environments[1]
        a = sample_latents(env, 50, make_rng(9))
        b = sample_latents(env, 50, make_rng(9))
        np.testing.assert_array_equal(a, b)

    def test_empirical_covariance_matches_sigma(self, er5_family):
        n = 100_000
        for idx, env in enumerate(er5_family.environments):
            Z = sample_latents(env, n, make_rng(100 + idx))
            sigma = gaussian_stats(env).sigma
            scale = np.sqrt(np.outer(np.diag(sigma), np.diag(sigma)))
            tol = 5 * np.sqrt(2 / n) * scale
            assert np.all(np.abs(np.cov(Z.T) - sigma) <= tol)

    def test_rejects_zero_samples(self, chain_family):
        with pytest.raises(ScmError):
            sample_latents(chain_family.observational, 0, make_rng(0))


# ── gaussian_stats / precision_difference ─────────────────────────────────────


class TestGaussianStats:
    def test_identity(self):
        stats = gaussian_stats(ScmEnvironment(B=np.eye(3)))
        np.testing.assert_array_equal(stats.theta, np.eye(3))
        np.testing.assert_array_equal(stats.sigma, np.eye(3))
        np.testing.assert_array_equal(stats.mu, np.zeros(3))
        assert stats.logdet_sigma == 0.0

    def test_chain_precision(self, chain_base, chain_weight):
        a = chain_weight
        stats = gaussian_stats(chain_base.observational)
        np.testing.assert_allclose(stats.theta, [[1 + a * a, -a], [-a, 1.0]])

    def test_shift_mean(self):
        base = observational_family(Dag.from_edges(2, set()), np.zeros((2, 2)), np.ones(2))
        env = apply_intervention(base, 1, 'perfect', {'lam': 2.0, 'eta': 4.0})
        np.testing.assert_allclose(gaussian_stats(env).mu, [0.0, 2.0])

    def test_triangular_logdet_matches_dense(self, er5_family):
        """三角経路と密な slogdet が一致する"""
        order = er5_family.dag.topo_order
        for env in er5_family.environments:
            tri = gaussian_stats(env, order).logdet_sigma
            dense = gaussian_stats(env).logdet_sigma
            assert abs(tri - dense) < 1e-10

    def test_sigma_inverts_theta(self, er5_family):
        for env in er5_family.environments:
            stats = gaussian_stats(env)
            np.testing.assert_allclose(stats.sigma @ stats.theta, np.eye(5), atol=1e-10)

    def test_singular_raises(self):
        env = ScmEnvironment.__new__(ScmEnvironment)
        object.__setattr__(env, 'B', np.array([[1.0, 1.0], [1.0, 1.0]]))
        object.__setattr__(env, 'eta', 0.0)
        object.__setattr__(env, 'target', None)
        with pytest.raises(ScmError):
            gaussian_stats(env)


class TestPrecisionDifference:
    def test_scalar_case(self, scalar_family):
        delta, _s, _st = precision_difference(
            scalar_family.environments[1], scalar_family.observational)
        np.testing.assert_allclose(delta, [[3.0]])

    def test_rank_one_identity_and_source_rank(self, chain_family):
        env = chain_family.environments[1]
        delta, s, s_t = precision_difference(env, chain_family.observational)
        assert np.abs(delta - (np.outer(s_t, s_t) - np.outer(s, s))).max() <= 1e-12
        assert matrix_rank(delta) == 1

    def test_sink_imperfect_rank_at_most_two(self, chain_base):
        env = apply_intervention(chain_base, 1, 'imperfect', {'row': np.array([-0.2, 1.4])})
        delta, _s, _st = precision_difference(env, chain_base.observational)
        assert matrix_rank(delta) <= 2

    @pytest.mark.parametrize('seed', range(20))
    def test_identity_on_random_families(self, seed):
        kind = ['perfect', 'imperfect', 'pure_shift'][seed % 3]
        family = sample_family(6, 2, make_rng(seed), kind=kind)
        env0 = family.observational
        for env in family.interventions:
            delta, s, s_t = precision_difference(env, env0)
            assert np.abs(delta - (np.outer(s_t, s_t) - np.outer(s, s))).max() < 1e-12
            assert matrix_rank(delta) <= 2
            if family.dag.is_source(env.target) and kind != 'pure_shift':
                assert matrix_rank(delta) == 1
            assert row_replacement_residual(env, env0) == 0.0


class TestShiftCenter:
    def test_scalar_value(self):
        """d=1, λ=2, η=1 → μ′ = 2/3"""
        base = observational_family(Dag.from_edges(1, set()), np.zeros((1, 1)), np.ones(1))
        env = apply_intervention(base, 0, 'perfect', {'lam': 2.0, 'eta': 1.0})
        mu = shift_center(env, base.observational)
        np.testing.assert_allclose(mu, [2.0 / 3.0])

    def test_solves_linear_system(self, er5_family):
        env0 = er5_family.observational
        for env in er5_family.interventions:
            delta, _s, s_t = precision_difference(env, env0)
            mu = shift_center(env, env0)
            assert np.abs(delta @ mu - env.eta * s_t).max() <= 1e-9

    def test_non_collinear_orthogonality(self, chain_base):
        env = apply_intervention(chain_base, 1, 'perfect', {'lam': 2.0, 'eta': 1.2})
        mu = shift_center(env, chain_base.observational)
        s = chain_base.B[1]
        assert abs(mu @ s) < 1e-12
        assert abs(mu @ env.B[1] - 1.2) < 1e-12

    def test_pure_shift_raises(self, chain_base):
        env = apply_intervention(chain_base, 0, 'pure_shift', {'eta': 1.0})
        with pytest.raises(ScmError):
            shift_center(env, chain_base.observational)
