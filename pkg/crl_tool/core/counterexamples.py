"""識別不能性の反例の数値的な確認

各反例について、分布が保たれること（エネルギー距離の置換検定）と写像が
非線形であること（アフィン近似の残差）を調べ、JSON にできる報告を返す。
"""

from __future__ import annotations

import logging
from collections.abc import Callable
from dataclasses import dataclass
from typing import Any

import numpy as np
from scipy.spatial.distance import cdist
from scipy.special import expit

from core.flows import (
    FlowSpec,
    do_intervention_flow,
    gaussian_pair_flow,
    radius_rotation,
)
from core.metrics import edges_from_adjacency, shd
from core.mixing import MixingFunction, apply_mixing, make_mixing
from core.scm import (
    Dag,
    InterventionKind,
    ScmEnvironment,
    ScmError,
    ScmFamily,
    apply_intervention,
    observational_family,
)
from utils.rng import make_rng, spawn

logger = logging.getLogger(__name__)

WHICH = ('rotation', 'pair-flow', 'do-flow', 'shift', 'uniform')
P_THRESHOLD = 0.01
MAX_POINTS = 1500
_TIE_TOL = 1e-12


class CounterexampleError(ValueError):
    """反例の前提を満たさない入力。"""


# ── 二標本検定 ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class EnergyTestResult:
    statistic: float
    p_value: float
    n_a: int
    n_b: int
    permutations: int


def _energy_from_pooled(D: np.ndarray, labels: np.ndarray, n_a: int, n_b: int) -> np.ndarray:
    """labels（N×P の 0/1、1 が標本 a）ごとの V 統計量。"""
    DL = D @ labels
    total_row = D.sum(axis=1)
    s_aa = np.einsum('np,np->p', labels, DL)
    s_a_all = labels.T @ total_row
    s_ab = s_a_all - s_aa
    s_bb = D.sum() - s_aa - 2.0 * s_ab
    return 2.0 * s_ab / (n_a * n_b) - s_aa / (n_a * n_a) - s_bb / (n_b * n_b)


def energy_distance_test(
    a: np.ndarray,
    b: np.ndarray,
    n_permutations: int = 200,
    *,
    seed: int = 0,
    max_points: int = MAX_POINTS,
) -> EnergyTestResult:
    """エネルギー距離の二標本置換検定。p = (1 + #{置換統計量 ≥ 観測値}) / (1 + P)。

    各標本は max_points 個まで無作為に間引いてから距離行列を作る。実際に使った点数は
    n_a / n_b に入る。
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    a = a[:, None] if a.ndim == 1 else a
    b = b[:, None] if b.ndim == 1 else b
    if a.shape[1] != b.shape[1]:
        raise CounterexampleError(f'次元が一致しません: {a.shape[1]} vs {b.shape[1]}')
    if len(a) == 0 or len(b) == 0:
        raise CounterexampleError('空の標本です')
    if max_points < 1:
        raise CounterexampleError(f'max_points は 1 以上が必要です: {max_points}')
    rng = make_rng(seed)
    if max(len(a), len(b)) > max_points:
        logger.info('エネルギー距離検定: 標本 (%s, %s) を各 %s 点までに間引きます',
                    len(a), len(b), max_points)
    if len(a) > max_points:
        a = a[rng.choice(len(a), max_points, replace=False)]
    if len(b) > max_points:
        b = b[rng.choice(len(b), max_points, replace=False)]
    n_a, n_b = len(a), len(b)
    pooled = np.concatenate([a, b])
    D = cdist(pooled, pooled)

    observed_labels = np.zeros((n_a + n_b, 1))
    observed_labels[:n_a] = 1.0
    observed = float(_energy_from_pooled(D, observed_labels, n_a, n_b)[0])

    labels = np.zeros((n_a + n_b, n_permutations))
    for p in range(n_permutations):
        labels[rng.permutation(n_a + n_b)[:n_a], p] = 1.0
    stats = _energy_from_pooled(D, labels, n_a, n_b) if n_permutations else np.zeros(0)
    exceed = int(np.sum(stats >= observed - _TIE_TOL))
    p_value = (1.0 + exceed) / (1.0 + n_permutations)
    return EnergyTestResult(max(observed, 0.0), p_value, n_a, n_b, n_permutations)


def linear_fit_residual(z: np.ndarray, hz: np.ndarray) -> float:
    """hz を z のアフィン写像で最小二乗近似したときの相対残差 ‖残差‖/‖hz − 平均‖。"""
    z = np.asarray(z, dtype=np.float64)
    hz = np.asarray(hz, dtype=np.float64)
    X = np.column_stack([z, np.ones(len(z))])
    coef, *_ = np.linalg.lstsq(X, hz, rcond=None)
    resid = hz - X @ coef
    spread = np.linalg.norm(hz - hz.mean(axis=0))
    return float(np.linalg.norm(resid) / spread) if spread > 0 else 0.0


# ── 一様分布の反例 ───────────────────────────────────────────────────────────

# ψ の遷移区間の長さと、導関数（平らな山形）の立ち上がり幅・高さ
_PSI_WIDTH = 1.5
_RAMP = 0.25
_PEAK = 1.0 / (1.0 - _RAMP)
_QUAD_NODES, _QUAD_WEIGHTS = np.polynomial.legendre.leggauss(96)
_QUAD_CHUNK = 4096


def _bump_step(v: np.ndarray) -> np.ndarray:
    """[0,1] で 0 → 1 の C^∞ ステップ。S(v) + S(1 − v) = 1。"""
    v = np.asarray(v, dtype=np.float64)
    out = (v >= 1.0).astype(np.float64)
    inner = (v > 0.0) & (v < 1.0)
    vi = v[inner]
    with np.errstate(over='ignore'):
        out[inner] = expit(1.0 / (1.0 - vi) - 1.0 / vi)
    return out


def _step_integral(y: np.ndarray) -> np.ndarray:
    """I(y) = ∫₀ʸ _bump_step（y ∈ [0,1]）。I(1) = 1/2。

    y ≤ 1/2 は固定節点の Gauss–Legendre 求積、y > 1/2 は I(y) = y − 1/2 + I(1 − y)。
    """
    upper = y > 0.5
    base = np.where(upper, 1.0 - y, y)
    s = 0.5 * (_QUAD_NODES + 1.0)
    low = np.empty_like(base)
    for start in range(0, len(base), _QUAD_CHUNK):
        part = base[start:start + _QUAD_CHUNK]
        rates = _bump_step(part[:, None] * s)
        low[start:start + _QUAD_CHUNK] = 0.5 * part * (rates @ _QUAD_WEIGHTS)
    return np.where(upper, y - 0.5 + low, low)


def _smooth_step(u: np.ndarray) -> np.ndarray:
    """[0,1] で 0 → 1 の C^∞ ステップ。

    導関数は _RAMP 幅で 0 から _PEAK まで滑らかに立ち上がり、中央は一定の山形。
    """
    u = np.clip(np.asarray(u, dtype=np.float64), 0.0, 1.0)
    flat = u.ravel()
    lo = flat < _RAMP
    hi = flat > 1.0 - _RAMP
    out = _PEAK * (flat - 0.5 * _RAMP)
    out[lo] = _PEAK * _RAMP * _step_integral(flat[lo] / _RAMP)
    out[hi] = 1.0 - _PEAK * _RAMP * _step_integral((1.0 - flat[hi]) / _RAMP)
    return out.reshape(u.shape)


def psi(t: np.ndarray) -> np.ndarray:
    """|t| ≤ 1 で 1、|t| ≥ 5/2 で 0、|ψ′| ≤ 8/9 の C^∞ 関数。"""
    return 1.0 - _smooth_step((np.abs(np.asarray(t, dtype=np.float64)) - 1.0) / _PSI_WIDTH)


def uniform_counterexample_map(z: np.ndarray) -> np.ndarray:
    """h̃(z) = (z₁, z₂ + ψ(z₂)z₁)。"""
    z = np.asarray(z, dtype=np.float64)
    Z = np.atleast_2d(z)
    out = np.column_stack([Z[:, 0], Z[:, 1] + psi(Z[:, 1]) * Z[:, 0]])
    return out[0] if z.ndim == 1 else out


# ── シフト介入の反例 ─────────────────────────────────────────────────────────


@dataclass(eq=False)
class ShiftCounterexample:
    """別のグラフを持つファミリーと、同じ観測を生む混合 f̃ = f ∘ (B^{-1}B̃)。"""
    family: ScmFamily
    alternate: ScmFamily
    transform: np.ndarray
    mixing: MixingFunction

    def alternate_mixing(self, Z_alt: np.ndarray) -> np.ndarray:
        X, _ = apply_mixing(self.mixing, np.asarray(Z_alt) @ self.transform.T)
        return X

    def pathwise_difference(self, eps: np.ndarray) -> float:
        """共通のノイズ ε で全環境の f(B^{-1}(ε+ηe_t)) と f̃(B̃^{-1}(ε+ηe_t)) の差の最大値。"""
        worst = 0.0
        for env, alt in zip(self.family.environments, self.alternate.environments, strict=True):
            rhs = (eps + env.shift_vector()).T
            X, _ = apply_mixing(self.mixing, np.linalg.solve(env.B, rhs).T)
            X_alt = self.alternate_mixing(np.linalg.solve(alt.B, rhs).T)
            worst = max(worst, float(np.abs(X - X_alt).max()))
        return worst

    def graph_distance(self) -> int:
        return shd(self.family.dag.edges, self.alternate.dag.edges)


def shift_counterexample(
    family: ScmFamily, B_alt: np.ndarray, mixing: MixingFunction,
) -> ShiftCounterexample:
    """純粋シフト介入だけのファミリーを、任意の非巡回な B̃ で説明し直す。"""
    for idx, env in enumerate(family.interventions, 1):
        if env.kind is not InterventionKind.PURE_SHIFT:
            raise CounterexampleError(f'環境 {idx} が純粋シフト介入ではありません')
    B_alt = np.asarray(B_alt, dtype=np.float64)
    d = family.d
    if B_alt.shape != (d, d):
        raise CounterexampleError(f'B̃ の形状が不正です: {B_alt.shape}')
    diag = np.diag(B_alt)
    if np.any(diag <= 0):
        raise CounterexampleError('B̃ の対角成分は正である必要があります')
    A_alt = np.eye(d) - B_alt / diag[:, None]
    np.fill_diagonal(A_alt, 0.0)
    try:
        dag = Dag.from_edges(d, edges_from_adjacency(A_alt))
        base = observational_family(dag, A_alt, 1.0 / diag ** 2)
        envs = [apply_intervention(base, env.target, InterventionKind.PURE_SHIFT,
                                   {'eta': env.eta}) for env in family.interventions]
        alternate = base.with_interventions(envs)
    except ScmError as e:
        raise CounterexampleError(f'B̃ から SCM を作れません: {e}') from e
    transform = np.linalg.solve(family.B, alternate.B)
    return ShiftCounterexample(family, alternate, transform, mixing)


# ── 認証レポート ─────────────────────────────────────────────────────────────


def _check(name: str, value: float, threshold: float, kind: str) -> dict[str, Any]:
    passed = value > threshold if kind == '>' else value < threshold
    return {'name': name, 'value': float(value), 'threshold': threshold,
            'relation': kind, 'passed': bool(passed)}


def _pushforward_check(
    name: str, mapped: np.ndarray, fresh: np.ndarray, permutations: int, seed: int,
    max_points: int = MAX_POINTS,
) -> dict[str, Any]:
    result = energy_distance_test(mapped, fresh, permutations, seed=seed, max_points=max_points)
    check = _check(f'{name}: p 値', result.p_value, P_THRESHOLD, '>')
    check['statistic'] = result.statistic
    check['n_used'] = [result.n_a, result.n_b]
    return check


def _rotation_angle(r: np.ndarray) -> np.ndarray:
    return np.pi * (1.0 - np.exp(-r * r))


def _certify_rotation(rngs, n, permutations, seed, max_points) -> tuple[list, list]:
    Z = rngs[0].standard_normal((n, 2))
    hZ = radius_rotation(Z, _rotation_angle)
    fresh = rngs[1].standard_normal((n, 2))
    norm_err = float(np.abs(np.linalg.norm(hZ, axis=1) - np.linalg.norm(Z, axis=1)).max())
    checks = [
        _pushforward_check('N(0,Id) の保存', hZ, fresh, permutations, seed, max_points),
        _check('ノルムの保存', norm_err, 1e-12, '<'),
        _check('非線形性（アフィン近似の相対残差）', linear_fit_residual(Z, hZ), 1e-2, '>'),
    ]
    return checks, ['環境 0 (N(0,Id))']


def _inverse_error(h, rng) -> float:
    pts = rng.standard_normal((1000, 2))
    return float(np.abs(h.inverse(h(pts)) - pts).max())


def _certify_pair_flow(rngs, n, permutations, seed, max_points) -> tuple[list, list]:
    sigma0, sigma1 = np.eye(2), 2.0 * np.eye(2)
    h = gaussian_pair_flow(sigma0, sigma1, FlowSpec('gaussian_pair'))
    checks = []
    for k, sigma in enumerate((sigma0, sigma1)):
        L = np.linalg.cholesky(sigma)
        Z = rngs[2 * k].standard_normal((n, 2)) @ L.T
        fresh = rngs[2 * k + 1].standard_normal((n, 2)) @ L.T
        checks.append(_pushforward_check(f'環境 {k} の保存', h(Z), fresh, permutations, seed + k,
                                         max_points))
    Z = rngs[4].standard_normal((5000, 2))
    checks += [
        _check('逆写像の誤差', _inverse_error(h, rngs[5]), 1e-6, '<'),
        _check('非線形性（アフィン近似の相対残差）', linear_fit_residual(Z, h(Z)), 1e-2, '>'),
    ]
    return checks, ['環境 0 (Σ₀ = Id)', '環境 1 (Σ₁ = 2·Id)']


def _certify_do_flow(rngs, n, permutations, seed, max_points) -> tuple[list, list]:
    h = do_intervention_flow(FlowSpec('do_intervention'))
    Z = rngs[0].standard_normal((n, 2))
    fresh = rngs[1].standard_normal((n, 2))
    axis = rngs[2].standard_normal(1000)
    on_axes = np.concatenate([np.column_stack([np.zeros(1000), axis]),
                              np.column_stack([axis, np.zeros(1000)])])
    axis_disp = float(np.abs(h(on_axes) - on_axes).max())
    grid = rngs[3].uniform(0.0, 3.0, (5000, 2))
    moved = float(np.linalg.norm(h(grid) - grid, axis=1).max())
    checks = [
        _pushforward_check('環境 0 (N(0,Id)) の保存', h(Z), fresh, permutations, seed, max_points),
        _check('座標軸上の点の変位', axis_disp, 1e-12, '<'),
        _check('バンプ内の最大変位', moved, 1e-2, '>'),
        _check('逆写像の誤差', _inverse_error(h, rngs[4]), 1e-6, '<'),
        _check('非線形性（アフィン近似の相対残差）', linear_fit_residual(grid, h(grid)), 1e-2, '>'),
    ]
    return checks, ['環境 0 (N(0,Id))', '環境 1 (do(Z₁=0))', '環境 2 (do(Z₂=0))']


def shift_example_family(etas: tuple[float, ...] = (1.0, -1.5, 2.0)) -> ScmFamily:
    """空グラフ（B = Id）に各ノード 1 回の純粋シフト介入をしたファミリー。"""
    d = len(etas)
    base = observational_family(Dag.from_edges(d, set()), np.zeros((d, d)), np.ones(d))
    envs: list[ScmEnvironment] = [
        apply_intervention(base, t, InterventionKind.PURE_SHIFT, {'eta': eta})
        for t, eta in enumerate(etas)
    ]
    return base.with_interventions(envs)


def chain_matrix(d: int, weight: float = 0.8) -> np.ndarray:
    """0 → 1 → … → d−1 の連鎖の B̃ = Id − weight·(下副対角)。"""
    return np.eye(d) - weight * np.eye(d, k=-1)


def _certify_shift(rngs, n, permutations, seed, max_points) -> tuple[list, list]:
    family = shift_example_family()
    mixing = make_mixing('mlp', family.d, 6, rngs[0])
    example = shift_counterexample(family, chain_matrix(family.d), mixing)
    eps = rngs[1].standard_normal((min(n, 10_000), family.d))
    checks = [
        _check('経路ごとの最大差', example.pathwise_difference(eps), 1e-9, '<'),
        _check('グラフ間の SHD', example.graph_distance(), 0, '>'),
    ]
    return checks, [f'環境 0..{family.d} の観測分布（空グラフ vs 連鎖）']


def _certify_uniform(rngs, n, permutations, seed, max_points) -> tuple[list, list]:
    e1 = rngs[0].uniform(-1, 1, n)
    e2 = rngs[1].uniform(-1, 1, n)
    e1p = rngs[2].uniform(-3, 3, n)
    envs = {
        0: (np.column_stack([e1, e2]), np.column_stack([e1, e1 + e2])),
        1: (np.column_stack([e1p, e2]), np.column_stack([e1p, e1p + e2])),
    }
    checks = []
    for k, (Z, target) in envs.items():
        mapped = uniform_counterexample_map(Z)
        checks.append(_check(f'環境 {k}: 経路ごとの差', float(np.abs(mapped - target).max()),
                             1e-12, '<'))
        f1 = rngs[3 + k].uniform(-1, 1, n) if k == 0 else rngs[3 + k].uniform(-3, 3, n)
        f2 = rngs[5 + k].uniform(-1, 1, n)
        fresh = np.column_stack([f1, f1 + f2])
        checks.append(_pushforward_check(f'環境 {k} の保存', mapped, fresh, permutations, seed + k,
                                         max_points))

    z1 = np.linspace(-1, 1, 21)
    z2 = np.linspace(-3, 3, 1000)
    monotone = min(float(np.diff(uniform_counterexample_map(
        np.column_stack([np.full_like(z2, a), z2]))[:, 1]).min()) for a in z1)
    ends = np.array([[a, b] for a in z1 for b in (-3.0, 3.0)])
    end_err = float(np.abs(uniform_counterexample_map(ends) - ends).max())
    region = max(
        float(np.abs(uniform_counterexample_map(np.array([0.5, 0.5])) - [0.5, 1.0]).max()),
        float(np.abs(uniform_counterexample_map(np.array([0.5, 2.8])) - [0.5, 2.8]).max()),
    )
    checks += [
        _check('z₂ 方向の単調増加（最小増分）', monotone, 0.0, '>'),
        _check('境界 z₂ = ±3 の固定', end_err, 1e-12, '<'),
        _check('領域ごとの値 (ψ=1 / ψ=0)', region, 1e-12, '<'),
    ]
    return checks, ['環境 0', '環境 1', '中間写像の [−1,1]×[−3,3] 上の全単射性']


_CERTIFIERS: dict[str, Callable] = {
    'rotation': _certify_rotation,
    'pair-flow': _certify_pair_flow,
    'do-flow': _certify_do_flow,
    'shift': _certify_shift,
    'uniform': _certify_uniform,
}

_NOT_CERTIFIED = {
    'uniform': ['環境 2（測度を保つ補正写像は構成しない）'],
}


def certify(
    which: str,
    seed: int = 0,
    *,
    n: int = 100_000,
    permutations: int = 200,
    max_points: int = MAX_POINTS,
) -> dict[str, Any]:
    """反例 which を数値的に確認し、検査ごとの値と合否を返す。

    分布の検定は各標本 max_points 点までで行い、実際の点数を n_used に記録する。
    """
    if which not in _CERTIFIERS:
        raise CounterexampleError(f'未知の反例です: {which}（{", ".join(WHICH)} から選択）')
    rngs = spawn(make_rng(seed), 8)
    checks, certified = _CERTIFIERS[which](rngs, n, permutations, seed, max_points)
    passed = all(c['passed'] for c in checks)
    logger.info('反例 %s: %s', which, 'OK' if passed else 'NG')
    return {
        'which': which, 'seed': seed, 'n': n, 'permutations': permutations,
        'max_points': max_points, 'n_used': min(n, max_points),
        'checks': checks, 'certified': certified if passed else [],
        'not_certified': _NOT_CERTIFIED.get(which, []), 'passed': passed,
    }
