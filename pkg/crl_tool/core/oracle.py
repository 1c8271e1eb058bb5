"""解析的な対数オッズと精度行列の代数

環境 i（η^{(i)}, s̃ = B^{(i)} の行 t）と観測環境 0 の対数オッズは

    ln p_i(z) − ln p_0(z) = c_i − ½ zᵀ(Θ^{(i)} − Θ⁰)z + η s̃ᵀz,
    c_i = −½(ln|Σ^{(i)}| − ln|Σ⁰|) − ½η²

となる。完全介入では −½ zᵀΔz = −½λ²z_t² + ½⟨z, s⟩² なので、学習器のヘッドは
α = c, β = ½λ², γ = ηλ, w = s/√2 で厳密に一致する。混合関数のヤコビアン項は
分子と分母で打ち消すため、どの f の上でもこの恒等式は成り立つ。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from math import log, pi, sqrt
from typing import Any

import numpy as np

from core.contrastive import ContrastiveModel, HeadParams, TrainConfig, log_odds_head
from core.mixing import MixingFunction, invert_linear_mixing
from core.scm import (
    Dag,
    InterventionKind,
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
    sample_weights,
    shift_center,
)
from core.tensor_nn import EncoderNet
from utils.rng import make_rng

logger = logging.getLogger(__name__)

LOG_2PI = log(2.0 * pi)


class OracleError(ValueError):
    """解析的オラクルの前提を満たさない。"""


# ── 密度と対数オッズ ─────────────────────────────────────────────────────────


def _as_rows(z: np.ndarray) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    return np.atleast_2d(z), z.ndim == 1


def _out(values: np.ndarray, single: bool) -> np.ndarray | float:
    return float(values[0]) if single else values


def gaussian_log_density(stats, z: np.ndarray) -> np.ndarray | float:
    """多変量正規分布 N(μ, Σ) の対数密度。"""
    Z, single = _as_rows(z)
    d = stats.theta.shape[0]
    R = Z - stats.mu
    quad = np.einsum('ni,ij,nj->n', R, stats.theta, R)
    return _out(-0.5 * d * LOG_2PI - 0.5 * stats.logdet_sigma - 0.5 * quad, single)


def _check_index(family: ScmFamily, i: int) -> None:
    if not 1 <= i < len(family.environments):
        raise OracleError(f'介入番号は 1..{len(family.environments) - 1} で指定してください: {i}')


def log_odds_constant(family: ScmFamily, i: int) -> float:
    """c_i = −½(ln|Σ^{(i)}| − ln|Σ⁰|) − ½η²。"""
    _check_index(family, i)
    order = family.dag.topo_order
    env = family.environments[i]
    st_i = gaussian_stats(env, order)
    st_0 = gaussian_stats(family.observational, order)
    return -0.5 * (st_i.logdet_sigma - st_0.logdet_sigma) - 0.5 * env.eta ** 2


def density_difference(family: ScmFamily, i: int, z: np.ndarray) -> np.ndarray | float:
    """ln p_i(z) − ln p_0(z) を 2 つの密度から直接計算する。"""
    _check_index(family, i)
    order = family.dag.topo_order
    st_i = gaussian_stats(family.environments[i], order)
    st_0 = gaussian_stats(family.observational, order)
    Z, single = _as_rows(z)
    return _out(gaussian_log_density(st_i, Z) - gaussian_log_density(st_0, Z), single)


def log_odds_difference(family: ScmFamily, i: int, z: np.ndarray) -> np.ndarray | float:
    """一般の単一ノード介入での対数オッズ c − ½zᵀΔz + η s̃ᵀz（Δ = s̃s̃ᵀ − ssᵀ）。"""
    _check_index(family, i)
    env = family.environments[i]
    _, s, s_t = precision_difference(env, family.observational)
    Z, single = _as_rows(z)
    quad = (Z @ s_t) ** 2 - (Z @ s) ** 2
    values = log_odds_constant(family, i) - 0.5 * quad + env.eta * (Z @ s_t)
    return _out(values, single)


def analytic_log_odds(family: ScmFamily, i: int, z: np.ndarray) -> np.ndarray | float:
    """完全介入の対数オッズ c − ½λ²z_t² + ηλz_t + ½⟨z, s⟩²。"""
    _check_index(family, i)
    env = family.environments[i]
    if env.kind is not InterventionKind.PERFECT:
        raise OracleError(f'環境 {i} は完全介入ではありません（log_odds_difference を使ってください）')
    t = env.target
    s = family.B[t]
    Z, single = _as_rows(z)
    zt = Z[:, t]
    values = (log_odds_constant(family, i) - 0.5 * env.lam ** 2 * zt * zt
              + env.eta * env.lam * zt + 0.5 * (Z @ s) ** 2)
    return _out(values, single)


def complete_square(family: ScmFamily, i: int) -> tuple[np.ndarray, float]:
    """対数オッズを −½(z − μ′)ᵀΔ(z − μ′) + c′ の形に書き直す (μ′, c′)。"""
    _check_index(family, i)
    env = family.environments[i]
    try:
        mu = shift_center(env, family.observational)
    except ScmError as e:
        raise OracleError(str(e)) from e
    delta, _, _ = precision_difference(env, family.observational)
    c = log_odds_constant(family, i) + 0.5 * float(mu @ delta @ mu)
    return mu, c


def completed_square_value(
    family: ScmFamily, i: int, z: np.ndarray, mu: np.ndarray, c: float,
) -> np.ndarray | float:
    delta, _, _ = precision_difference(family.environments[i], family.observational)
    Z, single = _as_rows(z)
    R = Z - mu
    return _out(c - 0.5 * np.einsum('ni,ij,nj->n', R, delta, R), single)


def bayes_ce(family: ScmFamily, i: int, Z_obs: np.ndarray, Z_int: np.ndarray) -> float:
    """真の対数オッズで分類したときの平均交差エントロピー（達成可能な CE の下限）。"""
    g0 = log_odds_difference(family, i, np.atleast_2d(Z_obs))
    gi = log_odds_difference(family, i, np.atleast_2d(Z_int))
    total = np.logaddexp(0.0, g0).sum() + np.logaddexp(0.0, -gi).sum()
    return float(total / (len(g0) + len(gi)))


# ── ヘッドの解析解 ───────────────────────────────────────────────────────────


@dataclass(eq=False)
class OracleFit:
    """ファミリーから決まるヘッドと、線形混合なら f^{-1} を表す線形エンコーダ。"""
    head: HeadParams
    encoder: EncoderNet | None = None


def oracle_head(family: ScmFamily) -> HeadParams:
    """α_i = c_i, β_i = ½λ_i², γ_i = ηλ_i, w^{(i)} = s^{(i)}/√2。

    介入 i の対象が t_i = i − 1（0 始まり）の完全介入ファミリーに限る。

    対数オッズの 2 次項は観測分布側の構造式から来る +½⟨z, s^{(i)}⟩² で、ヘッドはこれを
    ⟨h, w^{(i)}⟩² と書くので w^{(i)} = s^{(i)}/√2 になる。w^{(i)} = s^{(i)} をそのまま入れると
    2 次項が 2 倍になり、解析的な対数オッズと一致しない。1 次元で W = 2 と書く流儀は
    ½ を w に含めない別の取り方で、ヘッドが表す関数族は同じ。
    """
    d = family.d
    if len(family.interventions) != d:
        raise OracleError(f'介入の数 {len(family.interventions)} が d={d} と一致しません')
    alpha = np.zeros(d)
    beta = np.zeros(d)
    gamma = np.zeros(d)
    W = np.zeros((d, d))
    for k, env in enumerate(family.interventions):
        if env.kind is not InterventionKind.PERFECT:
            raise OracleError(f'環境 {k + 1} は完全介入ではありません')
        if env.target != k:
            raise OracleError(f'環境 {k + 1} の対象 {env.target} が {k} ではありません')
        alpha[k] = log_odds_constant(family, k + 1)
        beta[k] = 0.5 * env.lam ** 2
        gamma[k] = env.eta * env.lam
        W[k] = family.B[k] / sqrt(2.0)
    return HeadParams.from_w(alpha, beta, gamma, W)


def oracle_head_fit(family: ScmFamily, mixing: MixingFunction | None = None) -> OracleFit:
    """ヘッドの解析解と、線形混合なら擬似逆行列のエンコーダを返す。

    非線形混合ではエンコーダを作らず、呼び出し側が真の潜在変数を h として使う。
    """
    head = oracle_head(family)
    encoder = None
    if mixing is not None and mixing.variant == 'linear':
        pinv = invert_linear_mixing(mixing)
        encoder = EncoderNet('linear', mixing.d_prime, mixing.d,
                             {'W': pinv, 'b': np.zeros(mixing.d)}, hidden=0)
    return OracleFit(head=head, encoder=encoder)


def oracle_model(fit: OracleFit, cfg: TrainConfig | None = None) -> ContrastiveModel:
    """OracleFit を学習済みモデルとして扱えるようにする（中心化は 0）。"""
    if fit.encoder is None:
        raise OracleError('線形混合以外ではエンコーダを作れません')
    return ContrastiveModel(
        encoder=fit.encoder, head=fit.head, config=cfg or TrainConfig(),
        center=np.zeros(fit.head.d),
    )


# ── 恒等式の一括検証 ─────────────────────────────────────────────────────────


_KINDS = (InterventionKind.PERFECT, InterventionKind.IMPERFECT, InterventionKind.PURE_SHIFT)


def sample_mixed_family(d: int, k: float, rng: np.random.Generator) -> ScmFamily:
    """ノードごとに介入の種類（完全・不完全・純粋シフト）を無作為に選んだファミリー。"""
    dag: Dag = sample_er_dag(d, k, rng)
    A, D = sample_weights(dag, rng)
    base = observational_family(dag, A, D)
    envs = []
    for t in range(d):
        kind = _KINDS[int(rng.integers(len(_KINDS)))]
        eta = float(rng.uniform(1.0, 2.0) * rng.choice([-1.0, 1.0]))
        if kind is not InterventionKind.PURE_SHIFT and rng.random() < 0.3:
            eta = 0.0
        envs.append(apply_intervention(base, t, kind, {'eta': eta}, rng))
    return base.with_interventions(envs)


def verify_identities(
    n_families: int = 50, points: int = 1000, seed: int = 0, max_d: int = 10,
) -> dict[str, Any]:
    """対数オッズ・精度差分・平方完成・ヘッド解析解の残差の最大値を調べる。"""
    rng = make_rng(seed)
    worst = {
        'log_odds': 0.0, 'precision_difference': 0.0, 'row_replacement': 0.0,
        'complete_square': 0.0, 'head_fit': 0.0,
    }
    rank_ok = True
    for _ in range(n_families):
        d = int(rng.integers(1, max_d + 1))
        family = sample_mixed_family(d, 2, rng)
        Z = rng.standard_normal((points, d))
        for i, env in enumerate(family.interventions, 1):
            ref = density_difference(family, i, Z)
            worst['log_odds'] = max(worst['log_odds'],
                                    float(np.abs(log_odds_difference(family, i, Z) - ref).max()))
            if env.kind is InterventionKind.PERFECT:
                worst['log_odds'] = max(worst['log_odds'],
                                        float(np.abs(analytic_log_odds(family, i, Z) - ref).max()))
            delta, s, s_t = precision_difference(env, family.observational)
            worst['precision_difference'] = max(
                worst['precision_difference'],
                float(np.abs(delta - (np.outer(s_t, s_t) - np.outer(s, s))).max()))
            worst['row_replacement'] = max(worst['row_replacement'],
                                           row_replacement_residual(env, family.observational))
            rank = matrix_rank(delta)
            if rank > 2:
                rank_ok = False
            if family.dag.is_source(env.target) and env.kind is not InterventionKind.PURE_SHIFT:
                rank_ok = rank_ok and rank == 1
            if env.kind is not InterventionKind.PURE_SHIFT:
                mu, c = complete_square(family, i)
                sq = completed_square_value(family, i, Z[:100], mu, c)
                worst['complete_square'] = max(
                    worst['complete_square'],
                    float(np.abs(sq - ref[:100]).max()) / max(1.0, abs(c)))

        perfect = sample_family(d, 2, rng)
        head = oracle_head(perfect)
        for i in range(1, d + 1):
            diff = log_odds_head(Z, i, head) - analytic_log_odds(perfect, i, Z)
            worst['head_fit'] = max(worst['head_fit'], float(np.abs(diff).max()))

    thresholds = {
        'log_odds': 1e-10, 'precision_difference': 1e-12, 'row_replacement': 1e-12,
        'complete_square': 1e-9, 'head_fit': 1e-10,
    }
    passed = rank_ok and all(worst[k] < thresholds[k] for k in thresholds)
    report = {
        'families': n_families, 'points': points, 'seed': seed,
        'max_residual': worst, 'thresholds': thresholds,
        'rank_ok': rank_ok, 'passed': passed,
    }
    logger.info('オラクル検証: %s', 'OK' if passed else 'NG')
    return report
