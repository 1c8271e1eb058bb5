"""潜在変数（MCC, R²）とグラフ（SHD, AUROC）の復元評価

MCC と R² は前半のサンプルで対応付け・回帰を決め、後半で評価する。
グラフの向きは A と同じ（scores[j, i] は辺 i → j のスコア）。介入対象は
t_i = i で固定されるので、SHD/AUROC の前に潜在変数の並べ替えは行わない。
"""

from __future__ import annotations

import logging
from collections.abc import Iterable
from dataclasses import asdict, dataclass, field
from typing import Any

import numpy as np
import pandas as pd
from scipy.optimize import linear_sum_assignment as _scipy_lsa
from scipy.stats import rankdata

logger = logging.getLogger(__name__)

RIDGE_LAMBDA = 1e-8
METRIC_COLUMNS = {'shd': 'SHD', 'auroc': 'AUROC', 'mcc': 'MCC', 'r2': 'R²'}


class MetricsError(ValueError):
    """評価指標の入力不正。"""


# ── 対応付け ─────────────────────────────────────────────────────────────────


def linear_sum_assignment(cost: np.ndarray) -> tuple[np.ndarray, float]:
    """総コスト最小の割り当て perm（行 i → 列 perm[i]）と総コスト。"""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2 or cost.shape[0] != cost.shape[1]:
        raise MetricsError(f'正方行列が必要です: shape={cost.shape}')
    if not np.all(np.isfinite(cost)):
        raise MetricsError('コストに有限でない値があります')
    rows, cols = _scipy_lsa(cost)
    perm = np.empty(cost.shape[0], dtype=np.int64)
    perm[rows] = cols
    return perm, float(cost[rows, cols].sum())


def correlation_matrix(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """C[i, j] = corr(A[:, i], B[:, j])。分散 0 の列との相関は 0。"""
    A = np.asarray(A, dtype=np.float64)
    B = np.asarray(B, dtype=np.float64)
    Ac = A - A.mean(axis=0)
    Bc = B - B.mean(axis=0)
    na = np.sqrt((Ac * Ac).sum(axis=0))
    nb = np.sqrt((Bc * Bc).sum(axis=0))
    denom = np.outer(na, nb)
    with np.errstate(divide='ignore', invalid='ignore'):
        C = (Ac.T @ Bc) / denom
    C[denom == 0] = 0.0
    return C


def column_correlations(A: np.ndarray, B: np.ndarray) -> np.ndarray:
    """列ごとの corr(A[:, i], B[:, i])。"""
    return np.diag(correlation_matrix(A, B)).copy()


def _check_pair(Z_true: np.ndarray, Z_hat: np.ndarray, min_n: int) -> None:
    if Z_true.shape != Z_hat.shape or Z_true.ndim != 2:
        raise MetricsError(f'形状が一致しません: {Z_true.shape} vs {Z_hat.shape}')
    if Z_true.shape[0] < min_n:
        raise MetricsError(f'サンプル数が不足しています: {Z_true.shape[0]} < {min_n}')
    if not (np.all(np.isfinite(Z_true)) and np.all(np.isfinite(Z_hat))):
        raise MetricsError('有限でない値があります')


def mcc_with_matching(Z_true: np.ndarray, Z_hat: np.ndarray) -> tuple[float, np.ndarray]:
    """MCC と対応付け perm（真の座標 i ↔ 推定座標 perm[i]）。"""
    Z_true = np.asarray(Z_true, dtype=np.float64)
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    _check_pair(Z_true, Z_hat, 4)
    half = Z_true.shape[0] // 2
    C1 = np.abs(correlation_matrix(Z_true[:half], Z_hat[:half]))
    perm, _ = linear_sum_assignment(-C1)
    C2 = np.abs(correlation_matrix(Z_true[half:], Z_hat[half:]))
    return float(C2[np.arange(len(perm)), perm].mean()), perm


def mcc(Z_true: np.ndarray, Z_hat: np.ndarray) -> float:
    """平均相関係数（前半で対応付け、後半で評価）。"""
    return mcc_with_matching(Z_true, Z_hat)[0]


def r2(Z_true: np.ndarray, Z_hat: np.ndarray) -> float:
    """Ẑ → Z のアフィン回帰の決定係数（列平均）。前半で推定し後半で評価する。"""
    Z_true = np.asarray(Z_true, dtype=np.float64)
    Z_hat = np.asarray(Z_hat, dtype=np.float64)
    d = Z_hat.shape[1] if Z_hat.ndim == 2 else 0
    _check_pair(Z_true, Z_hat, 2 * (d + 1))
    half = Z_true.shape[0] // 2
    X1 = np.column_stack([Z_hat[:half], np.ones(half)])
    X2 = np.column_stack([Z_hat[half:], np.ones(Z_hat.shape[0] - half)])
    if np.linalg.matrix_rank(X1) < X1.shape[1]:
        logger.warning('R² の計画行列がランク落ちのためリッジ回帰 (λ=%s) に切り替えます',
                       RIDGE_LAMBDA)
        G = X1.T @ X1 + RIDGE_LAMBDA * np.eye(X1.shape[1])
        coef = np.linalg.solve(G, X1.T @ Z_true[:half])
    else:
        coef, *_ = np.linalg.lstsq(X1, Z_true[:half], rcond=None)
    resid = Z_true[half:] - X2 @ coef
    sse = (resid * resid).sum(axis=0)
    centered = Z_true[half:] - Z_true[half:].mean(axis=0)
    sst = (centered * centered).sum(axis=0)
    with np.errstate(divide='ignore', invalid='ignore'):
        per_col = np.where(sst > 0, 1.0 - sse / sst, 0.0)
    return float(per_col.mean())


# ── グラフ ───────────────────────────────────────────────────────────────────


def edges_from_adjacency(adj: np.ndarray) -> frozenset[tuple[int, int]]:
    """adj[j, i] ≠ 0 を辺 (i, j) とみなして辺集合を返す。"""
    js, is_ = np.nonzero(np.asarray(adj))
    return frozenset((int(i), int(j)) for i, j in zip(is_, js, strict=True) if i != j)


def shd(true_edges: Iterable[tuple[int, int]], hat_edges: Iterable[tuple[int, int]]) -> int:
    """有向辺の対称差の大きさ。逆向きの辺は 2 と数える。"""
    return len(set(true_edges) ^ set(hat_edges))


def auroc(scores: np.ndarray, truth: np.ndarray) -> float:
    """全 d(d−1) 有向ペアでの AUROC（同順位は平均順位）。正例か負例が無ければ NaN。"""
    scores = np.asarray(scores, dtype=np.float64)
    truth = np.asarray(truth)
    if scores.shape != truth.shape or scores.ndim != 2 or scores.shape[0] != scores.shape[1]:
        raise MetricsError(f'形状が一致しません: {scores.shape} vs {truth.shape}')
    off = ~np.eye(scores.shape[0], dtype=bool)
    s = scores[off]
    y = truth[off] != 0
    n_pos = int(y.sum())
    n_neg = int(y.size - n_pos)
    if n_pos == 0 or n_neg == 0:
        logger.warning('真のグラフが全辺あり/全辺なしのため AUROC は定義されません')
        return float('nan')
    ranks = rankdata(s)
    return float((ranks[y].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


# ── レポート ─────────────────────────────────────────────────────────────────


@dataclass
class MetricsReport:
    """1 シード分の評価結果。"""
    mcc: float
    shd: int
    auroc: float
    r2: float
    permutation: list[int]
    edges: list[list[int]]
    seeds: dict[str, Any] = field(default_factory=dict)
    config: dict[str, Any] = field(default_factory=dict)
    diagnostics: dict[str, Any] = field(default_factory=dict)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self) -> dict[str, Any]:
        return asdict(self)


def evaluate_run(
    Z_true: np.ndarray,
    Z_hat: np.ndarray,
    true_edges: Iterable[tuple[int, int]],
    d: int,
    scores: np.ndarray,
    selected: Iterable[tuple[int, int]],
    *,
    seeds: dict[str, Any] | None = None,
    config: dict[str, Any] | None = None,
) -> MetricsReport:
    """潜在変数とグラフの指標をまとめて計算する。"""
    true_edges = set(true_edges)
    selected = sorted(set(selected))
    truth = np.zeros((d, d), dtype=np.int64)
    for i, j in true_edges:
        truth[j, i] = 1
    warnings: list[str] = []
    if Z_true.shape[0] <= d:
        warnings.append(f'n={Z_true.shape[0]} ≤ d={d}: 指標は信頼できません')
        logger.warning('評価サンプル数 %s が d=%s 以下です', Z_true.shape[0], d)
        value, perm = float('nan'), np.arange(d)
        r2_value = float('nan')
        if Z_true.shape[0] >= 4:
            value, perm = mcc_with_matching(Z_true, Z_hat)
    else:
        value, perm = mcc_with_matching(Z_true, Z_hat)
        r2_value = r2(Z_true, Z_hat) if Z_true.shape[0] >= 2 * (d + 1) else float('nan')
    return MetricsReport(
        mcc=value,
        shd=shd(true_edges, selected),
        auroc=auroc(scores, truth),
        r2=r2_value,
        permutation=[int(p) for p in perm],
        edges=[[int(i), int(j)] for i, j in selected],
        seeds=dict(seeds or {}),
        config=dict(config or {}),
        warnings=warnings,
    )


def aggregate(rows: list[dict[str, Any]], keys: tuple[str, ...] = ('setting', 'method')) -> pd.DataFrame:
    """シードごとの行を (setting, method) でまとめ、平均 ± 標準誤差の表にする。

    標準誤差は標本標準偏差 / √runs。1 run のみの場合は 0 とする。
    METRIC_COLUMNS 以外の数値列（abs_wins_share など）も {列名}_mean として残す。
    """
    df = pd.DataFrame(rows)
    if df.empty:
        return pd.DataFrame(columns=[*(k.capitalize() for k in keys), *METRIC_COLUMNS.values()])
    out_rows = []
    for group, part in df.groupby(list(keys), sort=False):
        group = group if isinstance(group, tuple) else (group,)
        row: dict[str, Any] = {k.capitalize(): v for k, v in zip(keys, group, strict=True)}
        numbers: dict[str, float] = {}
        for col, label in METRIC_COLUMNS.items():
            values = part[col].astype(float)
            mean = float(values.mean())
            se = float(values.std(ddof=1) / np.sqrt(values.count())) if values.count() > 1 else 0.0
            row[label] = f'{mean:.2f} ± {se:.2f}'
            numbers[f'{col}_mean'] = mean
            numbers[f'{col}_se'] = se
        extras = [c for c in part.columns
                  if c not in METRIC_COLUMNS and c not in keys and c != 'seed'
                  and pd.api.types.is_numeric_dtype(part[c])]
        for col in extras:
            numbers[f'{col}_mean'] = float(part[col].astype(float).mean())
        row.update(numbers)
        row['runs'] = int(len(part))
        out_rows.append(row)
    return pd.DataFrame(out_rows)
