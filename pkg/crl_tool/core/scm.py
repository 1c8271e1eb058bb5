"""線形ガウス SCM の表現・サンプリング・介入・厳密統計量

行列の向きは A と同じ: ``A[j, i] != 0`` ⇔ 辺 i → j。
B = D^{-1/2}(Id − A) の行 j はノード j の構造方程式に対応する。
ノード番号は 0 始まり。
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum

import networkx as nx
import numpy as np

logger = logging.getLogger(__name__)

# 重みの絶対値の範囲 U(±[0.25, 1.0])
WEIGHT_RANGE: tuple[float, float] = (0.25, 1.0)

# 非自明性判定のしきい値（‖B^{(i)} − B‖∞ がこれ未満かつ η = 0 なら自明）
TRIVIAL_TOL = 1e-9

_RESAMPLE_LIMIT = 100


class ScmError(ValueError):
    """SCM の構築・介入・統計量計算の失敗。"""


class InterventionKind(str, Enum):
    """環境の種類。"""
    OBSERVATIONAL = 'observational'
    PERFECT = 'perfect'
    IMPERFECT = 'imperfect'
    PURE_SHIFT = 'pure_shift'


# ── DAG ─────────────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class Dag:
    """有向非巡回グラフ。edges は (親, 子) の組。"""
    d: int
    edges: frozenset[tuple[int, int]]
    topo_order: tuple[int, ...]

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ScmError(f'ノード数は 1 以上が必要です: {self.d}')
        if sorted(self.topo_order) != list(range(self.d)):
            raise ScmError('topo_order が [d] の置換になっていません')
        for i, j in self.edges:
            if not (0 <= i < self.d and 0 <= j < self.d) or i == j:
                raise ScmError(f'不正な辺です: {(i, j)}')
        if not nx.is_directed_acyclic_graph(self.to_networkx()):
            raise ScmError('グラフに閉路があります')
        rank = {node: pos for pos, node in enumerate(self.topo_order)}
        for i, j in self.edges:
            if rank[i] >= rank[j]:
                raise ScmError(f'topo_order が辺 {i}→{j} と矛盾しています')

    @classmethod
    def from_edges(cls, d: int, edges: set[tuple[int, int]] | frozenset[tuple[int, int]]) -> Dag:
        """辺集合から DAG を作る。topo_order は networkx の辞書順トポロジカルソート。"""
        graph = nx.DiGraph()
        graph.add_nodes_from(range(d))
        graph.add_edges_from(edges)
        if not nx.is_directed_acyclic_graph(graph):
            raise ScmError('グラフに閉路があります')
        order = tuple(nx.lexicographical_topological_sort(graph))
        return cls(d=d, edges=frozenset(edges), topo_order=order)

    def to_networkx(self) -> nx.DiGraph:
        graph = nx.DiGraph()
        graph.add_nodes_from(range(self.d))
        graph.add_edges_from(self.edges)
        return graph

    def parents(self, j: int) -> list[int]:
        """ノード j の親（昇順）。"""
        return sorted(i for i, c in self.edges if c == j)

    def is_source(self, j: int) -> bool:
        return not any(c == j for _, c in self.edges)

    def adjacency(self) -> np.ndarray:
        """隣接行列。A と同じ向き（adj[j, i] = 1 ⇔ i → j）。"""
        adj = np.zeros((self.d, self.d), dtype=np.int64)
        for i, j in self.edges:
            adj[j, i] = 1
        return adj


# ── 環境・ファミリー ─────────────────────────────────────────────────────────


@dataclass(frozen=True, eq=False)
class ScmEnvironment:
    """1 つの環境（観測 or 単一ノード介入）。"""
    B: np.ndarray
    eta: float = 0.0
    target: int | None = None
    kind: InterventionKind = InterventionKind.OBSERVATIONAL
    lam: float | None = None

    def __post_init__(self) -> None:
        B = np.asarray(self.B, dtype=np.float64)
        if B.ndim != 2 or B.shape[0] != B.shape[1]:
            raise ScmError(f'B は正方行列である必要があります: shape={B.shape}')
        if np.any(np.diag(B) <= 0):
            raise ScmError('B の対角成分は正である必要があります')
        object.__setattr__(self, 'B', B)
        if self.kind is InterventionKind.OBSERVATIONAL:
            if self.target is not None or self.eta != 0.0:
                raise ScmError('観測環境は target なし・η = 0 です')
        elif self.target is None or not 0 <= self.target < B.shape[0]:
            raise ScmError(f'介入対象ノードが不正です: {self.target}')
        if self.kind is InterventionKind.PERFECT:
            if self.lam is None or self.lam <= 0:
                raise ScmError('完全介入には λ > 0 が必要です')
            expected = np.zeros(B.shape[0])
            expected[self.target] = self.lam
            if not np.allclose(B[self.target], expected, rtol=0.0, atol=1e-12):
                raise ScmError('完全介入の行が λ·e_t になっていません')
        if self.kind is InterventionKind.PURE_SHIFT and self.eta == 0.0:
            raise ScmError('純粋シフト介入には η ≠ 0 が必要です')

    @property
    def d(self) -> int:
        return self.B.shape[0]

    def shift_vector(self) -> np.ndarray:
        """η·e_t（観測環境ではゼロ）。"""
        v = np.zeros(self.d)
        if self.target is not None:
            v[self.target] = self.eta
        return v


@dataclass(eq=False)
class ScmFamily:
    """観測環境 0 と介入環境 1..|I| の集まり。D は分散のベクトル（対角成分）。"""
    dag: Dag
    A: np.ndarray
    D: np.ndarray
    environments: list[ScmEnvironment] = field(default_factory=list)

    def __post_init__(self) -> None:
        self.A = np.asarray(self.A, dtype=np.float64)
        self.D = np.asarray(self.D, dtype=np.float64).reshape(-1)
        d = self.dag.d
        if self.A.shape != (d, d) or self.D.shape != (d,):
            raise ScmError('A / D の次元が DAG と一致しません')
        if np.any(self.D <= 0):
            raise ScmError('D は正の対角行列である必要があります')
        support = (self.A != 0).astype(np.int64)
        if not np.array_equal(support, self.dag.adjacency()):
            raise ScmError('A の非ゼロパターンが DAG の辺と一致しません')
        if not self.environments:
            self.environments = [ScmEnvironment(B=observational_b(self.A, self.D))]
        env0 = self.environments[0]
        if env0.kind is not InterventionKind.OBSERVATIONAL:
            raise ScmError('環境 0 は観測環境である必要があります')
        if not np.allclose(env0.B, observational_b(self.A, self.D), rtol=0.0, atol=1e-12):
            raise ScmError('環境 0 の B が D^{-1/2}(Id − A) と一致しません')
        for idx, env in enumerate(self.environments[1:], 1):
            _check_single_row_change(env, env0, idx)
            if _is_trivial(env, env0):
                raise ScmError(f'環境 {idx} は観測環境と同じ分布です')

    @property
    def d(self) -> int:
        return self.dag.d

    @property
    def B(self) -> np.ndarray:
        return self.environments[0].B

    @property
    def observational(self) -> ScmEnvironment:
        return self.environments[0]

    @property
    def interventions(self) -> list[ScmEnvironment]:
        return self.environments[1:]

    def covers_all_nodes(self) -> bool:
        """全ノードが少なくとも 1 回介入されているか。"""
        targets = {env.target for env in self.interventions}
        return targets >= set(range(self.d))

    def with_interventions(self, envs: list[ScmEnvironment]) -> ScmFamily:
        """観測環境を保ったまま介入環境を差し替えた新しいファミリーを返す。"""
        return ScmFamily(self.dag, self.A.copy(), self.D.copy(),
                         [self.environments[0], *envs])


@dataclass(frozen=True, eq=False)
class GaussianStats:
    """1 環境の厳密なガウス統計量。"""
    theta: np.ndarray
    sigma: np.ndarray
    mu: np.ndarray
    logdet_sigma: float


def observational_b(A: np.ndarray, D: np.ndarray) -> np.ndarray:
    """B = D^{-1/2}(Id − A)。"""
    d = A.shape[0]
    return (np.eye(d) - A) / np.sqrt(D)[:, None]


def _check_single_row_change(env: ScmEnvironment, env0: ScmEnvironment, idx: int) -> None:
    if env.d != env0.d:
        raise ScmError(f'環境 {idx} の次元が一致しません')
    diff = np.abs(env.B - env0.B).max(axis=1)
    other = np.delete(diff, env.target)
    if other.size and other.max() > 0.0:
        raise ScmError(f'環境 {idx} は対象行 {env.target} 以外も変更しています')


def _is_trivial(env: ScmEnvironment, env0: ScmEnvironment) -> bool:
    return bool(np.abs(env.B - env0.B).max() < TRIVIAL_TOL and env.eta == 0.0)


# ── サンプリング ─────────────────────────────────────────────────────────────


def sample_er_dag(d: int, k: float, rng: np.random.Generator) -> Dag:
    """ER(d, k) グラフを生成する。

    各無向ペアを確率 p = k·d / (d(d−1)/2)（[0,1] にクランプ）で独立に採用し、
    一様ランダムなノード順で向きを付ける。
    """
    if d < 1:
        raise ScmError(f'ノード数は 1 以上が必要です: {d}')
    pairs = d * (d - 1) // 2
    p = 0.0 if pairs == 0 else float(np.clip(k * d / pairs, 0.0, 1.0))
    order = rng.permutation(d)
    iu, ju = np.triu_indices(d, k=1)
    keep = rng.random(iu.size) < p
    edges = frozenset(
        (int(order[a]), int(order[b])) for a, b in zip(iu[keep], ju[keep], strict=True)
    )
    return Dag(d=d, edges=edges, topo_order=tuple(int(v) for v in order))


def _signed_uniform(rng: np.random.Generator, size, lo: float, hi: float) -> np.ndarray:
    """U(±[lo, hi]) からのサンプル。"""
    mag = rng.uniform(lo, hi, size=size)
    sign = np.where(rng.random(size) < 0.5, -1.0, 1.0)
    return sign * mag


def sample_weights(
    dag: Dag,
    rng: np.random.Generator,
    variance_range: tuple[float, float] = (1.0, 2.0),
    weight_range: tuple[float, float] = WEIGHT_RANGE,
) -> tuple[np.ndarray, np.ndarray]:
    """辺の重み A と分散ベクトル D を生成する。

    Returns:
        A: A[j, i] ≠ 0 ⇔ i → j、|A[j, i]| ∈ weight_range
        D: 分散 σ² ~ U[variance_range]
    """
    lo, hi = variance_range
    if lo <= 0 or lo > hi:
        raise ScmError(f'分散の範囲が不正です: {variance_range}')
    A = np.zeros((dag.d, dag.d))
    edges = sorted(dag.edges)
    if edges:
        w = _signed_uniform(rng, len(edges), *weight_range)
        for (i, j), a in zip(edges, w, strict=True):
            A[j, i] = a
    D = rng.uniform(lo, hi, size=dag.d)
    return A, D


def observational_family(dag: Dag, A: np.ndarray, D: np.ndarray) -> ScmFamily:
    """観測環境のみのファミリー。"""
    return ScmFamily(dag=dag, A=A, D=D)


def apply_intervention(
    family: ScmFamily,
    target: int,
    kind: InterventionKind | str,
    params: dict | None = None,
    rng: np.random.Generator | None = None,
) -> ScmEnvironment:
    """ノード target への単一ノード介入環境を作る。

    params:
        eta:            シフト量 η（既定 0）
        lam:            完全介入の λ（省略時は variance_range から σ² を引き λ = σ^{-1}）
        row:            不完全介入の新しい行（省略時は重みと分散を再サンプル）
        variance_range: λ / 不完全介入の分散を引く範囲
    """
    kind = InterventionKind(kind)
    params = params or {}
    d = family.d
    if not 0 <= target < d:
        raise ScmError(f'介入対象ノードが範囲外です: {target}')
    eta = float(params.get('eta', 0.0))
    B0 = family.B
    B = B0.copy()

    if kind is InterventionKind.OBSERVATIONAL:
        raise ScmError('観測環境は介入として作れません')

    if kind is InterventionKind.PERFECT:
        lam = params.get('lam')
        if lam is None:
            lam = _sample_lambda(params, rng)
        lam = float(lam)
        if lam <= 0:
            raise ScmError(f'λ は正である必要があります: {lam}')
        B[target] = 0.0
        B[target, target] = lam
        env = ScmEnvironment(B=B, eta=eta, target=target, kind=kind, lam=lam)

    elif kind is InterventionKind.IMPERFECT:
        row = params.get('row')
        if row is None:
            row = _resample_row(family, target, params, rng)
        row = np.asarray(row, dtype=np.float64)
        allowed = set(family.dag.parents(target)) | {target}
        extra = [j for j in np.flatnonzero(row) if int(j) not in allowed]
        if extra:
            raise ScmError(f'不完全介入で新しい親 {extra} を追加することはできません')
        if row[target] <= 0:
            raise ScmError('介入後の対角成分は正である必要があります')
        B[target] = row
        env = ScmEnvironment(B=B, eta=eta, target=target, kind=kind)

    else:
        env = ScmEnvironment(B=B, eta=eta, target=target, kind=kind)

    if _is_trivial(env, family.observational):
        raise ScmError(f'ノード {target} への介入が自明です（分布が変わりません）')
    return env


def _sample_lambda(params: dict, rng: np.random.Generator | None) -> float:
    if rng is None:
        raise ScmError('λ を省略する場合は rng が必要です')
    lo, hi = params.get('variance_range', (1.0, 2.0))
    return float(1.0 / np.sqrt(rng.uniform(lo, hi)))


def _resample_row(
    family: ScmFamily, target: int, params: dict, rng: np.random.Generator | None,
) -> np.ndarray:
    """不完全介入の既定: 親への重みを U(±[0.25,1]) から、分散を設定範囲から引き直す。"""
    if rng is None:
        raise ScmError('row を省略する場合は rng が必要です')
    lo, hi = params.get('variance_range', (1.0, 2.0))
    parents = family.dag.parents(target)
    a = np.zeros(family.d)
    if parents:
        a[parents] = _signed_uniform(rng, len(parents), *WEIGHT_RANGE)
    e = np.zeros(family.d)
    e[target] = 1.0
    return (e - a) / np.sqrt(rng.uniform(lo, hi))


def sample_family(
    d: int,
    k: float,
    rng: np.random.Generator,
    *,
    variance_obs: tuple[float, float] = (1.0, 2.0),
    variance_int: tuple[float, float] = (1.0, 2.0),
    shift_range: tuple[float, float] = (1.0, 2.0),
    kind: InterventionKind | str = InterventionKind.PERFECT,
) -> ScmFamily:
    """ER グラフ・重み・全ノードへの 1 回ずつの介入からなるファミリーを生成する。

    介入 i（1 始まり）の対象は t_i = i − 1。η は U(±[shift_range]) から引く。
    """
    kind = InterventionKind(kind)
    dag = sample_er_dag(d, k, rng)
    A, D = sample_weights(dag, rng, variance_obs)
    base = observational_family(dag, A, D)
    envs: list[ScmEnvironment] = []
    lo, hi = shift_range
    for t in range(d):
        for _attempt in range(_RESAMPLE_LIMIT):
            eta = float(_signed_uniform(rng, 1, lo, hi)[0]) if hi > 0 else 0.0
            try:
                env = apply_intervention(
                    base, t, kind,
                    {'eta': eta, 'variance_range': variance_int}, rng,
                )
                break
            except ScmError:
                logger.debug('ノード %s の介入が自明なため再サンプルします', t)
        else:
            raise ScmError(f'ノード {t} に非自明な介入を生成できませんでした')
        envs.append(env)
    family = base.with_interventions(envs)
    if not family.covers_all_nodes():
        raise ScmError('介入が全ノードを覆っていません')
    return family


def sample_latents(env: ScmEnvironment, n: int, rng: np.random.Generator) -> np.ndarray:
    """Z = B^{-1}(ε + η e_t), ε ~ N(0, Id) を n 行サンプルする。"""
    if n < 1:
        raise ScmError(f'サンプル数は 1 以上が必要です: {n}')
    eps = rng.standard_normal((n, env.d))
    rhs = eps + env.shift_vector()
    return np.linalg.solve(env.B, rhs.T).T


# ── 厳密統計量 ───────────────────────────────────────────────────────────────


def is_triangular_under(B: np.ndarray, order: tuple[int, ...] | list[int]) -> bool:
    """行・列を order で並べ替えると下三角になるか。"""
    P = B[np.ix_(order, order)]
    return bool(np.all(np.triu(P, k=1) == 0.0))


def gaussian_stats(
    env: ScmEnvironment, topo_order: tuple[int, ...] | None = None,
) -> GaussianStats:
    """Θ = BᵀB, Σ = Θ^{-1}, μ = η B^{-1} e_t, ln|Σ| を返す。

    topo_order の下で B が三角なら ln|Σ| = −2 Σ ln B_jj、そうでなければ slogdet。
    """
    B = env.B
    sign, logabsdet = np.linalg.slogdet(B)
    if sign == 0 or not np.isfinite(logabsdet):
        raise ScmError('B が特異です')
    try:
        B_inv = np.linalg.inv(B)
    except np.linalg.LinAlgError as exc:
        raise ScmError('B が特異です') from exc
    theta = B.T @ B
    sigma = B_inv @ B_inv.T
    mu = B_inv @ env.shift_vector()
    if topo_order is not None and is_triangular_under(B, topo_order):
        logdet = float(-2.0 * np.sum(np.log(np.diag(B))))
    else:
        logdet = float(-2.0 * logabsdet)
    return GaussianStats(theta=theta, sigma=sigma, mu=mu, logdet_sigma=logdet)


def precision_difference(
    env_i: ScmEnvironment, env_0: ScmEnvironment,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Δ = Θ^{(i)} − Θ^{(0)} と s（B⁰ の行 t）、s̃（B^{(i)} の行 t）を返す。"""
    if env_i.d != env_0.d:
        raise ScmError('環境の次元が一致しません')
    if env_i.target is None:
        raise ScmError('env_i は単一ノード介入である必要があります')
    t = env_i.target
    delta = env_i.B.T @ env_i.B - env_0.B.T @ env_0.B
    return delta, env_0.B[t].copy(), env_i.B[t].copy()


def matrix_rank(M: np.ndarray, tol: float = 1e-9) -> int:
    """特異値が tol·max(1, σ_max) を超える個数。"""
    s = np.linalg.svd(M, compute_uv=False)
    if s.size == 0:
        return 0
    return int(np.sum(s > tol * max(1.0, s[0])))


def row_replacement_residual(env_i: ScmEnvironment, env_0: ScmEnvironment) -> float:
    """‖B^{(i)} + e_t(Bᵀe_t − s̃)ᵀ − B‖∞。"""
    t = env_i.target
    e = np.zeros(env_i.d)
    e[t] = 1.0
    rebuilt = env_i.B + np.outer(e, env_0.B[t] - env_i.B[t])
    return float(np.abs(rebuilt - env_0.B).max())


def shift_center(env_i: ScmEnvironment, env_0: ScmEnvironment) -> np.ndarray:
    """(Θ^{(i)} − Θ⁰) μ′ = η s̃ を満たす μ′ を返す（平方完成の中心）。

    s と s̃ が共線なら μ′ = κ s̃、そうでなければ μ′·s = 0 かつ μ′·s̃ = η。
    """
    delta, s, s_t = precision_difference(env_i, env_0)
    eta = env_i.eta
    if np.abs(delta).max() < TRIVIAL_TOL:
        raise ScmError('Θ^{(i)} = Θ⁰ のため平方完成できません（純粋シフト）')
    if eta == 0.0:
        return np.zeros(env_i.d)
    ss = float(s @ s)
    proj = s_t - (float(s_t @ s) / ss) * s
    if np.linalg.norm(proj) <= 1e-12 * np.linalg.norm(s_t):
        # s = r·s̃ のとき Δ = (1 − r²) s̃ s̃ᵀ
        r = float(s @ s_t) / float(s_t @ s_t)
        return eta / ((1.0 - r * r) * float(s_t @ s_t)) * s_t
    return eta * proj / float(proj @ s_t)
