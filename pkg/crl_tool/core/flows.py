"""分布を保つ非線形写像（2 次元のフロー・半径依存回転）

ベクトル場 X の流れ Φ_t（∂_t Φ_t(z) = X(Φ_t(z))）は、div(p·X) = 0 なら密度 p の
分布を保つ。ここでは 2 種類の X を作り、固定刻みの RK4 で積分する。

- gaussian_pair: 2 つの中心化ガウス分布 Σ₀ ≺ Σ₁ を同時に保つ
- do_intervention: N(0, Id) を保ち、座標軸の近くでは恒等写像
"""

from __future__ import annotations

from collections.abc import Callable
from dataclasses import dataclass, field

import numpy as np

VARIANTS = ('gaussian_pair', 'do_intervention')
DEFAULT_STEP = 1e-3
MAX_STEP = 1e-2

VectorField = Callable[[np.ndarray], np.ndarray]


class FlowError(ValueError):
    """フローの構築条件を満たさない。"""


@dataclass(frozen=True)
class FlowSpec:
    """フローの設定。

    gaussian_pair は正規化座標の半径 [r0, r1] に台を持つ動径バンプを、
    do_intervention は中心 center・半径 radius の円板に台を持つバンプを使う。
    """
    variant: str
    r0: float = 0.5
    r1: float = 1.5
    amplitude: float = 0.2
    t: float = 1.0
    step: float = DEFAULT_STEP
    center: tuple[float, float] = (1.25, 1.25)
    radius: float = 1.0

    def __post_init__(self) -> None:
        if self.variant not in VARIANTS:
            raise FlowError(f'未知のフローです: {self.variant}')
        if not 0 < self.step <= MAX_STEP:
            raise FlowError(f'刻み幅は (0, {MAX_STEP}] の範囲で指定してください: {self.step}')
        if self.variant == 'gaussian_pair' and not 0 < self.r0 < self.r1:
            raise FlowError(f'バンプの台は 0 < r0 < r1 が必要です: [{self.r0}, {self.r1}]')
        if self.variant == 'do_intervention' and self.radius <= 0:
            raise FlowError(f'バンプの半径は正である必要があります: {self.radius}')


# ── 基本部品 ─────────────────────────────────────────────────────────────────


def radial_bump(r: np.ndarray, r0: float, r1: float, amplitude: float = 1.0) -> np.ndarray:
    """amp·(1 − u²)³（u は [r0, r1] を [−1, 1] に写した値）。台の外では厳密に 0。"""
    r = np.asarray(r, dtype=np.float64)
    u = (2.0 * r - r0 - r1) / (r1 - r0)
    inside = np.abs(u) < 1.0
    return np.where(inside, amplitude * (1.0 - u * u) ** 3, 0.0)


def rk4(vector_field: VectorField, Y: np.ndarray, t: float, step: float = DEFAULT_STEP) -> np.ndarray:
    """Y の各行を時間 t だけ流す（t < 0 なら逆向き）。刻みは |t|/ceil(|t|/step)。"""
    Y = np.array(Y, dtype=np.float64)
    if t == 0:
        return Y
    n = int(np.ceil(abs(t) / step))
    h = t / n
    for _ in range(n):
        k1 = vector_field(Y)
        k2 = vector_field(Y + 0.5 * h * k1)
        k3 = vector_field(Y + 0.5 * h * k2)
        k4 = vector_field(Y + h * k3)
        Y = Y + (h / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return Y


def _as_points(z: np.ndarray) -> tuple[np.ndarray, bool]:
    z = np.asarray(z, dtype=np.float64)
    Z = np.atleast_2d(z)
    if Z.shape[1] != 2:
        raise FlowError(f'2 次元の点が必要です: shape={z.shape}')
    return Z, z.ndim == 1


def radius_rotation(z: np.ndarray, angle_fn: Callable[[np.ndarray], np.ndarray]) -> np.ndarray:
    """z を角度 angle_fn(‖z‖) だけ回転する。ノルムは変わらない。"""
    Z, single = _as_points(z)
    theta = np.asarray(angle_fn(np.linalg.norm(Z, axis=1)), dtype=np.float64)
    c, s = np.cos(theta), np.sin(theta)
    out = np.column_stack([c * Z[:, 0] - s * Z[:, 1], s * Z[:, 0] + c * Z[:, 1]])
    return out[0] if single else out


# ── フロー写像 ───────────────────────────────────────────────────────────────


@dataclass(eq=False)
class FlowMap:
    """h(z) = T^{-1} Φ_t(T z)。T は正規化の線形変換。"""
    spec: FlowSpec
    vector_field: VectorField
    to_flow: np.ndarray = field(default_factory=lambda: np.eye(2))
    from_flow: np.ndarray = field(default_factory=lambda: np.eye(2))

    def _flow(self, z: np.ndarray, t: float) -> np.ndarray:
        Z, single = _as_points(z)
        Y = rk4(self.vector_field, Z @ self.to_flow.T, t, self.spec.step)
        out = Y @ self.from_flow.T
        return out[0] if single else out

    def __call__(self, z: np.ndarray) -> np.ndarray:
        return self._flow(z, self.spec.t)

    def inverse(self, z: np.ndarray) -> np.ndarray:
        return self._flow(z, -self.spec.t)


def gaussian_pair_flow(sigma0: np.ndarray, sigma1: np.ndarray, spec: FlowSpec) -> FlowMap:
    """N(0, Σ₀) と N(0, Σ₁) を同時に保つ非線形写像（d = 2, Σ₁ − Σ₀ ≻ 0）。

    Σ₀^{-1/2} で白色化し、Σ₀^{-1/2}Σ₁Σ₀^{-1/2} = V diag(λ) Vᵀ を対角化したうえで
    座標 j を √δ_j（δ_j = 1 − 1/λ_j）倍すると、ln p₀ − ln p₁ = −½|y|² + 定数 になる。
    この座標で X(y) = φ(|y|)(−y₂, y₁)/p₀(y) とする。
    """
    if spec.variant != 'gaussian_pair':
        raise FlowError(f'gaussian_pair 用の設定ではありません: {spec.variant}')
    S0 = np.asarray(sigma0, dtype=np.float64)
    S1 = np.asarray(sigma1, dtype=np.float64)
    if S0.shape != (2, 2) or S1.shape != (2, 2):
        raise FlowError('共分散は 2×2 行列である必要があります')
    w0, V0 = np.linalg.eigh(S0)
    if w0.min() <= 0:
        raise FlowError('Σ₀ が正定値ではありません')
    if np.linalg.eigvalsh(S1 - S0).min() <= 0:
        raise FlowError('Σ₁ − Σ₀ が正定値ではありません')
    inv_sqrt = V0 @ np.diag(w0 ** -0.5) @ V0.T
    lam, V = np.linalg.eigh(inv_sqrt @ S1 @ inv_sqrt)
    delta = 1.0 - 1.0 / lam
    T = np.diag(np.sqrt(delta)) @ V.T @ inv_sqrt
    inv_delta = 1.0 / delta

    def vector_field(Y: np.ndarray) -> np.ndarray:
        r = np.sqrt(Y[:, 0] ** 2 + Y[:, 1] ** 2)
        phi = radial_bump(r, spec.r0, spec.r1, spec.amplitude)
        active = phi > 0
        scale = np.zeros_like(r)
        scale[active] = phi[active] * np.exp(0.5 * (Y[active] ** 2 @ inv_delta))
        return scale[:, None] * np.column_stack([-Y[:, 1], Y[:, 0]])

    return FlowMap(spec, vector_field, to_flow=T, from_flow=np.linalg.inv(T))


def do_intervention_flow(spec: FlowSpec) -> FlowMap:
    """N(0, Id) を保ち、2 本の座標軸を点ごとに固定する非線形写像。

    X₀ はバンプ b(z) = (1 − |z − c|²/R²)³ の直交勾配（発散 0）、X = X₀·e^{|z|²/2}。
    バンプの台は開第一象限に含まれていなければならない。
    """
    if spec.variant != 'do_intervention':
        raise FlowError(f'do_intervention 用の設定ではありません: {spec.variant}')
    c = np.asarray(spec.center, dtype=np.float64)
    R = float(spec.radius)
    if c.shape != (2,) or np.any(c - R <= 0):
        raise FlowError(f'バンプの台 (中心 {tuple(c)}, 半径 {R}) が座標軸に接しています')

    def vector_field(Z: np.ndarray) -> np.ndarray:
        D = Z - c
        u2 = (D[:, 0] ** 2 + D[:, 1] ** 2) / (R * R)
        active = u2 < 1.0
        out = np.zeros_like(Z)
        if np.any(active):
            # ∇b = −6(1 − u²)² (z − c)/R²
            coef = -6.0 * (1.0 - u2[active]) ** 2 / (R * R)
            grad = coef[:, None] * D[active]
            weight = spec.amplitude * np.exp(0.5 * np.sum(Z[active] ** 2, axis=1))
            out[active] = weight[:, None] * np.column_stack([-grad[:, 1], grad[:, 0]])
        return out

    return FlowMap(spec, vector_field)
