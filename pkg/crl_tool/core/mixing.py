"""混合関数 f: ℝ^d → ℝ^{d'}

  - linear: 成分 i.i.d. N(0,1) の d'×d 行列
  - mlp:    FC512-LeakyReLU(0.2) ×3 → FC d'（重み U(±1/√in)、バイアス 0）
  - image:  (z_{2b}, z_{2b+1}) を座標とするボールを 64×64 RGB 画像に描画

画像の座標変換は pixel = floor((z + 0.5)·side)、第 1 座標が列、第 2 座標が行。
ボールは (x−cx)² + (y−cy)² ≤ r² を満たす画素の塗りつぶし（アンチエイリアスなし）。
"""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from core.scm import ScmFamily, sample_latents

logger = logging.getLogger(__name__)

# ── 定数 ─────────────────────────────────────────────────────────────────────

MLP_WIDTH = 512
MLP_HIDDEN_LAYERS = 3
MLP_SLOPE = 0.2

IMAGE_SIDE = 64
BALL_RADIUS = 5
BALL_COLORS: tuple[tuple[int, int, int], ...] = (
    (255, 0, 0),
    (0, 255, 0),
    (0, 0, 255),
    (255, 255, 0),
    (255, 0, 255),
    (0, 255, 255),
    (255, 128, 0),
    (128, 0, 255),
)

_MIN_SINGULAR = 1e-8
_MAX_REDRAWS = 100
# 画像の棄却サンプリングで 1 回に引く量の上限倍率
_OVERDRAW = 1.25


class MixingError(ValueError):
    """混合関数の構築・適用の失敗。"""


@dataclass(frozen=True, eq=False)
class MixingFunction:
    """混合関数。variant に応じて matrix / layers / 画像設定のいずれかを持つ。"""
    variant: str
    d: int
    d_prime: int
    matrix: np.ndarray | None = None
    layers: tuple[tuple[np.ndarray, np.ndarray], ...] = ()
    slope: float = MLP_SLOPE
    radius: int = BALL_RADIUS
    side: int = IMAGE_SIDE
    colors: tuple[tuple[int, int, int], ...] = field(default=BALL_COLORS)

    @property
    def n_balls(self) -> int:
        return self.d // 2

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return (self.side, self.side, 3)


# ── 構築 ─────────────────────────────────────────────────────────────────────


def make_linear_mixing(d: int, d_prime: int, rng: np.random.Generator) -> MixingFunction:
    """成分 i.i.d. N(0,1) の線形混合。列フルランクでなければ引き直す。"""
    if d < 1 or d_prime < d:
        raise MixingError(f"d' ≥ d ≥ 1 が必要です: d={d}, d'={d_prime}")
    for attempt in range(_MAX_REDRAWS):
        M = rng.standard_normal((d_prime, d))
        smin = np.linalg.svd(M, compute_uv=False).min()
        if smin > _MIN_SINGULAR:
            return MixingFunction('linear', d, d_prime, matrix=M)
        logger.warning('線形混合がランク落ちのため再サンプルします (%s 回目, σ_min=%s)',
                       attempt + 1, smin)
    raise MixingError('列フルランクの線形混合を生成できませんでした')


def make_mlp_mixing(d: int, d_prime: int, rng: np.random.Generator) -> MixingFunction:
    """3 隠れ層 MLP 混合。"""
    if d < 1 or d_prime < d:
        raise MixingError(f"d' ≥ d ≥ 1 が必要です: d={d}, d'={d_prime}")
    sizes = [d] + [MLP_WIDTH] * MLP_HIDDEN_LAYERS + [d_prime]
    layers = []
    for fan_in, fan_out in zip(sizes[:-1], sizes[1:], strict=True):
        bound = 1.0 / np.sqrt(fan_in)
        W = rng.uniform(-bound, bound, size=(fan_out, fan_in))
        layers.append((W, np.zeros(fan_out)))
    return MixingFunction('mlp', d, d_prime, layers=tuple(layers))


def make_image_mixing(
    d: int, radius: int = BALL_RADIUS, side: int = IMAGE_SIDE,
) -> MixingFunction:
    """ボール画像混合。d は偶数で、ボール数は d/2。"""
    if d < 2 or d % 2:
        raise MixingError(f'画像混合には偶数の d が必要です: {d}')
    if d // 2 > len(BALL_COLORS):
        raise MixingError(f'ボールは最大 {len(BALL_COLORS)} 個までです')
    if radius < 0 or 2 * radius + 1 > side:
        raise MixingError(f'半径が画像に収まりません: r={radius}, side={side}')
    return MixingFunction('image', d, side * side * 3, radius=radius, side=side)


def make_mixing(
    variant: str, d: int, d_prime: int, rng: np.random.Generator, *,
    radius: int = BALL_RADIUS,
) -> MixingFunction:
    """variant 名から混合関数を作る。"""
    if variant == 'linear':
        return make_linear_mixing(d, d_prime, rng)
    if variant == 'mlp':
        return make_mlp_mixing(d, d_prime, rng)
    if variant == 'image':
        return make_image_mixing(d, radius=radius)
    raise MixingError(f'未知の混合関数です: {variant}')


# ── 適用 ─────────────────────────────────────────────────────────────────────


def _leaky(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _mlp_forward(f: MixingFunction, Z: np.ndarray) -> np.ndarray:
    h = Z
    for k, (W, b) in enumerate(f.layers):
        h = h @ W.T + b
        if k < len(f.layers) - 1:
            h = _leaky(h, f.slope)
    return h


def ball_centers(z: np.ndarray, side: int = IMAGE_SIDE) -> np.ndarray:
    """潜在ベクトルからボール中心の画素座標 (列, 行) を返す。shape = (ボール数, 2)。"""
    return np.floor((np.asarray(z, dtype=np.float64).reshape(-1, 2) + 0.5) * side).astype(int)


def _fits(centers: np.ndarray, radius: int, side: int) -> bool:
    return bool(np.all(centers - radius >= 0) and np.all(centers + radius <= side - 1))


def _disk_offsets(radius: int) -> tuple[np.ndarray, np.ndarray]:
    r = np.arange(-radius, radius + 1)
    dy, dx = np.meshgrid(r, r, indexing='ij')
    inside = dx * dx + dy * dy <= radius * radius
    return dy[inside], dx[inside]


def _render_u8(f: MixingFunction, z: np.ndarray, offsets) -> np.ndarray | None:
    centers = ball_centers(z, f.side)
    if not _fits(centers, f.radius, f.side):
        return None
    img = np.zeros(f.image_shape, dtype=np.uint8)
    dy, dx = offsets
    for b, (cx, cy) in enumerate(centers):
        img[cy + dy, cx + dx] = f.colors[b]
    return img


def render_balls(z: np.ndarray, f: MixingFunction) -> np.ndarray | None:
    """1 サンプルを side×side×3 の [0,1] 画像に描画する。枠外なら None。"""
    if f.variant != 'image':
        raise MixingError('render_balls は画像混合専用です')
    if np.size(z) != f.d:
        raise MixingError(f'潜在次元が一致しません: {np.size(z)} != {f.d}')
    img = _render_u8(f, z, _disk_offsets(f.radius))
    return None if img is None else img.astype(np.float64) / 255.0


def apply_mixing(
    f: MixingFunction, Z: np.ndarray, *, as_uint8: bool = False,
) -> tuple[np.ndarray, np.ndarray]:
    """X = f(Z) を行ごとに計算する。

    Returns:
        X:        n_kept × d'（画像は HWC を平坦化）
        rejected: 棄却された行の添字（画像以外は常に空）

    as_uint8 は画像混合で 0–255 の uint8 を返す（メモリ節約用）。
    """
    Z = np.asarray(Z, dtype=np.float64)
    if Z.ndim != 2 or Z.shape[1] != f.d:
        raise MixingError(f'Z の列数が d={f.d} と一致しません: shape={Z.shape}')
    empty = np.zeros(0, dtype=np.int64)
    if f.variant == 'linear':
        return Z @ f.matrix.T, empty
    if f.variant == 'mlp':
        return _mlp_forward(f, Z), empty
    if f.variant != 'image':
        raise MixingError(f'未知の混合関数です: {f.variant}')

    offsets = _disk_offsets(f.radius)
    kept: list[np.ndarray] = []
    rejected: list[int] = []
    for idx, z in enumerate(Z):
        img = _render_u8(f, z, offsets)
        if img is None:
            rejected.append(idx)
        else:
            kept.append(img.reshape(-1))
    X = np.stack(kept) if kept else np.zeros((0, f.d_prime), dtype=np.uint8)
    if not as_uint8:
        X = X.astype(np.float64) / 255.0
    return X, np.asarray(rejected, dtype=np.int64)


def mixing_jacobian(f: MixingFunction, z: np.ndarray) -> np.ndarray:
    """点 z での d'×d ヤコビアン（linear / mlp のみ）。"""
    if f.variant == 'linear':
        return f.matrix.copy()
    if f.variant != 'mlp':
        raise MixingError('ヤコビアンは linear / mlp のみ対応です')
    J = np.eye(f.d)
    h = np.asarray(z, dtype=np.float64)
    for k, (W, b) in enumerate(f.layers):
        pre = W @ h + b
        J = W @ J
        if k < len(f.layers) - 1:
            gate = np.where(pre > 0, 1.0, f.slope)
            J = gate[:, None] * J
            h = _leaky(pre, f.slope)
    return J


def lipschitz_bound(f: MixingFunction) -> float:
    """各層のスペクトルノルムの積（LeakyReLU は 1-Lipschitz）。"""
    if f.variant == 'linear':
        return float(np.linalg.norm(f.matrix, 2))
    if f.variant != 'mlp':
        raise MixingError('Lipschitz 定数は linear / mlp のみ対応です')
    return float(np.prod([np.linalg.norm(W, 2) for W, _b in f.layers]))


def invert_linear_mixing(f: MixingFunction) -> np.ndarray:
    """線形混合の左逆行列（擬似逆行列, d×d'）。"""
    if f.variant != 'linear':
        raise MixingError('左逆行列は線形混合のみ対応です')
    return np.linalg.pinv(f.matrix)


# ── 環境ごとのデータ生成 ─────────────────────────────────────────────────────


@dataclass(eq=False)
class EnvironmentSample:
    """1 環境分の潜在変数と観測。"""
    env_index: int
    Z: np.ndarray
    X: np.ndarray
    rejected: int = 0


def sample_environment(
    family: ScmFamily,
    f: MixingFunction,
    env_index: int,
    n: int,
    rng: np.random.Generator,
    *,
    as_uint8: bool = True,
) -> EnvironmentSample:
    """環境 env_index から n 個の観測を生成する。

    画像混合では棄却された行を捨て、n 個揃うまで潜在変数を引き直す。
    """
    env = family.environments[env_index]
    if f.variant != 'image':
        Z = sample_latents(env, n, rng)
        X, _ = apply_mixing(f, Z)
        return EnvironmentSample(env_index, Z, X)

    Z_parts: list[np.ndarray] = []
    X_parts: list[np.ndarray] = []
    have = 0
    rejected = 0
    for _round in range(_MAX_REDRAWS):
        need = n - have
        if need <= 0:
            break
        draw = max(int(np.ceil(need * _OVERDRAW)), 1)
        Z = sample_latents(env, draw, rng)
        X, rej = apply_mixing(f, Z, as_uint8=as_uint8)
        keep = np.setdiff1d(np.arange(draw), rej, assume_unique=True)
        rejected += int(rej.size)
        Z_parts.append(Z[keep][:need])
        X_parts.append(X[:need])
        have += min(need, keep.size)
    if have < n:
        raise MixingError(f'環境 {env_index} で {n} 個の画像を揃えられませんでした')
    logger.info('環境 %s: 画像 %s 枚を生成（棄却 %s 枚）', env_index, n, rejected)
    return EnvironmentSample(env_index, np.concatenate(Z_parts), np.concatenate(X_parts), rejected)


def sample_observations(
    family: ScmFamily, f: MixingFunction, n: int, rng: np.random.Generator,
) -> list[EnvironmentSample]:
    """全環境について n 個ずつ観測を生成する。環境ごとに独立な子ソースを使う。"""
    children = rng.spawn(len(family.environments))
    return [
        sample_environment(family, f, idx, n, child)
        for idx, child in enumerate(children)
    ]


def save_preview(samples: np.ndarray, f: MixingFunction, path: str, columns: int = 8) -> str:
    """画像サンプルの先頭数枚をタイル状に並べた PNG を保存する。"""
    if f.variant != 'image':
        raise MixingError('プレビューは画像混合専用です')
    count = min(len(samples), columns * 2)
    if count == 0:
        raise MixingError('プレビューするサンプルがありません')
    rows = -(-count // columns)
    sheet = Image.new('RGB', (columns * f.side, rows * f.side))
    for k in range(count):
        tile = np.asarray(samples[k]).reshape(f.image_shape)
        if tile.dtype != np.uint8:
            tile = np.clip(np.rint(tile * 255.0), 0, 255).astype(np.uint8)
        sheet.paste(Image.fromarray(tile), ((k % columns) * f.side, (k // columns) * f.side))
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    sheet.save(path)
    return path
