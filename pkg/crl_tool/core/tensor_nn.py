"""エンコーダ用の最小テンソルエンジン（逆伝播つき）と Adam・コサイン学習率

アーキテクチャは固定の 3 種類:
  - linear: H = X Wᵀ + b
  - mlp:    FC(hidden) → LeakyReLU → FC(d)
  - conv:   Conv(3→1, k5, s3) → ReLU → MaxPool(k2, s2) → FC(64) → LeakyReLU → FC(d)

画像入力は HWC を平坦化した行ベクトル。forward が返すテープは、その時点の
パラメータ版数を記録し、更新後のテープで backward すると StaleTapeError になる。
"""

from __future__ import annotations

from dataclasses import dataclass, field
from math import cos, pi

import numpy as np

# ── 定数 ─────────────────────────────────────────────────────────────────────

LEAKY_SLOPE = 0.01
HIDDEN_WIDTH = 512
CONV_KERNEL = 5
CONV_STRIDE = 3
CONV_CHANNELS = 3
POOL = 2
CONV_FC_WIDTH = 64
IMAGE_SIDE = 64

ADAM_BETA1 = 0.9
ADAM_BETA2 = 0.999
ADAM_EPS = 1e-8

VARIANTS = ('linear', 'mlp', 'conv')


class ShapeError(ValueError):
    """入力・勾配の形状不一致。"""


class StaleTapeError(RuntimeError):
    """forward 後にパラメータが更新されたテープで backward しようとした。"""


# ── ネットワーク ─────────────────────────────────────────────────────────────


@dataclass(eq=False)
class EncoderNet:
    """エンコーダ h(·, θ)。params は名前付きテンソル。"""
    variant: str
    in_dim: int
    d: int
    params: dict[str, np.ndarray]
    slope: float = LEAKY_SLOPE
    hidden: int = HIDDEN_WIDTH
    side: int = IMAGE_SIDE
    dtype: np.dtype = field(default_factory=lambda: np.dtype(np.float64))
    version: int = 0

    def set_params(self, params: dict[str, np.ndarray]) -> None:
        """パラメータを差し替え、版数を進める。"""
        for name, value in params.items():
            if name not in self.params or value.shape != self.params[name].shape:
                raise ShapeError(f'パラメータ {name} の形状が一致しません')
        self.params = {k: np.asarray(v, dtype=self.dtype) for k, v in params.items()}
        self.version += 1

    @property
    def n_params(self) -> int:
        return int(sum(p.size for p in self.params.values()))

    @property
    def conv_out(self) -> int:
        return (self.side - CONV_KERNEL) // CONV_STRIDE + 1

    @property
    def pool_out(self) -> int:
        return self.conv_out // POOL


@dataclass(eq=False)
class Tape:
    """逆伝播に必要な中間値。"""
    net: EncoderNet
    version: int
    cache: dict[str, np.ndarray]


def conv_geometry(side: int) -> tuple[int, int, int]:
    """(畳み込み出力の一辺, プーリング出力の一辺, 全結合層の入力次元) を返す。"""
    conv_out = (side - CONV_KERNEL) // CONV_STRIDE + 1
    pool_out = conv_out // POOL
    return conv_out, pool_out, pool_out * pool_out


def _uniform(rng: np.random.Generator, fan_in: int, shape: tuple[int, ...]) -> np.ndarray:
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def make_encoder(
    variant: str,
    in_dim: int,
    d: int,
    rng: np.random.Generator,
    *,
    hidden: int | None = None,
    slope: float = LEAKY_SLOPE,
    side: int = IMAGE_SIDE,
    dtype: str | np.dtype = 'float64',
) -> EncoderNet:
    """エンコーダを初期化する。重みは U(±1/√fan_in)、バイアスは 0。"""
    if variant not in VARIANTS:
        raise ShapeError(f'未知のエンコーダです: {variant}')
    if in_dim < 1 or d < 1:
        raise ShapeError(f'次元が不正です: in={in_dim}, d={d}')
    dt = np.dtype(dtype)
    if variant == 'linear':
        params = {'W': _uniform(rng, in_dim, (d, in_dim)), 'b': np.zeros(d)}
        hidden = 0
    elif variant == 'mlp':
        hidden = HIDDEN_WIDTH if hidden is None else hidden
        params = {
            'W1': _uniform(rng, in_dim, (hidden, in_dim)), 'b1': np.zeros(hidden),
            'W2': _uniform(rng, hidden, (d, hidden)), 'b2': np.zeros(d),
        }
    else:
        hidden = CONV_FC_WIDTH if hidden is None else hidden
        if in_dim != side * side * CONV_CHANNELS:
            raise ShapeError(f'画像入力の次元が {side}×{side}×3 と一致しません: {in_dim}')
        conv_out, _pool_out, fc_in = conv_geometry(side)
        if conv_out < POOL or conv_out % POOL:
            raise ShapeError(f'畳み込み出力 {conv_out} をプーリングで割り切れません')
        fan = CONV_KERNEL * CONV_KERNEL * CONV_CHANNELS
        params = {
            'K': _uniform(rng, fan, (CONV_KERNEL, CONV_KERNEL, CONV_CHANNELS)),
            'kb': np.zeros(1),
            'F1': _uniform(rng, fc_in, (hidden, fc_in)), 'f1': np.zeros(hidden),
            'F2': _uniform(rng, hidden, (d, hidden)), 'f2': np.zeros(d),
        }
    params = {k: v.astype(dt) for k, v in params.items()}
    return EncoderNet(variant, in_dim, d, params, slope=slope, hidden=hidden,
                      side=side, dtype=dt)


# ── 順伝播 ───────────────────────────────────────────────────────────────────


def leaky_relu(x: np.ndarray, slope: float) -> np.ndarray:
    return np.where(x > 0, x, slope * x)


def _conv_slices(side: int):
    conv_out = (side - CONV_KERNEL) // CONV_STRIDE + 1
    span = CONV_STRIDE * (conv_out - 1) + 1
    for u in range(CONV_KERNEL):
        for v in range(CONV_KERNEL):
            yield u, v, (slice(u, u + span, CONV_STRIDE), slice(v, v + span, CONV_STRIDE))


def _conv_forward(net: EncoderNet, X: np.ndarray, cache: dict) -> np.ndarray:
    p = net.params
    B = X.shape[0]
    img = X.reshape(B, net.side, net.side, CONV_CHANNELS)
    scale = 1.0 / 255.0 if X.dtype == np.uint8 else 1.0
    K = p['K'] * scale
    conv = np.full((B, net.conv_out, net.conv_out), p['kb'][0], dtype=net.dtype)
    for u, v, (rows, cols) in _conv_slices(net.side):
        conv += img[:, rows, cols, :] @ K[u, v]
    act = np.maximum(conv, 0.0)
    q = net.pool_out
    windows = act.reshape(B, q, POOL, q, POOL).transpose(0, 1, 3, 2, 4).reshape(B, q, q, POOL * POOL)
    arg = windows.argmax(axis=3)
    pooled = np.take_along_axis(windows, arg[..., None], axis=3)[..., 0]
    flat = pooled.reshape(B, q * q)
    z1 = flat @ p['F1'].T + p['f1']
    a1 = leaky_relu(z1, net.slope)
    cache.update(img=img, scale=scale, conv=conv, arg=arg, flat=flat, z1=z1, a1=a1)
    return a1 @ p['F2'].T + p['f2']


def forward(net: EncoderNet, X: np.ndarray) -> tuple[np.ndarray, Tape]:
    """H = h(X, θ) を計算し、逆伝播用のテープと一緒に返す。

    畳み込みネットは uint8 画像（0–255）をそのまま受け取り、内部で 1/255 倍する。
    """
    X = np.asarray(X)
    raw_image = net.variant == 'conv' and X.dtype == np.uint8
    if not raw_image:
        X = X.astype(net.dtype, copy=False)
    if X.ndim != 2 or X.shape[1] != net.in_dim:
        raise ShapeError(f'入力の形状が (batch, {net.in_dim}) ではありません: {X.shape}')
    p = net.params
    cache: dict[str, np.ndarray] = {'X': X}
    if net.variant == 'linear':
        H = X @ p['W'].T + p['b']
    elif net.variant == 'mlp':
        z1 = X @ p['W1'].T + p['b1']
        a1 = leaky_relu(z1, net.slope)
        cache.update(z1=z1, a1=a1)
        H = a1 @ p['W2'].T + p['b2']
    else:
        H = _conv_forward(net, X, cache)
    return H, Tape(net=net, version=net.version, cache=cache)


# ── 逆伝播 ───────────────────────────────────────────────────────────────────


def _leaky_grad(z: np.ndarray, slope: float) -> np.ndarray:
    return np.where(z > 0, 1.0, slope).astype(z.dtype, copy=False)


def _conv_backward(net: EncoderNet, c: dict, dH: np.ndarray, need_input: bool):
    p = net.params
    B = dH.shape[0]
    q = net.pool_out
    grads = {
        'F2': dH.T @ c['a1'],
        'f2': dH.sum(axis=0),
    }
    dz1 = (dH @ p['F2']) * _leaky_grad(c['z1'], net.slope)
    grads['F1'] = dz1.T @ c['flat']
    grads['f1'] = dz1.sum(axis=0)
    dpooled = (dz1 @ p['F1']).reshape(B, q, q)

    dwin = np.zeros((B, q, q, POOL * POOL), dtype=net.dtype)
    np.put_along_axis(dwin, c['arg'][..., None], dpooled[..., None], axis=3)
    dact = dwin.reshape(B, q, q, POOL, POOL).transpose(0, 1, 3, 2, 4).reshape(
        B, q * POOL, q * POOL)
    dconv = np.zeros_like(c['conv'])
    dconv[:, :q * POOL, :q * POOL] = dact
    dconv *= c['conv'] > 0

    dK = np.zeros_like(p['K'])
    dimg = np.zeros(c['img'].shape, dtype=net.dtype) if need_input else None
    for u, v, (rows, cols) in _conv_slices(net.side):
        patch = c['img'][:, rows, cols, :]
        dK[u, v] = np.einsum('bij,bijc->c', dconv, patch) * c['scale']
        if dimg is not None:
            dimg[:, rows, cols, :] += dconv[..., None] * (p['K'][u, v] * c['scale'])
    grads['K'] = dK
    grads['kb'] = np.array([dconv.sum()], dtype=net.dtype)
    dX = None if dimg is None else dimg.reshape(B, -1)
    return grads, dX


def backward(
    tape: Tape, output_grad: np.ndarray, *, need_input_grad: bool = True,
) -> tuple[dict[str, np.ndarray], np.ndarray | None]:
    """∂L/∂H からパラメータ勾配と入力勾配を返す。"""
    net = tape.net
    if tape.version != net.version:
        raise StaleTapeError(
            f'テープが古くなっています (forward 時 v{tape.version}, 現在 v{net.version})'
        )
    c = tape.cache
    dH = np.asarray(output_grad, dtype=net.dtype)
    if dH.shape != (c['X'].shape[0], net.d):
        raise ShapeError(f'出力勾配の形状が一致しません: {dH.shape}')
    p = net.params
    if net.variant == 'linear':
        grads = {'W': dH.T @ c['X'], 'b': dH.sum(axis=0)}
        dX = dH @ p['W'] if need_input_grad else None
        return grads, dX
    if net.variant == 'mlp':
        grads = {'W2': dH.T @ c['a1'], 'b2': dH.sum(axis=0)}
        dz1 = (dH @ p['W2']) * _leaky_grad(c['z1'], net.slope)
        grads['W1'] = dz1.T @ c['X']
        grads['b1'] = dz1.sum(axis=0)
        dX = dz1 @ p['W1'] if need_input_grad else None
        return grads, dX
    return _conv_backward(net, c, dH, need_input_grad)


# ── 最適化 ───────────────────────────────────────────────────────────────────


@dataclass(eq=False)
class OptimizerState:
    """Adam の状態。m, v はパラメータと同じ形状。"""
    lr: float
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = ADAM_BETA1
    beta2: float = ADAM_BETA2
    eps: float = ADAM_EPS


def init_adam(params: dict[str, np.ndarray], lr: float) -> OptimizerState:
    return OptimizerState(
        lr=lr,
        m={k: np.zeros_like(v) for k, v in params.items()},
        v={k: np.zeros_like(v) for k, v in params.items()},
    )


def adam_step(
    state: OptimizerState,
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    lr: float | None = None,
) -> dict[str, np.ndarray]:
    """バイアス補正つき Adam で 1 ステップ進めた新しいパラメータ辞書を返す。

    grads に無いパラメータはそのまま。lr を省略すると state.lr を使う。
    """
    lr = state.lr if lr is None else lr
    state.step += 1
    t = state.step
    c1 = 1.0 - state.beta1 ** t
    c2 = 1.0 - state.beta2 ** t
    out = dict(params)
    for name, g in grads.items():
        if g.shape != params[name].shape:
            raise ShapeError(f'勾配 {name} の形状が一致しません: {g.shape}')
        m = state.m[name] = state.beta1 * state.m[name] + (1.0 - state.beta1) * g
        v = state.v[name] = state.beta2 * state.v[name] + (1.0 - state.beta2) * g * g
        out[name] = params[name] - lr * (m / c1) / (np.sqrt(v / c2) + state.eps)
    return out


def cosine_lr(base_lr: float, epoch: int, total_epochs: int) -> float:
    """コサインアニーリング: base·(1 + cos(π·epoch/total))/2（下限 0）。"""
    if total_epochs <= 0:
        return base_lr
    if not 0 <= epoch <= total_epochs:
        raise ValueError(f'epoch は 0..{total_epochs} の範囲で指定してください: {epoch}')
    return max(0.0, base_lr * (1.0 + cos(pi * epoch / total_epochs)) / 2.0)
