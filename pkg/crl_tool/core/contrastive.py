"""対照学習器: 二次形式の対数オッズヘッド・交差エントロピー・NOTEARS/L1 正則化・学習ループ

介入 i（1 始まり）の分類器は観測サンプル（ラベル 0）と介入 i のサンプル（ラベル 1）を
見分ける。ロジットは

    g_i(x) = α_i − β_i h_i² + γ_i h_i + ⟨h, w^{(i)}⟩²,   h = h(x, θ)

で、w^{(i)} は W = D_w(Id − A_w) の行 i。対象ノードは t_i = i とみなす。
D_w は対数パラメータ log_dw で持ち、正則化は A_w のみに掛ける。
"""

from __future__ import annotations

import copy
import logging
from dataclasses import dataclass, field
from math import log

import numpy as np
from scipy.linalg import expm
from scipy.special import expit

from core.metrics import column_correlations
from core.tensor_nn import (
    EncoderNet,
    adam_step,
    backward,
    cosine_lr,
    forward,
    init_adam,
    make_encoder,
)
from utils.rng import STREAM_TRAIN, make_rng

logger = logging.getLogger(__name__)

LN2 = log(2.0)
# 検証 CE を計算するときの 1 回あたりの行数
_EVAL_CHUNK = 4096
_MIN_SCALE = 1e-12


class TrainingDivergedError(RuntimeError):
    """学習が発散した（損失が NaN または上限超過）。"""

    def __init__(self, message: str, diagnostics: dict | None = None) -> None:
        super().__init__(message)
        self.diagnostics = diagnostics or {}


# ── パラメータ ───────────────────────────────────────────────────────────────


@dataclass(eq=False)
class HeadParams:
    """ヘッドのパラメータ。A_w の対角は常に 0（学習しない）。"""
    alpha: np.ndarray
    beta: np.ndarray
    gamma: np.ndarray
    log_dw: np.ndarray
    A_w: np.ndarray

    def __post_init__(self) -> None:
        self.A_w = np.array(self.A_w, dtype=np.float64)
        np.fill_diagonal(self.A_w, 0.0)

    @property
    def d(self) -> int:
        return self.alpha.shape[0]

    @property
    def D_w(self) -> np.ndarray:
        return np.diag(np.exp(self.log_dw))

    @property
    def W(self) -> np.ndarray:
        """W = D_w(Id − A_w)。"""
        return np.exp(self.log_dw)[:, None] * (np.eye(self.d) - self.A_w)

    @property
    def W0(self) -> np.ndarray:
        """W の対角を 0 にしたもの（= −D_w A_w）。"""
        W0 = self.W
        np.fill_diagonal(W0, 0.0)
        return W0

    def as_dict(self) -> dict[str, np.ndarray]:
        return {
            'alpha': self.alpha, 'beta': self.beta, 'gamma': self.gamma,
            'log_dw': self.log_dw, 'A_w': self.A_w,
        }

    @classmethod
    def from_dict(cls, data: dict[str, np.ndarray]) -> HeadParams:
        return cls(**{k: np.asarray(data[k], dtype=np.float64) for k in
                      ('alpha', 'beta', 'gamma', 'log_dw', 'A_w')})

    @classmethod
    def from_w(cls, alpha, beta, gamma, W: np.ndarray) -> HeadParams:
        """W（対角が正）から D_w = diag(W), A_w = Id − D_w^{-1}W に分解して作る。"""
        W = np.asarray(W, dtype=np.float64)
        dw = np.diag(W)
        if np.any(dw <= 0):
            raise ValueError('W の対角成分は正である必要があります')
        A_w = np.eye(W.shape[0]) - W / dw[:, None]
        return cls(np.asarray(alpha, float), np.asarray(beta, float),
                   np.asarray(gamma, float), np.log(dw), A_w)


def init_head(d: int) -> HeadParams:
    """α=0, β=1/2, γ=0, D_w=Id, A_w=0 で初期化する。"""
    return HeadParams(
        alpha=np.zeros(d), beta=np.full(d, 0.5), gamma=np.zeros(d),
        log_dw=np.zeros(d), A_w=np.zeros((d, d)),
    )


@dataclass(frozen=True)
class TrainConfig:
    """学習のハイパーパラメータ。"""
    tau1: float = 1e-5
    tau2: float = 1e-4
    lr: float = 5e-4
    batch: int = 512
    epochs: int = 200
    split: tuple[float, float] = (0.8, 0.2)
    seed: int = 0
    encoder: str = 'mlp'
    hidden: int | None = None
    slope: float = 0.01
    fix_dw: bool = False
    dtype: str = 'float64'
    divergence_factor: float = 10.0

    def __post_init__(self) -> None:
        for name in ('tau1', 'tau2', 'lr'):
            if getattr(self, name) < 0:
                raise ValueError(f'{name} は非負である必要があります')
        if self.batch < 1 or self.epochs < 1:
            raise ValueError('batch と epochs は 1 以上が必要です')
        if len(self.split) != 2 or min(self.split) <= 0 or abs(sum(self.split) - 1.0) > 1e-9:
            raise ValueError(f'split は正の 2 数で和が 1 である必要があります: {self.split}')
        if self.dtype not in ('float64', 'float32'):
            raise ValueError(f'未対応の dtype です: {self.dtype}')


@dataclass(eq=False)
class ContrastiveModel:
    """学習済みモデル（エンコーダ・ヘッド・入力標準化・中心化ベクトル）。"""
    encoder: EncoderNet
    head: HeadParams
    config: TrainConfig
    x_mean: np.ndarray | None = None
    x_scale: np.ndarray | None = None
    center: np.ndarray | None = None
    curve: list[dict[str, float]] = field(default_factory=list)
    best_epoch: int = -1
    best_val_ce: float = float('inf')

    @property
    def d(self) -> int:
        return self.head.d


# ── ヘッド・損失 ─────────────────────────────────────────────────────────────


def head_logits(H: np.ndarray, problem: np.ndarray, head: HeadParams) -> np.ndarray:
    """各行 r について g_{problem[r]+1}(H[r]) を計算する（problem は 0 始まり）。"""
    k = np.asarray(problem)
    rows = np.arange(H.shape[0])
    W = head.W
    proj = np.sum(H * W[k], axis=1)
    hk = H[rows, k]
    return head.alpha[k] - head.beta[k] * hk * hk + head.gamma[k] * hk + proj * proj


def log_odds_head(h: np.ndarray, i: int, head: HeadParams) -> np.ndarray | float:
    """g_i(h) = α_i − β_i h_i² + γ_i h_i + ⟨h, w^{(i)}⟩²（i は 1 始まり）。"""
    if not 1 <= i <= head.d:
        raise IndexError(f'介入番号は 1..{head.d} の範囲で指定してください: {i}')
    H = np.atleast_2d(np.asarray(h, dtype=np.float64))
    g = head_logits(H, np.full(H.shape[0], i - 1), head)
    return float(g[0]) if np.ndim(h) == 1 else g


def ce_loss(g, label) -> np.ndarray | float:
    """−[y·g − ln(1 + e^g)] を softplus で安定に計算する。"""
    g = np.asarray(g, dtype=np.float64)
    y = np.asarray(label)
    out = np.logaddexp(0.0, np.where(y > 0, -g, g))
    return float(out) if out.ndim == 0 else out


def notears_penalty(W0: np.ndarray) -> tuple[float, np.ndarray]:
    """R(W₀) = tr exp(W₀∘W₀) − d と勾配 exp(W₀∘W₀)ᵀ ∘ 2W₀。"""
    W0 = np.asarray(W0, dtype=np.float64)
    E = expm(W0 * W0)
    return float(np.trace(E) - W0.shape[0]), E.T * 2.0 * W0


@dataclass(eq=False)
class ContrastiveBatch:
    """1 ステップ分の行。problem は 0 始まりの介入番号、y は 1 = 介入サンプル。"""
    X: np.ndarray
    problem: np.ndarray
    y: np.ndarray


@dataclass(eq=False)
class LossResult:
    total: float
    ce: float
    notears: float
    l1: float
    encoder_grads: dict[str, np.ndarray]
    head_grads: dict[str, np.ndarray]


def _head_backward(
    H: np.ndarray, batch: ContrastiveBatch, head: HeadParams, weights: np.ndarray,
) -> tuple[np.ndarray, dict[str, np.ndarray], np.ndarray]:
    """CE の H・ヘッド勾配。weights は行ごとの 1/n_k。"""
    k = batch.problem
    rows = np.arange(H.shape[0])
    d = head.d
    W = head.W
    Wk = W[k]
    proj = np.sum(H * Wk, axis=1)
    hk = H[rows, k]
    g = head.alpha[k] - head.beta[k] * hk * hk + head.gamma[k] * hk + proj * proj
    ce_rows = np.logaddexp(0.0, np.where(batch.y > 0, -g, g))
    s = (expit(g) - batch.y) * weights

    dH = (2.0 * s * proj)[:, None] * Wk
    dH[rows, k] += s * (-2.0 * head.beta[k] * hk + head.gamma[k])
    dW = np.zeros((d, d))
    for j in range(d):
        mask = k == j
        if np.any(mask):
            dW[j] = (2.0 * s[mask] * proj[mask]) @ H[mask]
    dw = np.exp(head.log_dw)
    dA = -dw[:, None] * dW
    np.fill_diagonal(dA, 0.0)
    grads = {
        'alpha': np.bincount(k, s, minlength=d),
        'beta': np.bincount(k, -s * hk * hk, minlength=d),
        'gamma': np.bincount(k, s * hk, minlength=d),
        'log_dw': np.sum(dW * W, axis=1),
        'A_w': dA,
    }
    return dH, grads, ce_rows


def total_loss(
    batch: ContrastiveBatch, encoder: EncoderNet, head: HeadParams, cfg: TrainConfig,
) -> LossResult:
    """Σ_i CE^{(i)} + τ₁ R_NOTEARS(A_w) + τ₂ ‖A_w‖₁ と全パラメータの勾配。

    CE^{(i)} は介入 i の行についての平均。
    """
    if batch.X.shape[0] == 0:
        raise ValueError('空のバッチです')
    k = np.asarray(batch.problem)
    counts = np.bincount(k, minlength=head.d).astype(np.float64)
    weights = 1.0 / counts[k]

    H, tape = forward(encoder, batch.X)
    H = H.astype(np.float64, copy=False)
    dH, head_grads, ce_rows = _head_backward(H, batch, head, weights)
    ce = float(np.sum(ce_rows * weights))

    nt, nt_grad = notears_penalty(head.A_w)
    l1 = float(np.abs(head.A_w).sum())
    reg_grad = cfg.tau1 * nt_grad + cfg.tau2 * np.sign(head.A_w)
    np.fill_diagonal(reg_grad, 0.0)
    head_grads['A_w'] = head_grads['A_w'] + reg_grad
    if cfg.fix_dw:
        head_grads['log_dw'] = np.zeros_like(head.log_dw)

    enc_grads, _ = backward(tape, dH, need_input_grad=False)
    return LossResult(
        total=ce + cfg.tau1 * nt + cfg.tau2 * l1,
        ce=ce, notears=nt, l1=l1,
        encoder_grads=enc_grads, head_grads=head_grads,
    )


# ── 学習 ─────────────────────────────────────────────────────────────────────


def _standardize(model: ContrastiveModel, X: np.ndarray) -> np.ndarray:
    if model.x_mean is None:
        return X
    return (X - model.x_mean) / model.x_scale


def _subsample(datasets: list[np.ndarray], rng: np.random.Generator) -> list[np.ndarray]:
    """各環境を最小サイズに揃える。"""
    n_min = min(len(X) for X in datasets)
    out = []
    for X in datasets:
        if len(X) == n_min:
            out.append(X)
        else:
            idx = np.sort(rng.choice(len(X), size=n_min, replace=False))
            out.append(X[idx])
    return out


def _validation_ce(
    model: ContrastiveModel, obs: np.ndarray, ints: list[np.ndarray],
) -> float:
    """検証 CE（正則化なし）: Σ_i [観測と介入 i の全行の平均 CE]。"""
    H0 = embed_raw(model, obs)
    total = 0.0
    for k, Xi in enumerate(ints):
        Hi = embed_raw(model, Xi)
        g0 = head_logits(H0, np.full(len(H0), k), model.head)
        gi = head_logits(Hi, np.full(len(Hi), k), model.head)
        n = len(g0) + len(gi)
        total += (np.logaddexp(0.0, g0).sum() + np.logaddexp(0.0, -gi).sum()) / n
    return float(total)


def _snapshot(model: ContrastiveModel) -> tuple[dict, HeadParams]:
    return ({k: v.copy() for k, v in model.encoder.params.items()}, copy.deepcopy(model.head))


def train(
    datasets: list[np.ndarray],
    cfg: TrainConfig,
    rng: np.random.Generator | None = None,
) -> ContrastiveModel:
    """環境 0（観測）と環境 1..d（介入 i の対象 = i）のデータから学習する。

    各環境を最小サイズに揃え、80/20 に分割し、検証 CE が最小のエポックの
    パラメータを返す。観測サンプルは介入ごとに独立にシャッフルして使い回す。
    """
    if len(datasets) < 2:
        raise ValueError('観測環境と 1 つ以上の介入環境が必要です')
    rng = make_rng(cfg.seed, (STREAM_TRAIN,)) if rng is None else rng
    d = len(datasets) - 1
    data = _subsample(datasets, rng)
    n = len(data[0])
    n_train = int(round(cfg.split[0] * n))
    if n_train < 1 or n_train >= n:
        raise ValueError(f'サンプル数 {n} では学習/検証に分割できません')
    if n <= d:
        logger.warning('環境あたりのサンプル数 %s が潜在次元 %s 以下です', n, d)

    splits = [rng.permutation(n) for _ in range(d + 1)]
    train_sets = [X[idx[:n_train]] for X, idx in zip(data, splits, strict=True)]
    val_sets = [X[idx[n_train:]] for X, idx in zip(data, splits, strict=True)]

    in_dim = data[0].shape[1]
    variant = cfg.encoder
    encoder = make_encoder(
        variant, in_dim, d, rng, hidden=cfg.hidden, slope=cfg.slope, dtype=cfg.dtype,
        **({'side': int(round(np.sqrt(in_dim / 3)))} if variant == 'conv' else {}),
    )
    model = ContrastiveModel(encoder=encoder, head=init_head(d), config=cfg)
    if variant != 'conv':
        model.x_mean = train_sets[0].mean(axis=0)
        model.x_scale = np.maximum(train_sets[0].std(axis=0), _MIN_SCALE)
    obs_train_raw = train_sets[0]
    train_sets = [_standardize(model, X) for X in train_sets]
    val_sets = [_standardize(model, X) for X in val_sets]

    params = _flat_params(model)
    state = init_adam(params, cfg.lr)
    steps = -(-n_train // cfg.batch)
    limit = cfg.divergence_factor * d * LN2
    best = _snapshot(model)

    for epoch in range(cfg.epochs):
        lr = cosine_lr(cfg.lr, epoch, cfg.epochs)
        perm_obs = [rng.permutation(n_train) for _ in range(d)]
        perm_int = [rng.permutation(n_train) for _ in range(d)]
        ce_sum = 0.0
        nt = 0.0
        for step in range(steps):
            sl = slice(step * cfg.batch, (step + 1) * cfg.batch)
            parts, problems, labels = [], [], []
            for k in range(d):
                obs_rows = train_sets[0][perm_obs[k][sl]]
                int_rows = train_sets[k + 1][perm_int[k][sl]]
                parts += [obs_rows, int_rows]
                problems.append(np.full(len(obs_rows) + len(int_rows), k))
                labels += [np.zeros(len(obs_rows)), np.ones(len(int_rows))]
            batch = ContrastiveBatch(
                X=np.concatenate(parts), problem=np.concatenate(problems),
                y=np.concatenate(labels),
            )
            result = total_loss(batch, model.encoder, model.head, cfg)
            if not np.isfinite(result.total):
                _diverged(epoch, step, result.total, lr)
            grads = {f'enc.{name}': g for name, g in result.encoder_grads.items()}
            grads.update({f'head.{name}': g for name, g in result.head_grads.items()})
            params = adam_step(state, params, grads, lr)
            _load_params(model, params)
            ce_sum += result.ce
            nt = result.notears

        train_ce = ce_sum / steps
        if not np.isfinite(train_ce) or train_ce > limit:
            _diverged(epoch, steps - 1, train_ce, lr)
        val_ce = _validation_ce(model, val_sets[0], val_sets[1:])
        model.curve.append({
            'epoch': epoch, 'train_ce': train_ce, 'val_ce': val_ce,
            'notears': nt, 'lr': lr,
        })
        logger.debug('epoch %s: train CE=%.5f val CE=%.5f NOTEARS=%.3e lr=%.2e',
                     epoch, train_ce, val_ce, nt, lr)
        if val_ce < model.best_val_ce:
            model.best_val_ce = val_ce
            model.best_epoch = epoch
            best = _snapshot(model)
            logger.debug('epoch %s: 検証 CE が改善しました (%.5f)', epoch, val_ce)

    model.encoder.set_params(best[0])
    model.head = best[1]
    fit_center(model, obs_train_raw)
    logger.info('学習完了: best epoch=%s, val CE=%.5f', model.best_epoch, model.best_val_ce)
    return model


def _diverged(epoch: int, step: int, loss: float, lr: float) -> None:
    diagnostics = {'epoch': epoch, 'step': step, 'loss': float(loss), 'lr': lr}
    logger.error('学習が発散しました: %s', diagnostics)
    raise TrainingDivergedError(f'学習が発散しました (epoch {epoch}, loss={loss})', diagnostics)


def _flat_params(model: ContrastiveModel) -> dict[str, np.ndarray]:
    params = {f'enc.{k}': v for k, v in model.encoder.params.items()}
    params.update({f'head.{k}': v for k, v in model.head.as_dict().items()})
    return params


def _load_params(model: ContrastiveModel, params: dict[str, np.ndarray]) -> None:
    model.encoder.set_params({k[4:]: v for k, v in params.items() if k.startswith('enc.')})
    model.head = HeadParams.from_dict({k[5:]: v for k, v in params.items()
                                       if k.startswith('head.')})


# ── 推論 ─────────────────────────────────────────────────────────────────────


def embed_raw(model: ContrastiveModel, X: np.ndarray) -> np.ndarray:
    """標準化済み入力に対する h(X, θ)（中心化なし）。"""
    out = []
    for start in range(0, len(X), _EVAL_CHUNK):
        H, _ = forward(model.encoder, X[start:start + _EVAL_CHUNK])
        out.append(H.astype(np.float64, copy=False))
    return np.concatenate(out) if out else np.zeros((0, model.d))


def fit_center(model: ContrastiveModel, X_obs: np.ndarray) -> np.ndarray:
    """観測データ上の h の平均を中心化ベクトルとして保存する。"""
    model.center = embed_raw(model, _standardize(model, X_obs)).mean(axis=0)
    return model.center


def embed(model: ContrastiveModel, X: np.ndarray) -> np.ndarray:
    """Ẑ = h(X, θ) − (観測データ上の h の平均)。"""
    H = embed_raw(model, _standardize(model, X))
    return H if model.center is None else H - model.center


def extract_graph(
    model_or_w0: ContrastiveModel | np.ndarray, m: int,
) -> tuple[np.ndarray, frozenset[tuple[int, int]]]:
    """辺スコア |W₀| と上位 m 本の辺集合 {(親, 子)} を返す。

    W₀ の行が子、列が親。スコア 0 の辺は選ばない。同点は (行, 列) の辞書順で先を優先。
    """
    W0 = model_or_w0.head.W0 if isinstance(model_or_w0, ContrastiveModel) else np.asarray(
        model_or_w0, dtype=np.float64)
    scores = np.abs(W0)
    np.fill_diagonal(scores, 0.0)
    rows, cols = np.nonzero(~np.eye(scores.shape[0], dtype=bool))
    vals = scores[rows, cols]
    order = np.lexsort((cols, rows, -vals))
    edges = set()
    for idx in order[:max(m, 0)]:
        if vals[idx] <= 0.0:
            break
        edges.add((int(cols[idx]), int(rows[idx])))
    return scores, frozenset(edges)


@dataclass(frozen=True)
class SignDiagnostic:
    """座標ごとの |corr(Ẑ_i, |Z_i|)| と |corr(Ẑ_i, Z_i)|。"""
    corr_abs: np.ndarray
    corr_signed: np.ndarray

    @property
    def abs_wins(self) -> int:
        return int(np.sum(self.corr_abs > self.corr_signed))


def eta_zero_diagnostic(Z_hat: np.ndarray, Z_true: np.ndarray) -> SignDiagnostic:
    """Ẑ が Z ではなく |Z| を復元していないかを調べる（座標は t_i = i で対応）。"""
    return SignDiagnostic(
        corr_abs=np.abs(column_correlations(Z_hat, np.abs(Z_true))),
        corr_signed=np.abs(column_correlations(Z_hat, Z_true)),
    )
