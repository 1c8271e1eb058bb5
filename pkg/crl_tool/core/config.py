"""実験設定ファイル（config.json）管理

設定は 1 つの JSON 文書。既定値に利用者の設定を再帰的にマージしたうえで、
型付きの ExperimentConfig に変換する。表の再現用プリセットも既定値への
上書き辞書として持つ。
"""

from __future__ import annotations

import copy
import json
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Any

from core.contrastive import TrainConfig
from core.mixing import IMAGE_SIDE
from core.scm import InterventionKind


class ConfigError(ValueError):
    """設定ファイルの内容が不正。"""


def _get_app_dir() -> str:
    """リポジトリのルート（config.json の置き場所）を返す。"""
    return os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def _get_config_path() -> str:
    return os.path.join(_get_app_dir(), 'config.json')


def _default_config() -> dict[str, Any]:
    """デフォルト設定を返す。値は非線形合成データ ER(5, 2), d'=20 の実験条件。"""
    return {
        'experiment': {
            'setting': "ER(5, 2), d'=20",
            'method': 'Contrastive',
            'd': 5,
            'd_prime': 20,
            'k': 2.0,
            'n': 10000,
            'mixing': 'mlp',
            'variance_obs': [1.0, 2.0],
            'variance_int': [1.0, 2.0],
            'shift_range': [1.0, 2.0],
            'intervention': 'perfect',
            'runs': 5,
            'seed': 0,
            'output_dir': './output',
        },
        'train': {
            'tau1': 1e-5,
            'tau2': 1e-4,
            'lr': 5e-4,
            'batch': 512,
            'epochs': 200,
            'split': [0.8, 0.2],
            'encoder': 'mlp',       # 'mlp' | 'linear' | 'conv'
            'hidden': None,
            'slope': 0.01,
            'fix_dw': False,
            'dtype': 'float64',
            'divergence_factor': 10.0,
        },
        'sweep': {
            'etas': [0.0, 0.5, 1.0, 1.5, 2.0],
        },
        'oracle': {
            'n_families': 50,
            'points': 1000,
            'max_d': 10,
        },
        'counterexamples': {
            'n': 100000,
            'permutations': 200,
            'max_points': 1500,
        },
        'threads': 1,
    }


def _deep_merge(base: dict, override: dict) -> dict:
    """ネストした辞書を再帰的にマージする。override が優先。"""
    result = dict(base)
    for k, v in override.items():
        if k in result and isinstance(result[k], dict) and isinstance(v, dict):
            result[k] = _deep_merge(result[k], v)
        else:
            result[k] = v
    return result


def load_config(path: str | None = None) -> dict[str, Any]:
    """config.json を読み込み、デフォルト値にマージして返す。

    path 省略時はリポジトリ直下の config.json を探し、無ければデフォルト値を返す。
    明示された path が読めない場合は ConfigError。
    """
    defaults = _default_config()
    explicit = path is not None
    path = path or _get_config_path()
    if not os.path.exists(path):
        if explicit:
            raise ConfigError(f'設定ファイルが見つかりません: {path}')
        return defaults
    try:
        with open(path, encoding='utf-8') as f:
            data = json.load(f)
    except (json.JSONDecodeError, OSError) as e:
        raise ConfigError(f'設定ファイルを読み込めません: {path} ({e})') from e
    if not isinstance(data, dict):
        raise ConfigError(f'設定ファイルの最上位はオブジェクトである必要があります: {path}')
    return _deep_merge(defaults, data)


def save_config(config: dict[str, Any], path: str | None = None) -> None:
    """config を JSON ファイルに保存する。"""
    with open(path or _get_config_path(), 'w', encoding='utf-8') as f:
        json.dump(config, f, ensure_ascii=False, indent=2)


def _flatten(d: dict[str, Any], prefix: str = '') -> dict[str, Any]:
    out: dict[str, Any] = {}
    for k, v in d.items():
        key = f'{prefix}{k}'
        if isinstance(v, dict):
            out.update(_flatten(v, key + '.'))
        else:
            out[key] = v
    return out


def overridden_fields(config: dict[str, Any]) -> list[str]:
    """デフォルト値と異なるキーをドット区切りで返す（ソート済み）。"""
    defaults = _flatten(_default_config())
    return sorted(k for k, v in _flatten(config).items() if defaults.get(k, object()) != v)


# ── 型付き設定 ───────────────────────────────────────────────────────────────


@dataclass(frozen=True)
class ExperimentConfig:
    """1 つの (設定, 手法) の実験条件。"""
    d: int = 5
    d_prime: int = 20
    k: float = 2.0
    n: int = 10000
    mixing: str = 'mlp'
    variance_obs: tuple[float, float] = (1.0, 2.0)
    variance_int: tuple[float, float] = (1.0, 2.0)
    shift_range: tuple[float, float] = (1.0, 2.0)
    intervention: str = 'perfect'
    runs: int = 5
    seed: int = 0
    output_dir: str = './output'
    setting: str = ''
    method: str = 'Contrastive'
    train: TrainConfig = field(default_factory=TrainConfig)

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ConfigError(f'd は 1 以上が必要です: {self.d}')
        if self.mixing not in ('linear', 'mlp', 'image'):
            raise ConfigError(f'未知の混合関数です: {self.mixing}')
        if self.mixing == 'image' and self.d % 2:
            raise ConfigError(f'画像混合では d は偶数（球 d/2 個）が必要です: {self.d}')
        if self.mixing != 'image' and self.d_prime < self.d:
            raise ConfigError(f"d' は d 以上が必要です: d={self.d}, d'={self.d_prime}")
        if self.k < 0:
            raise ConfigError(f'k は非負が必要です: {self.k}')
        if self.n < 1 or self.runs < 1 or self.seed < 0:
            raise ConfigError('n と runs は 1 以上、seed は非負が必要です')
        for name in ('variance_obs', 'variance_int', 'shift_range'):
            lo, hi = getattr(self, name)
            if lo > hi or lo < 0:
                raise ConfigError(f'{name} は 0 ≤ lo ≤ hi が必要です: {(lo, hi)}')
        if self.variance_obs[0] <= 0 or self.variance_int[0] <= 0:
            raise ConfigError('分散の範囲は正である必要があります')
        try:
            InterventionKind(self.intervention)
        except ValueError as e:
            raise ConfigError(f'未知の介入の種類です: {self.intervention}') from e

    def to_dict(self) -> dict[str, Any]:
        out = asdict(self)
        out['train'] = asdict(self.train)
        return out


def _pair(value: Any, name: str) -> tuple[float, float]:
    try:
        lo, hi = (float(v) for v in value)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'{name} は 2 要素の数値リストで指定してください: {value!r}') from e
    return lo, hi


def train_config_from_dict(raw: dict[str, Any], seed: int = 0) -> TrainConfig:
    known = {f.name for f in fields(TrainConfig)}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f'train に未知のキーがあります: {sorted(unknown)}')
    values = dict(raw)
    if 'split' in values:
        values['split'] = _pair(values['split'], 'train.split')
    values.setdefault('seed', seed)
    try:
        return TrainConfig(**values)
    except (TypeError, ValueError) as e:
        raise ConfigError(f'学習設定が不正です: {e}') from e


def experiment_config_from_dict(config: dict[str, Any]) -> ExperimentConfig:
    """マージ済みの設定辞書から ExperimentConfig を作る。"""
    raw = dict(config.get('experiment', {}))
    known = {f.name for f in fields(ExperimentConfig)} - {'train'}
    unknown = set(raw) - known
    if unknown:
        raise ConfigError(f'experiment に未知のキーがあります: {sorted(unknown)}')
    for name in ('variance_obs', 'variance_int', 'shift_range'):
        if name in raw:
            raw[name] = _pair(raw[name], f'experiment.{name}')
    try:
        for name in ('d', 'd_prime', 'n', 'runs', 'seed'):
            if name in raw:
                raw[name] = int(raw[name])
    except (TypeError, ValueError) as e:
        raise ConfigError(f'整数の設定値が不正です: {e}') from e
    train = train_config_from_dict(config.get('train', {}), int(raw.get('seed', 0)))
    return ExperimentConfig(**raw, train=train)


# ── 表の再現プリセット ───────────────────────────────────────────────────────

TABLES = ('table1', 'table2', 'table3')
SCALES = ('full', 'desk')

_TABLE1_BASE = {
    'experiment': {
        'd': 5, 'd_prime': 10, 'k': 1.5, 'n': 50000, 'mixing': 'linear',
        'variance_obs': [2.0, 4.0], 'variance_int': [6.0, 8.0], 'shift_range': [0.0, 0.0],
    },
}
_TABLE3_BASE = {
    'experiment': {
        'n': 25000, 'mixing': 'image',
        'variance_obs': [0.01, 0.01], 'variance_int': [0.01, 0.02], 'shift_range': [0.1, 0.2],
    },
    'train': {'encoder': 'conv', 'epochs': 100},
}


def _row(setting: str, method: str, *overrides: dict[str, Any]) -> dict[str, Any]:
    merged: dict[str, Any] = {}
    for o in overrides:
        merged = _deep_merge(merged, o)
    return _deep_merge(merged, {'experiment': {'setting': setting, 'method': method}})


def _table1_rows() -> list[dict[str, Any]]:
    setting = "ER(5, 3/2), d'=10"
    return [
        _row(setting, 'Contrastive', _TABLE1_BASE),
        _row(setting, 'Contrastive Linear', _TABLE1_BASE, {'train': {'encoder': 'linear'}}),
    ]


def _table2_rows() -> list[dict[str, Any]]:
    return [
        _row(f"ER({d}, 2), d'={dp}", 'Contrastive',
             {'experiment': {'d': d, 'd_prime': dp, 'k': 2.0}})
        for d in (5, 10) for dp in (20, 100)
    ]


def _table3_rows(settings: tuple[tuple[int, float], ...]) -> list[dict[str, Any]]:
    return [
        _row(f'ER({d}, {k:g})', 'Contrastive', _TABLE3_BASE,
             {'experiment': {'d': d, 'k': k, 'd_prime': 3 * IMAGE_SIDE * IMAGE_SIDE}})
        for d, k in settings
    ]


_SCALE_OVERRIDES: dict[tuple[str, str], dict[str, Any]] = {
    ('table1', 'full'): {'experiment': {'runs': 5}},
    ('table1', 'desk'): {'experiment': {'runs': 3}, 'train': {'epochs': 100}},
    ('table2', 'full'): {'experiment': {'runs': 5}},
    ('table2', 'desk'): {'experiment': {'runs': 3}, 'train': {'epochs': 100}},
    ('table3', 'full'): {'experiment': {'runs': 5}},
    ('table3', 'desk'): {'experiment': {'runs': 2, 'n': 10000}, 'train': {'epochs': 50}},
}


def preset_rows(table_id: str, scale: str) -> list[dict[str, Any]]:
    """表 table_id の各行 (設定, 手法) の上書き辞書を返す。"""
    if table_id not in TABLES:
        raise ConfigError(f'未知の表です: {table_id}（{", ".join(TABLES)} から選択）')
    if scale not in SCALES:
        raise ConfigError(f'未知のスケールです: {scale}（{", ".join(SCALES)} から選択）')
    if table_id == 'table1':
        rows = _table1_rows()
    elif table_id == 'table2':
        rows = _table2_rows()
    else:
        settings = ((4, 2.0),) if scale == 'desk' else ((4, 2.0), (4, 4.0), (6, 2.0), (6, 4.0))
        rows = _table3_rows(settings)
    scale_override = _SCALE_OVERRIDES[(table_id, scale)]
    return [_deep_merge(row, copy.deepcopy(scale_override)) for row in rows]


def preset_configs(
    table_id: str, scale: str, base: dict[str, Any] | None = None,
) -> list[dict[str, Any]]:
    """base（省略時はデフォルト）にプリセットの各行を重ねた設定辞書のリスト。"""
    base = base if base is not None else _default_config()
    return [_deep_merge(base, row) for row in preset_rows(table_id, scale)]
