"""環境ごとのデータセットファイル入出力

形式: 1 行目が JSON ヘッダ {n, dim, dtype, env_index, seed}、改行の後に
リトルエンディアンの生データ（行優先）が続く。
dtype は "f64"（float64）と "u8"（画像用 uint8、読み込み時に /255 で [0,1] に戻す）。
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

_DTYPES: dict[str, np.dtype] = {
    'f64': np.dtype('<f8'),
    'u8': np.dtype('u1'),
}
_HEADER_KEYS = ('n', 'dim', 'dtype', 'env_index', 'seed')


class DatasetFormatError(ValueError):
    """データセットファイルの形式不正。"""


def write_dataset(
    path: str, X: np.ndarray, env_index: int, seed: int, dtype: str | None = None,
) -> dict[str, Any]:
    """X をヘッダ付きで書き出し、書いたヘッダを返す。

    dtype を省略すると uint8 配列は "u8"、それ以外は "f64" で保存する。
    """
    X = np.asarray(X)
    if X.ndim != 2:
        raise DatasetFormatError(f'2 次元配列が必要です: shape={X.shape}')
    if dtype is None:
        dtype = 'u8' if X.dtype == np.uint8 else 'f64'
    if dtype not in _DTYPES:
        raise DatasetFormatError(f'未対応の dtype です: {dtype}')
    if dtype == 'u8' and X.dtype != np.uint8:
        X = np.clip(np.rint(X * 255.0), 0, 255)
    header = {
        'n': int(X.shape[0]),
        'dim': int(X.shape[1]),
        'dtype': dtype,
        'env_index': int(env_index),
        'seed': int(seed),
    }
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    with open(path, 'wb') as f:
        f.write(json.dumps(header, sort_keys=True).encode('utf-8') + b'\n')
        f.write(np.ascontiguousarray(X, dtype=_DTYPES[dtype]).tobytes(order='C'))
    return header


def _parse_header(line: bytes, path: str) -> dict[str, Any]:
    try:
        header = json.loads(line.decode('utf-8'))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise DatasetFormatError(f'ヘッダを解釈できません: {path}') from exc
    missing = [k for k in _HEADER_KEYS if k not in header]
    if missing:
        raise DatasetFormatError(f'ヘッダに必須キーがありません: {missing} ({path})')
    if header['dtype'] not in _DTYPES:
        raise DatasetFormatError(f'未対応の dtype です: {header["dtype"]} ({path})')
    return header


def read_header(path: str) -> dict[str, Any]:
    """ヘッダ行だけを読む。"""
    with open(path, 'rb') as f:
        return _parse_header(f.readline(), path)


def read_dataset(path: str, *, raw: bool = False) -> tuple[dict[str, Any], np.ndarray]:
    """ヘッダと n×dim 配列を読む。

    raw=False なら常に float64（u8 は [0,1] に正規化）、raw=True なら保存時の型のまま返す。
    """
    with open(path, 'rb') as f:
        header = _parse_header(f.readline(), path)
        payload = f.read()
    dt = _DTYPES[header['dtype']]
    expected = header['n'] * header['dim'] * dt.itemsize
    if len(payload) != expected:
        raise DatasetFormatError(
            f'データ長が一致しません: {len(payload)} != {expected} ({path})'
        )
    X = np.frombuffer(payload, dtype=dt).reshape(header['n'], header['dim'])
    if raw:
        return header, X.copy()
    if header['dtype'] == 'u8':
        return header, X.astype(np.float64) / 255.0
    return header, X.astype(np.float64)
