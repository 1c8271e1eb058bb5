"""実験結果の CSV/Excel/JSON エクスポート"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np
import pandas as pd


def _ensure_parent(filepath: str) -> None:
    os.makedirs(os.path.dirname(os.path.abspath(filepath)), exist_ok=True)


def export_csv(
    df: pd.DataFrame, filepath: str, *, encoding: str = 'utf-8-sig',
) -> None:
    """DataFrame を CSV ファイルに書き出す。

    デフォルトは UTF-8 with BOM（Excel で開いた時に R² や ± が文字化けしない）。
    """
    _ensure_parent(filepath)
    df.to_csv(filepath, index=False, encoding=encoding, lineterminator='\n')


def export_excel(df: pd.DataFrame, filepath: str) -> None:
    """DataFrame を Excel ファイルに書き出す。"""
    _ensure_parent(filepath)
    df.to_excel(filepath, index=False, engine='openpyxl')


def _to_builtin(value: Any) -> Any:
    if isinstance(value, np.ndarray):
        return _replace_nonfinite(value.tolist())
    if isinstance(value, np.generic):
        return _replace_nonfinite(value.item())
    raise TypeError(f'JSON に変換できない型です: {type(value).__name__}')


def _replace_nonfinite(value: Any) -> Any:
    if isinstance(value, dict):
        return {k: _replace_nonfinite(v) for k, v in value.items()}
    if isinstance(value, (list, tuple)):
        return [_replace_nonfinite(v) for v in value]
    if isinstance(value, float) and not np.isfinite(value):
        return None
    return value


def export_json(data: dict[str, Any], filepath: str) -> None:
    """辞書を JSON で書き出す。NaN/inf は null にする。"""
    _ensure_parent(filepath)
    with open(filepath, 'w', encoding='utf-8') as f:
        json.dump(_replace_nonfinite(data), f, ensure_ascii=False, indent=2, default=_to_builtin)
        f.write('\n')
