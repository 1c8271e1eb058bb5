"""出力ファイルに埋め込む来歴情報（設定ハッシュ・git describe・シード）"""

from __future__ import annotations

import hashlib
import json
import logging
import os
import subprocess
from typing import Any

logger = logging.getLogger(__name__)

_REPO_DIR = os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__))))


def config_hash(config: dict[str, Any]) -> str:
    """キー順を正規化した JSON の SHA-256（16 進）。"""
    text = json.dumps(config, sort_keys=True, ensure_ascii=False, separators=(',', ':'))
    return hashlib.sha256(text.encode('utf-8')).hexdigest()


def git_describe() -> str:
    """`git describe --always --dirty` の結果。git が無い・リポジトリ外なら 'unknown'。"""
    try:
        out = subprocess.run(
            ['git', 'describe', '--always', '--dirty'],
            cwd=_REPO_DIR, capture_output=True, text=True, timeout=10, check=True,
        )
    except (OSError, subprocess.SubprocessError):
        logger.debug('git describe を取得できませんでした')
        return 'unknown'
    return out.stdout.strip() or 'unknown'


def provenance(config: dict[str, Any], seeds: Any = None) -> dict[str, Any]:
    return {
        'config_hash': config_hash(config),
        'git_describe': git_describe(),
        'seeds': seeds,
    }
