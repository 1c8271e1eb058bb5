"""学習済みモデルの保存・読み込み

ディレクトリに manifest.json（アーキテクチャ・形状・シード・学習設定）と
params.bin（全テンソルを float64 リトルエンディアンで連結）を置く。
"""

from __future__ import annotations

import json
import logging
import os
from dataclasses import asdict
from typing import Any

import numpy as np

from core.contrastive import ContrastiveModel, HeadParams, TrainConfig
from core.tensor_nn import EncoderNet

logger = logging.getLogger(__name__)

FORMAT_VERSION = 1
MANIFEST_NAME = 'manifest.json'
BLOB_NAME = 'params.bin'


class CheckpointError(ValueError):
    """チェックポイントが壊れている、または互換性がない。"""


def _tensors(model: ContrastiveModel) -> list[tuple[str, np.ndarray]]:
    items = [(f'enc.{k}', v) for k, v in sorted(model.encoder.params.items())]
    items += [(f'head.{k}', v) for k, v in model.head.as_dict().items()]
    for name in ('x_mean', 'x_scale', 'center'):
        value = getattr(model, name)
        if value is not None:
            items.append((name, value))
    return items


def save_checkpoint(
    model: ContrastiveModel, directory: str, *, seed: Any = None,
) -> str:
    """モデルを directory に保存し、マニフェストのパスを返す。"""
    os.makedirs(directory, exist_ok=True)
    entries = []
    offset = 0
    chunks = []
    for name, value in _tensors(model):
        arr = np.ascontiguousarray(value, dtype='<f8')
        entries.append({'name': name, 'shape': list(arr.shape), 'offset': offset})
        offset += arr.size
        chunks.append(arr.tobytes())
    enc = model.encoder
    manifest = {
        'format_version': FORMAT_VERSION,
        'architecture': {
            'variant': enc.variant, 'in_dim': enc.in_dim, 'd': enc.d,
            'hidden': enc.hidden, 'slope': enc.slope, 'side': enc.side,
            'dtype': str(enc.dtype),
        },
        'tensors': entries,
        'seed': seed,
        'epoch': model.best_epoch,
        'best_val_ce': model.best_val_ce,
        'train_config': asdict(model.config),
    }
    with open(os.path.join(directory, BLOB_NAME), 'wb') as f:
        f.write(b''.join(chunks))
    path = os.path.join(directory, MANIFEST_NAME)
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(manifest, f, ensure_ascii=False, indent=2)
    logger.info('チェックポイントを保存しました: %s', directory)
    return path


def load_checkpoint(directory: str) -> ContrastiveModel:
    """save_checkpoint で保存したモデルを復元する。"""
    path = os.path.join(directory, MANIFEST_NAME)
    try:
        with open(path, encoding='utf-8') as f:
            manifest = json.load(f)
        blob = np.fromfile(os.path.join(directory, BLOB_NAME), dtype='<f8')
    except (OSError, json.JSONDecodeError) as e:
        raise CheckpointError(f'チェックポイントを読み込めません: {directory}: {e}') from e
    if manifest.get('format_version') != FORMAT_VERSION:
        raise CheckpointError(f'未対応の形式です: {manifest.get("format_version")}')

    tensors: dict[str, np.ndarray] = {}
    for entry in manifest['tensors']:
        size = int(np.prod(entry['shape'], dtype=np.int64))
        start = entry['offset']
        if start + size > blob.size:
            raise CheckpointError(f'テンソル {entry["name"]} がファイル末尾を超えています')
        tensors[entry['name']] = blob[start:start + size].reshape(entry['shape']).copy()

    arch = manifest['architecture']
    dtype = np.dtype(arch['dtype'])
    encoder = EncoderNet(
        variant=arch['variant'], in_dim=arch['in_dim'], d=arch['d'],
        params={k[4:]: v.astype(dtype) for k, v in tensors.items() if k.startswith('enc.')},
        slope=arch['slope'], hidden=arch['hidden'], side=arch['side'], dtype=dtype,
    )
    head = HeadParams.from_dict({k[5:]: v for k, v in tensors.items() if k.startswith('head.')})
    cfg_data = dict(manifest['train_config'])
    cfg_data['split'] = tuple(cfg_data['split'])
    model = ContrastiveModel(
        encoder=encoder, head=head, config=TrainConfig(**cfg_data),
        x_mean=tensors.get('x_mean'), x_scale=tensors.get('x_scale'),
        center=tensors.get('center'),
        best_epoch=manifest.get('epoch', -1),
        best_val_ce=manifest.get('best_val_ce', float('inf')),
    )
    return model


def read_manifest(directory: str) -> dict[str, Any]:
    with open(os.path.join(directory, MANIFEST_NAME), encoding='utf-8') as f:
        return json.load(f)
