"""SCM ファミリーの JSON 入出力

フィールド名は schemas/scm_family.schema.json で固定している。
介入環境は変更された行 t だけを保存し、読み込み時に観測 B から復元する。
"""

from __future__ import annotations

import json
import os
from typing import Any

import numpy as np

from core.scm import Dag, InterventionKind, ScmEnvironment, ScmError, ScmFamily, observational_b

FORMAT_VERSION = 1

_SCHEMA_PATH = os.path.join(
    os.path.dirname(os.path.dirname(os.path.dirname(os.path.abspath(__file__)))),
    'schemas', 'scm_family.schema.json',
)


def _required_keys() -> tuple[list[str], list[str]]:
    """スキーマファイルからトップレベルと環境要素の必須キーを読む。"""
    with open(_SCHEMA_PATH, encoding='utf-8') as f:
        schema = json.load(f)
    env_schema = schema['properties']['environments']['items']
    return list(schema['required']), list(env_schema['required'])


def family_to_dict(family: ScmFamily, chain: dict[str, Any] | None = None) -> dict[str, Any]:
    """ScmFamily を JSON 化可能な辞書に変換する。"""
    envs = []
    for env in family.interventions:
        envs.append({
            'kind': env.kind.value,
            'target': int(env.target),
            'eta': float(env.eta),
            'lam': None if env.lam is None else float(env.lam),
            'row': env.B[env.target].tolist(),
        })
    return {
        'format_version': FORMAT_VERSION,
        'd': family.d,
        'edges': [list(e) for e in sorted(family.dag.edges)],
        'topo_order': list(family.dag.topo_order),
        'A': family.A.tolist(),
        'D': family.D.tolist(),
        'environments': envs,
        'seed_chain': chain or {'root': 0, 'spawn_key': []},
    }


def family_from_dict(data: dict[str, Any]) -> ScmFamily:
    """family_to_dict() の逆変換。必須キーの欠落は ScmError。"""
    top_keys, env_keys = _required_keys()
    missing = [k for k in top_keys if k not in data]
    if missing:
        raise ScmError(f'ファミリー JSON に必須キーがありません: {missing}')
    if data['format_version'] != FORMAT_VERSION:
        raise ScmError(f'未対応の format_version です: {data["format_version"]}')

    d = int(data['d'])
    dag = Dag(
        d=d,
        edges=frozenset((int(i), int(j)) for i, j in data['edges']),
        topo_order=tuple(int(v) for v in data['topo_order']),
    )
    A = np.asarray(data['A'], dtype=np.float64)
    D = np.asarray(data['D'], dtype=np.float64)
    B0 = observational_b(A, D)
    envs = [ScmEnvironment(B=B0)]
    for idx, raw in enumerate(data['environments'], 1):
        missing = [k for k in env_keys if k not in raw]
        if missing:
            raise ScmError(f'環境 {idx} に必須キーがありません: {missing}')
        t = int(raw['target'])
        B = B0.copy()
        B[t] = np.asarray(raw['row'], dtype=np.float64)
        envs.append(ScmEnvironment(
            B=B, eta=float(raw['eta']), target=t,
            kind=InterventionKind(raw['kind']), lam=raw.get('lam'),
        ))
    return ScmFamily(dag=dag, A=A, D=D, environments=envs)


def save_family(
    family: ScmFamily, path: str, chain: dict[str, Any] | None = None,
) -> None:
    """ファミリーを JSON ファイルに保存する。"""
    with open(path, 'w', encoding='utf-8') as f:
        json.dump(family_to_dict(family, chain), f, ensure_ascii=False, indent=2)


def load_family(path: str) -> tuple[ScmFamily, dict[str, Any]]:
    """JSON ファイルからファミリーとシード連鎖を読み込む。"""
    with open(path, encoding='utf-8') as f:
        data = json.load(f)
    return family_from_dict(data), dict(data['seed_chain'])
