"""pytest 共通フィクスチャ

すべてのテストファイルから自動的にインポートされる。
sys.path ハックは不要（pyproject.toml の pythonpath 設定で解決済み）。
"""

import numpy as np
import pytest

from core.scm import (
    Dag,
    InterventionKind,
    ScmFamily,
    apply_intervention,
    observational_family,
    sample_family,
)
from utils.rng import make_rng

# ── 乱数 ─────────────────────────────────────────────────────────────────────


@pytest.fixture
def rng() -> np.random.Generator:
    """固定シードの乱数源。"""
    return make_rng(12345)


# ── 小さな SCM ───────────────────────────────────────────────────────────────


@pytest.fixture
def chain_weight() -> float:
    return 0.7


@pytest.fixture
def chain_base(chain_weight) -> ScmFamily:
    """0 → 1 の 2 ノード連鎖、D = Id（観測環境のみ）。"""
    dag = Dag.from_edges(2, {(0, 1)})
    A = np.array([[0.0, 0.0], [chain_weight, 0.0]])
    return observational_family(dag, A, np.ones(2))


@pytest.fixture
def chain_family(chain_base) -> ScmFamily:
    """連鎖に各ノード 1 回ずつ完全介入（λ=2, η=1.5 / λ=0.5, η=−1）したファミリー。"""
    envs = [
        apply_intervention(chain_base, 0, InterventionKind.PERFECT, {'lam': 2.0, 'eta': 1.5}),
        apply_intervention(chain_base, 1, InterventionKind.PERFECT, {'lam': 0.5, 'eta': -1.0}),
    ]
    return chain_base.with_interventions(envs)


@pytest.fixture
def scalar_family() -> ScmFamily:
    """d=1, B=1, λ=2, η=0 の最小ファミリー。"""
    base = observational_family(Dag.from_edges(1, set()), np.zeros((1, 1)), np.ones(1))
    env = apply_intervention(base, 0, InterventionKind.PERFECT, {'lam': 2.0})
    return base.with_interventions([env])


@pytest.fixture
def er5_family() -> ScmFamily:
    """ER(5, 2)、完全介入・シフト付きのランダムファミリー。"""
    return sample_family(5, 2, make_rng(7), shift_range=(1.0, 2.0))
