"""core/checkpoint.py のテスト

テスト対象:
  - save_checkpoint / load_checkpoint: マニフェスト + 生データ形式
"""

from __future__ import annotations

import numpy as np
import pytest

from core.checkpoint import (
    BLOB_NAME,
    CheckpointError,
    load_checkpoint,
    read_manifest,
    save_checkpoint,
)
from core.contrastive import ContrastiveModel, TrainConfig, embed, fit_center, init_head
from core.tensor_nn import make_encoder


@pytest.fixture
def model(rng) -> ContrastiveModel:
    enc = make_encoder('mlp', 4, 2, rng, hidden=6)
    m = ContrastiveModel(encoder=enc, head=init_head(2), config=TrainConfig(epochs=7, seed=3))
    m.head.A_w[0, 1] = 0.25
    m.x_mean = np.arange(4.0)
    m.x_scale = np.full(4, 2.0)
    fit_center(m, rng.standard_normal((50, 4)))
    m.best_epoch = 5
    m.best_val_ce = 0.4
    return m


class TestCheckpoint:
    def test_restored_model_embeds_identically(self, tmp_path, model, rng):
        save_checkpoint(model, str(tmp_path), seed={'master': 3})
        loaded = load_checkpoint(str(tmp_path))
        X = rng.standard_normal((10, 4))
        np.testing.assert_array_equal(embed(loaded, X), embed(model, X))
        np.testing.assert_array_equal(loaded.head.W0, model.head.W0)
        assert loaded.config == model.config
        assert loaded.best_epoch == 5

    def test_manifest_contents(self, tmp_path, model):
        save_checkpoint(model, str(tmp_path), seed=11)
        manifest = read_manifest(str(tmp_path))
        assert manifest['architecture']['variant'] == 'mlp'
        assert manifest['architecture']['hidden'] == 6
        assert manifest['seed'] == 11
        assert manifest['epoch'] == 5
        names = [t['name'] for t in manifest['tensors']]
        assert 'enc.W1' in names and 'head.A_w' in names and 'center' in names

    def test_blob_is_float64(self, tmp_path, model):
        save_checkpoint(model, str(tmp_path))
        n_values = model.encoder.n_params + sum(v.size for v in model.head.as_dict().values())
        n_values += 4 + 4 + 2
        assert (tmp_path / BLOB_NAME).stat().st_size == n_values * 8

    def test_truncated_blob(self, tmp_path, model):
        save_checkpoint(model, str(tmp_path))
        blob = tmp_path / BLOB_NAME
        blob.write_bytes(blob.read_bytes()[:-16])
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path))

    def test_missing_directory(self, tmp_path):
        with pytest.raises(CheckpointError):
            load_checkpoint(str(tmp_path / 'none'))
