import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from ksiam.baselines import (PipelineKind, TilewiseModel, emit_ablation, mean_confidence, run_ablation,
                             train_pipeline)
from ksiam.data import load_manifest
from ksiam.model import KSiameseModel, ToyEncoder
from ksiam.tiling import TilingConfig, oracle_tumor_mask
from ksiam.training import TrainConfig

FAST = dict(epochs=2, warmup=1, bs=2, k_train=4, k_infer=8, feature_dim=8, blr=1e-3,
            tiling=TilingConfig(tile_size=64))


def test_mean_confidence_examples():
    assert mean_confidence([[0.0], [1.0]]).tolist() == [0.5]
    assert mean_confidence([[0.2, 0.9], [0.4, 0.1], [0.6, 0.5]]) == pytest.approx([0.4, 0.5], rel=1e-15)


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(0, 1), min_size=1, max_size=40), st.randoms(use_true_random=False))
def test_mean_confidence_permutation_invariant(probs, rnd):
    shuffled = list(probs)
    rnd.shuffle(shuffled)
    a = mean_confidence(np.array(probs)[:, None])[0]
    b = mean_confidence(np.array(shuffled)[:, None])[0]
    assert a == pytest.approx(b, rel=1e-12, abs=1e-15)
    assert min(probs) - 1e-15 <= a <= max(probs) + 1e-15


def test_tilewise_prediction_is_mean_of_tile_probs():
    torch.manual_seed(0)
    model = TilewiseModel(ToyEncoder(8, (4, 4)), 2, 0.5)
    tiles = torch.rand(6, 3, 32, 32)
    per_tile = model.tile_probs(tiles)
    assert per_tile.shape == (6, 2)
    assert np.allclose(model.predict_bag(tiles), per_tile.mean(axis=0), rtol=1e-12)
    assert np.allclose(model.predict_bag(tiles[torch.randperm(6)]), model.predict_bag(tiles), rtol=1e-6)


def test_tilewise_training_logits_repeat_bag_label():
    model = TilewiseModel(ToyEncoder(8, (4, 4)), 3)
    logits, k = model.training_logits(torch.rand(2, 5, 3, 32, 32))
    assert logits.shape == (10, 3, 2) and k == 5


def test_pipeline_kinds():
    assert [k.value for k in PipelineKind] == ["ksiam", "seg_siam", "two_stage", "tilewise"]
    assert {k.model_kind for k in PipelineKind} == {"ksiam", "tilewise"}
    assert PipelineKind("two_stage").mask_source() is oracle_tumor_mask
    assert PipelineKind("seg_siam").mask_source() is oracle_tumor_mask
    assert PipelineKind("ksiam").mask_source() is None and PipelineKind("tilewise").mask_source() is None


def test_train_pipeline_model_types(tiny_dataset):
    m = load_manifest(tiny_dataset)
    cfg = TrainConfig(**(FAST | dict(epochs=1, warmup=0)))
    assert isinstance(train_pipeline("seg_siam", m, cfg, folds=[1, 2, 3, 4])[0], KSiameseModel)
    assert isinstance(train_pipeline("two_stage", m, cfg, folds=[1, 2, 3, 4])[0], TilewiseModel)


def test_ablation_shares_patients(tiny_dataset, tmp_path):
    cfg = TrainConfig(**(FAST | dict(epochs=1, warmup=0)))
    res = run_ablation(load_manifest(tiny_dataset), cfg, 0, (1, 2))
    rows = res.rows()
    assert [r[0] for r in rows] == ["ksiam", "seg_siam", "two_stage", "tilewise"]
    assert len({r[2] for r in rows}) == 1
    ids = [sorted(s.patient_id for s in r.pooled.scores) for r in res.results.values()]
    assert all(i == ids[0] for i in ids)
    cycles = [r.cycles for r in res.results.values()]
    assert all(c == cycles[0] for c in cycles)
    files = {p.relative_to(tmp_path).as_posix() for p in emit_ablation(res, tmp_path)}
    assert {"comparison.csv", "ksiam/metrics.csv", "tilewise/scores.csv"} <= files
    lines = (tmp_path / "comparison.csv").read_text().splitlines()
    assert lines[0] == "pipeline,head,n,auc,ap" and len(lines) == 5
