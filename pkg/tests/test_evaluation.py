import json
from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from ksiam.data import DatasetManifest, Patient, Role, Slide, load_manifest
from ksiam.errors import FoldError, NoEligibleSlideError
from ksiam.evaluation import (build_report, cross_validate, emit_report, ensure_folds, make_folds, predict_patient,
                              PatientScore)
from ksiam.tiling import TileSampler, TilingConfig
from ksiam.training import TrainConfig

FAST = dict(epochs=2, warmup=1, bs=2, k_train=4, k_infer=8, feature_dim=8, blr=1e-3,
            tiling=TilingConfig(tile_size=64))


def test_fold_sizes_example():
    a = make_folds([f"p{i:04d}" for i in range(841)], 5, 0)
    assert sorted(a.sizes(), reverse=True) == [169, 168, 168, 168, 168]


@settings(max_examples=100, deadline=None)
@given(st.integers(5, 400), st.integers(0, 2**31 - 1))
def test_folds_partition(n, seed):
    ids = [f"p{i}" for i in range(n)]
    a = make_folds(ids, 5, seed)
    assert set(a.folds) == set(ids)
    assert max(a.sizes()) - min(a.sizes()) <= 1
    assert sum(len(a.members(f)) for f in range(5)) == n


def test_folds_deterministic_and_seed_dependent():
    ids = [f"p{i}" for i in range(50)]
    assert make_folds(ids, 5, 3).folds == make_folds(reversed(ids), 5, 3).folds
    assert make_folds(ids, 5, 3).folds != make_folds(ids, 5, 4).folds


def test_fold_errors():
    with pytest.raises(FoldError):
        make_folds(["a", "b"], 5)
    with pytest.raises(FoldError):
        make_folds(["a", "b"], 1)


def test_partial_fold_column_rejected(tiny_dataset):
    m = load_manifest(tiny_dataset)
    first = m.rows[0].patient_id
    rows = [r if r.patient_id == first else replace(r, fold=None) for r in m.rows]
    partial = DatasetManifest(rows, m.heads, m.root, m.mask_downsample)
    with pytest.raises(FoldError):
        ensure_folds(partial)


class MeanPixelModel:
    """Scores a bag by its mean intensity; stands in for a trained network."""

    def predict_bag(self, tiles):
        return np.array([float(tiles.mean())])


def _flat_slide(value, slide_id, role=Role.DIAGNOSTIC_NEW):
    return Slide.from_array(np.full((256, 256, 3), value, np.uint8), 0.25, slide_id=slide_id, patient_id="p",
                            role=role)


def test_patient_score_is_mean_of_slide_scores():
    slides = [_flat_slide(40, "a"), _flat_slide(100, "b"), _flat_slide(190, "c"),
              _flat_slide(10, "d", Role.HEALTHY_NEW)]
    patient = Patient("p", slides, {"MSI": 1}, fold=2)
    sampler = TileSampler(TilingConfig(tile_size=32))
    got = predict_patient(MeanPixelModel(), patient, {Role.DIAGNOSTIC_NEW}, 4, 0, ["MSI"], sampler)
    assert got.scores[0] == pytest.approx((40 + 100 + 190) / 3 / 255, rel=1e-6)
    assert got.slide_ids == ["a", "b", "c"] and got.fold == 2 and list(got.labels) == [1]
    with pytest.raises(NoEligibleSlideError):
        predict_patient(MeanPixelModel(), patient, {Role.HEALTHY_OLD}, 4, 0, ["MSI"], sampler)


def test_report_ties_and_nan():
    scores = [PatientScore("a", np.array([0.5]), np.array([1]), 1), PatientScore("b", np.array([0.5]), np.array([0]), 1),
              PatientScore("c", np.array([0.1]), np.array([0]), 2)]
    rep = build_report(scores, ["MSI"], "pooled")
    h = rep.head("MSI")
    assert h.auc == 0.75 and h.ties and h.n == 3 and h.n_positive == 1
    assert h.ap == 1.0  # "a" precedes "b" on the tie
    assert rep.composition["patients_per_fold"] == {"1": 2, "2": 1}
    one_class = build_report(scores[1:], ["MSI"], "x").head("MSI")
    assert np.isnan(one_class.auc) and np.isnan(one_class.ap)


def test_search_fold_cannot_be_tested(tiny_dataset):
    m = load_manifest(tiny_dataset)
    with pytest.raises(FoldError):
        cross_validate(m, TrainConfig(**FAST), 0, (0, 1))


@pytest.fixture(scope="module")
def cv(tiny_dataset):
    return cross_validate(load_manifest(tiny_dataset), TrainConfig(**FAST), 0, (1, 2, 3, 4))


def test_cross_validation_cycles(cv, tiny_dataset):
    m = load_manifest(tiny_dataset)
    folds = m.folds()
    assert [c[0] for c in cv.cycles] == [1, 2, 3, 4]
    tested = []
    for f, train_ids, test_ids in cv.cycles:
        assert not set(train_ids) & set(test_ids)
        assert set(train_ids) | set(test_ids) == set(folds)
        assert all(folds[p] == f for p in test_ids)
        # the search fold is part of every training set
        assert {p for p, v in folds.items() if v == 0} <= set(train_ids)
        tested += test_ids
    assert sorted(tested) == sorted(p for p, v in folds.items() if v != 0)
    assert cv.pooled.head("MSI").n == len(tested)
    assert all(0 <= s.scores[0] <= 1 for s in cv.pooled.scores)


def test_cross_validation_reproducible(cv, tiny_dataset):
    again = cross_validate(load_manifest(tiny_dataset), TrainConfig(**FAST), 0, (1, 2, 3, 4))
    a = {s.patient_id: s.scores for s in cv.pooled.scores}
    b = {s.patient_id: s.scores for s in again.pooled.scores}
    assert a.keys() == b.keys() and all(np.array_equal(a[k], b[k]) for k in a)


def test_emit_report(cv, tmp_path):
    files = {p.name for p in emit_report(cv, tmp_path)}
    assert {"metrics.csv", "scores.csv", "roc_MSI.csv", "report.json", "roc_MSI.png"} <= files
    rows = (tmp_path / "metrics.csv").read_text().splitlines()
    assert rows[0] == "head,fold,n,auc,ap"
    assert [r.split(",")[1] for r in rows[1:]] == ["1", "2", "3", "4", "pooled", "mean"]
    meta = json.loads((tmp_path / "report.json").read_text())
    assert meta["leakage_free"] and meta["primary"] == "pooled" and meta["test_folds"] == [1, 2, 3, 4]
    roc = (tmp_path / "roc_MSI.csv").read_text().splitlines()
    assert roc[1] == "0.0,0.0,inf" and roc[-1].startswith("1.0,1.0,")
