import math

import numpy as np
import pytest

from ksiam.data import load_manifest
from ksiam.errors import ConfigError, FoldError
from ksiam.hpsearch import (SearchEntry, SearchSpace, emit_search, rank_entries, run_search, sample_config,
                            sample_configs, validation_split)
from ksiam.tiling import TilingConfig
from ksiam.training import TrainConfig

FAST = dict(k_train=4, k_infer=8, feature_dim=8, tiling=TilingConfig(tile_size=64))


def test_samples_within_ranges():
    space = SearchSpace()
    rng = np.random.default_rng(0)
    draws = [sample_config(space, rng) for _ in range(10_000)]
    blr = np.array([c.blr for c in draws])
    assert blr.min() >= 3e-6 and blr.max() <= 1e-4
    for name, (lo, hi) in (("bs", (4, 24)), ("epochs", (32, 96)), ("warmup", (0, 18))):
        vals = {getattr(c, name) for c in draws}
        assert min(vals) == lo and max(vals) == hi and len(vals) == hi - lo + 1
    assert all(c.warmup < c.epochs for c in draws)
    # log-uniform: median near the geometric mean of the bounds, log values uniform
    assert np.median(blr) == pytest.approx(math.sqrt(3e-6 * 1e-4), rel=0.05)
    logs = (np.log(blr) - math.log(3e-6)) / math.log(1e-4 / 3e-6)
    assert abs(np.mean(logs < 0.25) - 0.25) < 0.02


def test_warmup_resampled_below_epochs():
    space = SearchSpace(epochs_range=(2, 4), warmup_range=(0, 10))
    rng = np.random.default_rng(1)
    assert all(c.warmup < c.epochs for c in (sample_config(space, rng) for _ in range(500)))


def test_sample_configs_deterministic():
    a = sample_configs(SearchSpace(n_runs=5, seed=3))
    b = sample_configs(SearchSpace(n_runs=5, seed=3))
    assert a == b and len({c.seed for c in a}) == 5
    assert a != sample_configs(SearchSpace(n_runs=5, seed=4))


@pytest.mark.parametrize("bad", [dict(blr_range=(0, 1e-4)), dict(bs_range=(5, 4)), dict(n_runs=0),
                                 dict(epochs_range=(0, 3)), dict(warmup_range=(20, 30), epochs_range=(5, 10))])
def test_space_validation(bad):
    with pytest.raises(ConfigError):
        SearchSpace(**bad).validate()


def test_validation_split_stratified():
    ids = [f"p{i:02d}" for i in range(30)]
    labels = {p: (int(i < 10),) for i, p in enumerate(ids)}
    train, val = validation_split(ids, labels, 0.2, 0)
    assert len(val) == 6 and sum(labels[p][0] for p in val) == 2
    assert not set(train) & set(val) and set(train) | set(val) == set(ids)
    assert validation_split(ids, labels, 0.2, 0) == (train, val)
    with pytest.raises(FoldError):
        validation_split(["a"], {"a": (1,)}, 0.2, 0)


def test_ranking_puts_nan_last_and_breaks_ties_by_index():
    cfg = TrainConfig()
    entries = [SearchEntry(i, cfg, {}, v) for i, v in enumerate([0.7, float("nan"), 0.9, 0.7])]
    ranked = rank_entries(entries)
    assert [e.run_index for e in ranked] == [2, 0, 3, 1]
    assert [e.rank for e in ranked] == [1, 2, 3, 4]


def test_search_touches_only_search_fold(tiny_dataset, tmp_path):
    m = load_manifest(tiny_dataset)
    ids = m.patient_ids
    # widen the search fold so the 80/20 split has both classes on each side
    m = m.with_folds({p: 0 if i < 10 else 1 + i % 4 for i, p in enumerate(ids)})
    search_ids = {p for p, f in m.folds().items() if f == 0}
    space = SearchSpace(blr_range=(1e-4, 1e-3), bs_range=(2, 2), epochs_range=(1, 2), warmup_range=(0, 0),
                        n_runs=2, seed=1)
    res = run_search(m, space, 0, base=TrainConfig(**FAST))
    assert res.patients_seen <= search_ids
    assert set(res.train_ids) | set(res.validation_ids) == search_ids
    assert [e.rank for e in res.entries] == [1, 2]
    assert all(0 <= e.objective <= 1 for e in res.entries)
    paths = emit_search(res, tmp_path)
    rows = paths[0].read_text().splitlines()
    assert rows[0] == "run_index,blr,bs,epochs,warmup,objective,rank" and len(rows) == 3
    assert "blr = " in paths[1].read_text()
