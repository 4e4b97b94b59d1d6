"""Random hyperparameter search on the designated search fold.

Only the search fold's patients are touched: they are split 80/20 (stratified
by label vector, seeded) into a training and a validation part, every sampled
configuration is trained on the first and scored by mean AUC over heads on
the second.
"""
from __future__ import annotations

import csv
import io
import math
import os
from collections import defaultdict
from collections.abc import Iterable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .config import write_config
from .data import DatasetManifest
from .errors import ConfigError, FoldError
from .evaluation import build_report, ensure_folds, predict_patient
from .seeding import derive_seed, rng_for
from .tiling import TileSampler
from .training import TrainConfig


@dataclass(frozen=True)
class SearchSpace:
    blr_range: tuple[float, float] = (3e-6, 1e-4)
    bs_range: tuple[int, int] = (4, 24)
    epochs_range: tuple[int, int] = (32, 96)
    warmup_range: tuple[int, int] = (0, 18)
    n_runs: int = 96
    seed: int = 0

    def validate(self) -> "SearchSpace":
        lo, hi = self.blr_range
        if not 0 < lo <= hi:
            raise ConfigError("blr_range must satisfy 0 < low <= high")
        for name in ("bs_range", "epochs_range", "warmup_range"):
            a, b = getattr(self, name)
            if a > b or a < 0:
                raise ConfigError(f"{name} must satisfy 0 <= low <= high")
        if self.bs_range[0] < 1 or self.epochs_range[0] < 1:
            raise ConfigError("bs and epochs ranges must start at 1 or above")
        if self.warmup_range[0] >= self.epochs_range[1]:
            raise ConfigError("no warmup value lies below the largest epoch count")
        if self.n_runs < 1:
            raise ConfigError("n_runs must be at least 1")
        return self


def sample_config(space: SearchSpace, rng: np.random.Generator, base: TrainConfig | None = None) -> TrainConfig:
    """blr log-uniform; bs, epochs and warmup uniform integers; warmup < epochs by resampling."""
    base = base or TrainConfig()
    lo, hi = space.blr_range
    blr = float(math.exp(rng.uniform(math.log(lo), math.log(hi))))
    bs = int(rng.integers(space.bs_range[0], space.bs_range[1], endpoint=True))
    while True:
        epochs = int(rng.integers(space.epochs_range[0], space.epochs_range[1], endpoint=True))
        warmup = int(rng.integers(space.warmup_range[0], space.warmup_range[1], endpoint=True))
        if warmup < epochs:
            break
    return base.replace(blr=blr, bs=bs, epochs=epochs, warmup=warmup)


def sample_configs(space: SearchSpace, base: TrainConfig | None = None) -> list[TrainConfig]:
    """The run sequence of a search; run i gets seed mix(space.seed, i)."""
    space.validate()
    rng = rng_for(space.seed, "search")
    return [sample_config(space, rng, base).replace(seed=derive_seed(space.seed, i) % 2**31)
            for i in range(space.n_runs)]


def validation_split(patient_ids: Iterable[str], labels: dict[str, tuple[int, ...]], fraction: float,
                     seed: int) -> tuple[list[str], list[str]]:
    """Patient-level split stratified by label vector; returns (train, validation)."""
    if not 0 < fraction < 1:
        raise ConfigError("validation fraction must lie in (0, 1)")
    groups: dict[tuple, list[str]] = defaultdict(list)
    for pid in sorted(patient_ids):
        groups[labels[pid]].append(pid)
    train, val = [], []
    rng = rng_for(seed, "validation-split")
    for key in sorted(groups):
        members = [groups[key][i] for i in rng.permutation(len(groups[key]))]
        n_val = int(round(fraction * len(members)))
        if len(members) >= 2:
            n_val = min(max(n_val, 1), len(members) - 1)
        val += members[:n_val]
        train += members[n_val:]
    if not train or not val:
        raise FoldError("search fold too small for a training/validation split")
    return sorted(train), sorted(val)


@dataclass
class SearchEntry:
    run_index: int
    config: TrainConfig
    auc_per_head: dict[str, float]
    objective: float
    rank: int = 0


@dataclass
class SearchResult:
    entries: list[SearchEntry]  # ordered by rank
    train_ids: list[str]
    validation_ids: list[str]
    patients_seen: set[str] = field(default_factory=set)

    @property
    def best(self) -> SearchEntry:
        return self.entries[0]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["run_index", "blr", "bs", "epochs", "warmup", "objective", "rank"])
        for e in sorted(self.entries, key=lambda e: e.run_index):
            c = e.config
            w.writerow([e.run_index, repr(c.blr), c.bs, c.epochs, c.warmup,
                        "nan" if math.isnan(e.objective) else repr(e.objective), e.rank])
        return buf.getvalue()


def rank_entries(entries: list[SearchEntry]) -> list[SearchEntry]:
    """Descending objective, NaN last, ties by run index; assigns ranks from 1."""
    ordered = sorted(entries, key=lambda e: (math.isnan(e.objective), -e.objective if not math.isnan(e.objective)
                                             else 0.0, e.run_index))
    for r, e in enumerate(ordered, start=1):
        e.rank = r
    return ordered


def _run_one(args) -> tuple[int, dict[str, float], float, set[str]]:
    dataset, index, config, pipeline, train_ids, val_ids = args
    from .baselines import PipelineKind, train_pipeline

    kind = PipelineKind(pipeline)
    model, history = train_pipeline(kind, dataset, config, patient_ids=train_ids)
    patients = dataset.patients()
    sampler = TileSampler(config.tiling)
    seed = derive_seed(config.seed, "inference")
    scores = [predict_patient(model, patients[p], config.eval_roles, config.k_infer, seed, dataset.heads,
                              sampler, kind.mask_source()) for p in val_ids]
    report = build_report(scores, dataset.heads, "validation")
    return index, {h.head: h.auc for h in report.heads}, report.mean_auc, history.patients_seen | set(val_ids)


def run_search(dataset: DatasetManifest, space: SearchSpace, search_fold: int = 0, validation_fraction: float = 0.2,
               *, base: TrainConfig | None = None, pipeline: str = "ksiam", n_folds: int = 5,
               workers: int = 1) -> SearchResult:
    base = (base or TrainConfig()).validate()
    dataset = ensure_folds(dataset, n_folds, base.seed)
    fold_ids = [p for p, f in dataset.folds().items() if f == search_fold]
    if not fold_ids:
        raise FoldError(f"search fold {search_fold} is empty")
    patients = dataset.patients()
    labels = {p: tuple(patients[p].label_vector(dataset.heads)) for p in fold_ids}
    train_ids, val_ids = validation_split(fold_ids, labels, validation_fraction, space.seed)
    configs = sample_configs(space, base)
    jobs = [(dataset, i, c, pipeline, train_ids, val_ids) for i, c in enumerate(configs)]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_run_one, jobs))
    else:
        outcomes = [_run_one(j) for j in jobs]
    seen: set[str] = set()
    entries = []
    for index, aucs, objective, used in outcomes:
        entries.append(SearchEntry(index, configs[index], aucs, objective))
        seen |= used
    return SearchResult(rank_entries(entries), train_ids, val_ids, seen)


def emit_search(result: SearchResult, out_dir: str | os.PathLike) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    csv_path = out / "search_results.csv"
    csv_path.write_text(result.to_csv(), encoding="utf-8")
    best = result.best
    cfg_path = write_config(out / "best_config.cfg", best.config,
                            header=f"best of {len(result.entries)} runs: run {best.run_index}, "
                                   f"objective {best.objective!r}")
    return [csv_path, cfg_path]
