"""Patient-level cross-validation, slide/patient inference and metric reports."""
from __future__ import annotations

import csv
import io
import json
import logging
import math
from collections.abc import Iterable
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from torch import nn

from .data import DatasetManifest, Patient, Role, Slide, eligible_slides
from .errors import FoldError
from .metrics import average_precision, has_ties, roc_auc, roc_curve
from .model import SlidePrediction, tiles_to_tensor
from .seeding import derive_seed, rng_for
from .tiling import RegionMask, TileSampler
from .training import MaskSource, TrainConfig, TrainHistory

log = logging.getLogger(__name__)

AP_TIE_POLICY = "stable sort by (score desc, patient_id asc)"


@dataclass
class FoldAssignment:
    folds: dict[str, int]
    n_folds: int
    seed: int

    def sizes(self) -> list[int]:
        counts = [0] * self.n_folds
        for f in self.folds.values():
            counts[f] += 1
        return counts

    def members(self, fold: int) -> list[str]:
        return sorted(p for p, f in self.folds.items() if f == fold)


def make_folds(patient_ids: Iterable[str], n_folds: int = 5, seed: int = 0) -> FoldAssignment:
    """Uniformly random partition of patients into folds whose sizes differ by at most one."""
    ids = sorted(set(patient_ids))
    if n_folds < 2:
        raise FoldError("need at least two folds")
    if len(ids) < n_folds:
        raise FoldError(f"{len(ids)} patients cannot fill {n_folds} folds")
    perm = rng_for(seed, "folds").permutation(len(ids))
    return FoldAssignment({ids[j]: i % n_folds for i, j in enumerate(perm)}, n_folds, seed)


def ensure_folds(dataset: DatasetManifest, n_folds: int = 5, seed: int = 0) -> DatasetManifest:
    folds = dataset.folds()
    if all(f is not None for f in folds.values()):
        return dataset
    if any(f is not None for f in folds.values()):
        raise FoldError("manifest assigns folds to only some patients")
    log.info("manifest has no folds; assigning %d folds with seed %d", n_folds, seed)
    return dataset.with_folds(make_folds(dataset.patient_ids, n_folds, seed).folds)


# inference ------------------------------------------------------------------

def predict_slide(model: nn.Module, slide: Slide, k_infer: int, rng: np.random.Generator,
                  sampler: TileSampler | None = None, region: RegionMask | None = None) -> SlidePrediction:
    """Evaluation-mode prediction from one freshly sampled bag; never repeats tiles."""
    sampler = sampler or TileSampler()
    bag = sampler.sample(slide, k_infer, rng, region, allow_repeats=False)
    probs = model.predict_bag(tiles_to_tensor(bag.pixels))
    return SlidePrediction(slide.slide_id, probs, len(bag))


@dataclass
class PatientScore:
    patient_id: str
    scores: np.ndarray
    labels: np.ndarray
    fold: int | None = None
    slide_ids: list[str] = field(default_factory=list)


def average_confidences(predictions: list[SlidePrediction]) -> np.ndarray:
    return np.mean(np.stack([p.probs for p in predictions]), axis=0)


def predict_patient(model: nn.Module, patient: Patient, roles: Iterable[Role], k_infer: int, seed: int,
                    heads: list[str] | None = None, sampler: TileSampler | None = None,
                    mask_source: MaskSource | None = None) -> PatientScore:
    """Per-head mean of the slide confidences over the patient's eligible slides.

    Each slide's bag is drawn from a stream derived from ``(seed, slide_id)``.
    """
    slides = eligible_slides(patient, roles)
    preds = [predict_slide(model, s, k_infer, rng_for(seed, "infer", s.slide_id), sampler,
                           mask_source(s) if mask_source else None) for s in slides]
    heads = heads or list(patient.labels)
    return PatientScore(patient.patient_id, average_confidences(preds),
                        np.array(patient.label_vector(heads)), patient.fold, [s.slide_id for s in slides])


# reports ---------------------------------------------------------------------

@dataclass
class HeadMetrics:
    head: str
    n: int
    n_positive: int
    auc: float
    ap: float
    roc: list[tuple[float, float, float]]
    ties: bool


@dataclass
class MetricsReport:
    fold: str
    heads: list[HeadMetrics]
    scores: list[PatientScore]
    composition: dict = field(default_factory=dict)

    def head(self, name: str) -> HeadMetrics:
        return next(h for h in self.heads if h.head == name)

    @property
    def mean_auc(self) -> float:
        vals = [h.auc for h in self.heads]
        return float(np.mean(vals)) if vals and not any(math.isnan(v) for v in vals) else float("nan")


def build_report(scores: list[PatientScore], heads: list[str], fold: str) -> MetricsReport:
    ids = [s.patient_id for s in scores]
    out = []
    for g, head in enumerate(heads):
        s = np.array([p.scores[g] for p in scores], dtype=np.float64)
        y = np.array([int(p.labels[g]) for p in scores])
        n_pos = int(y.sum())
        both = 0 < n_pos < len(y)
        out.append(HeadMetrics(
            head, len(y), n_pos,
            roc_auc(s, y) if both else float("nan"),
            average_precision(s, y, ids) if n_pos else float("nan"),
            roc_curve(s, y) if both else [],
            has_ties(s),
        ))
    folds: dict[str, int] = {}
    for p in scores:
        folds[str(p.fold)] = folds.get(str(p.fold), 0) + 1
    composition = {"n_patients": len(scores), "patients_per_fold": folds,
                   "positives": {h.head: h.n_positive for h in out}}
    return MetricsReport(fold, out, scores, composition)


@dataclass
class CVResult:
    pipeline: str
    heads: list[str]
    per_fold: dict[int, MetricsReport]
    pooled: MetricsReport
    cycles: list[tuple[int, list[str], list[str]]]
    histories: dict[int, TrainHistory]
    inference_seed: int
    config: TrainConfig | None = None

    def fold_mean(self, head: str) -> tuple[float, float]:
        hs = [r.head(head) for r in self.per_fold.values()]
        return float(np.mean([h.auc for h in hs])), float(np.mean([h.ap for h in hs]))


def _run_cycle(args) -> tuple[int, list[PatientScore], TrainHistory, list[str], list[str]]:
    dataset, config, pipeline, fold, train_ids, test_ids, inference_seed = args
    from .baselines import PipelineKind, train_pipeline

    kind = PipelineKind(pipeline)
    model, history = train_pipeline(kind, dataset, config, patient_ids=train_ids)
    sampler = TileSampler(config.tiling)
    patients = dataset.patients()
    mask_source = kind.mask_source()
    scores = [predict_patient(model, patients[p], config.eval_roles, config.k_infer, inference_seed,
                              dataset.heads, sampler, mask_source) for p in test_ids]
    return fold, scores, history, train_ids, test_ids


def cross_validate(dataset: DatasetManifest, config: TrainConfig, search_fold: int = 0,
                   test_folds: Iterable[int] = (1, 2, 3, 4), *, pipeline: str = "ksiam", n_folds: int = 5,
                   workers: int = 1) -> CVResult:
    """Train on all folds but ``f`` and evaluate on ``f`` for every test fold.

    The pooled report concatenates per-patient scores over the test folds.
    """
    test_folds = sorted(set(int(f) for f in test_folds))
    if search_fold in test_folds:
        raise FoldError(f"search fold {search_fold} must not be a test fold")
    if not test_folds:
        raise FoldError("no test folds given")
    config.validate()
    dataset = ensure_folds(dataset, n_folds, config.seed)
    folds = dataset.folds()
    present = set(folds.values())
    missing = [f for f in test_folds if f not in present]
    if missing:
        raise FoldError(f"test folds {missing} are empty")
    inference_seed = derive_seed(config.seed, "inference")
    jobs = []
    for f in test_folds:
        test_ids = sorted(p for p, v in folds.items() if v == f)
        train_ids = sorted(p for p, v in folds.items() if v != f)
        jobs.append((dataset, config, pipeline, f, train_ids, test_ids, inference_seed))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_cycle, jobs))
    else:
        results = [_run_cycle(j) for j in jobs]
    per_fold, histories, cycles, pooled_scores = {}, {}, [], []
    for f, scores, history, train_ids, test_ids in results:
        per_fold[f] = build_report(scores, dataset.heads, str(f))
        histories[f] = history
        cycles.append((f, train_ids, test_ids))
        pooled_scores.extend(scores)
    pooled = build_report(pooled_scores, dataset.heads, "pooled")
    return CVResult(pipeline, list(dataset.heads), per_fold, pooled, cycles, histories, inference_seed, config)


def _fmt(v: float) -> str:
    return "nan" if math.isnan(v) else repr(float(v))


def metrics_csv(result: CVResult) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["head", "fold", "n", "auc", "ap"])
    for head in result.heads:
        for f, rep in sorted(result.per_fold.items()):
            h = rep.head(head)
            w.writerow([head, f, h.n, _fmt(h.auc), _fmt(h.ap)])
        h = result.pooled.head(head)
        w.writerow([head, "pooled", h.n, _fmt(h.auc), _fmt(h.ap)])
        auc, ap = result.fold_mean(head)
        w.writerow([head, "mean", h.n, _fmt(auc), _fmt(ap)])
    return buf.getvalue()


def scores_csv(report: MetricsReport, heads: list[str]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "head", "score", "label", "fold"])
    for p in sorted(report.scores, key=lambda p: p.patient_id):
        for g, head in enumerate(heads):
            w.writerow([p.patient_id, head, repr(float(p.scores[g])), int(p.labels[g]),
                        "" if p.fold is None else p.fold])
    return buf.getvalue()


def roc_csv(head: HeadMetrics) -> str:
    lines = ["fpr,tpr,threshold"] + [f"{fpr!r},{tpr!r},{thr!r}" for fpr, tpr, thr in head.roc]
    return "\n".join(lines) + "\n"


def emit_report(result: CVResult | MetricsReport, out_dir: str | Path, plot: bool = True,
                heads: list[str] | None = None) -> list[Path]:
    """Write metrics.csv, scores.csv, roc_<head>.csv, report.json and optionally ROC plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    if isinstance(result, MetricsReport):
        pooled = result
        heads = heads or [h.head for h in result.heads]
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["head", "fold", "n", "auc", "ap"])
        for h in result.heads:
            w.writerow([h.head, result.fold, h.n, _fmt(h.auc), _fmt(h.ap)])
        metrics = buf.getvalue()
        meta = {"fold": result.fold}
    else:
        pooled = result.pooled
        heads = result.heads
        metrics = metrics_csv(result)
        meta = {"pipeline": result.pipeline, "inference_seed": result.inference_seed,
                "test_folds": sorted(result.per_fold), "primary": "pooled",
                "leakage_free": all(not (set(tr) & set(te)) for _, tr, te in result.cycles)}
    written = []
    for name, text in (("metrics.csv", metrics), ("scores.csv", scores_csv(pooled, heads))):
        (out / name).write_text(text, encoding="utf-8")
        written.append(out / name)
    for h in pooled.heads:
        p = out / f"roc_{h.head}.csv"
        p.write_text(roc_csv(h), encoding="utf-8")
        written.append(p)
    meta.update({"ap_tie_policy": AP_TIE_POLICY,
                 "ties_present": {h.head: h.ties for h in pooled.heads},
                 "composition": pooled.composition})
    (out / "report.json").write_text(json.dumps(meta, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    written.append(out / "report.json")
    if plot:
        from .plots import plot_roc

        for h in pooled.heads:
            if h.roc:
                written.append(plot_roc({f"AUC {h.auc:.3f}": h.roc}, out / f"roc_{h.head}.png",
                                        title=f"ROC: {h.head} (n = {h.n})"))
    return written
