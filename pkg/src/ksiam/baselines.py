"""Comparison pipelines: tile-wise classification with and without region gating.

Four pipelines share folds, tile geometry, augmentation and schedule:

    ksiam      random tiles, k-Siamese aggregation
    seg_siam   tiles inside the tumor mask, k-Siamese aggregation
    two_stage  tiles inside the tumor mask, tile-wise classifier, mean confidence
    tilewise   random tiles, tile-wise classifier, mean confidence

The tumor mask comes from the synthetic generator (an oracle segmenter).
"""
from __future__ import annotations

import csv
import enum
import io
from collections.abc import Iterable, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, Slide
from .evaluation import CVResult, cross_validate, emit_report, _fmt
from .model import LinearSoftmaxHeads, SlidePrediction, tiles_to_tensor
from .tiling import TileSampler, oracle_tumor_mask
from .training import MaskSource, TrainConfig, TrainHistory, fit, new_model, training_patients


class TilewiseModel(nn.Module):
    """Encoder plus per-tile linear softmax heads; no aggregation inside the model."""

    kind = "tilewise"

    def __init__(self, encoder: nn.Module, n_heads: int, dropout_rate: float = 0.2,
                 head_names: list[str] | None = None):
        super().__init__()
        self.encoder = encoder
        self.n_heads = n_heads
        self.head_names = list(head_names) if head_names else [f"head{g}" for g in range(n_heads)]
        self.dropout_rate = dropout_rate
        self.decoder = LinearSoftmaxHeads(encoder.feature_dim, n_heads)

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def forward(self, tiles: torch.Tensor) -> torch.Tensor:
        """(N, 3, H, W) -> per-tile logits (N, G, 2)."""
        feats = F.dropout(self.encoder(tiles), self.dropout_rate, self.training)
        return self.decoder(feats)

    def training_logits(self, tiles: torch.Tensor) -> tuple[torch.Tensor, int]:
        # every tile is its own example carrying the slide label
        b, k = tiles.shape[:2]
        return self(tiles.reshape(b * k, *tiles.shape[2:])), k

    @torch.no_grad()
    def tile_probs(self, tiles: torch.Tensor) -> np.ndarray:
        self.eval()
        return torch.softmax(self(tiles), dim=-1)[:, :, 1].double().numpy()

    @torch.no_grad()
    def predict_bag(self, tiles: torch.Tensor) -> np.ndarray:
        return mean_confidence(self.tile_probs(tiles))


def mean_confidence(tile_probs: np.ndarray) -> np.ndarray:
    """Average per-tile confidences (k, G) into one slide confidence per head."""
    return np.asarray(tile_probs, np.float64).mean(axis=0)


class PipelineKind(str, enum.Enum):
    KSIAM = "ksiam"
    SEG_SIAM = "seg_siam"
    TWO_STAGE = "two_stage"
    TILEWISE = "tilewise"

    @property
    def model_kind(self) -> str:
        return "ksiam" if self in (PipelineKind.KSIAM, PipelineKind.SEG_SIAM) else "tilewise"

    @property
    def uses_mask(self) -> bool:
        return self in (PipelineKind.SEG_SIAM, PipelineKind.TWO_STAGE)

    def mask_source(self) -> MaskSource | None:
        return oracle_tumor_mask if self.uses_mask else None


def tilewise_train(dataset: DatasetManifest, folds: Iterable[int] | None, config: TrainConfig,
                   mask_source: MaskSource | None = None, *,
                   patient_ids: Iterable[str] | None = None) -> tuple[TilewiseModel, TrainHistory]:
    """Train a tile classifier where each sampled tile inherits its slide's label."""
    config.validate()
    patients = training_patients(dataset, folds, patient_ids)
    model = new_model(config, dataset.heads, "tilewise")
    history = fit(model, patients, dataset.heads, config, mask_source)
    return model, history


def tilewise_predict_slide(model: TilewiseModel, slide: Slide, k_infer: int, rng: np.random.Generator,
                           mask_source: MaskSource | None = None,
                           sampler: TileSampler | None = None) -> SlidePrediction:
    sampler = sampler or TileSampler()
    region = mask_source(slide) if mask_source else None
    bag = sampler.sample(slide, k_infer, rng, region, allow_repeats=False)
    return SlidePrediction(slide.slide_id, model.predict_bag(tiles_to_tensor(bag.pixels)), len(bag))


def train_pipeline(kind: PipelineKind | str, dataset: DatasetManifest, config: TrainConfig, *,
                   folds: Iterable[int] | None = None, patient_ids: Iterable[str] | None = None):
    kind = PipelineKind(kind)
    config.validate()
    patients = training_patients(dataset, folds, patient_ids)
    model = new_model(config, dataset.heads, kind.model_kind)
    history = fit(model, patients, dataset.heads, config, kind.mask_source())
    return model, history


@dataclass
class AblationResult:
    results: dict[PipelineKind, CVResult]

    def rows(self) -> list[tuple[str, str, int, float, float]]:
        out = []
        for kind, res in self.results.items():
            for head in res.heads:
                h = res.pooled.head(head)
                out.append((kind.value, head, h.n, h.auc, h.ap))
        return out

    def auc(self, kind: PipelineKind | str, head: str | None = None) -> float:
        res = self.results[PipelineKind(kind)]
        return res.pooled.head(head or res.heads[0]).auc

    def comparison_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["pipeline", "head", "n", "auc", "ap"])
        for pipeline, head, n, auc, ap in self.rows():
            w.writerow([pipeline, head, n, _fmt(auc), _fmt(ap)])
        return buf.getvalue()


def run_ablation(dataset: DatasetManifest, configs: TrainConfig | Mapping[PipelineKind | str, TrainConfig],
                 search_fold: int = 0, test_folds: Iterable[int] = (1, 2, 3, 4), *,
                 pipelines: Iterable[PipelineKind | str] = tuple(PipelineKind), n_folds: int = 5,
                 workers: int = 1) -> AblationResult:
    """Cross-validate each pipeline under the same folds and collect pooled metrics."""
    kinds = [PipelineKind(p) for p in pipelines]
    if isinstance(configs, TrainConfig):
        per_kind = {k: configs for k in kinds}
    else:
        per_kind = {PipelineKind(k): v for k, v in configs.items()}
    missing = [k.value for k in kinds if k not in per_kind]
    if missing:
        raise ValueError(f"no config for pipelines {missing}")
    results = {}
    for k in kinds:
        results[k] = cross_validate(dataset, per_kind[k], search_fold, test_folds, pipeline=k.value,
                                    n_folds=n_folds, workers=workers)
    return AblationResult(results)


def emit_ablation(result: AblationResult, out_dir: str | Path, plot: bool = True) -> list[Path]:
    """comparison.csv, one report directory per pipeline, and overlaid ROC plots."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "comparison.csv").write_text(result.comparison_csv(), encoding="utf-8")
    written = [out / "comparison.csv"]
    for kind, res in result.results.items():
        written += emit_report(res, out / kind.value, plot=False)
    if plot:
        from .plots import plot_roc

        heads = next(iter(result.results.values())).heads
        for head in heads:
            curves = {}
            for kind, res in result.results.items():
                h = res.pooled.head(head)
                if h.roc:
                    curves[f"{kind.value} (AUC {h.auc:.3f})"] = h.roc
            if curves:
                written.append(plot_roc(curves, out / f"roc_overlay_{head}.png", title=f"ROC: {head}"))
    return written
