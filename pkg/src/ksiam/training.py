"""Training procedure: schedule, loss, augmentation, slide selection, epoch loop."""
from __future__ import annotations

import dataclasses
import logging
import math
import time
import warnings
from collections.abc import Callable, Iterable
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .data import DatasetManifest, Patient, Role, Slide, eligible_slides
from .errors import CapacityError, ConfigError, FoldError
from .model import KSiameseModel, build_model, tiles_to_tensor
from .seeding import derive_seed, rng_for
from .tiling import RegionMask, TileSampler, TilingConfig

log = logging.getLogger(__name__)

ADAM_BETAS = (0.9, 0.999)
ADAM_EPS = 1e-8

MaskSource = Callable[[Slide], RegionMask]


@dataclass(frozen=True)
class TrainConfig:
    """All hyperparameters of one training run."""

    blr: float = 2e-5
    bs: int = 6
    epochs: int = 72
    warmup: int = 12
    k_train: int = 24
    k_infer: int = 96
    weight_decay: float = 5e-4
    dropout_rate: float = 0.2
    stochastic_depth_survival: float = 0.8
    poly_power: float = 0.9
    aug_brightness: float = 0.25
    aug_contrast: float = 0.25
    aug_saturation: float = 0.25
    aug_hue: float = 0.05
    aug_rotation: bool = True
    aug_arbitrary_angle: bool = False
    seed: int = 0
    roles_for_training: frozenset[Role] = frozenset({Role.DIAGNOSTIC_NEW, Role.DIAGNOSTIC_OLD})
    eval_roles: frozenset[Role] = frozenset({Role.DIAGNOSTIC_NEW})
    amp_enabled: bool = False
    encoder: str = "toy"
    feature_dim: int = 64
    encoder_residual: bool = False
    tiling: TilingConfig = field(default_factory=TilingConfig)

    def validate(self) -> "TrainConfig":
        checks = [
            (self.blr > 0, "blr must be positive"),
            (self.bs >= 1, "bs must be at least 1"),
            (self.epochs >= 1, "epochs must be at least 1"),
            (0 <= self.warmup < self.epochs, "warmup must satisfy 0 <= warmup < epochs"),
            (self.k_train >= 1 and self.k_infer >= 1, "k_train and k_infer must be at least 1"),
            (self.weight_decay >= 0, "weight_decay must be non-negative"),
            (0 <= self.dropout_rate < 1, "dropout_rate must lie in [0, 1)"),
            (0 < self.stochastic_depth_survival <= 1, "stochastic_depth_survival must lie in (0, 1]"),
            (self.poly_power > 0, "poly_power must be positive"),
            (all(0 <= m < 1 for m in (self.aug_brightness, self.aug_contrast, self.aug_saturation)),
             "brightness/contrast/saturation magnitudes must lie in [0, 1)"),
            (0 <= self.aug_hue <= 0.5, "aug_hue must lie in [0, 0.5]"),
            (bool(self.roles_for_training) and bool(self.eval_roles), "role sets must not be empty"),
            (self.feature_dim >= 1, "feature_dim must be positive"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ConfigError(msg)
        try:
            self.tiling.validate()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None
        return self

    @property
    def nlr(self) -> float:
        return normalized_lr(self.blr, self.bs)

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


def normalized_lr(blr: float, bs: int) -> float:
    """Learning rate scaled linearly with the batch size."""
    return bs * blr


def lr_schedule(t: float, nlr: float, epochs: float, warmup: float, power: float) -> float:
    if not 0 <= t <= epochs:
        raise ValueError(f"epoch progress {t} outside [0, {epochs}]")
    if warmup > 0 and t <= warmup:
        return nlr * (t / warmup)
    return nlr * (1.0 - (t - warmup) / (epochs - warmup)) ** power


def lr_at(t: float, config: TrainConfig) -> float:
    """Linear warmup from 0 to nlr over ``warmup`` epochs, then polynomial decay to 0."""
    return lr_schedule(t, config.nlr, config.epochs, config.warmup, config.poly_power)


def multi_head_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Unweighted mean over heads (and batch) of the two-class softmax cross-entropy.

    ``logits`` is (B, G, 2) or (G, 2); ``targets`` holds class indices of shape
    (B, G) or (G,).
    """
    logits = torch.as_tensor(logits)
    targets = torch.as_tensor(targets, dtype=torch.long)
    if logits.dim() == 2:
        logits, targets = logits.unsqueeze(0), targets.reshape(1, -1)
    if logits.shape[:2] != targets.shape or logits.shape[-1] != 2:
        raise ValueError(f"logits {tuple(logits.shape)} do not match targets {tuple(targets.shape)}")
    return F.cross_entropy(logits.reshape(-1, 2), targets.reshape(-1))


def weight_penalty(model: nn.Module) -> torch.Tensor:
    return sum((p * p).sum() for p in model.parameters() if p.requires_grad)


# augmentation ---------------------------------------------------------------

_YIQ = torch.tensor([[0.299, 0.587, 0.114], [0.596, -0.274, -0.322], [0.211, -0.523, 0.312]], dtype=torch.float64)
_YIQ_INV = torch.linalg.inv(_YIQ)


@dataclass(frozen=True)
class AugmentParams:
    rot90: int = 0
    angle: float = 0.0
    brightness: float = 1.0
    contrast: float = 1.0
    saturation: float = 1.0
    hue: float = 0.0


def draw_augment_params(rng: np.random.Generator, config: TrainConfig) -> AugmentParams:
    """Rotation, then brightness/contrast/saturation factors in [1-m, 1+m], hue shift in [-m, m]."""
    u = rng.uniform(-1.0, 1.0, 4)
    rot = int(rng.integers(4))
    angle = float(rng.uniform(-180.0, 180.0))
    return AugmentParams(
        rot90=rot if config.aug_rotation else 0,
        angle=angle if config.aug_arbitrary_angle else 0.0,
        brightness=1.0 + config.aug_brightness * u[0],
        contrast=1.0 + config.aug_contrast * u[1],
        saturation=1.0 + config.aug_saturation * u[2],
        hue=config.aug_hue * u[3],
    )


def _gray(x: torch.Tensor) -> torch.Tensor:
    return (0.299 * x[:, 0] + 0.587 * x[:, 1] + 0.114 * x[:, 2]).unsqueeze(1)


def _rotate(x: torch.Tensor, degrees: torch.Tensor) -> torch.Tensor:
    theta = torch.deg2rad(degrees.to(x.dtype))
    c, s = torch.cos(theta), torch.sin(theta)
    zero = torch.zeros_like(c)
    mat = torch.stack([torch.stack([c, -s, zero], 1), torch.stack([s, c, zero], 1)], 1)
    grid = F.affine_grid(mat, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="reflection", align_corners=False)


def _column(values, x: torch.Tensor) -> torch.Tensor:
    return torch.tensor(values, dtype=x.dtype).view(-1, 1, 1, 1)


def apply_augmentation(x: torch.Tensor, params: AugmentParams | list[AugmentParams]) -> torch.Tensor:
    """Apply per-tile parameters to float tiles in [0, 1], in a fixed order.

    ``x`` is (N, 3, H, W) with one parameter set per tile, or a single
    (3, H, W) tile with one parameter set. Steps whose factors are all
    neutral are skipped, so zero magnitudes reproduce the input exactly.
    """
    if x.dim() == 3:
        return apply_augmentation(x.unsqueeze(0), [params])[0]
    ps = list(params)
    rots = [p.rot90 % 4 for p in ps]
    if any(rots):
        x = x.clone()
        for r in (1, 2, 3):
            idx = [i for i, v in enumerate(rots) if v == r]
            if idx:
                x[idx] = torch.rot90(x[idx], r, dims=(2, 3))
    if any(p.angle for p in ps):
        x = _rotate(x, torch.tensor([p.angle for p in ps]))
    if any(p.brightness != 1.0 for p in ps):
        x = (x * _column([p.brightness for p in ps], x)).clamp(0.0, 1.0)
    if any(p.contrast != 1.0 for p in ps):
        m = _gray(x).mean(dim=(1, 2, 3), keepdim=True)
        x = ((x - m) * _column([p.contrast for p in ps], x) + m).clamp(0.0, 1.0)
    if any(p.saturation != 1.0 for p in ps):
        g = _gray(x)
        x = ((x - g) * _column([p.saturation for p in ps], x) + g).clamp(0.0, 1.0)
    if any(p.hue != 0.0 for p in ps):
        theta = 2.0 * math.pi * torch.tensor([p.hue for p in ps], dtype=torch.float64)
        c, s = torch.cos(theta), torch.sin(theta)
        rot = torch.zeros(len(ps), 3, 3, dtype=torch.float64)
        rot[:, 0, 0] = 1.0
        rot[:, 1, 1], rot[:, 1, 2], rot[:, 2, 1], rot[:, 2, 2] = c, -s, s, c
        mat = (_YIQ_INV @ rot @ _YIQ).to(x.dtype)
        x = torch.einsum("nij,njhw->nihw", mat, x).clamp(0.0, 1.0)
    return x


def augment_tiles(x: torch.Tensor, rng: np.random.Generator, config: TrainConfig) -> torch.Tensor:
    """Independent augmentation of each tile in a (N, 3, H, W) batch."""
    return apply_augmentation(x, [draw_augment_params(rng, config) for _ in range(len(x))])


def augment_tile(tile: np.ndarray, rng: np.random.Generator, config: TrainConfig | None = None,
                 params: AugmentParams | None = None) -> np.ndarray:
    """Augment one (H, W, 3) uint8 tile; returns uint8."""
    p = params if params is not None else draw_augment_params(rng, config or TrainConfig())
    out = apply_augmentation(tiles_to_tensor(tile), p)
    return np.clip(np.rint(out.movedim(0, -1).numpy() * 255.0), 0, 255).astype(np.uint8)


# epoch loop -----------------------------------------------------------------

def select_epoch_slides(patients: Iterable[Patient], epoch: int, seed: int,
                        roles: Iterable[Role] = (Role.DIAGNOSTIC_NEW, Role.DIAGNOSTIC_OLD)) -> dict[str, str]:
    """Pick one eligible slide per patient, deterministically in (seed, epoch, patient)."""
    roles = frozenset(roles)
    out = {}
    for p in sorted(patients, key=lambda p: p.patient_id):
        slides = eligible_slides(p, roles)
        idx = int(rng_for(seed, "select", epoch, p.patient_id).integers(len(slides)))
        out[p.patient_id] = slides[idx].slide_id
    return out


@dataclass
class EpochRecord:
    epoch: int
    loss: float
    lr: float
    seconds: float


@dataclass
class TrainHistory:
    epochs: list[EpochRecord] = field(default_factory=list)
    steps: list[tuple[int, int]] = field(default_factory=list)  # (slides, tiles) per optimizer step
    skipped_slides: list[str] = field(default_factory=list)
    patients_seen: set[str] = field(default_factory=set)
    checkpoint: str | None = None

    @property
    def losses(self) -> list[float]:
        return [e.loss for e in self.epochs]

    def to_csv(self) -> str:
        lines = ["epoch,loss,lr,seconds"]
        lines += [f"{e.epoch},{e.loss!r},{e.lr!r},{e.seconds:.3f}" for e in self.epochs]
        return "\n".join(lines) + "\n"


def training_patients(dataset: DatasetManifest, folds_for_training: Iterable[int] | None = None,
                      patient_ids: Iterable[str] | None = None) -> list[Patient]:
    patients = dataset.patients()
    if patient_ids is not None:
        chosen = [patients[p] for p in sorted(set(patient_ids))]
    else:
        folds = set(folds_for_training or ())
        if any(p.fold is None for p in patients.values()):
            raise FoldError("dataset has no fold assignment")
        chosen = [p for _, p in sorted(patients.items()) if p.fold in folds]
    if not chosen:
        raise FoldError("no training patients selected")
    return chosen


def new_model(config: TrainConfig, heads: list[str], kind: str = "ksiam") -> nn.Module:
    torch.manual_seed(derive_seed(config.seed, "init", kind))
    model = build_model(config.encoder, len(heads), feature_dim=config.feature_dim,
                        dropout_rate=config.dropout_rate,
                        stochastic_depth_survival=config.stochastic_depth_survival, head_names=heads,
                        **({"residual": config.encoder_residual} if config.encoder == "toy" else {}))
    if kind == "ksiam":
        return model
    if kind == "tilewise":
        from .baselines import TilewiseModel

        return TilewiseModel(model.encoder, len(heads), config.dropout_rate, heads)
    raise ValueError(f"unknown model kind {kind!r}")


def fit(model: nn.Module, patients: list[Patient], heads: list[str], config: TrainConfig,
        mask_source: MaskSource | None = None, sampler: TileSampler | None = None) -> TrainHistory:
    """Run ``config.epochs`` epochs of Adam on ``model`` in place.

    Each epoch picks one slide per patient, shuffles the patients, cuts them
    into batches of ``bs`` (an incomplete last batch is dropped) and takes one
    optimizer step per batch. The learning rate follows ``lr_at`` evaluated at
    fractional epoch progress.
    """
    config.validate()
    sampler = sampler or TileSampler(config.tiling)
    n_batches = len(patients) // config.bs
    if n_batches == 0:
        raise ConfigError(f"bs={config.bs} exceeds the {len(patients)} training patients")
    by_id = {p.patient_id: p for p in patients}
    slides = {s.slide_id: s for p in patients for s in p.slides}
    targets = {p.patient_id: p.label_vector(heads) for p in patients}
    optimizer = torch.optim.Adam(model.parameters(), lr=0.0, betas=ADAM_BETAS, eps=ADAM_EPS)
    torch.manual_seed(derive_seed(config.seed, "torch"))
    history = TrainHistory()
    history.patients_seen.update(by_id)

    for epoch in range(config.epochs):
        start = time.perf_counter()
        model.train()
        chosen = select_epoch_slides(patients, epoch, config.seed, config.roles_for_training)
        order = sorted(by_id)
        order = [order[i] for i in rng_for(config.seed, "shuffle", epoch).permutation(len(order))]
        losses, first_lr = [], None
        for b in range(n_batches):
            lr = lr_at(epoch + b / n_batches, config)
            first_lr = lr if first_lr is None else first_lr
            for group in optimizer.param_groups:
                group["lr"] = lr
            bags, y = [], []
            for pid in order[b * config.bs:(b + 1) * config.bs]:
                slide = slides[chosen[pid]]
                region = mask_source(slide) if mask_source is not None else None
                try:
                    bag = sampler.sample(slide, config.k_train, rng_for(config.seed, "tiles", epoch, pid), region)
                except CapacityError as exc:
                    msg = f"skipping slide {slide.slide_id} in epoch {epoch}: {exc}"
                    warnings.warn(msg, RuntimeWarning, stacklevel=2)
                    log.warning(msg)
                    history.skipped_slides.append(slide.slide_id)
                    continue
                x = augment_tiles(tiles_to_tensor(bag.pixels), rng_for(config.seed, "aug", epoch, pid), config)
                bags.append(x)
                y.append(targets[pid])
            if not bags:
                continue
            x = torch.stack(bags)
            y_t = torch.tensor(y, dtype=torch.long)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=config.amp_enabled):
                logits, repeat = model.training_logits(x)
            loss = multi_head_loss(logits.float(), y_t.repeat_interleave(repeat, dim=0))
            objective = loss + config.weight_decay * weight_penalty(model) if config.weight_decay else loss
            optimizer.zero_grad(set_to_none=True)
            objective.backward()
            optimizer.step()
            losses.append(loss.item())
            history.steps.append((len(bags), len(bags) * config.k_train))
        rec = EpochRecord(epoch, float(np.mean(losses)) if losses else float("nan"), float(first_lr),
                          time.perf_counter() - start)
        history.epochs.append(rec)
        log.info("epoch %d/%d loss %.4f lr %.3g (%.1fs)", epoch + 1, config.epochs, rec.loss, rec.lr, rec.seconds)
    model.eval()
    return history


def train(dataset: DatasetManifest, folds_for_training: Iterable[int] | None, config: TrainConfig, *,
          patient_ids: Iterable[str] | None = None, mask_source: MaskSource | None = None,
          sampler: TileSampler | None = None) -> tuple[KSiameseModel, TrainHistory]:
    """Train a k-Siamese model on the given folds and return its final-epoch state."""
    config.validate()
    patients = training_patients(dataset, folds_for_training, patient_ids)
    model = new_model(config, dataset.heads, "ksiam")
    history = fit(model, patients, dataset.heads, config, mask_source, sampler)
    return model, history
