"""k-Siamese network: shared tile encoder, mean pooling, per-head linear softmax.

The same encoder weights process every tile of a bag. Feature vectors are
averaged (accumulated in float64, so the result does not depend on tile
order), dropout is applied to the pooled vector, and each head maps it to two
logits. Since the pooling is adaptive, one parameter set serves any bag size.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Protocol

import numpy as np
import torch
from torch import nn
import torch.nn.functional as F

from .errors import DimensionError
from .tiling import TileBag


class EncoderInterface(Protocol):
    """Maps a float tile batch (N, 3, H, W) in [0, 1] to features (N, D)."""

    feature_dim: int
    encoder_id: str

    def __call__(self, tiles: torch.Tensor) -> torch.Tensor: ...

    def config(self) -> dict: ...


class StochasticDepth(nn.Module):
    """Randomly drops a residual branch per sample during training."""

    def __init__(self, survival: float):
        super().__init__()
        self.survival = survival

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if not self.training or self.survival >= 1.0:
            return x
        keep = torch.rand((x.shape[0],) + (1,) * (x.dim() - 1), dtype=x.dtype, device=x.device) < self.survival
        return x * keep / self.survival


class _Block(nn.Module):
    def __init__(self, c_in: int, c_out: int, residual: bool, survival: float):
        super().__init__()
        self.down = nn.Conv2d(c_in, c_out, 3, stride=2, padding=1)
        self.refine = nn.Conv2d(c_out, c_out, 3, padding=1) if residual else None
        self.drop = StochasticDepth(survival) if residual else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = F.silu(self.down(x))
        if self.refine is not None:
            x = x + self.drop(F.silu(self.refine(x)))
        return x


class ToyEncoder(nn.Module):
    """Four stride-2 3x3 conv blocks with SiLU, then global average pooling.

    With ``residual=True`` each block gets a residual 3x3 refinement whose
    survival probability decays linearly with depth down to
    ``stochastic_depth_survival``; without it stochastic depth is a no-op.
    """

    encoder_id = "toy"

    def __init__(self, feature_dim: int = 64, widths: tuple[int, ...] = (8, 16, 32),
                 residual: bool = False, stochastic_depth_survival: float = 0.8):
        super().__init__()
        self.feature_dim = feature_dim
        self.widths = tuple(widths)
        self.residual = residual
        self.stochastic_depth_survival = stochastic_depth_survival
        chans = (3, *self.widths, feature_dim)
        n = len(chans) - 1
        blocks = []
        for i in range(n):
            survival = 1.0 - (i + 1) / n * (1.0 - stochastic_depth_survival)
            blocks.append(_Block(chans[i], chans[i + 1], residual, survival))
        self.blocks = nn.Sequential(*blocks)

    def forward(self, tiles: torch.Tensor) -> torch.Tensor:
        x = (tiles - 0.5) * 4.0
        return self.blocks(x).mean(dim=(2, 3))

    def config(self) -> dict:
        return {"feature_dim": self.feature_dim, "widths": list(self.widths), "residual": self.residual,
                "stochastic_depth_survival": self.stochastic_depth_survival}


class TorchvisionEfficientNet(nn.Module):
    """EfficientNet-B0 trunk from torchvision (random init), as an optional encoder."""

    encoder_id = "efficientnet_b0"

    def __init__(self, feature_dim: int = 1280, stochastic_depth_survival: float = 0.8, **_: object):
        super().__init__()
        from torchvision.models import efficientnet_b0

        net = efficientnet_b0(weights=None, stochastic_depth_prob=1.0 - stochastic_depth_survival)
        self.features = net.features
        self.feature_dim = 1280
        self.stochastic_depth_survival = stochastic_depth_survival
        self.register_buffer("mean", torch.tensor([0.485, 0.456, 0.406]).view(1, 3, 1, 1))
        self.register_buffer("std", torch.tensor([0.229, 0.224, 0.225]).view(1, 3, 1, 1))

    def forward(self, tiles: torch.Tensor) -> torch.Tensor:
        return self.features((tiles - self.mean) / self.std).mean(dim=(2, 3))

    def config(self) -> dict:
        return {"stochastic_depth_survival": self.stochastic_depth_survival}


ENCODERS: dict[str, Callable[..., nn.Module]] = {
    "toy": ToyEncoder,
    "efficientnet_b0": TorchvisionEfficientNet,
}


def register_encoder(name: str, factory: Callable[..., nn.Module]) -> None:
    ENCODERS[name] = factory


def build_encoder(name: str, **kwargs) -> nn.Module:
    try:
        factory = ENCODERS[name]
    except KeyError:
        raise ValueError(f"unknown encoder {name!r}; known: {sorted(ENCODERS)}") from None
    return factory(**kwargs)


class LinearSoftmaxHeads(nn.Module):
    """G independent affine maps D -> 2 (a 1x1 convolution on a pooled vector)."""

    def __init__(self, feature_dim: int, n_heads: int):
        super().__init__()
        self.weight = nn.Parameter(torch.randn(n_heads, 2, feature_dim) * 0.01)
        self.bias = nn.Parameter(torch.zeros(n_heads, 2))

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return torch.einsum("gcd,bd->bgc", self.weight, pooled) + self.bias


def mean_pool(features: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Mean over ``dim`` with float64 accumulation, cast back to the input dtype."""
    return features.to(torch.float64).mean(dim=dim).to(features.dtype)


def tiles_to_tensor(pixels: np.ndarray) -> torch.Tensor:
    """(..., H, W, 3) uint8 -> (..., 3, H, W) float32 in [0, 1]."""
    t = torch.from_numpy(np.ascontiguousarray(pixels)).to(torch.float32) / 255.0
    return t.movedim(-1, -3).contiguous()


class KSiameseModel(nn.Module):
    kind = "ksiam"

    def __init__(self, encoder: nn.Module, n_heads: int, dropout_rate: float = 0.2,
                 head_names: list[str] | None = None):
        super().__init__()
        if not 0 <= dropout_rate < 1:
            raise ValueError("dropout_rate must lie in [0, 1)")
        self.encoder = encoder
        self.n_heads = n_heads
        self.head_names = list(head_names) if head_names else [f"head{g}" for g in range(n_heads)]
        self.dropout_rate = dropout_rate
        self.decoder = LinearSoftmaxHeads(encoder.feature_dim, n_heads)

    @property
    def feature_dim(self) -> int:
        return self.encoder.feature_dim

    def encode(self, tiles: torch.Tensor) -> torch.Tensor:
        """(B, k, 3, H, W) -> (B, k, D)."""
        b, k = tiles.shape[:2]
        return self.encoder(tiles.reshape(b * k, *tiles.shape[2:])).reshape(b, k, -1)

    def forward(self, tiles: torch.Tensor) -> torch.Tensor:
        """Bag batch (B, k, 3, H, W) -> logits (B, G, 2)."""
        pooled = mean_pool(self.encode(tiles))
        pooled = F.dropout(pooled, self.dropout_rate, self.training)
        return self.decoder(pooled)

    def training_logits(self, tiles: torch.Tensor) -> tuple[torch.Tensor, int]:
        """Logits the loss is computed on, and how often each bag label repeats."""
        return self(tiles), 1

    @torch.no_grad()
    def predict_bag(self, tiles: torch.Tensor) -> np.ndarray:
        """Positive-class probability per head for one bag (k, 3, H, W)."""
        self.eval()
        return torch.softmax(self(tiles.unsqueeze(0)), dim=-1)[0, :, 1].double().numpy()


@dataclass
class SlidePrediction:
    slide_id: str
    probs: np.ndarray  # positive-class probability per head
    k_used: int


def encode_bag(encoder: nn.Module, bag: TileBag | np.ndarray) -> list[np.ndarray]:
    """Feature vector of every tile in the bag, in bag order (evaluation mode)."""
    pixels = bag.pixels if isinstance(bag, TileBag) else bag
    if len(pixels) == 0:
        raise DimensionError("cannot encode an empty bag")
    encoder.eval()
    with torch.no_grad():
        feats = encoder(tiles_to_tensor(pixels))
    return [f.numpy() for f in feats]


def aggregate(features) -> np.ndarray:
    """Elementwise arithmetic mean of k equally sized feature vectors."""
    vecs = [np.asarray(f) for f in features]
    if not vecs:
        raise DimensionError("need at least one feature vector")
    if any(v.shape != vecs[0].shape or v.ndim != 1 for v in vecs):
        raise DimensionError("feature vectors must share one 1-D shape")
    dtype = np.result_type(*vecs)
    return np.mean(np.stack(vecs).astype(np.float64), axis=0).astype(dtype if dtype.kind == "f" else np.float64)


def decode(pooled, weight, bias) -> np.ndarray:
    """softmax(W_g @ pooled + b_g) for every head g; returns (G, 2)."""
    pooled = np.asarray(pooled, np.float64)
    if not np.all(np.isfinite(pooled)):
        raise ValueError("pooled vector must be finite")
    logits = np.einsum("gcd,d->gc", np.asarray(weight, np.float64), pooled) + np.asarray(bias, np.float64)
    logits -= logits.max(axis=1, keepdims=True)
    e = np.exp(logits)
    return e / e.sum(axis=1, keepdims=True)


def forward(model: KSiameseModel, bag: TileBag) -> SlidePrediction:
    """Evaluation-mode prediction for one bag."""
    if len(bag) == 0:
        raise DimensionError("cannot predict on an empty bag")
    probs = model.predict_bag(tiles_to_tensor(bag.pixels))
    return SlidePrediction(bag.slide_id, probs, len(bag))


def build_model(encoder: str, n_heads: int, *, feature_dim: int = 64, dropout_rate: float = 0.2,
                stochastic_depth_survival: float = 0.8, head_names: list[str] | None = None,
                **encoder_kwargs) -> KSiameseModel:
    enc = build_encoder(encoder, feature_dim=feature_dim, stochastic_depth_survival=stochastic_depth_survival,
                        **encoder_kwargs)
    return KSiameseModel(enc, n_heads, dropout_rate, head_names)
