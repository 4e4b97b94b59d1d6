"""Synthetic slides with a planted, spatially sparse class signal.

Each slide is white background plus a blob of textured tissue, part of which
is "tumor" (denser, darker nuclei). Slides of patients that are positive for a
head carry that head's motif, a small two-colour checker patch blended with
opacity ``motif_opacity`` over a random subset of the motif-sized cells lying
fully inside tumor. Both motif colours come from the tissue palette, so colour
histograms do not reveal the label; only the texture does. Low opacity leaves
a faint checker over the normal tumor texture.
"""
from __future__ import annotations

import logging
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from PIL import Image
from scipy import ndimage

from .data import DatasetManifest, ManifestRow, Role
from .errors import ConfigError
from .seeding import rng_for

log = logging.getLogger(__name__)

# (dark, light) colour pairs, one per head
MOTIF_COLORS: tuple[tuple[tuple[int, int, int], tuple[int, int, int]], ...] = (
    ((92, 38, 124), (236, 178, 206)),
    ((150, 60, 96), (214, 200, 226)),
    ((64, 64, 150), (230, 190, 170)),
    ((120, 30, 60), (200, 210, 200)),
    ((40, 90, 110), (240, 160, 190)),
    ((130, 90, 40), (205, 185, 235)),
    ((70, 30, 90), (215, 215, 160)),
    ((100, 110, 140), (245, 150, 150)),
)
# a window matches when the colour difference between its two checker phases
# reaches this fraction of the planted difference
MATCH_FRACTION = 0.5

_BACKGROUND = 248.0
_TISSUE = np.array([226.0, 152.0, 188.0], np.float32)
_TUMOR = np.array([206.0, 124.0, 172.0], np.float32)
_NUCLEUS = np.array([104.0, 48.0, 128.0], np.float32)
_EXTRA_ROLES = (Role.DIAGNOSTIC_OLD, Role.HEALTHY_NEW, Role.HEALTHY_OLD)
_EXTRA_ROLE_P = (0.6, 0.2, 0.2)


def motif_colors(head_index: int) -> tuple[np.ndarray, np.ndarray]:
    if head_index < len(MOTIF_COLORS):
        a, b = MOTIF_COLORS[head_index]
    else:
        rng = np.random.default_rng(head_index)
        a = tuple(rng.integers(40, 140, 3))
        b = tuple(rng.integers(170, 215, 3))
    return np.array(a, np.float32), np.array(b, np.float32)


@dataclass(frozen=True)
class SyntheticSpec:
    """Parameters of a synthetic cohort.

    ``slides_per_patient`` holds the probabilities of a patient having 1, 2 or
    3 slides. The first slide is always ``diagnostic_new``. Sizes are native
    pixels; ``motif_px`` must be a multiple of ``mask_downsample`` and of
    twice ``motif_square_px``.
    """

    n_patients: int = 200
    positive_fraction: float = 0.17
    slide_size_px: tuple[int, int] = (1536, 1536)
    microns_per_pixel: float = 0.5
    tissue_fraction: float = 0.6
    tumor_fraction_of_tissue: float = 0.5
    signal_tile_fraction: float = 0.25
    slides_per_patient: tuple[float, float, float] = (0.8, 0.15, 0.05)
    rng_seed: int = 0
    heads: tuple[str, ...] = ("MSI",)
    motif_px: int = 64
    motif_square_px: int = 8
    mask_downsample: int = 16
    blob_scale: float = 0.18
    motif_opacity: float = 1.0

    def validate(self) -> None:
        if self.n_patients < 1:
            raise ConfigError("n_patients must be positive")
        if not 0 < self.positive_fraction < 1:
            raise ConfigError("positive_fraction must lie in (0, 1)")
        for name in ("tissue_fraction", "tumor_fraction_of_tissue", "signal_tile_fraction"):
            v = getattr(self, name)
            if not 0 < v <= 1:
                raise ConfigError(f"{name} must lie in (0, 1]")
        if not 0 < self.motif_opacity <= 1:
            raise ConfigError("motif_opacity must lie in (0, 1]")
        if not self.microns_per_pixel > 0:
            raise ConfigError("microns_per_pixel must be positive")
        p = self.slides_per_patient
        if len(p) != 3 or min(p) < 0 or not math.isclose(sum(p), 1.0, abs_tol=1e-9):
            raise ConfigError("slides_per_patient must be three probabilities summing to 1")
        if not self.heads or len(set(self.heads)) != len(self.heads):
            raise ConfigError("heads must be a non-empty list of distinct names")
        d, m, s = self.mask_downsample, self.motif_px, self.motif_square_px
        if m % d or m % (2 * s):
            raise ConfigError("motif_px must be a multiple of mask_downsample and 2*motif_square_px")
        h, w = self.slide_size_px
        if h % m or w % m or h < 2 * m or w < 2 * m:
            raise ConfigError("slide_size_px must be multiples of motif_px (at least two motifs wide)")

    @property
    def n_positive(self) -> int:
        return int(round(self.n_patients * self.positive_fraction))


@dataclass
class SlidePlan:
    slide_id: str
    patient_id: str
    role: Role
    positive_heads: tuple[int, ...]


@dataclass
class SyntheticSlide:
    """Rendered slide plus its ground truth."""

    pixels: np.ndarray
    tissue: np.ndarray  # per pixel
    tumor_cells: np.ndarray  # at mask_downsample
    motif_cells: dict[int, list[tuple[int, int]]] = field(default_factory=dict)  # head -> (row, col) motif cells


def assign_labels(spec: SyntheticSpec) -> np.ndarray:
    """Return an (n_patients, G) 0/1 array with exactly ``n_positive`` ones per column."""
    labels = np.zeros((spec.n_patients, len(spec.heads)), np.int64)
    for g in range(len(spec.heads)):
        rng = rng_for(spec.rng_seed, "labels", g)
        labels[rng.choice(spec.n_patients, spec.n_positive, replace=False), g] = 1
    return labels


def plan_cohort(spec: SyntheticSpec) -> tuple[list[SlidePlan], np.ndarray]:
    labels = assign_labels(spec)
    width = max(4, len(str(spec.n_patients - 1)))
    plans: list[SlidePlan] = []
    for i in range(spec.n_patients):
        pid = f"P{i:0{width}d}"
        rng = rng_for(spec.rng_seed, "slides", pid)
        n = 1 + int(rng.choice(3, p=spec.slides_per_patient))
        roles = [Role.DIAGNOSTIC_NEW] + [_EXTRA_ROLES[j] for j in rng.choice(3, n - 1, p=_EXTRA_ROLE_P)]
        pos = tuple(int(g) for g in np.flatnonzero(labels[i]))
        for j, role in enumerate(roles):
            plans.append(SlidePlan(f"{pid}_S{j}", pid, role, pos))
    return plans, labels


def _blob_field(rng: np.random.Generator, shape: tuple[int, int], scale: float) -> np.ndarray:
    sigma = max(1.0, scale * min(shape))
    f = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="reflect")
    # a centred bump keeps the blob off the slide border
    yy, xx = np.mgrid[0:shape[0], 0:shape[1]]
    r2 = ((yy + 0.5) / shape[0] - 0.5) ** 2 + ((xx + 0.5) / shape[1] - 0.5) ** 2
    return f / (f.std() + 1e-12) - 4.0 * r2


def _top_fraction(values: np.ndarray, allowed: np.ndarray, fraction: float) -> np.ndarray:
    idx = np.flatnonzero(allowed.ravel())
    n = int(round(fraction * idx.size))
    out = np.zeros(values.size, bool)
    if n:
        order = np.argsort(-values.ravel()[idx], kind="stable")
        out[idx[order[:n]]] = True
    return out.reshape(values.shape)


def checker(size: int, square: int, dark: np.ndarray, light: np.ndarray, phase: int = 0) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size]
    parity = ((yy // square + xx // square + phase) % 2).astype(bool)
    return np.where(parity[..., None], light, dark).astype(np.float32)


def render_slide(spec: SyntheticSpec, plan: SlidePlan) -> SyntheticSlide:
    """Render one slide deterministically from ``(spec.rng_seed, slide_id)``."""
    rng = rng_for(spec.rng_seed, "render", plan.slide_id)
    h, w = spec.slide_size_px
    d = spec.mask_downsample
    ch, cw = h // d, w // d

    tissue_cells = _top_fraction(_blob_field(rng, (ch, cw), spec.blob_scale), np.ones((ch, cw), bool),
                                 spec.tissue_fraction)
    tumor_field = _blob_field(rng, (ch, cw), spec.blob_scale * 0.7)
    has_tumor = plan.role in (Role.DIAGNOSTIC_NEW, Role.DIAGNOSTIC_OLD)
    if has_tumor:
        tumor_cells = _top_fraction(tumor_field, tissue_cells, spec.tumor_fraction_of_tissue)
    else:
        tumor_cells = np.zeros_like(tissue_cells)

    up = np.ones((d, d), bool)
    tissue = np.kron(tissue_cells, up)
    tumor = np.kron(tumor_cells, up)

    # nuclei: sparse points blurred into dots, denser in tumor
    density = np.where(tumor, 0.012, 0.004).astype(np.float32)
    points = (rng.random((h, w), dtype=np.float32) < density).astype(np.float32)
    nuclei = np.clip(ndimage.gaussian_filter(points, 1.3) * 9.0, 0.0, 1.0)
    shade = np.kron(rng.random((h // 32 + 1, w // 32 + 1), dtype=np.float32), np.ones((32, 32), np.float32))[:h, :w]
    base = np.where(tumor[..., None], _TUMOR, _TISSUE) - 14.0 * shade[..., None]
    img = base * (1.0 - nuclei[..., None]) + _NUCLEUS * nuclei[..., None]
    img += 3.0 * rng.standard_normal((h, w, 3), dtype=np.float32)
    img = np.clip(img, 0.0, 212.0)  # tissue stays below the usual brightness cutoff
    bg = _BACKGROUND + 2.0 * rng.standard_normal((h, w, 1), dtype=np.float32)
    img = np.where(tissue[..., None], img, np.clip(bg, 238.0, 255.0))

    motif_cells: dict[int, list[tuple[int, int]]] = {}
    if has_tumor and plan.positive_heads:
        m = spec.motif_px
        k = m // d
        full = tumor_cells[: (ch // k) * k, : (cw // k) * k].reshape(ch // k, k, cw // k, k).all(axis=(1, 3))
        free = [tuple(int(v) for v in rc) for rc in np.argwhere(full)]
        n_target = int(round(spec.signal_tile_fraction * len(free)))
        if free and n_target == 0:
            n_target = 1
        taken: set[tuple[int, int]] = set()
        for g in plan.positive_heads:
            avail = [c for c in free if c not in taken]
            if len(avail) < n_target:  # more heads than tumor cells: allow sharing
                avail = list(free)
            pick = rng.choice(len(avail), min(n_target, len(avail)), replace=False)
            cells = sorted(avail[i] for i in pick)
            dark, light = motif_colors(g)
            patch = checker(m, spec.motif_square_px, dark, light)
            a = spec.motif_opacity
            for r, c in cells:
                noise = 2.0 * rng.standard_normal(patch.shape, dtype=np.float32)
                cell = img[r * m:(r + 1) * m, c * m:(c + 1) * m]
                cell[:] = (1.0 - a) * cell + a * patch + noise
            taken.update(cells)
            motif_cells[g] = cells
    pixels = np.clip(np.rint(img), 0, 255).astype(np.uint8)
    return SyntheticSlide(pixels, tissue, tumor_cells, motif_cells)


def motif_match_map(pixels: np.ndarray, head_index: int, spec: SyntheticSpec, stride: int | None = None) -> np.ndarray:
    """Boolean map of motif windows found in ``pixels``.

    Scans windows of ``motif_px`` at ``stride`` (default: one checker square). In each
    window the mean colour of the odd squares minus that of the even squares
    is projected on the head's (light - dark) direction; the window matches
    when the projection reaches ``MATCH_FRACTION`` of the planted contrast
    (either sign, so both checker phases are caught). Entry ``[i, j]`` refers
    to the window whose top-left corner is ``(i * stride, j * stride)``.
    """
    s, m = spec.motif_square_px, spec.motif_px
    stride = stride or s
    if stride % s:
        raise ValueError("stride must be a multiple of the checker square")
    dark, light = motif_colors(head_index)
    delta = (light - dark).astype(np.float64)
    proj = pixels.astype(np.float64) @ (delta / np.linalg.norm(delta))
    h, w = proj.shape
    yy, xx = np.mgrid[0:h, 0:w]
    signed = np.where((yy // s + xx // s) % 2 == 1, proj, -proj)
    c = np.pad(signed.cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    ys = np.arange(0, h - m + 1, stride)
    xs = np.arange(0, w - m + 1, stride)
    win = c[np.ix_(ys + m, xs + m)] - c[np.ix_(ys, xs + m)] - c[np.ix_(ys + m, xs)] + c[np.ix_(ys, xs)]
    # half the pixels are odd, half even: mean(odd) - mean(even) = 2 * win / m^2
    contrast = 2.0 * win / (m * m)
    return np.abs(contrast) >= MATCH_FRACTION * spec.motif_opacity * np.linalg.norm(delta)


def contains_motif(patch: np.ndarray, head_index: int, spec: SyntheticSpec) -> bool:
    return bool(motif_match_map(patch, head_index, spec).any())


def count_motif_matches(pixels: np.ndarray, head_index: int, spec: SyntheticSpec) -> int:
    """Number of motif-lattice cells (stride ``motif_px``) that carry the motif."""
    return int(motif_match_map(pixels, head_index, spec, stride=spec.motif_px).sum())


def generate_synthetic_dataset(spec: SyntheticSpec, out_dir: str | Path) -> DatasetManifest:
    """Render every slide of the cohort and write images, masks and manifest."""
    spec.validate()
    out_dir = Path(out_dir)
    img_dir = out_dir / "images"
    img_dir.mkdir(parents=True, exist_ok=True)
    plans, labels = plan_cohort(spec)
    patient_labels = {f"P{i:0{max(4, len(str(spec.n_patients - 1)))}d}": tuple(int(v) for v in labels[i])
                      for i in range(spec.n_patients)}
    rows = []
    for n, plan in enumerate(plans):
        slide = render_slide(spec, plan)
        Image.fromarray(slide.pixels).save(img_dir / f"{plan.slide_id}.png", compress_level=1)
        Image.fromarray(slide.tumor_cells.astype(np.uint8) * 255).save(img_dir / f"{plan.slide_id}.mask.png")
        rows.append(ManifestRow(plan.patient_id, plan.slide_id, plan.role, f"images/{plan.slide_id}.png",
                                spec.microns_per_pixel, None, patient_labels[plan.patient_id]))
        if (n + 1) % 50 == 0:
            log.info("rendered %d/%d slides", n + 1, len(plans))
    manifest = DatasetManifest(rows, list(spec.heads), out_dir, spec.mask_downsample)
    manifest.write(out_dir / "manifest.csv")
    (out_dir / "synthetic_spec.json").write_text(_spec_json(spec), encoding="utf-8")
    return manifest


def _spec_json(spec: SyntheticSpec) -> str:
    import json

    return json.dumps(asdict(spec), indent=2, sort_keys=True) + "\n"
