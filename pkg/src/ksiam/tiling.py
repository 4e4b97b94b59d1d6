"""Foreground estimation, random non-overlapping tile placement and extraction.

Tile origins live on the lattice of the foreground mask (multiples of its
downsample factor ``d``), so a tile's footprint is an exact union of mask
cells. Within that lattice placements are drawn uniformly at random with
rejection of overlaps; when rejection sampling fails an exhaustive search
decides whether ``k`` disjoint placements exist at all.
"""
from __future__ import annotations

import logging
import math
import warnings
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .data import Slide
from .errors import CapacityError, DimensionError

log = logging.getLogger(__name__)

TILE_SIZE = 256
TARGET_MPP = 0.25


class CapacityWarning(UserWarning):
    """Fewer disjoint placements than requested; tiles were repeated."""


@dataclass(frozen=True)
class TilingConfig:
    tile_size: int = TILE_SIZE
    target_mpp: float = TARGET_MPP
    brightness_cutoff: int = 220
    foreground_fraction: float = 0.1
    mask_downsample: int = 32
    allow_repeats: bool = False
    max_attempts_factor: int = 100
    search_budget: int = 200_000

    def validate(self) -> None:
        if self.tile_size < 1 or self.mask_downsample < 1:
            raise ValueError("tile_size and mask_downsample must be positive")
        if not 0 <= self.brightness_cutoff <= 255:
            raise ValueError("brightness_cutoff must be within 0-255")
        if not 0 < self.foreground_fraction <= 1:
            raise ValueError("foreground_fraction must lie in (0, 1]")
        if not self.target_mpp > 0:
            raise ValueError("target_mpp must be positive")


def native_tile_size(microns_per_pixel: float, tile_size: int = TILE_SIZE, target_mpp: float = TARGET_MPP) -> int:
    """Side length in native pixels covering the physical extent of one tile."""
    return max(1, int(round(tile_size * target_mpp / microns_per_pixel)))


@dataclass(frozen=True)
class TileLocation:
    slide_id: str
    x: int
    y: int
    size_native_px: int

    def overlaps(self, other: "TileLocation") -> bool:
        s, o = self.size_native_px, other.size_native_px
        return self.x < other.x + o and other.x < self.x + s and self.y < other.y + o and other.y < self.y + s


@dataclass
class Tile:
    location: TileLocation
    pixels: np.ndarray


@dataclass
class TileBag:
    """k tiles of one slide; ``pixels`` is a (k, T, T, 3) uint8 array."""

    slide_id: str
    locations: list[TileLocation]
    pixels: np.ndarray
    repeated: bool = False

    def __len__(self) -> int:
        return len(self.locations)

    def tiles(self) -> list[Tile]:
        return [Tile(loc, px) for loc, px in zip(self.locations, self.pixels)]


@dataclass
class ForegroundMask:
    grid: np.ndarray
    downsample: int
    brightness_cutoff: int
    foreground_pixel_fraction: float
    slide_shape: tuple[int, int] = (0, 0)

    def restrict(self, cells: np.ndarray) -> "ForegroundMask":
        return ForegroundMask(self.grid & cells, self.downsample, self.brightness_cutoff,
                              self.foreground_pixel_fraction, self.slide_shape)


class RegionMask(NamedTuple):
    """Binary raster covering the slide at ``downsample`` native pixels per cell."""

    raster: np.ndarray
    downsample: int


def oracle_tumor_mask(slide: Slide) -> RegionMask:
    mask = slide.tumor_mask
    if mask is None:
        raise DimensionError(f"slide {slide.slide_id} has no tumor mask")
    return RegionMask(mask, int(slide.mask_downsample))


def _block_reduce(values: np.ndarray, d: int, how: str) -> np.ndarray:
    h, w = values.shape
    gh, gw = math.ceil(h / d), math.ceil(w / d)
    padded = np.zeros((gh * d, gw * d), values.dtype)
    padded[:h, :w] = values
    blocks = padded.reshape(gh, d, gw, d)
    if how == "sum":
        return blocks.sum(axis=(1, 3))
    if how == "all":
        valid = np.zeros((gh * d, gw * d), bool)
        valid[:h, :w] = True
        return (blocks | ~valid.reshape(gh, d, gw, d)).all(axis=(1, 3))
    raise ValueError(how)


def estimate_foreground(slide: Slide, brightness_cutoff: int = 220, foreground_pixel_fraction: float = 0.1,
                        downsample: int = 32, *, tile_size: int = TILE_SIZE,
                        target_mpp: float = TARGET_MPP) -> ForegroundMask:
    """Grid of cells holding at least ``foreground_pixel_fraction`` non-white pixels.

    A pixel counts as tissue when its darkest channel is below
    ``brightness_cutoff``. Edge cells are judged on the pixels they contain.
    """
    pixels = slide.pixels
    h, w = pixels.shape[:2]
    side = native_tile_size(slide.microns_per_pixel, tile_size, target_mpp)
    if h < side or w < side:
        raise DimensionError(f"slide {slide.slide_id} ({h}x{w}) is smaller than one tile ({side} px)")
    dark = pixels.min(axis=2) < brightness_cutoff
    counts = _block_reduce(dark.astype(np.int32), downsample, "sum")
    area = _block_reduce(np.ones((h, w), np.int32), downsample, "sum")
    grid = counts >= foreground_pixel_fraction * area
    return ForegroundMask(grid, downsample, brightness_cutoff, foreground_pixel_fraction, (h, w))


def region_cells(region: RegionMask, slide_shape: tuple[int, int], downsample: int) -> np.ndarray:
    """Cells of a ``downsample`` grid lying entirely inside ``region``."""
    h, w = slide_shape
    r = np.asarray(region.raster, bool)
    f = int(region.downsample)
    if r.shape[0] * f < h or r.shape[1] * f < w:
        raise DimensionError("region mask does not cover the slide")
    if downsample % f == 0:
        k = downsample // f
        gh, gw = math.ceil(h / downsample), math.ceil(w / downsample)
        sub = np.zeros((gh * k, gw * k), bool)
        rh, rw = math.ceil(h / f), math.ceil(w / f)
        sub[:rh, :rw] = r[:rh, :rw]
        valid = np.zeros_like(sub)
        valid[:rh, :rw] = True
        return (sub | ~valid).reshape(gh, k, gw, k).all(axis=(1, 3))
    pixel = np.repeat(np.repeat(r, f, axis=0), f, axis=1)[:h, :w]
    return _block_reduce(pixel, downsample, "all")


def admissible_origins(mask: ForegroundMask, side: int) -> np.ndarray:
    """(n, 2) array of (x, y) lattice origins whose whole footprint is foreground."""
    h, w = mask.slide_shape
    d = mask.downsample
    grid = mask.grid
    span = math.ceil(side / d)
    gh, gw = grid.shape
    ny, nx = (h - side) // d + 1, (w - side) // d + 1
    if ny <= 0 or nx <= 0:
        return np.zeros((0, 2), np.int64)
    c = np.pad(grid.astype(np.int32).cumsum(0).cumsum(1), ((1, 0), (1, 0)))
    iy, ix = np.arange(ny), np.arange(nx)
    y1, x1 = np.minimum(iy + span, gh), np.minimum(ix + span, gw)
    need = np.outer(y1 - iy, x1 - ix)
    got = c[np.ix_(y1, x1)] - c[np.ix_(iy, x1)] - c[np.ix_(y1, ix)] + c[np.ix_(iy, ix)]
    yy, xx = np.nonzero(got == need)
    return np.stack([xx * d, yy * d], axis=1).astype(np.int64)


def _search_disjoint(origins: np.ndarray, side: int, k: int, budget: int) -> tuple[list[int], bool]:
    """Depth-first search for ``k`` pairwise disjoint placements.

    Returns the largest set found and whether the search was exhaustive (or
    succeeded); a non-exhaustive failure means the budget ran out.
    """
    n = len(origins)
    xs, ys = origins[:, 0], origins[:, 1]
    conflicts = [np.flatnonzero((np.abs(xs - xs[i]) < side) & (np.abs(ys - ys[i]) < side)) for i in range(n)]
    best: list[int] = []
    chosen: list[int] = []
    blocked = np.zeros(n, np.int32)
    nodes = 0

    def dfs(start: int) -> bool:
        nonlocal best, nodes
        nodes += 1
        if len(chosen) > len(best):
            best = list(chosen)
        if len(chosen) >= k:
            return True
        if nodes > budget:
            return False
        free = np.flatnonzero(blocked[start:] == 0) + start
        if len(chosen) + len(free) < k and len(chosen) + len(free) <= len(best):
            return False
        for i in free:
            if blocked[i]:
                continue
            chosen.append(int(i))
            blocked[conflicts[i]] += 1
            done = dfs(int(i) + 1)
            blocked[conflicts[i]] -= 1
            chosen.pop()
            if done or nodes > budget:
                return done
        return False

    found = dfs(0)
    return best, found or nodes <= budget


class TileSampler:
    """Samples bags from slides, caching admissible origins per slide and region."""

    def __init__(self, config: TilingConfig | None = None):
        self.config = config or TilingConfig()
        self.config.validate()
        self._origins: dict[tuple[str, bool], tuple[Slide, np.ndarray]] = {}

    def side(self, slide: Slide) -> int:
        return native_tile_size(slide.microns_per_pixel, self.config.tile_size, self.config.target_mpp)

    def foreground(self, slide: Slide) -> ForegroundMask:
        c = self.config
        return estimate_foreground(slide, c.brightness_cutoff, c.foreground_fraction, c.mask_downsample,
                                   tile_size=c.tile_size, target_mpp=c.target_mpp)

    def origins(self, slide: Slide, region: RegionMask | None = None) -> np.ndarray:
        key = (slide.slide_id, region is not None)
        cached = self._origins.get(key)
        if cached is None or cached[0] is not slide:
            mask = self.foreground(slide)
            if region is not None:
                mask = mask.restrict(region_cells(region, mask.slide_shape, mask.downsample))
                if not mask.grid.any():
                    raise CapacityError(f"region mask of slide {slide.slide_id} does not intersect the foreground",
                                        0, None)
            cached = self._origins[key] = (slide, admissible_origins(mask, self.side(slide)))
        return cached[1]

    def locations(self, slide: Slide, k: int, rng: np.random.Generator, region: RegionMask | None = None,
                  allow_repeats: bool | None = None) -> tuple[list[TileLocation], bool]:
        """Sample ``k`` locations; the flag reports whether placements repeat."""
        origins = self.origins(slide, region)
        allow = self.config.allow_repeats if allow_repeats is None else allow_repeats
        return place_tiles(slide.slide_id, origins, self.side(slide), k, rng, allow,
                           self.config.max_attempts_factor, self.config.search_budget)

    def sample(self, slide: Slide, k: int, rng: np.random.Generator, region: RegionMask | None = None,
               allow_repeats: bool | None = None) -> TileBag:
        locs, repeated = self.locations(slide, k, rng, region, allow_repeats)
        pixels = np.stack([extract_tile(slide, loc, self.config.tile_size) for loc in locs])
        return TileBag(slide.slide_id, locs, pixels, repeated)

    def forget(self, slide_id: str) -> None:
        for key in [k for k in self._origins if k[0] == slide_id]:
            del self._origins[key]


def place_tiles(slide_id: str, origins: np.ndarray, side: int, k: int, rng: np.random.Generator,
                allow_repeats: bool = False, max_attempts_factor: int = 100,
                search_budget: int = 200_000) -> tuple[list[TileLocation], bool]:
    if k < 1:
        raise ValueError("k must be at least 1")
    n = len(origins)
    if n == 0:
        raise CapacityError(f"slide {slide_id} has no admissible tile position", 0, k)
    xs = np.empty(k, np.int64)
    ys = np.empty(k, np.int64)
    picked: list[int] = []
    for _ in range(max_attempts_factor * k):
        i = int(rng.integers(n))
        x, y = origins[i]
        m = len(picked)
        if m and np.any((np.abs(xs[:m] - x) < side) & (np.abs(ys[:m] - y) < side)):
            continue
        xs[m], ys[m] = x, y
        picked.append(i)
        if len(picked) == k:
            break
    repeated = False
    if len(picked) < k:
        order = rng.permutation(n)
        best, complete = _search_disjoint(origins[order], side, k, search_budget)
        if len(best) >= k:
            picked = [int(order[i]) for i in best[:k]]
            picked = [picked[i] for i in rng.permutation(k)]
        elif allow_repeats:
            picked = [int(order[i]) for i in best]
            extra = rng.choice(len(picked), k - len(picked), replace=True)
            msg = f"slide {slide_id}: only {len(picked)} disjoint tiles available, repeating to reach {k}"
            warnings.warn(msg, CapacityWarning, stacklevel=3)
            log.warning(msg)
            picked = picked + [picked[j] for j in extra]
            repeated = True
        else:
            qualifier = "" if complete else "at least "
            raise CapacityError(f"slide {slide_id} admits {qualifier}{len(best)} disjoint tiles, {k} requested",
                                len(best), k)
    return [TileLocation(slide_id, int(origins[i][0]), int(origins[i][1]), side) for i in picked], repeated


def sample_tile_locations(slide: Slide, mask: ForegroundMask, k: int, rng: np.random.Generator,
                          allow_repeats: bool = False, *, tile_size: int = TILE_SIZE,
                          target_mpp: float = TARGET_MPP) -> list[TileLocation]:
    """Random, pairwise non-overlapping tile locations with foreground footprints.

    Raises:
        CapacityError: fewer than ``k`` disjoint placements exist and repeats are off.
    """
    side = native_tile_size(slide.microns_per_pixel, tile_size, target_mpp)
    if mask.slide_shape == (0, 0):
        mask = ForegroundMask(mask.grid, mask.downsample, mask.brightness_cutoff,
                              mask.foreground_pixel_fraction, slide.shape)
    locs, _ = place_tiles(slide.slide_id, admissible_origins(mask, side), side, k, rng, allow_repeats)
    return locs


def resize_bilinear(patch: np.ndarray, size: int) -> np.ndarray:
    """Corner-aligned bilinear resize of a square (s, s, C) patch to (size, size, C)."""
    s = patch.shape[0]
    if s == size:
        return patch.copy()
    src = patch.astype(np.float32)
    pos = np.linspace(0.0, s - 1, size) if size > 1 else np.zeros(1)
    i0 = np.minimum(np.floor(pos).astype(np.int64), s - 1)
    i1 = np.minimum(i0 + 1, s - 1)
    t = (pos - i0).astype(np.float32)
    rows = src[i0] * (1 - t)[:, None, None] + src[i1] * t[:, None, None]
    out = rows[:, i0] * (1 - t)[None, :, None] + rows[:, i1] * t[None, :, None]
    return np.clip(np.rint(out), 0, 255).astype(np.uint8)


def extract_tile(slide: Slide, location: TileLocation, tile_size: int = TILE_SIZE) -> np.ndarray:
    """Crop the native footprint and resample it to ``tile_size`` square pixels."""
    h, w = slide.shape
    x, y, s = location.x, location.y, location.size_native_px
    if x < 0 or y < 0 or x + s > w or y + s > h:
        raise DimensionError(f"tile at ({x}, {y}) size {s} exceeds slide {slide.slide_id} ({h}x{w})")
    return resize_bilinear(slide.pixels[y:y + s, x:x + s], tile_size)


def sample_bag(slide: Slide, k: int, rng: np.random.Generator, region_mask: RegionMask | None = None,
               config: TilingConfig | None = None) -> TileBag:
    """Foreground estimation, placement and extraction in one call."""
    return TileSampler(config).sample(slide, k, rng, region_mask)
