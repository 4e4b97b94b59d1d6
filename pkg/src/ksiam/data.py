"""Dataset abstraction: slides, patients, labels and the CSV manifest.

A manifest is a UTF-8 CSV with the fixed leading columns

    patient_id, slide_id, role, image_path, microns_per_pixel, fold

followed by one ``label_<head>`` column per prediction head. A JSON sidecar
``<manifest stem>.meta.json`` records the head order and the downsample factor
of the optional ``<slide_id>.mask.png`` tumor masks stored next to each image.
Images are only decoded when a slide's pixels are first accessed.
"""
from __future__ import annotations

import csv
import enum
import io
import json
import os
from collections.abc import Iterable
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import (
    ManifestConsistencyError,
    ManifestParseError,
    MissingFileError,
    NoEligibleSlideError,
    UnknownPatientError,
)

BASE_COLUMNS = ("patient_id", "slide_id", "role", "image_path", "microns_per_pixel", "fold")
LABEL_PREFIX = "label_"
META_VERSION = 1

Image.MAX_IMAGE_PIXELS = None


class Role(str, enum.Enum):
    """Slide classes of a cohort: fresh/archival cuts of tumor or healthy tissue."""

    DIAGNOSTIC_NEW = "diagnostic_new"
    DIAGNOSTIC_OLD = "diagnostic_old"
    HEALTHY_NEW = "healthy_new"
    HEALTHY_OLD = "healthy_old"

    def __str__(self) -> str:
        return self.value


ALL_ROLES = frozenset(Role)


def parse_roles(value: str | Iterable[str | Role]) -> frozenset[Role]:
    """Parse a comma separated role list (or iterable); ``all`` selects every role."""
    if isinstance(value, str):
        items = [v.strip() for v in value.split(",") if v.strip()]
    else:
        items = list(value)
    if items == ["all"]:
        return ALL_ROLES
    try:
        return frozenset(Role(v) for v in items)
    except ValueError as exc:
        raise ValueError(f"unknown slide role in {value!r}") from exc


def read_rgb(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def read_mask(path: str | os.PathLike) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("L")) > 0


@dataclass(eq=False)
class Slide:
    """One flat raster with physical resolution and patient linkage.

    ``pixels`` and ``tumor_mask`` are loaded lazily from ``image_path`` and
    ``mask_path`` unless arrays were supplied directly.
    """

    slide_id: str
    patient_id: str
    role: Role
    microns_per_pixel: float
    image_path: Path | None = None
    mask_path: Path | None = None
    mask_downsample: int | None = None
    _pixels: np.ndarray | None = field(default=None, repr=False)
    _tumor_mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self) -> None:
        self.role = Role(self.role)
        if not self.microns_per_pixel > 0:
            raise ValueError(f"slide {self.slide_id}: microns_per_pixel must be > 0")
        if self._tumor_mask is not None and self.mask_downsample is None:
            raise ValueError("a tumor mask needs its downsample factor")

    @classmethod
    def from_array(cls, pixels: np.ndarray, microns_per_pixel: float = 0.25, *, slide_id: str = "s0",
                   patient_id: str = "p0", role: Role | str = Role.DIAGNOSTIC_NEW,
                   tumor_mask: np.ndarray | None = None, mask_downsample: int | None = None) -> "Slide":
        pixels = np.ascontiguousarray(pixels, dtype=np.uint8)
        if pixels.ndim != 3 or pixels.shape[2] != 3:
            raise ValueError("pixels must be H x W x 3")
        return cls(slide_id, patient_id, Role(role), float(microns_per_pixel),
                   _pixels=pixels, _tumor_mask=None if tumor_mask is None else np.asarray(tumor_mask, bool),
                   mask_downsample=mask_downsample)

    @property
    def pixels(self) -> np.ndarray:
        if self._pixels is None:
            if self.image_path is None:
                raise MissingFileError(f"slide {self.slide_id} has no pixel source")
            self._pixels = read_rgb(self.image_path)
        return self._pixels

    @property
    def has_tumor_mask(self) -> bool:
        return self._tumor_mask is not None or (self.mask_path is not None and self.mask_path.exists())

    @property
    def tumor_mask(self) -> np.ndarray | None:
        if self._tumor_mask is None and self.mask_path is not None and self.mask_path.exists():
            self._tumor_mask = read_mask(self.mask_path)
        return self._tumor_mask

    @property
    def shape(self) -> tuple[int, int]:
        return self.pixels.shape[:2]

    def __getstate__(self) -> dict:
        # rasters that live on disk are not shipped to worker processes
        state = dict(self.__dict__)
        if self.image_path is not None:
            state["_pixels"] = None
        if self.mask_path is not None:
            state["_tumor_mask"] = None
        return state

    def release(self) -> None:
        """Drop cached rasters that can be reloaded from disk."""
        if self.image_path is not None:
            self._pixels = None
        if self.mask_path is not None:
            self._tumor_mask = None


@dataclass
class Patient:
    patient_id: str
    slides: list[Slide]
    labels: dict[str, int]
    fold: int | None = None

    def label_vector(self, heads: list[str]) -> list[int]:
        return [self.labels[h] for h in heads]


@dataclass(frozen=True)
class ManifestRow:
    patient_id: str
    slide_id: str
    role: Role
    image_path: str
    microns_per_pixel: float
    fold: int | None
    labels: tuple[int, ...]


@dataclass
class DatasetManifest:
    """Rows of a manifest plus dataset-level metadata.

    ``root`` is the directory that relative image paths resolve against.
    """

    rows: list[ManifestRow]
    heads: list[str]
    root: Path = Path(".")
    mask_downsample: int | None = None
    _slides: dict[str, Slide] = field(default_factory=dict, init=False, repr=False)
    _patients: dict[str, Patient] | None = field(default=None, init=False, repr=False)

    def __post_init__(self) -> None:
        self.validate()

    @property
    def n_heads(self) -> int:
        return len(self.heads)

    def validate(self) -> None:
        if not self.heads:
            raise ManifestParseError("manifest needs at least one label column")
        seen: set[str] = set()
        per_patient: dict[str, tuple] = {}
        for row in self.rows:
            if row.slide_id in seen:
                raise ManifestConsistencyError(f"duplicate slide_id {row.slide_id!r}")
            seen.add(row.slide_id)
            if len(row.labels) != len(self.heads):
                raise ManifestParseError(f"slide {row.slide_id}: expected {len(self.heads)} labels")
            key = (row.labels, row.fold)
            prev = per_patient.setdefault(row.patient_id, key)
            if prev[0] != row.labels:
                raise ManifestConsistencyError(f"conflicting labels for patient {row.patient_id!r}")
            if prev[1] != row.fold:
                raise ManifestConsistencyError(f"conflicting folds for patient {row.patient_id!r}")
        diagnostic = {r.patient_id for r in self.rows if r.role is Role.DIAGNOSTIC_NEW}
        lacking = sorted(set(per_patient) - diagnostic)
        if lacking:
            raise ManifestConsistencyError(f"patients without a diagnostic_new slide: {lacking[:5]}")

    def resolve(self, image_path: str) -> Path:
        p = Path(image_path)
        return p if p.is_absolute() else self.root / p

    def check_files(self) -> None:
        for row in self.rows:
            path = self.resolve(row.image_path)
            if not path.is_file():
                raise MissingFileError(f"image file not found: {path}")

    @property
    def patient_ids(self) -> list[str]:
        return sorted({r.patient_id for r in self.rows})

    def slide(self, slide_id: str) -> Slide:
        if slide_id not in self._slides:
            row = next((r for r in self.rows if r.slide_id == slide_id), None)
            if row is None:
                raise KeyError(slide_id)
            image = self.resolve(row.image_path)
            mask = image.with_name(f"{row.slide_id}.mask.png")
            self._slides[slide_id] = Slide(
                row.slide_id, row.patient_id, row.role, row.microns_per_pixel,
                image_path=image, mask_path=mask if self.mask_downsample else None,
                mask_downsample=self.mask_downsample,
            )
        return self._slides[slide_id]

    def patients(self) -> dict[str, Patient]:
        if self._patients is not None:
            return self._patients
        out: dict[str, Patient] = {}
        for row in sorted(self.rows, key=lambda r: (r.patient_id, r.slide_id)):
            p = out.get(row.patient_id)
            if p is None:
                p = out[row.patient_id] = Patient(row.patient_id, [], dict(zip(self.heads, row.labels)), row.fold)
            p.slides.append(self.slide(row.slide_id))
        self._patients = out
        return out

    def patient(self, patient_id: str) -> Patient:
        try:
            return self.patients()[patient_id]
        except KeyError:
            raise UnknownPatientError(f"unknown patient_id {patient_id!r}") from None

    def folds(self) -> dict[str, int | None]:
        return {r.patient_id: r.fold for r in self.rows}

    def with_folds(self, assignment: dict[str, int]) -> "DatasetManifest":
        """Return a copy whose rows carry the fold of their patient."""
        missing = {r.patient_id for r in self.rows} - set(assignment)
        if missing:
            raise ManifestConsistencyError(f"no fold for patients {sorted(missing)[:5]}")
        rows = [replace(r, fold=int(assignment[r.patient_id])) for r in self.rows]
        new = DatasetManifest(rows, list(self.heads), self.root, self.mask_downsample)
        new._slides = self._slides
        return new

    def subset(self, patient_ids: Iterable[str]) -> "DatasetManifest":
        keep = set(patient_ids)
        new = DatasetManifest([r for r in self.rows if r.patient_id in keep], list(self.heads),
                              self.root, self.mask_downsample)
        new._slides = self._slides
        return new

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow([*BASE_COLUMNS, *(LABEL_PREFIX + h for h in self.heads)])
        for r in self.rows:
            writer.writerow([r.patient_id, r.slide_id, r.role.value, r.image_path, repr(float(r.microns_per_pixel)),
                             "" if r.fold is None else r.fold, *r.labels])
        return buf.getvalue()

    def meta(self) -> dict:
        return {"format_version": META_VERSION, "heads": list(self.heads), "n_heads": self.n_heads,
                "mask_downsample": self.mask_downsample}

    def write(self, path: str | os.PathLike) -> Path:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(self.to_csv(), encoding="utf-8", newline="")
        meta_path(path).write_text(json.dumps(self.meta(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
        return path


def meta_path(manifest_path: Path) -> Path:
    return manifest_path.with_name(manifest_path.stem + ".meta.json")


def _parse_label(value: str, where: str) -> int:
    if value not in ("0", "1"):
        raise ManifestParseError(f"{where}: label must be 0 or 1, got {value!r}")
    return int(value)


def load_manifest(path: str | os.PathLike, check_files: bool = True) -> DatasetManifest:
    """Parse and validate a manifest CSV. Images are not decoded.

    Raises:
        ManifestParseError: malformed header or row.
        ManifestConsistencyError: duplicate slide ids or conflicting patient labels.
        MissingFileError: the manifest or one of its images does not exist.
    """
    path = Path(path)
    if not path.is_file():
        raise MissingFileError(f"manifest not found: {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ManifestParseError(f"{path}: empty manifest") from None
        if tuple(header[: len(BASE_COLUMNS)]) != BASE_COLUMNS:
            raise ManifestParseError(f"{path}: header must start with {', '.join(BASE_COLUMNS)}")
        label_cols = header[len(BASE_COLUMNS):]
        if not label_cols or not all(c.startswith(LABEL_PREFIX) and len(c) > len(LABEL_PREFIX) for c in label_cols):
            raise ManifestParseError(f"{path}: label columns must be named {LABEL_PREFIX}<head>")
        heads = [c[len(LABEL_PREFIX):] for c in label_cols]
        rows = []
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            where = f"{path}:{lineno}"
            if len(rec) != len(header):
                raise ManifestParseError(f"{where}: expected {len(header)} fields, got {len(rec)}")
            pid, sid, role, image, mpp, fold = rec[: len(BASE_COLUMNS)]
            try:
                role_v = Role(role)
                mpp_v = float(mpp)
                fold_v = int(fold) if fold != "" else None
            except ValueError as exc:
                raise ManifestParseError(f"{where}: {exc}") from None
            if not pid or not sid:
                raise ManifestParseError(f"{where}: empty patient_id or slide_id")
            if not mpp_v > 0:
                raise ManifestParseError(f"{where}: microns_per_pixel must be positive")
            labels = tuple(_parse_label(v, where) for v in rec[len(BASE_COLUMNS):])
            rows.append(ManifestRow(pid, sid, role_v, image, mpp_v, fold_v, labels))

    mask_downsample = None
    mp = meta_path(path)
    if mp.is_file():
        meta = json.loads(mp.read_text(encoding="utf-8"))
        if meta.get("heads") and list(meta["heads"]) != heads:
            raise ManifestConsistencyError(f"{mp}: head list disagrees with manifest columns")
        mask_downsample = meta.get("mask_downsample")
    manifest = DatasetManifest(rows, heads, path.parent, mask_downsample)
    if check_files:
        manifest.check_files()
    return manifest


def get_patient_slides(manifest: DatasetManifest, patient_id: str, roles: Iterable[Role | str] = ALL_ROLES) -> list[Slide]:
    """Slides of one patient whose role is in ``roles``, ordered by slide_id."""
    wanted = {Role(r) for r in roles}
    rows = [r for r in manifest.rows if r.patient_id == patient_id]
    if not rows:
        raise UnknownPatientError(f"unknown patient_id {patient_id!r}")
    return [manifest.slide(r.slide_id) for r in sorted(rows, key=lambda r: r.slide_id) if r.role in wanted]


def eligible_slides(patient: Patient, roles: Iterable[Role]) -> list[Slide]:
    wanted = set(roles)
    slides = sorted((s for s in patient.slides if s.role in wanted), key=lambda s: s.slide_id)
    if not slides:
        raise NoEligibleSlideError(f"patient {patient.patient_id} has no slide with role in {sorted(map(str, wanted))}")
    return slides
