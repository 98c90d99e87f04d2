"""Dataset ingestion, defect taxonomy, and deterministic synthetic fixtures.

The on-disk layout follows the MVTec AD convention:
``<category>/{train/good, test/<defect>, ground_truth/<defect>}`` with masks
named by appending ``_mask`` to the test image stem. ``make_fixture`` writes
desk-scale synthetic datasets in the same layout: smooth mid-gray backgrounds
with bright/dark squares or stripes as defects, so defective patches separate
cleanly in the toy embedding space.
"""

from __future__ import annotations

import csv
import io
import warnings
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

import numpy as np
from PIL import Image

from .errors import ConfigurationError, IngestionError, InputError

IMAGE_SUFFIXES = {".png", ".jpg", ".jpeg", ".bmp", ".tif", ".tiff"}

CONTRAST_LEVELS = ("low", "medium", "high")
DEFECT_TYPES = (
    "missing_component",
    "logical_error",
    "geometric_deformation",
    "surface_pattern",
    "multiple",
    "surface_damage",
    "foreign_material",
    "appearance_change",
    "structural_break",
    "missing_material",
)


# ----- index ------------------------------------------------------------------


@dataclass
class CategoryIndex:
    train_good: list[Path]
    test: dict[str, list[Path]]  # defect name ("good" included) -> image paths
    ground_truth: dict[str, list[Path]]  # defect name -> mask paths, aligned with test


@dataclass
class DatasetIndex:
    root: Path
    categories: dict[str, CategoryIndex]
    total_test_images: int


def _sorted_images(directory: Path) -> list[Path]:
    return sorted(p for p in directory.iterdir() if p.is_file() and p.suffix.lower() in IMAGE_SUFFIXES)


def load_index(root: str | Path) -> DatasetIndex:
    """Walk an MVTec-AD-layout tree into a deterministic, lexicographic index."""
    root = Path(root)
    if not root.is_dir():
        raise IngestionError(f"dataset root {root} is not a directory")
    categories: dict[str, CategoryIndex] = {}
    total = 0
    for entry in sorted(root.iterdir()):
        if not entry.is_dir():
            if entry.name != "taxonomy.csv":
                warnings.warn(f"skipping unknown entry {entry}", stacklevel=2)
            continue
        category = entry.name
        train_dir = entry / "train" / "good"
        test_dir = entry / "test"
        gt_dir = entry / "ground_truth"
        for sub in sorted(entry.iterdir()):
            if sub.name not in ("train", "test", "ground_truth"):
                warnings.warn(f"skipping unknown entry {sub}", stacklevel=2)
        train_good = _sorted_images(train_dir) if train_dir.is_dir() else []
        test: dict[str, list[Path]] = {}
        ground_truth: dict[str, list[Path]] = {}
        if test_dir.is_dir():
            for defect_dir in sorted(d for d in test_dir.iterdir() if d.is_dir()):
                defect = defect_dir.name
                images = _sorted_images(defect_dir)
                test[defect] = images
                total += len(images)
                if defect == "good":
                    continue
                masks = []
                for img in images:
                    mask = gt_dir / defect / f"{img.stem}_mask{img.suffix}"
                    if not mask.is_file():
                        raise IngestionError(f"missing ground-truth mask {mask} for {img}")
                    masks.append(mask)
                ground_truth[defect] = masks
        categories[category] = CategoryIndex(train_good=train_good, test=test, ground_truth=ground_truth)
    return DatasetIndex(root=root, categories=categories, total_test_images=total)


def load_image(path: str | Path) -> np.ndarray:
    """Decode to 8-bit RGB; grayscale sources are channel-replicated."""
    with Image.open(path) as img:
        return np.asarray(img.convert("RGB"))


def load_mask(path: str | Path) -> np.ndarray:
    """Decode a ground-truth mask and binarize at > 0."""
    with Image.open(path) as img:
        return np.asarray(img.convert("L")) > 0


# ----- synthetic fixtures -------------------------------------------------------


@dataclass(frozen=True)
class DefectSpec:
    """Geometry and taxonomy labels for one synthetic defect kind."""

    name: str
    kind: str = "bright_square"  # bright_square | dark_square | stripes
    count: int = 4
    size: int = 16
    contrast: str = "high"
    defect_type: str = "structural_break"

    def __post_init__(self) -> None:
        if self.kind not in ("bright_square", "dark_square", "stripes"):
            raise ConfigurationError(f"unknown defect kind {self.kind!r}")
        if self.count < 0 or self.size < 1:
            raise ConfigurationError("defect count must be >= 0 and size >= 1")
        if self.contrast not in CONTRAST_LEVELS:
            raise ConfigurationError(f"contrast must be one of {CONTRAST_LEVELS}")
        if self.defect_type not in DEFECT_TYPES:
            raise ConfigurationError(f"defect_type must be one of {DEFECT_TYPES}")


@dataclass(frozen=True)
class FixtureSpec:
    categories: tuple[str, ...] = ("blocks", "panels")
    image_size: tuple[int, int] = (64, 64)
    train_good: int = 6
    test_good: int = 4
    defects: tuple[DefectSpec, ...] = (DefectSpec(name="bright_square"),)
    background: float = 0.45
    noise: float = 0.05
    speckles: int = 0  # isolated bright pixels added to every image, unmasked

    def __post_init__(self) -> None:
        if not self.categories:
            raise ConfigurationError("fixture needs at least one category")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ConfigurationError("fixture images must be at least 8x8")
        for defect in self.defects:
            if defect.kind.endswith("square") and defect.size > min(h, w) - 2:
                raise ConfigurationError(f"defect size {defect.size} too large for image {self.image_size}")


def _base_image(rng: np.random.Generator, spec: FixtureSpec) -> np.ndarray:
    h, w = spec.image_size
    img = spec.background + rng.uniform(-spec.noise, spec.noise, size=(h, w))
    for _ in range(spec.speckles):
        r = int(rng.integers(0, h))
        c = int(rng.integers(0, w))
        img[r, c] = 0.98
    return img


def _paint_defect(
    img: np.ndarray, rng: np.random.Generator, defect: DefectSpec
) -> np.ndarray:
    h, w = img.shape
    mask = np.zeros((h, w), dtype=bool)
    s = defect.size
    r0 = int(rng.integers(1, h - s))
    c0 = int(rng.integers(1, w - s))
    region = (slice(r0, r0 + s), slice(c0, c0 + s))
    if defect.kind == "bright_square":
        img[region] = 0.92 + rng.uniform(-0.03, 0.03, size=(s, s))
    elif defect.kind == "dark_square":
        img[region] = 0.04 + rng.uniform(0.0, 0.03, size=(s, s))
    else:  # stripes
        stripe = np.where(np.arange(s)[None, :] % 2 == 0, 0.9, 0.1)
        img[region] = stripe + rng.uniform(-0.02, 0.02, size=(s, s))
    mask[region] = True
    return mask


def _save_gray(path: Path, values: np.ndarray) -> None:
    data = np.clip(np.round(values * 255.0), 0, 255).astype(np.uint8)
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="L").save(path)


def _save_mask(path: Path, mask: np.ndarray) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(np.where(mask, 255, 0).astype(np.uint8), mode="L").save(path)


def make_fixture(root: str | Path, spec: FixtureSpec, seed: int = 0) -> Path:
    """Write a synthetic dataset tree; byte-identical for a fixed (spec, seed)."""
    root = Path(root)
    rng = np.random.default_rng(seed)
    taxonomy_rows = []
    for category in sorted(spec.categories):
        for i in range(spec.train_good):
            _save_gray(root / category / "train" / "good" / f"{i:03d}.png", _base_image(rng, spec))
        for i in range(spec.test_good):
            _save_gray(root / category / "test" / "good" / f"{i:03d}.png", _base_image(rng, spec))
        for defect in spec.defects:
            taxonomy_rows.append((category, defect.name, defect.contrast, defect.defect_type))
            for i in range(defect.count):
                img = _base_image(rng, spec)
                mask = _paint_defect(img, rng, defect)
                _save_gray(root / category / "test" / defect.name / f"{i:03d}.png", img)
                _save_mask(
                    root / category / "ground_truth" / defect.name / f"{i:03d}_mask.png", mask
                )
    save_taxonomy(root / "taxonomy.csv", DefectTaxonomy(dict(
        ((cat, name), (contrast, dtype)) for cat, name, contrast, dtype in taxonomy_rows
    )))
    return root


# ----- defect taxonomy ----------------------------------------------------------


@dataclass
class DefectTaxonomy:
    """Map (category, defect) -> (contrast level, defect-type category)."""

    entries: dict[tuple[str, str], tuple[str, str]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for key, (contrast, dtype) in self.entries.items():
            if contrast not in CONTRAST_LEVELS:
                raise IngestionError(f"taxonomy entry {key}: unknown contrast {contrast!r}")
            if dtype not in DEFECT_TYPES:
                raise IngestionError(f"taxonomy entry {key}: unknown defect type {dtype!r}")


def load_taxonomy(path: str | Path | None = None) -> DefectTaxonomy:
    """Read a taxonomy sidecar (CSV: category, defect, contrast, type).

    Without a path this loads the bundled reconstruction for MVTec AD, which
    is a best-effort mapping and meant to be overridden per deployment.
    """
    if path is None:
        text = resources.files("vlmad.data").joinpath("mvtec_taxonomy.csv").read_text()
    else:
        text = Path(path).read_text()
    entries: dict[tuple[str, str], tuple[str, str]] = {}
    reader = csv.reader(line for line in io.StringIO(text) if not line.startswith("#"))
    for row in reader:
        if not row or [cell.strip() for cell in row] == ["category", "defect", "contrast", "type"]:
            continue
        if len(row) != 4:
            raise IngestionError(f"taxonomy row must have 4 columns, got {row}")
        category, defect, contrast, dtype = (cell.strip() for cell in row)
        entries[(category, defect)] = (contrast, dtype)
    return DefectTaxonomy(entries)


def save_taxonomy(path: str | Path, taxonomy: DefectTaxonomy) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["category", "defect", "contrast", "type"])
    for (category, defect), (contrast, dtype) in sorted(taxonomy.entries.items()):
        writer.writerow([category, defect, contrast, dtype])
    path.write_text(buf.getvalue())


@dataclass
class BreakdownRow:
    group: str
    mean: float
    std: float
    count: int


@dataclass
class BreakdownTable:
    axis: str  # "contrast" or "type"
    rows: list[BreakdownRow]
    unmapped: list[tuple[str, str]]


def breakdown_by_taxonomy(
    per_defect_values: dict[tuple[str, str], float],
    taxonomy: DefectTaxonomy,
    axis: str = "contrast",
) -> BreakdownTable:
    """Group per-defect AUROC values by contrast level or defect type.

    Rows carry the group mean, population standard deviation and count;
    defects missing from the taxonomy are listed separately, never dropped.
    """
    if axis not in ("contrast", "type"):
        raise InputError(f"axis must be 'contrast' or 'type', got {axis!r}")
    index = 0 if axis == "contrast" else 1
    groups: dict[str, list[float]] = {}
    unmapped: list[tuple[str, str]] = []
    for key in sorted(per_defect_values):
        entry = taxonomy.entries.get(key)
        if entry is None:
            unmapped.append(key)
            continue
        groups.setdefault(entry[index], []).append(per_defect_values[key])
    order = CONTRAST_LEVELS if axis == "contrast" else DEFECT_TYPES
    rows = [
        BreakdownRow(
            group=name,
            mean=float(np.mean(groups[name])),
            std=float(np.std(groups[name])),
            count=len(groups[name]),
        )
        for name in order
        if name in groups
    ]
    return BreakdownTable(axis=axis, rows=rows, unmapped=unmapped)
