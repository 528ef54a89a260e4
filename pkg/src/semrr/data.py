"""Domain types, image/label I/O and dataset manifests.

Images live on disk as lossless 8-bit RGB rasters and in memory as float32
H x W x 3 arrays scaled to [0, 1]. Semantic maps are single-channel 8-bit
rasters whose values are class indices in {0..20} plus the ignore index 255.
A dataset is a JSON manifest listing quadruple records (mixed / background /
reflection / semantic) by relative path together with their blend metadata.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field, asdict
from pathlib import Path

import numpy as np
from PIL import Image, UnidentifiedImageError

CLASS_COUNT = 21
IGNORE_INDEX = 255
#: max per-pixel |I - ((1-alpha)B + alpha R)| for quadruples stored as 8-bit files
BLEND_TOLERANCE = 1.0 / 255.0
MANIFEST_SCHEMA_VERSION = 1
MANIFEST_FILENAME = "manifest.json"

SOURCE_TAGS = ("real", "ben", "syn")


class DataError(Exception):
    """Base class for dataset and file-format errors."""


class ImageFormatError(DataError):
    """File exists but is not a decodable 3-channel 8-bit raster."""


class LabelValueError(DataError):
    """Semantic map contains a value outside {0..class_count-1, ignore}."""


class ManifestError(DataError):
    """Manifest file is malformed or references bad records."""


# ---------------------------------------------------------------------------
# image / label arrays
# ---------------------------------------------------------------------------

def as_image(array) -> np.ndarray:
    """Coerce an array to a valid float32 image tensor (clamped to [0, 1])."""
    img = np.asarray(array, dtype=np.float32)
    if img.ndim != 3 or img.shape[2] != 3:
        raise ImageFormatError(f"expected H x W x 3 array, got shape {img.shape}")
    if img.shape[0] < 1 or img.shape[1] < 1:
        raise ImageFormatError(f"degenerate image shape {img.shape}")
    if not np.all(np.isfinite(img)):
        raise ImageFormatError("image contains non-finite values")
    return np.clip(img, 0.0, 1.0)


def as_semantic_map(array, class_count: int = CLASS_COUNT) -> np.ndarray:
    """Coerce an array to a valid uint8 semantic map, rejecting bad labels."""
    labels = np.asarray(array)
    if labels.ndim != 2:
        raise LabelValueError(f"expected H x W label array, got shape {labels.shape}")
    if not np.issubdtype(labels.dtype, np.integer):
        raise LabelValueError(f"labels must be integers, got dtype {labels.dtype}")
    work = labels.astype(np.int64)
    bad = ((work < 0) | (work >= class_count)) & (work != IGNORE_INDEX)
    if bad.any():
        pos = np.argwhere(bad)[0]
        raise LabelValueError(
            f"invalid class index {int(work[pos[0], pos[1]])} at "
            f"(row={int(pos[0])}, col={int(pos[1])})"
        )
    return work.astype(np.uint8)


def load_image(path) -> np.ndarray:
    """Load an 8-bit RGB raster as a float32 array in [0, 1]."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"image file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode != "RGB":
                # palette/gray files are not silently promoted; reflection and
                # background sources must really be 3-channel
                if im.mode in ("L", "P", "I", "F", "1"):
                    raise ImageFormatError(f"{path}: expected 3-channel image, got mode {im.mode}")
                im = im.convert("RGB")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: cannot decode image file") from exc
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise ImageFormatError(f"{path}: expected 3 channels, got shape {arr.shape}")
    return arr.astype(np.float32) / 255.0


def save_image(path, image) -> None:
    """Write a [0, 1] float image as an 8-bit RGB PNG (round-to-nearest)."""
    img = as_image(image)
    data = np.round(img * 255.0).astype(np.uint8)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


def load_semantic_map(path, class_count: int = CLASS_COUNT) -> np.ndarray:
    """Load a single-channel indexed raster as a uint8 label map."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"label file not found: {path}")
    try:
        with Image.open(path) as im:
            if im.mode not in ("L", "P"):
                raise ImageFormatError(f"{path}: expected single-channel label file, got mode {im.mode}")
            arr = np.asarray(im, dtype=np.uint8)
    except UnidentifiedImageError as exc:
        raise ImageFormatError(f"{path}: cannot decode label file") from exc
    try:
        return as_semantic_map(arr, class_count=class_count)
    except LabelValueError as exc:
        raise LabelValueError(f"{path}: {exc}") from exc


def save_semantic_map(path, labels) -> None:
    """Write a label map as a single-channel 8-bit PNG."""
    arr = as_semantic_map(labels)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(arr, mode="L").save(path, format="PNG")


# ---------------------------------------------------------------------------
# quadruples
# ---------------------------------------------------------------------------

@dataclass
class Quadruple:
    """One training record: mixed image I, background B, reflection R, labels S_B.

    ``alpha`` is the blend coefficient for synthetic records and None for real
    data. ``source`` tags the originating dataset (real / ben / syn).
    """

    mixed: np.ndarray
    background: np.ndarray
    reflection: np.ndarray
    semantic: np.ndarray
    alpha: float | None = None
    source: str = "syn"
    record_id: str = ""


def validate_quadruple(q: Quadruple, tolerance: float = BLEND_TOLERANCE) -> list[str]:
    """Return a report of violated quadruple invariants (empty iff valid)."""
    report: list[str] = []
    arrays = {"mixed": q.mixed, "background": q.background, "reflection": q.reflection}
    for name, arr in arrays.items():
        if arr.ndim != 3 or arr.shape[2] != 3:
            report.append(f"{name}: not an H x W x 3 array (shape {arr.shape})")
        elif not np.all(np.isfinite(arr)):
            report.append(f"{name}: non-finite values")
        elif arr.min() < 0.0 or arr.max() > 1.0:
            report.append(f"{name}: values outside [0, 1]")
    if q.semantic.ndim != 2:
        report.append(f"semantic: not an H x W array (shape {q.semantic.shape})")
    shapes = {name: arr.shape[:2] for name, arr in arrays.items() if arr.ndim == 3}
    if q.semantic.ndim == 2:
        shapes["semantic"] = q.semantic.shape
    if len(set(shapes.values())) > 1:
        report.append("dimension mismatch: " + ", ".join(f"{k}={v}" for k, v in sorted(shapes.items())))
    if q.semantic.ndim == 2:
        bad = (q.semantic >= CLASS_COUNT) & (q.semantic != IGNORE_INDEX)
        if bad.any():
            report.append(f"semantic: {int(bad.sum())} pixel(s) with invalid class index")
    if q.source not in SOURCE_TAGS:
        report.append(f"source: unknown tag {q.source!r}")
    if q.alpha is not None and not (0.0 <= q.alpha <= 1.0):
        report.append(f"alpha: {q.alpha} outside [0, 1]")
    # synthetic records must be consistent with the recorded blend coefficient
    if (
        q.alpha is not None
        and not report
    ):
        expected = (1.0 - q.alpha) * q.background + q.alpha * q.reflection
        residual = float(np.max(np.abs(q.mixed.astype(np.float64) - expected.astype(np.float64))))
        if residual > tolerance + 1e-9:
            report.append(f"blend residual exceeds tolerance: {residual:.6f} > {tolerance:.6f}")
    return report


# ---------------------------------------------------------------------------
# manifests
# ---------------------------------------------------------------------------

@dataclass
class ManifestRecord:
    """File references plus metadata for one quadruple."""

    record_id: str
    mixed: str
    background: str
    reflection: str
    semantic: str
    source: str = "syn"
    alpha: float | None = None
    split: str | None = None
    background_id: str | None = None
    reflection_id: str | None = None
    pair_id: str | None = None


@dataclass
class DatasetManifest:
    """An ordered list of quadruple records with their train/val assignment."""

    records: list[ManifestRecord] = field(default_factory=list)
    seed: int = 0
    class_count: int = CLASS_COUNT
    schema_version: int = MANIFEST_SCHEMA_VERSION
    #: directory that record paths are relative to; set on load/save
    root: Path | None = None

    def __len__(self) -> int:
        return len(self.records)

    def split_records(self, split: str) -> list[ManifestRecord]:
        if split not in ("train", "val"):
            raise ValueError(f"unknown split {split!r}")
        return [r for r in self.records if r.split == split]

    def save(self, path) -> Path:
        """Serialize to JSON. Output is byte-stable for identical content."""
        path = Path(path)
        if path.is_dir() or path.suffix == "":
            path.mkdir(parents=True, exist_ok=True)
            path = path / MANIFEST_FILENAME
        doc = {
            "schema_version": self.schema_version,
            "seed": self.seed,
            "class_count": self.class_count,
            "records": [asdict(r) for r in self.records],
        }
        path.parent.mkdir(parents=True, exist_ok=True)
        path.write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")
        self.root = path.parent
        return path

    @classmethod
    def load(cls, path) -> "DatasetManifest":
        path = Path(path)
        if path.is_dir():
            path = path / MANIFEST_FILENAME
        if not path.exists():
            raise FileNotFoundError(f"manifest not found: {path}")
        try:
            doc = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ManifestError(f"{path}: invalid JSON ({exc})") from exc
        if not isinstance(doc, dict) or "records" not in doc:
            raise ManifestError(f"{path}: missing records array")
        version = doc.get("schema_version")
        if version != MANIFEST_SCHEMA_VERSION:
            raise ManifestError(f"{path}: unsupported schema version {version}")
        known = {f.name for f in ManifestRecord.__dataclass_fields__.values()}  # type: ignore[attr-defined]
        records = []
        for i, rec in enumerate(doc["records"]):
            extra = set(rec) - known
            if extra:
                raise ManifestError(f"{path}: record {i} has unknown keys {sorted(extra)}")
            try:
                records.append(ManifestRecord(**rec))
            except TypeError as exc:
                raise ManifestError(f"{path}: record {i} is incomplete ({exc})") from exc
        return cls(
            records=records,
            seed=int(doc.get("seed", 0)),
            class_count=int(doc.get("class_count", CLASS_COUNT)),
            schema_version=version,
            root=path.parent,
        )

    def resolve(self, relpath: str) -> Path:
        if self.root is None:
            raise ManifestError("manifest has no root directory; save or load it first")
        return Path(self.root) / relpath

    def load_quadruple(self, record: ManifestRecord) -> Quadruple:
        return Quadruple(
            mixed=load_image(self.resolve(record.mixed)),
            background=load_image(self.resolve(record.background)),
            reflection=load_image(self.resolve(record.reflection)),
            semantic=load_semantic_map(self.resolve(record.semantic), self.class_count),
            alpha=record.alpha,
            source=record.source,
            record_id=record.record_id,
        )

    def verify(self) -> list[str]:
        """Check that every referenced file exists and decodes; return problems."""
        problems = []
        for rec in self.records:
            try:
                q = self.load_quadruple(rec)
            except (DataError, FileNotFoundError) as exc:
                problems.append(f"{rec.record_id}: {exc}")
                continue
            for issue in validate_quadruple(q):
                problems.append(f"{rec.record_id}: {issue}")
        return problems


def split_dataset(manifest: DatasetManifest, train_fraction: float, seed: int) -> DatasetManifest:
    """Assign a disjoint train/val split covering all records.

    |train| = round(train_fraction * N) (half away from zero); the permutation
    is a pure function of the seed.
    """
    if not manifest.records:
        raise ManifestError("cannot split an empty manifest")
    if not 0.0 < train_fraction < 1.0:
        raise ValueError(f"train_fraction must be in (0, 1), got {train_fraction}")
    n = len(manifest.records)
    n_train = int(np.floor(train_fraction * n + 0.5))
    order = np.random.default_rng(seed).permutation(n)
    train_ids = set(order[:n_train].tolist())
    records = []
    for i, rec in enumerate(manifest.records):
        records.append(
            ManifestRecord(**{**asdict(rec), "split": "train" if i in train_ids else "val"})
        )
    return DatasetManifest(
        records=records,
        seed=seed,
        class_count=manifest.class_count,
        schema_version=manifest.schema_version,
        root=manifest.root,
    )
