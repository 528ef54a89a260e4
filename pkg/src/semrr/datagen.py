"""Synthetic quadruple construction by linear alpha blending.

A synthetic record pairs a labeled background crop with an unlabeled
reflection crop and mixes them as I = (1 - alpha) * B + alpha * R. Real data
with only (I, B) available gets its reflection layer recovered as
R = clamp(I - B). Record generation is deterministic per (seed, index) so
serial and parallel synthesis produce identical manifests.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .data import (
    DatasetManifest,
    ManifestRecord,
    Quadruple,
    as_image,
    as_semantic_map,
    save_image,
    save_semantic_map,
    validate_quadruple,
)

DEFAULT_CROP = 256


@dataclass
class BlendSpec:
    """Knobs for one blend: coefficient, crop side length, and crop seed."""

    alpha: float
    crop_size: int = DEFAULT_CROP
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {self.alpha}")
        if self.crop_size < 1:
            raise ValueError(f"crop_size must be >= 1, got {self.crop_size}")


@dataclass
class SourceImage:
    """A source image with an optional label map, keyed by a stable id."""

    source_id: str
    image: np.ndarray
    label: np.ndarray | None = None


@dataclass
class AlphaSampler:
    """Distribution spec for blend coefficients.

    kind 'fixed' always yields ``value``; 'uniform' draws from [low, high].
    Parseable from strings like ``fixed:0.3`` or ``uniform:0.1:0.9``.
    """

    kind: str = "uniform"
    value: float = 0.5
    low: float = 0.1
    high: float = 0.9

    def __post_init__(self):
        if self.kind not in ("fixed", "uniform"):
            raise ValueError(f"unknown alpha sampler kind {self.kind!r}")
        for a in (self.value, self.low, self.high):
            if not 0.0 <= a <= 1.0:
                raise ValueError(f"alpha bounds must be in [0, 1], got {a}")
        if self.low > self.high:
            raise ValueError("low > high in alpha sampler")

    def sample(self, rng: np.random.Generator) -> float:
        if self.kind == "fixed":
            return float(self.value)
        return float(rng.uniform(self.low, self.high))

    @classmethod
    def parse(cls, spec: str) -> "AlphaSampler":
        parts = spec.split(":")
        if parts[0] == "fixed" and len(parts) == 2:
            return cls(kind="fixed", value=float(parts[1]))
        if parts[0] == "uniform" and len(parts) == 3:
            return cls(kind="uniform", low=float(parts[1]), high=float(parts[2]))
        raise ValueError(f"cannot parse alpha spec {spec!r} (want fixed:A or uniform:LO:HI)")


def parse_alpha_list(spec: str) -> list[float]:
    """Parse ``sweep:start:stop:step`` into an inclusive alpha grid."""
    parts = spec.split(":")
    if parts[0] != "sweep" or len(parts) != 4:
        raise ValueError(f"cannot parse sweep spec {spec!r} (want sweep:START:STOP:STEP)")
    start, stop, step = (float(p) for p in parts[1:])
    if step <= 0:
        raise ValueError("sweep step must be positive")
    n = int(np.floor((stop - start) / step + 0.5)) + 1
    alphas = [round(start + i * step, 10) for i in range(n)]
    if any(a < 0.0 or a > 1.0 for a in alphas):
        raise ValueError(f"sweep alphas leave [0, 1]: {alphas}")
    return alphas


# ---------------------------------------------------------------------------
# elementary operations
# ---------------------------------------------------------------------------

def blend(background: np.ndarray, reflection: np.ndarray, alpha: float) -> np.ndarray:
    """Mix two layers: I = (1 - alpha) * B + alpha * R, clamped to [0, 1]."""
    if background.shape != reflection.shape:
        raise ValueError(f"dimension mismatch: {background.shape} vs {reflection.shape}")
    if not 0.0 <= alpha <= 1.0:
        raise ValueError(f"alpha must be in [0, 1], got {alpha}")
    mixed = (1.0 - alpha) * background + alpha * reflection
    return np.clip(mixed, 0.0, 1.0).astype(np.float32)


def derive_reflection(mixed: np.ndarray, background: np.ndarray) -> np.ndarray:
    """Recover the reflection layer R = clamp(I - B, 0, 1)."""
    if mixed.shape != background.shape:
        raise ValueError(f"dimension mismatch: {mixed.shape} vs {background.shape}")
    return np.clip(mixed - background, 0.0, 1.0).astype(np.float32)


def random_crop(
    image: np.ndarray,
    label: np.ndarray | None,
    size: int,
    seed,
) -> tuple[np.ndarray, np.ndarray | None]:
    """Crop a size x size window at an offset uniform over valid positions.

    The label (if given) is cropped with the same offset. ``seed`` may be an
    int or a sequence of ints; the offset is a pure function of it.
    """
    h, w = image.shape[:2]
    if h < size or w < size:
        raise ValueError(f"image {h}x{w} smaller than crop size {size}")
    rng = np.random.default_rng(seed)
    top = int(rng.integers(0, h - size + 1))
    left = int(rng.integers(0, w - size + 1))
    img = image[top : top + size, left : left + size].copy()
    if label is None:
        return img, None
    if label.shape[:2] != (h, w):
        raise ValueError(f"label shape {label.shape} does not match image {image.shape}")
    return img, label[top : top + size, left : left + size].copy()


# ---------------------------------------------------------------------------
# dataset synthesis
# ---------------------------------------------------------------------------

def _record_rng(seed: int, index: int) -> np.random.Generator:
    # each record draws from its own stream so generation order is irrelevant
    return np.random.default_rng([seed, index])


def _check_sources(backgrounds: Sequence[SourceImage], reflections: Sequence[SourceImage]):
    if not backgrounds:
        raise ValueError("backgrounds list is empty")
    if not reflections:
        raise ValueError("reflections list is empty")
    for src in backgrounds:
        if src.label is None:
            raise ValueError(f"background {src.source_id!r} has no semantic label")


def _make_pair_crops(
    backgrounds: Sequence[SourceImage],
    reflections: Sequence[SourceImage],
    crop_size: int,
    rng: np.random.Generator,
) -> tuple[SourceImage, SourceImage, np.ndarray, np.ndarray, np.ndarray]:
    bg = backgrounds[int(rng.integers(0, len(backgrounds)))]
    rf = reflections[int(rng.integers(0, len(reflections)))]
    b_img = as_image(bg.image)
    b_lab = as_semantic_map(bg.label)
    r_img = as_image(rf.image)
    b_crop, s_crop = random_crop(b_img, b_lab, crop_size, rng.integers(0, 2**32))
    r_crop, _ = random_crop(r_img, None, crop_size, rng.integers(0, 2**32))
    return bg, rf, b_crop, s_crop, r_crop


def _write_quadruple(out_dir: Path, q: Quadruple) -> dict[str, str]:
    paths = {
        "mixed": f"images/{q.record_id}_i.png",
        "background": f"images/{q.record_id}_b.png",
        "reflection": f"images/{q.record_id}_r.png",
        "semantic": f"labels/{q.record_id}_s.png",
    }
    save_image(out_dir / paths["mixed"], q.mixed)
    save_image(out_dir / paths["background"], q.background)
    save_image(out_dir / paths["reflection"], q.reflection)
    save_semantic_map(out_dir / paths["semantic"], q.semantic)
    return paths


def synthesize_dataset(
    backgrounds: Sequence[SourceImage],
    reflections: Sequence[SourceImage],
    count: int,
    alpha_sampler: AlphaSampler,
    seed: int,
    out_dir,
    crop_size: int = DEFAULT_CROP,
) -> DatasetManifest:
    """Generate ``count`` synthetic quadruples and write them under out_dir.

    Every record stores its alpha and source ids; each is checked against the
    quadruple invariants before being admitted to the manifest.
    """
    _check_sources(backgrounds, reflections)
    if count < 1:
        raise ValueError(f"count must be >= 1, got {count}")
    out_dir = Path(out_dir)
    records = []
    for index in range(count):
        rng = _record_rng(seed, index)
        bg, rf, b_crop, s_crop, r_crop = _make_pair_crops(backgrounds, reflections, crop_size, rng)
        alpha = alpha_sampler.sample(rng)
        q = Quadruple(
            mixed=blend(b_crop, r_crop, alpha),
            background=b_crop,
            reflection=r_crop,
            semantic=s_crop,
            alpha=alpha,
            source="syn",
            record_id=f"syn{index:05d}",
        )
        issues = validate_quadruple(q)
        if issues:
            raise ValueError(f"record {q.record_id} failed validation: {issues}")
        paths = _write_quadruple(out_dir, q)
        records.append(
            ManifestRecord(
                record_id=q.record_id,
                source="syn",
                alpha=alpha,
                background_id=bg.source_id,
                reflection_id=rf.source_id,
                pair_id=f"p{index:05d}",
                **paths,
            )
        )
    manifest = DatasetManifest(records=records, seed=seed)
    manifest.save(out_dir)
    return manifest


def alpha_sweep(
    backgrounds: Sequence[SourceImage],
    reflections: Sequence[SourceImage],
    pairs: int,
    alphas: Sequence[float],
    seed: int,
    out_dir,
    crop_size: int = DEFAULT_CROP,
) -> DatasetManifest:
    """Blend each of ``pairs`` (B, R) crop pairings at every alpha in the grid.

    Records that share a pair id reuse the same background, reflection and
    label crop, so per-alpha metric differences isolate the blend coefficient.
    Manifest size = pairs * len(alphas).
    """
    _check_sources(backgrounds, reflections)
    if pairs < 1:
        raise ValueError(f"pairs must be >= 1, got {pairs}")
    if not alphas:
        raise ValueError("alphas list is empty")
    for a in alphas:
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must be in [0, 1], got {a}")
    out_dir = Path(out_dir)
    records = []
    for index in range(pairs):
        rng = _record_rng(seed, index)
        bg, rf, b_crop, s_crop, r_crop = _make_pair_crops(backgrounds, reflections, crop_size, rng)
        pair_id = f"p{index:05d}"
        # layers are shared by every alpha of the pair; write them once
        shared = {
            "background": f"images/{pair_id}_b.png",
            "reflection": f"images/{pair_id}_r.png",
            "semantic": f"labels/{pair_id}_s.png",
        }
        save_image(out_dir / shared["background"], b_crop)
        save_image(out_dir / shared["reflection"], r_crop)
        save_semantic_map(out_dir / shared["semantic"], s_crop)
        for alpha in alphas:
            alpha = float(alpha)
            record_id = f"{pair_id}_a{int(round(alpha * 1000)):04d}"
            q = Quadruple(
                mixed=blend(b_crop, r_crop, alpha),
                background=b_crop,
                reflection=r_crop,
                semantic=s_crop,
                alpha=alpha,
                source="syn",
                record_id=record_id,
            )
            issues = validate_quadruple(q)
            if issues:
                raise ValueError(f"record {record_id} failed validation: {issues}")
            mixed_path = f"images/{record_id}_i.png"
            save_image(out_dir / mixed_path, q.mixed)
            records.append(
                ManifestRecord(
                    record_id=record_id,
                    mixed=mixed_path,
                    source="syn",
                    alpha=alpha,
                    background_id=bg.source_id,
                    reflection_id=rf.source_id,
                    pair_id=pair_id,
                    **shared,
                )
            )
    manifest = DatasetManifest(records=records, seed=seed)
    manifest.save(out_dir)
    return manifest
