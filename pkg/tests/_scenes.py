"""Tiny labeled scenes for tests: colored shapes whose class is recoverable
from color alone, striped shapes whose class is recoverable from orientation
only, plus smooth blob images standing in for reflections."""

import numpy as np

from semrr.datagen import SourceImage


def class_palette(class_count: int) -> np.ndarray:
    # fixed, well-separated colors; index = class id
    rng = np.random.default_rng(7)
    return (0.1 + 0.8 * rng.random((class_count, 3))).astype(np.float32)


def make_scene(rng, size=64, class_count=5, shapes=3, ignore_fraction=0.0):
    """A flat background (class 0) with colored rectangles and disks."""
    palette = class_palette(class_count)
    label = np.zeros((size, size), dtype=np.uint8)
    image = np.empty((size, size, 3), dtype=np.float32)
    image[:] = palette[0]
    yy, xx = np.mgrid[0:size, 0:size]
    for _ in range(shapes):
        k = int(rng.integers(1, class_count))
        cy, cx = rng.integers(size // 8, size - size // 8, size=2)
        extent = int(rng.integers(size // 8, size // 3))
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < extent) & (np.abs(xx - cx) < extent)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < extent**2
        shade = 0.85 + 0.3 * rng.random()
        image[mask] = np.clip(palette[k] * shade, 0.0, 1.0)
        label[mask] = k
    image = np.clip(image + rng.normal(0.0, 0.01, image.shape), 0.0, 1.0).astype(np.float32)
    if ignore_fraction > 0.0:
        drop = rng.random(label.shape) < ignore_fraction
        label[drop] = 255
    return image, label


def make_reflection(rng, size=64, blobs=3):
    """Smooth gaussian bumps; bright but structureless, like glass glare."""
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    field = np.zeros((size, size), dtype=np.float64)
    for _ in range(blobs):
        cy, cx = rng.uniform(0, size, size=2)
        width = rng.uniform(size / 8, size / 3)
        field += rng.uniform(0.4, 1.0) * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    field /= max(field.max(), 1e-6)
    channels = [field * rng.uniform(0.5, 0.9) for _ in range(3)]
    return np.clip(np.stack(channels, axis=-1), 0.0, 1.0).astype(np.float32)


def make_striped_scene(rng, size=64, class_count=5, shapes=3, period=6.0):
    """Shapes on a flat gray base where class = stripe orientation, not color.

    All classes share the same luminance statistics, so the label carries
    information that local shading does not: to repaint a corrupted region
    correctly one has to know which way its stripes run.
    """
    angles = np.pi * np.arange(class_count) / class_count  # class k -> angle
    label = np.zeros((size, size), dtype=np.uint8)
    image = np.full((size, size, 3), 0.45, dtype=np.float32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float32)
    for _ in range(shapes):
        k = int(rng.integers(1, class_count))
        cy, cx = rng.integers(size // 8, size - size // 8, size=2)
        extent = int(rng.integers(size // 6, size // 3))
        if rng.random() < 0.5:
            mask = (np.abs(yy - cy) < extent) & (np.abs(xx - cx) < extent)
        else:
            mask = (yy - cy) ** 2 + (xx - cx) ** 2 < extent**2
        theta = angles[k]
        phase = (xx * np.cos(theta) + yy * np.sin(theta)) * (2.0 * np.pi / period)
        stripes = 0.45 + 0.28 * np.sin(phase + rng.uniform(0.0, 2.0 * np.pi))
        image[mask] = stripes[mask, None]
        label[mask] = k
    image = np.clip(image + rng.normal(0.0, 0.01, image.shape), 0.0, 1.0).astype(np.float32)
    return image, label


def make_sources(n_backgrounds=4, n_reflections=3, size=64, class_count=5, seed=0):
    rng = np.random.default_rng(seed)
    backgrounds = []
    for i in range(n_backgrounds):
        image, label = make_scene(rng, size=size, class_count=class_count)
        backgrounds.append(SourceImage(source_id=f"bg{i:02d}", image=image, label=label))
    reflections = [
        SourceImage(source_id=f"rf{i:02d}", image=make_reflection(rng, size=size))
        for i in range(n_reflections)
    ]
    return backgrounds, reflections


def make_striped_sources(n_backgrounds=4, n_reflections=3, size=64, class_count=5, seed=0):
    rng = np.random.default_rng(seed)
    backgrounds = []
    for i in range(n_backgrounds):
        image, label = make_striped_scene(rng, size=size, class_count=class_count)
        backgrounds.append(SourceImage(source_id=f"bg{i:02d}", image=image, label=label))
    reflections = [
        SourceImage(source_id=f"rf{i:02d}", image=make_reflection(rng, size=size))
        for i in range(n_reflections)
    ]
    return backgrounds, reflections
