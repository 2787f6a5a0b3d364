"""Synthetic segmentation datasets: random shapes over textured backgrounds.

Each image places one or two random ellipses or convex polygons per
foreground class on a noisy background; class regions get distinct (but
noisy) intensity bands so the reference learners have signal to work
with. Masks are exact renders of the same geometry. Generation is
deterministic per seed, and geometry is resampled (with a derived seed)
until every class holds at least MIN_CLASS_FRACTION of the dataset's
pixels.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np
from PIL import Image

from segstack.errors import ConfigError

MIN_CLASS_FRACTION = 0.05
_MAX_ATTEMPTS = 25


def _smooth_noise(rng, height, width, cell=8, amplitude=1.0):
    """Low-frequency noise via bilinear upsampling of a coarse grid."""
    gh = height // cell + 2
    gw = width // cell + 2
    coarse = rng.random((gh, gw))
    ys = np.linspace(0.0, gh - 1.001, height)
    xs = np.linspace(0.0, gw - 1.001, width)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]
    top = coarse[y0][:, x0] * (1 - fx) + coarse[y0][:, x0 + 1] * fx
    bottom = coarse[y0 + 1][:, x0] * (1 - fx) + coarse[y0 + 1][:, x0 + 1] * fx
    return amplitude * (top * (1 - fy) + bottom * fy)


def _ellipse_region(rng, height, width):
    cy = rng.uniform(0.25, 0.75) * height
    cx = rng.uniform(0.25, 0.75) * width
    ry = rng.uniform(0.12, 0.24) * height
    rx = rng.uniform(0.12, 0.24) * width
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:height, 0:width]
    dy = yy - cy
    dx = xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _polygon_region(rng, height, width):
    cy = rng.uniform(0.3, 0.7) * height
    cx = rng.uniform(0.3, 0.7) * width
    radius = rng.uniform(0.15, 0.28) * min(height, width)
    sides = int(rng.integers(3, 8))
    angles = np.sort(rng.uniform(0.0, 2.0 * np.pi, sides))
    verts_y = cy + radius * np.sin(angles)
    verts_x = cx + radius * np.cos(angles)
    yy, xx = np.mgrid[0:height, 0:width]
    inside = np.ones((height, width), dtype=bool)
    for i in range(sides):
        ax, ay = verts_x[i], verts_y[i]
        bx, by = verts_x[(i + 1) % sides], verts_y[(i + 1) % sides]
        cross = (bx - ax) * (yy - ay) - (by - ay) * (xx - ax)
        inside &= cross >= 0.0
    return inside


def _render_image(rng, height, width, class_count):
    base = 0.12 + _smooth_noise(rng, height, width, cell=8, amplitude=0.12)
    base += rng.normal(0.0, 0.03, (height, width))
    mask = np.zeros((height, width), dtype=np.uint8)
    for c in range(1, class_count):
        level = 0.35 + 0.55 * (c - 1) / max(class_count - 2, 1) if class_count > 2 else 0.7
        for _ in range(int(rng.integers(1, 3))):
            if rng.random() < 0.5:
                region = _ellipse_region(rng, height, width)
            else:
                region = _polygon_region(rng, height, width)
            mask[region] = c
            jitter = rng.normal(0.0, 0.03, (height, width))
            base = np.where(region, level + rng.uniform(-0.05, 0.05) + jitter, base)
    return np.clip(base, 0.0, 1.0), mask


def _render_all(seed, attempt, image_count, height, width, class_count):
    seeds = np.random.SeedSequence([seed, attempt]).spawn(image_count)
    images, masks = [], []
    for child in seeds:
        rng = np.random.default_rng(child)
        img, mask = _render_image(rng, height, width, class_count)
        images.append(img)
        masks.append(mask)
    return images, masks


def generate_dataset(out_dir, image_count: int, width: int, height: int,
                     class_count: int, seed: int) -> dict:
    """Write `images/` and `masks/` PNG pairs; returns class-frequency stats."""
    if image_count < 1:
        raise ConfigError(f"image count must be >= 1, got {image_count}")
    if class_count < 2:
        raise ConfigError(f"class count must be >= 2, got {class_count}")
    if class_count * MIN_CLASS_FRACTION > 1.0:
        raise ConfigError(f"{class_count} classes cannot each hold {MIN_CLASS_FRACTION:.0%} of pixels")

    for attempt in range(_MAX_ATTEMPTS):
        images, masks = _render_all(seed, attempt, image_count, height, width, class_count)
        counts = np.zeros(class_count, dtype=np.int64)
        for mask in masks:
            counts += np.bincount(mask.reshape(-1), minlength=class_count)
        fractions = counts / counts.sum()
        if fractions.min() >= MIN_CLASS_FRACTION:
            break
    else:
        raise ConfigError(
            f"could not reach {MIN_CLASS_FRACTION:.0%} pixels per class"
            f" in {_MAX_ATTEMPTS} attempts (got {fractions.round(3).tolist()})"
        )

    out_dir = Path(out_dir)
    (out_dir / "images").mkdir(parents=True, exist_ok=True)
    (out_dir / "masks").mkdir(parents=True, exist_ok=True)
    digits = max(3, len(str(image_count - 1)))
    for i, (img, mask) in enumerate(zip(images, masks)):
        stem = f"img_{i:0{digits}d}"
        pixels = np.clip(np.round(img * 255.0), 0, 255).astype(np.uint8)
        Image.fromarray(pixels, mode="L").save(out_dir / "images" / f"{stem}.png")
        Image.fromarray(mask, mode="L").save(out_dir / "masks" / f"{stem}.png")
    return {
        "image_count": image_count,
        "width": width,
        "height": height,
        "class_count": class_count,
        "seed": seed,
        "class_fractions": fractions.tolist(),
    }
