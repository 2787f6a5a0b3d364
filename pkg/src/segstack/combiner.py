"""Weighted fusion of per-model probability maps into final labels.

combine() forms per-class membership planes as the weighted sum of each
model's class plane; decide() takes the per-pixel argmax, breaking ties
toward the lowest class index. Membership values are intentionally left
unnormalized before the argmax.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from segstack.errors import DataError
from segstack.imagery import (
    PMAP_VERSION_MEMBERSHIP,
    LabelImage,
    ProbMapSet,
    write_planes,
)


@dataclass(frozen=True)
class ClassMembership:
    """Per-class fused membership planes, (M, H, W) float64."""

    planes: np.ndarray

    def __post_init__(self):
        planes = np.ascontiguousarray(self.planes, dtype=np.float64)
        if planes.ndim != 3:
            raise DataError(f"membership planes must be (M, H, W), got shape {planes.shape}")
        if not np.isfinite(planes).all():
            raise DataError("membership planes contain non-finite values")
        object.__setattr__(self, "planes", planes)

    @property
    def class_count(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


def combine(maps, weights) -> ClassMembership:
    """Membership m at pixel p = sum over models k of w[k, m] * P_k(m | p)."""
    weights = np.asarray(weights, dtype=np.float64)
    maps = list(maps)
    if not maps:
        raise DataError("combine needs at least one probability-map set")
    m = maps[0].class_count
    shape = maps[0].planes.shape
    for pm in maps:
        if pm.planes.shape != shape:
            raise DataError(f"probability maps disagree on shape: {pm.planes.shape} vs {shape}")
    if weights.shape != (len(maps), m):
        raise DataError(
            f"weight matrix must be K x M = {len(maps)} x {m}, got {weights.shape}"
        )
    stacked = np.stack([pm.planes for pm in maps]).astype(np.float64)  # (K, M, H, W)
    fused = np.einsum("km,kmhw->mhw", weights, stacked)
    return ClassMembership(fused)


def decide(cm: ClassMembership) -> LabelImage:
    """Per-pixel argmax over classes; ties go to the lowest class index."""
    return LabelImage(np.argmax(cm.planes, axis=0).astype(np.uint8))


def membership_to_prob_map(cm: ClassMembership) -> ProbMapSet:
    """Renormalize memberships into a valid probability-map set for reporting.

    Negative values (possible under unconstrained weights) are clipped;
    pixels whose memberships sum to zero fall back to a uniform
    distribution.
    """
    clipped = np.maximum(cm.planes, 0.0)
    sums = clipped.sum(axis=0, keepdims=True)
    m = cm.class_count
    normalized = np.where(sums > 0.0, clipped / np.where(sums > 0.0, sums, 1.0), 1.0 / m)
    return ProbMapSet(normalized.astype(np.float32))


def write_membership_dump(cm: ClassMembership, path) -> None:
    """Persist memberships in the map file format, header version 2.

    Values are divided by the image-wide maximum (when positive) and
    clipped to [0, 1] so the payload stays in the format's value range.
    """
    peak = float(cm.planes.max(initial=0.0))
    scaled = cm.planes / peak if peak > 0.0 else cm.planes
    scaled = np.clip(scaled, 0.0, 1.0).astype(np.float32)
    write_planes(scaled, path, version=PMAP_VERSION_MEMBERSHIP)
