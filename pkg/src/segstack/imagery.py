"""Core raster data model: channel images, label masks, probability maps, datasets.

Storage is channel-planar row-major: a ChannelImage is a (C, H, W) float32
array, a ProbMapSet holds (M, H, W) per-class probability planes, a
LabelImage is an (H, W) uint8 class-index mask. All types freeze their
arrays after construction and are safe to share across workers.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from segstack.errors import (
    BadMagicError,
    DataError,
    DimensionOverflowError,
    MapValidationError,
    ProbMapFormatError,
    TruncatedPayloadError,
)

PMAP_MAGIC = b"PMAP"
PMAP_VERSION_NORMALIZED = 1
PMAP_VERSION_MEMBERSHIP = 2

PROB_SUM_TOL = 1e-6

_PMAP_HEADER = struct.Struct("<4sIIII")  # magic, version, width, height, class count
_MAX_PAYLOAD_BYTES = 1 << 31
_U32_MAX = 0xFFFFFFFF


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr.flags.writeable = False
    return arr


@dataclass(frozen=True)
class LabelImage:
    """Per-pixel class-index mask, (H, W) uint8."""

    labels: np.ndarray

    def __post_init__(self):
        labels = np.ascontiguousarray(self.labels, dtype=np.uint8)
        if labels.ndim != 2:
            raise DataError(f"label mask must be 2-D, got shape {labels.shape}")
        object.__setattr__(self, "labels", _freeze(labels))

    @property
    def height(self) -> int:
        return self.labels.shape[0]

    @property
    def width(self) -> int:
        return self.labels.shape[1]


@dataclass(frozen=True)
class ChannelImage:
    """Multi-channel raster, (C, H, W) float32 with values in [0, 1].

    `stem` carries the source file name (without extension) when the image
    was loaded from disk; file-backed learners key their lookups by it.
    The constructor takes ownership of the given array.
    """

    data: np.ndarray
    stem: str | None = None

    def __post_init__(self):
        data = np.ascontiguousarray(self.data, dtype=np.float32)
        if data.ndim != 3:
            raise DataError(f"channel image must be (C, H, W), got shape {data.shape}")
        if not np.isfinite(data).all():
            raise DataError("channel image contains non-finite values")
        if data.size and (data.min() < 0.0 or data.max() > 1.0):
            raise DataError("channel image values must lie in [0, 1]")
        object.__setattr__(self, "data", _freeze(data))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def height(self) -> int:
        return self.data.shape[1]

    @property
    def width(self) -> int:
        return self.data.shape[2]


@dataclass(frozen=True)
class ProbMapSet:
    """Per-class probability planes, (M, H, W) float32.

    Values lie in [0, 1] and the M values at each pixel sum to 1 within
    PROB_SUM_TOL.
    """

    planes: np.ndarray

    def __post_init__(self):
        planes = np.ascontiguousarray(self.planes, dtype=np.float32)
        if planes.ndim != 3 or planes.shape[0] < 1:
            raise MapValidationError(
                f"probability maps must be (M, H, W) with M >= 1, got shape {planes.shape}"
            )
        if not np.isfinite(planes).all():
            raise MapValidationError("probability maps contain non-finite values")
        if planes.size and (planes.min() < 0.0 or planes.max() > 1.0):
            raise MapValidationError("probability values must lie in [0, 1]")
        sums = planes.sum(axis=0, dtype=np.float64)
        if planes.size and np.abs(sums - 1.0).max() > PROB_SUM_TOL:
            worst = float(np.abs(sums - 1.0).max())
            raise MapValidationError(
                f"per-pixel class probabilities must sum to 1 within {PROB_SUM_TOL}"
                f" (worst deviation {worst:.3g})"
            )
        object.__setattr__(self, "planes", _freeze(planes))

    @property
    def class_count(self) -> int:
        return self.planes.shape[0]

    @property
    def height(self) -> int:
        return self.planes.shape[1]

    @property
    def width(self) -> int:
        return self.planes.shape[2]


@dataclass(frozen=True)
class Dataset:
    """Ordered (image, mask) pairs sharing dimensions and a class count."""

    items: tuple
    class_count: int
    name: str = "dataset"

    def __post_init__(self):
        items = tuple(self.items)
        if self.class_count < 1:
            raise DataError(f"class count must be >= 1, got {self.class_count}")
        for image, mask in items:
            if (image.height, image.width) != (mask.height, mask.width):
                raise DataError(
                    f"image/mask dimension mismatch in '{self.name}'"
                    f" (stem {image.stem!r})"
                )
            if int(mask.labels.max(initial=0)) >= self.class_count:
                raise DataError(
                    f"mask label >= class count {self.class_count} in '{self.name}'"
                    f" (stem {image.stem!r})"
                )
        shapes = {img.data.shape for img, _ in items}
        if len(shapes) > 1:
            raise DataError(f"images in '{self.name}' do not share (C, H, W): {sorted(shapes)}")
        object.__setattr__(self, "items", items)

    def __len__(self) -> int:
        return len(self.items)

    @property
    def channels(self) -> int:
        return self.items[0][0].channels if self.items else 0

    def subset(self, indices, name: str | None = None) -> "Dataset":
        picked = tuple(self.items[int(i)] for i in indices)
        return Dataset(picked, self.class_count, name or self.name)


def load_image_file(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode == "L":
            arr = np.asarray(img, dtype=np.float32)[None, :, :]
        elif img.mode == "RGB":
            arr = np.asarray(img, dtype=np.float32).transpose(2, 0, 1)
        else:
            raise DataError(f"unsupported image mode {img.mode!r} in {path} (need L or RGB)")
    return arr / 255.0


def _load_mask_file(path: Path) -> np.ndarray:
    with Image.open(path) as img:
        if img.mode not in ("L", "P"):
            raise DataError(
                f"unsupported mask mode {img.mode!r} in {path} (need 8-bit single channel)"
            )
        arr = np.asarray(img)
    if arr.ndim != 2 or arr.dtype != np.uint8:
        raise DataError(f"mask {path} is not an 8-bit single-channel image")
    return arr


def load_dataset(root, class_count: int, name: str | None = None) -> Dataset:
    """Load `<root>/images/<stem>.png` + `<root>/masks/<stem>.png` pairs.

    Items are ordered lexicographically by stem so downstream fold
    assignment is reproducible. Intensities are scaled to [0, 1]; mask
    pixel values are class indices and must be < class_count.
    """
    root = Path(root)
    images_dir = root / "images"
    masks_dir = root / "masks"
    image_stems = sorted(p.stem for p in images_dir.glob("*.png")) if images_dir.is_dir() else []
    if not image_stems:
        raise DataError(f"empty dataset: no images under {images_dir}")
    mask_stems = sorted(p.stem for p in masks_dir.glob("*.png")) if masks_dir.is_dir() else []
    missing_masks = sorted(set(image_stems) - set(mask_stems))
    missing_images = sorted(set(mask_stems) - set(image_stems))
    if missing_masks:
        raise DataError(f"unpaired sample '{missing_masks[0]}': image without mask in {root}")
    if missing_images:
        raise DataError(f"unpaired sample '{missing_images[0]}': mask without image in {root}")

    items = []
    for stem in image_stems:
        data = load_image_file(images_dir / f"{stem}.png")
        labels = _load_mask_file(masks_dir / f"{stem}.png")
        if labels.max(initial=0) >= class_count:
            row, col = np.unravel_index(int(np.argmax(labels)), labels.shape)
            raise DataError(
                f"label overflow in mask '{stem}' at pixel (row={row}, col={col}):"
                f" value {int(labels[row, col])} >= class count {class_count}"
            )
        items.append((ChannelImage(data, stem=stem), LabelImage(labels)))
    return Dataset(tuple(items), class_count, name or root.name)


def one_hot(mask: LabelImage, class_count: int) -> ProbMapSet:
    """Crisp per-class indicator planes for a label mask."""
    if int(mask.labels.max(initial=0)) >= class_count:
        raise DataError(
            f"mask label {int(mask.labels.max())} >= class count {class_count}"
        )
    planes = np.zeros((class_count, mask.height, mask.width), dtype=np.float32)
    classes = np.arange(class_count, dtype=np.uint8)
    planes[:] = (mask.labels[None, :, :] == classes[:, None, None])
    return ProbMapSet(planes)


def write_planes(planes: np.ndarray, path, version: int = PMAP_VERSION_NORMALIZED) -> None:
    """Write raw (M, H, W) float32 planes in the probability-map file format."""
    planes = np.ascontiguousarray(planes, dtype="<f4")
    if planes.ndim != 3:
        raise DataError(f"planes must be (M, H, W), got shape {planes.shape}")
    m, h, w = planes.shape
    if min(m, h, w) == 0 or max(m, h, w) > _U32_MAX or planes.nbytes > _MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(f"map dimensions out of range: M={m}, H={h}, W={w}")
    header = _PMAP_HEADER.pack(PMAP_MAGIC, version, w, h, m)
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(planes.tobytes())


def read_planes(path) -> tuple[np.ndarray, int]:
    """Read raw planes and the header version from a probability-map file."""
    blob = Path(path).read_bytes()
    if blob[:4] != PMAP_MAGIC:
        raise BadMagicError(f"{path}: bad magic {blob[:4]!r}, expected {PMAP_MAGIC!r}")
    if len(blob) < _PMAP_HEADER.size:
        raise TruncatedPayloadError(f"{path}: header truncated at {len(blob)} bytes")
    _, version, w, h, m = _PMAP_HEADER.unpack_from(blob)
    if version not in (PMAP_VERSION_NORMALIZED, PMAP_VERSION_MEMBERSHIP):
        raise ProbMapFormatError(f"{path}: unsupported version {version}")
    payload = m * h * w * 4
    if min(m, h, w) == 0 or payload > _MAX_PAYLOAD_BYTES:
        raise DimensionOverflowError(f"{path}: dimensions out of range: M={m}, H={h}, W={w}")
    expected = _PMAP_HEADER.size + payload
    if len(blob) < expected:
        raise TruncatedPayloadError(
            f"{path}: payload truncated ({len(blob)} bytes, expected {expected})"
        )
    if len(blob) > expected:
        raise ProbMapFormatError(f"{path}: {len(blob) - expected} trailing bytes")
    planes = np.frombuffer(blob, dtype="<f4", offset=_PMAP_HEADER.size).reshape(m, h, w)
    return planes, version


def write_prob_map(pm: ProbMapSet, path) -> None:
    """Persist a normalized probability-map set (format version 1)."""
    write_planes(pm.planes, path, version=PMAP_VERSION_NORMALIZED)


def read_prob_map(path) -> ProbMapSet:
    """Read and validate a normalized probability-map set.

    Round-trips with write_prob_map bit-exactly. Version-2 files
    (class-membership dumps) are rejected here; use read_planes for those.
    """
    planes, version = read_planes(path)
    if version != PMAP_VERSION_NORMALIZED:
        raise MapValidationError(
            f"{path}: version {version} is a membership dump, not a normalized map"
        )
    return ProbMapSet(planes)
