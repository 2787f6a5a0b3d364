"""Segmentation learners: the algorithm abstraction plus reference models.

Three dependency-light reference learners provide heterogeneous errors for
ensembling — a patch-statistics Gaussian classifier, a pixelwise
multinomial logistic regression, and a nearest-neighbour patch matcher —
plus a file-backed "external" learner that replays precomputed probability
maps keyed by image stem, the integration point for predictions produced
elsewhere.

All learners are deterministic functions of (spec, data): training twice
yields byte-identical parameters.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segstack import _ext
from segstack.errors import ConfigError, DataError, ProbMapFormatError
from segstack.imagery import ChannelImage, Dataset, ProbMapSet, read_prob_map

KINDS = ("naiveBayesPatch", "logisticPixel", "knnPatch", "external")

MODEL_MAGIC = b"SMDL"
MODEL_VERSION = 1

PROB_CLIP = 1e-6

_DEFAULT_HYPERS = {
    "naiveBayesPatch": {"radius": 1},
    "logisticPixel": {"radius": 1, "learning_rate": 1.0, "epochs": 150},
    "knnPatch": {"radius": 1, "k": 5, "max_reference": 1500},
    "external": {"map_dir": None},
}


@dataclass(frozen=True)
class SegmenterSpec:
    """A segmentation algorithm choice with its hyperparameters and seed."""

    kind: str
    hyperparameters: dict = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown learner kind {self.kind!r} (choose from {', '.join(KINDS)})")
        defaults = _DEFAULT_HYPERS[self.kind]
        unknown = set(self.hyperparameters) - set(defaults)
        if unknown:
            raise ConfigError(f"unknown hyperparameters for {self.kind}: {sorted(unknown)}")
        merged = {**defaults, **dict(self.hyperparameters)}
        object.__setattr__(self, "hyperparameters", merged)
        self._check_ranges(merged)

    def _check_ranges(self, hp):
        if self.kind != "external":
            if not isinstance(hp["radius"], int) or hp["radius"] < 0:
                raise ConfigError(f"patch radius must be a non-negative integer, got {hp['radius']!r}")
        if self.kind == "logisticPixel":
            if hp["epochs"] < 1:
                raise ConfigError(f"epochs must be >= 1, got {hp['epochs']}")
            if not hp["learning_rate"] > 0:
                raise ConfigError(f"learning rate must be positive, got {hp['learning_rate']}")
        if self.kind == "knnPatch":
            if hp["k"] < 1:
                raise ConfigError(f"neighbour count k must be >= 1, got {hp['k']}")
            if hp["max_reference"] < 1:
                raise ConfigError(f"max_reference must be >= 1, got {hp['max_reference']}")
        if self.kind == "external" and not hp["map_dir"]:
            raise ConfigError("external learner needs a map_dir hyperparameter")

    def hyper(self, name):
        return self.hyperparameters[name]

    def to_json_dict(self) -> dict:
        return {"kind": self.kind, "hyperparameters": dict(self.hyperparameters), "seed": self.seed}

    @classmethod
    def from_json_dict(cls, blob: dict) -> "SegmenterSpec":
        return cls(blob["kind"], dict(blob.get("hyperparameters", {})), int(blob.get("seed", 0)))


def _canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _normalize_probs(raw: np.ndarray) -> np.ndarray:
    """Clip probabilities to [1e-6, 1-1e-6], then renormalize per pixel.

    `raw` is (M, ...) nonnegative float64; returns float32.
    """
    clipped = np.clip(raw, PROB_CLIP, 1.0 - PROB_CLIP)
    clipped /= clipped.sum(axis=0, keepdims=True)
    return clipped.astype(np.float32)


def _patch_vectors(data: np.ndarray, radius: int) -> np.ndarray:
    """Flattened clamp-to-edge patch per pixel: (H*W, C*(2r+1)^2) float32."""
    c, h, w = data.shape
    if radius == 0:
        return np.ascontiguousarray(data.reshape(c, h * w).T)
    width = 2 * radius + 1
    padded = np.pad(data, ((0, 0), (radius, radius), (radius, radius)), mode="edge")
    windows = np.lib.stride_tricks.sliding_window_view(padded, (width, width), axis=(1, 2))
    return np.ascontiguousarray(windows.transpose(1, 2, 0, 3, 4).reshape(h * w, -1))


def _moment_features(data: np.ndarray, radius: int) -> np.ndarray:
    """Per-pixel (patch mean, patch variance) per channel: (H*W, 2C) float32."""
    mean, var = _ext.patch_moments(np.ascontiguousarray(data, dtype=np.float32), radius)
    c = data.shape[0]
    return np.concatenate([mean.reshape(c, -1).T, var.reshape(c, -1).T], axis=1)


def _logistic_features(data: np.ndarray, radius: int) -> np.ndarray:
    """Raw channel values plus patch means: (H*W, 2C) float32."""
    mean, _ = _ext.patch_moments(np.ascontiguousarray(data, dtype=np.float32), radius)
    c = data.shape[0]
    return np.concatenate([data.reshape(c, -1).T, mean.reshape(c, -1).T], axis=1)


class TrainedSegmenter:
    """A trained model: maps images with the trained channel count to maps."""

    kind = "abstract"

    def __init__(self, spec: SegmenterSpec, input_channels: int, class_count: int):
        self.spec = spec
        self.input_channels = input_channels
        self.class_count = class_count

    def segment(self, image: ChannelImage) -> ProbMapSet:
        if image.channels != self.input_channels:
            raise DataError(
                f"channel mismatch: model expects {self.input_channels} channels,"
                f" got {image.channels}"
            )
        return self._predict(image)

    def _predict(self, image: ChannelImage) -> ProbMapSet:
        raise NotImplementedError

    # --- persistence ---------------------------------------------------

    def _arrays(self) -> list[tuple[str, np.ndarray]]:
        return []

    def to_bytes(self) -> bytes:
        arrays = [(name, np.ascontiguousarray(arr, dtype="<f4")) for name, arr in self._arrays()]
        meta = {
            "kind": self.kind,
            "spec": self.spec.to_json_dict(),
            "input_channels": self.input_channels,
            "class_count": self.class_count,
            "arrays": [[name, list(arr.shape)] for name, arr in arrays],
        }
        blob = _canonical_json(meta).encode("utf-8")
        parts = [MODEL_MAGIC, struct.pack("<II", MODEL_VERSION, len(blob)), blob]
        for _, arr in arrays:
            parts.append(struct.pack("<I", arr.size))
            parts.append(arr.tobytes())
        return b"".join(parts)

    def save(self, path) -> None:
        Path(path).write_bytes(self.to_bytes())


def _read_model_blob(blob: bytes, path) -> TrainedSegmenter:
    if blob[:4] != MODEL_MAGIC:
        raise ProbMapFormatError(f"{path}: bad model magic {blob[:4]!r}")
    if len(blob) < 12:
        raise ProbMapFormatError(f"{path}: model header truncated")
    version, json_len = struct.unpack_from("<II", blob, 4)
    if version != MODEL_VERSION:
        raise ProbMapFormatError(f"{path}: unsupported model version {version}")
    meta = json.loads(blob[12:12 + json_len].decode("utf-8"))
    offset = 12 + json_len
    arrays = {}
    for name, shape in meta["arrays"]:
        (count,) = struct.unpack_from("<I", blob, offset)
        offset += 4
        arr = np.frombuffer(blob, dtype="<f4", count=count, offset=offset)
        offset += count * 4
        arrays[name] = arr.reshape(shape)
    spec = SegmenterSpec.from_json_dict(meta["spec"])
    cls = _MODEL_CLASSES[meta["kind"]]
    return cls._from_arrays(spec, int(meta["input_channels"]), int(meta["class_count"]), arrays)


def load_model(path) -> TrainedSegmenter:
    return _read_model_blob(Path(path).read_bytes(), path)


class NaiveBayesPatchSegmenter(TrainedSegmenter):
    """Gaussian class-conditional model over per-channel patch mean/variance."""

    kind = "naiveBayesPatch"

    def __init__(self, spec, input_channels, class_count, log_prior, means, variances):
        super().__init__(spec, input_channels, class_count)
        self.log_prior = log_prior
        self.means = means
        self.variances = variances

    @classmethod
    def train(cls, spec: SegmenterSpec, data: Dataset) -> "NaiveBayesPatchSegmenter":
        radius = spec.hyper("radius")
        m = data.class_count
        n_features = 2 * data.channels
        counts = np.zeros(m)
        sums = np.zeros((m, n_features))
        sumsq = np.zeros((m, n_features))
        for image, mask in data.items:
            feats = _moment_features(image.data, radius).astype(np.float64)
            labels = mask.labels.reshape(-1)
            for c in range(m):
                rows = feats[labels == c]
                if rows.size:
                    counts[c] += rows.shape[0]
                    sums[c] += rows.sum(axis=0)
                    sumsq[c] += np.square(rows).sum(axis=0)
        total = counts.sum()
        log_prior = np.log((counts + 1.0) / (total + m))
        safe = np.maximum(counts, 1.0)[:, None]
        means = sums / safe
        variances = np.maximum(sumsq / safe - means ** 2, 0.0) + 1e-6
        variances[counts == 0] = 1.0
        return cls(spec, data.channels, m,
                   log_prior.astype(np.float32), means.astype(np.float32),
                   variances.astype(np.float32))

    def _predict(self, image: ChannelImage) -> ProbMapSet:
        feats = _moment_features(image.data, self.spec.hyper("radius")).astype(np.float64)
        mu = self.means.astype(np.float64)
        var = self.variances.astype(np.float64)
        inv = 1.0 / var
        # log-likelihood per class, expanded so it is two matmuls over pixels
        const = -0.5 * (np.log(2.0 * np.pi * var) + mu ** 2 * inv).sum(axis=1)
        loglik = (feats ** 2) @ (-0.5 * inv.T) + feats @ (mu * inv).T
        loglik += const[None, :] + self.log_prior.astype(np.float64)[None, :]
        loglik -= loglik.max(axis=1, keepdims=True)
        probs = np.exp(loglik)
        probs /= probs.sum(axis=1, keepdims=True)
        planes = probs.T.reshape(self.class_count, image.height, image.width)
        return ProbMapSet(_normalize_probs(planes))

    def _arrays(self):
        return [("log_prior", self.log_prior), ("means", self.means), ("variances", self.variances)]

    @classmethod
    def _from_arrays(cls, spec, input_channels, class_count, arrays):
        return cls(spec, input_channels, class_count,
                   arrays["log_prior"], arrays["means"], arrays["variances"])


class LogisticPixelSegmenter(TrainedSegmenter):
    """Multinomial logistic regression on pixel channels plus patch means.

    Trained by full-batch gradient descent on standardized features; the
    standardization statistics are part of the model.
    """

    kind = "logisticPixel"

    def __init__(self, spec, input_channels, class_count, weights, feat_mean, feat_scale):
        super().__init__(spec, input_channels, class_count)
        self.weights = weights  # (F+1, M) including bias row
        self.feat_mean = feat_mean
        self.feat_scale = feat_scale

    @classmethod
    def train(cls, spec: SegmenterSpec, data: Dataset) -> "LogisticPixelSegmenter":
        radius = spec.hyper("radius")
        lr = float(spec.hyper("learning_rate"))
        epochs = int(spec.hyper("epochs"))
        m = data.class_count
        feats = np.concatenate(
            [_logistic_features(img.data, radius) for img, _ in data.items]
        ).astype(np.float64)
        labels = np.concatenate([mask.labels.reshape(-1) for _, mask in data.items])
        feat_mean = feats.mean(axis=0)
        feat_scale = np.maximum(feats.std(axis=0), 1e-8)
        feats -= feat_mean
        feats /= feat_scale
        design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
        onehot = np.zeros((design.shape[0], m))
        onehot[np.arange(design.shape[0]), labels] = 1.0
        weights = np.zeros((design.shape[1], m))
        n = design.shape[0]
        for _ in range(epochs):
            logits = design @ weights
            logits -= logits.max(axis=1, keepdims=True)
            probs = np.exp(logits)
            probs /= probs.sum(axis=1, keepdims=True)
            weights -= lr * (design.T @ (probs - onehot)) / n
        return cls(spec, data.channels, m, weights.astype(np.float32),
                   feat_mean.astype(np.float32), feat_scale.astype(np.float32))

    def _predict(self, image: ChannelImage) -> ProbMapSet:
        feats = _logistic_features(image.data, self.spec.hyper("radius")).astype(np.float64)
        feats -= self.feat_mean.astype(np.float64)
        feats /= self.feat_scale.astype(np.float64)
        design = np.concatenate([feats, np.ones((feats.shape[0], 1))], axis=1)
        logits = design @ self.weights.astype(np.float64)
        logits -= logits.max(axis=1, keepdims=True)
        probs = np.exp(logits)
        probs /= probs.sum(axis=1, keepdims=True)
        planes = probs.T.reshape(self.class_count, image.height, image.width)
        return ProbMapSet(_normalize_probs(planes))

    def _arrays(self):
        return [("weights", self.weights), ("feat_mean", self.feat_mean),
                ("feat_scale", self.feat_scale)]

    @classmethod
    def _from_arrays(cls, spec, input_channels, class_count, arrays):
        return cls(spec, input_channels, class_count,
                   arrays["weights"], arrays["feat_mean"], arrays["feat_scale"])


class KnnPatchSegmenter(TrainedSegmenter):
    """Nearest-neighbour matching against subsampled training patches."""

    kind = "knnPatch"

    def __init__(self, spec, input_channels, class_count, reference, ref_labels):
        super().__init__(spec, input_channels, class_count)
        self.reference = reference  # (R, D) float32
        self.ref_labels = ref_labels  # (R,) uint8

    @classmethod
    def train(cls, spec: SegmenterSpec, data: Dataset) -> "KnnPatchSegmenter":
        radius = spec.hyper("radius")
        max_ref = int(spec.hyper("max_reference"))
        patches = np.concatenate([_patch_vectors(img.data, radius) for img, _ in data.items])
        labels = np.concatenate([mask.labels.reshape(-1) for _, mask in data.items])
        if patches.shape[0] > max_ref:
            rng = np.random.default_rng(spec.seed)
            keep = np.sort(rng.choice(patches.shape[0], size=max_ref, replace=False))
            patches = patches[keep]
            labels = labels[keep]
        return cls(spec, data.channels, data.class_count,
                   np.ascontiguousarray(patches), labels.astype(np.uint8))

    def _predict(self, image: ChannelImage) -> ProbMapSet:
        k = min(int(self.spec.hyper("k")), self.reference.shape[0])
        queries = _patch_vectors(image.data, self.spec.hyper("radius")).astype(np.float64)
        ref = self.reference.astype(np.float64)
        ref_sq = np.einsum("ij,ij->i", ref, ref)
        n = queries.shape[0]
        counts = np.zeros((n, self.class_count), dtype=np.float64)
        chunk = 4096
        for start in range(0, n, chunk):
            q = queries[start:start + chunk]
            d2 = np.einsum("ij,ij->i", q, q)[:, None] + ref_sq[None, :] - 2.0 * (q @ ref.T)
            if k == 1:
                nearest = np.argmin(d2, axis=1)
                votes = self.ref_labels[nearest][:, None]
            else:
                part = np.argpartition(d2, k - 1, axis=1)[:, :k]
                votes = self.ref_labels[part]
            rows = np.repeat(np.arange(votes.shape[0]), votes.shape[1])
            np.add.at(counts[start:start + chunk], (rows, votes.reshape(-1)), 1.0)
        probs = counts.T / k
        planes = probs.reshape(self.class_count, image.height, image.width)
        return ProbMapSet(_normalize_probs(planes))

    def _arrays(self):
        return [("reference", self.reference), ("ref_labels", self.ref_labels.astype(np.float32))]

    @classmethod
    def _from_arrays(cls, spec, input_channels, class_count, arrays):
        return cls(spec, input_channels, class_count,
                   arrays["reference"], arrays["ref_labels"].astype(np.uint8))


class ExternalSegmenter(TrainedSegmenter):
    """Replays `<map_dir>/<stem>.pmap` files; never fabricates values."""

    kind = "external"

    @classmethod
    def train(cls, spec: SegmenterSpec, data: Dataset) -> "ExternalSegmenter":
        return cls(spec, data.channels, data.class_count)

    def _predict(self, image: ChannelImage) -> ProbMapSet:
        if image.stem is None:
            raise DataError("external learner needs images with a stem to key map files")
        path = Path(self.spec.hyper("map_dir")) / f"{image.stem}.pmap"
        if not path.is_file():
            raise DataError(f"external learner map not found: {path}")
        pm = read_prob_map(path)
        if (pm.height, pm.width) != (image.height, image.width):
            raise DataError(
                f"external map {path} is {pm.width}x{pm.height},"
                f" image is {image.width}x{image.height}"
            )
        if pm.class_count != self.class_count:
            raise DataError(
                f"external map {path} has {pm.class_count} classes, expected {self.class_count}"
            )
        return pm

    @classmethod
    def _from_arrays(cls, spec, input_channels, class_count, arrays):
        return cls(spec, input_channels, class_count)


_MODEL_CLASSES = {
    "naiveBayesPatch": NaiveBayesPatchSegmenter,
    "logisticPixel": LogisticPixelSegmenter,
    "knnPatch": KnnPatchSegmenter,
    "external": ExternalSegmenter,
}


def learn(spec: SegmenterSpec, data: Dataset) -> TrainedSegmenter:
    """Train one segmenter on a dataset. Deterministic in (spec, data)."""
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    return _MODEL_CLASSES[spec.kind].train(spec, data)


def segment(model: TrainedSegmenter, image: ChannelImage) -> ProbMapSet:
    """Predict per-class probability planes for one image."""
    return model.segment(image)
