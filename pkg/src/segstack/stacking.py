"""Two-layer stacked segmentation ensembles.

Training: split the data into folds, generate out-of-fold probability maps
from the first-layer learners, append those maps to the images as extra
channels, repeat the out-of-fold pass with the second-layer learners on
the augmented data, fit per-class fusion weights from the second-layer
predictions by box-constrained least squares, then train the final
first- and second-layer models on the full (respectively augmented) data.

The pixel-level regression behind the weights is never materialized:
per-image blocks stream into K x K normal-equation accumulators, one per
class, so memory stays O(M * K^2) while the row count is the full pixel
count.

A one-layer mode (ole=True) fits the same weights directly on the
first-layer out-of-fold maps and skips the second layer entirely; it is
the natural baseline for measuring what the second layer adds.
"""

from __future__ import annotations

import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from segstack import learners as learners_mod
from segstack.combiner import ClassMembership, combine, decide, membership_to_prob_map
from segstack.errors import ConfigError, DataError, SegstackError
from segstack.imagery import ChannelImage, Dataset, LabelImage, ProbMapSet
from segstack.learners import load_model
from segstack.solver import GramSystem, residual, solve_mode

DEFAULT_SEED = 13
DEFAULT_FOLDS = 5

MANIFEST_NAME = "manifest.json"
WEIGHTS_NAME = "weights.json"


@dataclass(frozen=True)
class FoldPlan:
    """Disjoint covering assignment of items to folds, sizes within 1."""

    fold_count: int
    assignment: np.ndarray
    seed: int

    def __post_init__(self):
        assignment = np.ascontiguousarray(self.assignment, dtype=np.int64)
        n = assignment.shape[0]
        if self.fold_count < 2 or self.fold_count > n:
            raise ConfigError(f"fold count {self.fold_count} invalid for {n} items (need 2 <= T <= n)")
        sizes = np.bincount(assignment, minlength=self.fold_count)
        if assignment.min(initial=0) < 0 or assignment.max(initial=0) >= self.fold_count:
            raise ConfigError("fold assignment indices out of range")
        if sizes.max() - sizes.min() > 1:
            raise ConfigError(f"fold sizes differ by more than 1: {sizes.tolist()}")
        assignment.flags.writeable = False
        object.__setattr__(self, "assignment", assignment)

    def holdout(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment == fold)

    def training(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.assignment != fold)


def plan_folds(item_count: int, fold_count: int, seed: int) -> FoldPlan:
    """Seeded shuffle, then round-robin assignment over the shuffled order."""
    if fold_count < 2 or fold_count > item_count:
        raise ConfigError(
            f"fold count {fold_count} invalid for {item_count} items (need 2 <= T <= n)"
        )
    order = np.random.default_rng(seed).permutation(item_count)
    assignment = np.empty(item_count, dtype=np.int64)
    assignment[order] = np.arange(item_count) % fold_count
    return FoldPlan(fold_count, assignment, seed)


def _run_jobs(jobs, worker, workers: int):
    if workers <= 1:
        return [worker(job) for job in jobs]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(worker, jobs))


def out_of_fold_maps(data: Dataset, specs, plan: FoldPlan, workers: int = 1,
                     learn_fn=learners_mod.learn, segment_fn=learners_mod.segment):
    """Probability maps for every item from models that never saw it.

    Returns maps[item][model]; for each fold t and model k, a segmenter is
    trained on the complement of fold t and applied to fold t's items.
    """
    if plan.assignment.shape[0] != len(data):
        raise ConfigError(f"fold plan covers {plan.assignment.shape[0]} items, dataset has {len(data)}")
    train_sets = {
        t: data.subset(plan.training(t), name=f"{data.name}[fold!={t}]")
        for t in range(plan.fold_count)
    }
    maps: list[list] = [[None] * len(specs) for _ in range(len(data))]

    def worker(job):
        t, k = job
        try:
            model = learn_fn(specs[k], train_sets[t])
            return [(int(i), k, segment_fn(model, data.items[int(i)][0]))
                    for i in plan.holdout(t)]
        except SegstackError as exc:
            raise type(exc)(f"fold {t}, model {k}: {exc}") from exc

    jobs = [(t, k) for t in range(plan.fold_count) for k in range(len(specs))]
    for result in _run_jobs(jobs, worker, workers):
        for i, k, pm in result:
            maps[i][k] = pm
    return maps


def augment(image: ChannelImage, maps) -> ChannelImage:
    """Append each model's class planes to the image as extra channels.

    The output has C + M*K channels: the original C, then for each model
    in order all of its class planes in class order.
    """
    maps = list(maps)
    for pm in maps:
        if (pm.height, pm.width) != (image.height, image.width):
            raise DataError(
                f"map size {pm.width}x{pm.height} does not match image"
                f" {image.width}x{image.height}"
            )
        if pm.class_count != maps[0].class_count:
            raise DataError("probability maps disagree on class count")
    data = np.concatenate([image.data] + [pm.planes for pm in maps], axis=0)
    return ChannelImage(data, stem=image.stem)


def augment_dataset(data: Dataset, maps_per_item) -> Dataset:
    items = tuple(
        (augment(image, maps_per_item[i]), mask)
        for i, (image, mask) in enumerate(data.items)
    )
    return Dataset(items, data.class_count, name=f"{data.name}*")


class SecondLevelData:
    """Streaming view of the pixel-level design rows for weight fitting.

    Each pixel contributes one row of M*K model probabilities plus its
    crisp label; rows are streamed per image and consumed by Gram
    accumulation, never materialized as one matrix.
    """

    def __init__(self, maps_per_item, masks):
        if len(maps_per_item) != len(masks):
            raise ConfigError("maps/masks item counts differ")
        self._maps = maps_per_item
        self._masks = masks
        self.model_count = len(maps_per_item[0])
        self.class_count = maps_per_item[0][0].class_count
        self.row_count = sum(mask.height * mask.width for mask in masks)
        self.column_count = self.class_count * self.model_count

    def blocks(self):
        """Yield (probs, labels) per image: probs is (K, M, pixels) float32."""
        for maps, mask in zip(self._maps, self._masks):
            stacked = np.stack([pm.planes for pm in maps])
            yield stacked.reshape(self.model_count, self.class_count, -1), mask.labels.reshape(-1)


def assemble_second_level(aug_data: Dataset, specs, plan: FoldPlan, workers: int = 1,
                          learn_fn=learners_mod.learn,
                          segment_fn=learners_mod.segment) -> SecondLevelData:
    """Out-of-fold second-layer predictions, streamed as SecondLevelData."""
    maps = out_of_fold_maps(aug_data, specs, plan, workers, learn_fn, segment_fn)
    return SecondLevelData(maps, [mask for _, mask in aug_data.items])


def fit_weights(sld: SecondLevelData, solver_mode: str = "bvls"):
    """Per-class weight vectors from streamed normal equations.

    Returns (weights, grams): weights is (K, M) with column m solving the
    class-m regression, grams the per-class accumulated systems.
    """
    k, m = sld.model_count, sld.class_count
    grams = [GramSystem.zeros(k) for _ in range(m)]
    for probs, labels in sld.blocks():
        p64 = probs.astype(np.float64)
        for c in range(m):
            grams[c].accumulate_block(p64[:, c, :].T, (labels == c).astype(np.float64))
    weights = np.empty((k, m), dtype=np.float64)
    for c in range(m):
        weights[:, c] = solve_mode(grams[c], solver_mode)
    return weights, grams


@dataclass
class TrainingReport:
    """Weight-fitting diagnostics kept alongside a trained ensemble."""

    grams: list
    fitted_residuals: np.ndarray
    single_model_residuals: np.ndarray  # (K, M): one-hot weight vectors
    uniform_residuals: np.ndarray
    row_count: int
    column_count: int

    def to_json_dict(self) -> dict:
        return {
            "row_count": self.row_count,
            "column_count": self.column_count,
            "fitted_residuals": self.fitted_residuals.tolist(),
            "single_model_residuals": self.single_model_residuals.tolist(),
            "uniform_residuals": self.uniform_residuals.tolist(),
            "grams": [g.dump() for g in self.grams],
        }

    @classmethod
    def from_json_dict(cls, blob: dict) -> "TrainingReport":
        return cls(
            grams=[GramSystem.from_dump(g) for g in blob["grams"]],
            fitted_residuals=np.asarray(blob["fitted_residuals"]),
            single_model_residuals=np.asarray(blob["single_model_residuals"]),
            uniform_residuals=np.asarray(blob["uniform_residuals"]),
            row_count=int(blob["row_count"]),
            column_count=int(blob["column_count"]),
        )


def _build_report(weights, grams, sld: SecondLevelData) -> TrainingReport:
    k, m = weights.shape
    fitted = np.array([residual(grams[c], weights[:, c]) for c in range(m)])
    singles = np.empty((k, m))
    for j in range(k):
        onehot = np.zeros(k)
        onehot[j] = 1.0
        singles[j] = [residual(grams[c], onehot) for c in range(m)]
    uniform = np.array([residual(grams[c], np.full(k, 1.0 / k)) for c in range(m)])
    return TrainingReport(grams, fitted, singles, uniform, sld.row_count, sld.column_count)


@dataclass
class EnsembleModel:
    """Trained two-layer (or one-layer) ensemble with fusion weights."""

    layer1: list
    layer2: list | None
    weights: np.ndarray
    class_count: int
    input_channels: int
    fold_count: int
    seed: int
    solver_mode: str
    specs: list = field(default_factory=list)

    def __post_init__(self):
        k = len(self.layer1)
        weights = np.asarray(self.weights, dtype=np.float64)
        if weights.shape != (k, self.class_count):
            raise ConfigError(
                f"weights must be K x M = {k} x {self.class_count}, got {weights.shape}"
            )
        if not np.isfinite(weights).all():
            raise ConfigError("weights contain non-finite values")
        if self.solver_mode == "bvls" and (weights.min() < -1e-12 or weights.max() > 1.0 + 1e-12):
            raise ConfigError("box-constrained weights fall outside [0, 1]")
        if self.layer2 is not None:
            expected = self.input_channels + self.class_count * k
            for model in self.layer2:
                if model.input_channels != expected:
                    raise ConfigError(
                        f"second-layer model expects {model.input_channels} channels,"
                        f" augmentation yields {expected}"
                    )
        object.__setattr__(self, "weights", weights)

    @property
    def model_count(self) -> int:
        return len(self.layer1)

    @property
    def ole(self) -> bool:
        return self.layer2 is None


def _stage(name: str, fn):
    try:
        return fn()
    except SegstackError as exc:
        raise type(exc)(f"{name}: {exc}") from exc


def train_ensemble(data: Dataset, specs, fold_count: int = DEFAULT_FOLDS,
                   seed: int = DEFAULT_SEED, solver_mode: str = "bvls",
                   ole: bool = False, workers: int = 1, specs2=None,
                   learn_fn=learners_mod.learn, segment_fn=learners_mod.segment):
    """Full training pipeline; returns (EnsembleModel, TrainingReport).

    By default the second layer reuses the first layer's algorithm specs;
    pass `specs2` (same length) to experiment with a different second
    layer.
    """
    specs = list(specs)
    if not specs:
        raise ConfigError("need at least one segmenter spec")
    specs2 = list(specs2) if specs2 is not None else specs
    if len(specs2) != len(specs):
        raise ConfigError(
            f"second-layer spec count {len(specs2)} must equal first-layer count {len(specs)}"
        )
    if len(data) == 0:
        raise DataError("cannot train on an empty dataset")
    plan = plan_folds(len(data), fold_count, seed)
    masks = [mask for _, mask in data.items]

    maps1 = _stage("first-layer out-of-fold maps",
                   lambda: out_of_fold_maps(data, specs, plan, workers, learn_fn, segment_fn))
    if ole:
        sld = SecondLevelData(maps1, masks)
        aug_data = None
    else:
        aug_data = _stage("channel augmentation", lambda: augment_dataset(data, maps1))
        sld = _stage("second-layer out-of-fold maps",
                     lambda: assemble_second_level(aug_data, specs2, plan, workers,
                                                   learn_fn, segment_fn))
    weights, grams = _stage("weight fitting", lambda: fit_weights(sld, solver_mode))
    report = _build_report(weights, grams, sld)

    layer1 = _stage("final first-layer training",
                    lambda: [learn_fn(spec, data) for spec in specs])
    layer2 = None
    if not ole:
        layer2 = _stage("final second-layer training",
                        lambda: [learn_fn(spec, aug_data) for spec in specs2])
    model = EnsembleModel(layer1, layer2, weights, data.class_count, data.channels,
                          fold_count, seed, solver_mode, [s.to_json_dict() for s in specs])
    return model, report


def predict(model: EnsembleModel, image: ChannelImage,
            segment_fn=learners_mod.segment) -> tuple[LabelImage, ProbMapSet]:
    """Segment one image; returns the label mask and the renormalized
    membership planes for reporting. The argmax is taken on the raw
    (unnormalized) memberships."""
    maps1 = [segment_fn(m, image) for m in model.layer1]
    if model.ole:
        cm = combine(maps1, model.weights)
    else:
        augmented = augment(image, maps1)
        maps2 = [segment_fn(m, augmented) for m in model.layer2]
        cm = combine(maps2, model.weights)
    return decide(cm), membership_to_prob_map(cm)


def predict_membership(model: EnsembleModel, image: ChannelImage,
                       segment_fn=learners_mod.segment) -> ClassMembership:
    """Raw fused memberships (used by map dumps)."""
    maps1 = [segment_fn(m, image) for m in model.layer1]
    if model.ole:
        return combine(maps1, model.weights)
    augmented = augment(image, maps1)
    maps2 = [segment_fn(m, augmented) for m in model.layer2]
    return combine(maps2, model.weights)


def save_ensemble(model: EnsembleModel, out_dir) -> None:
    """Persist to a directory: layer1/<k>.model, layer2/<k>.model,
    weights.json (K x M, row = model, column = class), manifest.json."""
    out_dir = Path(out_dir)
    (out_dir / "layer1").mkdir(parents=True, exist_ok=True)
    for k, m in enumerate(model.layer1):
        m.save(out_dir / "layer1" / f"{k}.model")
    if model.layer2 is not None:
        (out_dir / "layer2").mkdir(parents=True, exist_ok=True)
        for k, m in enumerate(model.layer2):
            m.save(out_dir / "layer2" / f"{k}.model")
    (out_dir / WEIGHTS_NAME).write_text(
        json.dumps(model.weights.tolist(), separators=(",", ":")) + "\n"
    )
    manifest = {
        "format": 1,
        "mode": "ole" if model.ole else "two-layer",
        "class_count": model.class_count,
        "model_count": model.model_count,
        "input_channels": model.input_channels,
        "fold_count": model.fold_count,
        "seed": model.seed,
        "solver_mode": model.solver_mode,
        "specs": model.specs,
    }
    (out_dir / MANIFEST_NAME).write_text(
        json.dumps(manifest, sort_keys=True, separators=(",", ":")) + "\n"
    )


def load_ensemble(model_dir) -> EnsembleModel:
    """Load a persisted ensemble from manifest + model files only."""
    model_dir = Path(model_dir)
    manifest_path = model_dir / MANIFEST_NAME
    if not manifest_path.is_file():
        raise DataError(f"no ensemble manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    k = int(manifest["model_count"])
    layer1 = [load_model(model_dir / "layer1" / f"{i}.model") for i in range(k)]
    layer2 = None
    if manifest["mode"] == "two-layer":
        layer2 = [load_model(model_dir / "layer2" / f"{i}.model") for i in range(k)]
    weights = np.asarray(json.loads((model_dir / WEIGHTS_NAME).read_text()), dtype=np.float64)
    return EnsembleModel(layer1, layer2, weights,
                         int(manifest["class_count"]), int(manifest["input_channels"]),
                         int(manifest["fold_count"]), int(manifest["seed"]),
                         manifest["solver_mode"], manifest["specs"])
