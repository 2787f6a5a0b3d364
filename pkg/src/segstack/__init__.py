"""segstack: two-layer stacked segmentation ensembles.

Out-of-fold probability maps from first-layer segmenters become extra
image channels for a second layer; per-class predictions are fused by
box-constrained least-squares weights fitted on streamed normal
equations. Includes Dice and average-Hausdorff evaluation and a
synthetic dataset generator for desk-scale runs.
"""

from segstack.combiner import ClassMembership, combine, decide
from segstack.errors import (
    ConfigError,
    DataError,
    NumericalError,
    SegstackError,
)
from segstack.imagery import (
    ChannelImage,
    Dataset,
    LabelImage,
    ProbMapSet,
    load_dataset,
    one_hot,
    read_prob_map,
    write_prob_map,
)
from segstack.learners import SegmenterSpec, TrainedSegmenter, learn, segment
from segstack.metrics import MetricReport, avg_hausdorff, dice, evaluate, extract_contour
from segstack.solver import (
    BoxConstraint,
    GramSystem,
    residual,
    solve_bvls,
    solve_nnls,
    solve_sum_one,
    solve_unconstrained,
)
from segstack.stacking import (
    EnsembleModel,
    FoldPlan,
    augment,
    load_ensemble,
    out_of_fold_maps,
    plan_folds,
    predict,
    save_ensemble,
    train_ensemble,
)

__version__ = "0.1.0"

__all__ = [
    "BoxConstraint", "ChannelImage", "ClassMembership", "ConfigError", "DataError",
    "Dataset", "EnsembleModel", "FoldPlan", "GramSystem", "LabelImage", "MetricReport",
    "NumericalError", "ProbMapSet", "SegmenterSpec", "SegstackError", "TrainedSegmenter",
    "augment", "avg_hausdorff", "combine", "decide", "dice", "evaluate", "extract_contour",
    "learn", "load_dataset", "load_ensemble", "one_hot", "out_of_fold_maps", "plan_folds",
    "predict", "read_prob_map", "residual", "save_ensemble", "segment", "solve_bvls",
    "solve_nnls", "solve_sum_one", "solve_unconstrained", "train_ensemble",
    "write_prob_map",
]
