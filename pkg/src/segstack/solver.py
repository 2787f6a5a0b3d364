"""Box-constrained linear least squares on streamed normal equations.

A GramSystem compresses an (n, K) design matrix A and target vector y into
G = A'A, b = A'y, yy = y'y, so the squared residual of any weight vector w
is w'Gw - 2b'w + yy regardless of n. Solvers operate on that compressed
form: an active-set method for box constraints, its non-negative and
unconstrained specializations, a sum-to-one equality mode, and an
exhaustive small-K enumeration oracle used for verification.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass

import numpy as np

from segstack.errors import ConfigError, NumericalError

KKT_TOL = 1e-8
_PSD_TOL = 1e-8
_SYM_TOL = 1e-9
_DAMPING = 1e-10

_LOWER, _FREE, _UPPER = -1, 0, 1


@dataclass
class GramSystem:
    """Accumulated K x K normal equations for one regression."""

    g: np.ndarray
    b: np.ndarray
    yy: float = 0.0
    rows: int = 0

    @classmethod
    def zeros(cls, k: int) -> "GramSystem":
        if k < 1:
            raise ConfigError(f"column count must be >= 1, got {k}")
        return cls(np.zeros((k, k)), np.zeros(k))

    @property
    def k(self) -> int:
        return self.b.shape[0]

    def accumulate(self, row, target: float) -> "GramSystem":
        """Add one pixel row: G += r r', b += y r, yy += y^2."""
        row = np.asarray(row, dtype=np.float64)
        if row.shape != (self.k,):
            raise ConfigError(f"row length {row.shape} does not match K={self.k}")
        if not (np.isfinite(row).all() and math.isfinite(target)):
            raise NumericalError("non-finite accumulation input")
        self.g += np.outer(row, row)
        self.b += target * row
        self.yy += target * target
        self.rows += 1
        return self

    def accumulate_block(self, block, targets) -> "GramSystem":
        """Vectorized accumulate over an (n, K) block and n targets."""
        block = np.asarray(block, dtype=np.float64)
        targets = np.asarray(targets, dtype=np.float64)
        if block.ndim != 2 or block.shape[1] != self.k or targets.shape != (block.shape[0],):
            raise ConfigError(
                f"block shape {block.shape} / targets {targets.shape} do not match K={self.k}"
            )
        if not (np.isfinite(block).all() and np.isfinite(targets).all()):
            raise NumericalError("non-finite accumulation input")
        update = block.T @ block
        self.g += (update + update.T) * 0.5  # keep G exactly symmetric
        self.b += block.T @ targets
        self.yy += float(targets @ targets)
        self.rows += block.shape[0]
        return self

    def merge(self, other: "GramSystem") -> "GramSystem":
        """Fold another shard into this one (associative up to rounding)."""
        if other.k != self.k:
            raise ConfigError(f"cannot merge K={other.k} shard into K={self.k}")
        self.g += other.g
        self.b += other.b
        self.yy += other.yy
        self.rows += other.rows
        return self

    def copy(self) -> "GramSystem":
        return GramSystem(self.g.copy(), self.b.copy(), self.yy, self.rows)

    def validate(self) -> None:
        if not (np.isfinite(self.g).all() and np.isfinite(self.b).all() and math.isfinite(self.yy)):
            raise NumericalError("gram system contains non-finite values")
        scale = max(np.abs(self.g).max(), 1.0)
        if np.abs(self.g - self.g.T).max() > _SYM_TOL * scale:
            raise NumericalError("gram matrix is not symmetric within tolerance")
        trace = float(np.trace(self.g))
        min_eig = float(np.linalg.eigvalsh(self.g).min())
        if min_eig < -_PSD_TOL * max(trace, 1.0):
            raise NumericalError(
                f"gram matrix is not positive semidefinite (min eigenvalue {min_eig:.3g})"
            )

    def dump(self) -> dict:
        """JSON-serializable snapshot for offline analysis."""
        return {
            "k": self.k,
            "g": self.g.tolist(),
            "b": self.b.tolist(),
            "yy": self.yy,
            "rows": self.rows,
        }

    @classmethod
    def from_dump(cls, blob: dict) -> "GramSystem":
        sys = cls(np.asarray(blob["g"], dtype=np.float64), np.asarray(blob["b"], dtype=np.float64),
                  float(blob["yy"]), int(blob["rows"]))
        if sys.g.shape != (sys.k, sys.k):
            raise ConfigError("gram dump has inconsistent shapes")
        return sys


@dataclass(frozen=True)
class BoxConstraint:
    """Elementwise bounds l <= w <= u; entries may be +-inf."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        lower = np.asarray(self.lower, dtype=np.float64)
        upper = np.asarray(self.upper, dtype=np.float64)
        if lower.shape != upper.shape or lower.ndim != 1:
            raise ConfigError("box bounds must be 1-D vectors of equal length")
        if np.any(lower > upper):
            raise ConfigError("box lower bounds exceed upper bounds")
        object.__setattr__(self, "lower", lower)
        object.__setattr__(self, "upper", upper)

    @classmethod
    def unit(cls, k: int) -> "BoxConstraint":
        return cls(np.zeros(k), np.ones(k))

    @classmethod
    def nonnegative(cls, k: int) -> "BoxConstraint":
        return cls(np.zeros(k), np.full(k, np.inf))

    @classmethod
    def unbounded(cls, k: int) -> "BoxConstraint":
        return cls(np.full(k, -np.inf), np.full(k, np.inf))

    @classmethod
    def symmetric_unit(cls, k: int) -> "BoxConstraint":
        return cls(np.full(k, -1.0), np.ones(k))


def _objective(sys: GramSystem, w: np.ndarray) -> float:
    return float(w @ sys.g @ w - 2.0 * sys.b @ w + sys.yy)


def residual(sys: GramSystem, w) -> float:
    """Residual norm ||Aw - y|| recovered from the compressed system."""
    w = np.asarray(w, dtype=np.float64)
    if w.shape != (sys.k,):
        raise ConfigError(f"weight vector shape {w.shape} does not match K={sys.k}")
    return math.sqrt(max(0.0, _objective(sys, w)))


def _solve_spd(g: np.ndarray, rhs: np.ndarray) -> np.ndarray:
    """Solve g x = rhs for symmetric PSD g, damping the diagonal if needed."""
    try:
        chol = np.linalg.cholesky(g)
        return np.linalg.solve(chol.T, np.linalg.solve(chol, rhs))
    except np.linalg.LinAlgError:
        pass
    k = g.shape[0]
    damping = _DAMPING * max(float(np.trace(g)), 1.0) / k
    try:
        return np.linalg.solve(g + damping * np.eye(k), rhs)
    except np.linalg.LinAlgError as exc:
        raise NumericalError("free subsystem is singular even after damping") from exc


def _gradient(sys: GramSystem, w: np.ndarray) -> np.ndarray:
    return 2.0 * (sys.g @ w - sys.b)


def kkt_violation(sys: GramSystem, w, box: BoxConstraint) -> float:
    """Worst first-order optimality violation of w for the boxed problem.

    Free coordinates contribute |gradient|; coordinates at the lower bound
    contribute max(0, -gradient) and at the upper bound max(0, gradient).
    """
    w = np.asarray(w, dtype=np.float64)
    grad = _gradient(sys, w)
    at_lower = np.isclose(w, box.lower, rtol=0.0, atol=1e-12)
    at_upper = np.isclose(w, box.upper, rtol=0.0, atol=1e-12)
    viol = np.abs(grad)
    viol = np.where(at_lower, np.maximum(0.0, -grad), viol)
    viol = np.where(at_upper, np.maximum(0.0, grad), viol)
    viol = np.where(at_lower & at_upper, 0.0, viol)
    return float(viol.max(initial=0.0))


def _is_degenerate(sys: GramSystem) -> bool:
    return not np.any(sys.b) and sys.yy == 0.0


def _march_to_bound(w, z, free_idx, lower, upper, state):
    """Step w[free] toward z until the first coordinate crosses its bound.

    Returns False when z itself is feasible (the step is taken in full).
    """
    z_clip_lo = z < lower[free_idx]
    z_clip_hi = z > upper[free_idx]
    if not (z_clip_lo.any() or z_clip_hi.any()):
        w[free_idx] = z
        return False
    current = w[free_idx]
    step = z - current
    with np.errstate(divide="ignore", invalid="ignore"):
        alphas = np.where(z_clip_lo, (lower[free_idx] - current) / step,
                          np.where(z_clip_hi, (upper[free_idx] - current) / step, np.inf))
    alphas = np.where(np.isfinite(alphas), alphas, np.inf)
    pick = int(np.argmin(alphas))
    alpha = min(max(float(alphas[pick]), 0.0), 1.0)
    w[free_idx] = current + alpha * step
    bind = int(free_idx[pick])
    if z_clip_lo[pick]:
        w[bind] = lower[bind]
        state[bind] = _LOWER
    else:
        w[bind] = upper[bind]
        state[bind] = _UPPER
    return True


def solve_bvls(sys: GramSystem, box: BoxConstraint | None = None) -> np.ndarray:
    """Minimize ||Aw - y|| subject to elementwise bounds on w.

    Active-set iteration on the compressed normal equations: solve the
    free subsystem, march onto bounds when the solution leaves the box,
    then release the most KKT-violating bound coordinate (ties broken by
    lowest index). Iterations are capped at 3*K^2.
    """
    if box is None:
        box = BoxConstraint.unit(sys.k)
    if box.lower.shape != (sys.k,):
        raise ConfigError(f"box size {box.lower.shape} does not match K={sys.k}")
    sys.validate()
    k = sys.k
    lower, upper = box.lower, box.upper
    if _is_degenerate(sys):
        return np.clip(np.zeros(k), lower, upper)

    state = np.empty(k, dtype=np.int8)
    w = np.empty(k, dtype=np.float64)
    for i in range(k):
        if np.isfinite(lower[i]):
            state[i], w[i] = _LOWER, lower[i]
        elif np.isfinite(upper[i]):
            state[i], w[i] = _UPPER, upper[i]
        else:
            state[i], w[i] = _FREE, 0.0

    gtol = KKT_TOL * max(1.0, float(np.abs(sys.b).max()))
    max_iter = max(3 * k * k, 3)
    for _ in range(max_iter):
        for _ in range(max_iter):
            free_idx = np.flatnonzero(state == _FREE)
            if free_idx.size == 0:
                break
            fixed = state != _FREE
            rhs = sys.b[free_idx] - sys.g[np.ix_(free_idx, np.flatnonzero(fixed))] @ w[fixed]
            z = _solve_spd(sys.g[np.ix_(free_idx, free_idx)], rhs)
            if not _march_to_bound(w, z, free_idx, lower, upper, state):
                break
        else:
            raise NumericalError("bounded least squares failed to restore feasibility")

        grad = _gradient(sys, w)
        release_score = np.where(state == _LOWER, -grad, np.where(state == _UPPER, grad, -np.inf))
        worst = int(np.argmax(release_score))
        if release_score[worst] <= gtol:
            return w
        state[worst] = _FREE
    raise NumericalError(f"bounded least squares did not converge within {max_iter} iterations")


def solve_nnls(sys: GramSystem) -> np.ndarray:
    """Non-negative least squares: bounds [0, +inf)."""
    return solve_bvls(sys, BoxConstraint.nonnegative(sys.k))


def solve_unconstrained(sys: GramSystem) -> np.ndarray:
    """Plain least squares, Gw = b by symmetric factorization with damping."""
    sys.validate()
    if _is_degenerate(sys):
        return np.zeros(sys.k)
    return _solve_spd(sys.g, sys.b)


def solve_sum_one(sys: GramSystem, box: BoxConstraint | None = None) -> np.ndarray:
    """Box-constrained least squares with the extra equality sum(w) = 1.

    The equality is eliminated inside each active-set step by solving the
    bordered system [[2G_FF, 1], [1', 0]] on the free coordinates; bound
    handling mirrors solve_bvls with the reduced gradient g_i - mu.
    """
    if box is None:
        box = BoxConstraint.symmetric_unit(sys.k)
    if box.lower.shape != (sys.k,):
        raise ConfigError(f"box size {box.lower.shape} does not match K={sys.k}")
    sys.validate()
    k = sys.k
    lower, upper = box.lower, box.upper
    start = np.full(k, 1.0 / k)
    if np.any(start < lower) or np.any(start > upper):
        raise ConfigError("sum-to-one mode needs 1/K inside the box to start from")
    if k == 1:
        return start

    state = np.zeros(k, dtype=np.int8)
    w = start.copy()
    gtol = KKT_TOL * max(1.0, float(np.abs(sys.b).max()))
    max_iter = max(3 * k * k, 3)
    for _ in range(max_iter):
        mu = 0.0
        for _ in range(max_iter):
            free_idx = np.flatnonzero(state == _FREE)
            if free_idx.size == 0:
                break
            fixed_idx = np.flatnonzero(state != _FREE)
            nf = free_idx.size
            bordered = np.zeros((nf + 1, nf + 1))
            bordered[:nf, :nf] = 2.0 * sys.g[np.ix_(free_idx, free_idx)]
            bordered[:nf, nf] = 1.0
            bordered[nf, :nf] = 1.0
            rhs = np.empty(nf + 1)
            rhs[:nf] = 2.0 * (sys.b[free_idx] - sys.g[np.ix_(free_idx, fixed_idx)] @ w[fixed_idx])
            rhs[nf] = 1.0 - float(w[fixed_idx].sum())
            try:
                solution = np.linalg.solve(bordered, rhs)
            except np.linalg.LinAlgError:
                damping = _DAMPING * max(float(np.trace(sys.g)), 1.0) / k
                bordered[:nf, :nf] += 2.0 * damping * np.eye(nf)
                solution = np.linalg.solve(bordered, rhs)
            z, mu = solution[:nf], float(solution[nf])
            if not _march_to_bound(w, z, free_idx, lower, upper, state):
                break
        else:
            raise NumericalError("sum-to-one least squares failed to restore feasibility")

        grad = _gradient(sys, w)
        if not np.any(state == _FREE):
            # With every coordinate bound, pick the multiplier that best
            # splits the lower-bound gradients (>= mu) from the upper (<= mu).
            lo_grads = grad[state == _LOWER]
            hi_grads = grad[state == _UPPER]
            if lo_grads.size and hi_grads.size:
                mu = (float(lo_grads.min()) + float(hi_grads.max())) / 2.0
            elif lo_grads.size:
                mu = float(lo_grads.min())
            else:
                mu = float(hi_grads.max())
        reduced = grad - mu
        release_score = np.where(state == _LOWER, -reduced,
                                 np.where(state == _UPPER, reduced, -np.inf))
        worst = int(np.argmax(release_score))
        if release_score[worst] <= gtol:
            return w
        state[worst] = _FREE
    raise NumericalError(f"sum-to-one least squares did not converge within {max_iter} iterations")


def solve_box_enumeration(sys: GramSystem, box: BoxConstraint | None = None) -> np.ndarray:
    """Exhaustive oracle: try all 3^K lower/free/upper patterns.

    For each pattern the free subsystem is solved exactly; feasible
    candidates are compared by objective value. Exponential in K, intended
    for verification at K <= ~8.
    """
    if box is None:
        box = BoxConstraint.unit(sys.k)
    sys.validate()
    k = sys.k
    if _is_degenerate(sys):
        return np.clip(np.zeros(k), box.lower, box.upper)
    lower, upper = box.lower, box.upper
    best_w, best_obj = None, np.inf
    for pattern in itertools.product((_LOWER, _FREE, _UPPER), repeat=k):
        pattern = np.asarray(pattern, dtype=np.int8)
        if np.any((pattern == _LOWER) & ~np.isfinite(lower)):
            continue
        if np.any((pattern == _UPPER) & ~np.isfinite(upper)):
            continue
        w = np.where(pattern == _LOWER, lower, np.where(pattern == _UPPER, upper, 0.0))
        free_idx = np.flatnonzero(pattern == _FREE)
        if free_idx.size:
            fixed_idx = np.flatnonzero(pattern != _FREE)
            rhs = sys.b[free_idx] - sys.g[np.ix_(free_idx, fixed_idx)] @ w[fixed_idx]
            gff = sys.g[np.ix_(free_idx, free_idx)]
            try:
                z = np.linalg.solve(gff, rhs)
            except np.linalg.LinAlgError:
                z = np.linalg.lstsq(gff, rhs, rcond=None)[0]
            w[free_idx] = z
        if np.any(w < lower - 1e-9) or np.any(w > upper + 1e-9):
            continue
        obj = _objective(sys, np.clip(w, lower, upper))
        if obj < best_obj:
            best_obj, best_w = obj, np.clip(w, lower, upper)
    if best_w is None:
        raise NumericalError("enumeration oracle found no feasible stationary point")
    return best_w


SOLVER_MODES = ("bvls", "nnls", "unconstrained", "sum1")


def solve_mode(sys: GramSystem, mode: str) -> np.ndarray:
    """Dispatch one of the named weight-fitting modes."""
    if mode == "bvls":
        return solve_bvls(sys)
    if mode == "nnls":
        return solve_nnls(sys)
    if mode == "unconstrained":
        return solve_unconstrained(sys)
    if mode == "sum1":
        return solve_sum_one(sys)
    raise ConfigError(f"unknown solver mode {mode!r} (choose from {', '.join(SOLVER_MODES)})")
