"""Meta-task assembly: duel simulation, query/prediction set construction.

All model-facing coordinates live in [-1, 1]^D. A meta-task bundles a query
set of candidate points (with latent utilities when available), a candidate
pair index set, and a disjoint pool of prediction duels for the auxiliary
preference-recovery task.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import qmc

from .tasks import SampledFunction, TestFunction


def simulate_duel(
    y1: float, y2: float, sigma_noise: float, rng: np.random.Generator
) -> int:
    """Outcome of one duel: 0 if the first point wins, 1 otherwise.

    Both utilities receive i.i.d. normal noise; an exact tie (reachable only
    at sigma_noise = 0) is broken by a fair coin.
    """
    return int(simulate_duels(np.array([y1]), np.array([y2]), sigma_noise, rng)[0])


def simulate_duels(
    y1: np.ndarray, y2: np.ndarray, sigma_noise: float, rng: np.random.Generator
) -> np.ndarray:
    if sigma_noise < 0:
        raise ValueError("sigma_noise must be nonnegative")
    z1 = np.asarray(y1, dtype=np.float64).copy()
    z2 = np.asarray(y2, dtype=np.float64).copy()
    if sigma_noise > 0:
        z1 += rng.normal(0.0, sigma_noise, size=z1.shape)
        z2 += rng.normal(0.0, sigma_noise, size=z2.shape)
    labels = (z2 > z1).astype(np.int64)
    ties = z1 == z2
    if np.any(ties):
        labels[ties] = rng.integers(0, 2, size=int(np.sum(ties)))
    return labels


def sobol_query_set(bounds: np.ndarray, size: int) -> np.ndarray:
    """First ``size`` points of the unscrambled Sobol sequence, mapped to
    ``bounds`` (array of per-dimension (low, high))."""
    if size < 2:
        raise ValueError("query set needs at least 2 points")
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    d = bounds.shape[0]
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", UserWarning)
        unit = qmc.Sobol(d, scramble=False).random(size)
    return bounds[:, 0] + unit * (bounds[:, 1] - bounds[:, 0])


def uniform_query_set(
    bounds: np.ndarray, size: int, rng: np.random.Generator
) -> np.ndarray:
    bounds = np.atleast_2d(np.asarray(bounds, dtype=np.float64))
    return rng.uniform(bounds[:, 0], bounds[:, 1], size=(size, bounds.shape[0]))


def all_pairs(size: int) -> np.ndarray:
    """All unordered index pairs (i < j) over ``size`` points."""
    if size < 2:
        raise ValueError("need at least 2 points to form pairs")
    i, j = np.triu_indices(size, k=1)
    return np.stack([i, j], axis=1)


def sample_pairs(size: int, count: int, rng: np.random.Generator) -> np.ndarray:
    """``count`` distinct pairs drawn uniformly without replacement."""
    full = all_pairs(size)
    if count > full.shape[0]:
        raise ValueError(f"requested {count} pairs but only {full.shape[0]} exist")
    idx = rng.choice(full.shape[0], size=count, replace=False)
    return full[np.sort(idx)]


def query_set_sizes(dimension: int) -> int:
    return min(300, 100 * dimension)


def prediction_context_cap(dimension: int) -> int:
    if dimension == 1:
        return 50
    if dimension <= 4:
        return 100
    return 200


@dataclass
class DataConfig:
    """Sizes and noise level for meta-task construction.

    ``None`` sizes resolve to min(300, 100 * D) at build time.
    """

    query_size: int | None = None
    pair_count: int | None = None
    prediction_size: int | None = None
    sigma_noise: float = 0.0

    def resolved(self, dimension: int) -> tuple[int, int, int]:
        base = query_set_sizes(dimension)
        return (
            self.query_size or base,
            self.pair_count or base,
            self.prediction_size or base,
        )


@dataclass
class MetaTask:
    """One optimization problem instance seen by the model."""

    dimension: int
    query_points: np.ndarray  # (S, D), model coordinates
    query_utilities: np.ndarray | None  # (S,), latent values if known
    candidate_pairs: np.ndarray  # (M, 2) indices into query_points
    pred_points: np.ndarray  # (K, D)
    pred_utilities: np.ndarray  # (K,)
    pred_pairs: np.ndarray  # (N, 2) indices into pred_points
    pred_labels: np.ndarray  # (N,)
    f_opt: float | None = None

    @property
    def n_query(self) -> int:
        return self.query_points.shape[0]

    @property
    def n_prediction(self) -> int:
        return self.pred_pairs.shape[0]


@dataclass
class PredictionSplit:
    """A context/target partition of a task's prediction duels."""

    ctx_x1: np.ndarray  # (C, D)
    ctx_x2: np.ndarray
    ctx_labels: np.ndarray  # (C,)
    tar_points: np.ndarray  # (2P, D)
    tar_pairs: np.ndarray  # (P, 2) indices into tar_points
    tar_labels: np.ndarray  # (P,)

    @property
    def n_ctx(self) -> int:
        return self.ctx_labels.shape[0]

    @property
    def n_tar_pairs(self) -> int:
        return self.tar_pairs.shape[0]


@dataclass
class History:
    """Ordered duel record for one optimization run."""

    dimension: int
    budget: int
    x1: list = field(default_factory=list)
    x2: list = field(default_factory=list)
    labels: list = field(default_factory=list)
    y1: list = field(default_factory=list)
    y2: list = field(default_factory=list)

    @property
    def step(self) -> int:
        return len(self.labels) + 1

    def append(self, x1, x2, label, y1=None, y2=None):
        if len(self.labels) >= self.budget + 1:
            raise ValueError("history exceeds budget")
        self.x1.append(np.asarray(x1, dtype=np.float64))
        self.x2.append(np.asarray(x2, dtype=np.float64))
        self.labels.append(int(label))
        self.y1.append(None if y1 is None else float(y1))
        self.y2.append(None if y2 is None else float(y2))

    def arrays(self):
        n = len(self.labels)
        if n == 0:
            d = self.dimension
            return (
                np.zeros((0, d)),
                np.zeros((0, d)),
                np.zeros(0, dtype=np.int64),
            )
        return (
            np.stack(self.x1),
            np.stack(self.x2),
            np.asarray(self.labels, dtype=np.int64),
        )

    def observed_utilities(self) -> np.ndarray:
        vals = [v for pair in zip(self.y1, self.y2) for v in pair if v is not None]
        return np.asarray(vals, dtype=np.float64)


def _evaluate_unit(function, points: np.ndarray, rng: np.random.Generator):
    """Latent utilities at model-coordinate points for any supported source."""
    if isinstance(function, SampledFunction):
        return function.extend(points, rng)
    if isinstance(function, TestFunction):
        return function.eval_unit(points)
    return np.asarray(function(points), dtype=np.float64)


def build_meta_task(
    function,
    mode: str,
    config: DataConfig,
    rng: np.random.Generator,
    candidates: np.ndarray | None = None,
    candidate_utilities: np.ndarray | None = None,
) -> MetaTask:
    """Assemble a meta-task around a latent utility.

    ``continuous`` mode samples the query set uniformly (training) and draws
    a disjoint point pool for the prediction duels. ``discrete`` mode takes
    an explicit candidate list (split half/half between the query and
    prediction roles). Query and prediction pools never share points.
    """
    if mode not in ("continuous", "discrete"):
        raise ValueError(f"unknown mode: {mode!r}")

    if mode == "discrete":
        if candidates is None or candidate_utilities is None:
            raise ValueError("discrete mode needs candidates with utilities")
        return _discrete_meta_task(candidates, candidate_utilities, config, rng)

    dimension = function.dimension
    s, m, n = config.resolved(dimension)
    pool_size = min(300, 100 * dimension)
    bounds = np.array([(-1.0, 1.0)] * dimension)

    pts = uniform_query_set(bounds, s + pool_size, rng)
    utilities = _evaluate_unit(function, pts, rng)
    query_points, pool_points = pts[:s], pts[s:]
    query_utilities, pool_utilities = utilities[:s], utilities[s:]

    candidate_pairs = sample_pairs(s, m, rng)
    pred_pairs = sample_pairs(pool_size, n, rng)
    pred_labels = simulate_duels(
        pool_utilities[pred_pairs[:, 0]],
        pool_utilities[pred_pairs[:, 1]],
        config.sigma_noise,
        rng,
    )
    f_opt = function.y_opt if isinstance(function, SampledFunction) else None
    return MetaTask(
        dimension=dimension,
        query_points=query_points,
        query_utilities=query_utilities,
        candidate_pairs=candidate_pairs,
        pred_points=pool_points,
        pred_utilities=pool_utilities,
        pred_pairs=pred_pairs,
        pred_labels=pred_labels,
        f_opt=f_opt,
    )


def _discrete_meta_task(candidates, utilities, config, rng) -> MetaTask:
    candidates = np.atleast_2d(np.asarray(candidates, dtype=np.float64))
    utilities = np.asarray(utilities, dtype=np.float64)
    total = candidates.shape[0]
    if total < 3:
        raise ValueError("need at least 3 candidates for a discrete task")
    dimension = candidates.shape[1]
    perm = rng.permutation(total)
    half = total // 2
    pred_idx, query_idx = perm[:half], perm[half:]

    query_points = candidates[query_idx]
    query_utilities = utilities[query_idx]
    s = query_points.shape[0]
    _, m, n = config.resolved(dimension)
    candidate_pairs = all_pairs(s)
    pool_points = candidates[pred_idx]
    pool_utilities = utilities[pred_idx]
    if half >= 2:
        max_pairs = half * (half - 1) // 2
        pred_pairs = sample_pairs(half, min(n, max_pairs), rng)
        pred_labels = simulate_duels(
            pool_utilities[pred_pairs[:, 0]],
            pool_utilities[pred_pairs[:, 1]],
            config.sigma_noise,
            rng,
        )
    else:
        pred_pairs = np.zeros((0, 2), dtype=np.int64)
        pred_labels = np.zeros(0, dtype=np.int64)
    return MetaTask(
        dimension=dimension,
        query_points=query_points,
        query_utilities=query_utilities,
        candidate_pairs=candidate_pairs,
        pred_points=pool_points,
        pred_utilities=pool_utilities,
        pred_pairs=pred_pairs,
        pred_labels=pred_labels,
        f_opt=float(np.max(utilities)),
    )


def split_prediction_set(task: MetaTask, rng: np.random.Generator) -> PredictionSplit:
    """Random context/target split of the prediction duels.

    The context size is uniform on {1, ..., cap} with a dimension-dependent
    cap, never exceeding N - 1; the remaining pairs' individual points form
    the target set.
    """
    n = task.n_prediction
    if n < 2:
        raise ValueError("prediction set too small to split")
    cap = min(prediction_context_cap(task.dimension), n - 1)
    n_ctx = int(rng.integers(1, cap + 1))
    perm = rng.permutation(n)
    ctx_pairs = task.pred_pairs[perm[:n_ctx]]
    held = task.pred_pairs[perm[n_ctx:]]
    held_labels = task.pred_labels[perm[n_ctx:]]

    p = held.shape[0]
    tar_point_idx = held.reshape(-1)  # two points per held-out pair
    tar_points = task.pred_points[tar_point_idx]
    tar_pairs = np.arange(2 * p).reshape(p, 2)
    return PredictionSplit(
        ctx_x1=task.pred_points[ctx_pairs[:, 0]],
        ctx_x2=task.pred_points[ctx_pairs[:, 1]],
        ctx_labels=task.pred_labels[perm[:n_ctx]],
        tar_points=tar_points,
        tar_pairs=tar_pairs,
        tar_labels=held_labels,
    )


def load_tabular_task(
    path, config: DataConfig, rng: np.random.Generator
) -> MetaTask:
    """Read a tabular task file: header line ``d=<D>``, then comma-separated
    rows of D features and one utility value. Features are affinely mapped to
    [-1, 1] per dimension; rows split half/half into prediction and query
    roles."""
    with open(path) as fh:
        header = fh.readline().strip()
        if not header.startswith("d="):
            raise ValueError(f"{path}: missing 'd=<D>' header")
        try:
            dimension = int(header[2:])
        except ValueError:
            raise ValueError(f"{path}: malformed dimension header {header!r}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            line = line.strip()
            if not line:
                continue
            parts = line.split(",")
            if len(parts) != dimension + 1:
                raise ValueError(
                    f"{path}:{lineno}: expected {dimension + 1} fields, got {len(parts)}"
                )
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise ValueError(f"{path}:{lineno}: non-numeric field")
    data = np.asarray(rows, dtype=np.float64)
    x, y = data[:, :dimension], data[:, dimension]
    lo, hi = x.min(axis=0), x.max(axis=0)
    span = np.where(hi > lo, hi - lo, 1.0)
    unit = 2.0 * (x - lo) / span - 1.0
    return _discrete_meta_task(unit, y, config, rng)
