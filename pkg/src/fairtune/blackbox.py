"""Zeroth-order optimization with a boosted-tree surrogate.

The surrogate is an ensemble of K independently boosted regression-tree
models, each fit on a bootstrap resample of the observations; the
ensemble mean is the prediction and the spread across members is the
uncertainty.  Candidates are proposed by minimizing the lower confidence
bound mean - beta * sigma over a seeded uniform pool, which performs
optimistic minimization (callers minimize, so pass the negated objective
when maximizing).  A paired random-search baseline is included.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._gbrt_kernels import fit_tree, predict_forest


@dataclass(frozen=True)
class GBRTConfig:
    """Shape of the surrogate: K bootstrap members, trees per member."""

    ensemble_size: int = 5
    trees_per_model: int = 100
    depth: int = 3
    shrinkage: float = 0.1
    min_samples_leaf: int = 1
    bootstrap: bool = True


@dataclass(frozen=True)
class AcquisitionSpec:
    """Lower-confidence-bound tradeoff and proposal pool size."""

    beta: float = 1.0
    candidate_pool_size: int = 1000

    def __post_init__(self):
        if not np.isfinite(self.beta) or self.beta < 0:
            raise ValueError("beta must be finite and non-negative")


@dataclass(frozen=True)
class SearchSpace:
    """Per-coordinate box around a center point.

    The halfwidth is ``relative_halfwidth * |center|`` per coordinate;
    coordinates equal to zero fall back to ``absolute_halfwidth``.
    """

    center: np.ndarray
    relative_halfwidth: float = 0.5
    absolute_halfwidth: float = 0.1

    def __post_init__(self):
        center = np.asarray(self.center, dtype=np.float64).ravel()
        if self.relative_halfwidth <= 0 or self.absolute_halfwidth <= 0:
            raise ValueError("halfwidths must be positive")
        object.__setattr__(self, "center", center)

    @property
    def dim(self) -> int:
        return self.center.size

    def bounds(self) -> tuple[np.ndarray, np.ndarray]:
        hw = np.where(
            self.center != 0.0,
            self.relative_halfwidth * np.abs(self.center),
            self.absolute_halfwidth,
        )
        return self.center - hw, self.center + hw

    def sample(self, rng: np.random.Generator, count: int) -> np.ndarray:
        lo, hi = self.bounds()
        return rng.uniform(lo, hi, size=(count, self.dim))

    def contains(self, x: np.ndarray) -> bool:
        lo, hi = self.bounds()
        x = np.asarray(x, dtype=np.float64).ravel()
        return bool(np.all(x >= lo - 1e-12) and np.all(x <= hi + 1e-12))


class _BoostedMember:
    """One boosted model: stage-wise least-squares trees on residuals."""

    def __init__(self, X: np.ndarray, y: np.ndarray, cfg: GBRTConfig):
        n = X.shape[0]
        n_nodes = (1 << (cfg.depth + 1)) - 1
        self.base = float(np.mean(y))
        self.shrinkage = cfg.shrinkage
        self.feats = np.full((cfg.trees_per_model, n_nodes), -1, dtype=np.int64)
        self.thrs = np.zeros((cfg.trees_per_model, n_nodes))
        self.vals = np.zeros((cfg.trees_per_model, n_nodes))
        X = np.ascontiguousarray(X, dtype=np.float64)
        sort_idx = np.ascontiguousarray(np.argsort(X, axis=0, kind="stable"))
        resid = y - self.base
        train_pred = np.empty(n)
        for t in range(cfg.trees_per_model):
            fit_tree(
                X, sort_idx, resid, cfg.depth, cfg.min_samples_leaf,
                self.feats[t], self.thrs[t], self.vals[t], train_pred,
            )
            resid -= cfg.shrinkage * train_pred

    def predict(self, X: np.ndarray) -> np.ndarray:
        out = np.empty(X.shape[0])
        predict_forest(
            np.ascontiguousarray(X, dtype=np.float64),
            self.feats, self.thrs, self.vals, self.shrinkage, self.base, out,
        )
        return out


class GBRTModel:
    """Bootstrap ensemble of boosted-tree models with mean/spread prediction."""

    def __init__(self, members: list[_BoostedMember], X: np.ndarray, y: np.ndarray):
        self.members = members
        self.X_obs = X
        self.y_obs = y

    @property
    def ensemble_size(self) -> int:
        return len(self.members)

    def predict_batch(self, X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        X = np.asarray(X, dtype=np.float64)
        if X.ndim != 2 or X.shape[1] != self.X_obs.shape[1]:
            raise ValueError(f"expected (n, {self.X_obs.shape[1]}) points, got {X.shape}")
        preds = np.stack([m.predict(X) for m in self.members])
        mean = preds.mean(axis=0)
        if len(self.members) > 1:
            sigma = preds.std(axis=0, ddof=1)
        else:
            sigma = np.zeros_like(mean)
        return mean, sigma

    def predict(self, x: np.ndarray) -> tuple[float, float]:
        mean, sigma = self.predict_batch(np.asarray(x, dtype=np.float64).reshape(1, -1))
        return float(mean[0]), float(sigma[0])


def fit(X, y, cfg: GBRTConfig = GBRTConfig(), seed: int = 0) -> GBRTModel:
    """Fit the surrogate on observed (point, value) pairs.

    Each member trains on a bootstrap resample drawn from ``seed``; without
    bootstrap all members see the same data and, the trees being
    deterministic, the ensemble spread is exactly zero.
    """
    X = np.asarray(X, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64).ravel()
    if X.ndim != 2 or X.shape[0] != y.size:
        raise ValueError("X must be (n, d) with one value per row")
    if X.shape[0] < 2:
        raise ValueError("need at least 2 observations")
    if not np.all(np.isfinite(y)):
        raise ValueError("observation values must be finite")
    rng = np.random.default_rng(seed)
    members = []
    for _ in range(cfg.ensemble_size):
        if cfg.bootstrap:
            idx = rng.integers(0, X.shape[0], size=X.shape[0])
            members.append(_BoostedMember(X[idx], y[idx], cfg))
        else:
            members.append(_BoostedMember(X, y, cfg))
    return GBRTModel(members, X, y)


def propose(model: GBRTModel, space: SearchSpace, acq: AcquisitionSpec,
            seed: int = 0) -> np.ndarray:
    """Point minimizing mean - beta * sigma over a seeded uniform pool."""
    rng = np.random.default_rng(seed)
    pool = space.sample(rng, acq.candidate_pool_size)
    mean, sigma = model.predict_batch(pool)
    return pool[int(np.argmin(mean - acq.beta * sigma))].copy()


@dataclass
class MinimizeResult:
    best_point: np.ndarray
    best_value: float
    history: list[tuple[np.ndarray, float]]


def default_n_init(budget: int) -> int:
    return max(10, budget // 5)


def minimize(f, space: SearchSpace, budget: int, n_init: int | None = None,
             acq: AcquisitionSpec = AcquisitionSpec(), seed: int = 0,
             gbrt: GBRTConfig = GBRTConfig(),
             initial_points: list[np.ndarray] | None = None) -> MinimizeResult:
    """Surrogate-guided minimization under a fixed evaluation budget.

    Evaluates ``f`` exactly ``budget`` times: ``n_init`` seeded uniform
    samples first (any ``initial_points`` are evaluated as part of that
    allotment), then surrogate proposals.  Non-finite values are recorded
    as +inf in the history and replaced by a large finite penalty when
    fitting the surrogate.  ``budget == n_init`` is plain random search.
    """
    if n_init is None:
        n_init = default_n_init(budget)
    n_init = min(max(2, n_init), budget)
    if budget < 2:
        raise ValueError("budget must be at least 2")

    rng = np.random.default_rng(seed)
    history: list[tuple[np.ndarray, float]] = []
    points: list[np.ndarray] = []
    values: list[float] = []

    def evaluate(x: np.ndarray) -> None:
        val = float(f(x))
        if not np.isfinite(val):
            val = np.inf
        history.append((x.copy(), val))
        points.append(x)
        values.append(val)

    fixed = [np.asarray(p, dtype=np.float64).ravel() for p in (initial_points or [])]
    for p in fixed[:n_init]:
        evaluate(p)
    remaining_init = n_init - len(points)
    if remaining_init > 0:
        for x in space.sample(rng, remaining_init):
            evaluate(x)

    while len(points) < budget:
        model = fit(
            np.stack(points), _penalize(np.array(values)), cfg=gbrt,
            seed=int(rng.integers(2 ** 63)),
        )
        x = propose(model, space, acq, seed=int(rng.integers(2 ** 63)))
        evaluate(x)

    best = int(np.argmin(values))
    return MinimizeResult(points[best].copy(), values[best], history)


def random_search(f, space: SearchSpace, budget: int, seed: int = 0) -> MinimizeResult:
    """Pure random search with the same bookkeeping as :func:`minimize`."""
    return minimize(f, space, budget=budget, n_init=budget, seed=seed)


def _penalize(values: np.ndarray) -> np.ndarray:
    """Replace +inf records with a large finite penalty for surrogate fitting."""
    finite = values[np.isfinite(values)]
    if finite.size == 0:
        return np.zeros_like(values)
    worst = finite.max()
    spread = max(finite.max() - finite.min(), 1.0)
    return np.where(np.isfinite(values), values, worst + 3.0 * spread)
