"""Observation layouts, score transforms, and orbit collapse.

A layout describes indexed data with exactly one unknown response
coordinate.  A score transform maps responses to nonconformity scores
coordinate-wise (so it commutes with index permutations).  Collapsing the
symmetry-group orbit of a layout produces an :class:`OrbitProblem`: weighted
(feature, score) pairs whose weighted pinball objective equals the full
group average, with the unknown score kept symbolic at ``test_index``.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence, Union

import numpy as np

__all__ = [
    "DataError",
    "FlatLayout",
    "HierarchicalLayout",
    "CrtCluster",
    "CrtLayout",
    "NetworkLayout",
    "ScoreTransform",
    "OrbitProblem",
    "TEST_COVARIATE",
    "COVARIATE_PAIR",
    "UserProjection",
    "scores_from",
    "project",
    "build_orbit_problem",
    "network_statistics",
]


class DataError(ValueError):
    """Invalid or inconsistent observation data."""


def _as_matrix(x: np.ndarray) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    return x[:, None] if x.ndim == 1 else x


def _predict(predictor: Callable, covariates: np.ndarray) -> np.ndarray:
    out = np.asarray(predictor(_as_matrix(covariates)), dtype=float)
    if not np.all(np.isfinite(out)):
        raise DataError("predictor produced non-finite values")
    return out.reshape(-1)


# ---------------------------------------------------------------------------
# layouts
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class FlatLayout:
    """n+1 exchangeable (x, y) pairs; the last response is unknown."""

    x: np.ndarray
    y: np.ndarray  # y[-1] is ignored / may be nan

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise DataError("x and y must have equal length")
        if len(self.x) < 2:
            raise DataError("need at least one calibration pair plus the target")
        if not np.all(np.isfinite(np.asarray(self.y, dtype=float)[:-1])):
            raise DataError("observed responses must be finite")

    @property
    def n_slots(self) -> int:
        return len(self.x)


@dataclass(frozen=True)
class HierarchicalLayout:
    """K clusters of (x, y) pairs; the last individual of the last cluster
    is the prediction target."""

    clusters: tuple[tuple[np.ndarray, np.ndarray], ...]

    def __post_init__(self):
        if not self.clusters:
            raise DataError("need at least one cluster")
        for x, y in self.clusters:
            if len(x) != len(y) or len(x) == 0:
                raise DataError("cluster covariates/responses misaligned or empty")

    @property
    def sizes(self) -> tuple[int, ...]:
        return tuple(len(x) for x, _ in self.clusters)

    @property
    def n_slots(self) -> int:
        return sum(self.sizes)


@dataclass(frozen=True)
class CrtCluster:
    arm: int  # 0 or 1
    covariate: float  # cluster-level covariate C_i
    x: np.ndarray
    y_observed: np.ndarray  # outcomes under the assigned arm

    def __post_init__(self):
        if self.arm not in (0, 1):
            raise DataError("treatment arm must be 0 or 1")
        if len(self.x) != len(self.y_observed) or len(self.x) == 0:
            raise DataError("cluster covariates/outcomes misaligned or empty")


@dataclass(frozen=True)
class CrtLayout:
    """Cluster randomized trial: per-cluster arm, cluster covariate, and
    individual (x, y) pairs observed under the assigned arm."""

    clusters: tuple[CrtCluster, ...]
    target: tuple[int, int]  # (cluster m, individual n)

    def __post_init__(self):
        m, n = self.target
        if not 0 <= m < len(self.clusters):
            raise DataError("target cluster out of range")
        if not 0 <= n < len(self.clusters[m].x):
            raise DataError("target individual out of range")

    def opposite_arm_clusters(self) -> list[int]:
        a_star = 1 - self.clusters[self.target[0]].arm
        return [i for i, c in enumerate(self.clusters) if c.arm == a_star]


@dataclass(frozen=True)
class NetworkLayout:
    """n+1 nodes with covariates, graph-derived statistics, and responses;
    the last response is unknown."""

    adjacency: np.ndarray
    x: np.ndarray
    y: np.ndarray
    statistics: Optional[np.ndarray] = None  # (n+1, k); computed if None

    def __post_init__(self):
        a = np.asarray(self.adjacency, dtype=float)
        n = len(self.x)
        if a.shape != (n, n):
            raise DataError("adjacency must be square and match the node count")
        if not np.allclose(a, a.T):
            raise DataError("adjacency must be symmetric (undirected graph)")
        if len(self.y) != n:
            raise DataError("x and y must have equal length")

    @property
    def n_slots(self) -> int:
        return len(self.x)


Layout = Union[FlatLayout, HierarchicalLayout, CrtLayout, NetworkLayout]


def network_statistics(adjacency: np.ndarray, x: np.ndarray) -> np.ndarray:
    """Default node statistics: degree and neighborhood covariate averages.

    Isolated nodes get zero neighborhood averages (with a warning); both
    statistics are label-equivariant by construction.
    """
    a = np.asarray(adjacency, dtype=float)
    xm = _as_matrix(x)
    deg = a.sum(axis=1)
    if np.any(deg == 0):
        warnings.warn("isolated node(s): neighborhood averages set to 0")
    safe = np.where(deg > 0, deg, 1.0)
    nbr_avg = (a @ xm) / safe[:, None]
    nbr_avg[deg == 0] = 0.0
    return np.column_stack([deg, nbr_avg])


# ---------------------------------------------------------------------------
# score transforms
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ScoreTransform:
    """Coordinate-wise absolute-residual scores s_i = |y_i - mu(x_i)|.

    ``predictor`` maps a covariate matrix to predicted responses; for CRT
    layouts pass a (mu_0, mu_1) pair indexed by treatment arm.
    """

    predictor: Union[Callable, tuple[Callable, Callable]]
    kind: str = "absolute_residual"

    def predictor_for_arm(self, arm: int) -> Callable:
        if isinstance(self.predictor, tuple):
            return self.predictor[arm]
        raise DataError("CRT layouts need a (mu_0, mu_1) predictor pair")


def _absolute_residuals(y: np.ndarray, fitted: np.ndarray) -> np.ndarray:
    return np.abs(np.asarray(y, dtype=float) - fitted)


def scores_from(layout: Layout, transform: ScoreTransform) -> np.ndarray:
    """Scores aligned with the layout's slot order; nan at the target slot."""
    if isinstance(layout, FlatLayout):
        s = _absolute_residuals(layout.y, _predict(transform.predictor, layout.x))
        s[-1] = np.nan
        return s
    if isinstance(layout, HierarchicalLayout):
        predictors = _cluster_predictors(transform.predictor, len(layout.clusters))
        parts = [
            _absolute_residuals(y, _predict(mu, x))
            for mu, (x, y) in zip(predictors, layout.clusters)
        ]
        s = np.concatenate(parts)
        s[-1] = np.nan
        return s
    if isinstance(layout, NetworkLayout):
        stats = (
            layout.statistics
            if layout.statistics is not None
            else network_statistics(layout.adjacency, layout.x)
        )
        xc = np.column_stack([_as_matrix(layout.x), stats])
        s = _absolute_residuals(layout.y, _predict(transform.predictor, xc))
        s[-1] = np.nan
        return s
    raise TypeError(f"scores_from does not support {type(layout)}")


# ---------------------------------------------------------------------------
# projections
# ---------------------------------------------------------------------------

TEST_COVARIATE = "test_covariate"
COVARIATE_PAIR = "covariate_pair"


@dataclass(frozen=True)
class UserProjection:
    """User-supplied per-slot embedding of the observable covariates."""

    fn: Callable[[np.ndarray], np.ndarray]


Projection = Union[str, UserProjection]


def _slot_covariates(layout: Layout) -> np.ndarray:
    """Per-slot observable covariate rows, in slot order."""
    if isinstance(layout, FlatLayout):
        return _as_matrix(layout.x)
    if isinstance(layout, HierarchicalLayout):
        return np.vstack([_as_matrix(x) for x, _ in layout.clusters])
    if isinstance(layout, NetworkLayout):
        stats = (
            layout.statistics
            if layout.statistics is not None
            else network_statistics(layout.adjacency, layout.x)
        )
        return np.column_stack([_as_matrix(layout.x), stats])
    if isinstance(layout, CrtLayout):
        rows = []
        for c in layout.clusters:
            xm = _as_matrix(c.x)
            rows.append(np.column_stack([xm, np.full(len(xm), c.covariate)]))
        return np.vstack(rows)
    raise TypeError(f"unsupported layout {type(layout)}")


def _apply_projection(covariates: np.ndarray, eta: Projection, layout: Layout) -> np.ndarray:
    if isinstance(eta, UserProjection):
        rows = [np.atleast_1d(np.asarray(eta.fn(row), dtype=float)) for row in covariates]
        return np.vstack(rows)
    if eta == TEST_COVARIATE:
        if isinstance(layout, (NetworkLayout, CrtLayout)):
            # x columns come first; drop the appended statistics / C column
            n_stat = 1 if isinstance(layout, CrtLayout) else (
                covariates.shape[1] - _as_matrix(layout.x).shape[1]
            )
            return covariates[:, : covariates.shape[1] - n_stat]
        return covariates
    if eta == COVARIATE_PAIR:
        if not isinstance(layout, (NetworkLayout, CrtLayout)):
            raise DataError("covariate-pair projection needs a CRT or network layout")
        return covariates
    raise DataError(f"unknown projection {eta!r}")


def project(layout: Layout, eta: Projection) -> tuple[np.ndarray, np.ndarray]:
    """Projected features for every orbit slot and for the target slot."""
    features = _apply_projection(_slot_covariates(layout), eta, layout)
    if isinstance(layout, CrtLayout):
        m, n = layout.target
        offset = sum(len(c.x) for c in layout.clusters[:m])
        target = features[offset + n]
    else:
        target = features[-1]
    return features, target


# ---------------------------------------------------------------------------
# orbit problems
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class OrbitProblem:
    """Weighted (feature, score) pairs from collapsing a group orbit.

    ``scores[test_index]`` is symbolic (nan): the unknown target score enters
    the fit as a parameter, which is what lets the dual search reuse one
    problem for every candidate response.
    """

    features: np.ndarray  # (n_slots, q)
    scores: np.ndarray  # (n_slots,), nan exactly at test_index
    weights: np.ndarray  # (n_slots,), strictly positive, sums to 1
    alpha: float
    test_index: int

    def __post_init__(self):
        f, s, w = map(np.asarray, (self.features, self.scores, self.weights))
        if not (len(f) == len(s) == len(w)):
            raise DataError("features, scores, weights must have equal length")
        if not 0 <= self.test_index < len(s):
            raise DataError("test_index out of range")
        if not 0 < self.alpha < 1:
            raise DataError("alpha must lie in (0, 1)")
        if np.any(w <= 0):
            raise DataError("weights must be strictly positive")
        if abs(float(w.sum()) - 1.0) > 1e-12:
            raise DataError("weights must sum to 1")
        observed = np.delete(s, self.test_index)
        if not np.all(np.isfinite(observed)):
            raise DataError("observed scores must be finite")
        if np.isfinite(s[self.test_index]):
            raise DataError("the target score must stay symbolic (nan)")

    @property
    def n_slots(self) -> int:
        return len(self.scores)

    def fixed_scores(self) -> np.ndarray:
        return np.delete(np.asarray(self.scores, dtype=float), self.test_index)

    def with_test_score(self, s_test: float) -> np.ndarray:
        s = np.asarray(self.scores, dtype=float).copy()
        s[self.test_index] = s_test
        return s

    @property
    def test_feature(self) -> np.ndarray:
        return np.asarray(self.features)[self.test_index]


def _hierarchical_weights(sizes: Sequence[int]) -> np.ndarray:
    K = len(sizes)
    return np.concatenate([np.full(n, 1.0 / (K * n)) for n in sizes])


def build_orbit_problem(
    layout: Layout,
    transform: ScoreTransform,
    eta: Projection,
    alpha: float,
    crt_level: str = "individual",
) -> OrbitProblem:
    """Collapse the layout's symmetry orbit into a weighted problem.

    Flat and network layouts get n+1 uniform slots; hierarchical layouts get
    slot weights 1/(K n_i); CRT layouts use only opposite-arm clusters plus
    the target as its own singleton slot.
    """
    if isinstance(layout, (FlatLayout, NetworkLayout)):
        features, _ = project(layout, eta)
        scores = scores_from(layout, transform)
        n = len(scores)
        weights = np.full(n, 1.0 / n)
        return OrbitProblem(features, scores, weights, alpha, test_index=n - 1)

    if isinstance(layout, HierarchicalLayout):
        features, _ = project(layout, eta)
        scores = scores_from(layout, transform)
        weights = _hierarchical_weights(layout.sizes)
        return OrbitProblem(features, scores, weights, alpha, test_index=len(scores) - 1)

    if isinstance(layout, CrtLayout):
        return _build_crt_problem(layout, transform, eta, alpha, crt_level)

    raise TypeError(f"unsupported layout {type(layout)}")


def _build_crt_problem(
    layout: CrtLayout,
    transform: ScoreTransform,
    eta: Projection,
    alpha: float,
    level: str,
) -> OrbitProblem:
    m, n = layout.target
    a_star = 1 - layout.clusters[m].arm
    source = layout.opposite_arm_clusters()
    if not source:
        raise DataError("no clusters received the counterfactual arm")
    mu = transform.predictor_for_arm(a_star)

    def xc(cluster: CrtCluster) -> np.ndarray:
        xm = _as_matrix(cluster.x)
        return np.column_stack([xm, np.full(len(xm), cluster.covariate)])

    target_cluster = layout.clusters[m]
    target_row = xc(target_cluster)[n : n + 1]

    if level == "individual":
        feats, scores, weights = [], [], []
        for i in source:
            c = layout.clusters[i]
            rows = xc(c)
            s = _absolute_residuals(c.y_observed, _predict(mu, rows))
            feats.append(rows)
            scores.append(s)
            weights.append(np.full(len(rows), 1.0 / ((len(source) + 1) * len(rows))))
        feats.append(target_row)
        scores.append(np.array([np.nan]))
        weights.append(np.array([1.0 / (len(source) + 1)]))
    elif level == "cluster":
        feats, scores, weights = [], [], []
        for i in source:
            c = layout.clusters[i]
            row = np.concatenate([_as_matrix(c.x).mean(axis=0), [c.covariate]])
            s = abs(float(np.mean(c.y_observed)) - float(_predict(mu, row[None, :])[0]))
            feats.append(row[None, :])
            scores.append(np.array([s]))
            weights.append(np.array([1.0 / (len(source) + 1)]))
        trow = np.concatenate(
            [_as_matrix(target_cluster.x).mean(axis=0), [target_cluster.covariate]]
        )
        feats.append(trow[None, :])
        scores.append(np.array([np.nan]))
        weights.append(np.array([1.0 / (len(source) + 1)]))
    else:
        raise DataError(f"unknown CRT level {level!r}")

    features = np.vstack(feats)
    features = _apply_projection(features, eta, layout)
    scores_v = np.concatenate(scores)
    weights_v = np.concatenate(weights)
    weights_v = weights_v / weights_v.sum()  # exact renormalization
    return OrbitProblem(
        features, scores_v, weights_v, alpha, test_index=len(scores_v) - 1
    )
