"""Prediction-interval assembly for absolute-residual scores.

Builds the fixed-threshold baseline region, the adaptive-threshold region
(via dual bisection), the projected variant that conditions on an embedding
of the observation, and the sampled variant that replaces the exact orbit
collapse with Monte Carlo group draws.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np

from .duality import (
    DualProblem,
    KernelQuadratic,
    ZeroConjugate,
    threshold_by_bisection,
)
from .groups import GroupSpec, haar_sample, target_source_index
from .layouts import (
    CrtLayout,
    DataError,
    FlatLayout,
    HierarchicalLayout,
    Layout,
    NetworkLayout,
    OrbitProblem,
    Projection,
    ScoreTransform,
    _as_matrix,
    _predict,
    _slot_covariates,
    build_orbit_problem,
    project,
    scores_from,
)
from .pinball import KernelSpec, augmented_quantile, gram_with_jitter

__all__ = [
    "ConstantClass",
    "LinearClass",
    "KernelClass",
    "ModelClass",
    "PredictionInterval",
    "symmpi_region",
    "csymmpi_region",
    "projected_region",
    "sampled_region",
    "dual_problem_for",
]


@dataclass(frozen=True)
class ConstantClass:
    """Single fixed threshold: the weighted-quantile baseline."""


@dataclass(frozen=True)
class LinearClass:
    """Threshold linear in a feature map of the projected observation.

    The region search treats the parameter ball as unbounded; a finite
    ``b_theta`` constrains standalone fits only.
    """

    feature_map: object
    b_theta: float = math.inf


@dataclass(frozen=True)
class KernelClass:
    """RKHS threshold with quadratic penalty lambda_reg * ||t||_K^2."""

    kernel: KernelSpec
    lambda_reg: float
    M: float = math.inf


ModelClass = Union[ConstantClass, LinearClass, KernelClass]


@dataclass(frozen=True)
class PredictionInterval:
    lo: float
    hi: float
    threshold: float
    center: float
    method: str
    alpha: float
    diagnostics: dict = field(default_factory=dict)

    @property
    def length(self) -> float:
        return self.hi - self.lo

    def covers(self, y: float) -> bool:
        return self.lo <= y <= self.hi


def _interval(center, threshold, method, alpha, diagnostics) -> PredictionInterval:
    if math.isinf(threshold):
        return PredictionInterval(
            -math.inf, math.inf, math.inf, center, method, alpha, diagnostics
        )
    return PredictionInterval(
        center - threshold, center + threshold, threshold, center, method, alpha, diagnostics
    )


def symmpi_region(
    problem: OrbitProblem, center: float, method: str = "SymmPI"
) -> PredictionInterval:
    """Fixed-threshold region from the augmented weighted quantile.

    The threshold is the exact fixed point of s -> weighted quantile of the
    scores with s substituted at the test slot, computed by the
    order-statistic rule rather than by iteration.
    """
    w = np.asarray(problem.weights, dtype=float)
    threshold = augmented_quantile(
        problem.fixed_scores(),
        np.delete(w, problem.test_index),
        float(w[problem.test_index]),
        problem.alpha,
    )
    return _interval(center, threshold, method, problem.alpha, {"exact": True})


def dual_problem_for(problem: OrbitProblem, model_class: ModelClass) -> DualProblem:
    """Dual problem whose test coordinate tracks the symbolic score."""
    if isinstance(model_class, LinearClass):
        phi = np.asarray(model_class.feature_map(problem.features), dtype=float)
        conjugate = ZeroConjugate(features=phi)
    elif isinstance(model_class, KernelClass):
        gram = gram_with_jitter(model_class.kernel, problem.features)
        conjugate = KernelQuadratic(gram=gram, lambda_reg=model_class.lambda_reg)
    else:
        raise TypeError(f"no dual route for {type(model_class)}")
    return DualProblem(
        weights=np.asarray(problem.weights, dtype=float),
        fixed_scores=problem.fixed_scores(),
        alpha=problem.alpha,
        conjugate=conjugate,
        test_slot=problem.test_index,
    )


def csymmpi_region(
    problem: OrbitProblem,
    model_class: ModelClass,
    center: float,
    eps: float = 1e-4,
    method: str = "CSymmPI",
) -> PredictionInterval:
    """Adaptive-threshold region {y : s(y) <= s*} as a closed interval.

    The boundary s* comes from binary search on the dual coordinate; the
    constant class collapses to the exact quantile rule.
    """
    if isinstance(model_class, ConstantClass):
        return symmpi_region(problem, center, method=method)
    dual = dual_problem_for(problem, model_class)
    res = threshold_by_bisection(dual, eps=eps)
    diagnostics = {"status": res.status, "dual_solves": res.iterations}
    diagnostics.update(res.diagnostics)
    if res.status == "unbounded":
        return _interval(center, math.inf, method, problem.alpha, diagnostics)
    if res.status == "empty":
        diagnostics["empty"] = True
        return _interval(center, 0.0, method, problem.alpha, diagnostics)
    return _interval(center, res.s_star, method, problem.alpha, diagnostics)


def _target_center(layout: Layout, transform: ScoreTransform, crt_level: str) -> float:
    if isinstance(layout, (FlatLayout, HierarchicalLayout, NetworkLayout)):
        covs = _slot_covariates(layout)
        mu = transform.predictor
        return float(_predict(mu, covs[-1:])[0])
    if isinstance(layout, CrtLayout):
        m, n = layout.target
        cluster = layout.clusters[m]
        mu = transform.predictor_for_arm(1 - cluster.arm)
        if crt_level == "individual":
            row = np.concatenate([_as_matrix(cluster.x)[n], [cluster.covariate]])
        else:
            row = np.concatenate(
                [_as_matrix(cluster.x).mean(axis=0), [cluster.covariate]]
            )
        return float(_predict(mu, row[None, :])[0])
    raise TypeError(f"unsupported layout {type(layout)}")


def projected_region(
    layout: Layout,
    transform: ScoreTransform,
    eta: Projection,
    model_class: ModelClass,
    alpha: float,
    eps: float = 1e-4,
    method: str = "CSymmPI",
    crt_level: str = "individual",
) -> PredictionInterval:
    """Region conditioned on the projection eta of the observed data."""
    problem = build_orbit_problem(layout, transform, eta, alpha, crt_level=crt_level)
    center = _target_center(layout, transform, crt_level)
    return csymmpi_region(problem, model_class, center, eps=eps, method=method)


def sampled_region(
    layout: Layout,
    transform: ScoreTransform,
    eta: Projection,
    model_class: ModelClass,
    group: GroupSpec,
    n_draws: int,
    rng: np.random.Generator,
    alpha: float,
    eps: float = 1e-4,
    method: str = "CSymmPI-sampled",
) -> PredictionInterval:
    """Monte Carlo variant: slots from Haar draws instead of the full orbit.

    Each draw contributes the (feature, score) pair it moves into the target
    slot, at weight 1/(N+1); one explicit test slot is always appended, and
    draws that map the target to itself merge into it (identical feature and
    symbolic score, so pooling their weight is exact).
    """
    if n_draws < 1:
        raise ValueError("need at least one group draw")
    if isinstance(layout, CrtLayout):
        raise DataError("sampled regions are not defined for CRT layouts")
    features, target_feature = project(layout, eta)
    scores = scores_from(layout, transform)
    target = len(scores) - 1
    if group.degree != len(scores):
        raise DataError("group degree must match the number of layout slots")

    draws = haar_sample(group, rng, n_draws)
    sources = [target_source_index(g) for g in draws]
    slot_idx = [i for i in sources if i != target]
    hits = n_draws - len(slot_idx)

    feats = np.vstack([features[slot_idx], target_feature[None, :]])
    slot_scores = np.concatenate([scores[slot_idx], [np.nan]])
    weights = np.full(len(slot_scores), 1.0 / (n_draws + 1))
    weights[-1] = (1.0 + hits) / (n_draws + 1)
    problem = OrbitProblem(
        feats, slot_scores, weights, alpha, test_index=len(slot_scores) - 1
    )
    center = _target_center(layout, transform, crt_level="individual")
    return csymmpi_region(problem, model_class, center, eps=eps, method=method)
