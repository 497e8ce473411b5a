"""Turn-key prediction-interval pipelines.

Wraps the projected region builder for the shipped data settings:
exchangeable (x, y) pairs, two-layer hierarchical data with per-cluster
predictors, cluster randomized trials (individual- and cluster-level
treatment effects), and network-assisted regression with label-equivariant
node statistics.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .layouts import (
    COVARIATE_PAIR,
    TEST_COVARIATE,
    CrtLayout,
    DataError,
    FlatLayout,
    HierarchicalLayout,
    NetworkLayout,
    Projection,
    ScoreTransform,
    network_statistics,
)
from .regions import ModelClass, PredictionInterval, projected_region

__all__ = [
    "CrtEffectInterval",
    "split_conditional",
    "hierarchical_interval",
    "crt_individual_effect",
    "crt_cluster_effect",
    "network_interval",
]


def split_conditional(
    layout: FlatLayout,
    predictor: Callable,
    model_class: ModelClass,
    alpha: float,
    eps: float = 1e-4,
    eta: Projection = TEST_COVARIATE,
    method: str = "CSymmPI",
) -> PredictionInterval:
    """Adaptive split-calibrated interval for the last response."""
    transform = ScoreTransform(predictor)
    return projected_region(layout, transform, eta, model_class, alpha, eps, method)


def hierarchical_interval(
    layout: HierarchicalLayout,
    predictor: Union[Callable, Sequence[Callable]],
    model_class: ModelClass,
    alpha: float,
    eps: float = 1e-4,
    method: str = "CSymmPI",
) -> PredictionInterval:
    """Interval for the last individual of the last cluster.

    ``predictor`` may be a single pooled model or one model per cluster (the
    target cluster's model centers the interval).
    """
    transform = ScoreTransform(_per_cluster(predictor, len(layout.clusters)))
    return projected_region(
        layout, transform, TEST_COVARIATE, model_class, alpha, eps, method
    )


def _per_cluster(predictor, n_clusters: int):
    if callable(predictor):
        return predictor
    predictors = list(predictor)
    if len(predictors) != n_clusters:
        raise DataError("need one predictor per cluster")
    return tuple(predictors)


@dataclass(frozen=True)
class CrtEffectInterval:
    """Treatment-effect interval with its counterfactual companion.

    The effect interval is the counterfactual interval shifted or reflected
    by the observed outcome, so the two always share a width.
    """

    target: tuple
    observed_arm: int
    interval: PredictionInterval
    counterfactual_interval: PredictionInterval


def _effect_from_counterfactual(
    counterfactual: PredictionInterval,
    y_observed: float,
    observed_arm: int,
    method: str,
) -> PredictionInterval:
    if observed_arm == 0:
        lo, hi = counterfactual.lo - y_observed, counterfactual.hi - y_observed
        center = counterfactual.center - y_observed
    else:
        lo, hi = y_observed - counterfactual.hi, y_observed - counterfactual.lo
        center = y_observed - counterfactual.center
    return PredictionInterval(
        lo=lo,
        hi=hi,
        threshold=counterfactual.threshold,
        center=center,
        method=method,
        alpha=counterfactual.alpha,
        diagnostics=dict(counterfactual.diagnostics),
    )


def _crt_effect(
    layout: CrtLayout,
    predictors: tuple[Callable, Callable],
    model_class: ModelClass,
    alpha: float,
    eps: float,
    level: str,
    method: str,
) -> CrtEffectInterval:
    transform = ScoreTransform(tuple(predictors))
    counterfactual = projected_region(
        layout,
        transform,
        COVARIATE_PAIR,
        model_class,
        alpha,
        eps,
        method=f"{method}-counterfactual",
        crt_level=level,
    )
    m, n = layout.target
    cluster = layout.clusters[m]
    if level == "individual":
        y_obs = float(cluster.y_observed[n])
    else:
        y_obs = float(np.mean(cluster.y_observed))
    effect = _effect_from_counterfactual(counterfactual, y_obs, cluster.arm, method)
    return CrtEffectInterval(
        target=layout.target if level == "individual" else (m,),
        observed_arm=cluster.arm,
        interval=effect,
        counterfactual_interval=counterfactual,
    )


def crt_individual_effect(
    layout: CrtLayout,
    predictors: tuple[Callable, Callable],
    model_class: ModelClass,
    alpha: float,
    eps: float = 1e-4,
    method: str = "CSymmPI",
) -> CrtEffectInterval:
    """Interval for the individual treatment effect of the target subject.

    Scores come from opposite-arm clusters only; the unobserved potential
    outcome is bracketed first and the effect interval follows by the
    arm-dependent shift or reflection.
    """
    return _crt_effect(layout, predictors, model_class, alpha, eps, "individual", method)


def crt_cluster_effect(
    layout: CrtLayout,
    predictors: tuple[Callable, Callable],
    model_class: ModelClass,
    alpha: float,
    eps: float = 1e-4,
    method: str = "CSymmPI",
) -> CrtEffectInterval:
    """Cluster-average treatment-effect interval (one slot per cluster)."""
    return _crt_effect(layout, predictors, model_class, alpha, eps, "cluster", method)


def network_interval(
    layout: NetworkLayout,
    predictor: Callable,
    model_class: ModelClass,
    alpha: float,
    eps: float = 1e-4,
    statistics_builder: Optional[Callable] = None,
    method: str = "CSymmPI",
) -> PredictionInterval:
    """Interval for the last node's response using (x, C) features.

    ``statistics_builder(adjacency, x)`` must be label-equivariant: permuting
    the node labels must permute the statistics the same way.
    """
    if layout.statistics is None:
        builder = statistics_builder or network_statistics
        layout = NetworkLayout(
            adjacency=layout.adjacency,
            x=layout.x,
            y=layout.y,
            statistics=builder(layout.adjacency, layout.x),
        )
    transform = ScoreTransform(predictor)
    return projected_region(
        layout, transform, COVARIATE_PAIR, model_class, alpha, eps, method
    )
