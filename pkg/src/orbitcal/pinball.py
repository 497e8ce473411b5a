"""Weighted pinball-loss quantile regression over constant, linear, and
RKHS threshold classes.

The constant class reduces to a weighted empirical quantile; the linear
class is solved exactly as a linear program (with a projected-subgradient
fallback when the parameter-norm ball binds); the kernel class is solved
through the box-constrained concave dual with primal recovery
c = (w ⊙ λ) / (2 λ_reg).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np
from scipy.optimize import linprog

from .layouts import DataError, OrbitProblem

__all__ = [
    "NumericError",
    "SolverError",
    "pinball_loss",
    "weighted_quantile",
    "augmented_quantile",
    "GaussianKernel",
    "LinearKernel",
    "PolynomialKernel",
    "KernelSpec",
    "ConstantModel",
    "LinearModel",
    "KernelModel",
    "ThresholdModel",
    "evaluate",
    "fit_constant",
    "fit_linear",
    "fit_kernel",
    "affine_features",
    "theorem_lambda",
    "gram_with_jitter",
]

# cumulative-weight comparisons tolerate float summation error; achievable
# cumulative weights differ by at least the smallest weight, which is far
# above this for any realistic slot count
_QUANTILE_TOL = 1e-9


class NumericError(RuntimeError):
    """Non-finite values or an indefinite Gram matrix."""


class SolverError(RuntimeError):
    """An iterative solver failed to reach its required tolerance."""


def pinball_loss(t, s, alpha: float):
    """alpha * max(t - s, 0) + (1 - alpha) * max(s - t, 0), elementwise."""
    t = np.asarray(t, dtype=float)
    s = np.asarray(s, dtype=float)
    return alpha * np.maximum(t - s, 0.0) + (1.0 - alpha) * np.maximum(s - t, 0.0)


def weighted_quantile(scores, weights, alpha: float) -> float:
    """Left-continuous weighted (1-alpha)-quantile.

    Returns inf{t : sum_i w_i 1{s_i <= t} >= (1-alpha) * sum_i w_i}; with
    uniform weights on n+1 points this is the ceil((1-alpha)(n+1))-th order
    statistic.
    """
    s = np.asarray(scores, dtype=float)
    w = np.asarray(weights, dtype=float)
    if s.size == 0:
        raise DataError("cannot take a quantile of an empty score set")
    if not np.all(np.isfinite(s)):
        raise DataError("scores must be finite")
    order = np.argsort(s, kind="stable")
    cum = np.cumsum(w[order])
    total = cum[-1]
    target = (1.0 - alpha) * total - _QUANTILE_TOL * total
    idx = int(np.searchsorted(cum, target, side="left"))
    idx = min(idx, len(s) - 1)
    return float(s[order[idx]])


def augmented_quantile(
    fixed_scores, fixed_weights, test_weight: float, alpha: float
) -> float:
    """Fixed point of s -> weighted quantile of the scores augmented with a
    symbolic test score of weight ``test_weight``.

    Equals the weighted (1-alpha)-quantile with the test slot's score pushed
    to +inf; returns inf when even all fixed scores cannot reach level
    1-alpha (an unbounded region).
    """
    s = np.asarray(fixed_scores, dtype=float)
    w = np.asarray(fixed_weights, dtype=float)
    total = float(w.sum()) + float(test_weight)
    target = (1.0 - alpha) * total - _QUANTILE_TOL * total
    order = np.argsort(s, kind="stable")
    cum = np.cumsum(w[order])
    if cum.size == 0 or cum[-1] < target:
        return math.inf
    idx = int(np.searchsorted(cum, target, side="left"))
    return float(s[order[idx]])


# ---------------------------------------------------------------------------
# kernels
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianKernel:
    """k(a, b) = exp(-||a - b||^2 / (2 L^2)); bounded by 1."""

    length_scale: float

    @property
    def bound(self) -> float:
        return 1.0

    def cross(self, a: np.ndarray, b: np.ndarray) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        d2 = ((a[:, None, :] - b[None, :, :]) ** 2).sum(axis=2)
        return np.exp(-d2 / (2.0 * self.length_scale**2))

    def gram(self, a: np.ndarray) -> np.ndarray:
        return self.cross(a, a)


@dataclass(frozen=True)
class LinearKernel:
    """k(a, b) = <a, b>."""

    @property
    def bound(self) -> float:
        return math.inf

    def cross(self, a, b) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        return a @ b.T

    def gram(self, a) -> np.ndarray:
        return self.cross(a, a)


@dataclass(frozen=True)
class PolynomialKernel:
    """k(a, b) = (<a, b> + offset)^degree."""

    degree: int
    offset: float = 1.0

    @property
    def bound(self) -> float:
        return math.inf

    def cross(self, a, b) -> np.ndarray:
        a = np.atleast_2d(np.asarray(a, dtype=float))
        b = np.atleast_2d(np.asarray(b, dtype=float))
        return (a @ b.T + self.offset) ** self.degree

    def gram(self, a) -> np.ndarray:
        return self.cross(a, a)


KernelSpec = Union[GaussianKernel, LinearKernel, PolynomialKernel]


def gram_with_jitter(kernel: KernelSpec, features: np.ndarray) -> np.ndarray:
    """Gram matrix with a diagonal jitter when numerically indefinite."""
    K = kernel.gram(features)
    if not np.all(np.isfinite(K)):
        raise NumericError("Gram matrix has non-finite entries")
    n = K.shape[0]
    min_eig = float(np.linalg.eigvalsh(K)[0])
    if min_eig < 0.0:
        K = K + (1e-8 * np.trace(K) / n) * np.eye(n)
        min_eig = float(np.linalg.eigvalsh(K)[0])
        if min_eig < -1e-10 * max(1.0, float(np.trace(K)) / n):
            raise NumericError("Gram matrix not PSD even after jitter")
    return K


# ---------------------------------------------------------------------------
# threshold models
# ---------------------------------------------------------------------------


def affine_features(w: np.ndarray) -> np.ndarray:
    """Feature map (1, w_1, ..., w_q) applied row-wise."""
    w = np.atleast_2d(np.asarray(w, dtype=float))
    return np.column_stack([np.ones(len(w)), w])


@dataclass(frozen=True)
class ConstantModel:
    t: float

    def __call__(self, w) -> np.ndarray:
        w = np.atleast_2d(np.asarray(w, dtype=float))
        return np.full(len(w), self.t)


@dataclass(frozen=True)
class LinearModel:
    theta: np.ndarray
    feature_map: Callable[[np.ndarray], np.ndarray]
    b_theta: float
    b_phi: float = math.inf

    def __call__(self, w) -> np.ndarray:
        return np.asarray(self.feature_map(w), dtype=float) @ self.theta


@dataclass(frozen=True)
class KernelModel:
    coefficients: np.ndarray
    anchors: np.ndarray
    kernel: KernelSpec
    lambda_reg: float
    M: float = math.inf
    diagnostics: dict = field(default_factory=dict)

    def __call__(self, w) -> np.ndarray:
        return self.kernel.cross(np.atleast_2d(np.asarray(w, dtype=float)), self.anchors) @ self.coefficients


ThresholdModel = Union[ConstantModel, LinearModel, KernelModel]


def evaluate(model: ThresholdModel, w) -> Union[float, np.ndarray]:
    """Evaluate a fitted threshold at one feature row or a feature matrix."""
    w = np.asarray(w, dtype=float)
    single = w.ndim <= 1
    out = model(np.atleast_2d(w))
    return float(out[0]) if single else out


# ---------------------------------------------------------------------------
# fits
# ---------------------------------------------------------------------------


def fit_constant(problem: OrbitProblem, s_test: float) -> ConstantModel:
    """Weighted quantile of all scores with the test score substituted."""
    s = problem.with_test_score(s_test)
    return ConstantModel(weighted_quantile(s, problem.weights, problem.alpha))


def _linear_objective(theta, phi, s, w, alpha):
    return float(np.sum(w * pinball_loss(phi @ theta, s, alpha)))


def _project_ball(theta: np.ndarray, radius: float) -> np.ndarray:
    norm = float(np.linalg.norm(theta))
    if norm <= radius or not np.isfinite(norm):
        return theta
    return theta * (radius / norm)


def _linear_lp(phi, s, w, alpha):
    n, d = phi.shape
    cost = np.concatenate([np.zeros(d), (1.0 - alpha) * w, alpha * w])
    a_eq = np.hstack([phi, np.eye(n), -np.eye(n)])
    bounds = [(None, None)] * d + [(0, None)] * (2 * n)
    res = linprog(cost, A_eq=a_eq, b_eq=s, bounds=bounds, method="highs-ds")
    if not res.success:
        raise SolverError(f"pinball LP failed: {res.message}")
    return res.x[:d]


def _linear_subgradient(phi, s, w, alpha, b_theta, theta0, iters=20000):
    # projected subgradient with decreasing steps; used only when the norm
    # ball is active, where the LP solution is infeasible
    theta = _project_ball(theta0.copy(), b_theta)
    best = theta.copy()
    best_val = _linear_objective(theta, phi, s, w, alpha)
    scale = max(b_theta if np.isfinite(b_theta) else 1.0, 1.0)
    for k in range(1, iters + 1):
        r = phi @ theta - s
        grad_w = np.where(r > 0, alpha, np.where(r < 0, alpha - 1.0, 0.0)) * w
        g = phi.T @ grad_w
        gn = float(np.linalg.norm(g))
        if gn == 0.0:
            break
        theta = _project_ball(theta - (scale / math.sqrt(k)) * g / gn, b_theta)
        val = _linear_objective(theta, phi, s, w, alpha)
        if val < best_val:
            best_val, best = val, theta.copy()
    return best


def fit_linear(
    problem: OrbitProblem,
    s_test: float,
    feature_map: Callable[[np.ndarray], np.ndarray],
    b_theta: float = math.inf,
) -> LinearModel:
    """Exact LP solve of the weighted pinball objective over a linear class.

    The norm ball ||theta|| <= b_theta is checked after the unconstrained LP
    solve; when it binds, a projected-subgradient pass refines the projected
    solution (certified against an independent oracle in the tests).
    """
    phi = np.asarray(feature_map(problem.features), dtype=float)
    if phi.ndim != 2 or len(phi) != problem.n_slots:
        raise DataError("feature map must return one row per slot")
    d = phi.shape[1]
    if d > problem.n_slots:
        raise DataError("feature dimension exceeds the number of slots")
    if not np.all(np.isfinite(phi)):
        raise NumericError("feature map produced non-finite values")
    s = problem.with_test_score(s_test)
    w = np.asarray(problem.weights, dtype=float)

    theta = _linear_lp(phi, s, w, problem.alpha)
    if np.linalg.norm(theta) > b_theta + 1e-9:
        theta = _linear_subgradient(
            phi, s, w, problem.alpha, b_theta, theta0=theta
        )
        theta = _project_ball(theta, b_theta)
    b_phi = float(np.max(np.linalg.norm(phi, axis=1)))
    return LinearModel(theta=theta, feature_map=feature_map, b_theta=b_theta, b_phi=b_phi)


def theorem_lambda(n_distinct_slots: int) -> float:
    """Rate-optimal RKHS penalty preset 1/sqrt(#distinct orbit slots)."""
    return 1.0 / math.sqrt(n_distinct_slots)


def fit_kernel(
    problem: OrbitProblem,
    s_test: float,
    kernel: KernelSpec,
    lambda_reg: float,
    M: float = math.inf,
) -> KernelModel:
    """RKHS-penalized fit via the box-constrained concave dual.

    Strong duality holds for lambda_reg > 0 with M = inf; a finite M is
    enforced by rescaling the recovered coefficients, flagged approximate.
    """
    if not (lambda_reg > 0) and not np.isfinite(M):
        raise DataError("need lambda_reg > 0 or a finite RKHS-norm bound M")
    from .duality import solve_kernel_box_qp  # local import breaks the module cycle

    K = gram_with_jitter(kernel, problem.features)
    s = problem.with_test_score(s_test)
    w = np.asarray(problem.weights, dtype=float)
    lam, diag = solve_kernel_box_qp(K, w, s, problem.alpha, lambda_reg)
    c = (w * lam) / (2.0 * lambda_reg)
    diagnostics = dict(diag)
    if np.isfinite(M):
        norm2 = float(c @ K @ c)
        if norm2 > M * M:
            c = c * (M / math.sqrt(norm2))
            diagnostics["ball_rescaled"] = True
    return KernelModel(
        coefficients=c,
        anchors=np.asarray(problem.features, dtype=float),
        kernel=kernel,
        lambda_reg=lambda_reg,
        M=M,
        diagnostics=diagnostics,
    )
