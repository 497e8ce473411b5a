"""Dual of regularized weighted pinball regression and region recovery.

The dual maximizes (w ⊙ λ)ᵀ s − R*(w ⊙ λ) over the box −α ≤ λ ≤ 1−α.  The
test-slot coordinate λ_n(s_n) is monotone in the unknown score, which makes
the prediction region an interval recoverable by binary search on the
condition λ_n(s) < 1−α.

Conjugates shipped: R ≡ 0 over a span of features (value 0 when the dual
vector is orthogonal to the span, +inf otherwise) and the RKHS quadratic,
R*(a) = aᵀ K a / (4 λ_reg).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Optional, Union

import numpy as np
from scipy.optimize import linprog

from .pinball import SolverError, pinball_loss, weighted_quantile

__all__ = [
    "ZeroConjugate",
    "KernelQuadratic",
    "DualProblem",
    "DualSolution",
    "BisectionResult",
    "solve_dual",
    "lambda_test_curve",
    "threshold_by_bisection",
    "solve_kernel_box_qp",
]

_BOUND_TOL = 1e-9  # slack below 1-alpha that still counts as interior
_KKT_TOL = 1e-7


# ---------------------------------------------------------------------------
# conjugates
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class ZeroConjugate:
    """Fenchel conjugate of R ≡ 0 restricted to a span of features.

    ``features`` is the (n, d) matrix of the threshold class evaluated at the
    slots: the conjugate is 0 on {a : featuresᵀ a = 0} and +inf elsewhere.
    ``features=None`` means no compatibility constraint at all (R* ≡ 0), a
    degenerate case kept for box-LP sanity checks.
    """

    features: Optional[np.ndarray] = None

    @property
    def is_constant_class(self) -> bool:
        f = self.features
        return f is not None and f.shape[1] == 1 and np.ptp(f[:, 0]) == 0.0


@dataclass(frozen=True)
class KernelQuadratic:
    """R*(a) = aᵀ K a / (4 λ_reg) for the RKHS penalty λ_reg ||t||_K²."""

    gram: np.ndarray
    lambda_reg: float

    def value(self, a: np.ndarray) -> float:
        return float(a @ self.gram @ a) / (4.0 * self.lambda_reg)


Conjugate = Union[ZeroConjugate, KernelQuadratic]


@dataclass(frozen=True)
class DualProblem:
    """Weighted dual with one symbolic score coordinate at ``test_slot``."""

    weights: np.ndarray
    fixed_scores: np.ndarray  # length n-1
    alpha: float
    conjugate: Conjugate
    test_slot: int

    def __post_init__(self):
        if len(self.weights) != len(self.fixed_scores) + 1:
            raise ValueError("weights must cover the fixed scores plus the test slot")
        if not 0 <= self.test_slot < len(self.weights):
            raise ValueError("test_slot out of range")

    def scores_with(self, s_test: float) -> np.ndarray:
        s = np.empty(len(self.weights))
        mask = np.ones(len(self.weights), dtype=bool)
        mask[self.test_slot] = False
        s[mask] = self.fixed_scores
        s[self.test_slot] = s_test
        return s


@dataclass(frozen=True)
class DualSolution:
    lambda_vec: np.ndarray
    objective: float
    lambda_test: float
    kkt_residual: float = 0.0
    iterations: int = 0
    gap: float = float("nan")


# ---------------------------------------------------------------------------
# kernel-quadratic box QP
# ---------------------------------------------------------------------------


def solve_kernel_box_qp(
    K: np.ndarray,
    w: np.ndarray,
    s: np.ndarray,
    alpha: float,
    lambda_reg: float,
    warm: Optional[np.ndarray] = None,
    max_sweeps: int = 4000,
) -> tuple[np.ndarray, dict]:
    """Maximize bᵀλ − ½ λᵀHλ over the box, b = w⊙s, H = diag(w) K diag(w) / (2 λ_reg).

    Cyclic coordinate ascent with exact per-coordinate maximization (the
    SMO-style workhorse for kernel box duals; robust to the rank-deficient
    Gram matrices Gaussian kernels produce), with a periodic Newton solve on
    the free block to finish.  Exits on a duality-gap criterion and raises
    SolverError past the sweep cap.
    """
    n = len(w)
    lo, hi = -alpha, 1.0 - alpha
    W = np.asarray(w, dtype=float)
    b = W * s
    H = (W[:, None] * K * W[None, :]) / (2.0 * lambda_reg)
    diag = np.diag(H).copy()
    if np.any(diag <= 0):
        raise SolverError("dual Hessian has a non-positive diagonal entry")

    lam = np.clip(warm.copy() if warm is not None else np.zeros(n), lo, hi)
    hlam = H @ lam

    def objective(x: np.ndarray) -> float:
        return float(b @ x - 0.5 * x @ (H @ x))

    def primal_value(x: np.ndarray) -> float:
        c = (W * x) / (2.0 * lambda_reg)
        t = K @ c
        return float(np.sum(W * pinball_loss(t, s, alpha)) + lambda_reg * (c @ t))

    scale = 1.0 + float(np.max(np.abs(b)))
    gap = math.inf
    kkt = math.inf
    for sweep in range(1, max_sweeps + 1):
        for i in range(n):
            g = b[i] - hlam[i]
            new = lam[i] + g / diag[i]
            new = lo if new < lo else (hi if new > hi else new)
            d = new - lam[i]
            if d != 0.0:
                hlam += H[:, i] * d
                lam[i] = new
        if sweep % 5 != 0:
            continue
        grad = b - hlam
        free = ~(((lam <= lo) & (grad < 0)) | ((lam >= hi) & (grad > 0)))
        n_free = int(np.sum(free))
        if 0 < n_free <= 600:
            hff = H[np.ix_(free, free)]
            ridge = 1e-13 * (np.trace(hff) + 1.0)
            try:
                delta = np.linalg.solve(hff + ridge * np.eye(n_free), grad[free])
            except np.linalg.LinAlgError:
                delta = np.linalg.lstsq(hff, grad[free], rcond=None)[0]
            base = objective(lam)
            step = 1.0
            for _ in range(10):
                cand = lam.copy()
                cand[free] = np.clip(lam[free] + step * delta, lo, hi)
                if objective(cand) >= base:
                    lam = cand
                    hlam = H @ lam
                    break
                step *= 0.5
            grad = b - hlam
        kkt = float(np.max(np.abs(lam - np.clip(lam + grad, lo, hi))))
        dual = objective(lam)
        gap = primal_value(lam) - dual
        if gap <= 1e-8 * (1.0 + abs(dual)) or kkt <= 1e-12 * scale:
            return lam, {"iterations": sweep, "gap": gap, "kkt_residual": kkt}
    if kkt > _KKT_TOL * scale and gap > 1e-6 * (1.0 + abs(objective(lam))):
        raise SolverError(
            f"box QP did not converge: kkt={kkt:.2e}, gap={gap:.2e} after {max_sweeps} sweeps"
        )
    return lam, {"iterations": max_sweeps, "gap": gap, "kkt_residual": kkt}


# ---------------------------------------------------------------------------
# zero-conjugate exact paths
# ---------------------------------------------------------------------------


def _solve_zero_unconstrained(problem: DualProblem, s: np.ndarray) -> DualSolution:
    # separable box LP: each coordinate sits at the bound matching sign(w s)
    alpha = problem.alpha
    ws = problem.weights * s
    lam = np.where(ws > 0, 1.0 - alpha, np.where(ws < 0, -alpha, 0.0))
    return DualSolution(
        lambda_vec=lam,
        objective=float(ws @ lam),
        lambda_test=float(lam[problem.test_slot]),
    )


def _solve_zero_constant(problem: DualProblem, s: np.ndarray) -> DualSolution:
    """Exact sorting-based solution for the constant class.

    λ_i = 1-α above the weighted quantile, -α below; tied coordinates share
    the balance needed for Σ w⊙λ = 0, with the test coordinate taking the
    smallest consistent value (this pins the closed region boundary).
    """
    alpha = problem.alpha
    w = np.asarray(problem.weights, dtype=float)
    t_hat = weighted_quantile(s, w, alpha)
    above = s > t_hat
    below = s < t_hat
    tied = ~(above | below)
    lam = np.where(above, 1.0 - alpha, -alpha).astype(float)
    need = -(float(w[above].sum()) * (1.0 - alpha) - float(w[below].sum()) * alpha)
    # distribute `need` over tied coordinates starting from -α, raising the
    # non-test ties first so the test coordinate stays minimal
    tie_idx = np.flatnonzero(tied)
    lam[tie_idx] = -alpha
    budget = need + alpha * float(w[tie_idx].sum())  # total rise above -α
    order = [i for i in tie_idx if i != problem.test_slot] + (
        [problem.test_slot] if tied[problem.test_slot] else []
    )
    for i in order:
        rise = min(budget / w[i], 1.0) if w[i] > 0 else 0.0
        rise = max(rise, 0.0)
        lam[i] = -alpha + rise
        budget -= rise * w[i]
    obj = float((w * lam) @ s)
    return DualSolution(
        lambda_vec=lam,
        objective=obj,
        lambda_test=float(lam[problem.test_slot]),
    )


def _zero_lp_value(
    phi: np.ndarray, w: np.ndarray, s: np.ndarray, alpha: float
) -> tuple[float, np.ndarray]:
    n = len(w)
    cost = -(w * s)
    a_eq = phi.T * w[None, :]
    res = linprog(
        cost,
        A_eq=a_eq,
        b_eq=np.zeros(phi.shape[1]),
        bounds=[(-alpha, 1.0 - alpha)] * n,
        method="highs-ds",
    )
    if not res.success:
        raise SolverError(f"zero-conjugate dual LP failed: {res.message}")
    return -float(res.fun), res.x


def _solve_zero_span(problem: DualProblem, s: np.ndarray) -> DualSolution:
    """LP dual over a general feature span.

    The reported λ_test is a symmetric finite difference of the optimal value
    in the test score, which is a monotone selection by convexity even where
    the LP vertex is not unique.
    """
    phi = np.asarray(problem.conjugate.features, dtype=float)
    w = np.asarray(problem.weights, dtype=float)
    alpha = problem.alpha
    value, lam = _zero_lp_value(phi, w, s, alpha)
    scale = 1.0 + float(np.max(np.abs(s), initial=0.0))
    h = 1e-6 * scale
    wt = w[problem.test_slot]
    s_hi = s.copy()
    s_hi[problem.test_slot] += h
    s_lo = s.copy()
    s_lo[problem.test_slot] -= h
    v_hi, _ = _zero_lp_value(phi, w, s_hi, alpha)
    v_lo, _ = _zero_lp_value(phi, w, s_lo, alpha)
    lam_test = float(np.clip((v_hi - v_lo) / (2.0 * h * wt), -alpha, 1.0 - alpha))
    return DualSolution(lambda_vec=lam, objective=value, lambda_test=lam_test)


# ---------------------------------------------------------------------------
# public API
# ---------------------------------------------------------------------------


def solve_dual(
    problem: DualProblem, s_test: float, warm: Optional[np.ndarray] = None
) -> DualSolution:
    """Maximize the box-constrained dual with the test score substituted."""
    s = problem.scores_with(s_test)
    conj = problem.conjugate
    if isinstance(conj, KernelQuadratic):
        lam, diag = solve_kernel_box_qp(
            conj.gram, problem.weights, s, problem.alpha, conj.lambda_reg, warm=warm
        )
        obj = float((problem.weights * lam) @ s) - conj.value(problem.weights * lam)
        return DualSolution(
            lambda_vec=lam,
            objective=obj,
            lambda_test=float(lam[problem.test_slot]),
            kkt_residual=diag["kkt_residual"],
            iterations=diag["iterations"],
            gap=diag["gap"],
        )
    if isinstance(conj, ZeroConjugate):
        if conj.features is None:
            return _solve_zero_unconstrained(problem, s)
        if conj.is_constant_class:
            return _solve_zero_constant(problem, s)
        return _solve_zero_span(problem, s)
    raise TypeError(f"unsupported conjugate {type(conj)}")


def lambda_test_curve(problem: DualProblem, s_grid) -> np.ndarray:
    """λ_test along an ascending grid of candidate test scores."""
    out = np.empty(len(s_grid))
    warm = None
    for i, s in enumerate(s_grid):
        sol = solve_dual(problem, float(s), warm=warm)
        out[i] = sol.lambda_test
        warm = sol.lambda_vec
    return out


@dataclass(frozen=True)
class BisectionResult:
    s_star: float
    status: str  # "bounded" | "unbounded" | "empty"
    iterations: int
    diagnostics: dict = field(default_factory=dict)


def threshold_by_bisection(
    problem: DualProblem,
    eps: float = 1e-4,
    s_lo: float = 0.0,
    s_hi: Optional[float] = None,
    max_doublings: int = 60,
) -> BisectionResult:
    """Binary search for s* = sup{s : λ_test(s) < 1 − α}.

    The score axis is bracketed from below at ``s_lo`` (0 for nonnegative
    residual scores) and from above by doubling until the dual coordinate
    saturates; failure to saturate after ``max_doublings`` reports an
    unbounded region.
    """
    if eps <= 0:
        raise ValueError("eps must be positive")
    alpha = problem.alpha
    warm = None
    solves = 0

    def member(s: float) -> bool:
        nonlocal warm, solves
        sol = solve_dual(problem, s, warm=warm)
        warm = sol.lambda_vec
        solves += 1
        return sol.lambda_test < (1.0 - alpha) - _BOUND_TOL

    if not member(s_lo):
        return BisectionResult(
            s_star=s_lo,
            status="empty",
            iterations=solves,
            diagnostics={"lambda_at_lo": 1.0 - alpha},
        )

    if s_hi is None:
        base = float(np.max(problem.fixed_scores, initial=0.0))
        s_hi = 2.0 * base + 1.0
    doubles = 0
    while member(s_hi):
        doubles += 1
        if doubles > max_doublings:
            return BisectionResult(
                s_star=math.inf,
                status="unbounded",
                iterations=solves,
                diagnostics={"doublings": doubles},
            )
        s_hi *= 2.0

    lo, hi = s_lo, s_hi
    while hi - lo > eps:
        mid = 0.5 * (lo + hi)
        if member(mid):
            lo = mid
        else:
            hi = mid
    final = solve_dual(problem, lo, warm=warm)
    return BisectionResult(
        s_star=lo,
        status="bounded",
        iterations=solves,
        diagnostics={
            "doublings": doubles,
            "bracket": hi - lo,
            "lambda_at_boundary": final.lambda_test,
            "gap": final.gap,
        },
    )
