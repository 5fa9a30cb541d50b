"""Node-potential parametrization of DAGs and its differentiable relaxation.

A graph is factored into a binary edge mask W and a real potential vector p:
the realized adjacency keeps W's edge i -> j only when p_i > p_j, which is
acyclic for any input.  The induced node ordering equals a permutation acting
on a fixed strictly-lower-triangular template, and that permutation is
relaxed to a doubly-stochastic transport plan (entropic normalization of
p o^T / t) so gradients can flow to p; the hard permutation is recovered by
maximum-weight assignment on the plan.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .errors import ConfigError, DataError, DegeneratePotentialError, NumericError

TIE_TOL = 1e-12


def _check_potentials(p: np.ndarray) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim != 1:
        raise DataError(f"potentials must be a vector, got shape {p.shape}")
    if not np.isfinite(p).all():
        raise NumericError("potentials contain non-finite values")
    if len(p) > 1:
        gaps = np.diff(np.sort(p))
        if gaps.min() <= TIE_TOL:
            raise DegeneratePotentialError(
                f"potentials contain ties within {TIE_TOL}; ordering is ambiguous"
            )
    return p


def grad_op(p: np.ndarray) -> np.ndarray:
    """Pairwise-difference matrix (i, j) -> p_i - p_j (skew-symmetric)."""
    p = np.asarray(p, dtype=np.float64)
    return p[:, None] - p[None, :]


def step(x: np.ndarray) -> np.ndarray:
    """Elementwise 1[x > 0] as float (0 at exactly 0, so diagonals vanish)."""
    return (np.asarray(x) > 0).astype(np.float64)


def _check_mask(W: np.ndarray, d: int) -> np.ndarray:
    W = np.asarray(W)
    if W.shape != (d, d):
        raise DataError(f"edge mask shape {W.shape} does not match d={d}")
    if not np.isin(W, (0, 1)).all():
        raise DataError("edge mask entries must be 0 or 1")
    return W.astype(np.float64)

def tau(W: np.ndarray, p: np.ndarray) -> np.ndarray:
    """Realize the DAG W * step(grad(p)); acyclic for every valid input."""
    p = _check_potentials(p)
    W = _check_mask(W, len(p))
    return (W * step(grad_op(p))).astype(np.int64)


def sort_permutation(p: np.ndarray) -> np.ndarray:
    """Permutation matrix assigning ascending ranks by potential.

    Row i is one-hot at node i's rank, so sigma @ [1..d] is the rank vector
    and larger potentials receive larger ranks; this maximizes p^T (sigma o)
    over all permutations.
    """
    p = _check_potentials(p)
    d = len(p)
    rank = np.empty(d, dtype=np.int64)
    rank[np.argsort(p, kind="stable")] = np.arange(d)
    sigma = np.zeros((d, d), dtype=np.float64)
    sigma[np.arange(d), rank] = 1.0
    return sigma


def hungarian(profit: np.ndarray) -> np.ndarray:
    """Permutation matrix maximizing sum_i profit[i, perm(i)]."""
    profit = np.asarray(profit, dtype=np.float64)
    if profit.ndim != 2 or profit.shape[0] != profit.shape[1]:
        raise DataError(f"profit matrix must be square, got {profit.shape}")
    if not np.isfinite(profit).all():
        raise NumericError("profit matrix contains non-finite values")
    rows, cols = linear_sum_assignment(profit, maximize=True)
    sigma = np.zeros_like(profit)
    sigma[rows, cols] = 1.0
    return sigma


def lower_template(d: int) -> np.ndarray:
    """Strictly lower-triangular all-ones template L, L[i, j] = 1 iff i > j."""
    return np.tril(np.ones((d, d)), k=-1)


def order_matrix(sigma: np.ndarray, L: np.ndarray) -> np.ndarray:
    """sigma @ L @ sigma^T; for a hard sigma this equals step(grad(p))."""
    return sigma @ L @ sigma.T


def order_matrix_vjp(sigma: np.ndarray, L: np.ndarray, dO: np.ndarray) -> np.ndarray:
    """Gradient of <dO, sigma L sigma^T> with respect to sigma."""
    return dO @ sigma @ L.T + dO.T @ sigma @ L


@dataclass
class TransportPlan:
    """Doubly-stochastic relaxation of a permutation.

    `vjp` backpropagates through the normalization iterations actually
    executed, using the stored per-half-step log matrices.
    """

    S: np.ndarray
    iterations_used: int
    converged: bool
    _halves: list[tuple[int, np.ndarray]] = field(default_factory=list, repr=False)
    _t: float = field(default=1.0, repr=False)

    def vjp(self, dS: np.ndarray) -> np.ndarray:
        """Map d(loss)/dS to d(loss)/dM for the sinkhorn input M."""
        if not self._halves:
            raise NumericError("transport plan was built without gradient tracking")
        dlog = dS * self.S
        for axis, z in reversed(self._halves):
            dlog = dlog - np.exp(z) * dlog.sum(axis=axis, keepdims=True)
        return dlog / self._t


def sinkhorn(
    M: np.ndarray,
    t: float = 0.2,
    max_iters: int = 3000,
    tol: float = 1e-3,
    track_grad: bool = True,
) -> TransportPlan:
    """Log-domain alternating column/row normalization of exp(M / t).

    Stops once every row and column sum is within `tol` of 1 (row sums are
    exact after a row step, so columns are what is checked), or after
    `max_iters` full iterations.  `tol <= 0` always runs `max_iters`
    iterations, which keeps the map smooth for finite-difference checks.
    Each iteration ends on the row step, so the returned plan always has
    unit row sums; downstream soft adjacencies stay bounded by 1 even when
    the iteration cap is hit.
    """
    M = np.asarray(M, dtype=np.float64)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise DataError(f"sinkhorn input must be square, got {M.shape}")
    if not np.isfinite(M).all():
        raise NumericError("sinkhorn input contains non-finite values")
    if t <= 0:
        raise ConfigError(f"temperature must be positive, got {t}")
    if max_iters < 1:
        raise ConfigError("max_iters must be at least 1")

    logA = M / t
    halves: list[tuple[int, np.ndarray]] = []
    converged = False
    iterations = 0
    while iterations < max_iters:
        # the column log-sum-exp of the current state doubles as the previous
        # iteration's convergence check: exp of it is the vector of column sums
        m = logA.max(axis=0, keepdims=True)
        col_lse = m + np.log(np.exp(logA - m).sum(axis=0, keepdims=True))
        if tol > 0 and iterations > 0 and np.abs(np.exp(col_lse) - 1.0).max() <= tol:
            converged = True
            break
        logA = logA - col_lse
        if track_grad:
            halves.append((0, logA))
        m = logA.max(axis=1, keepdims=True)
        logA = logA - (m + np.log(np.exp(logA - m).sum(axis=1, keepdims=True)))
        if track_grad:
            halves.append((1, logA))
        iterations += 1
    if tol > 0 and not converged and iterations == max_iters:
        converged = bool(np.abs(np.exp(logA).sum(axis=0) - 1.0).max() <= tol)
    return TransportPlan(
        S=np.exp(logA), iterations_used=iterations, converged=converged, _halves=halves, _t=t
    )


@dataclass(frozen=True)
class RelaxationConstants:
    """Fixed pieces of the permutation relaxation for a given d."""

    d: int
    t: float = 0.2
    tol: float = 1e-3
    max_iters: int = 3000
    o: np.ndarray = None
    L: np.ndarray = None

    def __post_init__(self):
        if self.d < 1:
            raise ConfigError("d must be at least 1")
        if self.t <= 0:
            raise ConfigError("temperature must be positive")
        object.__setattr__(self, "o", np.arange(1, self.d + 1, dtype=np.float64))
        object.__setattr__(self, "L", lower_template(self.d))


def relaxed_permutation(
    p: np.ndarray, consts: RelaxationConstants, track_grad: bool = True
) -> tuple[TransportPlan, np.ndarray]:
    """Soft transport plan for p's ordering plus its hard rounding.

    Forward computations use the hard permutation; gradient flow with
    respect to p goes through the plan's unrolled iterations (the
    straight-through substitution, recomputed on every call).
    """
    p = _check_potentials(p)
    if len(p) != consts.d:
        raise DataError(f"potential length {len(p)} does not match d={consts.d}")
    plan = sinkhorn(
        np.outer(p, consts.o),
        t=consts.t,
        max_iters=consts.max_iters,
        tol=consts.tol,
        track_grad=track_grad,
    )
    hard = hungarian(plan.S)
    return plan, hard


def plan_input_grad_to_p(dM: np.ndarray, consts: RelaxationConstants) -> np.ndarray:
    """Fold d(loss)/dM for M = p o^T back onto p."""
    return dM @ consts.o
