"""Discrete optimal transport solvers.

Three routes share one entry point, :func:`solve_ot`:

* ``exact_lp``: the transport LP solved by HiGHS dual simplex, so the plan is
  a vertex of the transport polytope.  Dual potentials come from the LP row
  multipliers and are then tightened by a double c-transform, which keeps
  them optimal while making ``phi_i + psi_j <= c_ij`` hold to round-off.
* ``sinkhorn``: log-domain Sinkhorn iterations, then the plan is rounded onto
  the transport polytope so marginals are exact.
* ``monotone_1d``: the north-west-corner rule on sorted atoms (the quantile
  coupling), returned as a sparse matrix.

Dual potentials are normalized so that the first source potential is 0.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Union

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import logsumexp

from .errors import ConvergeError, DimError, SolverError, ZeroRow
from .measures import DiscreteMeasure, TransportPlan, as_points, squared_distances

METHODS = ("exact_lp", "sinkhorn", "monotone_1d")

CostLike = Union[None, np.ndarray, Callable[[np.ndarray, np.ndarray], np.ndarray]]


@dataclass(frozen=True)
class OTConfig:
    method: str = "exact_lp"
    epsilon: float = 1e-2
    max_iters: int = 10_000
    tolerance: float = 1e-6

    def __post_init__(self):
        if self.method not in METHODS:
            raise ValueError(f"unknown OT method {self.method!r}")
        if self.method == "sinkhorn" and not self.epsilon > 0:
            raise ValueError("sinkhorn needs epsilon > 0")
        if not (0 < self.tolerance <= 1e-2):
            raise ValueError("tolerance must lie in (0, 1e-2]")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be positive")


def cost_matrix(source: DiscreteMeasure, target: DiscreteMeasure,
                cost: CostLike = None) -> np.ndarray:
    if cost is None:
        if source.dim != target.dim:
            raise DimError(f"source dim {source.dim} != target dim {target.dim}")
        return squared_distances(source.atoms, target.atoms)
    if callable(cost):
        c = np.asarray(cost(source.atoms, target.atoms), dtype=float)
    else:
        c = np.asarray(cost, dtype=float)
    if c.shape != (len(source), len(target)):
        raise DimError(f"cost shape {c.shape} != ({len(source)}, {len(target)})")
    if not np.all(np.isfinite(c)) or np.any(c < 0):
        raise ValueError("cost matrix must be finite and nonnegative")
    return c


def solve_ot(source: DiscreteMeasure, target: DiscreteMeasure,
             cost: CostLike = None, cfg: Optional[OTConfig] = None) -> TransportPlan:
    """Solve the discrete Kantorovich problem between two measures.

    ``cost`` may be ``None`` (squared Euclidean distance), a precomputed
    matrix, or a callable ``cost(source_atoms, target_atoms) -> matrix``.
    """
    cfg = cfg or OTConfig()
    if cfg.method == "monotone_1d":
        if cost is not None:
            raise ValueError("monotone_1d only supports the quadratic cost")
        return solve_monotone_1d(source, target)
    c = cost_matrix(source, target, cost)
    if cfg.method == "exact_lp":
        return _solve_lp(source, target, c)
    return _solve_sinkhorn(source, target, c, cfg)


def _transport_constraints(n: int, m: int):
    """Sparse equality system for row sums then column sums of an n x m plan."""
    rows = sparse.kron(sparse.eye(n), np.ones((1, m)))
    cols = sparse.kron(np.ones((1, n)), sparse.eye(m))
    return sparse.vstack([rows, cols]).tocsr()


def _tighten_duals(c: np.ndarray, phi: np.ndarray, psi: np.ndarray):
    psi = np.min(c - phi[:, None], axis=0)
    phi = np.min(c - psi[None, :], axis=1)
    shift = phi[0]
    return phi - shift, psi + shift


def _solve_lp(source, target, c):
    n, m = c.shape
    a, b = source.weights, target.weights
    # the last column constraint is implied by the others
    A = _transport_constraints(n, m)[: n + m - 1]
    rhs = np.concatenate([a, b[:-1]])
    res = linprog(c.ravel(), A_eq=A, b_eq=rhs, bounds=(0, None),
                  method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise SolverError(f"transport LP failed: {res.message}")
    plan = np.maximum(res.x.reshape(n, m), 0.0)
    plan = _fix_marginals(plan, a, b)
    duals = res.eqlin.marginals
    phi = duals[:n].copy()
    psi = np.concatenate([duals[n:], [0.0]])
    phi, psi = _tighten_duals(c, phi, psi)
    value = float(np.sum(plan * c))
    return TransportPlan(plan, source, target, value, phi, psi, cost=c)


def _fix_marginals(plan, a, b):
    """Remove LP round-off from the marginals without leaving the support."""
    for _ in range(3):
        r = plan.sum(axis=1)
        scale = np.divide(a, r, out=np.ones_like(a), where=r > 0)
        plan = plan * scale[:, None]
        s = plan.sum(axis=0)
        scale = np.divide(b, s, out=np.ones_like(b), where=s > 0)
        plan = plan * scale[None, :]
    return plan


def round_to_polytope(plan: np.ndarray, a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Project an approximate plan onto the couplings of ``a`` and ``b``.

    Rows and columns carrying excess mass are scaled down, then the missing
    mass is restored by a rank-one correction; the L1 change is at most twice
    the marginal violation.
    """
    p = plan.copy()
    r = p.sum(axis=1)
    p *= np.minimum(1.0, np.divide(a, r, out=np.ones_like(a), where=r > 0))[:, None]
    s = p.sum(axis=0)
    p *= np.minimum(1.0, np.divide(b, s, out=np.ones_like(b), where=s > 0))[None, :]
    err_a = a - p.sum(axis=1)
    err_b = b - p.sum(axis=0)
    total = err_a.sum()
    if total > 0:
        p += np.outer(err_a, err_b) / total
    return np.maximum(p, 0.0)


def _solve_sinkhorn(source, target, c, cfg):
    a, b = source.weights, target.weights
    eps = cfg.epsilon
    log_a = np.log(np.where(a > 0, a, 1.0))
    log_b = np.log(np.where(b > 0, b, 1.0))
    # zero-mass atoms never receive mass; give them an effectively infinite cost
    ninf = -np.inf
    log_a = np.where(a > 0, log_a, ninf)
    log_b = np.where(b > 0, log_b, ninf)
    f = np.zeros(len(a))
    g = np.zeros(len(b))
    kern = -c / eps
    violation = np.inf
    for it in range(int(cfg.max_iters)):
        f = eps * (log_a - logsumexp(kern + g[None, :] / eps, axis=1))
        g = eps * (log_b - logsumexp(kern + f[:, None] / eps, axis=0))
        if it % 10 == 0 or it == cfg.max_iters - 1:
            log_plan = kern + (f[:, None] + g[None, :]) / eps
            plan = np.exp(log_plan)
            violation = np.abs(plan.sum(axis=1) - a).sum()
            if violation <= cfg.tolerance:
                break
    else:
        raise ConvergeError(
            f"sinkhorn: marginal violation {violation:.3e} after "
            f"{cfg.max_iters} iterations", last=(plan, f, g))
    plan = round_to_polytope(plan, a, b)
    f = np.where(np.isfinite(f), f, 0.0)
    g = np.where(np.isfinite(g), g, 0.0)
    shift = f[0]
    value = float(np.sum(plan * c))
    # entropic potentials are not exact OT duals, so the plan skips the
    # strong-duality check by not carrying the cost matrix
    return TransportPlan(plan, source, target, value, f - shift, g + shift)


def sinkhorn_potentials(source: DiscreteMeasure, target: DiscreteMeasure,
                        cost: CostLike = None, cfg: Optional[OTConfig] = None):
    """Entropic OT value (dual form) together with the potentials ``(f, g)``.

    The returned value is the regularized objective
    ``<f, a> + <g, b>``, whose derivative in the target weights is ``g``.
    """
    cfg = cfg or OTConfig(method="sinkhorn")
    plan = _solve_sinkhorn(source, target, cost_matrix(source, target, cost), cfg)
    f, g = plan.dual_source, plan.dual_target
    return float(f @ source.weights + g @ target.weights), f, g


def solve_monotone_1d(source: DiscreteMeasure, target: DiscreteMeasure) -> TransportPlan:
    """Quantile coupling of two 1-D measures (north-west corner on sorted atoms)."""
    if source.dim != 1 or target.dim != 1:
        raise DimError("monotone transport needs 1-D measures")
    x, y = source.atoms[:, 0], target.atoms[:, 0]
    a, b = source.weights, target.weights
    ix = np.argsort(x, kind="stable")
    iy = np.argsort(y, kind="stable")
    rows, cols, vals = [], [], []
    i = j = 0
    ra, rb = a[ix[0]], b[iy[0]]
    n, m = len(x), len(y)
    while i < n and j < m:
        mass = min(ra, rb)
        if mass > 0:
            rows.append(ix[i])
            cols.append(iy[j])
            vals.append(mass)
        ra -= mass
        rb -= mass
        # treat residues at round-off level as exhausted
        if ra <= 1e-15 and i < n:
            i += 1
            ra = a[ix[i]] if i < n else 0.0
        if rb <= 1e-15 and j < m:
            j += 1
            rb = b[iy[j]] if j < m else 0.0
    plan = sparse.csr_matrix((vals, (rows, cols)), shape=(n, m))
    plan = _fix_sparse_marginals(plan, a, b)
    coo = plan.tocoo()
    value = float(np.sum(coo.data * (x[coo.row] - y[coo.col]) ** 2))
    return TransportPlan(plan, source, target, value)


def _fix_sparse_marginals(plan, a, b):
    for _ in range(3):
        r = np.asarray(plan.sum(axis=1)).ravel()
        plan = sparse.diags(np.divide(a, r, out=np.ones_like(a), where=r > 0)) @ plan
        s = np.asarray(plan.sum(axis=0)).ravel()
        plan = plan @ sparse.diags(np.divide(b, s, out=np.ones_like(b), where=s > 0))
    return plan.tocsr()


def w2_squared(source: DiscreteMeasure, target: DiscreteMeasure,
               cfg: Optional[OTConfig] = None) -> float:
    """Squared 2-Wasserstein distance between two discrete measures."""
    if source.dim != target.dim:
        raise DimError(f"source dim {source.dim} != target dim {target.dim}")
    return solve_ot(source, target, None, cfg).cost_value


def barycentric_projection(plan: TransportPlan) -> np.ndarray:
    """Conditional mean of the target given each source atom, shape (n, k)."""
    mat = plan.matrix
    if sparse.issparse(mat):
        mass = np.asarray(mat.sum(axis=1)).ravel()
        num = np.asarray(mat @ plan.target.atoms)
    else:
        mass = mat.sum(axis=1)
        num = mat @ plan.target.atoms
    bad = np.flatnonzero(mass <= 0)
    if bad.size:
        raise ZeroRow(f"source atom {bad[0]} carries no mass")
    return num / mass[:, None]


def c_transform_extend(potential, target: DiscreteMeasure,
                       cost: Optional[Callable] = None) -> Callable:
    """Extend a target-side potential to all of R^d by its c-transform.

    Returns ``x -> min_j (c(x, y_j) - psi_j)``; the callable accepts a single
    point or an ``(n, d)`` array and returns a scalar or an ``(n,)`` array.
    """
    psi = np.asarray(potential, dtype=float).reshape(-1)
    if psi.shape[0] != len(target):
        raise DimError("potential length does not match the target atoms")
    ys = target.atoms
    cfun = cost or squared_distances

    def phi(x):
        arr = np.asarray(x, dtype=float)
        single = arr.ndim <= 1 and (arr.size == target.dim)
        pts = arr.reshape(1, -1) if single else as_points(arr)
        vals = np.min(cfun(pts, ys) - psi[None, :], axis=1)
        return float(vals[0]) if single else vals

    return phi
