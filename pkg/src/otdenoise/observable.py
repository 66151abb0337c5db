"""Observable-space penalty.

For a denoiser tabulated on the sample, ``delta(Z_i)``, the synthetic
observation law is ``mu_delta = (1/n) sum_i p(. | delta(Z_i))``.  The objective

    E_tau(delta) = E|delta(Z) - Theta|^2 + W2^2(mu_delta, mu) / (2 tau)

is evaluated with the risk term written as
``mean |delta(Z_i) - theta_bar(Z_i)|^2 + R_Bayes``.

Two representations of ``mu_delta`` are used:

* Monte Carlo: ``K`` draws from ``p(. | delta(Z_i))`` per observation.  This
  drives the gradient and the descent loop.
* Discretized: a probability kernel ``P[j, k]`` from a latent grid to an
  observation grid.  This is the setting of the coupling relaxation LP,
  whose value equals ``E_tau - R_Bayes`` at the induced map.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import List, Optional, Sequence

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.sparse.csgraph import connected_components

from .denoiser import build_ot_denoiser
from .errors import Infeasible, MeasureError, SolverError, Unsupported
from .likelihood import LikelihoodModel, stream_rng
from .measures import DiscreteMeasure, as_points, squared_distances
from .ot import OTConfig, solve_ot, w2_squared

EXACT_LP_MAX_ATOMS = 2000
KERNEL_ROW_TOL = 1e-6


@dataclass(frozen=True)
class DeltaTable:
    """Decision variables ``delta(Z_i)``, one row per observation."""

    values: np.ndarray
    zs: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        vals = as_points(self.values)
        object.__setattr__(self, "values", vals)
        if self.zs is not None:
            z = as_points(self.zs)
            if z.shape[0] != vals.shape[0]:
                raise MeasureError("delta table and sample differ in length")
            object.__setattr__(self, "zs", z)

    def __len__(self):
        return self.values.shape[0]

    def checked(self, model: LikelihoodModel) -> "DeltaTable":
        model.check_theta(self.values)
        return self


def _rng(rng) -> np.random.Generator:
    if isinstance(rng, np.random.Generator):
        return rng
    return stream_rng(int(rng), 1)


def mu_delta_draws(model: LikelihoodModel, delta: DeltaTable, K: int, rng) -> np.ndarray:
    """``(n, K, d)`` array with ``K`` draws from ``p(. | delta_i)`` per row."""
    if K < 1:
        raise ValueError("K must be at least 1")
    vals = model.check_theta(delta.values)
    rep = np.repeat(vals, K, axis=0)
    z = model.sample(rep, _rng(rng))
    return z.reshape(vals.shape[0], K, -1)


def mu_delta_sample(model: LikelihoodModel, delta: DeltaTable, K: int, rng) -> DiscreteMeasure:
    """Uniform measure on the ``n K`` Monte Carlo draws representing ``mu_delta``."""
    draws = mu_delta_draws(model, delta, K, rng)
    pts = draws.reshape(-1, draws.shape[2])
    return DiscreteMeasure(pts, np.full(pts.shape[0], 1.0 / pts.shape[0]))


def _auto_cfg(cfg: Optional[OTConfig], n_atoms: int) -> OTConfig:
    if cfg is not None:
        return cfg
    if n_atoms <= EXACT_LP_MAX_ATOMS:
        return OTConfig("exact_lp")
    return OTConfig("sinkhorn", epsilon=1e-2, max_iters=20_000, tolerance=1e-6)


def _sample_measure(zs, weights=None) -> DiscreteMeasure:
    z = as_points(zs)
    n = z.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    return DiscreteMeasure(z, w)


def fitted_term(theta_bar, delta_values, weights=None) -> float:
    d = as_points(delta_values)
    tb = as_points(theta_bar).reshape(d.shape)
    sq = np.sum((d - tb) ** 2, axis=1)
    return float(np.mean(sq) if weights is None else np.asarray(weights) @ sq)


def empirical_bayes_risk(thetas, theta_bar) -> float:
    """``mean |theta_bar(Z_i) - Theta_i|^2`` from a joint sample."""
    return fitted_term(thetas, theta_bar)


def objective_E_tau(model: LikelihoodModel, zs, theta_bar, delta: DeltaTable, tau: float,
                    K: int, rng, cfg: Optional[OTConfig] = None,
                    r_bayes: float = 0.0, thetas=None) -> float:
    """Monte Carlo estimate of ``E_tau`` at a tabulated denoiser.

    The risk term is ``mean |delta - theta_bar|^2 + r_bayes``, or
    ``mean |delta - Theta|^2`` when the latent ``thetas`` are supplied.  The
    transport term uses ``exact_lp`` up to 2000 draws and ``sinkhorn`` beyond,
    unless ``cfg`` is given.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    mu_d = mu_delta_sample(model, delta, K, rng)
    mu_n = _sample_measure(zs)
    pen = w2_squared(mu_d, mu_n, _auto_cfg(cfg, len(mu_d)))
    if thetas is not None:
        risk = fitted_term(thetas, delta.values)
    else:
        risk = fitted_term(theta_bar, delta.values) + r_bayes
    return risk + pen / (2.0 * tau)


@dataclass
class GradientResult:
    """Per-observation gradient of ``E_tau`` in ``L2(mu_n)``.

    The directional derivative along ``h`` is ``mean_i <gradient_i, h_i>``.
    """

    gradient: np.ndarray
    first_term: np.ndarray
    penalty_term: np.ndarray
    penalty: float
    potentials: np.ndarray
    degenerate: bool
    draws: np.ndarray


def _plan_components(mat) -> int:
    m = sparse.csr_matrix(mat)
    m.data[m.data <= 1e-15] = 0
    m.eliminate_zeros()
    adj = sparse.bmat([[None, m], [m.T, None]])
    return connected_components(adj, directed=False)[0]


def gradient_E_tau(model: LikelihoodModel, zs, theta_bar, delta: DeltaTable, tau: float,
                   K: int, rng, cfg: Optional[OTConfig] = None,
                   draws: Optional[np.ndarray] = None) -> GradientResult:
    """Score-function gradient of ``E_tau``.

    ``g_i = 2 (delta_i - theta_bar_i)
          + (1/2tau) (1/K) sum_k psi(z'_ik) (s_ik - mean_k s_ik)``

    with ``z'_ik`` the Monte Carlo draws behind ``mu_delta``,
    ``s_ik = grad_theta log p(z'_ik | delta_i)`` and ``psi`` the
    ``mu_delta``-side potential of the OT problem against ``mu_n``.
    Centring the score inside each observation leaves the expectation
    unchanged (the score has mean zero) and makes the estimate invariant to
    constant shifts of ``psi``.  With ``exact_lp`` the potential is unique
    only if the optimal plan's support graph is connected; otherwise
    ``degenerate`` is set.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    if not model.differentiable:
        raise Unsupported(f"{model.family} is not differentiable in theta")
    vals = model.check_theta(delta.values)
    n, m = vals.shape
    if draws is None:
        draws = mu_delta_draws(model, delta, K, rng)
    draws = np.asarray(draws, dtype=float).reshape(n, -1, model.obs_dim)
    K = draws.shape[1]
    pts = draws.reshape(n * K, -1)
    mu_d = DiscreteMeasure(pts, np.full(n * K, 1.0 / (n * K)))
    mu_n = _sample_measure(zs)
    cfg = _auto_cfg(cfg, n * K)
    plan = solve_ot(mu_d, mu_n, None, cfg)
    penalty = plan.cost_value
    psi = plan.dual_source
    if psi is None:
        raise Unsupported(f"OT method {cfg.method!r} returns no dual potentials")
    # entropic potentials are unique up to a constant; LP duals only when
    # the plan's support graph is connected
    degenerate = cfg.method == "exact_lp" and _plan_components(plan.matrix) > 1
    scores = model.score(pts, np.repeat(vals, K, axis=0)).reshape(n, K, m)
    centred = scores - scores.mean(axis=1, keepdims=True)
    psi_nk = np.asarray(psi).reshape(n, K)
    pen_grad = np.einsum("nk,nkm->nm", psi_nk, centred) / K
    tb = as_points(theta_bar).reshape(n, m)
    first = 2.0 * (vals - tb)
    grad = first + pen_grad / (2.0 * tau)
    return GradientResult(grad, first, pen_grad / (2.0 * tau), float(penalty),
                          psi_nk, bool(degenerate), draws)


@dataclass
class DescentTrace:
    deltas: List[np.ndarray]
    objectives: List[float]
    degenerate: List[bool]


def gradient_descent(model: LikelihoodModel, zs, theta_bar, init: DeltaTable, tau: float,
                     lam: float, iters: int, K: int, seed: int,
                     cfg: Optional[OTConfig] = None, r_bayes: float = 0.0,
                     common_random_numbers: bool = False) -> DescentTrace:
    """Fixed-step descent ``delta <- proj(delta - lam * g)``.

    Iteration ``k`` draws from stream ``(seed, 2, k)``; with
    ``common_random_numbers`` every iteration reuses stream ``(seed, 2, 0)``.
    ``objectives[k]`` is the estimate of ``E_tau`` at ``deltas[k]`` from the
    same draws that produced the gradient.
    """
    if not lam >= 0:
        raise ValueError("lambda must be nonnegative")
    delta = DeltaTable(model.project(init.values))
    tb = as_points(theta_bar).reshape(delta.values.shape)
    deltas, objectives, flags = [delta.values.copy()], [], []
    for k in range(iters + 1):
        rng = stream_rng(seed, 2, 0 if common_random_numbers else k)
        res = gradient_E_tau(model, zs, tb, delta, tau, K, rng, cfg)
        objectives.append(fitted_term(tb, delta.values) + r_bayes + res.penalty / (2 * tau))
        flags.append(res.degenerate)
        if k == iters:
            break
        delta = DeltaTable(model.project(delta.values - lam * res.gradient))
        deltas.append(delta.values.copy())
    return DescentTrace(deltas, objectives, flags)


# -- discretized relaxation ---------------------------------------------------

def _cell_volumes(grid: np.ndarray) -> np.ndarray:
    """Midpoint-rule cell sizes for a 1D grid or a product grid in d dims."""
    vol = np.ones(grid.shape[0])
    for k in range(grid.shape[1]):
        axis = np.unique(grid[:, k])
        if axis.size == 1:
            continue
        edges = np.concatenate([[axis[0] - (axis[1] - axis[0]) / 2],
                                (axis[1:] + axis[:-1]) / 2,
                                [axis[-1] + (axis[-1] - axis[-2]) / 2]])
        width = np.diff(edges)
        vol *= width[np.searchsorted(axis, grid[:, k])]
    return vol


def kernel_matrix(model: LikelihoodModel, theta_grid, z3_grid) -> np.ndarray:
    """``P[j, k]``: density at cell midpoint times cell size, rows summing to 1."""
    th = as_points(theta_grid)
    z3 = as_points(z3_grid)
    P = np.exp(model.logpdf_matrix(z3, th).T) * _cell_volumes(z3)[None, :]
    rows = P.sum(axis=1, keepdims=True)
    if np.any(rows <= 0):
        j = int(np.argmax(rows[:, 0] <= 0))
        raise Infeasible(f"latent atom {j} puts no mass on the observation grid")
    return P / rows


@dataclass(frozen=True)
class RelaxationInstance:
    z_atoms: np.ndarray
    theta_grid: np.ndarray
    z3_grid: np.ndarray
    likelihood_matrix: np.ndarray
    tau: float
    z_weights: Optional[np.ndarray] = None

    def __post_init__(self):
        z = as_points(self.z_atoms)
        th = as_points(self.theta_grid)
        z3 = as_points(self.z3_grid)
        P = np.asarray(self.likelihood_matrix, dtype=float)
        if P.shape != (th.shape[0], z3.shape[0]):
            raise MeasureError(f"kernel shape {P.shape} != ({th.shape[0]}, {z3.shape[0]})")
        if np.any(P < 0) or np.max(np.abs(P.sum(axis=1) - 1)) > KERNEL_ROW_TOL:
            raise MeasureError("kernel rows must be probability vectors")
        if z.shape[1] != z3.shape[1]:
            raise MeasureError("observation atoms and grid differ in dimension")
        if not self.tau > 0:
            raise ValueError("tau must be positive")
        w = (np.full(z.shape[0], 1.0 / z.shape[0]) if self.z_weights is None
             else np.asarray(self.z_weights, dtype=float))
        DiscreteMeasure(z, w)  # validates the weights
        object.__setattr__(self, "z_atoms", z)
        object.__setattr__(self, "theta_grid", th)
        object.__setattr__(self, "z3_grid", z3)
        object.__setattr__(self, "likelihood_matrix", P)
        object.__setattr__(self, "z_weights", w)

    @classmethod
    def build(cls, model: LikelihoodModel, z_atoms, theta_grid, z3_grid, tau: float,
              z_weights=None) -> "RelaxationInstance":
        return cls(z_atoms, theta_grid, z3_grid,
                   kernel_matrix(model, theta_grid, z3_grid), tau, z_weights)

    def with_tau(self, tau: float) -> "RelaxationInstance":
        return replace(self, tau=float(tau))

    @property
    def mu(self) -> DiscreteMeasure:
        return DiscreteMeasure(self.z_atoms, self.z_weights)

    def to_json(self) -> dict:
        return {"z_atoms": self.z_atoms.tolist(), "z_weights": self.z_weights.tolist(),
                "theta_grid": self.theta_grid.tolist(), "z3_grid": self.z3_grid.tolist(),
                "likelihood_matrix": self.likelihood_matrix.tolist(), "tau": self.tau}

    @classmethod
    def from_json(cls, obj: dict) -> "RelaxationInstance":
        return cls(obj["z_atoms"], obj["theta_grid"], obj["z3_grid"],
                   np.asarray(obj["likelihood_matrix"]), float(obj["tau"]),
                   obj.get("z_weights"))


def population_instance(model: LikelihoodModel, G_star: DiscreteMeasure, z_grid,
                        tau: float):
    """Instance whose observation measure is the exact discretized marginal.

    The observation atoms are the grid itself with weights ``P^T g``; the
    posterior mean is taken under the same kernel.  Returns
    ``(instance, theta_bar_values)``.
    """
    P = kernel_matrix(model, G_star.atoms, z_grid)
    mass = P.T @ G_star.weights
    w = mass / mass.sum()
    post = (G_star.weights[:, None] * P) / mass[None, :]
    theta_bar = post.T @ G_star.atoms
    inst = RelaxationInstance(z_grid, G_star.atoms, z_grid, P, tau, w)
    return inst, theta_bar


@dataclass
class RelaxationResult:
    value: float
    pi12: np.ndarray
    gamma2: np.ndarray
    gamma3: np.ndarray
    pi34: np.ndarray
    delta: np.ndarray
    fitted: float
    penalty: float
    split_rows: np.ndarray

    def to_json(self) -> dict:
        return {"value": self.value, "fitted": self.fitted, "penalty": self.penalty,
                "gamma2": self.gamma2.tolist(), "gamma3": self.gamma3.tolist(),
                "delta": self.delta.tolist(), "pi12": self.pi12.tolist(),
                "pi34": self.pi34.tolist(), "split_rows": self.split_rows.tolist()}


def relaxation_lp(instance: RelaxationInstance, theta_bar):
    """Cost vector, equality matrix and right-hand side of the relaxation LP.

    Variables: ``pi12`` (n x J, row-major) then ``pi34`` (L x n, row-major).
    """
    z = instance.z_atoms
    th = instance.theta_grid
    z3 = instance.z3_grid
    P = instance.likelihood_matrix
    n, J, L = z.shape[0], th.shape[0], z3.shape[0]
    tb = as_points(theta_bar).reshape(n, -1)
    c12 = squared_distances(tb, th).ravel()
    c34 = squared_distances(z3, z).ravel() / (2.0 * instance.tau)
    rows12 = sparse.kron(sparse.eye(n), np.ones((1, J)))
    cols34 = sparse.kron(np.ones((1, L)), sparse.eye(n))
    bal12 = -sparse.kron(np.ones((1, n)), sparse.csr_matrix(P.T))
    bal34 = sparse.kron(sparse.eye(L), np.ones((1, n)))
    A = sparse.vstack([
        sparse.hstack([rows12, sparse.csr_matrix((n, L * n))]),
        sparse.hstack([sparse.csr_matrix((n, n * J)), cols34]),
        sparse.hstack([bal12, bal34]),
    ]).tocsr()
    rhs = np.concatenate([instance.z_weights, instance.z_weights, np.zeros(L)])
    return np.concatenate([c12, c34]), A, rhs


def solve_relaxation(instance: RelaxationInstance, theta_bar) -> RelaxationResult:
    """Solve the coupling relaxation over ``(pi12, pi34)`` with ``gamma3 = P^T gamma2``.

    The map is the barycentric projection of ``pi12``.  At a vertex with a
    strictly positive kernel every row of ``pi12`` is a single atom;
    ``split_rows`` lists any rows where that fails.
    """
    z = instance.z_atoms
    n, J, L = z.shape[0], instance.theta_grid.shape[0], instance.z3_grid.shape[0]
    cost, A, rhs = relaxation_lp(instance, theta_bar)
    # tiny kernel entries can stall HiGHS at the tightest tolerance
    for tol in (1e-10, 1e-9):
        res = linprog(cost, A_eq=A, b_eq=rhs, bounds=(0, None), method="highs-ds",
                      options={"primal_feasibility_tolerance": tol,
                               "dual_feasibility_tolerance": tol})
        if res.status != 4:
            break
    if res.status == 2:
        raise Infeasible(f"relaxation LP infeasible: {res.message}")
    if res.status != 0:
        raise SolverError(f"relaxation LP failed: {res.message}")
    x = np.maximum(res.x, 0.0)
    pi12 = x[:n * J].reshape(n, J)
    pi34 = x[n * J:].reshape(L, n)
    gamma2 = pi12.sum(axis=0)
    gamma3 = pi34.sum(axis=1)
    mass = pi12.sum(axis=1, keepdims=True)
    delta = (pi12 @ instance.theta_grid) / mass
    fitted = float(np.sum(pi12 * squared_distances(as_points(theta_bar).reshape(n, -1),
                                                   instance.theta_grid)))
    penalty = float(np.sum(pi34 * squared_distances(instance.z3_grid, z)))
    big = pi12 > 1e-9 * mass
    split = np.flatnonzero(big.sum(axis=1) > 1)
    return RelaxationResult(float(res.fun), pi12, gamma2, gamma3, pi34, delta,
                            fitted, penalty, split)


def _lift_to_grid(values: np.ndarray, grid: np.ndarray) -> np.ndarray:
    """Row-stochastic ``(n, J)`` weights placing each value on the latent grid.

    Exact grid points get a single atom; in 1D other values are split
    between the two neighbouring atoms by linear interpolation.
    """
    d2 = squared_distances(values, grid)
    n, J = d2.shape
    W = np.zeros((n, J))
    for i in range(n):
        j = int(np.argmin(d2[i]))
        if d2[i, j] <= 1e-20 or grid.shape[1] != 1:
            W[i, j] = 1.0
            continue
        order = np.argsort(grid[:, 0])
        g = grid[order, 0]
        v = float(np.clip(values[i, 0], g[0], g[-1]))
        hi = int(np.clip(np.searchsorted(g, v), 1, J - 1))
        t = (v - g[hi - 1]) / (g[hi] - g[hi - 1])
        W[i, order[hi - 1]] += 1.0 - t
        W[i, order[hi]] += t
    return W


def objective_E_tau_discrete(instance: RelaxationInstance, theta_bar, delta_values,
                             r_bayes: float = 0.0, cfg: Optional[OTConfig] = None) -> float:
    """``E_tau`` with ``mu_delta`` computed through the instance's kernel.

    ``mu_delta = sum_i w_i P[j(i), :]`` on the observation grid, where
    ``j(i)`` is the grid atom carrying ``delta_i`` (linear interpolation
    between neighbours for off-grid values in 1D).
    """
    vals = as_points(delta_values)
    W = _lift_to_grid(vals, instance.theta_grid)
    gamma3 = (instance.z_weights @ W) @ instance.likelihood_matrix
    keep = gamma3 > 0
    mu_d = DiscreteMeasure.normalized(instance.z3_grid[keep], gamma3[keep])
    pen = w2_squared(mu_d, instance.mu, cfg or OTConfig("exact_lp"))
    fit = fitted_term(theta_bar, vals, instance.z_weights)
    return fit + r_bayes + pen / (2.0 * instance.tau)


@dataclass
class SweepRow:
    tau: float
    distance: float
    value: float
    penalty: float
    bound_ok: bool
    gamma2_w2: float
    n_variables: int
    seconds: float
    split_rows: int


def tau_sweep_convergence(instance: RelaxationInstance, theta_bar,
                          G_star_ref: DiscreteMeasure, taus: Sequence[float],
                          cfg: Optional[OTConfig] = None) -> List[SweepRow]:
    """Solve the relaxation along decreasing ``taus`` and compare with the OT denoiser.

    ``distance`` is ``sum_i w_i |delta_tau(Z_i) - delta*(Z_i)|^2`` where
    ``delta*`` is the OT denoiser built from ``G_star_ref``; ``bound_ok``
    checks ``sum pi34 |z3 - z4|^2 <= 2 tau * value``.
    """
    taus = [float(t) for t in taus]
    if any(b >= a for a, b in zip(taus, taus[1:])):
        raise ValueError("taus must be strictly decreasing")
    tb = as_points(theta_bar)
    ref = build_ot_denoiser(instance.z_atoms, tb, G_star_ref, cfg,
                            weights=instance.z_weights).values
    rows = []
    for tau in taus:
        inst = instance.with_tau(tau)
        t0 = time.perf_counter()
        res = solve_relaxation(inst, tb)
        secs = time.perf_counter() - t0
        dist = float(instance.z_weights @ np.sum((res.delta - ref) ** 2, axis=1))
        keep = res.gamma2 > 0
        g2 = DiscreteMeasure.normalized(inst.theta_grid[keep], res.gamma2[keep])
        rows.append(SweepRow(
            tau, dist, res.value, res.penalty,
            bool(res.penalty <= 2 * tau * res.value + 1e-9),
            float(np.sqrt(max(w2_squared(g2, G_star_ref), 0.0))),
            int(res.pi12.size + res.pi34.size), secs, int(res.split_rows.size)))
    return rows
