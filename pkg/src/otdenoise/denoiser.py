"""Denoisers built from the posterior mean and an optimal transport step.

The OT denoiser is ``delta = T o theta_bar`` where ``T`` transports the law of
``theta_bar(Z)`` onto the prior.  In sample form ``T`` is the barycentric
projection of a discrete plan between the values ``theta_bar(Z_i)`` and the
(estimated) prior atoms.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse
from scipy.optimize import linprog
from scipy.special import ndtr

from .errors import AlignError, DimError, EmptySample, MatrixError, SolverError
from .measures import DiscreteMeasure, TransportPlan, as_points, squared_distances
from .ot import OTConfig, barycentric_projection, solve_ot, w2_squared
from .posterior import _spd, gaussian_shrinkage

EXTENSIONS = ("nearest_posterior_mean", "monotone_1d_interp")


@dataclass(frozen=True)
class DenoiserMap:
    """Values of a denoiser on a set of observation points.

    ``anchors`` holds ``theta_bar`` at the evaluation points; the
    ``nearest_posterior_mean`` extension maps a new ``z`` to the value of the
    evaluation point whose ``theta_bar`` is closest to ``theta_bar(z)``.
    """

    eval_points: np.ndarray
    values: np.ndarray
    extension: str = "nearest_posterior_mean"
    provenance: str = "ot_plugin"
    anchors: Optional[np.ndarray] = None
    theta_bar: Optional[Callable] = field(default=None, compare=False, repr=False)
    plan: Optional[TransportPlan] = field(default=None, compare=False, repr=False)

    def __post_init__(self):
        pts = as_points(self.eval_points)
        vals = as_points(self.values)
        if pts.shape[0] != vals.shape[0]:
            raise AlignError(f"{pts.shape[0]} points but {vals.shape[0]} values")
        if self.extension not in EXTENSIONS:
            raise ValueError(f"unknown extension {self.extension!r}")
        if self.extension == "monotone_1d_interp":
            if pts.shape[1] != 1 or vals.shape[1] != 1:
                raise DimError("monotone interpolation needs d = m = 1")
            order = np.argsort(pts[:, 0], kind="stable")
            if np.any(np.diff(vals[order, 0]) < -1e-12):
                raise ValueError("values are not nondecreasing in the evaluation points")
        object.__setattr__(self, "eval_points", pts)
        object.__setattr__(self, "values", vals)
        if self.anchors is not None:
            anc = as_points(self.anchors)
            if anc.shape[0] != pts.shape[0]:
                raise AlignError("anchors must match the evaluation points")
            object.__setattr__(self, "anchors", anc)

    def __len__(self):
        return self.eval_points.shape[0]

    def evaluate(self, zs, theta_bar: Optional[Callable] = None) -> np.ndarray:
        """Values at arbitrary points via the configured extension."""
        z = as_points(zs).reshape(-1, self.eval_points.shape[1])
        if self.extension == "monotone_1d_interp":
            order = np.argsort(self.eval_points[:, 0], kind="stable")
            x = self.eval_points[order, 0]
            y = self.values[order, 0]
            return np.interp(z[:, 0], x, y)[:, None]
        fn = theta_bar or self.theta_bar
        if fn is None or self.anchors is None:
            raise ValueError("nearest_posterior_mean extension needs theta_bar and anchors")
        q = as_points(fn(z)).reshape(z.shape[0], -1)
        nearest = np.argmin(squared_distances(q, self.anchors), axis=1)
        return self.values[nearest]

    def to_json(self) -> dict:
        out = {"eval_points": self.eval_points.tolist(), "values": self.values.tolist(),
               "extension": self.extension, "provenance": self.provenance}
        if self.anchors is not None:
            out["anchors"] = self.anchors.tolist()
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "DenoiserMap":
        return cls(np.asarray(obj["eval_points"], dtype=float),
                   np.asarray(obj["values"], dtype=float),
                   obj["extension"], obj["provenance"], obj.get("anchors"))


def _theta_bar_values(theta_bar, zs) -> np.ndarray:
    if callable(theta_bar):
        return as_points(theta_bar(zs)).reshape(zs.shape[0], -1)
    vals = as_points(theta_bar)
    if vals.shape[0] != zs.shape[0]:
        raise AlignError("theta_bar values do not match the sample")
    return vals


def build_ot_denoiser(sample, theta_bar, G_hat: DiscreteMeasure,
                      cfg: Optional[OTConfig] = None,
                      extension: str = "nearest_posterior_mean",
                      weights=None) -> DenoiserMap:
    """Plug-in OT denoiser tabulated on the sample.

    ``theta_bar`` is a callable (e.g. a :class:`PosteriorMeanEstimator`) or
    the precomputed values ``theta_bar(Z_i)``.  ``weights`` replaces the
    uniform weights of the empirical measure when the sample points carry
    unequal mass.
    """
    if G_hat is None or len(G_hat) == 0:
        raise EmptySample("empty prior estimate")
    zs = as_points(sample)
    if zs.shape[0] == 0:
        raise EmptySample("empty sample")
    b = _theta_bar_values(theta_bar, zs)
    n = b.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    source = DiscreteMeasure(b, w)
    plan = solve_ot(source, G_hat, None, cfg or OTConfig())
    values = barycentric_projection(plan)
    return DenoiserMap(zs, values, extension, "ot_plugin", anchors=b,
                       theta_bar=theta_bar if callable(theta_bar) else None,
                       plan=plan)


def _quantile(G: DiscreteMeasure, u: np.ndarray) -> np.ndarray:
    """Left-continuous quantile ``inf{x : G(x) >= u}`` of a 1D measure."""
    order = np.argsort(G.atoms[:, 0], kind="stable")
    x = G.atoms[order, 0]
    cdf = np.cumsum(G.weights[order])
    idx = np.searchsorted(cdf, u - 1e-12, side="left")
    return x[np.minimum(idx, len(x) - 1)]


def quantile_denoiser_1d(theta_bar_values, G_hat: DiscreteMeasure,
                         eval_points=None) -> DenoiserMap:
    """``Q_G(F(theta_bar))`` with ``F`` the empirical CDF of the values.

    Tied values get consecutive ranks in input order, which is the same
    tie-breaking as the north-west-corner plan, so on ``n`` equal-weight
    atoms the result equals the monotone OT denoiser exactly.
    """
    b = as_points(theta_bar_values)
    if b.shape[1] != 1 or G_hat.dim != 1:
        raise DimError("quantile denoiser needs one-dimensional values and prior")
    n = b.shape[0]
    ranks = np.empty(n)
    ranks[np.argsort(b[:, 0], kind="stable")] = np.arange(1, n + 1)
    values = _quantile(G_hat, ranks / n)[:, None]
    pts = b if eval_points is None else as_points(eval_points)
    return DenoiserMap(pts, values, "nearest_posterior_mean", "quantile_1d", anchors=b)


def population_ot_denoiser_1d(G_star: DiscreteMeasure, sigma: float, zs) -> np.ndarray:
    """Population OT denoiser for ``Z = Theta + sigma * N(0, 1)`` with discrete ``G_star``.

    The posterior mean is increasing in ``z``, so composing with the monotone
    map gives ``Q_G(F_mu(z))`` with ``F_mu`` the mixture CDF.
    """
    if G_star.dim != 1:
        raise DimError("population quantile map needs a one-dimensional prior")
    z = as_points(zs)[:, 0]
    F = ndtr((z[:, None] - G_star.atoms[None, :, 0]) / sigma) @ G_star.weights
    return _quantile(G_star, F)


def interpolate_denoiser(bayes: DenoiserMap, ot: DenoiserMap, tau: float) -> DenoiserMap:
    """``(2 tau theta_bar + delta) / (1 + 2 tau)`` on shared evaluation points."""
    if not tau > 0:
        raise ValueError("tau must be positive")
    if (bayes.eval_points.shape != ot.eval_points.shape
            or not np.array_equal(bayes.eval_points, ot.eval_points)):
        raise AlignError("denoisers are tabulated on different points")
    a = 2.0 * tau / (1.0 + 2.0 * tau)
    b = 1.0 / (1.0 + 2.0 * tau)
    return DenoiserMap(ot.eval_points, a * bayes.values + b * ot.values,
                       ot.extension if ot.extension == bayes.extension else "nearest_posterior_mean",
                       f"interpolant({tau!r})", anchors=ot.anchors if ot.anchors is not None else bayes.anchors,
                       theta_bar=ot.theta_bar or bayes.theta_bar)


def bayes_denoiser(sample, theta_bar) -> DenoiserMap:
    """Tabulate the posterior mean itself as a denoiser."""
    zs = as_points(sample)
    b = _theta_bar_values(theta_bar, zs)
    return DenoiserMap(zs, b, "nearest_posterior_mean", "bayes", anchors=b,
                       theta_bar=theta_bar if callable(theta_bar) else None)


def _psd_sqrt(M: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (M + M.T))
    return (vecs * np.sqrt(np.maximum(vals, 0.0))) @ vecs.T


def brenier_matrix(source_cov, target_cov) -> np.ndarray:
    """Symmetric ``B`` with ``B S B = T``: the linear OT map between centred
    Gaussians ``N(0, S)`` and ``N(0, T)``."""
    S = _spd(source_cov, "source covariance")
    T = _spd(target_cov, "target covariance")
    if S.shape != T.shape:
        raise MatrixError("covariances have different shapes")
    r = _psd_sqrt(S)
    r_inv = np.linalg.inv(r)
    B = r_inv @ _psd_sqrt(r @ T @ r) @ r_inv
    return 0.5 * (B + B.T)


@dataclass(frozen=True)
class GaussianOTDenoiser:
    """Analytic OT denoiser for normal-normal models.

    ``theta_bar(z) = K z + (I - K) theta*`` and
    ``delta(z) = theta* + B (theta_bar(z) - theta*)``.
    """

    theta_star: np.ndarray
    K: np.ndarray
    A: np.ndarray
    B: np.ndarray

    def posterior_mean(self, zs) -> np.ndarray:
        z = as_points(zs).reshape(-1, self.theta_star.size)
        return z @ self.K.T + self.theta_star @ (np.eye(self.theta_star.size) - self.K).T

    def __call__(self, zs) -> np.ndarray:
        tb = self.posterior_mean(zs)
        return self.theta_star + (tb - self.theta_star) @ self.B.T

    def tabulate(self, zs) -> DenoiserMap:
        z = as_points(zs).reshape(-1, self.theta_star.size)
        return DenoiserMap(z, self(z), "nearest_posterior_mean", "gaussian_closed_form",
                           anchors=self.posterior_mean(z), theta_bar=self.posterior_mean)


def gaussian_closed_form_denoiser(theta_star, Sigma_star, Sigma) -> GaussianOTDenoiser:
    mu = np.atleast_1d(np.asarray(theta_star, dtype=float))
    K, A = gaussian_shrinkage(Sigma_star, Sigma)
    B = brenier_matrix(A, np.atleast_2d(np.asarray(Sigma_star, dtype=float)))
    return GaussianOTDenoiser(mu, K, A, B)


def latent_penalty_objective(delta, sample_joint, G_hat: DiscreteMeasure, tau: float,
                             cfg: Optional[OTConfig] = None) -> float:
    """``mean |delta(Z_i) - Theta_i|^2 + W2^2(delta # mu_n, G_hat) / (2 tau)``.

    ``delta`` is a :class:`DenoiserMap` tabulated on the sample, a callable,
    or an array of values ``delta(Z_i)``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    thetas, zs = sample_joint
    th = as_points(thetas)
    z = as_points(zs).reshape(th.shape[0], -1)
    if isinstance(delta, DenoiserMap):
        if delta.eval_points.shape == z.shape and np.array_equal(delta.eval_points, z):
            vals = delta.values
        else:
            vals = delta.evaluate(z)
    elif callable(delta):
        vals = as_points(delta(z))
    else:
        vals = as_points(delta)
    vals = vals.reshape(th.shape)
    risk = float(np.mean(np.sum((vals - th) ** 2, axis=1)))
    n = vals.shape[0]
    penalty = w2_squared(DiscreteMeasure(vals, np.full(n, 1.0 / n)), G_hat, cfg)
    return risk + penalty / (2.0 * tau)


@dataclass
class LatentRelaxationResult:
    value: float
    values: np.ndarray
    candidates: np.ndarray
    pi_z: np.ndarray
    pi_g: np.ndarray


def solve_latent_relaxation(theta_bar_values, G_hat: DiscreteMeasure, tau: float,
                            weights=None, candidates=None) -> LatentRelaxationResult:
    """Coupling relaxation of ``min_delta E|delta - theta_bar|^2 + W2^2/(2 tau)``.

    Variables are ``pi_z[i, k]`` (observation ``i`` sent to candidate
    ``t_k``) and ``pi_g[k, j]`` (candidate ``t_k`` coupled to prior atom
    ``y_j``), with matching candidate marginals.  The default candidate set
    ``{(2 tau b_i + y_j) / (1 + 2 tau)}`` contains every pointwise minimizer,
    so the discrete problem is exact.  The returned map is the barycentric
    projection of ``pi_z``.
    """
    if not tau > 0:
        raise ValueError("tau must be positive")
    b = as_points(theta_bar_values)
    n = b.shape[0]
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float)
    y = G_hat.atoms
    if candidates is None:
        candidates = ((2 * tau * b[:, None, :] + y[None, :, :]) / (1 + 2 * tau)).reshape(-1, b.shape[1])
    t = as_points(candidates)
    K, J = t.shape[0], y.shape[0]
    c1 = squared_distances(b, t).ravel()
    c2 = squared_distances(t, y).ravel() / (2 * tau)
    cost = np.concatenate([c1, c2])
    # row sums of pi_z, column sums of pi_g, candidate balance
    A_rows = sparse.kron(sparse.eye(n), np.ones((1, K)))
    A_cols = sparse.kron(np.ones((1, K)), sparse.eye(J))
    bal_z = sparse.kron(np.ones((1, n)), sparse.eye(K))
    bal_g = -sparse.kron(sparse.eye(K), np.ones((1, J)))
    A = sparse.vstack([
        sparse.hstack([A_rows, sparse.csr_matrix((n, K * J))]),
        sparse.hstack([sparse.csr_matrix((J, n * K)), A_cols]),
        sparse.hstack([bal_z, bal_g]),
    ]).tocsr()
    rhs = np.concatenate([w, G_hat.weights, np.zeros(K)])
    res = linprog(cost, A_eq=A, b_eq=rhs, bounds=(0, None), method="highs-ds",
                  options={"primal_feasibility_tolerance": 1e-10,
                           "dual_feasibility_tolerance": 1e-10})
    if res.status != 0:
        raise SolverError(f"latent relaxation LP failed: {res.message}")
    x = np.maximum(res.x, 0.0)
    pi_z = x[:n * K].reshape(n, K)
    pi_g = x[n * K:].reshape(K, J)
    values = (pi_z @ t) / pi_z.sum(axis=1, keepdims=True)
    return LatentRelaxationResult(float(res.fun), values, t, pi_z, pi_g)


def latent_penalty_minimizer(theta_bar_values, G_hat: DiscreteMeasure, tau: float,
                             cfg: Optional[OTConfig] = None) -> np.ndarray:
    """Closed-form minimizer ``(2 tau theta_bar + delta_OT) / (1 + 2 tau)``."""
    b = as_points(theta_bar_values)
    ot = build_ot_denoiser(b, b, G_hat, cfg)
    return (2 * tau * b + ot.values) / (1 + 2 * tau)


__all__ = [
    "DenoiserMap", "build_ot_denoiser", "quantile_denoiser_1d", "interpolate_denoiser",
    "bayes_denoiser", "brenier_matrix", "GaussianOTDenoiser", "population_ot_denoiser_1d",
    "gaussian_closed_form_denoiser", "latent_penalty_objective",
    "solve_latent_relaxation", "latent_penalty_minimizer", "LatentRelaxationResult",
]
