"""Posterior mean E[Theta | Z = z], computed three independent ways.

* ``posterior_mean_discrete``: exact Bayes ratio under a discrete prior.
* ``posterior_mean_gaussian``: affine closed form for normal-normal models.
* ``tweedie_estimate``: prior-free, from a Gaussian-kernel density estimate of
  the marginal and its analytic gradient.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional

import numpy as np
from scipy.optimize import isotonic_regression
from scipy.special import logsumexp, softmax

from .errors import Degenerate, LowDensity, MatrixError
from .likelihood import LikelihoodModel
from .measures import DiscreteMeasure, as_points

DENSITY_FLOOR = 1e-12


def _query(z, dim: int):
    """Return ``(points, single)`` for a query that may be one point or many."""
    arr = np.asarray(z, dtype=float)
    single = arr.ndim == 0 or (arr.ndim == 1 and arr.size == dim and dim > 1)
    if single:
        return arr.reshape(1, -1), True
    pts = as_points(arr)
    if pts.shape[1] != dim:
        pts = pts.reshape(-1, dim)
    return pts, False


def posterior_mean_discrete(model: LikelihoodModel, prior: DiscreteMeasure, z):
    """Bayes posterior mean under a discrete prior.

    Accepts one point (returns shape ``(m,)``) or a batch (returns ``(n, m)``).
    """
    zs, single = _query(z, model.obs_dim)
    with np.errstate(divide="ignore"):
        logw = np.log(prior.weights)
    log_joint = model.logpdf_matrix(zs, prior.atoms) + logw
    norm = logsumexp(log_joint, axis=1)
    if not np.all(np.isfinite(norm)):
        bad = int(np.argmax(~np.isfinite(norm)))
        raise Degenerate(f"zero marginal density at z = {zs[bad].tolist()}")
    post = np.exp(log_joint - norm[:, None])
    out = post @ prior.atoms
    return out[0] if single else out


def _spd(mat, name: str) -> np.ndarray:
    m = np.atleast_2d(np.asarray(mat, dtype=float))
    if m.shape[0] != m.shape[1]:
        raise MatrixError(f"{name} is not square")
    if not np.allclose(m, m.T, rtol=1e-10, atol=1e-12):
        raise MatrixError(f"{name} is not symmetric")
    if np.linalg.eigvalsh(m).min() <= 0:
        raise MatrixError(f"{name} is not positive definite")
    return m


def gaussian_shrinkage(Sigma_star, Sigma):
    """``K = Sigma*(Sigma* + Sigma)^{-1}`` and ``A = K Sigma*``."""
    Ss = _spd(Sigma_star, "Sigma_star")
    S = _spd(Sigma, "Sigma")
    if Ss.shape != S.shape:
        raise MatrixError("covariances have different shapes")
    K = np.linalg.solve((Ss + S).T, Ss.T).T
    A = K @ Ss
    return K, 0.5 * (A + A.T)


def posterior_mean_gaussian(theta_star, Sigma_star, Sigma, z):
    """Normal-normal posterior mean ``K z + (I - K) theta*``."""
    K, _ = gaussian_shrinkage(Sigma_star, Sigma)
    mu = np.atleast_1d(np.asarray(theta_star, dtype=float))
    zs, single = _query(z, mu.size)
    out = zs @ K.T + mu @ (np.eye(mu.size) - K).T
    return out[0] if single else out


def default_bandwidth(sample, c: float = 1.0) -> float:
    """Scale rule ``c * n^{-1/(d+4)} * std`` (std averaged over coordinates)."""
    x = as_points(sample)
    n, d = x.shape
    scale = float(np.mean(np.std(x, axis=0)))
    if scale <= 0:
        scale = 1.0
    return c * n ** (-1.0 / (d + 4)) * scale


def kde_log_grad(sample, bandwidth: float, z):
    """``log f_hat(z)`` and ``grad f_hat / f_hat`` for a Gaussian-kernel KDE."""
    if not bandwidth > 0:
        raise ValueError("bandwidth must be positive")
    x = as_points(sample)
    n, d = x.shape
    zs = as_points(z).reshape(-1, d)
    h2 = bandwidth ** 2
    logs = np.empty(zs.shape[0])
    grads = np.empty_like(zs)
    # chunk the query set so memory stays O(chunk * n)
    step = max(1, 2_000_000 // max(n * d, 1))
    for lo in range(0, zs.shape[0], step):
        q = zs[lo:lo + step]
        diff = x[None, :, :] - q[:, None, :]
        e = -0.5 * np.sum(diff ** 2, axis=2) / h2
        logs[lo:lo + step] = (logsumexp(e, axis=1) - np.log(n)
                              - 0.5 * d * np.log(2 * np.pi * h2))
        w = softmax(e, axis=1)
        grads[lo:lo + step] = np.einsum("qn,qnd->qd", w, diff) / h2
    return logs, grads


def tweedie_from_score(model: LikelihoodModel, z, grad_log_f):
    """Tweedie's formula given the marginal score ``grad log f`` at ``z``."""
    return model.tweedie(as_points(z).reshape(-1, model.obs_dim),
                         np.asarray(grad_log_f, dtype=float).reshape(-1, model.obs_dim))


def tweedie_estimate(sample, model: LikelihoodModel, bandwidth: Optional[float], z):
    """Posterior mean from a KDE of the marginal, no prior needed.

    Raises :class:`LowDensity` when the KDE at a query point is below 1e-12;
    widening the bandwidth is the caller's call.
    """
    x = as_points(sample)
    if bandwidth is None:
        bandwidth = default_bandwidth(x)
    zs, single = _query(z, model.obs_dim)
    logf, grad = kde_log_grad(x, bandwidth, zs)
    low = logf < np.log(DENSITY_FLOOR)
    if np.any(low):
        i = int(np.argmax(low))
        raise LowDensity(
            f"density estimate {np.exp(logf[i]):.3e} at z = {zs[i].tolist()} "
            f"is below {DENSITY_FLOOR}")
    out = model.tweedie(zs, grad)
    return out[0] if single else out


def isotonic_projection(grid, values) -> np.ndarray:
    """Nondecreasing least-squares fit of ``values`` ordered by ``grid`` (1D)."""
    g = np.asarray(grid, dtype=float).reshape(-1)
    v = np.asarray(values, dtype=float).reshape(-1)
    order = np.argsort(g, kind="stable")
    fitted = isotonic_regression(v[order]).x
    out = np.empty_like(v)
    out[order] = fitted
    return out


@dataclass(frozen=True)
class PosteriorMeanEstimator:
    """A callable ``z -> theta_bar(z)`` with its backing data.

    Build with :meth:`discrete`, :meth:`gaussian` or :meth:`tweedie`.
    Calling it on ``(n, d)`` points returns ``(n, m)`` values.
    """

    kind: str
    fn: Callable = None
    data: dict = None

    def __post_init__(self):
        if self.kind not in ("discrete_exact", "gaussian_closed_form", "tweedie_kde"):
            raise ValueError(f"unknown estimator kind {self.kind!r}")
        if self.kind == "tweedie_kde" and not self.data["bandwidth"] > 0:
            raise ValueError("bandwidth must be positive")

    def __call__(self, zs) -> np.ndarray:
        return self.fn(zs)

    @classmethod
    def discrete(cls, model: LikelihoodModel, prior: DiscreteMeasure):
        return cls("discrete_exact",
                   lambda zs: posterior_mean_discrete(model, prior, as_points(zs).reshape(-1, model.obs_dim)),
                   {"model": model, "prior": prior})

    @classmethod
    def gaussian(cls, theta_star, Sigma_star, Sigma):
        mu = np.atleast_1d(np.asarray(theta_star, dtype=float))
        gaussian_shrinkage(Sigma_star, Sigma)  # validate now, not on first call
        return cls("gaussian_closed_form",
                   lambda zs: posterior_mean_gaussian(mu, Sigma_star, Sigma,
                                                      as_points(zs).reshape(-1, mu.size)),
                   {"theta_star": mu, "Sigma_star": Sigma_star, "Sigma": Sigma})

    @classmethod
    def tweedie(cls, sample, model: LikelihoodModel, bandwidth: Optional[float] = None):
        x = as_points(sample)
        h = default_bandwidth(x) if bandwidth is None else float(bandwidth)
        return cls("tweedie_kde",
                   lambda zs: tweedie_estimate(x, model, h, as_points(zs).reshape(-1, model.obs_dim)),
                   {"sample": x, "model": model, "bandwidth": h})


__all__ = [
    "posterior_mean_discrete", "posterior_mean_gaussian", "gaussian_shrinkage",
    "tweedie_estimate", "tweedie_from_score", "kde_log_grad", "default_bandwidth",
    "isotonic_projection", "PosteriorMeanEstimator", "DENSITY_FLOOR",
]
