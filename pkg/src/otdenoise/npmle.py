"""Nonparametric maximum likelihood for the mixing distribution on a fixed grid.

The objective ``(1/n) sum_i log sum_j w_j p(z_i | theta_j)`` is concave in
the weight vector.  Two solvers are provided:

* ``em``: the multiplicative update ``w_j <- w_j * g_j`` with
  ``g_j = (1/n) sum_i p(z_i|theta_j) / f(z_i)``, accelerated by SQUAREM.  An
  extrapolated step is kept only if it does not lower the likelihood, so the
  trace is monotone.  After a burn-in, each EM step is followed by a
  constrained Newton correction on the support: EM alone converges
  sublinearly while the weights of spurious atoms decay.
* ``frank_wolfe``: fully corrective Frank-Wolfe.  Each iteration adds the
  grid atom with the largest gradient and re-optimizes the weights on the
  support with the same Newton correction.

Optimality is certified by the gradient condition ``g_j <= 1`` on the grid
with equality on the support; :func:`kkt_residual` reports the violation
scaled by ``n``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import List

import numpy as np
from scipy.optimize import nnls

from .errors import InfeasibleSample
from .likelihood import LikelihoodModel
from .measures import DiscreteMeasure, as_points

PRUNE_TOL = 1e-10


@dataclass(frozen=True)
class NpmleConfig:
    grid: DiscreteMeasure
    max_iters: int = 20_000
    tol: float = 1e-12
    algorithm: str = "em"
    kkt_tol: float = 1e-8

    def __post_init__(self):
        if self.algorithm not in ("em", "frank_wolfe"):
            raise ValueError(f"unknown NPMLE algorithm {self.algorithm!r}")
        if not self.tol > 0:
            raise ValueError("tol must be positive")
        if int(self.max_iters) < 1:
            raise ValueError("max_iters must be positive")


@dataclass
class NpmleResult:
    measure: DiscreteMeasure
    trace: List[float] = field(default_factory=list)
    kkt: float = np.inf
    iterations: int = 0
    converged: bool = False
    full_weights: np.ndarray = None


def _scaled_likelihood(model: LikelihoodModel, sample, atoms):
    """Row-rescaled likelihood matrix and the log row scales."""
    zs = as_points(sample).reshape(-1, model.obs_dim)
    logL = model.logpdf_matrix(zs, atoms)
    shift = logL.max(axis=1)
    bad = ~np.isfinite(shift)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise InfeasibleSample(
            f"observation {i} (z = {zs[i].tolist()}) has zero likelihood "
            "under every grid atom", index=i)
    return np.exp(logL - shift[:, None]), shift


def loglik(model: LikelihoodModel, sample, G: DiscreteMeasure) -> float:
    """Average log marginal density of the sample under ``G``."""
    zs = as_points(sample).reshape(-1, model.obs_dim)
    logL = model.logpdf_matrix(zs, G.atoms)
    with np.errstate(divide="ignore"):
        vals = np.log(np.exp(logL - logL.max(axis=1, keepdims=True)) @ G.weights)
        vals += logL.max(axis=1)
    bad = ~np.isfinite(vals)
    if np.any(bad):
        i = int(np.argmax(bad))
        raise InfeasibleSample(f"observation {i} has zero marginal density", index=i)
    return float(np.mean(vals))


def _ll(L, shift, w) -> float:
    f = L @ w
    if np.any(f <= 0):
        return -np.inf
    return float(np.mean(np.log(f) + shift))


def kkt_residual(L: np.ndarray, w: np.ndarray, support_tol: float = PRUNE_TOL) -> float:
    """``max_j (G_j - n)_+`` over the grid and ``max |G_j - n|`` on the support,
    where ``G_j = sum_i L_ij / f_i``.  Scaled by ``n`` like the raw condition."""
    n = L.shape[0]
    grad = (L / (L @ w)[:, None]).sum(axis=0)
    over = max(0.0, float(np.max(grad - n)))
    on_support = w > support_tol
    gap = float(np.max(np.abs(grad[on_support] - n))) if np.any(on_support) else 0.0
    return max(over, gap)


def _em_step(L, w):
    f = L @ w
    return w * (L.T @ (1.0 / f)) / L.shape[0]


def _corrective_step(L, shift, w, ll):
    """One constrained Newton step on the support plus every ascent atom.

    Minimizes ``|S v - 2|^2`` with ``S_ij = L_ij / f_i`` over the simplex
    (a second-order model of the log-likelihood around ``w``), then backtracks along ``v - w`` until the likelihood does not drop.
    Returns the new weights and log-likelihood (unchanged if no ascent).
    """
    f = L @ w
    grad = L.T @ (1.0 / f) / L.shape[0]
    support = np.flatnonzero(w > 0)
    ascent = np.flatnonzero(grad > 1.0)
    cols = np.union1d(support, np.union1d(ascent, [int(np.argmax(grad))]))
    S = L[:, cols] / f[:, None]
    # quadratic model of the log-likelihood on the simplex; the unit-mass
    # constraint enters as a heavily weighted extra row
    big = 1e3 * np.sqrt(L.shape[0]) * max(1.0, float(np.abs(S).max()))
    A = np.vstack([S, np.full((1, len(cols)), big)])
    b = np.concatenate([np.full(L.shape[0], 2.0), [big]])
    v_sub, _ = nnls(A, b, maxiter=50 * len(cols))
    if v_sub.sum() <= 0:
        return w, ll
    v = np.zeros_like(w)
    v[cols] = v_sub / v_sub.sum()
    step = 1.0
    for _ in range(60):
        cand = w + step * (v - w)
        cand = np.where(cand > 0, cand, 0.0)
        cand /= cand.sum()
        new = _ll(L, shift, cand)
        if new >= ll:
            return cand, new
        step *= 0.5
    return w, ll


def _squarem_step(L, shift, w, ll):
    w1 = _em_step(L, w)
    w2 = _em_step(L, w1)
    r = w1 - w
    v = w2 - 2 * w1 + w
    cand, new = w2, _ll(L, shift, w2)
    nv = np.linalg.norm(v)
    if nv > 0:
        alpha = -np.linalg.norm(r) / nv
        if alpha < -1:
            ext = np.maximum(w - 2 * alpha * r + alpha ** 2 * v, 0.0)
            if ext.sum() > 0:
                ext = _em_step(L, ext / ext.sum())
                ext_ll = _ll(L, shift, ext)
                if ext_ll >= new:
                    cand, new = ext, ext_ll
    if new < ll:  # never accept a decrease
        return w, ll
    return cand / cand.sum(), new


def _run(L, shift, w, cfg, step):
    """Iterate ``step`` with the shared stopping rules; returns the trace."""
    n = L.shape[0]
    trace = [_ll(L, shift, w)]
    converged = False
    it = 0
    stalls = 0
    while it < cfg.max_iters:
        if kkt_residual(L, w) <= cfg.kkt_tol * n:
            converged = True
            break
        it += 1
        w_new, ll = step(L, shift, w, trace[-1], it)
        improve = (ll - trace[-1]) / max(abs(trace[-1]), 1.0)
        w = w_new
        trace.append(ll)
        stalls = stalls + 1 if improve < cfg.tol else 0
        if stalls >= 3:
            converged = kkt_residual(L, w) <= cfg.kkt_tol * n
            break
    return w, trace, it, converged


def _em_driver(L, shift, w, ll, it, burn_in=200):
    # plain accelerated EM first; the Newton correction takes over once EM
    # has located the support (EM alone stalls on vanishing atoms)
    if it <= burn_in:
        return _squarem_step(L, shift, w, ll)
    return _corrective_step(L, shift, w, ll)


def _fw_driver(L, shift, w, ll, it):
    # fully corrective Frank-Wolfe: the corrective step adds the atom with
    # the largest gradient and re-optimizes the weights on the support
    return _corrective_step(L, shift, w, ll)


def npmle_fit(model: LikelihoodModel, sample, cfg: NpmleConfig) -> NpmleResult:
    """Fit the grid NPMLE; atoms below weight 1e-10 are pruned from the result."""
    atoms = np.asarray(cfg.grid.atoms)
    model.check_theta(atoms)
    L, shift = _scaled_likelihood(model, sample, atoms)
    J = atoms.shape[0]
    if cfg.algorithm == "em":
        w, trace, it, conv = _run(L, shift, np.full(J, 1.0 / J), cfg, _em_driver)
    else:
        # start from the single atom that explains the sample best, if it
        # gives every observation positive density
        with np.errstate(divide="ignore"):
            start = int(np.argmax(np.log(L).sum(axis=0)))
        w0 = np.zeros(J)
        w0[start] = 1.0
        if np.any(L[:, start] == 0):
            w0 = np.full(J, 1.0 / J)
        w, trace, it, conv = _run(L, shift, w0, cfg, _fw_driver)
    keep = w >= PRUNE_TOL
    G = DiscreteMeasure.normalized(atoms[keep], w[keep])
    full = np.zeros(J)
    full[keep] = G.weights
    return NpmleResult(G, trace, kkt_residual(L, full), it, conv, full)


def default_grid(sample, size: int = 50, pad: float = 0.2) -> DiscreteMeasure:
    """Per-dimension quantile grid of the sample, range padded by ``pad``.

    In more than one dimension the grid is the product of the per-dimension
    grids.  Weights are uniform and only serve to make a valid measure.
    """
    x = as_points(sample)
    axes = []
    for col in x.T:
        lo, hi = col.min(), col.max()
        span = hi - lo if hi > lo else 1.0
        q = np.quantile(col, np.linspace(0, 1, max(size - 2, 1)))
        axes.append(np.unique(np.concatenate([q, [lo - pad * span, hi + pad * span]])))
    mesh = np.meshgrid(*axes, indexing="ij")
    atoms = np.stack([m.ravel() for m in mesh], axis=1)
    return DiscreteMeasure(atoms, np.full(len(atoms), 1.0 / len(atoms)))
