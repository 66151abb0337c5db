"""Parametric likelihood families p(z | theta) and the generative model.

Every model works on batches: observations are ``(n, d)`` arrays and latent
parameters ``(n, m)`` or ``(J, m)`` arrays.  ``logpdf_matrix(zs, thetas)``
returns the full ``(n, J)`` table of log-likelihoods, which is what the
posterior-mean and NPMLE code consume.

Randomness goes through :func:`stream_rng`: a Philox (counter-based) generator
keyed by ``(seed, *stream_ids)``, so each stream is independent and the result
of a replication never depends on which worker ran it.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Optional, Union

import numpy as np

from .errors import DomainError, MatrixError, Unsupported
from .measures import DiscreteMeasure, as_points

LOG_2PI = math.log(2.0 * math.pi)


def stream_rng(seed: int, *stream: int) -> np.random.Generator:
    """Independent generator for the stream ``(seed, *stream)``."""
    ss = np.random.SeedSequence(int(seed) % 2 ** 64,
                                spawn_key=tuple(int(s) for s in stream))
    return np.random.Generator(np.random.Philox(ss))


class LikelihoodModel:
    """Base class; subclasses fill in the family-specific pieces."""

    family = "abstract"
    obs_dim = 1
    latent_dim = 1
    differentiable = True

    def __init__(self, lower=None, upper=None):
        m = self.latent_dim
        self.lower = np.full(m, -np.inf) if lower is None else np.broadcast_to(
            np.asarray(lower, dtype=float), (m,)).copy()
        self.upper = np.full(m, np.inf) if upper is None else np.broadcast_to(
            np.asarray(upper, dtype=float), (m,)).copy()

    # -- parameter domain -------------------------------------------------
    def in_domain(self, thetas) -> np.ndarray:
        th = as_points(thetas)
        return np.all((th >= self.lower) & (th <= self.upper), axis=1)

    def check_theta(self, thetas) -> np.ndarray:
        th = as_points(thetas)
        if th.shape[1] != self.latent_dim:
            raise DomainError(
                f"theta has dimension {th.shape[1]}, expected {self.latent_dim}")
        bad = ~self.in_domain(th)
        if np.any(bad):
            raise DomainError(f"theta {th[np.argmax(bad)].tolist()} outside the domain")
        return th

    def project(self, thetas) -> np.ndarray:
        return np.clip(as_points(thetas), self.lower, self.upper)

    def _obs(self, zs) -> np.ndarray:
        z = as_points(zs)
        if z.shape[1] != self.obs_dim and z.shape[0] == self.obs_dim and z.shape[1] == 1:
            z = z.reshape(1, -1)
        return z

    # -- family interface -------------------------------------------------
    def _logpdf_pairs(self, z: np.ndarray, th: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def _score_pairs(self, z: np.ndarray, th: np.ndarray) -> np.ndarray:
        raise Unsupported(f"{self.family} is not differentiable in theta")

    def _sample(self, th: np.ndarray, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    # -- public batch API -------------------------------------------------
    def logpdf(self, zs, thetas) -> np.ndarray:
        """Log density for matched rows of ``zs`` and ``thetas``."""
        th = self.check_theta(thetas)
        z = self._obs(zs)
        return self._logpdf_pairs(z, th)

    def logpdf_matrix(self, zs, thetas) -> np.ndarray:
        """``(n, J)`` table of ``log p(z_i | theta_j)``."""
        th = self.check_theta(thetas)
        z = self._obs(zs)
        n, J = z.shape[0], th.shape[0]
        zz = np.repeat(z, J, axis=0)
        tt = np.tile(th, (n, 1))
        return self._logpdf_pairs(zz, tt).reshape(n, J)

    def score(self, zs, thetas) -> np.ndarray:
        """``grad_theta log p(z_i | theta_i)`` for matched rows, shape (n, m)."""
        if not self.differentiable:
            raise Unsupported(f"{self.family} is not differentiable in theta")
        th = self.check_theta(thetas)
        z = self._obs(zs)
        return self._score_pairs(z, th)

    def sample(self, thetas, rng: np.random.Generator) -> np.ndarray:
        """One observation per row of ``thetas``."""
        return self._sample(self.check_theta(thetas), rng)

    def tweedie(self, z: np.ndarray, grad_log_f: np.ndarray) -> np.ndarray:
        raise Unsupported(f"{self.family} has no Tweedie representation")

    def to_json(self) -> dict:
        raise Unsupported(f"{self.family} is not serializable")


class GaussianLocation(LikelihoodModel):
    """``N(theta, sigma^2 I_d)`` with ``theta`` in R^d."""

    family = "gaussian_location"

    def __init__(self, sigma: float = 1.0, dim: int = 1):
        if not sigma > 0:
            raise ValueError("sigma must be positive")
        self.sigma = float(sigma)
        self.obs_dim = self.latent_dim = int(dim)
        super().__init__()

    def _logpdf_pairs(self, z, th):
        d = self.obs_dim
        s2 = self.sigma ** 2
        return (-0.5 * np.sum((z - th) ** 2, axis=1) / s2
                - 0.5 * d * (LOG_2PI + math.log(s2)))

    def _score_pairs(self, z, th):
        return (z - th) / self.sigma ** 2

    def _sample(self, th, rng):
        return th + self.sigma * rng.standard_normal(th.shape)

    def tweedie(self, z, grad_log_f):
        return as_points(z) + self.sigma ** 2 * np.asarray(grad_log_f)

    def to_json(self):
        return {"family": self.family, "sigma": self.sigma, "dim": self.obs_dim}


class GaussianScale(LikelihoodModel):
    """``N(0, theta^2)`` on R with ``theta >= theta_min > 0``."""

    family = "gaussian_scale"

    def __init__(self, theta_min: float = 1e-3):
        if not theta_min > 0:
            raise ValueError("theta_min must be positive")
        self.theta_min = float(theta_min)
        super().__init__(lower=self.theta_min)

    def _logpdf_pairs(self, z, th):
        t = th[:, 0]
        return -0.5 * (z[:, 0] / t) ** 2 - np.log(t) - 0.5 * LOG_2PI

    def _score_pairs(self, z, th):
        t = th[:, 0]
        return (-1.0 / t + z[:, 0] ** 2 / t ** 3)[:, None]

    def _sample(self, th, rng):
        return th * rng.standard_normal(th.shape)

    def to_json(self):
        return {"family": self.family, "theta_min": self.theta_min}


class UniformScale(LikelihoodModel):
    """Uniform density on ``[0, theta]``; not differentiable in ``theta``."""

    family = "uniform_scale"
    differentiable = False

    def __init__(self, theta_min: float = 1e-3):
        if not theta_min > 0:
            raise ValueError("theta_min must be positive")
        self.theta_min = float(theta_min)
        super().__init__(lower=self.theta_min)

    def _logpdf_pairs(self, z, th):
        t = th[:, 0]
        x = z[:, 0]
        inside = (x >= 0) & (x <= t)
        with np.errstate(divide="ignore"):
            return np.where(inside, -np.log(t), -np.inf)

    def _sample(self, th, rng):
        return th * rng.random(th.shape)

    def to_json(self):
        return {"family": self.family, "theta_min": self.theta_min}


class ExponentialFamily(LikelihoodModel):
    """Canonical family ``exp(<theta, T(z)> - A(theta)) h(z)``.

    ``suff_stat``, ``log_base`` and ``log_partition`` act on batches;
    ``grad_log_partition`` returns ``E_theta[T(Z)]``.  ``grad_log_base`` is only
    needed for Tweedie's formula, which additionally requires ``T`` to be the
    identity.
    """

    family = "exp_family"

    def __init__(self, suff_stat: Callable, log_base: Callable,
                 log_partition: Callable, grad_log_partition: Callable,
                 sampler: Callable, obs_dim: int = 1, latent_dim: int = 1,
                 lower=None, upper=None, grad_log_base: Optional[Callable] = None,
                 identity_statistic: bool = False):
        self.obs_dim = int(obs_dim)
        self.latent_dim = int(latent_dim)
        self.suff_stat = suff_stat
        self.log_base = log_base
        self.log_partition = log_partition
        self.grad_log_partition = grad_log_partition
        self.sampler = sampler
        self.grad_log_base = grad_log_base
        self.identity_statistic = identity_statistic
        super().__init__(lower, upper)

    def _logpdf_pairs(self, z, th):
        T = as_points(self.suff_stat(z))
        with np.errstate(divide="ignore"):
            return (np.sum(th * T, axis=1) - np.asarray(self.log_partition(th))
                    + np.asarray(self.log_base(z)))

    def _score_pairs(self, z, th):
        return as_points(self.suff_stat(z)) - as_points(self.grad_log_partition(th))

    def _sample(self, th, rng):
        return as_points(self.sampler(th, rng))

    def tweedie(self, z, grad_log_f):
        if not self.identity_statistic or self.grad_log_base is None:
            raise Unsupported("Tweedie needs T(z) = z and a differentiable base")
        z = as_points(z)
        return np.asarray(grad_log_f) - as_points(self.grad_log_base(z))


def normal_exp_family(sigma: float = 1.0) -> ExponentialFamily:
    """Canonical form of ``N(sigma^2 theta, sigma^2)``: ``T(z) = z``.

    The natural parameter is ``theta = mean / sigma^2`` and
    ``A(theta) = sigma^2 theta^2 / 2``.
    """
    s2 = float(sigma) ** 2

    def log_base(z):
        return -0.5 * z[:, 0] ** 2 / s2 - 0.5 * (LOG_2PI + math.log(s2))

    return ExponentialFamily(
        suff_stat=lambda z: z,
        log_base=log_base,
        log_partition=lambda th: 0.5 * s2 * th[:, 0] ** 2,
        grad_log_partition=lambda th: s2 * th,
        sampler=lambda th, rng: s2 * th + math.sqrt(s2) * rng.standard_normal(th.shape),
        grad_log_base=lambda z: -z / s2,
        identity_statistic=True,
    )


def model_from_json(obj: dict) -> LikelihoodModel:
    fam = obj.get("family")
    if fam == "gaussian_location":
        return GaussianLocation(obj.get("sigma", 1.0), obj.get("dim", 1))
    if fam == "gaussian_scale":
        return GaussianScale(obj.get("theta_min", 1e-3))
    if fam == "uniform_scale":
        return UniformScale(obj.get("theta_min", 1e-3))
    raise ValueError(f"unknown likelihood family {fam!r}")


# -- module-level operations ------------------------------------------------

def density(model: LikelihoodModel, z, theta) -> float:
    z = np.atleast_1d(np.asarray(z, dtype=float)).reshape(1, -1)
    th = np.atleast_1d(np.asarray(theta, dtype=float)).reshape(1, -1)
    return float(np.exp(model.logpdf(z, th)[0]))


def score_theta(model: LikelihoodModel, z, theta) -> np.ndarray:
    z = np.atleast_1d(np.asarray(z, dtype=float)).reshape(1, -1)
    th = np.atleast_1d(np.asarray(theta, dtype=float)).reshape(1, -1)
    return model.score(z, th)[0]


def marginal_density(model: LikelihoodModel, prior: DiscreteMeasure, z) -> np.ndarray:
    """Mixture density ``sum_j w_j p(z | theta_j)``; scalar for one point."""
    arr = np.asarray(z, dtype=float)
    single = arr.ndim == 0 or (arr.ndim == 1 and arr.size == model.obs_dim)
    zs = arr.reshape(1, -1) if single else as_points(arr)
    vals = np.exp(model.logpdf_matrix(zs, prior.atoms)) @ prior.weights
    return float(vals[0]) if single else vals


@dataclass(frozen=True)
class GaussianPrior:
    """Closed-form ``N(mean, cov)`` prior, used for the normal-normal oracles."""

    mean: np.ndarray
    cov: np.ndarray

    def __post_init__(self):
        mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        cov = np.atleast_2d(np.asarray(self.cov, dtype=float))
        if cov.shape != (mean.size, mean.size):
            raise MatrixError("covariance shape does not match the mean")
        object.__setattr__(self, "mean", mean)
        object.__setattr__(self, "cov", cov)

    @property
    def dim(self) -> int:
        return self.mean.size

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        chol = np.linalg.cholesky(self.cov)
        return self.mean + rng.standard_normal((n, self.dim)) @ chol.T

    def to_json(self) -> dict:
        return {"gaussian": {"mean": self.mean.tolist(), "cov": self.cov.tolist()}}


Prior = Union[DiscreteMeasure, GaussianPrior]


def prior_from_json(obj: dict) -> Prior:
    if "gaussian" in obj:
        g = obj["gaussian"]
        return GaussianPrior(g["mean"], g["cov"])
    return DiscreteMeasure.from_json(obj)


@dataclass(frozen=True)
class GenerativeSpec:
    model: LikelihoodModel
    prior: Prior
    seed: int = 0
    extra: dict = field(default_factory=dict, compare=False)

    def __post_init__(self):
        if isinstance(self.prior, DiscreteMeasure):
            self.model.check_theta(self.prior.atoms)

    def to_json(self) -> dict:
        return {"model": self.model.to_json(), "prior": self.prior.to_json(),
                "seed": int(self.seed)}

    @classmethod
    def from_json(cls, obj: dict) -> "GenerativeSpec":
        return cls(model_from_json(obj["model"]), prior_from_json(obj["prior"]),
                   int(obj["seed"]))


def sample_prior(prior: Prior, n: int, rng: np.random.Generator) -> np.ndarray:
    if isinstance(prior, GaussianPrior):
        return prior.sample(n, rng)
    idx = rng.choice(len(prior), size=n, p=prior.weights)
    return np.array(prior.atoms[idx])


def sample_joint(spec: GenerativeSpec, n: int, stream: int = 0):
    """Draw ``(thetas, zs)`` with ``Theta ~ prior`` and ``Z | Theta ~ p``.

    Deterministic in ``(spec.seed, stream)``.
    """
    if n < 1:
        raise ValueError("n must be at least 1")
    rng = stream_rng(spec.seed, 0, stream)
    thetas = sample_prior(spec.prior, n, rng)
    zs = spec.model.sample(thetas, rng)
    return thetas, zs
