"""Finite discrete measures, pushforwards and couplings.

Atoms are stored as a 2-D float array of shape ``(n, k)`` even when ``k == 1``,
so every solver can treat one- and multi-dimensional measures alike.
Duplicate atoms are never merged: an empirical measure keeps one atom per
observation, which lets plan rows index observations directly.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import sparse

from .errors import DimError, EmptySample, MeasureError

WEIGHT_TOL = 1e-12
PLAN_TOL = 1e-9
DUAL_FEAS_TOL = 1e-9
DUALITY_GAP_TOL = 1e-7


def as_points(points) -> np.ndarray:
    """Coerce a list of points (scalars or vectors) to an ``(n, k)`` array."""
    arr = np.asarray(points, dtype=float)
    if arr.ndim == 0:
        arr = arr.reshape(1, 1)
    elif arr.ndim == 1:
        arr = arr.reshape(-1, 1)
    elif arr.ndim != 2:
        raise DimError(f"points must be 1-D or 2-D, got shape {arr.shape}")
    return arr


def _freeze(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, dtype=float, copy=True)
    arr.setflags(write=False)
    return arr


@dataclass(frozen=True)
class DiscreteMeasure:
    atoms: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        atoms = as_points(self.atoms)
        weights = np.asarray(self.weights, dtype=float).reshape(-1)
        if atoms.shape[0] == 0:
            raise EmptySample("a measure needs at least one atom")
        if weights.shape[0] != atoms.shape[0]:
            raise MeasureError(
                f"{atoms.shape[0]} atoms but {weights.shape[0]} weights")
        if not np.all(np.isfinite(atoms)):
            raise MeasureError("atoms must be finite")
        if np.any(weights < 0) or not np.all(np.isfinite(weights)):
            raise MeasureError("weights must be finite and nonnegative")
        if abs(weights.sum() - 1.0) > WEIGHT_TOL:
            raise MeasureError(f"weights sum to {weights.sum()!r}, not 1")
        object.__setattr__(self, "atoms", _freeze(atoms))
        object.__setattr__(self, "weights", _freeze(weights))

    @property
    def dim(self) -> int:
        return self.atoms.shape[1]

    def __len__(self) -> int:
        return self.atoms.shape[0]

    def mean(self) -> np.ndarray:
        return self.weights @ self.atoms

    def to_json(self) -> dict:
        return {"dim": self.dim, "atoms": self.atoms.tolist(),
                "weights": self.weights.tolist()}

    @classmethod
    def from_json(cls, obj: dict) -> "DiscreteMeasure":
        atoms = np.asarray(obj["atoms"], dtype=float).reshape(-1, int(obj["dim"]))
        return cls(atoms, np.asarray(obj["weights"], dtype=float))

    @classmethod
    def normalized(cls, atoms, weights) -> "DiscreteMeasure":
        """Build a measure after rescaling ``weights`` to unit mass."""
        w = np.asarray(weights, dtype=float)
        total = w.sum()
        if total <= 0:
            raise MeasureError("total mass must be positive")
        w = w / total
        # absorb residual round-off into the heaviest atom
        w[np.argmax(w)] += 1.0 - w.sum()
        return cls(atoms, w)


def empirical_measure(points) -> DiscreteMeasure:
    """Uniform measure on the given points, duplicates kept."""
    try:
        arr = as_points(points)
    except ValueError as exc:  # ragged input
        raise DimError(str(exc)) from exc
    if arr.size == 0 or arr.shape[0] == 0:
        raise EmptySample("empirical measure of an empty sample")
    n = arr.shape[0]
    return DiscreteMeasure(arr, np.full(n, 1.0 / n))


def pushforward(m: DiscreteMeasure, f: Callable) -> DiscreteMeasure:
    """Image measure ``f#m``; ``f`` maps one point (1-D array) to a point."""
    images = [np.atleast_1d(np.asarray(f(x), dtype=float)) for x in m.atoms]
    dims = {img.shape for img in images}
    if len(dims) != 1:
        raise DimError("map produced images of different dimensions")
    return DiscreteMeasure(np.vstack(images), m.weights)


def second_moment(m: DiscreteMeasure) -> float:
    return float(m.weights @ np.sum(m.atoms ** 2, axis=1))


def squared_distances(x: np.ndarray, y: np.ndarray) -> np.ndarray:
    """Matrix of ``|x_i - y_j|^2`` for point arrays ``x`` (n,k), ``y`` (m,k)."""
    x = as_points(x)
    y = as_points(y)
    if x.shape[1] != y.shape[1]:
        raise DimError(f"dimension mismatch: {x.shape[1]} vs {y.shape[1]}")
    if x.shape[0] * y.shape[0] * x.shape[1] <= 20_000_000:
        diff = x[:, None, :] - y[None, :, :]
        return np.einsum("ijk,ijk->ij", diff, diff)
    # expanded form for big inputs; loses exactness for coincident points
    d = (np.sum(x ** 2, axis=1)[:, None] + np.sum(y ** 2, axis=1)[None, :]
         - 2.0 * x @ y.T)
    return np.maximum(d, 0.0)


@dataclass(frozen=True)
class TransportPlan:
    """A coupling between ``source`` and ``target`` with optional duals.

    ``cost`` is the cost matrix the plan was solved against; it is needed to
    check dual feasibility and is kept so callers can re-evaluate the plan.
    """

    matrix: np.ndarray
    source: DiscreteMeasure
    target: DiscreteMeasure
    cost_value: float
    dual_source: Optional[np.ndarray] = None
    dual_target: Optional[np.ndarray] = None
    cost: Optional[np.ndarray] = field(default=None, repr=False)

    def __post_init__(self):
        ns, nt = len(self.source), len(self.target)
        if sparse.issparse(self.matrix):
            mat = sparse.csr_matrix(self.matrix, dtype=float)
            entries = mat.data
        else:
            mat = np.asarray(self.matrix, dtype=float)
            entries = mat
        if mat.shape != (ns, nt):
            raise MeasureError(f"plan shape {mat.shape} != ({ns}, {nt})")
        if np.any(entries < 0):
            raise MeasureError("plan has negative entries")
        rows = np.asarray(mat.sum(axis=1)).ravel()
        cols = np.asarray(mat.sum(axis=0)).ravel()
        row_err = np.max(np.abs(rows - self.source.weights))
        col_err = np.max(np.abs(cols - self.target.weights))
        if row_err > PLAN_TOL or col_err > PLAN_TOL:
            raise MeasureError(
                f"plan marginals off by {max(row_err, col_err):.3e}")
        object.__setattr__(self, "matrix",
                           mat if sparse.issparse(mat) else _freeze(mat))
        if (self.dual_source is None) != (self.dual_target is None):
            raise MeasureError("provide both dual vectors or neither")
        if self.dual_source is not None:
            phi = _freeze(np.asarray(self.dual_source, dtype=float).reshape(-1))
            psi = _freeze(np.asarray(self.dual_target, dtype=float).reshape(-1))
            if phi.shape[0] != ns or psi.shape[0] != nt:
                raise MeasureError("dual vector lengths do not match marginals")
            object.__setattr__(self, "dual_source", phi)
            object.__setattr__(self, "dual_target", psi)
            if self.cost is not None:
                slack = phi[:, None] + psi[None, :] - np.asarray(self.cost)
                if slack.max() > DUAL_FEAS_TOL:
                    raise MeasureError(
                        f"dual infeasible by {slack.max():.3e}")
                gap = (phi @ self.source.weights + psi @ self.target.weights
                       - self.cost_value)
                if abs(gap) > DUALITY_GAP_TOL:
                    raise MeasureError(f"duality gap {gap:.3e}")
        if self.cost is not None:
            object.__setattr__(self, "cost", _freeze(self.cost))

    def dense(self) -> np.ndarray:
        if sparse.issparse(self.matrix):
            return self.matrix.toarray()
        return np.asarray(self.matrix)

    def to_json(self) -> dict:
        out = {"source": self.source.to_json(), "target": self.target.to_json(),
               "matrix": self.matrix.tolist(), "cost_value": self.cost_value}
        if self.dual_source is not None:
            out["duals"] = {"source": self.dual_source.tolist(),
                            "target": self.dual_target.tolist()}
        return out

    @classmethod
    def from_json(cls, obj: dict) -> "TransportPlan":
        duals = obj.get("duals") or {}
        return cls(np.asarray(obj["matrix"], dtype=float),
                   DiscreteMeasure.from_json(obj["source"]),
                   DiscreteMeasure.from_json(obj["target"]),
                   float(obj["cost_value"]),
                   duals.get("source"), duals.get("target"))
