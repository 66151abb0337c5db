"""Monte Carlo risk estimates and normal-normal closed forms."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable, Dict, Optional, Sequence, Tuple

import numpy as np

from .denoiser import DenoiserMap, gaussian_closed_form_denoiser
from .likelihood import GaussianLocation, GaussianPrior, GenerativeSpec, sample_joint
from .measures import as_points

CSV_COLUMNS = ("sweep_value", "estimator", "risk", "stderr", "n_rep", "closed_form")


def _apply(denoiser, zs) -> np.ndarray:
    if isinstance(denoiser, DenoiserMap):
        return denoiser.evaluate(zs)
    return as_points(denoiser(zs)).reshape(zs.shape[0], -1)


def mc_risk(spec: GenerativeSpec, denoiser, n_rep: int, stream: int = 0) -> Tuple[float, float]:
    """Mean and standard error of ``|delta(Z) - Theta|^2`` over fresh draws."""
    if n_rep < 2:
        raise ValueError("n_rep must be at least 2")
    thetas, zs = sample_joint(spec, n_rep, stream)
    loss = np.sum((_apply(denoiser, zs) - thetas) ** 2, axis=1)
    return float(loss.mean()), float(loss.std(ddof=1) / np.sqrt(n_rep))


def closed_form_risks(tau2_grid, sigma2: float = 1.0) -> Dict[str, np.ndarray]:
    """Risks of the posterior mean, the OT denoiser and the identity.

    With shrinkage ``k = tau2 / (tau2 + sigma2)`` the OT denoiser is
    ``sqrt(k) Z``, so its risk is ``2 tau2 (1 - sqrt(k))``; the posterior mean
    has risk ``k sigma2`` and the identity ``sigma2``.
    """
    t2 = np.asarray(tau2_grid, dtype=float)
    if np.any(t2 <= 0):
        raise ValueError("tau2 must be positive")
    k = t2 / (t2 + sigma2)
    return {"tau2": t2, "bayes": k * sigma2, "ot": 2.0 * t2 * (1.0 - np.sqrt(k)),
            "identity": np.full_like(t2, float(sigma2))}


@dataclass
class RiskReport:
    parameter: str
    values: np.ndarray
    risk: Dict[str, np.ndarray]
    stderr: Dict[str, np.ndarray]
    n_rep: int
    closed_form: Dict[str, np.ndarray] = field(default_factory=dict)

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if np.any(np.diff(self.values) <= 0):
            raise ValueError("sweep values must be strictly increasing")
        if self.n_rep > 1:
            for name, se in self.stderr.items():
                if np.any(np.asarray(se) <= 0):
                    raise ValueError(f"nonpositive standard error for {name}")

    def rows(self):
        for i, v in enumerate(self.values):
            for name in self.risk:
                cf = self.closed_form.get(name)
                yield (float(v), name, float(self.risk[name][i]), float(self.stderr[name][i]),
                       int(self.n_rep), "" if cf is None else float(cf[i]))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(CSV_COLUMNS)
        for row in self.rows():
            w.writerow([repr(x) if isinstance(x, float) else x for x in row])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str, parameter: str = "tau2") -> "RiskReport":
        rows = list(csv.DictReader(io.StringIO(text)))
        values = sorted({float(r["sweep_value"]) for r in rows})
        names = list(dict.fromkeys(r["estimator"] for r in rows))
        idx = {v: i for i, v in enumerate(values)}
        risk = {n: np.zeros(len(values)) for n in names}
        se = {n: np.zeros(len(values)) for n in names}
        cf: Dict[str, np.ndarray] = {}
        n_rep = 0
        for r in rows:
            i, n = idx[float(r["sweep_value"])], r["estimator"]
            risk[n][i] = float(r["risk"])
            se[n][i] = float(r["stderr"])
            n_rep = int(r["n_rep"])
            if r["closed_form"] != "":
                cf.setdefault(n, np.zeros(len(values)))[i] = float(r["closed_form"])
        return cls(parameter, np.array(values), risk, se, n_rep, cf)


ESTIMATORS = ("bayes", "ot", "identity")


def normal_normal_maps(tau2: float, sigma2: float = 1.0) -> Dict[str, Callable]:
    den = gaussian_closed_form_denoiser(0.0, tau2, sigma2)
    return {"bayes": den.posterior_mean, "ot": den, "identity": lambda z: as_points(z)}


def risk_cell(tau2: float, estimator: str, n_rep: int, seed: int, cell: int,
              sigma2: float = 1.0) -> Tuple[float, float]:
    """One ``(tau2, estimator)`` cell of the risk curve, on its own stream."""
    spec = GenerativeSpec(GaussianLocation(np.sqrt(sigma2)),
                          GaussianPrior([0.0], [[tau2]]), seed)
    return mc_risk(spec, normal_normal_maps(tau2, sigma2)[estimator], n_rep, stream=cell)


def risk_curve(tau2_grid: Sequence[float], n_rep: int, seed: int, sigma2: float = 1.0,
               map_fn: Optional[Callable] = None) -> RiskReport:
    """Monte Carlo risk of the three normal-normal estimators across ``tau2``.

    Cell ``(i, e)`` uses stream ``i * len(ESTIMATORS) + e``, so results do not
    depend on evaluation order; ``map_fn`` may be a parallel ``map``.
    """
    grid = [float(t) for t in tau2_grid]
    jobs = [(t, e, n_rep, seed, i * len(ESTIMATORS) + k, sigma2)
            for i, t in enumerate(grid) for k, e in enumerate(ESTIMATORS)]
    run = map_fn or map
    out = list(run(lambda job: risk_cell(*job), jobs))
    risk = {e: np.zeros(len(grid)) for e in ESTIMATORS}
    se = {e: np.zeros(len(grid)) for e in ESTIMATORS}
    for (_, e, _, _, cell, _), (r, s) in zip(jobs, out):
        i = cell // len(ESTIMATORS)
        risk[e][i], se[e][i] = r, s
    cf = closed_form_risks(grid, sigma2)
    return RiskReport("tau2", np.array(grid), risk, se, n_rep,
                      {e: cf[e] for e in ESTIMATORS})
