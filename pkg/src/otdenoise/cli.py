"""Batch experiments from JSON configs.

Every config carries a ``kind`` and a ``seed``.  A run writes CSV/JSON
artifacts plus ``manifest.json`` (config hash, seed, package versions, and
the schema and sha256 of each artifact) into the output directory.  Artifacts
never contain timings, so identical configs give byte-identical files for any
``--threads``; timings go to stderr.

Exit codes: 0 on success, 2 for a malformed config, 1 for runtime errors.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import io
import json
import math
import platform
import sys
import time
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np
import scipy

from . import __version__
from .denoiser import build_ot_denoiser, gaussian_closed_form_denoiser, population_ot_denoiser_1d
from .errors import ConfigError, OTDenoiseError
from .likelihood import (GaussianLocation, GaussianPrior, GenerativeSpec, model_from_json,
                         prior_from_json, sample_joint, sample_prior, stream_rng)
from .measures import DiscreteMeasure
from .npmle import NpmleConfig, default_grid, npmle_fit
from .observable import (DeltaTable, RelaxationInstance, empirical_bayes_risk,
                         gradient_descent, objective_E_tau_discrete, population_instance,
                         solve_relaxation, tau_sweep_convergence)
from .ot import METHODS, OTConfig, w2_squared
from .posterior import PosteriorMeanEstimator, posterior_mean_discrete
from .risk import CSV_COLUMNS, risk_curve

KINDS = ("figure1_left", "figure1_risk_curve", "figure2_circle", "npmle_pipeline",
         "tau_sweep", "relaxation_demo", "grad_descent_demo")

# subcommand -> kinds it accepts; ``run`` takes any kind
SUBCOMMANDS = {
    "simulate": KINDS,
    "denoise": ("figure1_left", "figure2_circle"),
    "risk-curve": ("figure1_risk_curve",),
    "npmle": ("npmle_pipeline",),
    "relax": ("relaxation_demo",),
    "descend": ("grad_descent_demo",),
    "sweep": ("tau_sweep",),
    "run": KINDS,
}

_MISSING = object()


# -- config parsing -----------------------------------------------------------

def _field(cfg: dict, key: str, conv: Callable, default=_MISSING,
           check: Optional[Callable] = None, expect: str = "a valid value"):
    if key not in cfg:
        if default is _MISSING:
            raise ConfigError(f"config.{key}: required field is missing")
        return default
    try:
        val = conv(cfg[key])
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"config.{key}: expected {expect} ({exc})") from None
    if check is not None and not check(val):
        raise ConfigError(f"config.{key}: expected {expect}, got {cfg[key]!r}")
    return val


def _int(x):
    if isinstance(x, bool) or not float(x).is_integer():
        raise ValueError("not an integer")
    return int(x)


def _pos_int(cfg, key, default=_MISSING):
    return _field(cfg, key, _int, default, lambda v: v >= 1, "a positive integer")


def _pos_float(cfg, key, default=_MISSING):
    return _field(cfg, key, float, default, lambda v: v > 0 and math.isfinite(v),
                  "a positive number")


def _grid(cfg, key, default=_MISSING) -> np.ndarray:
    """A list of numbers or ``{"start", "stop", "num"}`` (inclusive linspace)."""
    def conv(v):
        if isinstance(v, dict):
            return np.linspace(float(v["start"]), float(v["stop"]), _int(v["num"]))
        return np.asarray(v, dtype=float).reshape(-1)
    out = _field(cfg, key, conv, default, lambda g: g.size > 0 and np.all(np.isfinite(g)),
                 "a nonempty list or {start, stop, num}")
    return out


def _model(cfg, default=None):
    obj = cfg.get("model", default)
    if obj is None:
        raise ConfigError("config.model: required field is missing")
    try:
        return model_from_json(obj)
    except (TypeError, ValueError, AttributeError) as exc:
        raise ConfigError(f"config.model: {exc}") from None


def _prior(cfg, dim: int, default=None):
    obj = cfg.get("prior", default)
    if obj is None:
        raise ConfigError("config.prior: required field is missing")
    try:
        if "gaussian" in obj:
            return prior_from_json(obj)
        atoms = np.asarray(obj["atoms"], dtype=float).reshape(-1, dim)
        w = obj.get("weights")
        w = np.full(len(atoms), 1.0 / len(atoms)) if w is None else np.asarray(w, dtype=float)
        return DiscreteMeasure.normalized(atoms, w)
    except (KeyError, TypeError, ValueError, OTDenoiseError) as exc:
        raise ConfigError(f"config.prior: {exc}") from None


def _ot_config(cfg, default: str) -> OTConfig:
    method = _field(cfg, "ot_method", str, default, lambda m: m in METHODS,
                    "one of " + ", ".join(METHODS))
    eps = _pos_float(cfg, "ot_epsilon", 1e-2)
    return OTConfig(method, epsilon=eps)


def _spec(cfg, model, prior, seed) -> GenerativeSpec:
    try:
        return GenerativeSpec(model, prior, seed)
    except OTDenoiseError as exc:
        raise ConfigError(f"config.prior: {exc}") from None


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


def _json_text(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _csv_text(columns, rows) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(columns)
    for row in rows:
        w.writerow([repr(float(x)) if isinstance(x, (float, np.floating)) else x for x in row])
    return buf.getvalue()


class Artifacts:
    """Collects named CSV/JSON outputs and their schemas."""

    def __init__(self):
        self.files: Dict[str, Tuple[str, object]] = {}

    def csv(self, name, columns, rows):
        self.files[name] = (_csv_text(columns, rows), list(columns))

    def json(self, name, obj, keys=None):
        self.files[name] = (_json_text(obj), {"json_keys": sorted(keys or obj.keys())})


# -- experiments ----------------------------------------------------------------

def _theta_bar_fn(model, prior):
    if isinstance(prior, GaussianPrior):
        return PosteriorMeanEstimator.gaussian(prior.mean, prior.cov,
                                               (model.sigma ** 2) * np.eye(prior.dim))
    return PosteriorMeanEstimator.discrete(model, prior)


def figure1_left(cfg, seed, out: Artifacts, pmap):
    model = _model(cfg, {"family": "gaussian_location", "sigma": 1.0})
    if not isinstance(model, GaussianLocation) or model.obs_dim != 1:
        raise ConfigError("config.model: figure1_left needs a 1D gaussian_location model")
    prior = _prior(cfg, 1, {"gaussian": {"mean": [0.0], "cov": [[1.0]]}})
    n = _pos_int(cfg, "n", 60)
    M = _pos_int(cfg, "prior_atoms", 2000)
    spec = _spec(cfg, model, prior, seed)
    thetas, zs = sample_joint(spec, n)
    tb_fn = _theta_bar_fn(model, prior)
    if isinstance(prior, GaussianPrior):
        G = DiscreteMeasure.normalized(sample_prior(prior, M, stream_rng(seed, 1)), np.ones(M))
        star = gaussian_closed_form_denoiser(prior.mean, prior.cov, model.sigma ** 2)(zs)[:, 0]
    else:
        G = prior
        star = population_ot_denoiser_1d(prior, model.sigma, zs)
    tb = tb_fn(zs)
    den = build_ot_denoiser(zs, tb, G, _ot_config(cfg, "monotone_1d"))
    rows = [(i, zs[i, 0], thetas[i, 0], tb[i, 0], den.values[i, 0], star[i])
            for i in range(n)]
    out.csv("points.csv", ("index", "z", "theta", "theta_bar", "delta_hat", "delta_star"), rows)


def figure2_circle(cfg, seed, out: Artifacts, pmap):
    n = _pos_int(cfg, "n", 60)
    sigma = _pos_float(cfg, "sigma", 0.3)
    M = _pos_int(cfg, "M", 1200)
    radius = _pos_float(cfg, "radius", 1.0)
    ang = 2 * np.pi * np.arange(M) / M
    G = DiscreteMeasure(radius * np.stack([np.cos(ang), np.sin(ang)], axis=1), np.full(M, 1.0 / M))
    model = GaussianLocation(sigma, 2)
    thetas, zs = sample_joint(_spec(cfg, model, G, seed), n)
    tb = posterior_mean_discrete(model, G, zs)
    den = build_ot_denoiser(zs, tb, G)
    dev = np.abs(np.linalg.norm(den.values, axis=1) - radius)
    out.json("points.json", {"Z": zs.tolist(), "Theta": thetas.tolist(), "theta_bar": tb.tolist(),
                             "delta_hat": den.values.tolist(),
                             "max_circle_deviation": float(dev.max())})


def figure1_risk_curve(cfg, seed, out: Artifacts, pmap):
    grid = _grid(cfg, "tau2_grid", np.linspace(0.1, 10.0, 25))
    if np.any(grid <= 0) or np.any(np.diff(grid) <= 0):
        raise ConfigError("config.tau2_grid: expected positive, strictly increasing values")
    n_rep = _field(cfg, "n_rep", _int, 50_000, lambda v: v >= 2, "an integer >= 2")
    sigma2 = _pos_float(cfg, "sigma2", 1.0)
    report = risk_curve(grid, n_rep, seed, sigma2, map_fn=pmap)
    out.files["risk_curve.csv"] = (report.to_csv(), list(CSV_COLUMNS))


def npmle_pipeline(cfg, seed, out: Artifacts, pmap):
    model = _model(cfg, {"family": "gaussian_location", "sigma": 1.0})
    prior = _prior(cfg, model.latent_dim, {"atoms": [-1.0, 1.0]})
    n = _pos_int(cfg, "n", 2000)
    algorithm = _field(cfg, "algorithm", str, "em", lambda a: a in ("em", "frank_wolfe"),
                       "'em' or 'frank_wolfe'")
    use_true = _field(cfg, "use_true_prior", bool, False)
    thetas, zs = sample_joint(_spec(cfg, model, prior, seed), n)
    trace, kkt, converged = [], None, None
    if use_true:
        if not isinstance(prior, DiscreteMeasure):
            raise ConfigError("config.use_true_prior: needs a discrete prior")
        G = prior
    else:
        if "grid" in cfg:
            atoms = _grid(cfg, "grid").reshape(-1, 1)
            grid = DiscreteMeasure(atoms, np.full(len(atoms), 1.0 / len(atoms)))
        else:
            grid = default_grid(zs, _pos_int(cfg, "grid_size", 50))
        res = npmle_fit(model, zs, NpmleConfig(grid, algorithm=algorithm,
                                               max_iters=_pos_int(cfg, "max_iters", 20_000)))
        G, trace, kkt, converged = res.measure, res.trace, res.kkt, res.converged
    tb = posterior_mean_discrete(model, G, zs)
    den = build_ot_denoiser(zs, tb, G, _ot_config(cfg, "exact_lp"))
    diag = {"n": n, "algorithm": None if use_true else algorithm,
            "kkt_residual": kkt, "converged": converged,
            "final_loglik": trace[-1] if trace else None,
            "support_size": len(G), "w2_to_truth": None, "mse_vs_population_ot": None}
    if isinstance(prior, DiscreteMeasure):
        diag["w2_to_truth"] = math.sqrt(max(w2_squared(G, prior), 0.0))
        if isinstance(model, GaussianLocation) and model.obs_dim == 1:
            ref = population_ot_denoiser_1d(prior, model.sigma, zs)
            diag["mse_vs_population_ot"] = float(np.mean((den.values[:, 0] - ref) ** 2))
    d = zs.shape[1]
    cols = (["index"] + [f"z_{k}" for k in range(d)] + [f"theta_{k}" for k in range(d)]
            + [f"theta_bar_{k}" for k in range(d)] + [f"delta_{k}" for k in range(d)])
    out.csv("denoiser.csv", cols, [[i, *zs[i], *thetas[i], *tb[i], *den.values[i]]
                                   for i in range(n)])
    out.csv("prior_estimate.csv", ["atom_" + str(k) for k in range(G.dim)] + ["weight"],
            [[*G.atoms[j], G.weights[j]] for j in range(len(G))])
    out.csv("trace.csv", ("iteration", "loglik"), list(enumerate(trace)))
    out.json("diagnostics.json", diag)


def tau_sweep(cfg, seed, out: Artifacts, pmap):
    sigma = _pos_float(cfg, "sigma", 0.5)
    atoms = _grid(cfg, "theta_atoms", np.linspace(-1.5, 1.5, 7))
    w = _field(cfg, "theta_weights", lambda v: np.asarray(v, dtype=float),
               np.array([0.1, 0.15, 0.2, 0.1, 0.2, 0.15, 0.1]),
               lambda v: v.shape == atoms.shape and np.all(v > 0),
               "positive weights, one per theta atom")
    z_grid = _grid(cfg, "z_grid", np.linspace(-2.5, 2.5, 30))
    taus = _grid(cfg, "taus", np.array([10.0, 1.0, 0.1, 0.01, 0.001]))
    if np.any(taus <= 0) or np.any(np.diff(taus) >= 0):
        raise ConfigError("config.taus: expected positive, strictly decreasing values")
    spacing = float(np.min(np.diff(np.sort(z_grid)))) if z_grid.size > 1 else 1.0
    floor = _pos_float(cfg, "floor", spacing ** 2)
    G = DiscreteMeasure.normalized(atoms.reshape(-1, 1), w)
    inst, tb = population_instance(GaussianLocation(sigma), G, z_grid, float(taus[0]))
    rows = list(pmap(lambda t: tau_sweep_convergence(inst, tb, G, [t])[0], taus))
    for r in rows:
        print(f"tau={r.tau!r}: {r.seconds:.3f}s, {r.n_variables} variables", file=sys.stderr)
    out.csv("sweep.csv", ("tau", "distance", "value", "penalty", "bound_ok", "gamma2_w2",
                          "n_variables", "split_rows"),
            [(r.tau, r.distance, r.value, r.penalty, int(r.bound_ok), r.gamma2_w2,
              r.n_variables, r.split_rows) for r in rows])
    out.json("summary.json", {"floor": floor, "final_distance": rows[-1].distance,
                              "below_floor": bool(rows[-1].distance < floor),
                              "bound_ok_all": all(r.bound_ok for r in rows)})


def _latent_setup(cfg, seed, n_default):
    model = _model(cfg, {"family": "gaussian_location", "sigma": 1.0})
    if not isinstance(model, GaussianLocation) or model.obs_dim != 1:
        raise ConfigError("config.model: needs a 1D gaussian_location model")
    prior = _prior(cfg, 1, {"atoms": np.linspace(-2, 2, 5).tolist()})
    if not isinstance(prior, DiscreteMeasure):
        raise ConfigError("config.prior: needs a discrete prior")
    n = _pos_int(cfg, "n", n_default)
    thetas, zs = sample_joint(_spec(cfg, model, prior, seed), n)
    order = np.argsort(zs[:, 0], kind="stable")
    thetas, zs = thetas[order], zs[order]
    tb = posterior_mean_discrete(model, prior, zs)
    return model, prior, thetas, zs, tb


def relaxation_demo(cfg, seed, out: Artifacts, pmap):
    model, prior, thetas, zs, tb = _latent_setup(cfg, seed, 4)
    tau = _pos_float(cfg, "tau", 1.0)
    theta_grid = _grid(cfg, "theta_grid", np.arange(-3.0, 3.0 + 1e-9, 0.01))
    z3_grid = _grid(cfg, "z3_grid", np.linspace(-5.0, 5.0, 41))
    inst = RelaxationInstance.build(model, zs, theta_grid, z3_grid, tau)
    res = solve_relaxation(inst, tb)
    r_bayes = empirical_bayes_risk(thetas, tb)
    obj = objective_E_tau_discrete(inst, tb, res.delta, r_bayes)
    out.json("relaxation.json", {"instance": inst.to_json(), "result": res.to_json(),
                                 "r_bayes": r_bayes, "objective_at_map": obj,
                                 "identity_gap": res.value + r_bayes - obj})
    out.csv("delta.csv", ("index", "z", "theta_bar", "delta"),
            [(i, zs[i, 0], tb[i, 0], res.delta[i, 0]) for i in range(len(zs))])


def grad_descent_demo(cfg, seed, out: Artifacts, pmap):
    model, prior, thetas, zs, tb = _latent_setup(cfg, seed, 10)
    tau = _pos_float(cfg, "tau", 1.0)
    lam = _pos_float(cfg, "lam", 0.1)
    iters = _field(cfg, "iters", _int, 20, lambda v: v >= 0, "a nonnegative integer")
    K = _pos_int(cfg, "K", 20)
    crn = _field(cfg, "common_random_numbers", bool, False)
    r_bayes = empirical_bayes_risk(thetas, tb)
    trace = gradient_descent(model, zs, tb, DeltaTable(tb.copy()), tau, lam, iters, K, seed,
                             OTConfig("exact_lp"), r_bayes, crn)
    out.csv("trace.csv", ("iteration", "objective", "degenerate"),
            [(k, v, int(f)) for k, (v, f) in enumerate(zip(trace.objectives, trace.degenerate))])
    final = trace.deltas[-1]
    out.csv("delta.csv", ("index", "z", "theta_bar", "delta"),
            [(i, zs[i, 0], tb[i, 0], final[i, 0]) for i in range(len(zs))])


def simulate(cfg, seed, out: Artifacts, pmap):
    model = _model(cfg, {"family": "gaussian_location", "sigma": 1.0})
    prior = _prior(cfg, model.latent_dim, {"gaussian": {"mean": [0.0] * model.latent_dim,
                                                        "cov": np.eye(model.latent_dim).tolist()}})
    n = _pos_int(cfg, "n", 60)
    thetas, zs = sample_joint(_spec(cfg, model, prior, seed), n)
    cols = ["index"] + [f"z_{k}" for k in range(zs.shape[1])] + [f"theta_{k}" for k in range(thetas.shape[1])]
    out.csv("sample.csv", cols, [[i, *zs[i], *thetas[i]] for i in range(n)])


EXPERIMENTS = {
    "figure1_left": figure1_left, "figure1_risk_curve": figure1_risk_curve,
    "figure2_circle": figure2_circle, "npmle_pipeline": npmle_pipeline,
    "tau_sweep": tau_sweep, "relaxation_demo": relaxation_demo,
    "grad_descent_demo": grad_descent_demo,
}


# -- driver ---------------------------------------------------------------------------

def load_config(path) -> dict:
    try:
        cfg = json.loads(Path(path).read_text())
    except OSError as exc:
        raise ConfigError(f"config: cannot read {path}: {exc.strerror}") from None
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config: invalid JSON ({exc})") from None
    if not isinstance(cfg, dict):
        raise ConfigError("config: top level must be an object")
    if cfg.get("kind") not in KINDS:
        raise ConfigError(f"config.kind: expected one of {', '.join(KINDS)}, got {cfg.get('kind')!r}")
    _field(cfg, "seed", _int, check=lambda v: v >= 0, expect="a nonnegative integer")
    return cfg


def run_experiment(cfg: dict, out_dir, threads: int = 1, command: str = "run") -> dict:
    """Run one config and write its artifacts; returns the manifest."""
    if command not in SUBCOMMANDS:
        raise ConfigError(f"unknown command {command!r}")
    kind = cfg["kind"]
    if kind not in SUBCOMMANDS[command]:
        raise ConfigError(f"config.kind: {kind!r} is not handled by '{command}'")
    seed = _field(cfg, "seed", _int, check=lambda v: v >= 0, expect="a nonnegative integer")
    out = Artifacts()
    fn = simulate if command == "simulate" else EXPERIMENTS[kind]
    t0 = time.perf_counter()
    with ThreadPoolExecutor(max_workers=max(1, threads)) as pool:
        fn(cfg, seed, out, pool.map)
    print(f"{kind}: {time.perf_counter() - t0:.2f}s", file=sys.stderr)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    artifacts = {}
    for name, (text, schema) in sorted(out.files.items()):
        (out_dir / name).write_text(text)
        artifacts[name] = {"schema": schema,
                           "sha256": hashlib.sha256(text.encode()).hexdigest()}
    manifest = {
        "kind": kind, "command": command, "seed": seed,
        "config_sha256": hashlib.sha256(canonical_json(cfg).encode()).hexdigest(),
        "versions": {"otdenoise": __version__, "numpy": np.__version__,
                     "scipy": scipy.__version__, "python": platform.python_version()},
        "artifacts": artifacts,
    }
    (out_dir / "manifest.json").write_text(_json_text(manifest))
    return manifest


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="otdenoise", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)
    for name in SUBCOMMANDS:
        s = sub.add_parser(name)
        s.add_argument("--config", required=True, help="experiment config (JSON)")
        s.add_argument("--out", required=True, help="output directory")
        s.add_argument("--seed", type=int, default=None, help="override the config seed")
        s.add_argument("--threads", type=int, default=1, help="worker threads")
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config)
        if args.seed is not None:
            cfg["seed"] = args.seed
        if args.threads < 1:
            raise ConfigError("--threads: expected a positive integer")
        run_experiment(cfg, args.out, args.threads, args.command)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (OTDenoiseError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
