"""Monte Carlo ERM on Gaussian designs and the linear-separability threshold."""
from __future__ import annotations

import csv
import math
import os
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from .errors import OptimizerDiverged, SeparableData
from .link_models import rng_for
from .losses import Square
from .quadrature import expect_negpart_sq, make_rule

C_MAX = 1e8
THRESHOLD_CAP = 1e4
UNBOUNDED_NORM = 1e3
RESULT_COLUMNS = ["model", "loss", "delta", "n", "trials", "corr_mean", "corr_stderr",
                  "err_mean", "pred_corr", "pred_alpha2", "warnings"]


def separability_threshold(model, rule=None):
    """1 / min_c E[(G + c SY)_-^2]; ``inf`` when the minimum is zero."""
    rule = rule or make_rule(model)

    def g(c):
        return expect_negpart_sq(rule, c)

    lo, hi = 0.0, 1.0
    while g(2.0 * hi) < g(hi):
        lo, hi = hi, 2.0 * hi
        if hi > C_MAX:
            return math.inf
    res = optimize.minimize_scalar(g, bounds=(lo, 2.0 * hi), method="bounded",
                                   options={"xatol": 1e-10})
    best = min(res.fun, g(lo), g(2.0 * hi))
    if best < 1e-12:
        return math.inf
    return 1.0 / best


def threshold_curve(eps_values):
    from .link_models import NoisySigned

    out = []
    for eps in eps_values:
        if not 0.0 < eps <= 0.5:
            raise ValueError("eps must lie in (0, 1/2]")
        out.append((float(eps), min(separability_threshold(NoisySigned(eps)), THRESHOLD_CAP)))
    return out


def is_separable(A, y):
    """Whether some x has y_i <a_i, x> >= 1 for every row (an LP feasibility test)."""
    m, n = A.shape
    res = optimize.linprog(np.zeros(n), A_ub=-(y[:, None] * A), b_ub=-np.ones(m),
                           bounds=[(None, None)] * n, method="highs")
    return res.status == 0


@dataclass(frozen=True)
class Experiment:
    model: object
    loss: object
    delta: float
    n: int = 128
    trials: int = 25
    seed: int = 0
    steps: int = 1000
    signal: str = "e1"
    threads: int | None = None

    @property
    def m(self):
        return int(round(self.delta * self.n))


@dataclass(frozen=True)
class TrialResult:
    correlation: float
    debiased_error: float
    objective_value: float
    converged: bool
    grad_norm_final: float
    separable: bool = False
    norm: float = 0.0


@dataclass
class Summary:
    experiment: Experiment
    results: list
    warnings: list = field(default_factory=list)

    def _stat(self, key):
        v = np.array([getattr(r, key) for r in self.results])
        se = v.std(ddof=1) / math.sqrt(len(v)) if len(v) > 1 else 0.0
        return float(v.mean()), float(se)

    @property
    def corr_mean(self):
        return self._stat("correlation")[0]

    @property
    def corr_stderr(self):
        return self._stat("correlation")[1]

    @property
    def err_mean(self):
        return self._stat("debiased_error")[0]

    @property
    def err_stderr(self):
        return self._stat("debiased_error")[1]

    @property
    def n_separable(self):
        return sum(r.separable for r in self.results)


def _risk(loss, A, y, x):
    z = y * (A @ x)
    return float(np.mean(loss.value(z)))


def _grad(loss, A, y, x):
    z = y * (A @ x)
    return A.T @ (y * loss.deriv(z)) / len(y)


def _gradient_descent(loss, A, y, steps, tol):
    n = A.shape[1]
    x = np.zeros(n)
    f = _risk(loss, A, y, x)
    t = 1.0
    g = _grad(loss, A, y, x)
    gn = float(np.linalg.norm(g))
    converged = False
    for _ in range(steps):
        if gn <= tol:
            converged = True
            break
        t *= 2.0
        while True:
            xn = x - t * g
            fn = _risk(loss, A, y, xn)
            if fn <= f - 1e-4 * t * gn * gn:
                break
            t *= 0.5
            if t < 1e-20:
                return x, f, gn, converged
        x, f = xn, fn
        if not np.isfinite(f):
            raise OptimizerDiverged("objective became non-finite")
        if np.linalg.norm(x) > UNBOUNDED_NORM:
            break
        g = _grad(loss, A, y, x)
        gn = float(np.linalg.norm(g))
    return x, f, gn, converged or gn <= tol


def _subgradient(loss, A, y, steps):
    m, n = A.shape
    x = np.zeros(n)
    lip = np.linalg.norm(A, 2) / math.sqrt(m)
    best_x, best_f = x.copy(), _risk(loss, A, y, x)
    g = _grad(loss, A, y, x)
    increases = 0
    prev = best_f
    for k in range(1, steps + 1):
        x = x - g / (lip * math.sqrt(k))
        f = _risk(loss, A, y, x)
        if not np.isfinite(f):
            raise OptimizerDiverged("objective became non-finite")
        increases = increases + 1 if f > prev else 0
        if increases > steps // 4:
            raise OptimizerDiverged("objective increased persistently")
        prev = f
        if f < best_f:
            best_x, best_f = x.copy(), f
        if best_f == 0.0:
            break
        g = _grad(loss, A, y, x)
    gn = float(np.linalg.norm(_grad(loss, A, y, best_x)))
    return best_x, best_f, gn, True


def _design(exp, trial):
    rng = rng_for(exp.seed, stream=trial)
    A = rng.standard_normal((exp.m, exp.n))
    if exp.signal == "e1":
        x0 = np.zeros(exp.n)
        x0[0] = 1.0
    elif exp.signal == "random":
        x0 = rng.standard_normal(exp.n)
        x0 /= np.linalg.norm(x0)
    else:
        raise ValueError(f"unknown signal {exp.signal!r}")
    y = exp.model.sample_labels(A @ x0, rng)
    return A, y, x0


def run_trial(exp, trial):
    A, y, x0 = _design(exp, trial)
    loss = exp.loss
    separable = bool(loss.vanishing_tail and is_separable(A, y))
    if isinstance(loss, Square):
        x = np.linalg.lstsq(A, y, rcond=None)[0]
        f, gn, conv = _risk(loss, A, y, x), float(np.linalg.norm(_grad(loss, A, y, x))), True
    elif loss.smooth:
        x, f, gn, conv = _gradient_descent(loss, A, y, exp.steps, 1e-8 * math.sqrt(exp.n))
    else:
        x, f, gn, conv = _subgradient(loss, A, y, exp.steps)
    norm = float(np.linalg.norm(x))
    if norm == 0.0:
        corr = 0.0
    else:
        corr = float(x @ x0 / norm)
    proj = float(x @ x0)
    err = float(np.sum((x - proj * x0) ** 2))
    return TrialResult(corr, err, f, conv, gn, separable or norm > UNBOUNDED_NORM, norm)


def default_threads():
    env = os.environ.get("ERMASYM_THREADS")
    return int(env) if env else None


def run_experiment(exp):
    """Run ``exp.trials`` independent ERM instances and aggregate them."""
    if not getattr(exp.model, "has_label_law", True):
        raise ValueError(f"model {exp.model.tag} has no label law to simulate")
    notes = []
    if exp.loss.vanishing_tail:
        dstar = separability_threshold(exp.model)
        if exp.delta <= dstar:
            msg = f"delta={exp.delta:g} <= separability threshold {dstar:.4g}"
            warnings.warn(msg, SeparableData, stacklevel=2)
            notes.append(msg)
    threads = exp.threads or default_threads()
    with ThreadPoolExecutor(max_workers=threads) as ex:
        results = list(ex.map(lambda t: run_trial(exp, t), range(exp.trials)))
    n_sep = sum(r.separable for r in results)
    if n_sep:
        msg = f"{n_sep}/{exp.trials} trials separable (unbounded minimizer)"
        warnings.warn(msg, SeparableData, stacklevel=2)
        notes.append(msg)
    return Summary(exp, results, notes)


def result_row(summary, pred=None):
    exp = summary.experiment
    return {
        "model": exp.model.tag,
        "loss": exp.loss.name,
        "delta": f"{exp.delta:.6g}",
        "n": exp.n,
        "trials": exp.trials,
        "corr_mean": f"{summary.corr_mean:.6f}",
        "corr_stderr": f"{summary.corr_stderr:.6f}",
        "err_mean": f"{summary.err_mean:.6f}",
        "pred_corr": "NA" if pred is None else f"{pred.correlation:.6f}",
        "pred_alpha2": "NA" if pred is None else f"{pred.alpha2:.6f}",
        "warnings": "; ".join(summary.warnings),
    }


def write_results_csv(rows, path_or_file):
    own = isinstance(path_or_file, (str, os.PathLike))
    fh = open(path_or_file, "w", newline="") if own else path_or_file
    try:
        w = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS, lineterminator="\n")
        w.writeheader()
        w.writerows(rows)
    finally:
        if own:
            fh.close()
