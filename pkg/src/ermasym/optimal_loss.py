"""Synthesis of the loss that attains the Fisher-information limit.

With ``W = sigma_opt G + SY``, ``q(v) = v^2 / 2`` and

    h(v) = (1 + alpha1) q(v) + alpha2 log p_W(v),

the optimal loss is ``l(w) = h*(w) - q(w)``.  The conjugate is evaluated
parametrically: every ``v`` gives the point ``w = h'(v)`` together with
``l'(w) = v - w`` and ``l(w) = w v - h(v) - q(w)``.  Its Moreau envelope at
parameter one is then ``-alpha1 q - alpha2 log p_W`` up to a constant.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import optimize

from .errors import AchievabilityFailed, NonConvexInner
from .limits import P_FLOOR, W_BASE, fisher_w, posterior_moments, sigma_opt
from .losses import TabulatedLoss

N_LOSS_GRID = 2048
LOGCONCAVITY_TOL = 1e-9
MONOTONE_TOL = 1e-9
ACHIEVABILITY_TOL = 1e-4


def optimal_alphas(sigma, fisher, delta):
    den = delta * (sigma * sigma * fisher + fisher - 1.0)
    return (1.0 - sigma * sigma * fisher) / den, 1.0 / den


@dataclass(frozen=True)
class LogConcavityResult:
    holds: bool
    margin: float
    worst_w: float


def logconcavity_check(model, sigma, grid=None):
    """Whether (log p_W)'' <= -1/(sigma^2 + 1) on the grid, with the worst margin."""
    if grid is None:
        wm = W_BASE + W_BASE * sigma
        grid = np.linspace(-wm, wm, N_LOSS_GRID)
    grid = np.asarray(grid, dtype=float)
    logp, _, var = posterior_moments(model, sigma, grid)
    curv = (var - 1.0) / sigma ** 2
    gap = np.where(np.exp(logp) >= P_FLOOR, curv + 1.0 / (sigma ** 2 + 1.0), -np.inf)
    i = int(np.argmax(gap))
    return LogConcavityResult(bool(gap[i] <= LOGCONCAVITY_TOL), float(gap[i]), float(grid[i]))


@dataclass(frozen=True, eq=False)
class OptLossTable:
    model: object
    delta: float
    sigma_opt: float
    fisher: float
    alpha1: float
    alpha2: float
    v: np.ndarray = field(repr=False)
    grid: np.ndarray = field(repr=False)
    loss_values: np.ndarray = field(repr=False)
    loss_deriv: np.ndarray = field(repr=False)
    log_p: np.ndarray = field(repr=False)
    h_second: np.ndarray = field(repr=False)
    convexity: str = "NumericallyConvex"
    lemma: LogConcavityResult | None = None

    @property
    def model_tag(self):
        return self.model.tag

    @property
    def identity_residual(self):
        """1 + alpha1 - alpha2 / sigma_opt^2, zero at the fundamental limit."""
        return 1.0 + self.alpha1 - self.alpha2 / self.sigma_opt ** 2

    @property
    def correlation(self):
        return 1.0 / math.sqrt(1.0 + self.sigma_opt ** 2)

    @cached_property
    def loss(self):
        meta = {"sigma_opt": self.sigma_opt, "alpha1": self.alpha1, "alpha2": self.alpha2,
                "delta": self.delta, "model": self.model_tag}
        return TabulatedLoss(self.grid, self.loss_deriv, self.loss_values,
                             label=f"opt[{self.model_tag},delta={self.delta:g}]", meta=meta)

    @cached_property
    def minimizer(self):
        """Where the loss derivative changes sign, or NaN if it does not on the grid."""
        d = self.loss_deriv
        i = np.flatnonzero((d[:-1] < 0) & (d[1:] >= 0))
        if len(i) == 0:
            return float("nan")
        i = int(i[0])
        return float(optimize.brentq(lambda t: float(self.loss.deriv(np.array([t]))[0]),
                                     self.grid[i], self.grid[i + 1], xtol=1e-13))

    def display(self):
        """Figure normalization: rescale the argument so the minimizer sits at 1,
        then the values so that l(1) = 0 and l(2) = 1.  Both rescalings leave the
        predicted correlation unchanged.  Returns ``(t, l, dl/dt)`` on the
        rescaled grid; NaN when there is no positive minimizer with 2 t0 on the
        table."""
        t0 = self.minimizer
        if not (t0 > 0 and 2 * t0 <= self.grid[-1]):
            nan = np.full_like(self.grid, np.nan)
            return nan, nan, nan
        l1, l2 = (float(x) for x in self.loss.value(np.array([t0, 2 * t0])))
        scale = l2 - l1
        return self.grid / t0, (self.loss_values - l1) / scale, self.loss_deriv * t0 / scale

    def write_csv(self, path, display=True):
        with open(path, "w", newline="") as fh:
            fh.write(f"# sigma_opt={self.sigma_opt:.17g}, alpha1={self.alpha1:.17g}, "
                     f"alpha2={self.alpha2:.17g}, delta={self.delta:.17g}, model={self.model_tag}\n")
            fh.write(f"# convexity={self.convexity}\n")
            out = csv.writer(fh, lineterminator="\n")
            cols = [self.grid, self.loss_values, self.loss_deriv]
            head = ["w", "loss", "dloss"]
            if display:
                cols.extend(self.display())
                head += ["w_display", "loss_display", "dloss_display"]
            out.writerow(head)
            for row in zip(*cols):
                out.writerow([f"{x:.17g}" for x in row])


def _parse_meta(lines):
    meta = {}
    for line in lines:
        for part in line.lstrip("#").split(","):
            if "=" in part:
                k, v = part.split("=", 1)
                k, v = k.strip(), v.strip()
                try:
                    meta[k] = float(v)
                except ValueError:
                    meta[k] = v
    return meta


def load_loss_table(path):
    """Read a ``w,loss,dloss`` CSV (metadata preamble optional) as a TabulatedLoss."""
    with open(path, newline="") as fh:
        lines = fh.read().splitlines()
    pre = [ln for ln in lines if ln.startswith("#")]
    body = [ln for ln in lines if ln and not ln.startswith("#")]
    rows = list(csv.DictReader(body))
    if not rows or not {"w", "dloss"} <= set(rows[0]):
        raise ValueError(f"{path}: expected columns w,loss,dloss")
    w = np.array([float(r["w"]) for r in rows])
    d = np.array([float(r["dloss"]) for r in rows])
    vals = np.array([float(r["loss"]) for r in rows]) if "loss" in rows[0] else None
    meta = _parse_meta(pre)
    label = str(meta.get("model", path))
    return TabulatedLoss(w, d, vals, label=label, meta=meta)


def build_optimal_loss(model, delta, n_grid=N_LOSS_GRID, strict=False):
    """Tabulate the optimal loss for ``model`` at oversampling ``delta``."""
    so = sigma_opt(model, delta)
    sigma = so.sigma
    vmax = W_BASE + W_BASE * sigma
    v = np.linspace(-vmax, vmax, n_grid)
    logp, mean, var = posterior_moments(model, sigma, v)
    fisher = fisher_w(model, sigma)
    a1, a2 = optimal_alphas(sigma, fisher, delta)
    score = -mean / sigma
    hprime = (1.0 + a1) * v + a2 * score
    hsecond = (1.0 + a1) + a2 * (var - 1.0) / sigma ** 2
    w = hprime
    dloss = v - w
    loss = w * v - ((1.0 + a1) * 0.5 * v * v + a2 * logp) - 0.5 * w * w
    loss = loss - np.min(loss)
    lemma = logconcavity_check(model, sigma)
    inner_ok = bool(np.all(hsecond > 0) and np.all(np.diff(w) > 0))
    monotone = bool(np.all(np.diff(dloss) >= -MONOTONE_TOL * max(1.0, np.max(np.abs(dloss)))))
    if not inner_ok or not monotone:
        convexity = "NonConvexDetected"
    elif lemma.holds and model.curvature_proven:
        convexity = "ProvenSufficient"
    else:
        convexity = "NumericallyConvex"
    if not inner_ok:
        # keep the strictly increasing part so the table stays usable for inspection
        keep = np.concatenate([[True], np.diff(w) > 0])
        v, w, dloss, loss, logp, hsecond = (a[keep] for a in (v, w, dloss, loss, logp, hsecond))
    table = OptLossTable(model, float(delta), sigma, fisher, a1, a2, v, w, loss, dloss,
                         logp, hsecond, convexity, lemma)
    if strict and not inner_ok:
        err = NonConvexInner("h is not convex on the grid; conjugate construction is invalid")
        err.table = table
        raise err
    return table


def conjugate_loss_at(table, w, model):
    """l(w) by direct maximization of ``w v - h(v)``: an independent route to the
    tabulated values (up to the table's additive constant)."""
    sigma = table.sigma_opt

    def h(v):
        logp = posterior_moments(model, sigma, np.atleast_1d(v))[0][0]
        return (1.0 + table.alpha1) * 0.5 * v * v + table.alpha2 * logp

    vmax = W_BASE + W_BASE * sigma
    res = optimize.minimize_scalar(lambda v: h(v) - w * v, bounds=(-vmax, vmax),
                                   method="bounded", options={"xatol": 1e-10})
    return -res.fun - 0.5 * w * w


def verify_achievability(table, opts=None):
    """Solve the system with the tabulated optimal loss; expect (1, sigma_opt, 1)."""
    from .saddle import SolverOptions, solve_system

    if table.convexity == "NonConvexDetected":
        raise AchievabilityFailed("table is not convex; the prediction does not apply")
    opts = opts or SolverOptions()
    sol = solve_system(table.loss, table.model, table.delta, opts)
    err = np.abs(sol.as_vector() - np.array([1.0, table.sigma_opt, 1.0]))
    if np.any(err > ACHIEVABILITY_TOL):
        raise AchievabilityFailed(
            f"solution ({sol.mu:.6g}, {sol.alpha:.6g}, {sol.lam:.6g}) differs from "
            f"(1, {table.sigma_opt:.6g}, 1) by {np.max(err):.2e}; residuals {sol.residuals}")
    return sol

