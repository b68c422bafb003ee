"""Asymptotic prediction for ERM: the three-equation system in (mu, alpha, lambda).

With ``x = alpha G + mu SY`` and ``M'`` the x-derivative of the Moreau
envelope of the loss at parameter ``lambda``:

    E[SY M'] = 0
    lambda^2 delta E[M'^2] = alpha^2
    lambda delta E[G M'] = alpha

The estimator's correlation with the signal tends to ``mu / sqrt(mu^2 + alpha^2)``.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np
from scipy import optimize

from .errors import (DivergingIterates, ErmasymError, MeanNotPositive, NoConvergence,
                     NotTwiceDifferentiable, SeparableDataError)
from .link_models import rng_for
from .losses import envelope, envelope_second_derivative_ratio
from .quadrature import expect_gsy, make_rule

DIVERGENCE_BOUND = 1e6
NEWTON_SWITCH = 1e-2
NEWTON_EVERY = 5
TRUST = 0.5
COLLAPSE = 1e-8
STALL_WINDOW = 40
START_SCALES = (1.0, 4.0, 16.0)


@dataclass(frozen=True)
class SolverOptions:
    tol: float = 1e-9
    max_iter: int = 500
    damping: float = 0.5
    n_starts: int = 1
    n_g: int = 80
    n_sy: int = 64
    seed: int = 0
    check_quadrature: bool = True
    threads: int | None = None


@dataclass(frozen=True)
class SaddleSolution:
    mu: float
    alpha: float
    lam: float
    residuals: tuple
    uniqueness_flag: str = "Unverified"
    multistart_spread: float = 0.0
    iterations: int = 0

    @property
    def sigma_eff(self):
        return self.alpha / self.mu

    @property
    def correlation(self):
        return self.mu / math.hypot(self.mu, self.alpha)

    @property
    def alpha2(self):
        return self.alpha ** 2

    @property
    def max_residual(self):
        return max(abs(r) for r in self.residuals)

    def as_vector(self):
        return np.array([self.mu, self.alpha, self.lam])


@dataclass(frozen=True)
class ScalarSaddlePoint:
    """Point of the four-variable min-max problem; lambda = tau / gamma."""

    alpha: float
    mu: float
    tau: float
    gamma: float

    def __post_init__(self):
        if self.alpha <= 0 or self.tau <= 0 or self.gamma <= 0:
            raise ValueError("alpha, tau and gamma must be positive")

    @property
    def lam(self):
        return self.tau / self.gamma

    @classmethod
    def from_solution(cls, sol, delta):
        rd = math.sqrt(delta)
        return cls(sol.alpha, sol.mu, sol.alpha / rd, sol.alpha / (sol.lam * rd))


def _kink_breaks(loss, mu, alpha, lam):
    kinks = loss.x_breaks(lam)
    if not kinks:
        return None
    k = np.asarray(kinks, dtype=float)
    return lambda sy: (k[None, :] - mu * np.asarray(sy)[:, None]) / alpha


def moments(loss, rule, mu, alpha, lam, check=False):
    """(E[SY M'], E[M'^2], E[G M']) at ``x = alpha G + mu SY``."""
    def integrand(g, sy):
        d = envelope(loss, alpha * g + mu * sy, lam).dx
        return np.stack([sy * d, d * d, g * d])

    return expect_gsy(rule, integrand, _kink_breaks(loss, mu, alpha, lam), check=check)


def residuals_at(loss, rule, delta, v, check=False):
    mu, alpha, lam = v
    e1, e2, e3 = moments(loss, rule, mu, alpha, lam, check)
    return np.array([e1, lam * lam * delta * e2 - alpha * alpha, lam * delta * e3 - alpha])


def scaled(r, v):
    """Residuals relative to the size of each equation: (r1, r2 / alpha^2, r3 / alpha)."""
    a = max(v[1], 1e-300)
    return np.array([r[0], r[1] / (a * a), r[2] / a])


def _merit(r, v):
    return float(np.max(np.abs(scaled(r, v))))


def _accepted(r, v, tol):
    return _merit(r, v) <= tol and np.max(np.abs(r)) <= tol * max(1.0, v[1] ** 2)


def ls_closed_form(model, delta):
    """Exact solution for the square loss (t - 1)^2."""
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    m = model.mean_sy
    if m <= 1e-12:
        raise MeanNotPositive(f"E[SY] = {m:.3g} is not positive")
    alpha = math.sqrt(max(1.0 - m * m, 0.0)) / math.sqrt(delta - 1.0)
    return SaddleSolution(m, alpha, 1.0 / (2.0 * (delta - 1.0)), (0.0, 0.0, 0.0),
                          "VerifiedClassConditions")


def _uniqueness_flag(loss):
    ok = loss.strictly_convex_c1 and abs(float(loss.deriv(0.0))) > 0
    return "VerifiedClassConditions" if ok else "Unverified"


def _mu_root(loss, rule, alpha, lam, mu0):
    def f(mu):
        return moments(loss, rule, mu, alpha, lam)[0]

    step = max(abs(mu0), 1e-2)
    a, fa = mu0, f(mu0)
    if fa == 0.0:
        return mu0
    # E[SY M'] is nondecreasing in mu; walk downhill/uphill until the sign flips
    direction = -1.0 if fa > 0 else 1.0
    for _ in range(60):
        b = a + direction * step
        fb = f(b)
        if fa * fb <= 0:
            return optimize.brentq(f, min(a, b), max(a, b), xtol=1e-14)
        a, fa = b, fb
        step *= 2.0
        if abs(a) > DIVERGENCE_BOUND:
            break
    raise DivergingIterates("no root in mu for the first equation")


def _fixed_point_map(loss, rule, delta, v):
    mu, alpha, lam = v
    mu = _mu_root(loss, rule, alpha, lam, mu)
    _, e2, _ = moments(loss, rule, mu, alpha, lam)
    alpha = lam * math.sqrt(delta * e2)
    if alpha <= 0 or not np.isfinite(alpha):
        raise NoConvergence("alpha update collapsed to zero")
    e3 = moments(loss, rule, mu, alpha, lam)[2]
    if e3 <= 0:
        raise DivergingIterates("E[G M'] vanished; lambda update diverges")
    lam = alpha / (delta * e3)
    return np.array([mu, alpha, lam])


def _guard(v):
    if not np.all(np.isfinite(v)) or v[1] > DIVERGENCE_BOUND or v[2] > DIVERGENCE_BOUND:
        raise DivergingIterates(f"iterates left the bounded region: {v}")
    if v[1] < COLLAPSE or v[2] < COLLAPSE:
        raise NoConvergence(f"iterates collapsed towards alpha = lambda = 0: {v}")


def _newton_polish(loss, rule, delta, v, tol, max_steps=20):
    r = residuals_at(loss, rule, delta, v)
    for _ in range(max_steps):
        if _accepted(r, v, tol):
            break
        jac = np.empty((3, 3))
        for j in range(3):
            h = 1e-6 * max(abs(v[j]), 1e-3)
            vp, vm = v.copy(), v.copy()
            vp[j] += h
            vm[j] -= h
            jac[:, j] = (residuals_at(loss, rule, delta, vp) - residuals_at(loss, rule, delta, vm)) / (2 * h)
        try:
            step = np.linalg.solve(jac, r)
        except np.linalg.LinAlgError:
            break
        # trust region: no component moves by more than half its magnitude
        shrink = np.max(np.abs(step) / (TRUST * np.maximum(np.abs(v), 1e-3)))
        if shrink > 1.0:
            step = step / shrink
        t = 1.0
        while t > 1e-4:
            cand = v - t * step
            if cand[1] > 0 and cand[2] > 0:
                try:
                    rc = residuals_at(loss, rule, delta, cand)
                except ErmasymError:
                    rc = np.full(3, np.inf)
                if _merit(rc, cand) < _merit(r, v):
                    v, r = cand, rc
                    break
            t *= 0.5
        else:
            break
    return v, r


def _solve_from(loss, rule, delta, v0, opts):
    v = np.asarray(v0, dtype=float)
    eta = opts.damping
    r = residuals_at(loss, rule, delta, v)
    step_prev = np.inf
    history = []
    it = 0
    for it in range(1, opts.max_iter + 1):
        if _accepted(r, v, opts.tol):
            break
        fv = _fixed_point_map(loss, rule, delta, v)
        step = np.max(np.abs(fv - v) / np.maximum(np.abs(v), 1e-3))
        # halve on increase of the fixed-point residual, recover while it falls
        eta = max(0.5 * eta, 1e-3) if step > step_prev else min(1.25 * eta, opts.damping)
        step_prev = step
        v = (1.0 - eta) * v + eta * fv
        _guard(v)
        r = residuals_at(loss, rule, delta, v)
        if it % NEWTON_EVERY == 0 or _merit(r, v) <= NEWTON_SWITCH:
            v, r = _newton_polish(loss, rule, delta, v, opts.tol, max_steps=8)
        history.append(_merit(r, v))
        if len(history) > STALL_WINDOW and history[-1] > 0.5 * history[-1 - STALL_WINDOW]:
            raise NoConvergence(f"stalled at residual {history[-1]:.2e} (delta={delta:g})")
    v, r = _newton_polish(loss, rule, delta, v, opts.tol)
    _guard(v)
    if not _accepted(r, v, opts.tol):
        raise NoConvergence(
            f"residual {_merit(r, v):.2e} after {it} iterations at delta={delta:g}")
    return v, r, it


def _solve_escalating(loss, rule, delta, v0, opts):
    """Retry from larger starting points; near the solvability boundary the
    solution has large alpha and lambda and small starts collapse to zero."""
    err = None
    for scale in START_SCALES:
        try:
            return _solve_from(loss, rule, delta, np.asarray(v0) * scale, opts)
        except (NoConvergence, ErmasymError) as e:
            if isinstance(e, SeparableDataError):
                raise
            err = e
    raise err


def _check_separability(loss, model, delta):
    if not loss.vanishing_tail:
        return
    from .simulate import separability_threshold

    dstar = separability_threshold(model)
    if delta <= dstar:
        raise SeparableDataError(
            f"delta={delta:g} is below the separability threshold {dstar:.4g}; "
            f"{loss.name} has no bounded solution")


def _starts(model, delta, n, seed):
    ls = ls_closed_form(model, delta)
    base = ls.as_vector()
    out = [base]
    rng = rng_for(seed, stream=7)
    for _ in range(n - 1):
        out.append(base * np.exp(rng.uniform(-0.7, 0.7, size=3)))
    return out


def solve_system(loss, model, delta, opts=None):
    """Solve the three-equation system; returns a :class:`SaddleSolution`."""
    opts = opts or SolverOptions()
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    _check_separability(loss, model, delta)
    rule = make_rule(model, opts.n_g, opts.n_sy)
    starts = _starts(model, delta, max(1, opts.n_starts), opts.seed)
    if len(starts) == 1:
        results = [_solve_escalating(loss, rule, delta, starts[0], opts)]
    else:
        with ThreadPoolExecutor(max_workers=opts.threads) as ex:
            results = list(ex.map(lambda v0: _solve_escalating(loss, rule, delta, v0, opts), starts))
    pts = np.array([res[0] for res in results])
    spread = float(np.max(np.linalg.norm(pts[:, None, :] - pts[None, :, :], axis=-1)))
    v, r, it = results[0]
    if opts.check_quadrature:
        # the refined rule must reproduce the residuals; raises otherwise
        residuals_at(loss, rule, delta, v, check=True)
    return SaddleSolution(float(v[0]), float(v[1]), float(v[2]), tuple(float(x) for x in r),
                          _uniqueness_flag(loss), spread, it)


def stationarity_check(loss, model, delta, pt, rule=None):
    """First-order residuals of the four-variable min-max objective

        F = gamma tau / 2 - alpha gamma / sqrt(delta) + E[M(alpha G + mu SY; tau / gamma)]

    in the order (d/dmu, d/dalpha, d/dtau, d/dgamma) up to positive factors.
    """
    rule = rule or make_rule(model)
    lam = pt.lam
    rd = math.sqrt(delta)

    def integrand(g, sy):
        env = envelope(loss, pt.alpha * g + pt.mu * sy, lam)
        return np.stack([sy * env.dx, g * env.dx, env.dlambda])

    e_sy, e_g, e_dl = expect_gsy(rule, integrand, _kink_breaks(loss, pt.mu, pt.alpha, lam), check=False)
    return (
        float(e_sy),
        float(e_g - pt.gamma / rd),
        float(pt.gamma / 2 + e_dl / pt.gamma),
        float(-pt.alpha / rd - pt.tau / pt.gamma ** 2 * e_dl + pt.tau / 2),
    )


def objective_4var(loss, model, delta, pt, rule=None):
    """Value of the four-variable objective F at ``pt``."""
    rule = rule or make_rule(model)
    lam = pt.lam
    val = expect_gsy(rule, lambda g, sy: envelope(loss, pt.alpha * g + pt.mu * sy, lam).value,
                     _kink_breaks(loss, pt.mu, pt.alpha, lam), check=False)
    return pt.gamma * pt.tau / 2 - pt.alpha * pt.gamma / math.sqrt(delta) + val


def curvature_identity_residual(loss, model, sol, delta, rule=None):
    """|1 - lambda delta E[l''(p) / (1 + lambda l''(p))]| at the solution."""
    if not loss.twice_differentiable:
        raise NotTwiceDifferentiable(f"{loss.name} is not twice differentiable")
    rule = rule or make_rule(model)
    ratio = expect_gsy(
        rule,
        lambda g, sy: envelope_second_derivative_ratio(loss, sol.alpha * g + sol.mu * sy, sol.lam),
        check=False)
    return abs(1.0 - sol.lam * delta * ratio)


def cauchy_schwarz_margin(loss, model, sol, delta, rule=None):
    """E[M'^2] / E[G M']^2 - delta; nonnegative at any solution."""
    rule = rule or make_rule(model)
    _, e2, e3 = moments(loss, rule, sol.mu, sol.alpha, sol.lam)
    return e2 / e3 ** 2 - delta

