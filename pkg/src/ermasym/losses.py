"""Convex losses with proximal operators and Moreau envelopes.

``prox(x; lam)`` is the minimizer of ``(x - v)^2 / (2 lam) + loss(v)`` and the
envelope is the minimum value.  All evaluations are vectorized over ``x``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple

import numpy as np
from scipy import special
from scipy.interpolate import PchipInterpolator

from .errors import NotTwiceDifferentiable, ProxNonConvergence

PROX_TOL = 1e-12
PROX_MAX_ITER = 200
EPS = np.finfo(float).eps


def _prox_tol(loss, x, v, lam):
    """Stopping tolerance for the prox residual ``(v - x) / lam + loss'(v)``;
    the first term cannot be resolved below a few ulps of ``|x| / lam``."""
    return PROX_TOL * (1.0 + np.abs(loss.deriv(v))) + 4 * EPS * (np.abs(x) + np.abs(v)) / lam


def soft_threshold(x, t):
    return np.sign(x) * np.maximum(np.abs(x) - t, 0.0)


class EnvelopeEval(NamedTuple):
    value: np.ndarray
    dx: np.ndarray
    dlambda: np.ndarray
    prox_point: np.ndarray


class Loss:
    """Base class for scalar convex losses."""

    name = "loss"
    smooth = True            # continuously differentiable (gradient methods apply)
    twice_differentiable = True
    strictly_convex_c1 = False
    vanishing_tail = False   # nonnegative with loss(t) -> 0 as t -> +inf
    prox_strategy = "closed-form"

    def value(self, t):
        raise NotImplementedError

    def deriv(self, t):
        """Derivative, or a subgradient where the loss has a kink."""
        raise NotImplementedError

    def second(self, t):
        raise NotTwiceDifferentiable(f"{self.name} is not twice differentiable")

    def prox(self, x, lam):
        raise NotImplementedError

    def x_breaks(self, lam):
        """Points in x where the envelope derivative is not smooth or turns sharply."""
        return ()

    def subgradient_gap(self, v, g):
        """Distance from ``g`` to the subdifferential at ``v``."""
        return np.abs(g - self.deriv(v))

    def __repr__(self):
        return f"{type(self).__name__}()"


class Square(Loss):
    """(t - 1)^2."""

    name = "square"
    strictly_convex_c1 = True

    def value(self, t):
        return (np.asarray(t, dtype=float) - 1.0) ** 2

    def deriv(self, t):
        return 2.0 * (np.asarray(t, dtype=float) - 1.0)

    def second(self, t):
        return np.full(np.shape(t), 2.0)

    def prox(self, x, lam):
        return (np.asarray(x, dtype=float) + 2.0 * lam) / (1.0 + 2.0 * lam)


class LAD(Loss):
    """|t - 1|."""

    name = "lad"
    smooth = False
    twice_differentiable = False

    def value(self, t):
        return np.abs(np.asarray(t, dtype=float) - 1.0)

    def deriv(self, t):
        return np.sign(np.asarray(t, dtype=float) - 1.0)

    def prox(self, x, lam):
        return 1.0 + soft_threshold(np.asarray(x, dtype=float) - 1.0, lam)

    def x_breaks(self, lam):
        return (1.0 - lam, 1.0 + lam)

    def subgradient_gap(self, v, g):
        v = np.asarray(v, dtype=float)
        at_kink = np.abs(v - 1.0) < 1e-12
        gap_kink = np.maximum(np.abs(g) - 1.0, 0.0)
        return np.where(at_kink, gap_kink, np.abs(g - self.deriv(v)))


class Hinge(Loss):
    """max(0, 1 - t)."""

    name = "hinge"
    smooth = False
    twice_differentiable = False
    vanishing_tail = True

    def value(self, t):
        return np.maximum(0.0, 1.0 - np.asarray(t, dtype=float))

    def deriv(self, t):
        return np.where(np.asarray(t, dtype=float) < 1.0, -1.0, 0.0)

    def prox(self, x, lam):
        x = np.asarray(x, dtype=float)
        return 1.0 + soft_threshold(x + 0.5 * lam - 1.0, 0.5 * lam)

    def x_breaks(self, lam):
        return (1.0 - lam, 1.0)

    def subgradient_gap(self, v, g):
        v = np.asarray(v, dtype=float)
        at_kink = np.abs(v - 1.0) < 1e-12
        gap_kink = np.maximum(g, 0.0) + np.maximum(-1.0 - g, 0.0)
        return np.where(at_kink, gap_kink, np.abs(g - self.deriv(v)))


class _NewtonProx(Loss):
    """Smooth loss whose prox is a safeguarded scalar Newton solve."""

    prox_strategy = "newton"

    def x_breaks(self, lam):
        # the prox crosses 0 here; for large lam the envelope bends sharply around it
        return (lam * float(self.deriv(0.0)),)

    def prox(self, x, lam):
        x = np.asarray(x, dtype=float)
        d0 = self.deriv(x)
        # root of (v - x)/lam + deriv(v) lies within lam * |deriv(x)| of x
        bound = lam * (1.0 + np.abs(d0))
        lo, hi = x - bound, x + bound
        v = x.copy()
        prev = np.full(x.shape, np.inf)
        for _ in range(PROX_MAX_ITER):
            r = (v - x) / lam + self.deriv(v)
            done = np.abs(r) <= _prox_tol(self, x, v, lam)
            if np.all(done):
                return v
            lo = np.where(r < 0, v, lo)
            hi = np.where(r > 0, v, hi)
            step = r / (1.0 / lam + self.second(v))
            cand = v - step
            # bisect when Newton leaves the bracket or stops halving the residual
            slow = np.abs(r) > 0.5 * prev
            outside = (cand <= lo) | (cand >= hi) | ~np.isfinite(cand) | slow
            prev = np.abs(r)
            v = np.where(done, v, np.where(outside, 0.5 * (lo + hi), cand))
        r = (v - x) / lam + self.deriv(v)
        if np.any(np.abs(r) > _prox_tol(self, x, v, lam)):
            raise ProxNonConvergence(f"{self.name}: prox residual {np.max(np.abs(r)):.3e}")
        return v


class LogisticLoss(_NewtonProx):
    """log(1 + exp(-t))."""

    name = "logistic"
    strictly_convex_c1 = True
    vanishing_tail = True

    def value(self, t):
        return np.logaddexp(0.0, -np.asarray(t, dtype=float))

    def deriv(self, t):
        return -special.expit(-np.asarray(t, dtype=float))

    def second(self, t):
        t = np.asarray(t, dtype=float)
        return special.expit(t) * special.expit(-t)


class Exponential(_NewtonProx):
    """exp(-t)."""

    name = "exponential"
    strictly_convex_c1 = True
    vanishing_tail = True

    def value(self, t):
        return np.exp(-np.asarray(t, dtype=float))

    def deriv(self, t):
        return -np.exp(-np.asarray(t, dtype=float))

    def second(self, t):
        return np.exp(-np.asarray(t, dtype=float))

    def prox(self, x, lam):
        # with v = x + u, u > 0 solves u = lam exp(-x - u); Newton on s = log u
        # keeps everything finite for very negative x
        x = np.asarray(x, dtype=float)
        c = np.log(lam) - x
        s = np.where(c > 1.0, np.log(np.maximum(c, 1.0)), c)
        for _ in range(PROX_MAX_ITER):
            eu = np.exp(s)
            f = eu + s - c
            if np.all(np.abs(f) <= PROX_TOL * (1.0 + np.abs(c))):
                break
            s = s - f / (eu + 1.0)
        else:
            raise ProxNonConvergence("exponential: prox did not converge")
        return x + np.exp(s)


@dataclass(frozen=True, eq=False, repr=False)
class ScaledLoss(Loss):
    """``base(c2 * t) / c1``; same correlation as ``base`` for c1 > 0, c2 > 0."""

    base: Loss
    c1: float
    c2: float

    def __post_init__(self):
        if self.c1 <= 0 or self.c2 == 0:
            raise ValueError("need c1 > 0 and c2 != 0")

    @property
    def name(self):
        return f"scaled({self.base.name},{self.c1:g},{self.c2:g})"

    @property
    def smooth(self):
        return self.base.smooth

    @property
    def twice_differentiable(self):
        return self.base.twice_differentiable

    @property
    def strictly_convex_c1(self):
        return self.base.strictly_convex_c1

    @property
    def vanishing_tail(self):
        return self.base.vanishing_tail and self.c2 > 0

    def value(self, t):
        return self.base.value(self.c2 * np.asarray(t, dtype=float)) / self.c1

    def deriv(self, t):
        return self.c2 * self.base.deriv(self.c2 * np.asarray(t, dtype=float)) / self.c1

    def second(self, t):
        return self.c2 ** 2 * self.base.second(self.c2 * np.asarray(t, dtype=float)) / self.c1

    def _inner_lam(self, lam):
        return lam * self.c2 ** 2 / self.c1

    def prox(self, x, lam):
        u = self.base.prox(self.c2 * np.asarray(x, dtype=float), self._inner_lam(lam))
        return u / self.c2

    def x_breaks(self, lam):
        return tuple(k / self.c2 for k in self.base.x_breaks(self._inner_lam(lam)))

    def subgradient_gap(self, v, g):
        v = np.asarray(v, dtype=float)
        return abs(self.c2) / self.c1 * self.base.subgradient_gap(self.c2 * v, g * self.c1 / self.c2)

    def __repr__(self):
        return f"ScaledLoss({self.base!r}, c1={self.c1}, c2={self.c2})"


@dataclass(frozen=True, eq=False, repr=False)
class TabulatedLoss(Loss):
    """Loss known through its derivative on a grid.

    The derivative is a monotone cubic interpolant of ``(grid, dloss)``;
    outside the grid it is held at the boundary value, so the loss continues
    linearly.  Values come from integrating the interpolant, anchored at the
    stored value of the middle grid point.
    """

    grid: np.ndarray
    dloss: np.ndarray
    loss: np.ndarray | None = None
    label: str = "tabulated"
    meta: dict = field(default_factory=dict)

    name = "tabulated"
    prox_strategy = "bisection"
    twice_differentiable = False

    def __post_init__(self):
        g = np.asarray(self.grid, dtype=float)
        if g.ndim != 1 or len(g) < 4 or np.any(np.diff(g) <= 0):
            raise ValueError("loss grid must be strictly increasing with at least 4 points")

    @cached_property
    def _d(self):
        return PchipInterpolator(self.grid, self.dloss, extrapolate=False)

    @cached_property
    def _antideriv(self):
        return self._d.antiderivative()

    @cached_property
    def _offset(self):
        k = len(self.grid) // 2
        anchor = 0.0 if self.loss is None else float(self.loss[k])
        return anchor - float(self._antideriv(self.grid[k]))

    @property
    def lo(self):
        return float(self.grid[0])

    @property
    def hi(self):
        return float(self.grid[-1])

    def deriv(self, t):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self.lo, self.hi)
        return self._d(tc)

    def second(self, t):
        t = np.asarray(t, dtype=float)
        inside = (t > self.lo) & (t < self.hi)
        return np.where(inside, self._d(np.clip(t, self.lo, self.hi), 1), 0.0)

    def value(self, t):
        t = np.asarray(t, dtype=float)
        tc = np.clip(t, self.lo, self.hi)
        base = self._antideriv(tc) + self._offset
        return base + self.deriv(tc) * (t - tc)

    def prox(self, x, lam):
        x = np.asarray(x, dtype=float)
        b = lam * (1.0 + np.abs(self.deriv(x)))
        lo, hi = x - b, x + b
        # bisection to a tight bracket, then Newton polish
        for _ in range(60):
            mid = 0.5 * (lo + hi)
            r = (mid - x) / lam + self.deriv(mid)
            lo = np.where(r < 0, mid, lo)
            hi = np.where(r >= 0, mid, hi)
            if np.all(hi - lo <= 1e-13 * (1.0 + np.abs(x))):
                break
        v = 0.5 * (lo + hi)
        for _ in range(PROX_MAX_ITER):
            r = (v - x) / lam + self.deriv(v)
            tol = _prox_tol(self, x, v, lam)
            if np.all(np.abs(r) <= tol):
                return v
            cand = v - r / (1.0 / lam + self.second(v))
            ok = (cand >= lo) & (cand <= hi)
            v = np.where(ok, cand, v)
            if not np.any(ok & (np.abs(r) > tol)):
                break
        r = (v - x) / lam + self.deriv(v)
        if np.any(np.abs(r) > 100 * _prox_tol(self, x, v, lam)):
            raise ProxNonConvergence(f"tabulated prox residual {np.max(np.abs(r)):.3e}")
        return v

    def x_breaks(self, lam):
        # second derivative jumps where the prox enters the linear tails
        return (self.lo + lam * float(self.deriv(self.lo)), self.hi + lam * float(self.deriv(self.hi)))

    def __repr__(self):
        return f"TabulatedLoss({self.label!r}, {len(self.grid)} points)"


LOSSES = {
    "square": Square,
    "ls": Square,
    "lad": LAD,
    "logistic": LogisticLoss,
    "exponential": Exponential,
    "exp": Exponential,
    "hinge": Hinge,
}


def make_loss(name):
    try:
        return LOSSES[name.lower()]()
    except KeyError:
        raise ValueError(f"unknown loss {name!r}; choose from {sorted(set(LOSSES))}") from None


def prox(loss, x, lam):
    if np.any(np.asarray(lam) <= 0):
        raise ValueError("lambda must be positive")
    return loss.prox(x, lam)


def envelope(loss, x, lam):
    """Moreau envelope value and both partial derivatives at ``(x, lam)``."""
    x = np.asarray(x, dtype=float)
    p = prox(loss, x, lam)
    r = x - p
    return EnvelopeEval(
        value=r * r / (2.0 * lam) + loss.value(p),
        dx=r / lam,
        dlambda=-(r * r) / (2.0 * lam * lam),
        prox_point=p,
    )


def envelope_second_derivative_ratio(loss, x, lam):
    """loss''(p) / (1 + lam loss''(p)) at ``p = prox(x; lam)``."""
    if not loss.twice_differentiable:
        raise NotTwiceDifferentiable(f"{loss.name} is not twice differentiable")
    p = prox(loss, x, lam)
    d2 = loss.second(p)
    return d2 / (1.0 + lam * d2)
