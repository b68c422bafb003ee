"""Deterministic expectations over ``(G, SY)`` with G standard normal.

The G-direction uses Gauss-Hermite nodes for smooth integrands.  When the
integrand has kinks at known g-locations (envelope derivatives of LAD or hinge)
the caller passes ``g_breaks`` and the G-direction switches to composite
Gauss-Legendre panels that break at those points.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import special

from .errors import NonFiniteIntegrand, QuadratureNonConvergence

G_MAX = 10.0
_BASE_G_BREAKS = np.linspace(-G_MAX, G_MAX, 9)
REFINE_TOL = 1e-7


@dataclass(frozen=True, eq=False)
class QuadratureRule:
    model: object
    n_g: int
    n_sy: int
    g_nodes: np.ndarray
    g_weights: np.ndarray
    sy_nodes: np.ndarray
    sy_weights: np.ndarray

    @property
    def split_points(self):
        return self.model.split_points

    def refined(self):
        return make_rule(self.model, 2 * self.n_g, 2 * self.n_sy)

    def nodes(self, g_breaks=None):
        """Flattened ``(g, sy, weight)`` arrays for the tensor rule.

        ``g_breaks`` maps the sy-node array to an ``(n_sy, k)`` array of
        g-locations where the integrand is not smooth.
        """
        sy, v = self.sy_nodes, self.sy_weights
        if g_breaks is None:
            g = np.broadcast_to(self.g_nodes[None, :], (len(sy), len(self.g_nodes)))
            w = v[:, None] * self.g_weights[None, :]
            s = np.broadcast_to(sy[:, None], g.shape)
            return g.ravel(), s.ravel(), w.ravel()
        kinks = np.asarray(g_breaks(sy), dtype=float).reshape(len(sy), -1)
        brk = np.concatenate(
            [np.broadcast_to(_BASE_G_BREAKS, (len(sy), len(_BASE_G_BREAKS))),
             np.clip(kinks, -G_MAX, G_MAX)], axis=1)
        brk.sort(axis=1)
        a, b = brk[:, :-1], brk[:, 1:]
        q = max(8, self.n_g // 5)
        x, wl = np.polynomial.legendre.leggauss(q)
        half = 0.5 * (b - a)[..., None]
        g = a[..., None] + half * (x + 1.0)
        w = half * wl * np.exp(-0.5 * g * g) / math.sqrt(2 * math.pi)
        w = w * v[:, None, None]
        s = np.broadcast_to(sy[:, None, None], g.shape)
        return g.ravel(), s.ravel(), w.ravel()


def make_rule(model, n_g=80, n_sy=64):
    """Tensor rule: Gauss-Hermite in G, p_SY-weighted Gauss-Legendre panels in SY."""
    x, w = special.roots_hermitenorm(n_g)
    w = w / math.sqrt(2 * math.pi)
    z, v = model.sy_quadrature(n_sy, 2)
    return QuadratureRule(model, n_g, n_sy, x, w, z, v)


def _apply(rule, integrand, g_breaks):
    g, s, w = rule.nodes(g_breaks)
    vals = np.asarray(integrand(g, s), dtype=float)
    vals = np.broadcast_to(vals, vals.shape[:-1] + w.shape) if vals.ndim else np.full(w.shape, float(vals))
    if not np.all(np.isfinite(vals[..., w > 0])):
        raise NonFiniteIntegrand("integrand is not finite on the quadrature nodes")
    out = vals @ w
    return float(out) if out.ndim == 0 else out


def expect_gsy(rule, integrand, g_breaks=None, check=True):
    """E[integrand(G, SY)] by tensor-product quadrature.

    The integrand may return a stacked array ``(k, ...)`` to get k expectations
    from one pass.  With ``check`` the result is recomputed on a rule with
    doubled orders and must agree to 1e-7 (relative for values above one).
    """
    val = _apply(rule, integrand, g_breaks)
    if check:
        fine = _apply(rule.refined(), integrand, g_breaks)
        gap = np.abs(np.subtract(fine, val))
        if np.any(gap > REFINE_TOL * np.maximum(1.0, np.abs(fine))):
            raise QuadratureNonConvergence(
                f"refinement changed the expectation by {np.max(gap):.2e}")
    return val


def negpart_sq_given(a):
    """E[min(0, G + a)^2] for G standard normal, elementwise in ``a``."""
    a = np.asarray(a, dtype=float)
    return (1.0 + a * a) * special.ndtr(-a) - a * np.exp(-0.5 * a * a) / math.sqrt(2 * math.pi)


def expect_negpart_sq(rule, c):
    """E[(G + c SY)_-^2]; the inner Gaussian integral is done in closed form."""
    return float(np.dot(rule.sy_weights, negpart_sq_given(c * rule.sy_nodes)))
