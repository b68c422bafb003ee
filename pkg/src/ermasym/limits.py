"""Fisher-information limits for W = sigma G + SY.

Densities of ``W_sigma`` are convolutions of ``p_SY`` with a Gaussian kernel.
Derivatives use the differentiated kernel, which makes them posterior moments
of G given ``W = w``:

    p'/p        = -E[G | w] / sigma
    (log p)''   = (Var[G | w] - 1) / sigma^2

These are evaluated in the log domain so the tails stay finite.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import integrate, optimize, special

from .errors import DensityNotDifferentiable, MeanNotPositive, NoRoot, SigmaTooSmall

W_BASE = 8.0
N_GRID = 4096
P_FLOOR = 1e-14
SIGMA_MIN = 1e-3
SIGMA_MAX = 1e3
SCAN = np.logspace(-2, 1, 49)
_Q = 16
_G_HALF = 12.0
# geometric panel edges around density jumps resolve boundary layers in the tails
_LAYER = np.array([-1.0, -0.3, -0.1, -0.03, -0.01, 0.01, 0.03, 0.1, 0.3, 1.0])
_LOG_SQRT_2PI = 0.5 * math.log(2 * math.pi)


def _panel_rule(a, b, q=_Q):
    """GL nodes/weights on panels ``[a_i, b_i]``; arrays broadcast over rows."""
    x, wl = np.polynomial.legendre.leggauss(q)
    half = 0.5 * (b - a)[..., None]
    return (a[..., None] + half * (x + 1.0)), half * wl


def _posterior_nodes(model, sigma, w):
    """Return ``(g, logw)`` of shape (len(w), k): a quadrature for
    ``p_W(w) = int phi(g) p_SY(w - sigma g) dg`` with log-weights that already
    include the integrand."""
    w = np.asarray(w, dtype=float)
    a, b = model.support
    splits = np.array([s for s in model.split_points if a < s < b])
    extra = np.asarray(model.resolution_points, dtype=float)
    if sigma <= 1.0:
        # the integrand lives on g in [(w-b)/sigma, (w-a)/sigma] and, for
        # Gaussian-tailed p_SY, within a unit-width bump around w sigma/(1+sigma^2)
        lo_img, hi_img = (w - b) / sigma, (w - a) / sigma
        centre = np.clip(w * sigma / (1.0 + sigma * sigma), lo_img, hi_img)
        lo = np.maximum(centre - _G_HALF, lo_img)
        hi = np.minimum(centre + _G_HALF, hi_img)
        base = lo[:, None] + (hi - lo)[:, None] * np.linspace(0.0, 1.0, 9)[None, :]
        cuts = (w[:, None] - splits[None, :]) / sigma
        layers = (cuts[:, :, None] + _LAYER[None, None, :]).reshape(len(w), -1)
        fine = (w[:, None] - extra[None, :]) / sigma
        brk = np.concatenate([base, cuts, layers, fine], axis=1)
        brk = np.sort(np.clip(brk, lo[:, None], hi[:, None]), axis=1)
        g, wt = _panel_rule(brk[:, :-1], brk[:, 1:])
        g = g.reshape(len(w), -1)
        wt = wt.reshape(len(w), -1)
        # clipped breaks leave empty panels; only live nodes need the density
        live = wt > 0
        logw = np.full(g.shape, -np.inf)
        u = (w[:, None] - sigma * g)[live]
        with np.errstate(divide="ignore"):
            logw[live] = np.log(wt[live]) - 0.5 * g[live] ** 2 - _LOG_SQRT_2PI + model.log_density(u)
        return g, logw
    if extra.size:
        # two-point rules per interpolation cell are exact for the cubic
        # interpolant; cells with negligible density are skipped
        u, wt = model.sy_quadrature(32)
        keep = wt > 1e-16 * wt.max()
        u, logu = u[keep], np.log(wt[keep])
    else:
        pts = [a, b] + list(splits) + [s + d for s in splits for d in _LAYER]
        pts += list(np.arange(math.ceil(a), math.floor(b) + 1.0))
        pts = np.unique(np.clip(pts, a, b))
        u, wt = _panel_rule(pts[:-1], pts[1:])
        u, wt = u.ravel(), wt.ravel()
        with np.errstate(divide="ignore"):
            logu = np.log(wt) + model.log_density(u)
    g = (w[:, None] - u[None, :]) / sigma
    logw = logu[None, :] - 0.5 * g * g - _LOG_SQRT_2PI - math.log(sigma)
    return g, logw


def posterior_moments(model, sigma, w):
    """``(log p_W(w), E[G | w], Var[G | w])`` evaluated at the points ``w``."""
    g, logw = _posterior_nodes(model, sigma, w)
    logp = special.logsumexp(logw, axis=1)
    with np.errstate(invalid="ignore"):
        post = np.exp(logw - logp[:, None])
    post = np.nan_to_num(post)
    mean = np.sum(post * g, axis=1)
    var = np.sum(post * (g - mean[:, None]) ** 2, axis=1)
    return logp, mean, var


@dataclass(frozen=True, eq=False)
class DensityTable:
    sigma: float
    grid: np.ndarray
    p: np.ndarray
    dp: np.ndarray
    score: np.ndarray
    logp2: np.ndarray
    fisher: float

    @property
    def step(self):
        return float(self.grid[1] - self.grid[0])

    def integrate(self, values):
        """Trapezoid rule on the grid."""
        return float(integrate.trapezoid(values, dx=self.step))

    def mass(self):
        return self.integrate(self.p)

    def moment(self, k):
        return self.integrate(self.grid ** k * self.p)

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            out = csv.writer(fh, lineterminator="\n")
            out.writerow(["w", "p", "dp", "score"])
            for row in zip(self.grid, self.p, self.dp, self.score):
                out.writerow([f"{x:.17g}" for x in row])


def density_w(model, sigma, n_grid=N_GRID, w_max=None):
    if sigma < SIGMA_MIN:
        raise SigmaTooSmall(f"sigma={sigma:g} is below {SIGMA_MIN:g}")
    w_max = W_BASE + W_BASE * sigma if w_max is None else w_max
    grid = np.linspace(-w_max, w_max, n_grid)
    logp, mean, var = posterior_moments(model, sigma, grid)
    p = np.exp(logp)
    score = -mean / sigma
    logp2 = (var - 1.0) / sigma ** 2
    keep = p >= P_FLOOR
    fisher = float(integrate.trapezoid(np.where(keep, score * score * p, 0.0), grid))
    return DensityTable(float(sigma), grid, p, score * p, score, logp2, fisher)


@lru_cache(maxsize=4096)
def _fisher_cached(model, sigma):
    return density_w(model, sigma).fisher


def fisher_w(model, sigma):
    return _fisher_cached(model, float(sigma))


def kappa_from_fisher(sigma, fisher):
    s2 = sigma * sigma
    num = max(s2 * (s2 * fisher + fisher - 1.0), 0.0)
    return num / (1.0 + s2 * (s2 * fisher - 1.0))


def kappa(model, sigma):
    return kappa_from_fisher(sigma, fisher_w(model, sigma))


@dataclass(frozen=True)
class SigmaOpt:
    sigma: float
    delta: float
    bracket: tuple
    sign_changes: tuple

    @property
    def correlation(self):
        return 1.0 / math.sqrt(1.0 + self.sigma ** 2)


def sigma_opt(model, delta, xtol=1e-10):
    """Smallest root of kappa(sigma) = 1/delta."""
    if delta <= 1:
        raise ValueError("delta must exceed 1")
    target = 1.0 / delta
    grid = list(SCAN)
    while kappa(model, grid[-1]) <= target:
        nxt = grid[-1] * 10 ** (1 / 16)
        if nxt > SIGMA_MAX:
            raise NoRoot(f"kappa stays below 1/delta={target:g} up to sigma={SIGMA_MAX:g}")
        grid.append(nxt)
    if kappa(model, grid[0]) > target:
        lo = SIGMA_MIN
        if kappa(model, lo) > target:
            raise NoRoot(f"kappa exceeds 1/delta already at sigma={SIGMA_MIN:g}")
        grid.insert(0, lo)
    vals = np.array([kappa(model, s) - target for s in grid])
    flips = [i for i in range(len(grid) - 1) if vals[i] <= 0 < vals[i + 1] or vals[i] > 0 >= vals[i + 1]]
    i = flips[0]
    root = optimize.brentq(lambda s: kappa(model, s) - target, grid[i], grid[i + 1], xtol=xtol)
    changes = tuple((grid[j], grid[j + 1]) for j in flips)
    return SigmaOpt(float(root), float(delta), (grid[i], grid[i + 1]), changes)


def _require_differentiable(model):
    if not model.differentiable:
        raise DensityNotDifferentiable(f"{model.tag}: p_SY is not differentiable")


def stam_lower_bound(model, delta):
    """Closed-form lower bound on sigma_opt^2 from Stam's inequality."""
    _require_differentiable(model)
    return 1.0 / ((delta - 1.0) * (model.fisher_sy - 1.0))


def ls_suboptimality(model):
    """``(xi, 1/sqrt(xi))`` bounding sigma_LS^2 / sigma_opt^2 from above."""
    _require_differentiable(model)
    m = model.mean_sy
    if m <= 1e-12:
        raise MeanNotPositive(f"E[SY] = {m:.3g} is not positive")
    xi = (model.fisher_sy - 1.0) * (1.0 - m * m) / (m * m)
    return xi, 1.0 / math.sqrt(xi)
