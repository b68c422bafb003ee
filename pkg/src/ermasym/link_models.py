"""Binary label models and the induced law of the product SY.

Each model describes ``Y = f(S)`` for ``S ~ N(0, 1)``.  Everything downstream
only needs the density of ``SY`` (plus its log and, where it exists, its
score) and a way to draw labels for Monte Carlo.
"""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
from scipy import special
from scipy.interpolate import PchipInterpolator

from .errors import DensityNotDifferentiable, QuadratureNonConvergence

SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
LOG_SQRT_2_OVER_PI = 0.5 * math.log(2.0 / math.pi)

# standard-normal mass beyond |8| is below 1e-15
SY_BOUND = 8.0


def gauss_legendre_panels(segments, n_nodes, n_panels=1):
    """Composite Gauss-Legendre nodes/weights over a list of ``(a, b)`` segments."""
    x, w = np.polynomial.legendre.leggauss(n_nodes)
    nodes, weights = [], []
    for a, b in segments:
        edges = np.linspace(a, b, n_panels + 1)
        for lo, hi in zip(edges[:-1], edges[1:]):
            half = 0.5 * (hi - lo)
            nodes.append(lo + half * (x + 1.0))
            weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def rng_for(seed, stream=0):
    """Independent generator keyed by ``(seed, stream)``."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(stream),)))


@dataclass(frozen=True)
class LinkModel:
    """Base class.  Subclasses provide ``log_density`` and ``sample_labels``."""

    name = "abstract"
    differentiable = True
    has_label_law = True
    # p_W satisfies (log p_W)'' <= -1/(sigma^2+1) for every sigma by an analytic
    # argument (not just on a grid)
    curvature_proven = False

    # --- density of SY -------------------------------------------------
    def log_density(self, w):
        raise NotImplementedError

    def density(self, w):
        return np.exp(self.log_density(np.asarray(w, dtype=float)))

    def score(self, w):
        """d/dw log p_SY(w)."""
        raise DensityNotDifferentiable(f"{self.tag}: p_SY has no derivative on the real line")

    @property
    def support(self):
        return (-SY_BOUND, SY_BOUND)

    @property
    def split_points(self):
        """Points where p_SY is not smooth (quadrature panels break there)."""
        return (0.0,)

    @property
    def resolution_points(self):
        """Extra panel edges for integrals against p_SY; empty when fixed panels suffice."""
        return ()

    def segments(self):
        lo, hi = self.support
        pts = [lo] + [s for s in self.split_points if lo < s < hi] + [hi]
        return list(zip(pts[:-1], pts[1:]))

    def sy_quadrature(self, n_nodes=64, n_panels=2):
        """Nodes ``z`` and weights ``v`` with ``sum(v * h(z)) ~= E[h(SY)]``."""
        z, w = gauss_legendre_panels(self.segments(), n_nodes, n_panels)
        return z, w * self.density(z)

    # --- moments --------------------------------------------------------
    @cached_property
    def mean_sy(self):
        """E[SY], checked against a doubled rule to 1e-9."""
        z1, v1 = self.sy_quadrature(64, 2)
        z2, v2 = self.sy_quadrature(128, 4)
        m1, m2 = float(np.dot(v1, z1)), float(np.dot(v2, z2))
        if abs(m1 - m2) > 1e-9:
            raise QuadratureNonConvergence(f"mean_sy for {self.tag}: {m1} vs {m2}")
        return m2

    @cached_property
    def fisher_sy(self):
        """Fisher information of SY (differentiable densities only)."""
        z, v = self.sy_quadrature(128, 4)
        return float(np.dot(v, self.score(z) ** 2))

    # --- sampling -------------------------------------------------------
    def sample_labels(self, s, rng):
        raise NotImplementedError

    @property
    def tag(self):
        return self.name


@dataclass(frozen=True)
class NoisySigned(LinkModel):
    """``y = sign(s)``, flipped with probability ``eps``."""

    eps: float = 0.0
    name = "noisysigned"

    def __post_init__(self):
        if not 0.0 <= self.eps <= 0.5:
            raise ValueError(f"eps must lie in [0, 1/2], got {self.eps}")

    @property
    def differentiable(self):
        # jump at 0 unless eps == 1/2 (then SY is exactly standard normal)
        return self.eps == 0.5

    def log_density(self, w):
        w = np.asarray(w, dtype=float)
        with np.errstate(divide="ignore"):
            side = np.where(w >= 0, math.log1p(-self.eps), np.log(self.eps))
        return LOG_SQRT_2_OVER_PI - 0.5 * w * w + side

    def score(self, w):
        if not self.differentiable:
            return super().score(w)
        return -np.asarray(w, dtype=float)

    @property
    def support(self):
        if self.eps == 0.0:
            return (0.0, SY_BOUND)
        return (-SY_BOUND, SY_BOUND)

    def sample_labels(self, s, rng):
        y = np.where(s >= 0, 1.0, -1.0)
        if self.eps > 0.0:
            flip = rng.random(np.shape(s)) < self.eps
            y = np.where(flip, -y, y)
        return y

    @property
    def tag(self):
        return f"noisysigned(eps={self.eps:g})"


@dataclass(frozen=True)
class Signed(NoisySigned):
    name = "signed"
    curvature_proven = True

    def __post_init__(self):
        if self.eps != 0.0:
            raise ValueError("Signed is the noiseless model; use NoisySigned for eps > 0")

    @property
    def tag(self):
        return "signed"


@dataclass(frozen=True)
class Logistic(LinkModel):
    name = "logistic"

    def log_density(self, w):
        w = np.asarray(w, dtype=float)
        return LOG_SQRT_2_OVER_PI - 0.5 * w * w - np.logaddexp(0.0, -w)

    def score(self, w):
        w = np.asarray(w, dtype=float)
        return -w + special.expit(-w)

    def sample_labels(self, s, rng):
        u = rng.random(np.shape(s))
        return np.where(u < special.expit(s), 1.0, -1.0)


@dataclass(frozen=True)
class Probit(LinkModel):
    name = "probit"

    def log_density(self, w):
        w = np.asarray(w, dtype=float)
        return LOG_SQRT_2_OVER_PI - 0.5 * w * w + special.log_ndtr(w)

    def score(self, w):
        w = np.asarray(w, dtype=float)
        # phi(w) / Phi(w) evaluated in log space for the far left tail
        mills = np.exp(-0.5 * w * w - 0.5 * math.log(2 * math.pi) - special.log_ndtr(w))
        return -w + mills

    def sample_labels(self, s, rng):
        u = rng.random(np.shape(s))
        return np.where(u < special.ndtr(s), 1.0, -1.0)


@dataclass(frozen=True)
class GaussianSY(LinkModel):
    """Synthetic model with ``SY ~ N(mean, var)``.

    Not realizable by any binary link; it exists because every quantity of the
    fundamental-limit pipeline has a closed form for it.  Monte Carlo draws
    the product ``SY`` directly (``sample_labels`` is unavailable).
    """

    mean: float = 0.5
    var: float | None = None
    name = "gaussian-sy"
    has_label_law = False

    def __post_init__(self):
        if self.var is None:
            object.__setattr__(self, "var", 1.0 - self.mean ** 2)
        if self.var <= 0:
            raise ValueError("GaussianSY needs a positive variance")

    @property
    def curvature_proven(self):
        # p_SY / phi is log-concave exactly when var <= 1
        return self.var <= 1.0

    @property
    def sd(self):
        return math.sqrt(self.var)

    def log_density(self, w):
        w = np.asarray(w, dtype=float)
        return -0.5 * (w - self.mean) ** 2 / self.var - 0.5 * math.log(2 * math.pi * self.var)

    def score(self, w):
        return -(np.asarray(w, dtype=float) - self.mean) / self.var

    @property
    def support(self):
        return (self.mean - 24 * self.sd, self.mean + 24 * self.sd)

    @property
    def split_points(self):
        return (self.mean,)

    def sample_sy(self, size, rng):
        return self.mean + self.sd * rng.standard_normal(size)

    @property
    def tag(self):
        return f"gaussian-sy(m={self.mean:g},v={self.var:g})"


@dataclass(frozen=True, eq=False)
class TabulatedModel(LinkModel):
    """p_SY given on a grid, interpolated with a monotone cubic.

    The density is zero outside the grid.  ``renormalization`` records the
    factor the raw values were divided by.
    """

    grid: np.ndarray = field(repr=False, default=None)
    values: np.ndarray = field(repr=False, default=None)
    renormalization: float = 1.0
    label: str = "tabulated"
    name = "tabulated"
    # identity semantics: caches keyed on the model must not merge distinct tables
    __eq__ = object.__eq__
    __hash__ = object.__hash__

    @classmethod
    def from_arrays(cls, w, p, label="tabulated"):
        w = np.asarray(w, dtype=float)
        p = np.asarray(p, dtype=float)
        if w.ndim != 1 or w.shape != p.shape:
            raise ValueError("grid and density must be 1-D arrays of equal length")
        if len(w) < 1024:
            raise ValueError(f"tabulated density needs at least 1024 grid points, got {len(w)}")
        if np.any(np.diff(w) <= 0):
            raise ValueError("grid must be strictly increasing")
        if np.any(p < 0):
            raise ValueError("density values must be nonnegative")
        with np.errstate(over="ignore", divide="ignore"):
            # underflowed slopes overflow the harmonic mean; scipy then uses 0
            mass = float(PchipInterpolator(w, p).integrate(w[0], w[-1]))
        if mass <= 0:
            raise ValueError("density has zero mass")
        return cls(grid=w, values=p / mass, renormalization=mass, label=label)

    @cached_property
    def _interp(self):
        with np.errstate(over="ignore", divide="ignore"):
            return PchipInterpolator(self.grid, self.values, extrapolate=False)

    def density(self, w):
        w = np.asarray(w, dtype=float)
        out = self._interp(w)
        return np.clip(np.nan_to_num(out, nan=0.0), 0.0, None)

    def log_density(self, w):
        with np.errstate(divide="ignore"):
            return np.log(self.density(w))

    def score(self, w):
        w = np.asarray(w, dtype=float)
        d = np.nan_to_num(self._interp(w, 1), nan=0.0)
        p = self.density(w)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(p > 0, d / np.where(p > 0, p, 1.0), 0.0)

    @property
    def support(self):
        return (float(self.grid[0]), float(self.grid[-1]))

    @property
    def split_points(self):
        return ()

    @cached_property
    def resolution_points(self):
        # quantiles put panel edges where the mass is, however narrow the features
        cdf = self._interp.antiderivative()(self.grid)
        tail = np.geomspace(1e-10, 1e-2, 9)
        levels = np.concatenate([tail, np.linspace(0.02, 0.98, 49), 1.0 - tail[::-1]])
        return tuple(np.interp(levels * cdf[-1], cdf, self.grid))

    def sy_quadrature(self, n_nodes=64, n_panels=2):
        # one panel per grid cell: exact for the piecewise-cubic interpolant
        k = max(2, n_nodes // 16)
        x, w = np.polynomial.legendre.leggauss(k)
        lo, hi = self.grid[:-1, None], self.grid[1:, None]
        half = 0.5 * (hi - lo)
        z = (lo + half * (x + 1.0)).ravel()
        v = (half * w).ravel()
        return z, v * self.density(z)

    def sample_labels(self, s, rng):
        # the symmetric choice P(Y=1|s) + P(Y=1|-s) = 1 gives P(Y=1|s) = p(s) / (2 phi(s))
        s = np.asarray(s, dtype=float)
        phi = np.exp(-0.5 * s * s) / math.sqrt(2 * math.pi)
        prob = np.clip(self.density(s) / (2 * phi), 0.0, 1.0)
        return np.where(rng.random(s.shape) < prob, 1.0, -1.0)

    @property
    def tag(self):
        return f"tabulated({self.label})"


def load_tabulated_model(path):
    """Read a ``w,p`` CSV into a :class:`TabulatedModel`."""
    with open(path, newline="") as fh:
        rows = [r for r in csv.reader(line for line in fh if not line.startswith("#"))]
    header = [h.strip() for h in rows[0]]
    if header[:2] != ["w", "p"]:
        raise ValueError(f"{path}: expected header 'w,p', got {rows[0]}")
    data = np.array([[float(x) for x in r[:2]] for r in rows[1:] if r], dtype=float)
    return TabulatedModel.from_arrays(data[:, 0], data[:, 1], label=str(path))


def make_model(name, eps=0.0, sy_mean=0.5, sy_var=None, table=None):
    """Build a model from its command-line name."""
    key = name.lower().replace("_", "-")
    if key == "signed":
        return Signed()
    if key in ("noisysigned", "noisy-signed"):
        return Signed() if eps == 0 else NoisySigned(eps)
    if key == "logistic":
        return Logistic()
    if key == "probit":
        return Probit()
    if key in ("gaussian-sy", "gaussiansy"):
        return GaussianSY(sy_mean, sy_var)
    if key == "tabulated":
        if table is None:
            raise ValueError("tabulated model needs a density table path")
        return load_tabulated_model(table)
    raise ValueError(f"unknown model {name!r}")


def density_sy(model, w):
    """Density of SY at ``w`` (array-friendly)."""
    return model.density(w)


def mean_sy(model):
    return model.mean_sy


def sample_pairs(model, count, seed, stream=0):
    """Draw ``count`` pairs ``(s, y)`` with ``s ~ N(0, 1)`` and ``y`` from the model.

    For :class:`GaussianSY` the product itself is drawn and returned as ``s``
    with ``y = +1``.
    """
    if count < 1:
        raise ValueError("count must be positive")
    rng = rng_for(seed, stream)
    if not model.has_label_law:
        return model.sample_sy(count, rng), np.ones(count)
    s = rng.standard_normal(count)
    return s, model.sample_labels(s, rng)
