import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import optimize

from ermasym.errors import NotTwiceDifferentiable
from ermasym.losses import (LAD, Exponential, Hinge, LogisticLoss, ScaledLoss, Square,
                            TabulatedLoss, envelope, envelope_second_derivative_ratio, make_loss,
                            prox)


def square_table():
    t = np.linspace(-30, 30, 6001)
    return TabulatedLoss(t, 2 * (t - 1), (t - 1) ** 2, label="square-table")


LOSSES = [Square(), LAD(), Hinge(), LogisticLoss(), Exponential(),
          ScaledLoss(LogisticLoss(), 2.0, -1.5), ScaledLoss(Hinge(), 0.5, 3.0), square_table()]
IDS = [repr(l) for l in LOSSES]


KINKS = {"LAD": (1.0,), "Hinge": (1.0,)}


def brute_prox(loss, x, lam):
    """Grid search followed by bounded Brent on the prox objective."""
    obj = lambda v: (x - v) ** 2 / (2 * lam) + float(loss.value(v))
    grid = np.linspace(x - 12, x + 12, 24001)
    vals = (x - grid) ** 2 / (2 * lam) + loss.value(grid)
    i = int(np.argmin(vals))
    lo, hi = grid[max(i - 1, 0)], grid[min(i + 1, len(grid) - 1)]
    res = optimize.minimize_scalar(obj, bounds=(lo, hi), method="bounded",
                                   options={"xatol": 1e-12})
    # Brent never lands exactly on a kink of the loss, so try those points too
    cands = [(res.fun, res.x)] + [(obj(k), k) for k in KINKS.get(type(loss).__name__, ())]
    if isinstance(loss, ScaledLoss):
        cands += [(obj(k / loss.c2), k / loss.c2) for k in KINKS.get(type(loss.base).__name__, ())]
    val, arg = min(cands)
    return arg, val


def random_triples(rng, k):
    x = rng.uniform(-5, 5, k)
    lam = np.exp(rng.uniform(math.log(0.05), math.log(20), k))
    return x, lam


# --- worked examples ---------------------------------------------------------

def test_prox_examples():
    assert prox(Square(), 1.0, 5.0) == pytest.approx(1.0, abs=1e-15)
    assert prox(LAD(), 3.0, 1.0) == pytest.approx(2.0, abs=1e-15)
    assert prox(Hinge(), 0.0, 2.0) == pytest.approx(1.0, abs=1e-15)


def test_hinge_example_against_fine_grid():
    v = np.arange(-10, 10, 1e-6)
    obj = (0 - v) ** 2 / 4 + np.maximum(0, 1 - v)
    assert abs(v[np.argmin(obj)] - 1.0) < 2e-6


def test_square_envelope_examples():
    e = envelope(Square(), 1.0, 1.0)
    assert (e.value, e.dx, e.dlambda) == (0.0, 0.0, -0.0)
    e = envelope(Square(), 0.0, 0.5)
    assert e.prox_point == pytest.approx(0.5)
    assert e.value == pytest.approx(0.5)
    assert e.dx == pytest.approx(-1.0)
    assert e.dlambda == pytest.approx(-0.5)
    p, val = brute_prox(Square(), 0.0, 0.5)
    assert abs(val - 0.5) < 1e-10


@pytest.mark.parametrize("t", [0.1, 0.4, 0.9])
def test_lad_dead_zone_slope(t):
    lam = 1.3
    x = 1 + t * lam
    e = envelope(LAD(), x, lam)
    assert e.prox_point == 1.0
    assert e.dx == pytest.approx(t, rel=1e-14)
    # the brute-force envelope is quadratic inside the dead zone
    h = 1e-3
    fd = (brute_prox(LAD(), x + h, lam)[1] - brute_prox(LAD(), x - h, lam)[1]) / (2 * h)
    assert abs(fd - t) < 1e-6


def test_second_derivative_ratio_examples():
    for lam in (0.1, 1.0, 7.0):
        r = envelope_second_derivative_ratio(Square(), np.array([-3.0, 0.0, 4.0]), lam)
        np.testing.assert_allclose(r, 2 / (1 + 2 * lam), rtol=1e-14)
    assert envelope_second_derivative_ratio(LogisticLoss(), 60.0, 1.0) < 1e-20
    with pytest.raises(NotTwiceDifferentiable):
        envelope_second_derivative_ratio(LAD(), 0.0, 1.0)
    with pytest.raises(NotTwiceDifferentiable):
        envelope_second_derivative_ratio(Hinge(), 0.0, 1.0)
    with pytest.raises(NotTwiceDifferentiable):
        envelope_second_derivative_ratio(square_table(), 0.0, 1.0)


def test_exponential_ratio_matches_envelope_curvature():
    p = float(prox(Exponential(), 0.0, 1.0))
    assert p == pytest.approx(0.5671432904097838, rel=1e-12)  # omega constant: p = exp(-p)
    ratio = float(envelope_second_derivative_ratio(Exponential(), 0.0, 1.0))
    assert ratio == pytest.approx(math.exp(-p) / (1 + math.exp(-p)), rel=1e-12)
    h = 1e-3
    m = [brute_prox(Exponential(), x, 1.0)[1] for x in (-h, 0.0, h)]
    assert abs((m[0] - 2 * m[1] + m[2]) / h ** 2 - ratio) < 1e-5


# --- oracles -----------------------------------------------------------------

@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_prox_matches_brute_force(loss, rng):
    for x, lam in zip(*random_triples(rng, 40)):
        p_ref, val_ref = brute_prox(loss, x, lam)
        e = envelope(loss, x, lam)
        assert abs(e.value - val_ref) < 1e-9 * max(1, abs(val_ref))
        assert abs(e.prox_point - p_ref) < 1e-5


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_prox_optimality_residual_on_random_triples(loss, rng):
    x, lam = random_triples(rng, 10 ** 4)
    p = prox(loss, x, lam)
    gap = loss.subgradient_gap(p, (x - p) / lam)
    assert np.max(gap) <= 1e-10


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_prox_is_nonexpansive_on_random_pairs(loss, rng):
    x, lam = random_triples(rng, 10 ** 4)
    x2 = x + rng.normal(scale=0.5, size=x.shape)
    d = np.abs(prox(loss, x, lam) - prox(loss, x2, lam))
    assert np.all(d <= np.abs(x - x2) + 1e-12)


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_dlambda_identity(loss, rng):
    x, lam = random_triples(rng, 10 ** 4)
    e = envelope(loss, x, lam)
    np.testing.assert_allclose(e.dlambda, -e.dx ** 2 / 2, rtol=1e-9, atol=0)


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_envelope_finite_differences(loss, rng):
    x, lam = random_triples(rng, 400)
    h = 1e-5
    # central differences are meaningless across a kink of the derivative
    ok = np.ones_like(x, dtype=bool)
    for i, l in enumerate(lam):
        ok[i] = all(abs(x[i] - k) > 10 * h for k in loss.x_breaks(l)) if not loss.smooth else True
    x, lam = x[ok], lam[ok]
    e = envelope(loss, x, lam)
    fdx = (envelope(loss, x + h, lam).value - envelope(loss, x - h, lam).value) / (2 * h)
    fdl = (envelope(loss, x, lam + h * lam).value - envelope(loss, x, lam - h * lam).value) / (2 * h * lam)
    tol = np.maximum(1e-6, 1e-4 * np.abs(e.value))
    assert np.all(np.abs(fdx - e.dx) <= tol)
    assert np.all(np.abs(fdl - e.dlambda) <= tol)


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_envelope_convex_in_x(loss):
    h = 1e-3
    for lam in (0.1, 1.0, 5.0):
        x = np.linspace(-6, 6, 1201)
        m = envelope(loss, x, lam).value
        assert np.min(m[:-2] - 2 * m[1:-1] + m[2:]) / h ** 2 >= -1e-8 * 1e6


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_fenchel_identity(loss, rng):
    # M(x; lam) = q(x)/lam - (q + lam l)*(x)/lam with q = x^2/2; the conjugate is
    # computed here by direct maximization
    for x, lam in zip(*random_triples(rng, 25)):
        obj = lambda y: -(x * y - y * y / 2 - lam * float(loss.value(y)))
        ys = np.linspace(x - 20, x + 20, 40001)
        i = int(np.argmin(-(x * ys - ys * ys / 2 - lam * loss.value(ys))))
        res = optimize.minimize_scalar(obj, bounds=(ys[max(i - 1, 0)], ys[min(i + 1, 40000)]),
                                       method="bounded", options={"xatol": 1e-12})
        conj = -res.fun
        lhs = float(envelope(loss, x, lam).value)
        assert abs(lhs - (x * x / 2 / lam - conj / lam)) < 1e-6 * max(1.0, abs(lhs))


@pytest.mark.parametrize("loss", LOSSES, ids=IDS)
def test_loss_is_convex(loss, rng):
    a, b = rng.uniform(-6, 6, (2, 10 ** 4))
    th = rng.uniform(0, 1, 10 ** 4)
    lhs = loss.value(th * a + (1 - th) * b)
    rhs = th * loss.value(a) + (1 - th) * loss.value(b)
    assert np.all(lhs <= rhs + 1e-12 * np.maximum(1, np.abs(rhs)))


@settings(max_examples=200, deadline=None)
@given(st.floats(-50, 50), st.floats(-50, 50), st.floats(1e-3, 1e3),
       st.sampled_from(range(len(LOSSES))))
def test_prox_nonexpansive_property(x, y, lam, k):
    loss = LOSSES[k]
    d = abs(float(prox(loss, x, lam)) - float(prox(loss, y, lam)))
    assert d <= abs(x - y) * (1 + 1e-12) + 1e-12


@settings(max_examples=200, deadline=None)
@given(st.floats(-40, 40), st.floats(1e-4, 1e3), st.sampled_from(range(len(LOSSES))))
def test_prox_optimality_property(x, lam, k):
    loss = LOSSES[k]
    p = prox(loss, x, lam)
    g = (x - p) / lam
    assert float(loss.subgradient_gap(p, g)) <= 1e-10 * max(1.0, abs(g))


def test_prox_rejects_nonpositive_lambda():
    with pytest.raises(ValueError):
        prox(Square(), 0.0, 0.0)


# --- scaled and tabulated losses ----------------------------------------------

@pytest.mark.parametrize("c1,c2", [(2.0, 0.5), (0.3, -1.7)])
def test_scaled_loss_prox_against_brute_force(c1, c2, rng):
    loss = ScaledLoss(Exponential(), c1, c2)
    for x, lam in zip(*random_triples(rng, 20)):
        p_ref, _ = brute_prox(loss, x, lam)
        assert abs(float(prox(loss, x, lam)) - p_ref) < 1e-5


def test_scaled_loss_validation():
    with pytest.raises(ValueError):
        ScaledLoss(Square(), -1.0, 1.0)
    with pytest.raises(ValueError):
        ScaledLoss(Square(), 1.0, 0.0)
    assert not ScaledLoss(Hinge(), 1.0, -1.0).vanishing_tail


def test_tabulated_square_matches_square():
    tab, sq = square_table(), Square()
    x = np.linspace(-10, 10, 101)
    for lam in (0.01, 0.5, 3.0):
        np.testing.assert_allclose(prox(tab, x, lam), prox(sq, x, lam), atol=1e-10)
        np.testing.assert_allclose(envelope(tab, x, lam).value, envelope(sq, x, lam).value,
                                   atol=1e-8)


def test_tabulated_linear_tails():
    t = np.linspace(-2, 2, 401)
    tab = TabulatedLoss(t, np.tanh(t))
    assert tab.deriv(10.0) == pytest.approx(np.tanh(2.0))
    v = tab.value(np.array([2.0, 3.0, 5.0]))
    assert v[2] - v[1] == pytest.approx(2 * np.tanh(2.0), rel=1e-12)
    assert v[1] - v[0] == pytest.approx(np.tanh(2.0), rel=1e-12)
    x = np.array([-40.0, 40.0])
    p = prox(tab, x, 2.0)
    np.testing.assert_allclose(p, x - 2.0 * np.tanh(np.clip(p, -2, 2)), atol=1e-10)


def test_tabulated_values_anchor_at_midpoint():
    t = np.linspace(-3, 3, 601)
    tab = TabulatedLoss(t, 2 * t, t * t + 7.0)
    assert float(tab.value(0.0)) == pytest.approx(7.0, abs=1e-12)
    assert float(tab.value(2.0)) == pytest.approx(11.0, abs=1e-9)


def test_tabulated_grid_validation():
    with pytest.raises(ValueError):
        TabulatedLoss(np.array([0.0, 1.0, 1.0, 2.0]), np.zeros(4))


def test_make_loss():
    assert isinstance(make_loss("LS"), Square)
    assert isinstance(make_loss("exp"), Exponential)
    with pytest.raises(ValueError):
        make_loss("huber")


def test_loss_flags():
    assert Square().strictly_convex_c1 and LogisticLoss().strictly_convex_c1
    assert not LAD().smooth and not Hinge().smooth
    assert Hinge().vanishing_tail and LogisticLoss().vanishing_tail and Exponential().vanishing_tail
    assert not Square().vanishing_tail
