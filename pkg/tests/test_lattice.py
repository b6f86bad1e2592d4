import csv

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gexpect.core import ModelSpec, UncertaintyBox
from gexpect.lattice import (
    BudgetError,
    CFLError,
    GridSpec,
    TreeSpec,
    brute_force_expectation,
    check_cfl,
    conditional_expectation,
    grid_for_model,
    quadvar_functional,
    step_expectation,
    tree_dp,
)

BAND = UncertaintyBox.of(0.25, 1.0)
GRID = GridSpec(-4.0, 4.0, 81, 1.0, 100)


def heat(phi, band=BAND, mode="inf", **kw):
    return ModelSpec(box=band, terminal=phi, mode=mode, **kw)


def surface(phi, mode="inf", grid=GRID, band=BAND):
    return conditional_expectation(heat(phi, band, mode), grid)[0].values


# -- one step -------------------------------------------------------------------------------


@pytest.mark.parametrize("band,mode,factor", [((1, 1), "inf", 1.0), ((1, 4), "inf", 1.0), ((1, 4), "sup", 4.0)])
def test_three_node_step(band, mode, factor):
    h, dt = 0.5, 0.01
    grid = GridSpec(-h, h, 3, dt, 1)
    row = np.array([h * h, 0.0, h * h])
    out, idx = step_expectation(row, heat("x*x", UncertaintyBox.of(*band)), grid, 0, mode)
    assert out[1] == pytest.approx(factor * dt, rel=1e-14)
    assert idx[1] == (1 if factor == 4.0 else 0)


def test_step_rejects_non_finite_row():
    grid = GridSpec(-1, 1, 5, 0.01, 1)
    with pytest.raises(ArithmeticError):
        step_expectation(np.array([0, np.inf, 0, 0, 0.0]), heat("x"), grid, 0)


def test_cfl_violation_reports_max_dt():
    grid = GridSpec(-1, 1, 201, 1.0, 2)
    with pytest.raises(CFLError) as err:
        conditional_expectation(heat("x"), grid)
    assert err.value.max_dt < grid.dt
    g = grid_for_model(heat("x"), -1, 1, 201, 1.0)
    assert check_cfl(heat("x"), g) >= g.dt


# -- whole-grid examples --------------------------------------------------------------------


def test_linear_payoff_is_fixed_point():
    v = surface("x")
    x = GRID.states()
    np.testing.assert_allclose(v, np.broadcast_to(x, v.shape), atol=1e-12)


@pytest.mark.parametrize("mode,var", [("inf", 0.25), ("sup", 1.0)])
def test_square_payoff_picks_extremal_variance(mode, var):
    v = surface("x*x", mode)
    i0 = GRID.Nx[0] // 2
    assert v[0, i0] == pytest.approx(var * GRID.T, abs=5e-3)


def test_offer_dominates_bid():
    phi = "max(x-0.5,0)-2*max(x,0)+max(x+0.5,0)"
    assert np.all(surface(phi, "sup") >= surface(phi, "inf"))


def test_tower_restart_is_bitwise():
    model = heat("sin(x)+max(x,0)", mode="sup")
    full, _ = conditional_expectation(model, GRID)
    s = 40
    part, _ = conditional_expectation(model, GRID, terminal=full.values[s], start=s)
    np.testing.assert_array_equal(part.values[: s + 1], full.values[: s + 1])


def test_csv_layout(tmp_path):
    grid = GridSpec(-1, 1, 5, 0.1, 2)
    surf, pol = conditional_expectation(heat("x*x"), grid)
    path = surf.to_csv(tmp_path / "s.csv", pol)
    rows = list(csv.reader(path.open()))
    assert rows[0] == ["t", "x", "value", "vertex_0"]
    assert len(rows) == 1 + 3 * 5
    assert rows[-1][3] == ""
    assert float(rows[1][2]) == surf.values[0, 0]  # 17 digits round-trip


# -- properties of the conditional expectation --------------------------------------------

coef = st.floats(min_value=-2, max_value=2, allow_nan=False)
PAYOFFS = ["max(x-{a},0)", "sin({a}*x)", "abs(x-{a})", "cos(x)*{a}", "min(x,{a})", "x*x*{a}"]


@st.composite
def payoffs(draw):
    t = draw(st.sampled_from(PAYOFFS))
    return t.format(a=repr(abs(draw(coef)) + 0.1)) if "{a}" in t else t


SMALL = GridSpec(-3.0, 3.0, 31, 0.5, 30)


@given(payoffs(), st.sampled_from(["inf", "sup"]))
def test_duality_nodewise(phi, mode):
    a = surface(phi, mode, SMALL)
    b = surface(f"-({phi})", "sup" if mode == "inf" else "inf", SMALL)
    np.testing.assert_allclose(a, -b, rtol=0, atol=1e-13)


@given(payoffs(), payoffs())
def test_sub_and_super_additivity(p1, p2):
    both = f"({p1})+({p2})"
    assert np.all(surface(both, "sup", SMALL) <= surface(p1, "sup", SMALL) + surface(p2, "sup", SMALL) + 1e-12)
    assert np.all(surface(both, "inf", SMALL) >= surface(p1, "inf", SMALL) + surface(p2, "inf", SMALL) - 1e-12)


@given(payoffs(), st.floats(min_value=0, max_value=5))
def test_positive_homogeneity(phi, lam):
    np.testing.assert_allclose(surface(f"{lam!r}*({phi})", "sup", SMALL), lam * surface(phi, "sup", SMALL), rtol=1e-12, atol=1e-12)


@given(st.floats(min_value=-10, max_value=10))
def test_constants_preserved(c):
    np.testing.assert_allclose(surface(repr(c), "inf", SMALL), c, rtol=0, atol=1e-12)


@given(payoffs(), st.floats(min_value=0, max_value=2))
def test_monotonicity(phi, shift):
    lower = f"({phi})-{shift!r}*abs(sin(x))"
    assert np.all(surface(phi, "inf", SMALL) >= surface(lower, "inf", SMALL) - 1e-13)


@given(payoffs(), payoffs())
def test_contraction_estimate(p1, p2):
    lhs = np.abs(surface(p1, "inf", SMALL) - surface(p2, "inf", SMALL))
    rhs = surface(f"abs(({p1})-({p2}))", "sup", SMALL)
    assert np.all(lhs <= rhs + 1e-12)


# -- trees ---------------------------------------------------------------------------------

trees = st.builds(
    TreeSpec,
    m=st.integers(1, 3),
    h=st.floats(min_value=0.35, max_value=1.0),
    x0=st.floats(min_value=-1, max_value=1),
    dt=st.just(0.05),
    controls=st.just((0.5, 2.0)),
)


def test_one_step_tree_by_hand():
    tree = TreeSpec(1, 0.5, 0.0, 0.05, (1.0, 4.0))
    assert brute_force_expectation(tree, "x*x", mode="inf") == pytest.approx(1.0 * 0.05, rel=1e-14)
    assert brute_force_expectation(tree, "x*x", mode="sup") == pytest.approx(4.0 * 0.05, rel=1e-14)


@given(trees, st.floats(min_value=-5, max_value=5))
def test_tree_constant_payoff(tree, c):
    assert brute_force_expectation(tree, repr(c)) == pytest.approx(c, abs=1e-13)


@given(trees, payoffs(), st.sampled_from(["inf", "sup"]))
def test_dp_equals_enumeration(tree, phi, mode):
    bf = brute_force_expectation(tree, phi, running=("0.1*x", "0.2*cos(x)"), mode=mode)
    g_rows = [0.1 * tree.node_x(n) for n in range(tree.m)]
    f_rows = [0.2 * np.cos(tree.node_x(n)) for n in range(tree.m)]
    dp = tree_dp(tree, phi, mode, g_rows, f_rows)[0][0]
    assert dp == pytest.approx(bf, abs=1e-12)
    grid = tree.to_grid()
    lat, _ = conditional_expectation(tree.model(phi, "0.1*x", "0.2*cos(x)", mode), grid)
    assert lat.values[0, tree.m + 1] == pytest.approx(bf, abs=1e-12)


def test_path_dependent_payoff_on_tree():
    tree = TreeSpec(2, 0.5, 0.0, 0.05, (1.0, 4.0))
    running_max = brute_force_expectation(tree, lambda paths: paths.max(axis=1), mode="sup")
    terminal = brute_force_expectation(tree, "max(x,0)", mode="sup")
    assert running_max >= terminal


def test_enumeration_budget():
    tree = TreeSpec(5, 0.5, 0.0, 0.05, (1.0, 2.0, 4.0))
    with pytest.raises(BudgetError):
        brute_force_expectation(tree, "x")


# -- quadratic-variation functional --------------------------------------------------------


def test_quadvar_identity_sup():
    assert quadvar_functional("x", 1.5, (1.0, 4.0), "sup") == pytest.approx(6.0, rel=1e-14)


def test_quadvar_interior_maximizer():
    c = 1.5 * 2.5
    assert quadvar_functional(f"-(x-{c!r})*(x-{c!r})", 1.5, (1.0, 4.0), "sup") == pytest.approx(0.0, abs=1e-12)


@pytest.mark.parametrize("phi", ["sin(3*x)", "max(x-2,0)-max(x-3,0)", "abs(x-2.5)", "-abs(x-2.2)"])
@pytest.mark.parametrize("mode", ["inf", "sup"])
def test_quadvar_matches_dense_scan(phi, mode):
    from gexpect.expr import parse_field

    q = np.linspace(1.0, 4.0, 10_001)
    vals = parse_field(phi).on_grid({"x": q}, q.shape)
    ref = vals.min() if mode == "inf" else vals.max()
    assert quadvar_functional(phi, 1.0, (1.0, 4.0), mode, Na=64) == pytest.approx(ref, abs=1e-3)
