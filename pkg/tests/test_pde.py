import numpy as np
import pytest

from gexpect.analytic import bs_quadrature_price, extremal_bs_price, gaussian_expectation
from gexpect.core import ModelSpec, UncertaintyBox
from gexpect.lattice import CFLError, GridSpec, conditional_expectation, grid_for_model
from gexpect.pde import BSBSpec, bsb_price, multi_band_hjb, residual_check, solve_gheat, solve_hjb

BAND = UncertaintyBox.of(0.25, 1.0)


def heat_grid(L=8.0, Nx=161, T=1.0):
    return grid_for_model(ModelSpec(box=BAND, terminal="x"), -L, L, Nx, T)


# -- HJB and G-heat -------------------------------------------------------------------------


def test_hjb_without_drivers_equals_gheat():
    grid = heat_grid()
    phi = "max(x,0)-0.5*max(x-1,0)"
    hjb, _ = solve_hjb(ModelSpec(box=BAND, terminal=phi, mode="sup"), grid)
    np.testing.assert_array_equal(hjb.values, solve_gheat(phi, BAND, grid, "sup").values)


def test_operator_and_probability_forms_agree():
    model = ModelSpec(box=BAND, terminal="abs(x)", b=["-0.2*x"], h=[["0.1"]], g="0.1*cos(x)", f=["0.05"], mode="sup")
    grid = grid_for_model(model, -8, 8, 161, 1.0)
    a, _ = solve_hjb(model, grid)
    b, _ = conditional_expectation(model, grid)
    np.testing.assert_allclose(a.values, b.values, rtol=0, atol=1e-13)


def test_manufactured_square_solution():
    grid = heat_grid()
    u = solve_gheat("x*x", BAND, grid, "inf").values
    x, mask = grid.states(), np.abs(grid.states()) <= 2.0
    for n in (0, grid.Nt // 2):
        exact = x**2 + 0.25 * (grid.T - grid.times[n])
        np.testing.assert_allclose(u[n, mask], exact[mask], atol=1e-6)


def test_linear_payoff_is_harmonic():
    grid = heat_grid()
    u = solve_gheat("x", BAND, grid, "sup").values
    np.testing.assert_allclose(u, np.broadcast_to(grid.states(), u.shape), atol=1e-12)


def test_convex_payoff_matches_gaussian_oracle():
    grid = heat_grid(Nx=321)
    u = solve_gheat("max(x,0)", BAND, grid, "inf")
    for x in (-1.0, 0.0, 0.5, 1.5):
        ref = gaussian_expectation(f"max({x!r}+x,0)", 0.5)
        assert u.at(x) == pytest.approx(ref, rel=5e-3)


def test_cfl_error_raised():
    with pytest.raises(CFLError):
        solve_gheat("x", BAND, GridSpec(-1, 1, 201, 1.0, 5))


def test_two_dimensional_separable_payoff():
    box = UncertaintyBox(((0.25, 1.0), (0.5, 2.0)))
    grid2 = grid_for_model(ModelSpec(box=box, terminal="x1", n=2), [-5, -5], [5, 5], [41, 41], 0.5)
    u2 = solve_gheat("max(x1,0)+cos(x2)", box, grid2, "sup").values[0]
    g1 = GridSpec(-5, 5, 41, 0.5, grid2.Nt)
    u1 = solve_gheat("max(x,0)", UncertaintyBox.of(0.25, 1.0), g1, "sup").values[0]
    v1 = solve_gheat("cos(x)", UncertaintyBox.of(0.5, 2.0), g1, "sup").values[0]
    np.testing.assert_allclose(u2, u1[:, None] + v1[None, :], rtol=0, atol=1e-14)


def test_refinement_stability():
    phi = "max(x-0.5,0)-max(x-1.5,0)"
    out = []
    for Nx in (121, 241):
        grid = heat_grid(L=6.0, Nx=Nx)
        u = solve_gheat(phi, BAND, grid, "sup").values
        x = grid.states()
        mask = grid.interior_mask()
        lip = np.max(np.abs(np.diff(u[0])) / np.diff(x))
        half = int(round(0.5 / grid.dt))
        mod = np.max(np.abs(u[half, mask] - u[0, mask]))
        out.append((lip, mod))
    (l1, m1), (l2, m2) = out
    assert abs(l2 - l1) / l1 < 0.05
    assert abs(m2 - m1) / m1 < 0.05


# -- BSB ------------------------------------------------------------------------------------


def test_bsb_linear_payoff_is_spot():
    for side in ("offer", "bid"):
        res = bsb_price(BSBSpec("x", 0.0, 0.1, 0.3, 100.0, 1.0, side, Nx=200))
        assert res.price == pytest.approx(100.0, rel=1e-6)


@pytest.mark.parametrize("side,sigma", [("offer", 0.3), ("bid", 0.1)])
def test_bsb_call_collapses_to_black_scholes(side, sigma):
    res = bsb_price(BSBSpec("max(x-100,0)", 0.0, 0.1, 0.3, 100.0, 1.0, side))
    assert res.price == pytest.approx(extremal_bs_price("call", 100, 100, 0.0, 1.0, sigma), rel=5e-3)


def test_bsb_discounting_call():
    res = bsb_price(BSBSpec("max(x-100,0)", 0.05, 0.1, 0.3, 100.0, 1.0, "offer"))
    assert res.price == pytest.approx(extremal_bs_price("call", 100, 100, 0.05, 1.0, 0.3), rel=5e-3)


def test_butterfly_sandwich_and_offer_dominates_bid():
    fly = "max(x-90,0)-2*max(x-100,0)+max(x-110,0)"
    offer = bsb_price(BSBSpec(fly, 0.0, 0.1, 0.3, 100.0, 1.0, "offer", Nx=200))
    bid = bsb_price(BSBSpec(fly, 0.0, 0.1, 0.3, 100.0, 1.0, "bid", Nx=200))
    assert np.all(offer.surface.values >= bid.surface.values)
    for s in (0.1, 0.2, 0.3):
        ref = bs_quadrature_price(fly, 100.0, 0.0, 1.0, s)
        assert bid.price <= ref + 1e-3 and ref <= offer.price + 1e-3
    # a nonconvex payoff: the bid is strictly below every constant-volatility price
    assert bid.price < min(bs_quadrature_price(fly, 100.0, 0.0, 1.0, s) for s in np.linspace(0.1, 0.3, 21)) - 1e-3


def test_negative_rate_warns():
    with pytest.warns(UserWarning):
        BSBSpec("x", -0.01, 0.1, 0.3, 100.0, 1.0)


# -- three-band variant ---------------------------------------------------------------------


def _three(bands, h="0.5", f="0.2*sin(x)", mode="sup", box=BAND):
    return ModelSpec(box=box, terminal="max(x,0)-max(x-1,0)", h=[[h]], f=[f], mode=mode, bands3=tuple(bands))


def test_three_band_degenerate_equals_single_band():
    v = UncertaintyBox.of(0.5, 0.5)
    model = _three([v, v, v], box=v)
    grid = grid_for_model(model.replace(bands3=None), -5, 5, 101, 1.0)
    a, _ = multi_band_hjb(model, grid)
    b, _ = solve_hjb(model.replace(bands3=None), grid)
    np.testing.assert_array_equal(a.values, b.values)


def test_three_band_heat_case():
    model = _three([UncertaintyBox.of(0, 3), BAND, UncertaintyBox.of(0, 3)], h="0", f="0")
    grid = grid_for_model(model.replace(box=UncertaintyBox.of(0, 3), bands3=None), -5, 5, 101, 1.0)
    a, _ = multi_band_hjb(model, grid)
    np.testing.assert_allclose(a.values, solve_gheat(model.terminal, BAND, grid, "sup").values, atol=1e-14)


@pytest.mark.parametrize("mode", ["inf", "sup"])
def test_three_band_is_more_adversarial_than_common_box(mode):
    # independent choices over the product contain the common choice v = v1 = v2 = v3
    model = _three([BAND, BAND, BAND], mode=mode)
    grid = grid_for_model(model.replace(bands3=None), -5, 5, 101, 1.0)
    three, _ = multi_band_hjb(model, grid)
    single, _ = solve_hjb(model.replace(bands3=None), grid)
    sign = 1.0 if mode == "inf" else -1.0
    assert np.all(sign * (three.values - single.values) <= 1e-12)


# -- residuals ------------------------------------------------------------------------------

SAMPLES = [(0.3, -1.0), (0.5, 0.2), (0.9, 1.7)]
HEAT_INF = ModelSpec(box=BAND, terminal="x*x", mode="inf")


def test_residual_of_exact_solution():
    assert residual_check("x*x+0.25*(1-t)", HEAT_INF, SAMPLES) <= 1e-8


def test_residual_of_linear_solution():
    assert residual_check("x", HEAT_INF, SAMPLES) <= 1e-8


def test_residual_detects_wrong_solution():
    assert residual_check("x*x", HEAT_INF, SAMPLES) == pytest.approx(0.25, rel=1e-6)
