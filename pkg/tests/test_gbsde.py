import numpy as np
import pytest

from gexpect.core import ModelSpec, UncertaintyBox
from gexpect.gbsde import (
    LinearBSDECoeffs,
    PicardError,
    beta_norm,
    comparison_check,
    linear_bsde_solve,
    picard_solve,
    tree_picard_solve,
)
from gexpect.lattice import GridSpec, TreeSpec, conditional_expectation, grid_for_model, step_expectation

BAND = UncertaintyBox.of(0.25, 1.0)
DRIVER = "-0.05*y+0.1*cos(y)"


def model(g=DRIVER, K=0.15, terminal="max(x,0)", mode="inf", **kw):
    return ModelSpec(box=BAND, terminal=terminal, g=g, lipschitz=K, mode=mode, **kw)


GRID = grid_for_model(model(), -5, 5, 101, 1.0)


def test_driver_free_is_one_iteration():
    surf, diag = picard_solve(model(g="0", K=0.0), GRID)
    assert diag.iterations == 1 and diag.deltas == [0.0]
    ref, _ = conditional_expectation(model(g="0", K=0.0), GRID)
    np.testing.assert_array_equal(surf.values, ref.values)


def test_contraction_and_uniqueness():
    tol = 1e-10
    a, da = picard_solve(model(), GRID, tol=tol)
    b, _ = picard_solve(model(), GRID, tol=tol, y0=10.0)
    assert da.beta == pytest.approx(0.15 * 2.0)
    assert all(r <= 0.6 for r in da.ratios[1:])
    assert da.deltas[-1] <= tol
    np.testing.assert_allclose(a.values, b.values, atol=2 * tol * 10)


def test_fixed_point_satisfies_one_step_recursion():
    surf, _ = picard_solve(model(), GRID, tol=1e-12)
    v = surf.values
    for n in (0, GRID.Nt // 2, GRID.Nt - 1):
        row, _ = step_expectation(v[n + 1], model(), GRID, n)
        np.testing.assert_allclose(row, v[n], atol=1e-9)


def test_picard_error_when_budget_too_small():
    with pytest.raises(PicardError):
        picard_solve(model(), GRID, tol=1e-14, max_iter=2)


def test_beta_norm_weights_late_rows_less():
    times = np.linspace(0, 1, 11)
    diff = np.zeros((11, 3))
    diff[-1] = 1.0
    early = np.zeros((11, 3))
    early[0] = 1.0
    assert beta_norm(diff, times, 1.0) < beta_norm(early, times, 1.0)


def test_diagnostics_csv(tmp_path):
    _, diag = picard_solve(model(), GRID)
    lines = diag.to_csv(tmp_path / "p.csv").read_text().splitlines()
    assert lines[0] == "iter,delta,ratio" and len(lines) == diag.iterations + 1


# -- linear equations --------------------------------------------------------------------------


def test_unit_factor_is_conditional_expectation():
    c = LinearBSDECoeffs("0", "0", "0", "0", "max(x,0)")
    y = linear_bsde_solve(c, model(g="0", K=0.0), GRID)
    ref, _ = conditional_expectation(model(g="0", K=0.0), GRID)
    np.testing.assert_allclose(y.values, ref.values, atol=1e-15)


def test_discounting_matches_picard():
    r = 0.05
    c = LinearBSDECoeffs(f"{-r}", "0", "0", "0", "max(x,0)")
    m = model(g=f"{-r}*y", K=r)
    y = linear_bsde_solve(c, m, GRID)
    p, _ = picard_solve(m, GRID, tol=1e-12)
    np.testing.assert_allclose(y.values, p.values, atol=1e-10)
    # and the factorization through the driver-free expectation
    ref, _ = conditional_expectation(model(g="0", K=0.0), GRID)
    q = (1 - (-r) * GRID.dt) ** -GRID.Nt
    assert y.values[0, 50] == pytest.approx(ref.values[0, 50] * q, rel=1e-12)


def test_path_dependent_factor_on_tree():
    tree = TreeSpec(3, 0.5, 0.0, 0.05, (0.25, 1.0))
    c = LinearBSDECoeffs("0", "0.5", "0", "0", "x*x")
    formula = linear_bsde_solve(c, tree=tree, mode="inf")
    g, f = c.as_drivers()
    picard, _ = tree_picard_solve(tree, "x*x", g, f, "inf")
    assert formula == pytest.approx(picard, abs=1e-10)


def test_grid_rejects_path_dependent_factor():
    with pytest.raises(ValueError):
        linear_bsde_solve(LinearBSDECoeffs("0", "0.5", "0", "0", "x"), model(), GRID)


def test_coefficient_bound_validation():
    with pytest.raises(ValueError):
        LinearBSDECoeffs("x", "0", "0", "0", "x")
    with pytest.raises(ValueError):
        LinearBSDECoeffs("2*t", "0", "0", "0", "x").validate_bound(K=1.0, T=1.0)


# -- comparison ------------------------------------------------------------------------------


SMALL = GridSpec(-4, 4, 41, 0.5, 40)


def test_comparison_reflexive():
    m = model(g="0.05*y+0.1", K=0.05)
    rep = comparison_check(m, m, SMALL)
    assert rep.hypothesis_ok and rep.passed and rep.min_diff == 0.0


def test_comparison_translation():
    m1 = model(g="0", K=0.0, terminal="max(x,0)+1")
    m2 = model(g="0", K=0.0, terminal="max(x,0)")
    rep = comparison_check(m1, m2, SMALL)
    a, _ = picard_solve(m1, SMALL)
    b, _ = picard_solve(m2, SMALL)
    np.testing.assert_allclose(a.values - b.values, 1.0, atol=1e-12)
    assert rep.min_diff == pytest.approx(1.0)


def test_comparison_ordered_terminals():
    # a decreasing driver fails the sampled hypothesis, yet the ordering still holds
    rep = comparison_check(model(g="-0.05*y", K=0.05), model(g="-0.05*y", K=0.05, terminal="max(x,0)-1"), SMALL)
    assert not rep.hypothesis_ok
    assert rep.passed and rep.min_diff >= 0


def test_comparison_reports_violated_hypothesis():
    rep = comparison_check(model(terminal="max(x,0)-1"), model(), SMALL)
    assert not rep.hypothesis_ok and rep.violations
