import dataclasses
import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gexpect.analytic import extremal_bs_price
from gexpect.core import ModelSpec, UncertaintyBox
from gexpect.lattice import grid_for_model
from gexpect.montecarlo import (
    HeatSetup,
    PolicySpec,
    counterexample_limit,
    mc_policy_value,
    path_rng,
    policy_value_estimate,
    quad_var_report,
    representation_scan,
    sample_paths,
)
from gexpect.pde import BSBSpec, bsb_price, solve_hjb

BAND = (0.25, 1.0)
HEAT = ModelSpec(box=UncertaintyBox.of(*BAND), terminal="x", mode="sup")
CALL = BSBSpec("max(x-100,0)", 0.0, 0.1, 0.3, 100.0, 1.0, "offer", Nx=200)


def test_path_streams_are_independent_of_batching():
    a = sample_paths(HEAT, PolicySpec.constant(0.5, BAND), 8, 16, seed=3, x0=0.0, T=1.0)
    b = sample_paths(HEAT, PolicySpec.constant(0.5, BAND), 4, 16, seed=3, x0=0.0, T=1.0, path_offset=4)
    np.testing.assert_array_equal(a.x[4:], b.x)
    assert path_rng(3, 0).standard_normal() != path_rng(3, 1).standard_normal()


def test_constant_policy_martingale_and_exact_qv():
    n = 4000
    batch = sample_paths(HEAT, PolicySpec.constant(0.5, BAND), n, 20, seed=1, x0=0.0, T=1.0)
    assert abs(batch.x[:, -1].mean()) <= 4 * math.sqrt(0.5 / n)
    assert np.all(batch.control == 0.5)
    np.testing.assert_allclose(np.diff(batch.qv, axis=1), 0.5 * batch.dt, rtol=0, atol=1e-15)
    rep = quad_var_report(batch)
    assert rep.violations == 0
    assert rep.extremal == pytest.approx((0.5, 0.5))


def test_bangbang_policy_hits_endpoints_only():
    grid = grid_for_model(HEAT, -5, 5, 101, 1.0)
    model = HEAT.replace(terminal="max(x,0)-2*max(x-1,0)")
    surf, _ = solve_hjb(model, grid)
    batch = sample_paths(model, PolicySpec.bangbang(surf, model), 500, 50, seed=2, x0=0.0, T=1.0)
    assert set(np.unique(batch.control)) <= set(BAND)
    assert quad_var_report(batch).violations == 0


def test_corrupted_batch_detected():
    batch = sample_paths(HEAT, PolicySpec.constant(1.0, BAND), 20, 16, seed=5, x0=0.0, T=1.0)
    bad = dataclasses.replace(batch, qv=1.5 * batch.qv)
    rep = quad_var_report(bad)
    assert rep.violations > 0 and np.all(rep.path_violations > 0)


def test_weighted_bounds():
    batch = sample_paths(HEAT, PolicySpec.random(BAND), 50, 32, seed=6, x0=0.0, T=1.0)
    assert quad_var_report(batch, eta2="1+sin(3*t)*sin(3*t)").weighted_violations == 0


@given(st.integers(0, 2**32 - 1))
def test_random_policy_stays_in_band(seed):
    batch = sample_paths(HEAT, PolicySpec.random(BAND), 5, 8, seed=seed, x0=0.0, T=1.0)
    assert np.all((batch.control >= BAND[0]) & (batch.control <= BAND[1]))
    assert np.all(np.diff(batch.qv, axis=1) >= 0)


def test_constant_out_of_band_rejected():
    with pytest.raises(ValueError):
        PolicySpec.constant(2.0, BAND)


def test_constant_vol_call_matches_black_scholes():
    pol = PolicySpec.constant(0.2**2, (0.01, 0.09))
    est = mc_policy_value(CALL, pol, CALL.payoff, 20_000, 4, seed=11)
    ref = extremal_bs_price("call", 100, 100, 0.0, 1.0, 0.2)
    assert abs(est.mean - ref) <= 3 * est.stderr


def test_threads_and_chunks_do_not_change_estimate():
    pol = PolicySpec.random((0.01, 0.09))
    a = mc_policy_value(CALL, pol, CALL.payoff, 3000, 10, seed=9, chunk=3000, threads=1)
    b = mc_policy_value(CALL, pol, CALL.payoff, 3000, 10, seed=9, chunk=700, threads=4)
    assert a == b


def test_running_reward_and_discount():
    batch = sample_paths(HEAT, PolicySpec.constant(0.5, BAND), 10, 10, seed=0, x0=0.0, T=1.0)
    est = policy_value_estimate(batch, "0", g="1", f="2")
    assert est.mean == pytest.approx(1.0 + 2 * 0.5, rel=1e-12)


def test_pde_policy_near_bid_on_call():
    spec = dataclasses.replace(CALL, side="bid")
    res = bsb_price(spec)
    est = mc_policy_value(spec, PolicySpec.lookup(res.policy), spec.payoff, 20_000, 100, seed=4)
    assert abs(est.mean - res.price) <= 3 * est.stderr + 0.01 * res.price


# -- scans -----------------------------------------------------------------------------------


def test_call_scan_argmax_is_top_of_band():
    scan = representation_scan(CALL, Na=11)
    assert scan.argmax == pytest.approx(0.09)
    offer = bsb_price(CALL).price
    assert scan.sup == pytest.approx(offer, rel=5e-3)


def test_linear_payoff_scan_is_flat():
    scan = representation_scan(HeatSetup("2*x+1", 0.3, 1.0, BAND), Na=7)
    np.testing.assert_allclose(scan.values, 1.6, atol=1e-13)


def test_degenerate_band_reproduces_closed_form():
    spec = BSBSpec("max(x-100,0)", 0.03, 0.2, 0.2, 100.0, 1.0)
    scan = representation_scan(spec, Na=2)
    assert scan.values[0] == pytest.approx(extremal_bs_price("call", 100, 100, 0.03, 1.0, 0.2), abs=1e-9)


def test_scan_csv(tmp_path):
    scan = representation_scan(HeatSetup("x*x", 0.0, 1.0, BAND), Na=3)
    assert scan.to_csv(tmp_path / "s.csv").read_text().splitlines()[0] == "alpha_sq,value"


# -- counterexample --------------------------------------------------------------------------


@pytest.mark.parametrize("band,value", [((1, 4), 3.0), ((0.5, 0.5), 0.0), ((0.04, 0.09), 0.05)])
def test_counterexample_values(band, value):
    res = counterexample_limit(band, [0.1, 0.01, 0.001])
    assert res.qs_limit == 0.0
    for v in res.values:
        assert v == pytest.approx(value, abs=1e-15)


def test_counterexample_exact_for_integer_band():
    assert counterexample_limit((1, 4), [0.1, 0.01, 0.001]).values == [3.0, 3.0, 3.0]
