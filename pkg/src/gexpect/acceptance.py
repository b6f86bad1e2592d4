"""Acceptance checks, one function per criterion.

Each returns a :class:`CriterionResult`; ``run_all`` runs every check. The CLI
``verify`` command and ``tests/test_acceptance.py`` both call these.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .analytic import extremal_bs_price
from .core import ModelSpec, UncertaintyBox
from .gbsde import LinearBSDECoeffs, comparison_check, linear_bsde_solve, picard_solve, tree_picard_solve
from .lattice import (
    GridSpec,
    TreeSpec,
    brute_force_expectation,
    conditional_expectation,
    grid_for_model,
    quadvar_functional,
)
from .montecarlo import PolicySpec, counterexample_limit, mc_policy_value, quad_var_report, sample_paths
from .pde import BSBSpec, bsb_price, solve_gheat, solve_hjb

BUTTERFLY = "max(x-90,0)-2*max(x-100,0)+max(x-110,0)"
CALL = "max(x-100,0)"

TREE_PAYOFFS = (
    "max(x-0.1,0)",
    "max(0.2-x,0)",
    "x*x",
    "abs(x)",
    "sin(3*x)",
    "max(x+0.3,0)-2*max(x,0)+max(x-0.3,0)",
    "exp(x)",
    "cos(2*x)*x",
    "min(x,0.5)",
    "pow(x,3)",
)


@dataclass
class CriterionResult:
    number: int
    name: str
    passed: bool
    detail: str
    seconds: float = 0.0
    data: dict = field(default_factory=dict)

    def line(self) -> str:
        return f"[{'PASS' if self.passed else 'FAIL'}] criterion {self.number:2d} {self.name}: {self.detail} ({self.seconds:.2f}s)"


def _timed(fn: Callable[[], CriterionResult]) -> CriterionResult:
    t0 = time.perf_counter()
    res = fn()
    res.seconds = time.perf_counter() - t0
    return res


# -- fixed catalogs -----------------------------------------------------------------------


def tree_catalog(count: int = 20, m: int = 3, seed: int = 2024) -> list[tuple[TreeSpec, str]]:
    """Random small trees with valid probabilities, each paired with a payoff."""
    rng = np.random.default_rng(seed)
    out = []
    for i in range(count):
        h = rng.uniform(0.2, 0.6)
        lo = rng.uniform(0.1, 1.0)
        hi = lo + rng.uniform(0.1, 3.0)
        dt = rng.uniform(0.2, 1.0) * h * h / hi
        x0 = rng.uniform(-0.5, 0.5)
        out.append((TreeSpec(m, h, x0, dt, (lo, hi)), TREE_PAYOFFS[i % len(TREE_PAYOFFS)]))
    return out


def heat_driver_model(y0_terminal: str = "max(x,0)") -> ModelSpec:
    """Heat-type model with a nonlinear Lipschitz driver (K = 0.15)."""
    return ModelSpec(
        box=UncertaintyBox(((0.25, 1.0),)),
        terminal=y0_terminal,
        g="-0.05*y+0.1*cos(y)",
        lipschitz=0.15,
    )


def heat_driver_grid(model: ModelSpec) -> GridSpec:
    return grid_for_model(model, -5.0, 5.0, 201, 1.0)


def butterfly_bid() -> BSBSpec:
    return BSBSpec(BUTTERFLY, 0.0, 0.1, 0.3, 100.0, 1.0, "bid")


# -- criteria ---------------------------------------------------------------------------------


def criterion_1() -> CriterionResult:
    def run():
        got = {}
        for side, sig in (("offer", 0.3), ("bid", 0.1)):
            price = bsb_price(BSBSpec(CALL, 0.0, 0.1, 0.3, 100.0, 1.0, side, Nx=400, cfl=0.9)).price
            ref = extremal_bs_price("call", 100.0, 100.0, 0.0, 1.0, sig)
            got[side] = (price, ref, abs(price / ref - 1))
        ok = all(v[2] <= 5e-3 for v in got.values())
        detail = ", ".join(f"{k} {v[0]:.6f} vs {v[1]:.6f} (rel {v[2]:.2e})" for k, v in got.items())
        return CriterionResult(1, "convex-payoff BSB collapse", ok, detail, data=got)

    res = _timed(run)
    res.passed = res.passed and res.seconds < 10
    return res


def criterion_2(tol: float = 1e-8) -> CriterionResult:
    def run():
        model = heat_driver_model()
        grid = heat_driver_grid(model)
        Yp, diag = picard_solve(model, grid, tol=tol)
        Yh, _ = solve_hjb(model, grid)
        mask = grid.interior_mask()
        err = float(np.max(np.abs(Yp.values[:, mask] - Yh.values[:, mask])))
        ok = err <= 10 * tol
        return CriterionResult(2, "Picard vs HJB", ok, f"max interior gap {err:.3e} <= {10 * tol:.0e}", data={"err": err})

    res = _timed(run)
    res.passed = res.passed and res.seconds < 30
    return res


def criterion_3() -> CriterionResult:
    def run():
        worst = 0.0
        rng = np.random.default_rng(7)
        for i, (tree, payoff) in enumerate(tree_catalog()):
            mode = "inf" if i % 2 == 0 else "sup"
            g, f = ("0", "0") if i % 3 == 0 else (f"{rng.uniform(-1, 1):.3f}*x", f"{rng.uniform(-1, 1):.3f}*cos(x)")
            bf = brute_force_expectation(tree, payoff, running=(g, f), mode=mode)
            surface, _ = conditional_expectation(tree.model(payoff, g=g, f=f, mode=mode), tree.to_grid())
            worst = max(worst, abs(bf - surface.values[0][tree.m + 1]))
        return CriterionResult(3, "DP equals prior-family optimum", worst <= 1e-12, f"max |brute - DP| {worst:.2e} over 20 trees")

    res = _timed(run)
    res.passed = res.passed and res.seconds < 5
    return res


def criterion_4(tol: float = 1e-8) -> CriterionResult:
    def run():
        model = heat_driver_model()
        grid = heat_driver_grid(model)
        Y0, d0 = picard_solve(model, grid, tol=tol, y0=0.0)
        Y10, d10 = picard_solve(model, grid, tol=tol, y0=10.0)
        ratios = d0.ratios[1:] + d10.ratios[1:]
        worst_ratio = max(ratios) if ratios else 0.0
        gap = float(np.max(np.abs(Y0.values - Y10.values)))
        ok = worst_ratio <= 0.6 and gap <= 2 * tol
        detail = f"beta={d0.beta:.3g}, max ratio (i>=2) {worst_ratio:.3f}, |Y(0) - Y(10)| {gap:.2e}"
        return CriterionResult(4, "Picard contraction and uniqueness", ok, detail)

    return _timed(run)


def criterion_5() -> CriterionResult:
    def run():
        model = heat_driver_model().replace(g="-0.05*y", lipschitz=0.05)
        grid = heat_driver_grid(model)
        Yp, _ = picard_solve(model, grid, tol=1e-10)
        Ya = linear_bsde_solve(LinearBSDECoeffs("-0.05", "0", "0", "0", model.terminal), model, grid)
        err_a = float(np.max(np.abs(Yp.values - Ya.values)))
        err_b = 0.0
        for i, (tree, payoff) in enumerate(tree_catalog()):
            mode = "inf" if i % 2 == 0 else "sup"
            coeffs = LinearBSDECoeffs("0", "0.5", "0", "0", payoff)
            exact = linear_bsde_solve(coeffs, tree=tree, mode=mode)
            pic, _ = tree_picard_solve(tree, payoff, f="0.5*y", mode=mode)
            err_b = max(err_b, abs(exact - pic))
        ok = err_a <= 1e-8 and err_b <= 1e-10
        return CriterionResult(5, "linear BSDE formula", ok, f"regime a {err_a:.2e} <= 1e-8, regime b {err_b:.2e} <= 1e-10")

    return _timed(run)


def comparison_pairs(count: int = 50, seed: int = 11) -> list[tuple[ModelSpec, ModelSpec]]:
    rng = np.random.default_rng(seed)
    pairs = []
    for i in range(count):
        k1, k2 = rng.uniform(-0.2, 0.2), rng.uniform(0.0, 0.2)
        lo = rng.uniform(0.1, 0.5)
        box = UncertaintyBox(((lo, lo + rng.uniform(0.1, 1.0)),))
        base = TREE_PAYOFFS[i % len(TREE_PAYOFFS)]
        g_bar = f"{k1:.4f}*y+{k2:.4f}*sin(y+x)"
        shift_xi = f"{rng.uniform(0.0, 0.5):.4f}+{rng.uniform(0.0, 0.5):.4f}*exp(-x*x)"
        K = abs(k1) + k2
        mode = "inf" if i % 2 == 0 else "sup"
        bar = ModelSpec(box=box, terminal=base, g=g_bar, lipschitz=K, mode=mode)
        top = ModelSpec(
            box=box,
            terminal=f"{base}+{shift_xi}",
            g=f"{g_bar}+{rng.uniform(0.0, 0.3):.4f}",
            lipschitz=K,
            mode=mode,
        )
        pairs.append((top, bar))
    return pairs


def criterion_6() -> CriterionResult:
    def run():
        worst = math.inf
        hyp = 0
        for top, bar in comparison_pairs():
            grid = grid_for_model(top, -2.0, 2.0, 41, 0.5)
            rep = comparison_check(top, bar, grid, tol=1e-9)
            worst = min(worst, rep.min_diff)
            hyp += rep.hypothesis_ok
        ok = worst >= -1e-7
        return CriterionResult(6, "comparison theorem", ok, f"min(Y - Ybar) {worst:.3e} over 50 pairs ({hyp} with sampled hypothesis valid)")

    return _timed(run)


def criterion_7() -> CriterionResult:
    def run():
        res = counterexample_limit([1.0, 4.0], [0.1, 0.01, 0.001])
        ok = all(v == 3.0 for v in res.values) and res.qs_limit == 0.0
        return CriterionResult(7, "windowed quadratic-variation counterexample", ok, f"values {res.values}, quasi-sure limit {res.qs_limit}")

    res = _timed(run)
    res.passed = res.passed and res.seconds < 1
    return res


def criterion_8(n_paths: int = 10_000) -> CriterionResult:
    def run():
        spec = butterfly_bid()
        pde = bsb_price(spec)
        band = spec.box.bands[0]
        policies = {
            "const-lo": PolicySpec.constant(band[0], band),
            "const-hi": PolicySpec.constant(band[1], band),
            "bang-bang": PolicySpec.bangbang(pde.surface, spec.model()),
            "pde": PolicySpec.lookup(pde.policy),
            "random": PolicySpec.random(band),
        }
        counts = {}
        for k, (name, pol) in enumerate(policies.items()):
            batch = sample_paths(spec, pol, n_paths, 250, seed=100 + k)
            counts[name] = quad_var_report(batch).violations
        ok = all(v == 0 for v in counts.values())
        return CriterionResult(8, "quadratic-variation bounds", ok, f"violations {counts}")

    return _timed(run)


def _axioms_one(rng, tree: TreeSpec) -> dict[str, float]:
    """Signed slacks (negative = violated) of the expectation axioms for one random setup."""
    grid = tree.to_grid()
    model = ModelSpec(box=tree.box, terminal="0")
    x = grid.states(0)
    shape = grid.shape

    def E(phi, mode):
        return conditional_expectation(model, grid, mode, terminal=phi)[0].values

    p1, p2 = rng.normal(size=shape), rng.normal(size=shape)
    lam, c = rng.uniform(0, 3), rng.normal()
    out = {}
    lo1, hi1 = E(p1, "inf"), E(p1, "sup")
    lo2, hi2 = E(p2, "inf"), E(p2, "sup")
    out["duality"] = -float(np.max(np.abs(lo1 + E(-p1, "sup"))))
    out["subadditivity"] = float(np.min(hi1 + hi2 - E(p1 + p2, "sup")))
    out["superadditivity"] = float(np.min(E(p1 + p2, "inf") - lo1 - lo2))
    out["homogeneity"] = -float(np.max(np.abs(E(lam * p1, "inf") - lam * lo1)))
    bigger = p2 + np.abs(rng.normal(size=shape))
    out["monotonicity"] = float(np.min(E(bigger, "inf") - lo2))
    out["constants"] = -float(np.max(np.abs(E(np.full(shape, c), "inf") - c)))
    out["contraction"] = float(np.min(E(np.abs(p1 - p2), "sup") - np.abs(lo1 - lo2)))

    # path-dependent payoffs at time-s nodes, by enumeration on the sub-tree rooted there
    s = 1
    eta = rng.normal(size=shape)
    idx = lambda xv: np.rint((xv - grid.x_min[0]) / tree.h).astype(int)  # noqa: E731
    trans, scale = 0.0, 0.0
    for k in range(-s, s + 1):
        node = tree.m + 1 + k
        sub = TreeSpec(tree.m - s, tree.h, float(x[node]), tree.dt, tree.controls)
        term = lambda paths: p1[idx(paths[:, -1])]  # noqa: E731
        shifted = lambda paths: p1[idx(paths[:, -1])] + eta[idx(paths[:, 0])]  # noqa: E731
        scaled = lambda paths: eta[idx(paths[:, 0])] * p1[idx(paths[:, -1])]  # noqa: E731
        base = brute_force_expectation(sub, term, mode="inf")
        trans = max(trans, abs(brute_force_expectation(sub, shifted, mode="inf") - (base + eta[node])))
        e = eta[node]
        want = max(e, 0) * lo1[s, node] + max(-e, 0) * E(-p1, "inf")[s, node]
        scale = max(scale, abs(brute_force_expectation(sub, scaled, mode="inf") - want))
    out["translation"] = -trans
    out["scaling"] = -scale
    return out


def criterion_9(count: int = 100, seed: int = 99) -> CriterionResult:
    def run():
        rng = np.random.default_rng(seed)
        trees = tree_catalog(count, m=4, seed=seed)
        worst: dict[str, float] = {}
        for tree, _ in trees:
            for k, v in _axioms_one(rng, tree).items():
                worst[k] = min(worst.get(k, 0.0), v)
        ok = all(v >= -1e-12 for v in worst.values())
        detail = ", ".join(f"{k} {v:.1e}" for k, v in worst.items())
        return CriterionResult(9, "duality and expectation axioms", ok, "worst slack: " + detail)

    return _timed(run)


QUADVAR_PHIS = (
    "x",
    "-x",
    "x*x",
    "-(x-2.5)*(x-2.5)",
    "sin(x)",
    "cos(3*x)",
    "abs(x-2)",
    "max(x-2,0)-max(x-3,0)",
    "exp(-x)",
    "log(x+1)*cos(x)",
)


def criterion_10(Na: int = 64, t: float = 1.0, band=(1.0, 4.0)) -> CriterionResult:
    def run():
        from .expr import parse_field

        worst = 0.0
        dense = np.linspace(band[0], band[1], 10_000) * t
        for phi in QUADVAR_PHIS:
            vals = parse_field(phi).on_grid({"x": dense, "t": t}, dense.shape)
            for mode, ref in (("sup", vals.max()), ("inf", vals.min())):
                worst = max(worst, abs(quadvar_functional(phi, t, band, mode, Na) - ref))
        return CriterionResult(10, "quadratic-variation functional", worst <= 1e-3, f"max gap to dense scan {worst:.2e} (Na={Na})")

    return _timed(run)


def criterion_11(n_pde: int = 100_000, n_random: int = 10_000, n_policies: int = 20, steps: int = 250) -> CriterionResult:
    def run():
        spec = butterfly_bid()
        pde = bsb_price(spec)
        bid = pde.price
        band = spec.box.bands[0]
        est = mc_policy_value(spec, PolicySpec.lookup(pde.policy), BUTTERFLY, n_pde, steps, seed=2025)
        allow = 3 * est.stderr + 0.01 * abs(bid)
        attain = abs(est.mean - bid) <= allow
        low = math.inf
        for k in range(n_policies):
            e = mc_policy_value(spec, PolicySpec.random(band), BUTTERFLY, n_random, steps, seed=3000 + k)
            low = min(low, e.mean - (bid - (3 * e.stderr + 0.01 * abs(bid))))
        ok = attain and low >= 0
        detail = (
            f"bid {bid:.5f}, PDE-policy MC {est.mean:.5f} +- {est.stderr:.5f} "
            f"(gap {est.mean - bid:.5f}, allowance {allow:.5f}); random-policy min slack {low:.4f}"
        )
        return CriterionResult(11, "policy attainment", ok, detail, data={"bid": bid, "mc": est.mean, "se": est.stderr})

    return _timed(run)


def criterion_12(L: float = 6.0, Nx: int = 121, Nt: int = 400) -> CriterionResult:
    def run():
        box = UncertaintyBox(((0.25, 1.0),))
        phi = "max(x-0.5,0)-max(x-1.5,0)+0.2*sin(x)"
        # tower: a 2-unit run against two chained 1-unit runs with the same step
        g2 = GridSpec(-L, L, Nx, 2.0, 2 * Nt)
        g1 = GridSpec(-L, L, Nx, 1.0, Nt)
        full = solve_gheat(phi, box, g2, "sup")
        half, _ = solve_hjb(ModelSpec(box=box, terminal=phi, mode="sup"), g1)
        chained, _ = solve_hjb(ModelSpec(box=box, terminal=phi, mode="sup"), g1, terminal=half.values[0])
        tower_exact = bool(np.array_equal(full.values[0], chained.values[0]))
        # scaling: E[phi(x + B_2)] at x = sqrt(2) y against E[phi(sqrt(2) (y + B_1))]
        s = math.sqrt(2.0)
        scaled_phi = f"max({s!r}*x-0.5,0)-max({s!r}*x-1.5,0)+0.2*sin({s!r}*x)"
        gy = GridSpec(-L / s, L / s, Nx, 1.0, Nt)
        w = solve_gheat(scaled_phi, box, gy, "sup").values[0]
        v = full.values[0]
        mask = g2.interior_mask()
        gap = float(np.max(np.abs(v[mask] - w[mask])))
        fine = solve_gheat(phi, box, GridSpec(-L, L, 2 * Nx - 1, 2.0, 8 * Nt), "sup").values[0][::2]
        disc = float(np.max(np.abs(v[mask] - fine[mask])))
        ok = tower_exact and gap <= 2 * disc
        detail = f"tower bitwise {tower_exact}; scaling gap {gap:.2e} <= 2 x discretization {disc:.2e}"
        return CriterionResult(12, "G-heat semigroup and scaling", ok, detail)

    return _timed(run)


CRITERIA = {
    1: criterion_1,
    2: criterion_2,
    3: criterion_3,
    4: criterion_4,
    5: criterion_5,
    6: criterion_6,
    7: criterion_7,
    8: criterion_8,
    9: criterion_9,
    10: criterion_10,
    11: criterion_11,
    12: criterion_12,
}


def run_all(which=None) -> list[CriterionResult]:
    return [CRITERIA[k]() for k in (which or sorted(CRITERIA))]


__all__ = ["CRITERIA", "CriterionResult", "run_all", "tree_catalog", "comparison_pairs"]
