"""Backward equations under superlinear (or sublinear) expectation.

Picard iteration freezes the drivers at the previous iterate and applies one
lattice conditional expectation per sweep. Linear equations are also solved by
an integrating factor, and a comparison report checks ordering of two solutions.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .core import ModelSpec, as_mode
from .expr import FieldExpr, parse_field
from .lattice import (
    GridSpec,
    TreeSpec,
    ValueSurface,
    brute_force_expectation,
    conditional_expectation,
    tree_dp,
)


class PicardError(ArithmeticError):
    pass


@dataclass
class PicardDiagnostics:
    iterations: int
    beta: float
    deltas: list[float] = field(default_factory=list)

    @property
    def ratios(self) -> list[float]:
        """``deltas[i+1] / deltas[i]`` where the denominator is positive."""
        return [b / a for a, b in zip(self.deltas, self.deltas[1:]) if a > 0]

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["iter", "delta", "ratio"])
            for i, d in enumerate(self.deltas):
                prev = self.deltas[i - 1] if i else 0.0
                w.writerow([i + 1, "%.17g" % d, "%.17g" % (d / prev) if prev > 0 else ""])
        return path


def beta_norm(diff: np.ndarray, times: np.ndarray, beta: float) -> float:
    """Trapezoid rule of ``exp(-2 beta t) * max_nodes |diff_t|`` over grid rows."""
    from scipy.integrate import trapezoid

    per_row = np.max(np.abs(diff.reshape(diff.shape[0], -1)), axis=1)
    return float(trapezoid(np.exp(-2.0 * beta * times) * per_row, times))


def _running(model: ModelSpec, grid: GridSpec, Y: np.ndarray):
    Nt, shape = grid.Nt, grid.shape
    rg = np.empty((Nt,) + shape)
    rf = np.empty((Nt, model.d) + shape)
    for n in range(Nt):
        env = {**grid.env(n), "y": Y[n]}
        rg[n] = model.g.on_grid(env, shape)
        for j, fj in enumerate(model.f):
            rf[n, j] = fj.on_grid(env, shape)
    return rg, rf


def picard_solve(
    model: ModelSpec,
    grid: GridSpec,
    tol: float = 1e-8,
    max_iter: int = 100,
    y0: float = 0.0,
) -> tuple[ValueSurface, PicardDiagnostics]:
    """Fixed point of ``Y -> E_opt[Phi + sum_{r>=t} (g(Y_r) + f(Y_r) v) dt | F_t]``."""
    if tol <= 0:
        raise ValueError("tol must be positive")
    diag = PicardDiagnostics(0, model.beta)
    if not model.driver_uses_y:
        # the map does not see Y, so one application is the fixed point
        surface, _ = conditional_expectation(model, grid)
        diag.iterations = 1
        diag.deltas.append(0.0)
        return surface, diag
    Y = np.full((grid.Nt + 1,) + grid.shape, float(y0))
    times = grid.times
    for it in range(1, max_iter + 1):
        surface, _ = conditional_expectation(model, grid, running=_running(model, grid, Y))
        delta = beta_norm(surface.values - Y, times, model.beta)
        diag.deltas.append(delta)
        diag.iterations = it
        Y = surface.values
        if delta <= tol:
            return surface, diag
    raise PicardError(f"Picard iteration did not reach tol={tol} in {max_iter} iterations (last {delta:.3g})")


def tree_picard_solve(
    tree: TreeSpec,
    terminal,
    g="0",
    f="0",
    mode: str = "inf",
    tol: float = 1e-14,
    max_iter: int = 500,
    y0: float = 0.0,
) -> tuple[float, int]:
    """Picard iteration on a trinomial tree; returns (root value, iterations)."""
    g, f = parse_field(g), parse_field(f)
    rows = [np.full(2 * n + 1, float(y0)) for n in range(tree.m + 1)]
    for it in range(1, max_iter + 1):
        env = [{"x": tree.node_x(n), "t": n * tree.dt, "y": rows[n]} for n in range(tree.m)]
        g_rows = [g.on_grid(e, (2 * n + 1,)) for n, e in enumerate(env)]
        f_rows = [f.on_grid(e, (2 * n + 1,)) for n, e in enumerate(env)]
        new = tree_dp(tree, terminal, mode, g_rows, f_rows)
        change = max(float(np.max(np.abs(a - b))) for a, b in zip(new, rows))
        scale = max(1.0, max(float(np.max(np.abs(a))) for a in new))
        rows = new
        if change <= tol * scale:
            return float(rows[0][0]), it
    raise PicardError("tree Picard iteration did not converge")


@dataclass(frozen=True)
class LinearBSDECoeffs:
    """``Y_t = xi + int (a Y + A) ds + int (b Y + C) d<B>``; ``a``, ``b`` depend on ``t`` only."""

    a: FieldExpr
    b: FieldExpr
    A: FieldExpr
    C: FieldExpr
    xi: FieldExpr

    def __post_init__(self):
        for name in ("a", "b", "A", "C", "xi"):
            object.__setattr__(self, name, parse_field(getattr(self, name)))
        for name in ("a", "b"):
            ex = getattr(self, name)
            if ex.variables - {"t"}:
                raise ValueError(f"coefficient {name} may depend on t only")

    def validate_bound(self, K: float, T: float, n: int = 1001) -> float:
        ts = np.linspace(0.0, T, n)
        worst = max(float(np.max(np.abs(ex.on_grid({"t": ts}, ts.shape)))) for ex in (self.a, self.b))
        if worst > K * (1 + 1e-12):
            raise ValueError(f"|a|, |b| reach {worst:.6g} > K={K}")
        return worst

    def as_drivers(self) -> tuple[FieldExpr, FieldExpr]:
        """The same equation written as drivers ``g = a y + A`` and ``f = b y + C``."""
        g = parse_field(f"({self.a})*y + ({self.A})")
        f = parse_field(f"({self.b})*y + ({self.C})")
        return g, f


def linear_bsde_solve(
    coeffs: LinearBSDECoeffs,
    model: ModelSpec | None = None,
    grid: GridSpec | None = None,
    tree: TreeSpec | None = None,
    mode: str | None = None,
):
    """Integrating-factor solution ``Y_t = Q_t^{-1} E_opt[Q_T xi + int Q A ds + int Q C d<B> | F_t]``.

    With ``b == 0`` on a grid the factor is deterministic and the result is a
    :class:`ValueSurface`; on a tree the path-dependent factor is enumerated and
    the root value is returned. The discrete factor per step is ``1/(1 - (a + b v) dt)``.
    """
    if tree is not None:
        mode = as_mode(mode or (model.mode if model else "inf"))
        return brute_force_expectation(
            tree, coeffs.xi, running=(coeffs.A, coeffs.C), mode=mode, discount=(coeffs.a, coeffs.b)
        )
    if model is None or grid is None:
        raise ValueError("grid regime needs a model and a grid")
    if not coeffs.b.is_zero:
        raise ValueError("a nonzero b makes the factor path dependent; use a tree")
    if model.d != 1:
        raise ValueError("linear equations are supported with a single Brownian component")
    mode = as_mode(mode or model.mode)
    Nt, dt, shape = grid.Nt, grid.dt, grid.shape
    a = coeffs.a.on_grid({"t": grid.times}, (Nt + 1,))
    Q = np.ones(Nt + 1)
    for n in range(Nt):
        Q[n + 1] = Q[n] / (1.0 - a[n] * dt)
    rg = np.empty((Nt,) + shape)
    rf = np.empty((Nt, 1) + shape)
    for n in range(Nt):
        env = grid.env(n)
        rg[n] = Q[n + 1] * coeffs.A.on_grid(env, shape)
        rf[n, 0] = Q[n + 1] * coeffs.C.on_grid(env, shape)
    terminal = Q[Nt] * coeffs.xi.on_grid(grid.env(Nt), shape)
    Z, _ = conditional_expectation(model, grid, mode, terminal=terminal, running=(rg, rf))
    Y = Z.values / Q.reshape((Nt + 1,) + (1,) * len(shape))
    return ValueSurface(grid, Y)


@dataclass
class ComparisonReport:
    hypothesis_ok: bool
    violations: list[str]
    min_diff: float
    passed: bool

    def as_dict(self) -> dict:
        return {
            "hypothesis_ok": self.hypothesis_ok,
            "violations": self.violations,
            "min_diff": self.min_diff,
            "passed": self.passed,
        }


def _check_hypothesis(m1: ModelSpec, m2: ModelSpec, grid: GridSpec, y_lo, y_hi, n: int = 50) -> list[str]:
    bad = []
    env_T = grid.env(grid.Nt)
    xi1 = m1.terminal.on_grid(env_T, grid.shape)
    xi2 = m2.terminal.on_grid(env_T, grid.shape)
    if np.any(xi1 < xi2):
        bad.append("terminal: xi < xi_bar at some node")
    ys = np.linspace(y_lo, y_hi, n)
    ds = np.linspace(0.0, max(y_hi - y_lo, 1.0), n)
    Y, D = np.meshgrid(ys, ds, indexing="ij")
    rows = np.unique(np.linspace(0, grid.Nt - 1, 5).astype(int))
    flat_env = grid.env(0)
    keys = [k for k in flat_env if k != "t"]
    xs = {k: np.asarray(flat_env[k]).ravel() for k in keys}
    stride = max(1, xs[keys[0]].size // 50)
    for n_step in rows:
        t = n_step * grid.dt
        for i in range(0, xs[keys[0]].size, stride):
            env = {k: xs[k][i] for k in keys} | {"t": t}
            pairs = [("g", m1.g, m2.g)] + [(f"f{j}", a, b) for j, (a, b) in enumerate(zip(m1.f, m2.f))]
            for name, e1, e2 in pairs:
                lhs = e1.on_grid({**env, "y": Y + D}, Y.shape)
                rhs = e2.on_grid({**env, "y": Y}, Y.shape)
                if np.any(lhs < rhs):
                    bad.append(f"{name}(y+delta) < {name}_bar(y) at t={t:.4g}")
                    break
    return sorted(set(bad))


def comparison_check(model1: ModelSpec, model2: ModelSpec, grid: GridSpec, tol: float = 1e-8) -> ComparisonReport:
    """Solve both equations and report ``min (Y - Y_bar)`` plus a sampled hypothesis check."""
    if model1.box != model2.box:
        raise ValueError("both models must share the uncertainty box")
    Y1, _ = picard_solve(model1, grid, tol=tol)
    Y2, _ = picard_solve(model2, grid, tol=tol)
    lo = float(min(Y1.values.min(), Y2.values.min()))
    hi = float(max(Y1.values.max(), Y2.values.max()))
    bad = _check_hypothesis(model1, model2, grid, lo, hi)
    min_diff = float(np.min(Y1.values - Y2.values))
    return ComparisonReport(not bad, bad, min_diff, min_diff >= -10 * tol)


__all__ = [
    "ComparisonReport",
    "LinearBSDECoeffs",
    "PicardDiagnostics",
    "PicardError",
    "beta_norm",
    "comparison_check",
    "linear_bsde_solve",
    "picard_solve",
    "tree_picard_solve",
]
