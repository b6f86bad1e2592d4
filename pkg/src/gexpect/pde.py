"""Monotone explicit finite differences for HJB, G-heat and Black-Scholes-Barenblatt equations.

The solvers here evaluate the generator in operator form,
``u + dt * (1/2 a D2 u + m D1 u)``, while :mod:`gexpect.lattice` evaluates the same
scheme as a Markov-chain expectation. The two routes agree to rounding.
"""

from __future__ import annotations

import math
import warnings
from dataclasses import dataclass

import numpy as np

from .core import DimensionError, ModelSpec, UncertaintyBox, as_mode
from .expr import FieldExpr, parse_field
from .lattice import (
    ControlPolicy,
    GridSpec,
    ValueSurface,
    _backward,
    _check_finite,
    _coefficients,
    _Coeffs,
    _neighbors,
    check_cfl,
    grid_for_model,
    resolve_driver,
)


def _diffusion_drift(u: np.ndarray, a: np.ndarray, m: np.ndarray, a_switch: np.ndarray, dx: float, mu: int):
    """Second-difference and drift terms along axis ``mu``.

    Drift is centered where ``a_switch >= |m| dx`` and upwinded elsewhere.
    """
    up, dn = _neighbors(u, mu)
    diff = 0.5 * a * ((up - 2.0 * u + dn) / (dx * dx))
    central = a_switch >= np.abs(m) * dx
    drift = np.where(
        central,
        m * ((up - dn) / (2.0 * dx)),
        np.maximum(m, 0.0) * ((up - u) / dx) - np.maximum(-m, 0.0) * ((u - dn) / dx),
    )
    return diff, drift


def _candidates_op(u: np.ndarray, coeffs: _Coeffs, grid: GridSpec) -> np.ndarray:
    a = coeffs.a_eff
    nv = a.shape[0]
    out = np.empty((nv,) + u.shape)
    for k in range(nv):
        acc = np.zeros(u.shape)
        for mu, dx in enumerate(grid.dx):
            diff, drift = _diffusion_drift(u, a[k, mu], coeffs.m[k, mu], a[k, mu], dx, mu)
            acc = acc + diff + drift
        out[k] = u + grid.dt * acc
    return out


def solve_hjb(model: ModelSpec, grid: GridSpec, terminal=None, start=None) -> tuple[ValueSurface, ControlPolicy]:
    """Backward recursion ``u^n = u^{n+1} + dt * opt_v {L_v u^{n+1} + drivers}`` (inf for mode inf)."""
    check_cfl(model, grid)
    if grid.n != model.n:
        raise DimensionError("grid and model state dimensions differ")
    return _backward(model, grid, model.mode, _candidates_op, terminal, start)


def heat_model(phi, box: UncertaintyBox, n: int, mode: str = "inf") -> ModelSpec:
    """G-heat model: identity diffusion (one Brownian component per state axis)."""
    if box.dim != n:
        raise DimensionError("G-heat needs one variance band per state dimension")
    return ModelSpec(box=box, terminal=parse_field(phi), n=n, mode=mode)


def solve_gheat(phi, box: UncertaintyBox, grid: GridSpec, mode: str = "inf") -> ValueSurface:
    """``d_t u + G(D^2 u) = 0`` with per-dimension bands; ``u(T) = phi``."""
    return solve_hjb(heat_model(phi, box, grid.n, mode), grid)[0]


# -- Black-Scholes-Barenblatt ------------------------------------------------------------


@dataclass(frozen=True)
class BSBSpec:
    """Uncertain-volatility pricing problem. Volatilities are given as ``sigma`` (not variance)."""

    payoff: FieldExpr
    r: float
    sigma_lo: float
    sigma_hi: float
    spot: float
    T: float
    side: str = "offer"
    Nx: int = 400
    width: float = 5.0
    cfl: float = 0.9
    grid: GridSpec | None = None

    def __post_init__(self):
        object.__setattr__(self, "payoff", parse_field(self.payoff))
        if not 0 <= self.sigma_lo <= self.sigma_hi:
            raise ValueError("need 0 <= sigma_lo <= sigma_hi")
        if self.side not in ("offer", "bid"):
            raise ValueError("side must be 'offer' or 'bid'")
        if not (self.spot > 0 and self.T > 0):
            raise ValueError("need spot > 0 and T > 0")
        if self.r < 0:
            warnings.warn("negative interest rate", stacklevel=2)

    @property
    def box(self) -> UncertaintyBox:
        return UncertaintyBox(((self.sigma_lo**2, self.sigma_hi**2),))

    def model(self) -> ModelSpec:
        """Log-price dynamics ``dz = (r - v/2) dt + dB``, ``d<B> = v dt``, discount ``-r y``."""
        r = float(self.r)
        return ModelSpec(
            box=self.box,
            terminal=self.payoff,
            b=[repr(r)],
            h=[["-0.5"]],
            sigma=[["1"]],
            g="0" if r == 0 else f"{-r!r}*y",
            lipschitz=abs(r),
            mode="sup" if self.side == "offer" else "inf",
        )

    def default_grid(self) -> GridSpec:
        if self.grid is not None:
            return self.grid
        half = self.width * max(self.sigma_hi, 1e-8) * math.sqrt(self.T)
        lo, hi = self.spot * math.exp(-half), self.spot * math.exp(half)
        return grid_for_model(self.model(), lo, hi, self.Nx, self.T, cfl=self.cfl, log_space=True)

    def flipped(self) -> "BSBSpec":
        import dataclasses

        return dataclasses.replace(self, side="bid" if self.side == "offer" else "offer")


@dataclass
class BSBResult:
    price: float
    surface: ValueSurface
    policy: ControlPolicy


def bsb_price(spec: BSBSpec) -> BSBResult:
    """Offer (sup over the band) or bid (inf) price at ``(0, spot)``."""
    grid = spec.default_grid()
    surface, policy = solve_hjb(spec.model(), grid)
    return BSBResult(surface.at(spec.spot, 0), surface, policy)


# -- three-band variant -------------------------------------------------------------------


def _hull(boxes) -> UncertaintyBox:
    d = boxes[0].dim
    return UncertaintyBox(
        tuple((min(b.bands[j][0] for b in boxes), max(b.bands[j][1] for b in boxes)) for j in range(d))
    )


def multi_band_hjb(model: ModelSpec, grid: GridSpec) -> tuple[ValueSurface, ControlPolicy]:
    """HJB with independent optimizations: drift over the first box, diffusion over the
    second, the ``f`` driver over the third. Returns the diffusion-band policy."""
    if model.bands3 is None:
        raise ValueError("model has no three-band boxes")
    if model.n != 1 or grid.n != 1:
        raise DimensionError("the three-band variant is one-dimensional")
    g1, g2, g3 = model.bands3
    check_cfl(model.replace(box=_hull(model.bands3), bands3=None), grid)
    mode = model.mode
    V3 = g3.vertex_matrix()
    dx, dt = grid.dx[0], grid.dt
    opt = np.min if mode == "inf" else np.max
    argopt = np.argmin if mode == "inf" else np.argmax

    values = np.full((grid.Nt + 1,) + grid.shape, np.nan)
    index = np.zeros((grid.Nt,) + grid.shape, dtype=np.int64)
    values[grid.Nt] = model.terminal.on_grid(grid.env(grid.Nt), grid.shape)
    c1 = c2 = None
    driver_model = model.replace(box=g3, bands3=None)
    for n in range(grid.Nt - 1, -1, -1):
        if c1 is None or c1.time_dependent:
            c1 = _coefficients(model, grid, n, box=g1)
            c2 = _coefficients(model, grid, n, box=g2)
        u = values[n + 1]
        a2 = c2.a_eff[:, 0]
        a_min = np.min(a2, axis=0)
        diffs = np.array([_diffusion_drift(u, a2[k], c2.m[k, 0], a_min, dx, 0)[0] for k in range(a2.shape[0])])
        drifts = np.array([_diffusion_drift(u, a2[0], c1.m[k, 0], a_min, dx, 0)[1] for k in range(c1.m.shape[0])])
        index[n] = argopt(diffs, axis=0)
        base = u + dt * ((np.zeros(u.shape) + opt(diffs, axis=0)) + opt(drifts, axis=0))
        cands = np.broadcast_to(base, (V3.shape[0],) + u.shape)
        row, _ = resolve_driver(cands, driver_model, grid.env(n), u, dt, mode, None, V3)
        _check_finite(row, n)
        values[n] = row
    return ValueSurface(grid, values), ControlPolicy(grid, g2, index)


# -- classical residual --------------------------------------------------------------------


def residual_check(u, model: ModelSpec, samples, step: float = 1e-5, dps: int = 40) -> float:
    """Max ``|d_t u + opt_v {L_v u + f(x, u) v} + g(x, u)|`` over sample points.

    Derivatives are centered differences with ``step``, evaluated in ``dps``-digit
    arithmetic. ``samples`` is an iterable of ``(t, x)`` (or ``(t, x1, x2)``).
    ``x`` is the coordinate the model coefficients are written in.
    """
    import mpmath

    u = parse_field(u)
    mode = as_mode(model.mode)
    names = ["x"] if model.n == 1 else ["x1", "x2"]
    V = model.box.vertex_matrix()
    worst = 0.0
    with mpmath.workdps(dps):
        h = mpmath.mpf(step)

        def U(t, xs):
            return u.evaluate({"t": t, **dict(zip(names, xs))}, precision="mp")

        def F(ex, t, xs, y=None):
            env = {"t": t, **dict(zip(names, xs))}
            if y is not None:
                env["y"] = y
            return ex.evaluate(env, precision="mp")

        for pt in samples:
            t = mpmath.mpf(pt[0])
            xs = [mpmath.mpf(v) for v in pt[1:]]
            u0 = U(t, xs)
            ut = (U(t + h, xs) - U(t - h, xs)) / (2 * h)
            grads, hess = [], []
            for mu in range(model.n):
                xp = list(xs)
                xm = list(xs)
                xp[mu] += h
                xm[mu] -= h
                up, um = U(t, xp), U(t, xm)
                grads.append((up - um) / (2 * h))
                hess.append((up - 2 * u0 + um) / (h * h))
            best = None
            for k in range(V.shape[0]):
                v = [mpmath.mpf(float(c)) for c in V[k]]
                val = mpmath.mpf(0)
                for mu in range(model.n):
                    a = sum(F(model.sigma[mu][j], t, xs) ** 2 * v[j] for j in range(model.d))
                    m = F(model.b[mu], t, xs) + sum(F(model.h[mu][j], t, xs) * v[j] for j in range(model.d))
                    val += a * hess[mu] / 2 + m * grads[mu]
                val += sum(F(model.f[j], t, xs, u0) * v[j] for j in range(model.d))
                if best is None or (val < best if mode == "inf" else val > best):
                    best = val
            res = ut + best + F(model.g, t, xs, u0)
            worst = max(worst, float(abs(res)))
    return worst


__all__ = [
    "BSBResult",
    "BSBSpec",
    "bsb_price",
    "heat_model",
    "multi_band_hjb",
    "residual_check",
    "solve_gheat",
    "solve_hjb",
]
