"""Closed-form and quadrature oracles: Gaussian expectations, Black-Scholes, convexity."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import integrate, optimize
from scipy.special import ndtr, roots_hermitenorm

from .expr import FieldExpr, parse_field


class QuadratureError(ArithmeticError):
    pass


@dataclass(frozen=True)
class QuadratureSpec:
    nodes: int = 201
    tol: float = 1e-10
    domain: float = 12.0  # standard-normal units

    def __post_init__(self):
        if self.nodes < 3 or self.tol <= 0 or self.domain <= 0:
            raise ValueError("need nodes >= 3, tol > 0, domain > 0")


_SQRT2PI = math.sqrt(2.0 * math.pi)


def _kinks(expr: FieldExpr, sigma: float, L: float, scan: int = 4001) -> list[float]:
    """Points in ``[-L, L]`` where a switch of ``expr(sigma * y)`` changes sign."""
    ys = np.linspace(-L, L, scan)
    out = []
    for sw in expr.switches():
        vals = np.asarray(sw.on_grid({"x": sigma * ys, "t": 0.0}, ys.shape))
        for i in np.flatnonzero(vals == 0):
            out.append(float(ys[i]))
        for i in np.flatnonzero(vals[:-1] * vals[1:] < 0):
            f = lambda y, sw=sw: float(sw(x=sigma * y, t=0.0))  # noqa: E731
            out.append(optimize.brentq(f, ys[i], ys[i + 1], xtol=1e-15, rtol=4 * np.finfo(float).eps))
    return sorted(set(out))


def gaussian_expectation(phi, sigma: float, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """``E[phi(sigma * Y)]`` for standard normal ``Y``; ``phi`` is a field in ``x``.

    Smooth fields use Gauss-Hermite; fields with max/min/abs are split at their
    kinks and integrated adaptively on each piece.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    expr = parse_field(phi)
    if sigma == 0:
        return float(expr(x=0.0, t=0.0))
    if not expr.switches():
        y, w = roots_hermitenorm(spec.nodes)
        vals = expr.on_grid({"x": sigma * y, "t": 0.0}, y.shape)
        return float(np.sum(w * vals) / _SQRT2PI)
    L = spec.domain
    cuts = [-L, *[k for k in _kinks(expr, sigma, L) if -L < k < L], L]

    def integrand(y):
        return float(expr(x=sigma * y, t=0.0)) * math.exp(-0.5 * y * y) / _SQRT2PI

    total = 0.0
    for a, b in zip(cuts, cuts[1:]):
        if b <= a:
            continue
        val, err = integrate.quad(integrand, a, b, epsabs=1e-13, epsrel=1e-13, limit=200)
        if err > spec.tol:
            raise QuadratureError(f"adaptive quadrature error estimate {err:.3g} on [{a:.4g}, {b:.4g}]")
        total += val
    return total


def heat_oracle(phi, x: float, t: float, variance: float, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """``E[phi(x + sqrt(variance * t) Y)]``: the linear heat semigroup at a fixed variance."""
    shifted = parse_field(phi).substitute(x=f"{float(x)!r} + x")
    return gaussian_expectation(shifted, math.sqrt(variance * t), spec)


def lognormal_payoff(phi, S: float, r: float, T: float, sigma: float) -> FieldExpr:
    """``phi(S exp((r - sigma^2/2) T + sigma sqrt(T) x))`` as a field in ``x``."""
    mu = float((r - 0.5 * sigma * sigma) * T)
    vol = float(sigma * math.sqrt(T))
    return parse_field(phi).substitute(x=f"{float(S)!r} * exp({mu!r} + {vol!r} * x)")


def bs_quadrature_price(phi, S: float, r: float, T: float, sigma: float, spec: QuadratureSpec = QuadratureSpec()) -> float:
    """Discounted risk-neutral expectation of ``phi`` at constant volatility, by quadrature."""
    return math.exp(-r * T) * gaussian_expectation(lognormal_payoff(phi, S, r, T, sigma), 1.0, spec)


def extremal_bs_price(kind: str, S: float, K: float, r: float, T: float, sigma: float) -> float:
    """Black-Scholes call/put; at ``sigma = 0`` the discounted intrinsic value on the forward."""
    if S <= 0 or K <= 0 or T <= 0 or sigma < 0:
        raise ValueError("need S, K, T > 0 and sigma >= 0")
    disc = K * math.exp(-r * T)
    if sigma == 0:
        call = max(S - disc, 0.0)
    else:
        sd = sigma * math.sqrt(T)
        d1 = (math.log(S / K) + (r + 0.5 * sigma * sigma) * T) / sd
        call = S * float(ndtr(d1)) - disc * float(ndtr(d1 - sd))
    if kind == "call":
        return call
    if kind == "put":
        return call - S + disc
    raise ValueError("kind must be 'call' or 'put'")


def convexity_detect(phi, domain: tuple[float, float], samples: int = 1001, tol: float = 1e-9) -> str:
    """'convex', 'concave' or 'neither' from second differences on a uniform sample.

    An affine field is reported as convex.
    """
    if samples < 3:
        raise ValueError("samples must be >= 3")
    xs = np.linspace(domain[0], domain[1], samples)
    v = np.asarray(parse_field(phi).on_grid({"x": xs, "t": 0.0}, xs.shape))
    d2 = v[2:] - 2.0 * v[1:-1] + v[:-2]
    eps = tol * max(1.0, float(np.max(np.abs(v))))
    if np.all(d2 >= -eps):
        return "convex"
    if np.all(d2 <= eps):
        return "concave"
    return "neither"


__all__ = [
    "QuadratureError",
    "QuadratureSpec",
    "bs_quadrature_price",
    "convexity_detect",
    "extremal_bs_price",
    "gaussian_expectation",
    "heat_oracle",
    "lognormal_payoff",
]
