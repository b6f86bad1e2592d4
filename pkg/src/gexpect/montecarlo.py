"""Path simulation under single priors: policy values, quadratic-variation checks,
constant-control scans and the windowed quadratic-variation counterexample."""

from __future__ import annotations

import csv
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path
from typing import Sequence

import numpy as np

from .analytic import QuadratureSpec, bs_quadrature_price, heat_oracle
from .core import ModelSpec, as_mode
from .expr import parse_field
from .lattice import ControlPolicy, ValueSurface
from .pde import BSBSpec


def path_rng(seed: int, path: int) -> np.random.Generator:
    """Independent counter-derived stream for one path."""
    return np.random.Generator(np.random.Philox(key=int(seed), counter=[0, 0, int(path), 0]))


# -- policies ---------------------------------------------------------------------------


@dataclass
class PolicySpec:
    """Variance control rule. ``kind`` is constant, lookup, bangbang or random."""

    kind: str
    band: tuple[float, float]
    value: float | None = None
    table: ControlPolicy | None = None

    @classmethod
    def constant(cls, v: float, band) -> "PolicySpec":
        lo, hi = band
        if not lo <= v <= hi:
            raise ValueError(f"constant control {v} outside band [{lo}, {hi}]")
        return cls("constant", (float(lo), float(hi)), value=float(v))

    @classmethod
    def lookup(cls, policy: ControlPolicy) -> "PolicySpec":
        if policy.box.dim != 1:
            raise ValueError("path simulation supports a single Brownian component")
        return cls("lookup", policy.box.bands[0], table=policy)

    @classmethod
    def bangbang(cls, surface: ValueSurface, model: ModelSpec) -> "PolicySpec":
        """Endpoint control on the sign of the variance coefficient of the generator."""
        return cls("bangbang", model.box.bands[0], table=bangbang_policy(surface, model))

    @classmethod
    def random(cls, band) -> "PolicySpec":
        return cls("random", (float(band[0]), float(band[1])))

    def emit(self, t: float, z: np.ndarray, u: np.ndarray | None = None) -> np.ndarray:
        """Variance for every path at time ``t`` and computational coordinate ``z``."""
        lo, hi = self.band
        if self.kind == "constant":
            return np.full(z.shape, self.value)
        if self.kind == "random":
            return lo + (hi - lo) * u
        grid = self.table.grid
        n = min(max(int(round(t / grid.dt)), 0), grid.Nt - 1)
        i = np.clip(np.rint((z - grid.z_min[0]) / grid.dx[0]).astype(np.int64), 0, grid.Nx[0] - 1)
        return self.table.box.vertex_matrix()[self.table.index[n, i], 0]


def bangbang_policy(surface: ValueSurface, model: ModelSpec) -> ControlPolicy:
    """Vertex table from the sign of ``1/2 sigma^2 u_zz + h u_z + f`` at the next row."""
    grid = surface.grid
    if grid.n != 1 or model.d != 1:
        raise ValueError("bang-bang extraction is one-dimensional")
    dx = grid.dx[0]
    mode = as_mode(model.mode)
    index = np.zeros((grid.Nt,) + grid.shape, dtype=np.int64)
    for n in range(grid.Nt):
        u = surface.values[n + 1]
        env = {**grid.env(n), "y": u}
        d2 = np.zeros_like(u)
        d1 = np.zeros_like(u)
        d2[1:-1] = (u[2:] - 2 * u[1:-1] + u[:-2]) / dx**2
        d1[1:-1] = (u[2:] - u[:-2]) / (2 * dx)
        sig2 = model.sigma[0][0].on_grid(env, u.shape) ** 2
        coef = 0.5 * sig2 * d2 + model.h[0][0].on_grid(env, u.shape) * d1 + model.f[0].on_grid(env, u.shape)
        index[n] = (coef < 0) if mode == "inf" else (coef > 0)
    return ControlPolicy(grid, model.box, index)


# -- path batches ------------------------------------------------------------------------


@dataclass
class PathBatch:
    dt: float
    band: tuple[float, float]
    x: np.ndarray  # (paths, N+1) state
    dB: np.ndarray  # (paths, N) driving increments
    qv: np.ndarray  # (paths, N+1) accumulated quadratic variation
    control: np.ndarray  # (paths, N) applied variance

    @property
    def n_paths(self) -> int:
        return self.x.shape[0]

    @property
    def n_steps(self) -> int:
        return self.dB.shape[1]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.n_steps + 1)


def _draws(seed: int, first: int, count: int, n_steps: int, need_uniform: bool):
    Z = np.empty((count, n_steps))
    U = np.empty((count, n_steps)) if need_uniform else None
    for k in range(count):
        rng = path_rng(seed, first + k)
        Z[k] = rng.standard_normal(n_steps)
        if need_uniform:
            U[k] = rng.random(n_steps)
    return Z, U


def sample_paths(
    source,
    policy: PolicySpec,
    n_paths: int,
    n_steps: int,
    seed: int,
    x0: float | None = None,
    T: float | None = None,
    path_offset: int = 0,
) -> PathBatch:
    """Simulate paths under the prior induced by ``policy``.

    ``source`` is a :class:`BSBSpec` (exact log-normal step per constant-control
    step) or a one-dimensional :class:`ModelSpec` (Euler-Maruyama; needs ``x0``, ``T``).
    """
    if n_paths < 1 or n_steps < 1:
        raise ValueError("need n_paths >= 1 and n_steps >= 1")
    is_bsb = isinstance(source, BSBSpec)
    if is_bsb:
        x0 = source.spot if x0 is None else x0
        T = source.T if T is None else T
    elif source.n != 1 or source.d != 1:
        raise ValueError("path simulation supports one state and one Brownian component")
    if x0 is None or T is None or T <= 0:
        raise ValueError("need x0 and T > 0")
    dt = T / n_steps
    Z, U = _draws(seed, path_offset, n_paths, n_steps, policy.kind == "random")
    x = np.empty((n_paths, n_steps + 1))
    dB = np.empty((n_paths, n_steps))
    qv = np.zeros((n_paths, n_steps + 1))
    ctrl = np.empty((n_paths, n_steps))
    x[:, 0] = x0
    z = np.full(n_paths, math.log(x0) if is_bsb else float(x0))
    table_log = policy.table is not None and policy.table.grid.log_space
    for k in range(n_steps):
        t = k * dt
        if policy.table is None or table_log == is_bsb:
            zc = z
        else:
            zc = np.log(x[:, k]) if table_log else x[:, k]
        v = policy.emit(t, zc, None if U is None else U[:, k])
        inc = np.sqrt(v * dt) * Z[:, k]
        if is_bsb:
            z = z + (source.r - 0.5 * v) * dt + inc
            x[:, k + 1] = np.exp(z)
        else:
            env = {"x": x[:, k], "t": t}
            shape = (n_paths,)
            drift = source.b[0].on_grid(env, shape) + source.h[0][0].on_grid(env, shape) * v
            sig = source.sigma[0][0].on_grid(env, shape)
            x[:, k + 1] = x[:, k] + drift * dt + sig * inc
            z = x[:, k + 1]
        dB[:, k] = inc
        ctrl[:, k] = v
        qv[:, k + 1] = qv[:, k] + v * dt
    return PathBatch(dt, policy.band, x, dB, qv, ctrl)


# -- estimates -------------------------------------------------------------------------------


@dataclass(frozen=True)
class ValueEstimate:
    mean: float
    stderr: float
    n: int


def path_values(batch: PathBatch, payoff, g="0", f="0", r: float = 0.0) -> np.ndarray:
    """Discounted payoff plus running reward ``(g + f v) dt`` along each path."""
    payoff, g, f = parse_field(payoff), parse_field(g), parse_field(f)
    N, dt = batch.n_steps, batch.dt
    T = N * dt
    vals = math.exp(-r * T) * payoff.on_grid({"x": batch.x[:, -1], "t": T}, (batch.n_paths,))
    if not (g.is_zero and f.is_zero):
        t = batch.times[:-1][None, :]
        env = {"x": batch.x[:, :-1], "t": t}
        shape = batch.control.shape
        run = (g.on_grid(env, shape) + f.on_grid(env, shape) * batch.control) * np.exp(-r * t) * dt
        vals = vals + np.sum(run, axis=1)
    return vals


def estimate(values: np.ndarray) -> ValueEstimate:
    n = values.size
    mean = float(np.sum(values) / n)
    se = float(math.sqrt(np.sum((values - mean) ** 2) / (n - 1) / n)) if n > 1 else float("nan")
    return ValueEstimate(mean, se, n)


def policy_value_estimate(batch: PathBatch, payoff, g="0", f="0", r: float = 0.0) -> ValueEstimate:
    """Linear-expectation value under the batch's prior, with its standard error."""
    return estimate(path_values(batch, payoff, g, f, r))


def mc_policy_value(
    source,
    policy: PolicySpec,
    payoff,
    n_paths: int,
    n_steps: int,
    seed: int,
    chunk: int = 10_000,
    threads: int = 1,
    x0: float | None = None,
    T: float | None = None,
    g="0",
    f="0",
) -> ValueEstimate:
    """Chunked simulation; per-path streams make the result independent of ``chunk`` and ``threads``."""
    r = source.r if isinstance(source, BSBSpec) else 0.0
    starts = list(range(0, n_paths, chunk))

    def run(s):
        batch = sample_paths(source, policy, min(chunk, n_paths - s), n_steps, seed, x0, T, path_offset=s)
        return path_values(batch, payoff, g, f, r)

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as ex:
            parts = list(ex.map(run, starts))
    else:
        parts = [run(s) for s in starts]
    return estimate(np.concatenate(parts))


# -- constant-control scans ----------------------------------------------------------------


@dataclass(frozen=True)
class HeatSetup:
    """``E[phi(x + B_T)]`` with ``B`` of constant variance ``v`` per unit time."""

    phi: object
    x: float
    T: float
    band: tuple[float, float]


@dataclass
class ScanResult:
    alpha_sq: np.ndarray
    values: np.ndarray

    @property
    def inf(self) -> float:
        return float(np.min(self.values))

    @property
    def sup(self) -> float:
        return float(np.max(self.values))

    @property
    def argmin(self) -> float:
        return float(self.alpha_sq[np.argmin(self.values)])

    @property
    def argmax(self) -> float:
        return float(self.alpha_sq[np.argmax(self.values)])

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["alpha_sq", "value"])
            for a, v in zip(self.alpha_sq, self.values):
                w.writerow(["%.17g" % a, "%.17g" % v])
        return path


def representation_scan(setup, Na: int = 21, spec: QuadratureSpec = QuadratureSpec()) -> ScanResult:
    """Exact (quadrature) values of the constant-variance priors across the band."""
    if Na < 2:
        raise ValueError("Na must be >= 2")
    if isinstance(setup, BSBSpec):
        lo, hi = setup.box.bands[0]
        grid = np.linspace(lo, hi, Na)
        vals = [bs_quadrature_price(setup.payoff, setup.spot, setup.r, setup.T, math.sqrt(v), spec) for v in grid]
    else:
        lo, hi = setup.band
        grid = np.linspace(lo, hi, Na)
        vals = [heat_oracle(setup.phi, setup.x, setup.T, v, spec) for v in grid]
    return ScanResult(grid, np.array(vals))


# -- quadratic-variation diagnostics ----------------------------------------------------------


@dataclass
class QVReport:
    violations: int
    min_ratio: np.ndarray  # per path
    max_ratio: np.ndarray
    path_violations: np.ndarray
    weighted_violations: int = 0

    @property
    def extremal(self) -> tuple[float, float]:
        return float(np.min(self.min_ratio)), float(np.max(self.max_ratio))

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["path", "min_ratio", "max_ratio", "violations"])
            for p in range(self.min_ratio.size):
                w.writerow([p, "%.17g" % self.min_ratio[p], "%.17g" % self.max_ratio[p], int(self.path_violations[p])])
        return path


def _windows(N: int):
    w = 1
    while w <= N:
        starts = np.arange(0, N - w + 1, w)
        yield w, starts
        w *= 2


def quad_var_report(batch: PathBatch, eta2=None, rtol: float = 1e-9) -> QVReport:
    """Check ``lo (t-s) <= <B>_t - <B>_s <= hi (t-s)`` on every dyadic window.

    With ``eta2`` (a field in ``t`` or an array over steps) the weighted bounds
    ``lo int eta2 ds <= int eta2 d<B> <= hi int eta2 ds`` are checked as well.
    """
    lo, hi = batch.band
    N, dt = batch.n_steps, batch.dt
    P = batch.n_paths
    mins = np.full(P, np.inf)
    maxs = np.full(P, -np.inf)
    bad = np.zeros(P, dtype=np.int64)
    for w, s in _windows(N):
        inc = batch.qv[:, s + w] - batch.qv[:, s]
        span = w * dt
        ratio = inc / span
        mins = np.minimum(mins, ratio.min(axis=1))
        maxs = np.maximum(maxs, ratio.max(axis=1))
        slack = rtol * hi * span
        bad += np.sum((inc < lo * span - slack) | (inc > hi * span + slack), axis=1)
    weighted = 0
    if eta2 is not None:
        if np.ndim(eta2) == 0 and not isinstance(eta2, (int, float)):
            e = parse_field(eta2).on_grid({"t": batch.times[:-1]}, (N,))
        else:
            e = np.broadcast_to(np.asarray(eta2, dtype=float), (N,))
        dq = np.diff(batch.qv, axis=1)
        ce = np.concatenate([[0.0], np.cumsum(e * dt)])
        cq = np.concatenate([np.zeros((P, 1)), np.cumsum(e[None, :] * dq, axis=1)], axis=1)
        for w, s in _windows(N):
            base = ce[s + w] - ce[s]
            got = cq[:, s + w] - cq[:, s]
            slack = rtol * hi * np.abs(base) + 1e-300
            weighted += int(np.sum((got < lo * base - slack) | (got > hi * base + slack)))
    return QVReport(int(bad.sum()), mins, maxs, bad, weighted)


# -- counterexample --------------------------------------------------------------------------


@dataclass
class CounterexampleResult:
    band: tuple[float, float]
    deltas: list[float]
    values: list[float]
    qs_limit: float = 0.0

    def to_csv(self, path) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["delta", "value", "qs_limit"])
            for d, v in zip(self.deltas, self.values):
                w.writerow(["%.17g" % d, "%.17g" % v, "%.17g" % self.qs_limit])
        return path


def counterexample_limit(band: Sequence[float], deltas: Sequence[float]) -> CounterexampleResult:
    """Upper expectation of the difference of forward and backward windowed rates of ``<B>``.

    For each ``delta`` the two windows carry independent controls; both stages
    are affine in the control so the nested optimization runs over band
    endpoints in exact rational arithmetic. Each pathwise difference tends to 0
    as ``delta -> 0`` (continuous quadratic variation), which is the reported limit.
    """
    lo, hi = Fraction(float(band[0])), Fraction(float(band[1]))
    if not 0 <= lo <= hi:
        raise ValueError("band must satisfy 0 <= lo <= hi")
    out = []
    for delta in deltas:
        d = Fraction(float(delta))
        if d <= 0:
            raise ValueError("delta must be positive")

        def rate(v):
            return (v * d) / d

        # backward window decided first, forward window conditionally on it
        value = max(max(rate(fwd) for fwd in (lo, hi)) - rate(back) for back in (lo, hi))
        out.append(float(value))
    return CounterexampleResult((float(band[0]), float(band[1])), [float(x) for x in deltas], out, 0.0)


__all__ = [
    "CounterexampleResult",
    "HeatSetup",
    "PathBatch",
    "PolicySpec",
    "QVReport",
    "ScanResult",
    "ValueEstimate",
    "bangbang_policy",
    "counterexample_limit",
    "estimate",
    "mc_policy_value",
    "path_rng",
    "path_values",
    "policy_value_estimate",
    "quad_var_report",
    "representation_scan",
    "sample_paths",
]
