"""Controlled Markov lattice: conditional nonlinear expectations by dynamic programming.

Each backward step optimizes, node by node, over the vertices of the variance
box. For a fixed vertex the step is a trinomial (per state axis) Markov chain
with probabilities

    p_up = dt * (a / (2 dx^2) + m / (2 dx)),   p_dn = dt * (a / (2 dx^2) - m / (2 dx))

when ``a >= |m| dx`` (central drift), and upwinded drift otherwise, so every
probability is nonnegative under the CFL bound. Boundary nodes carry no
diffusion and only inward drift.

Drivers enter implicitly in ``y`` at the node being computed::

    Y_n = opt_v { P_v Y_{n+1} + dt * sum_j f_j(x, Y_n) v_j } + dt * g(x, Y_n)

which is the fixed point of Picard iteration with running rewards sampled at
the left end of each time step. It is solved per node by fixed-point iteration
(a contraction with factor ``dt K (1 + sum hi) < 1``).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from .core import DimensionError, ModelSpec, UncertaintyBox, as_mode
from .expr import FieldExpr, parse_field


class CFLError(ValueError):
    """Time step too large for a monotone explicit step."""

    def __init__(self, dt: float, max_dt: float):
        self.dt = dt
        self.max_dt = max_dt
        super().__init__(f"CFL violated: dt={dt:.6g} exceeds the maximal admissible dt={max_dt:.6g}")


class NonFiniteError(ArithmeticError):
    pass


class BudgetError(ValueError):
    pass


class FixedPointError(ArithmeticError):
    pass


# -- grid ------------------------------------------------------------------------


def _tup(v, n=None) -> tuple:
    if np.ndim(v) == 0:
        return (v,) if n is None else (v,) * n
    return tuple(v)


@dataclass(frozen=True)
class GridSpec:
    """Uniform space-time grid. With ``log_space`` the nodes are uniform in ``log x``
    and ``x_min``/``x_max`` are given in state (price) units."""

    x_min: tuple[float, ...]
    x_max: tuple[float, ...]
    Nx: tuple[int, ...]
    T: float
    Nt: int
    log_space: bool = False

    def __post_init__(self):
        x_min = tuple(float(v) for v in _tup(self.x_min))
        x_max = tuple(float(v) for v in _tup(self.x_max))
        Nx = tuple(int(v) for v in _tup(self.Nx, len(x_min)))
        if not (len(x_min) == len(x_max) == len(Nx)) or len(x_min) not in (1, 2):
            raise DimensionError("grid needs one or two matching space dimensions")
        for lo, hi, n in zip(x_min, x_max, Nx):
            if not lo < hi:
                raise ValueError(f"x_min={lo} must be < x_max={hi}")
            if n < 3:
                raise ValueError("Nx must be >= 3")
            if self.log_space and lo <= 0:
                raise ValueError("log_space grids need x_min > 0")
        if int(self.Nt) < 1 or not self.T > 0:
            raise ValueError("need Nt >= 1 and T > 0")
        object.__setattr__(self, "x_min", x_min)
        object.__setattr__(self, "x_max", x_max)
        object.__setattr__(self, "Nx", Nx)
        object.__setattr__(self, "T", float(self.T))
        object.__setattr__(self, "Nt", int(self.Nt))

    @property
    def n(self) -> int:
        return len(self.Nx)

    @property
    def shape(self) -> tuple[int, ...]:
        return self.Nx

    @property
    def dt(self) -> float:
        return self.T / self.Nt

    @property
    def z_min(self) -> tuple[float, ...]:
        return tuple(math.log(v) for v in self.x_min) if self.log_space else self.x_min

    @property
    def z_max(self) -> tuple[float, ...]:
        return tuple(math.log(v) for v in self.x_max) if self.log_space else self.x_max

    @property
    def dx(self) -> tuple[float, ...]:
        """Spacing in the computational coordinate."""
        return tuple((hi - lo) / (n - 1) for lo, hi, n in zip(self.z_min, self.z_max, self.Nx))

    def axis(self, mu: int = 0) -> np.ndarray:
        """Computational coordinate along axis ``mu``."""
        return self.z_min[mu] + self.dx[mu] * np.arange(self.Nx[mu])

    def states(self, mu: int = 0) -> np.ndarray:
        """State values along axis ``mu`` (``exp`` of the coordinate on log grids)."""
        z = self.axis(mu)
        return np.exp(z) if self.log_space else z

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.Nt + 1)

    def env(self, n_step: int | None = None) -> dict:
        """Variable bindings for field evaluation at every node."""
        if self.n == 1:
            env = {"x": self.states(0)}
        else:
            x1, x2 = np.meshgrid(self.states(0), self.states(1), indexing="ij")
            env = {"x1": x1, "x2": x2}
        env["t"] = 0.0 if n_step is None else n_step * self.dt
        return env

    def interior_mask(self, frac: float = 0.6) -> np.ndarray:
        """Boolean mask of the central ``frac`` of every axis."""
        masks = []
        for mu in range(self.n):
            z = self.axis(mu)
            mid = 0.5 * (self.z_min[mu] + self.z_max[mu])
            half = 0.5 * frac * (self.z_max[mu] - self.z_min[mu])
            masks.append(np.abs(z - mid) <= half + 1e-12 * abs(half))
        if self.n == 1:
            return masks[0]
        return masks[0][:, None] & masks[1][None, :]

    def with_steps(self, Nt: int) -> "GridSpec":
        return GridSpec(self.x_min, self.x_max, self.Nx, self.T, Nt, self.log_space)

    def refined(self, factor: int = 2) -> "GridSpec":
        """Space refinement keeping the node set nested (``Nx -> factor*(Nx-1)+1``)."""
        return GridSpec(
            self.x_min, self.x_max, tuple(factor * (n - 1) + 1 for n in self.Nx), self.T, self.Nt, self.log_space
        )


# -- coefficients ----------------------------------------------------------------


def _vertex_matrix(box: UncertaintyBox) -> np.ndarray:
    return box.vertex_matrix()


def _eval(ex: FieldExpr, env: dict, shape) -> np.ndarray:
    return ex.on_grid(env, shape)


@dataclass
class _Coeffs:
    """Per-vertex diffusion ``a`` and drift ``m`` arrays, shape (V, n, *grid)."""

    a: np.ndarray
    m: np.ndarray
    time_dependent: bool
    a_eff: np.ndarray | None = None  # boundary diffusion removed


def _coefficients(model: ModelSpec, grid: GridSpec, n_step: int, box: UncertaintyBox | None = None) -> _Coeffs:
    box = box or model.box
    env = grid.env(n_step)
    shape = grid.shape
    V = _vertex_matrix(box)
    nv, d = V.shape
    a = np.zeros((nv, grid.n) + shape)
    m = np.zeros((nv, grid.n) + shape)
    for mu in range(grid.n):
        sig2 = [_eval(model.sigma[mu][j], env, shape) ** 2 for j in range(d)]
        bmu = _eval(model.b[mu], env, shape)
        hmu = [_eval(model.h[mu][j], env, shape) for j in range(d)]
        for k in range(nv):
            acc = np.zeros(shape)
            drift = bmu.copy()
            for j in range(d):
                acc = acc + sig2[j] * V[k, j]
                drift = drift + hmu[j] * V[k, j]
            a[k, mu] = acc
            m[k, mu] = drift
    time_dep = any(ex.uses("t") for ex in model.all_fields() if ex is not model.terminal)
    return _Coeffs(a, m, time_dep, _zero_boundary_diffusion(a, grid.n))


def _zero_boundary_diffusion(a: np.ndarray, n: int) -> np.ndarray:
    """No diffusion at boundary nodes (zero second difference there)."""
    a = a.copy()
    for mu in range(n):
        idx_lo = [slice(None)] * a.ndim
        idx_hi = [slice(None)] * a.ndim
        idx_lo[1] = mu
        idx_hi[1] = mu
        idx_lo[2 + mu] = 0
        idx_hi[2 + mu] = -1
        a[tuple(idx_lo)] = 0.0
        a[tuple(idx_hi)] = 0.0
    return a


def cfl_rate(model: ModelSpec, grid: GridSpec, time_samples: int | None = None) -> float:
    """``max [sum_mu a_mu/dx_mu^2 + |m_mu|/dx_mu] + K (1 + sum_j hi_j)`` over nodes, vertices, times."""
    if any(ex.uses("t") for ex in model.all_fields() if ex is not model.terminal):
        steps = range(grid.Nt) if time_samples is None else np.linspace(0, grid.Nt - 1, time_samples).astype(int)
    else:
        steps = [0]
    worst = 0.0
    for n_step in steps:
        c = _coefficients(model, grid, int(n_step))
        rate = np.zeros(c.a.shape[:1] + c.a.shape[2:])
        for mu, dx in enumerate(grid.dx):
            rate = rate + c.a[:, mu] / dx**2 + np.abs(c.m[:, mu]) / dx
        worst = max(worst, float(np.max(rate)))
    return worst + model.beta


def max_stable_dt(model: ModelSpec, grid: GridSpec) -> float:
    rate = cfl_rate(model, grid)
    return math.inf if rate == 0 else 1.0 / rate


def check_cfl(model: ModelSpec, grid: GridSpec) -> float:
    """Raise :class:`CFLError` unless ``dt * rate <= 1``; returns the max admissible dt."""
    max_dt = max_stable_dt(model, grid)
    if grid.dt > max_dt * (1 + 1e-12):
        raise CFLError(grid.dt, max_dt)
    return max_dt


def grid_for_model(
    model: ModelSpec,
    x_min,
    x_max,
    Nx,
    T: float,
    cfl: float = 0.9,
    log_space: bool = False,
    min_steps: int = 1,
) -> GridSpec:
    """Grid with the fewest time steps satisfying ``dt <= cfl * max_dt``."""
    probe = GridSpec(x_min, x_max, Nx, T, 1, log_space)
    rate = cfl_rate(model, probe, time_samples=65)
    Nt = max(min_steps, math.ceil(T * rate / cfl - 1e-9)) if rate > 0 else min_steps
    grid = probe.with_steps(Nt)
    while True:
        try:
            check_cfl(model, grid)
            return grid
        except CFLError:
            grid = grid.with_steps(grid.Nt + max(1, grid.Nt // 100))


# -- surfaces and policies ----------------------------------------------------------


def _fmt(v: float) -> str:
    return "%.17g" % v


@dataclass
class ControlPolicy:
    """Attaining box vertex (index into ``box.vertices()``) per (step, node)."""

    grid: GridSpec
    box: UncertaintyBox
    index: np.ndarray  # (Nt, *Nx) int

    def __post_init__(self):
        if self.index.shape != (self.grid.Nt,) + self.grid.shape:
            raise DimensionError("policy shape does not match grid")

    def bits(self) -> np.ndarray:
        """(Nt, *Nx, d) array of 0 (lo) / 1 (hi) selections."""
        table = np.array(self.box.vertices(), dtype=np.int8)
        return table[self.index]

    def variance(self) -> np.ndarray:
        """(Nt, *Nx, d) array of the selected variances."""
        return self.box.vertex_matrix()[self.index]


@dataclass
class ValueSurface:
    grid: GridSpec
    values: np.ndarray  # (Nt+1, *Nx)

    def __post_init__(self):
        if self.values.shape != (self.grid.Nt + 1,) + self.grid.shape:
            raise DimensionError("surface shape does not match grid")

    @property
    def initial(self) -> np.ndarray:
        return self.values[0]

    def at(self, x, n_step: int = 0) -> float:
        """Cubic interpolation of row ``n_step`` at state ``x`` (one-dimensional grids)."""
        from scipy.interpolate import CubicSpline

        if self.grid.n != 1:
            raise DimensionError("interpolation is provided for one-dimensional grids")
        z = math.log(x) if self.grid.log_space else float(x)
        return float(CubicSpline(self.grid.axis(0), self.values[n_step])(z))

    def to_csv(self, path, policy: ControlPolicy | None = None) -> Path:
        path = Path(path)
        g = self.grid
        d = policy.box.dim if policy is not None else 0
        bits = policy.bits() if policy is not None else None
        xcols = ["x"] if g.n == 1 else ["x1", "x2"]
        # state columns are formatted once; each time row reuses them
        mesh = np.meshgrid(*[g.states(mu) for mu in range(g.n)], indexing="ij")
        prefix = [",".join(c) for c in zip(*[[_fmt(v) for v in m.ravel().tolist()] for m in mesh])]
        suffixes = [""] * len(prefix)
        with path.open("w", newline="") as fh:
            fh.write(",".join(["t", *xcols, "value", *[f"vertex_{j}" for j in range(d)]]) + "\n")
            for n, t in enumerate(g.times):
                ts = _fmt(t)
                vals = [_fmt(v) for v in self.values[n].ravel().tolist()]
                if bits is not None:
                    if n < g.Nt:
                        b = bits[n].reshape(-1, d)
                        suffixes = ["," + ",".join(map(str, r)) for r in b.tolist()]
                    else:
                        suffixes = ["," * d] * len(prefix)
                fh.write("".join(f"{ts},{p},{v}{s}\n" for p, v, s in zip(prefix, vals, suffixes)))
        return path


# -- one backward step --------------------------------------------------------------


def _neighbors(u: np.ndarray, mu: int) -> tuple[np.ndarray, np.ndarray]:
    """(u[i+1], u[i-1]) along axis ``mu`` with edge values repeated."""
    up = np.empty_like(u)
    dn = np.empty_like(u)
    src = [slice(None)] * u.ndim
    dst = [slice(None)] * u.ndim

    def put(out, d, s_):
        dst[mu], src[mu] = d, s_
        out[tuple(dst)] = u[tuple(src)]

    put(up, slice(0, -1), slice(1, None))
    put(up, slice(-1, None), slice(-1, None))
    put(dn, slice(1, None), slice(0, -1))
    put(dn, slice(0, 1), slice(0, 1))
    return up, dn


def _transition(a: np.ndarray, m: np.ndarray, dx: float, dt: float) -> tuple[np.ndarray, np.ndarray]:
    """Monotone up/down probabilities: central drift when ``a >= |m| dx``, upwind otherwise."""
    half = a / (2.0 * dx * dx)
    central = a >= np.abs(m) * dx
    pu = dt * np.where(central, half + m / (2.0 * dx), half + np.maximum(m, 0.0) / dx)
    pd = dt * np.where(central, half - m / (2.0 * dx), half + np.maximum(-m, 0.0) / dx)
    return pu, pd


def _candidates_prob(u: np.ndarray, coeffs: _Coeffs, grid: GridSpec) -> np.ndarray:
    """Markov-chain expectation of ``u`` under every vertex, shape (V, *Nx)."""
    dt = grid.dt
    a = coeffs.a_eff
    nv = a.shape[0]
    out = np.empty((nv,) + u.shape)
    nb = [_neighbors(u, mu) for mu in range(grid.n)]
    for k in range(nv):
        stay = np.ones(u.shape)
        acc = np.zeros(u.shape)
        for mu, dx in enumerate(grid.dx):
            pu, pd = _transition(a[k, mu], coeffs.m[k, mu], dx, dt)
            stay = stay - (pu + pd)
            acc = acc + pu * nb[mu][0] + pd * nb[mu][1]
        out[k] = stay * u + acc
    return out


def _argopt(vals: np.ndarray, mode: str) -> np.ndarray:
    return np.argmin(vals, axis=0) if mode == "inf" else np.argmax(vals, axis=0)


def _take(vals: np.ndarray, idx: np.ndarray) -> np.ndarray:
    return np.take_along_axis(vals, idx[None], axis=0)[0]


def _vertex_driver(V: np.ndarray, rf: Sequence[np.ndarray]) -> np.ndarray:
    """``sum_j rf_j * v_j`` for every vertex, shape (V, *Nx)."""
    out = np.zeros((V.shape[0],) + np.shape(rf[0]))
    for k in range(V.shape[0]):
        acc = np.zeros(np.shape(rf[0]))
        for j in range(V.shape[1]):
            acc = acc + rf[j] * V[k, j]
        out[k] = acc
    return out


def resolve_driver(
    cands: np.ndarray,
    model: ModelSpec,
    env: dict,
    u_next: np.ndarray,
    dt: float,
    mode: str,
    running: tuple[np.ndarray, Sequence[np.ndarray]] | None = None,
    V: np.ndarray | None = None,
    max_iter: int = 200,
) -> tuple[np.ndarray, np.ndarray]:
    """Optimize the vertex candidates plus driver terms; implicit in ``y`` per node.

    ``running`` supplies frozen (g, [f_j]) arrays, making the step explicit.
    Returns (row, vertex index).
    """
    V = model.box.vertex_matrix() if V is None else V
    shape = u_next.shape

    def combine(rg, rf):
        tot = cands + dt * _vertex_driver(V, rf) if any(np.any(r != 0) for r in rf) else cands
        idx = _argopt(tot, mode)
        return _take(tot, idx) + dt * rg, idx

    if running is not None:
        rg, rf = running
        return combine(np.broadcast_to(rg, shape), [np.broadcast_to(r, shape) for r in rf])

    def drivers(y):
        rg = model.g.on_grid({**env, "y": y}, shape)
        rf = [fj.on_grid({**env, "y": y}, shape) for fj in model.f]
        return rg, rf

    if not model.driver_uses_y:
        return combine(*drivers(u_next))
    y = u_next
    for _ in range(max_iter):
        y_new, idx = combine(*drivers(y))
        if np.all(np.abs(y_new - y) <= 1e-14 * np.maximum(1.0, np.abs(y_new))):
            return y_new, idx
        y = y_new
    raise FixedPointError("implicit driver iteration did not converge; reduce dt")


def _check_finite(row: np.ndarray, n: int):
    if not np.all(np.isfinite(row)):
        raise NonFiniteError(f"non-finite value produced at time step {n}")


def step_expectation(
    next_row: np.ndarray,
    model: ModelSpec,
    grid: GridSpec,
    n_step: int,
    mode: str | None = None,
    running=None,
    coeffs: _Coeffs | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """One backward step from row ``n_step + 1`` to row ``n_step``."""
    mode = as_mode(mode or model.mode)
    next_row = np.asarray(next_row, dtype=float)
    if not np.all(np.isfinite(next_row)):
        raise NonFiniteError("next row must be finite")
    coeffs = coeffs or _coefficients(model, grid, n_step)
    cands = _candidates_prob(next_row, coeffs, grid)
    row, idx = resolve_driver(cands, model, grid.env(n_step), next_row, grid.dt, mode, running)
    _check_finite(row, n_step)
    return row, idx


def conditional_expectation(
    model: ModelSpec,
    grid: GridSpec,
    mode: str | None = None,
    terminal: np.ndarray | None = None,
    start: int | None = None,
    running: tuple[np.ndarray, np.ndarray] | None = None,
) -> tuple[ValueSurface, ControlPolicy]:
    """Backward DP over the whole grid.

    ``terminal``/``start`` restart the recursion from an intermediate row (rows
    after ``start`` are left as NaN). ``running`` freezes the drivers as arrays
    ``g`` of shape (Nt, *Nx) and ``f`` of shape (Nt, d, *Nx).
    """
    mode = as_mode(mode or model.mode)
    check_cfl(model, grid)
    return _backward(model, grid, mode, _candidates_prob, terminal, start, running)


def _backward(model, grid, mode, candidates, terminal=None, start=None, running=None, resolve=None):
    start = grid.Nt if start is None else int(start)
    values = np.full((grid.Nt + 1,) + grid.shape, np.nan)
    index = np.zeros((grid.Nt,) + grid.shape, dtype=np.int64)
    if terminal is None:
        terminal = model.terminal.on_grid(grid.env(grid.Nt), grid.shape)
    values[start] = np.asarray(terminal, dtype=float)
    _check_finite(values[start], start)
    coeffs = None
    V = model.box.vertex_matrix()
    resolve = resolve or resolve_driver
    for n in range(start - 1, -1, -1):
        if coeffs is None or coeffs.time_dependent:
            coeffs = _coefficients(model, grid, n)
        cands = candidates(values[n + 1], coeffs, grid)
        run = None if running is None else (running[0][n], list(running[1][n]))
        row, idx = resolve(cands, model, grid.env(n), values[n + 1], grid.dt, mode, run, V)
        _check_finite(row, n)
        values[n] = row
        index[n] = idx
    return ValueSurface(grid, values), ControlPolicy(grid, model.box, index)


# -- tiny trees and brute-force enumeration ---------------------------------------------


@dataclass(frozen=True)
class TreeSpec:
    """Recombining trinomial tree driven by a controlled-variance random walk."""

    m: int
    h: float
    x0: float
    dt: float
    controls: tuple[float, ...]

    def __post_init__(self):
        if not 1 <= self.m <= 6:
            raise ValueError("tree steps must be in 1..6")
        if not (self.h > 0 and self.dt > 0):
            raise ValueError("tree needs h > 0 and dt > 0")
        ctrl = tuple(float(a) for a in self.controls)
        if not ctrl:
            raise ValueError("tree needs at least one control")
        object.__setattr__(self, "controls", ctrl)
        for a in ctrl:
            p = self.p(a)
            if not 0.0 <= p <= 0.5:
                raise ValueError(f"control {a} gives invalid probability {p}")

    def p(self, a: float) -> float:
        return a * self.dt / (2.0 * self.h * self.h)

    @property
    def box(self) -> UncertaintyBox:
        return UncertaintyBox(((min(self.controls), max(self.controls)),))

    @property
    def node_count(self) -> int:
        """Decision nodes: sum over steps of (2n + 1)."""
        return self.m * self.m

    @property
    def policy_count(self) -> int:
        return len(self.controls) ** self.node_count

    def node_x(self, n: int) -> np.ndarray:
        return self.x0 + self.h * np.arange(-n, n + 1)

    def to_grid(self) -> GridSpec:
        """Grid whose root-reachable nodes coincide with the tree (boundary out of reach)."""
        half = (self.m + 1) * self.h
        return GridSpec(self.x0 - half, self.x0 + half, 2 * self.m + 3, self.m * self.dt, self.m)

    def model(self, terminal, g="0", f="0", mode="inf", K: float = 0.0) -> ModelSpec:
        return ModelSpec(box=self.box, terminal=terminal, g=g, f=[f], lipschitz=K, mode=mode)


def _as_path_payoff(payoff) -> Callable[[np.ndarray], np.ndarray]:
    if callable(payoff) and not isinstance(payoff, FieldExpr):
        return payoff
    ex = parse_field(payoff)
    return lambda paths: ex.on_grid({"x": paths[:, -1], "t": 0.0}, paths.shape[:1])


def _all_paths(m: int) -> np.ndarray:
    moves = np.array(np.meshgrid(*[[-1, 0, 1]] * m, indexing="ij")).reshape(m, -1).T
    return moves  # (3^m, m)


def brute_force_expectation(
    tree: TreeSpec,
    payoff,
    running: tuple | None = None,
    mode: str = "inf",
    discount: tuple | None = None,
    chunk: int = 4096,
) -> float:
    """Optimize the linear expectation over every Markov policy on the tree.

    ``payoff`` is a field in ``x`` (terminal state) or a callable on the
    (paths, m+1) array of visited states. ``running = (g, f)`` are fields in
    ``(x, t)`` accrued as ``(g + f a) dt`` at each decision node. ``discount =
    (a, b)`` applies the integrating factor ``Q_{n+1} = Q_n / (1 - (a + b v) dt)``
    to the terminal and running terms.
    """
    mode = as_mode(mode)
    if tree.policy_count > 1_000_000:
        raise BudgetError(f"{tree.policy_count} policies exceed the enumeration budget of 1e6")
    m, dt = tree.m, tree.dt
    A = np.array(tree.controls)
    moves = _all_paths(m)
    pos = np.concatenate([np.zeros((len(moves), 1), dtype=int), np.cumsum(moves, axis=1)], axis=1)
    paths_x = tree.x0 + tree.h * pos  # (P, m+1)
    node_id = np.array([[n * n + (pos[p, n] + n) for n in range(m)] for p in range(len(moves))])
    pay = np.asarray(_as_path_payoff(payoff)(paths_x), dtype=float)
    tgrid = dt * np.arange(m)
    g_ex, f_ex = (parse_field(running[0]), parse_field(running[1])) if running else (None, None)
    a_ex, b_ex = (parse_field(discount[0]), parse_field(discount[1])) if discount else (None, None)

    def on_paths(ex):
        return ex.on_grid({"x": paths_x[:, :m], "t": tgrid[None, :]}, (len(moves), m))

    gv = on_paths(g_ex) if g_ex else np.zeros((len(moves), m))
    fv = on_paths(f_ex) if f_ex else np.zeros((len(moves), m))
    av = on_paths(a_ex) if a_ex else np.zeros((len(moves), m))
    bv = on_paths(b_ex) if b_ex else np.zeros((len(moves), m))

    nA = len(A)
    best = None
    total = tree.policy_count
    for start in range(0, total, chunk):
        ids = np.arange(start, min(total, start + chunk))
        digits = (ids[:, None] // nA ** np.arange(tree.node_count)[None, :]) % nA  # (C, nodes)
        ctrl = A[digits[:, node_id]]  # (C, P, m)
        p = ctrl * dt / (2.0 * tree.h * tree.h)
        step_prob = np.where(moves[None] == 0, 1.0 - 2.0 * p, p)
        prob = np.prod(step_prob, axis=2)
        if discount:
            rho = 1.0 / (1.0 - (av[None] + bv[None] * ctrl) * dt)
            Q = np.cumprod(rho, axis=2)  # Q_{n+1}
            value = Q[..., -1] * pay[None] + np.sum(Q * (gv[None] + fv[None] * ctrl) * dt, axis=2)
        else:
            value = pay[None] + np.sum((gv[None] + fv[None] * ctrl) * dt, axis=2)
        ev = np.sum(prob * value, axis=1)
        cur = ev.min() if mode == "inf" else ev.max()
        best = cur if best is None else (min(best, cur) if mode == "inf" else max(best, cur))
    return float(best)


def tree_dp(
    tree: TreeSpec,
    payoff,
    mode: str = "inf",
    g_rows: Sequence[np.ndarray] | None = None,
    f_rows: Sequence[np.ndarray] | None = None,
) -> list[np.ndarray]:
    """Backward DP on the tree itself. Row ``n`` has ``2n + 1`` nodes.

    ``g_rows``/``f_rows`` are running rewards per decision row (explicit).
    """
    mode = as_mode(mode)
    dt, A = tree.dt, np.array(tree.controls)
    ex = parse_field(payoff)
    rows: list[np.ndarray] = [None] * (tree.m + 1)  # type: ignore[list-item]
    rows[tree.m] = ex.on_grid({"x": tree.node_x(tree.m), "t": tree.m * dt}, (2 * tree.m + 1,))
    for n in range(tree.m - 1, -1, -1):
        nxt = rows[n + 1]
        up, mid, dn = nxt[2:], nxt[1:-1], nxt[:-2]
        cands = []
        for a in A:
            p = tree.p(a)
            val = (1.0 - 2.0 * p) * mid + p * up + p * dn
            if f_rows is not None:
                val = val + dt * f_rows[n] * a
            cands.append(val)
        cands = np.array(cands)
        row = cands.min(axis=0) if mode == "inf" else cands.max(axis=0)
        if g_rows is not None:
            row = row + dt * g_rows[n]
        rows[n] = row
    return rows


# -- quadratic-variation functional ------------------------------------------------------


def quadvar_functional(phi, t: float, band: tuple[float, float], mode: str = "sup", Na: int = 64) -> float:
    """Optimize ``phi(int_0^t v ds)`` over piecewise-constant variance controls.

    The controls take ``Na`` equally spaced levels over ``Na`` equal sub-intervals;
    the integral is tracked exactly as an integer accumulator.
    """
    if Na < 2:
        raise ValueError("Na must be >= 2")
    mode = as_mode(mode)
    lo, hi = float(band[0]), float(band[1])
    ex = parse_field(phi)
    K = Na
    S = K * (Na - 1)
    s = np.arange(S + 1)
    q = lo * t + (hi - lo) * t * s / S
    V = np.asarray(ex.on_grid({"x": q, "t": t}, q.shape), dtype=float)
    for k in range(K - 1, -1, -1):
        reach = k * (Na - 1) + 1
        shifted = np.array([V[i : i + reach] for i in range(Na)])
        V = shifted.min(axis=0) if mode == "inf" else shifted.max(axis=0)
    return float(V[0])


__all__ = [
    "BudgetError",
    "CFLError",
    "ControlPolicy",
    "FixedPointError",
    "GridSpec",
    "NonFiniteError",
    "TreeSpec",
    "ValueSurface",
    "brute_force_expectation",
    "cfl_rate",
    "check_cfl",
    "conditional_expectation",
    "grid_for_model",
    "max_stable_dt",
    "quadvar_functional",
    "resolve_driver",
    "step_expectation",
    "tree_dp",
]
