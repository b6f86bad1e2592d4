"""Domain types: uncertainty boxes, the G functions, and model specifications."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Literal, Sequence

import numpy as np

from .expr import FieldExpr, lipschitz_in_y, parse_field

Mode = Literal["inf", "sup"]

_MODE_ALIASES = {"inf": "inf", "super": "inf", "bid": "inf", "sup": "sup", "sub": "sup", "offer": "sup"}


def as_mode(mode: str) -> Mode:
    """Normalize ``inf``/``sup`` (aliases: ``super``/``sub``, ``bid``/``offer``)."""
    try:
        return _MODE_ALIASES[mode]  # type: ignore[return-value]
    except KeyError:
        raise ValueError(f"unknown mode {mode!r}; expected one of {sorted(_MODE_ALIASES)}") from None


def dual_mode(mode: str) -> Mode:
    return "sup" if as_mode(mode) == "inf" else "inf"


class DimensionError(ValueError):
    pass


@dataclass(frozen=True)
class UncertaintyBox:
    """Axis-aligned box of per-dimension variance intervals ``[lo_j, hi_j]``."""

    bands: tuple[tuple[float, float], ...]

    def __post_init__(self):
        bands = tuple((float(lo), float(hi)) for lo, hi in self.bands)
        if not bands:
            raise ValueError("uncertainty box needs at least one band")
        for j, (lo, hi) in enumerate(bands):
            if not (0.0 <= lo <= hi < np.inf):
                raise ValueError(f"band {j} = [{lo}, {hi}] must satisfy 0 <= lo <= hi < inf")
        object.__setattr__(self, "bands", bands)

    @classmethod
    def of(cls, *bands) -> "UncertaintyBox":
        if len(bands) == 2 and all(np.isscalar(b) for b in bands):
            bands = (tuple(bands),)
        return cls(tuple(tuple(b) for b in bands))

    @property
    def dim(self) -> int:
        return len(self.bands)

    @property
    def lo(self) -> np.ndarray:
        return np.array([b[0] for b in self.bands])

    @property
    def hi(self) -> np.ndarray:
        return np.array([b[1] for b in self.bands])

    def vertices(self) -> list[tuple[int, ...]]:
        """All 2^d lo/hi selections, all-lo first (0 = lo, 1 = hi)."""
        return list(itertools.product((0, 1), repeat=self.dim))

    def vertex_values(self, vertex: Sequence[int]) -> np.ndarray:
        return np.array([band[v] for band, v in zip(self.bands, vertex)])

    def vertex_matrix(self) -> np.ndarray:
        """Array of shape (2^d, d) with the variance at every vertex."""
        return np.array([self.vertex_values(v) for v in self.vertices()])

    def contains(self, other: "UncertaintyBox") -> bool:
        return other.dim == self.dim and all(
            lo <= olo and ohi <= hi for (lo, hi), (olo, ohi) in zip(self.bands, other.bands)
        )


@dataclass(frozen=True)
class GFunctionValue:
    value: float
    vertex: tuple[int, ...]


def g_star(a: float, band: tuple[float, float], mode: str = "inf") -> GFunctionValue:
    """``1/2 inf_{v in band} v*a`` (or the sup with ``mode="sup"``)."""
    lo, hi = float(band[0]), float(band[1])
    pos, neg = max(a, 0.0), max(-a, 0.0)
    if as_mode(mode) == "inf":
        value = 0.5 * (lo * pos - hi * neg)
        vertex = (1,) if a < 0 else (0,)
    else:
        value = 0.5 * (hi * pos - lo * neg)
        vertex = (1,) if a > 0 else (0,)
    return GFunctionValue(value, vertex)


def g_sup(a: float, band: tuple[float, float]) -> GFunctionValue:
    return g_star(a, band, mode="sup")


def optimize_box_affine(c0: float, c: Sequence[float], box: UncertaintyBox, mode: str = "inf") -> GFunctionValue:
    """Optimize ``c0 + sum_j c_j * v_j`` over the box by enumerating its vertices.

    Ties resolve to the lowest-index vertex (all-lo first).
    """
    c = np.asarray(c, dtype=float).ravel()
    if c.size != box.dim:
        raise DimensionError(f"{c.size} coefficients for a {box.dim}-dimensional box")
    best = None
    best_vertex = None
    sign = 1.0 if as_mode(mode) == "inf" else -1.0
    for vertex in box.vertices():
        val = c0 + sum(cj * vj for cj, vj in zip(c, box.vertex_values(vertex)))
        if best is None or sign * val < sign * best:
            best, best_vertex = val, vertex
    return GFunctionValue(float(best), best_vertex)


def _expr(v) -> FieldExpr:
    return parse_field(v) if not isinstance(v, FieldExpr) else v


def _expr_list(vals, n, name) -> tuple[FieldExpr, ...]:
    vals = [vals] if isinstance(vals, (str, FieldExpr, int, float)) else list(vals)
    if len(vals) != n:
        raise DimensionError(f"{name}: expected {n} entries, got {len(vals)}")
    return tuple(_expr(v) for v in vals)


def _expr_matrix(vals, n, d, name) -> tuple[tuple[FieldExpr, ...], ...]:
    rows = list(vals)
    if len(rows) != n:
        raise DimensionError(f"{name}: expected {n} rows, got {len(rows)}")
    return tuple(_expr_list(r, d, f"{name}[{i}]") for i, r in enumerate(rows))


@dataclass(frozen=True)
class ModelSpec:
    """Coefficients of the forward diffusion and the backward driver.

    State dynamics (per unit time, variance control ``v_j``)::

        dX_i = (b_i + sum_j h_ij v_j) dt + sum_j sigma_ij dB^j,   d<B^j> = v_j dt

    Backward value ``Y = E_opt[terminal(X_T) + int g(X, Y) dt + int f_j(X, Y) d<B^j>]``.
    On a log-space grid the coefficients describe the log-coordinate dynamics while
    ``x`` in every expression still denotes the (positive) state value.
    """

    box: UncertaintyBox
    terminal: FieldExpr
    n: int = 1
    b: tuple[FieldExpr, ...] = ()
    h: tuple[tuple[FieldExpr, ...], ...] = ()
    sigma: tuple[tuple[FieldExpr, ...], ...] = ()
    g: FieldExpr = field(default_factory=lambda: parse_field("0"))
    f: tuple[FieldExpr, ...] = ()
    lipschitz: float = 0.0
    mode: Mode = "inf"
    bands3: tuple[UncertaintyBox, UncertaintyBox, UncertaintyBox] | None = None
    y_range: tuple[float, float] = (-20.0, 20.0)

    def __post_init__(self):
        n, d = self.n, self.box.dim
        if n not in (1, 2):
            raise DimensionError("state dimension must be 1 or 2")
        set_ = lambda k, v: object.__setattr__(self, k, v)  # noqa: E731
        set_("terminal", _expr(self.terminal))
        set_("g", _expr(self.g))
        set_("b", _expr_list(self.b or ["0"] * n, n, "b"))
        set_("h", _expr_matrix(self.h or [["0"] * d] * n, n, d, "h"))
        if not self.sigma:
            if n == 1:
                sig = [["1"] * d] if d == 1 else [["1"] + ["0"] * (d - 1)]
            else:
                sig = [["1" if i == j else "0" for j in range(d)] for i in range(n)]
        else:
            sig = self.sigma
        set_("sigma", _expr_matrix(sig, n, d, "sigma"))
        set_("f", _expr_list(self.f or ["0"] * d, d, "f"))
        set_("mode", as_mode(self.mode))
        if self.lipschitz < 0:
            raise ValueError("lipschitz constant K must be >= 0")
        if self.bands3 is not None:
            if len(self.bands3) != 3 or any(bx.dim != d for bx in self.bands3):
                raise DimensionError("bands3 needs three boxes of the model's band dimension")
            set_("bands3", tuple(self.bands3))
        for ex in self.all_fields():
            if n == 2 and ex.uses("x"):
                raise DimensionError("two-dimensional models use x1, x2 (not x)")
            if n == 1 and (ex.uses("x1") or ex.uses("x2")):
                raise DimensionError("one-dimensional models use x (not x1, x2)")
        if n == 2:
            # cross-variation terms would need mixed derivatives
            for j in range(d):
                nonzero = [i for i in range(n) if not self.sigma[i][j].is_zero]
                if len(nonzero) > 1:
                    raise DimensionError("two-dimensional models need sigma columns with a single nonzero entry")
        for ex in (self.b + tuple(c for row in self.h for c in row) + tuple(c for row in self.sigma for c in row)):
            if ex.uses("y"):
                raise ValueError(f"coefficient {ex} must not depend on y")
        if self.terminal.uses("y"):
            raise ValueError("terminal payoff must not depend on y")

    @property
    def d(self) -> int:
        return self.box.dim

    def all_fields(self):
        yield self.terminal
        yield self.g
        yield from self.b
        yield from self.f
        for row in self.h:
            yield from row
        for row in self.sigma:
            yield from row

    @property
    def has_driver(self) -> bool:
        return not self.g.is_zero or any(not fj.is_zero for fj in self.f)

    @property
    def driver_uses_y(self) -> bool:
        return self.g.uses("y") or any(fj.uses("y") for fj in self.f)

    @property
    def beta(self) -> float:
        """Weight of the Picard norm: ``K (1 + sum_j hi_j)``."""
        return self.lipschitz * (1.0 + float(np.sum(self.box.hi)))

    def replace(self, **changes) -> "ModelSpec":
        import dataclasses

        return dataclasses.replace(self, **changes)

    def validate_lipschitz(self, x_samples, n: int = 10_000, seed: int = 0) -> float:
        """Sample difference quotients of every driver in ``y`` against ``K``."""
        worst = 0.0
        for ex in (self.g,) + self.f:
            worst = max(worst, lipschitz_in_y(ex, self.lipschitz, x_samples, self.y_range, n=n, seed=seed))
        return worst

    @classmethod
    def heat(cls, terminal, box, mode="inf", **kw) -> "ModelSpec":
        """Pure G-heat model: identity diffusion, no drift, no driver."""
        if not isinstance(box, UncertaintyBox):
            box = UncertaintyBox.of(*box) if np.ndim(box) > 1 else UncertaintyBox.of(*box)
        n = kw.pop("n", box.dim if box.dim <= 2 else 1)
        return cls(box=box, terminal=terminal, n=n, mode=mode, **kw)
