import itertools

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from gexpect.core import DimensionError, ModelSpec, UncertaintyBox, dual_mode, g_star, g_sup, optimize_box_affine

reals = st.floats(min_value=-50, max_value=50, allow_nan=False)
pos = st.floats(min_value=0, max_value=10, allow_nan=False)


@st.composite
def bands(draw):
    lo, hi = sorted([draw(pos), draw(pos)])
    return (lo, hi)


@st.composite
def boxes(draw, max_dim=3):
    d = draw(st.integers(1, max_dim))
    return UncertaintyBox(tuple(draw(bands()) for _ in range(d)))


# -- examples -------------------------------------------------------------------------------


def test_g_star_examples():
    assert g_sup(2.0, (1.0, 4.0)).value == 4.0
    assert g_sup(-2.0, (1.0, 4.0)).value == -1.0
    assert g_star(2.0, (1.0, 4.0)).value == 1.0
    assert g_star(-2.0, (1.0, 4.0)).value == -4.0


def test_tie_breaks_to_lowest_vertex():
    box = UncertaintyBox(((1, 2), (3, 4)))
    assert optimize_box_affine(0.0, [0.0, 0.0], box, "inf").vertex == (0, 0)
    assert optimize_box_affine(0.0, [0.0, 0.0], box, "sup").vertex == (0, 0)
    assert g_star(0.0, (1, 2)).vertex == (0,)


def test_vertex_order_is_product_order():
    box = UncertaintyBox(((1, 2), (3, 4)))
    assert box.vertices() == list(itertools.product([0, 1], repeat=2))
    np.testing.assert_array_equal(box.vertex_matrix(), [[1, 3], [1, 4], [2, 3], [2, 4]])


def test_box_rejects_inverted_band():
    with pytest.raises(ValueError):
        UncertaintyBox(((4.0, 1.0),))


def test_box_contains():
    assert UncertaintyBox(((0, 5),)).contains(UncertaintyBox(((1, 2),)))
    assert not UncertaintyBox(((1, 2),)).contains(UncertaintyBox(((0, 5),)))


def test_model_defaults_and_validation():
    m = ModelSpec(box=UncertaintyBox.of(0.25, 1.0), terminal="max(x,0)", g="-0.05*y", lipschitz=0.05)
    assert m.d == 1 and m.driver_uses_y and m.beta == pytest.approx(0.05 * 2.0)
    with pytest.raises(DimensionError):
        ModelSpec(box=UncertaintyBox.of(0.25, 1.0), terminal="x1", n=1)
    with pytest.raises(DimensionError):
        ModelSpec(box=UncertaintyBox(((1, 2), (1, 2))), terminal="x1", n=2, sigma=[["1", "1"], ["1", "0"]])
    with pytest.raises(DimensionError):
        ModelSpec(box=UncertaintyBox.of(0.25, 1.0), terminal="x", b=["0", "0"])


# -- properties ------------------------------------------------------------------------------


@given(reals, bands())
def test_duality(a, band):
    assert g_star(a, band, "inf").value == -g_sup(-a, band).value


@given(reals, reals, bands())
def test_sup_is_sublinear_and_inf_superlinear(a, b, band):
    assert g_sup(a + b, band).value <= g_sup(a, band).value + g_sup(b, band).value + 1e-9
    assert g_star(a + b, band).value >= g_star(a, band).value + g_star(b, band).value - 1e-9


@given(reals, pos, bands())
def test_positive_homogeneity(a, lam, band):
    assert g_sup(lam * a, band).value == pytest.approx(lam * g_sup(a, band).value, rel=1e-12, abs=1e-12)


@given(reals, reals, bands())
def test_monotone_in_argument(a, b, band):
    lo, hi = sorted([a, b])
    assert g_sup(lo, band).value <= g_sup(hi, band).value
    assert g_star(lo, band).value <= g_star(hi, band).value


@given(reals, st.lists(reals, min_size=3, max_size=3), boxes())
def test_vertex_optimum_matches_dense_grid(c0, c, box):
    c = c[: box.dim]
    axes = [np.linspace(lo, hi, 101) for lo, hi in box.bands]
    mesh = np.meshgrid(*axes, indexing="ij")
    vals = c0 + sum(cj * m for cj, m in zip(c, mesh))
    tol = 1e-9 * (1 + np.max(np.abs(vals)))
    assert optimize_box_affine(c0, c, box, "inf").value == pytest.approx(vals.min(), abs=tol)
    assert optimize_box_affine(c0, c, box, "sup").value == pytest.approx(vals.max(), abs=tol)


@given(st.sampled_from(["inf", "sup", "super", "sub", "bid", "offer"]))
def test_dual_mode_is_involution(mode):
    assert dual_mode(dual_mode(mode)) in ("inf", "sup")
    assert dual_mode(dual_mode(mode)) != dual_mode(mode)
