import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from semigroup_spectra.laplace_inversion import (
    ConfigurationError,
    InversionConfig,
    bromwich_invert,
    bromwich_ladder,
    rectangle_dictionary,
    scalar_bromwich,
    weak_operator_norm,
)
from semigroup_spectra.measure_space import (
    CellBasis,
    DiscreteMeasure,
    assemble_transfer,
    d_norm,
    tv_norm,
    tv_operator_norm,
)
from semigroup_spectra.resolvent import PanelResolvent
from semigroup_spectra.semiflow_model import bundled_model

KS = [25.0, 50.0, 100.0, 200.0]


@pytest.fixture(scope="module")
def setup():
    m = bundled_model("constant")
    b = CellBasis(m, 8, 16)
    return m, b, PanelResolvent(m, b), assemble_transfer(m, b, 1.0)


@pytest.fixture(scope="module")
def small():
    m = bundled_model("perturbed")
    return CellBasis(m, 4, 6)


@pytest.fixture(scope="module")
def ladders(setup):
    m, b, ev, ref = setup
    return {a: bromwich_ladder(ev, a, 1.0, KS, ref, b) for a in (0.5, 1.0, 2.0)}


class DiagonalResolvent:
    """``R(z) = diag(1 / (z - lam))``; its semigroup is ``diag(e^{lam t})``."""

    basis_id = "diag"

    def __init__(self, lam):
        self.lam = np.asarray(lam, dtype=float)
        self.dim = len(self.lam)

    def __call__(self, z):
        return np.diag(1.0 / (z - self.lam))


class SumResolvent:
    basis_id = "diag"

    def __init__(self, alpha, R1, beta, R2):
        self.alpha, self.R1, self.beta, self.R2, self.dim = alpha, R1, beta, R2, R1.dim

    def __call__(self, z):
        return self.alpha * self.R1(z) + self.beta * self.R2(z)


# weak norm


def test_weak_norm_of_zero(small):
    assert weak_operator_norm(np.zeros((small.n_cells,) * 2), small) == 0.0


def test_weak_norm_of_identity_at_most_one(small):
    assert 0 < weak_operator_norm(np.eye(small.n_cells), small) <= 1.0


def test_dictionary_columns_have_unit_d_norm(small):
    D = rectangle_dictionary(small)
    for c in D.T[:: max(1, D.shape[1] // 40)]:
        assert d_norm(DiscreteMeasure(small.id, c), small) == pytest.approx(1.0, rel=1e-12)


def test_weak_norm_attained_on_a_dictionary_element(small):
    A = np.random.default_rng(0).standard_normal((small.n_cells,) * 2)
    D = rectangle_dictionary(small)
    val = weak_operator_norm(A, small)
    best = max(tv_norm(DiscreteMeasure(small.id, A @ c)) / d_norm(DiscreteMeasure(small.id, c), small) for c in D.T)
    assert val == pytest.approx(best, rel=1e-12)


def test_weak_norm_rejects_mismatched_shape(small):
    with pytest.raises(ValueError):
        weak_operator_norm(np.eye(3), small)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 10_000), c=st.floats(-5, 5))
def test_weak_norm_is_a_seminorm_below_tv(small, seed, c):
    rng = np.random.default_rng(seed)
    A, B = rng.standard_normal((2, small.n_cells, small.n_cells))
    wa, wb = weak_operator_norm(A, small), weak_operator_norm(B, small)
    assert wa <= tv_operator_norm(A) * (1 + 1e-12)
    assert weak_operator_norm(c * A, small) == pytest.approx(abs(c) * wa, rel=1e-12, abs=1e-300)
    assert weak_operator_norm(A + B, small) <= (wa + wb) * (1 + 1e-12)


# scalar sanity


def test_scalar_bromwich_reaches_one():
    h = math.pi / 4
    assert abs(scalar_bromwich(1.0, 1.0, 200.0, h) - 1.0) <= 0.05


def test_scalar_bromwich_error_shrinks_with_k():
    h = math.pi / 4
    errs = [abs(scalar_bromwich(1.0, 1.0, k, h) - 1.0) for k in KS]
    assert all(b < a for a, b in zip(errs, errs[1:]))


# operator inversion


def test_diagonal_semigroup_is_recovered():
    # oracle: e^{lam t} in closed form
    lam = [0.0, -0.5, -1.0]
    lad = bromwich_ladder(DiagonalResolvent(lam), 1.0, 1.0, KS)
    errs = []
    for row in lad.rows:
        approx = np.diag(lad.approximants[row.k].matrix)
        errs.append(np.max(np.abs(approx - np.exp(lam))))
        assert errs[-1] <= row.budget
    assert errs[-1] < errs[0]


def test_inversion_is_linear_in_the_integrand():
    R1, R2 = DiagonalResolvent([0.0, -1.0, -2.0]), DiagonalResolvent([-0.3, -0.1, -4.0])
    alpha, beta = 0.7, -2.5
    cfg = InversionConfig(a=1.0, k=50.0, t=1.0)
    a1 = bromwich_invert(R1, cfg).approx.matrix
    a2 = bromwich_invert(R2, cfg).approx.matrix
    a12 = bromwich_invert(SumResolvent(alpha, R1, beta, R2), cfg).approx.matrix
    np.testing.assert_allclose(a12, alpha * a1 + beta * a2, atol=1e-12)


def test_weak_error_decreases_along_ladder(ladders):
    w = [r.weak_error for r in ladders[1.0].rows]
    assert all(b < a for a, b in zip(w, w[1:]))
    assert w[-1] <= 10 * ladders[1.0].rows[-1].budget


@pytest.mark.parametrize("a", [0.5, 1.0, 2.0])
def test_weak_error_non_increasing_with_noise_floor(ladders, a):
    w = [r.weak_error for r in ladders[a].rows]
    assert all(b <= 1.05 * a_ for a_, b in zip(w, w[1:]))


def test_tv_error_does_not_converge_comparably(ladders):
    for r in ladders[1.0].rows:
        assert r.tv_error >= 10 * r.weak_error
    # the TV error at the finest k is still an order above the weak one
    assert ladders[1.0].rows[-1].tv_error >= 0.05


@pytest.mark.parametrize("a1,a2", [(0.5, 1.0), (1.0, 2.0), (0.5, 2.0)])
def test_abscissa_robustness(ladders, setup, a1, a2):
    b = setup[1]
    for i, k in enumerate(KS[2:], start=2):
        d = weak_operator_norm(ladders[a1].approximants[k].matrix - ladders[a2].approximants[k].matrix, b)
        assert d <= 2 * min(ladders[a1].rows[i].budget, ladders[a2].rows[i].budget)


def test_single_inversion_matches_ladder_rung(setup, ladders):
    m, b, ev, ref = setup
    h = ladders[1.0].h
    res = bromwich_invert(ev, InversionConfig(a=1.0, k=50.0, t=1.0), ref, b)
    assert InversionConfig(a=1.0, k=50.0, t=1.0).spacing == pytest.approx(h)
    np.testing.assert_allclose(res.approx.matrix, ladders[1.0].approximants[50.0].matrix, atol=1e-13)
    assert res.weak_error == pytest.approx(ladders[1.0].rows[1].weak_error, rel=1e-10)


def test_default_spacing_resolves_the_oscillation():
    for t in (0.5, 1.0, 3.0):
        cfg = InversionConfig(k=100.0, t=t)
        assert cfg.spacing <= math.pi / (4 * t) + 1e-12
        assert (cfg.k / cfg.spacing) % 2 == pytest.approx(0.0, abs=1e-9)


# configuration errors


@pytest.mark.parametrize("kw", [{"a": 0.0}, {"a": -1.0}, {"t": -0.1}, {"k": 100.0, "n_nodes": 200}])
def test_invalid_config(kw):
    with pytest.raises(ConfigurationError):
        InversionConfig(**kw)


def test_ladder_rejects_incommensurate_k():
    with pytest.raises(ConfigurationError):
        bromwich_ladder(DiagonalResolvent([0.0]), 1.0, 1.0, [25.0, 30.0])


def test_node_failure_names_the_node():
    class Broken(DiagonalResolvent):
        def __call__(self, z):
            if z.imag > 10:
                raise ZeroDivisionError("pole")
            return super().__call__(z)

    with pytest.raises(RuntimeError, match=r"z=1\+"):
        bromwich_ladder(Broken([0.0]), 1.0, 1.0, [25.0])
