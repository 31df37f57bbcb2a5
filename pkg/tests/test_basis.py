import math

import numpy as np
import pytest
from scipy.integrate import quad
from scipy.interpolate import BSpline

from soapfda import (
    eval_basis,
    eval_basis_matrix,
    eval_function,
    make_bspline_basis,
    quantile_interior_knots,
)
from soapfda.basis import basis_integrals, default_basis_size


def bernstein_mass_matrix():
    # closed form: G_ij = C(3,i) C(3,j) * (i+j)! (6-i-j)! / 7!
    out = np.empty((4, 4))
    for i in range(4):
        for j in range(4):
            out[i, j] = (
                math.comb(3, i)
                * math.comb(3, j)
                * math.factorial(i + j)
                * math.factorial(6 - i - j)
                / math.factorial(7)
            )
    return out


class TestConstruction:
    def test_bernstein_gram(self):
        basis = make_bspline_basis((0.0, 1.0), 4, 4)
        assert basis.interior_knots.size == 0
        np.testing.assert_allclose(basis.gram, bernstein_mass_matrix(), rtol=0, atol=1e-15)
        assert abs(basis.gram[0, 0] - 1.0 / 7.0) < 1e-15

    def test_gram_positive_definite(self):
        basis = make_bspline_basis((0.0, 1.0), 20, 4)
        eigs = np.linalg.eigvalsh(basis.gram)
        assert eigs[0] > 1e-10 * np.trace(basis.gram) / basis.size

    def test_penalty_psd_with_null_dim_two(self):
        basis = make_bspline_basis((0.0, 1.0), 10, 4)
        eigs = np.linalg.eigvalsh(basis.penalty)
        scale = np.abs(eigs).max()
        assert eigs[0] > -1e-12 * scale
        assert np.sum(eigs < 1e-10 * scale) == 2  # linear functions

    def test_penalty_kills_linear_functions(self):
        basis = make_bspline_basis((0.0, 1.0), 10, 4)
        ts = np.linspace(0, 1, 57)
        A = eval_basis_matrix(basis, ts)
        coef, *_ = np.linalg.lstsq(A, 2.0 + 3.0 * ts, rcond=None)
        resid = basis.penalty @ coef
        assert np.max(np.abs(resid)) < 1e-9 * np.abs(basis.penalty).max()

    def test_size_below_order_rejected(self):
        with pytest.raises(ValueError, match="smaller than order"):
            make_bspline_basis((0.0, 1.0), 3, 4)

    def test_bad_interior_knots_rejected(self):
        with pytest.raises(ValueError):
            make_bspline_basis((0.0, 1.0), 6, 4, interior_knots=[0.6, 0.3])
        with pytest.raises(ValueError):
            make_bspline_basis((0.0, 1.0), 6, 4, interior_knots=[0.0, 0.5])

    def test_default_size_rule(self):
        assert default_basis_size(1700) == 20
        assert default_basis_size(30) == 7
        assert default_basis_size(1) == 5
        assert default_basis_size(1, order=6) == 6

    def test_quantile_knots(self):
        rng = np.random.default_rng(0)
        times = rng.uniform(0, 1, size=500)
        knots = quantile_interior_knots(times, 4, (0.0, 1.0))
        assert knots.shape == (4,)
        assert np.all(np.diff(knots) > 0)
        assert knots[0] > 0 and knots[-1] < 1


class TestEvaluation:
    def test_partition_of_unity(self):
        basis = make_bspline_basis((0.0, 2.5), 9, 4)
        ts = np.linspace(0, 2.5, 201)
        rows = eval_basis_matrix(basis, ts)
        np.testing.assert_allclose(rows.sum(axis=1), 1.0, rtol=0, atol=1e-12)
        assert np.all(rows >= 0)

    def test_endpoints(self):
        basis = make_bspline_basis((0.0, 1.0), 7, 4)
        left = eval_basis(basis, 0.0)
        right = eval_basis(basis, 1.0)
        np.testing.assert_allclose(left, np.eye(7)[0], atol=1e-15)
        np.testing.assert_allclose(right, np.eye(7)[6], atol=1e-15)

    def test_out_of_domain_rejected(self):
        basis = make_bspline_basis((0.0, 1.0), 6, 4)
        with pytest.raises(ValueError, match="outside domain"):
            eval_basis(basis, 1.5)

    def test_local_support(self):
        # at most `order` basis functions are nonzero at any point
        basis = make_bspline_basis((0.0, 1.0), 12, 4)
        rows = eval_basis_matrix(basis, np.linspace(0, 1, 97))
        assert np.max((rows != 0).sum(axis=1)) <= basis.order

    def test_eval_function_zero_and_unity(self):
        basis = make_bspline_basis((0.0, 1.0), 6, 4)
        grid = np.linspace(0, 1, 31)
        np.testing.assert_array_equal(eval_function(basis, np.zeros(6), grid), np.zeros(31))
        np.testing.assert_allclose(eval_function(basis, np.ones(6), grid), 1.0, atol=1e-12)

    def test_coef_length_mismatch(self):
        basis = make_bspline_basis((0.0, 1.0), 6, 4)
        with pytest.raises(ValueError, match="does not match"):
            eval_function(basis, np.zeros(5), [0.5])

    def test_polynomial_reproduction(self):
        basis = make_bspline_basis((0.0, 1.0), 9, 4)
        ts = np.linspace(0, 1, 50)
        A = eval_basis_matrix(basis, ts)
        coef, *_ = np.linalg.lstsq(A, ts, rcond=None)
        fine = np.linspace(0, 1, 333)
        np.testing.assert_allclose(eval_function(basis, coef, fine), fine, atol=1e-12)


class TestQuadratureIdentities:
    def piecewise_quad(self, basis, func):
        breaks = np.concatenate([[basis.domain[0]], basis.interior_knots, [basis.domain[1]]])
        return sum(
            quad(func, a, b, limit=200)[0] for a, b in zip(breaks[:-1], breaks[1:])
        )

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gram_matches_quadrature(self, seed):
        basis = make_bspline_basis((0.0, 1.0), 10, 4)
        c = np.random.default_rng(seed).normal(size=10)
        spline = BSpline(basis.knots, c, basis.degree)
        exact = self.piecewise_quad(basis, lambda t: spline(t) ** 2)
        assert abs(c @ basis.gram @ c - exact) < 1e-8 * abs(exact)

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_penalty_matches_quadrature(self, seed):
        basis = make_bspline_basis((0.0, 1.0), 10, 4)
        c = np.random.default_rng(seed).normal(size=10)
        d2 = BSpline(basis.knots, c, basis.degree).derivative(2)
        exact = self.piecewise_quad(basis, lambda t: d2(t) ** 2)
        assert abs(c @ basis.penalty @ c - exact) < 1e-6 * abs(exact)

    def test_unit_gram_norm_is_unit_integral(self, rng):
        basis = make_bspline_basis((0.0, 1.0), 8, 4)
        c = rng.normal(size=8)
        c = c / np.sqrt(c @ basis.gram @ c)
        grid = np.linspace(0, 1, 4001)
        integral = np.trapezoid(eval_function(basis, c, grid) ** 2, grid)
        assert abs(integral - 1.0) < 1e-6

    def test_basis_integrals_match_unity(self):
        basis = make_bspline_basis((0.0, 1.0), 8, 4)
        assert abs(basis_integrals(basis).sum() - 1.0) < 1e-12


class TestOrderTwo:
    def test_linear_splines_have_zero_penalty(self):
        basis = make_bspline_basis((0.0, 1.0), 5, 2)
        assert np.all(basis.penalty == 0)
        ts = np.linspace(0, 1, 41)
        np.testing.assert_allclose(eval_basis_matrix(basis, ts).sum(axis=1), 1.0, atol=1e-12)
