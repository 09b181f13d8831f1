import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hermicop.polybasis import (
    HermiteTable, hermite, hermite_orthonormal, hermite_orthonormal_all, hermite_shift_expand,
    rotation_factors, shifted_gaussian_moment, tensor_basis_2d,
)
from hermicop.quadrature import gauss_hermite_nodes

EXPLICIT = {
    0: lambda x: np.ones_like(x),
    1: lambda x: x,
    2: lambda x: x**2 - 1,
    3: lambda x: x**3 - 3 * x,
    4: lambda x: x**4 - 6 * x**2 + 3,
}


def gh_expect(f, n=40):
    x, w = gauss_hermite_nodes(n)
    return float(np.sum(w * f(x)))


class TestHermite:
    def test_forced_values(self):
        assert hermite(0, 7.3) == 1.0
        assert hermite(3, 2.0) == 2.0
        assert hermite(5, 0.0) == 0.0

    def test_explicit_forms(self):
        x = np.random.default_rng(1).uniform(-5, 5, 100)
        for n, f in EXPLICIT.items():
            np.testing.assert_allclose(hermite(n, x), f(x), atol=1e-10, rtol=0)

    def test_numpy_oracle(self):
        x = np.linspace(-8, 8, 33)
        for n in range(11):
            ref = np.polynomial.hermite_e.hermeval(x, [0] * n + [1])
            np.testing.assert_allclose(hermite(n, x), ref, rtol=1e-12, atol=1e-9)

    def test_degree_guard(self):
        with pytest.raises(ValueError):
            hermite(17, 0.0)
        with pytest.raises(ValueError):
            hermite(-1, 0.0)

    def test_table(self):
        tab = HermiteTable.build(8)
        x = np.array([-1.3, 0.2, 2.7])
        for n in range(9):
            assert len(tab.rows[n]) == n + 1 and tab.rows[n][-1] == 1
            np.testing.assert_allclose(tab.evaluate(n, x), hermite(n, x), rtol=1e-12, atol=1e-12)
        for n in range(1, 8):
            np.testing.assert_allclose(tab.evaluate(n + 1, x), x * tab.evaluate(n, x) - n * tab.evaluate(n - 1, x),
                                       atol=1e-9)


class TestOrthonormal:
    def test_values(self):
        assert hermite_orthonormal(2, 0.0) == pytest.approx(-1 / math.sqrt(2), abs=1e-15)
        assert np.all(hermite_orthonormal(0, np.linspace(-3, 3, 7)) == 1.0)

    def test_norm_degree4(self):
        assert gh_expect(lambda x: hermite_orthonormal(4, x) ** 2, 20) == pytest.approx(1.0, abs=1e-10)

    def test_gram_matrix(self):
        x, w = gauss_hermite_nodes(40)
        h = hermite_orthonormal_all(8, x)
        gram = (h * w) @ h.T
        np.testing.assert_allclose(gram, np.eye(9), atol=1e-8)

    def test_stack_matches_single(self):
        x = np.linspace(-8.5, 8.5, 41)
        h = hermite_orthonormal_all(16, x)
        for n in range(17):
            np.testing.assert_allclose(h[n], hermite_orthonormal(n, x), rtol=1e-10, atol=1e-10)


class TestTensorBasis:
    def test_forced(self):
        assert tensor_basis_2d(0, 0, 3.1, -2.2) == 1.0
        assert tensor_basis_2d(3, 1, 1.0, 0.0) == pytest.approx(-1 / math.sqrt(2), abs=1e-15)

    def test_index_range(self):
        with pytest.raises(ValueError):
            tensor_basis_2d(3, 4, 0.0, 0.0)

    def test_discrete_orthogonality(self, grid200):
        x1, x2 = grid200.mesh()
        p = np.exp(-0.5 * (x1**2 + x2**2)) / (2 * np.pi)
        ip = grid200.weight * np.sum(tensor_basis_2d(3, 1, x1, x2) * tensor_basis_2d(3, 2, x1, x2) * p)
        assert abs(ip) < 1e-8

    @pytest.mark.parametrize("rho", [-0.9, 0.0, 0.5, 0.9])
    def test_orthonormal_under_correlated_weight(self, rho):
        # expectation under N(0, Sigma) computed by tensor Gauss-Hermite in the independent coordinates
        f = rotation_factors(rho)
        z, w = gauss_hermite_nodes(30)
        Z1, Z2 = np.meshgrid(z, z, indexing="ij")
        W = np.outer(w, w)
        x1 = f.gamma[0, 0] * Z1 + f.gamma[0, 1] * Z2
        x2 = f.gamma[1, 0] * Z1 + f.gamma[1, 1] * Z2
        gi = f.gamma_inv
        v1, v2 = gi[0, 0] * x1 + gi[0, 1] * x2, gi[1, 0] * x1 + gi[1, 1] * x2
        idx = [(n, i) for n in range(5) for i in range(n + 1)]
        E = [tensor_basis_2d(n, i, v1, v2) for n, i in idx]
        gram = np.array([[np.sum(W * a * b) for b in E] for a in E])
        np.testing.assert_allclose(gram, np.eye(len(idx)), atol=1e-6)

    @pytest.mark.parametrize("rho", [-0.9, 0.0, 0.5, 0.9])
    def test_inner_product_transform(self, rho):
        # <f, g> under N(0, Sigma) equals <f o Gamma, g o Gamma> under N(0, I); the left side uses a
        # Cholesky change of variables, an independent route to the correlated expectation
        rng = np.random.default_rng(7)
        cf, cg = rng.normal(size=(5, 5)), rng.normal(size=(5, 5))
        mask = np.add.outer(np.arange(5), np.arange(5)) <= 4
        cf, cg = cf * mask, cg * mask

        def poly(c, a, b):
            return np.polynomial.polynomial.polyval2d(a, b, c)

        z, w = gauss_hermite_nodes(20)
        Z1, Z2 = np.meshgrid(z, z, indexing="ij")
        W = np.outer(w, w)
        L1, L2 = Z1, rho * Z1 + math.sqrt(1 - rho * rho) * Z2
        lhs = np.sum(W * poly(cf, L1, L2) * poly(cg, L1, L2))
        G = rotation_factors(rho).gamma
        y1, y2 = G[0, 0] * Z1 + G[0, 1] * Z2, G[1, 0] * Z1 + G[1, 1] * Z2
        rhs = np.sum(W * poly(cf, y1, y2) * poly(cg, y1, y2))
        assert rhs == pytest.approx(lhs, rel=1e-6, abs=1e-6)


class TestShift:
    def test_trivial(self):
        np.testing.assert_allclose(hermite_shift_expand(1, 0.0), [0.0, 1.0])
        np.testing.assert_allclose(hermite_shift_expand(0, 0.7), [1.0])

    @given(i=st.integers(0, 8), s=st.floats(-2, 2), x=st.floats(-3, 3))
    @settings(max_examples=60, deadline=None)
    def test_shift_identity(self, i, s, x):
        c = hermite_shift_expand(i, s)
        rhs = sum(c[k] * hermite_orthonormal(k, x) for k in range(i + 1))
        assert hermite_orthonormal(i, x + s) == pytest.approx(rhs, abs=1e-9 * max(1.0, abs(rhs)))

    def test_shift_i2(self):
        c = hermite_shift_expand(2, 1.0)
        for x in (-2.0, 0.0, 3.0):
            rhs = sum(c[k] * hermite_orthonormal(k, x) for k in range(3))
            assert hermite_orthonormal(2, x + 1.0) == pytest.approx(rhs, abs=1e-12)

    def test_shifted_moment(self):
        assert shifted_gaussian_moment(0, 0.3) == 1.0
        for i in range(1, 6):
            assert shifted_gaussian_moment(i, 0.0) == 0.0
        val = shifted_gaussian_moment(3, 0.5)
        assert val == pytest.approx(0.125 / math.sqrt(6), abs=1e-15)
        assert gh_expect(lambda x: hermite_orthonormal(3, x + 0.5)) == pytest.approx(val, abs=1e-10)


class TestRotation:
    def test_symmetric(self):
        f = rotation_factors(0.0)
        for a in (f.alpha1, f.alpha2, f.beta1, f.beta2):
            assert a == pytest.approx(1 / math.sqrt(2), abs=1e-15)

    def test_half(self):
        f = rotation_factors(0.5)
        assert f.alpha1 == pytest.approx(math.sqrt(0.75), abs=1e-15)
        assert f.alpha2 == pytest.approx(0.5, abs=1e-15)

    @given(rho=st.floats(-1 + 1e-6, 1 - 1e-6))
    @settings(max_examples=80, deadline=None)
    def test_invariants(self, rho):
        f = rotation_factors(rho)
        np.testing.assert_allclose(f.gamma @ f.gamma.T, [[1, rho], [rho, 1]], atol=1e-14)
        np.testing.assert_allclose(f.gamma @ f.gamma_inv, np.eye(2), atol=1e-12 / (1 - abs(rho)) ** 0.5)
        assert f.beta1 == pytest.approx(1 / (2 * f.alpha1))
        assert f.beta2 == pytest.approx(1 / (2 * f.alpha2))

    def test_guard(self):
        with pytest.raises(ValueError):
            rotation_factors(1.0)
        with pytest.raises(ValueError):
            rotation_factors(-0.9999999)
