import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from conftest import random_density_matrix
from fbsqueeze.operators import (
    annihilation,
    anticommutator,
    check_dim,
    commutator,
    creation,
    dissipator,
    hamiltonian,
    hermitian_part,
    number,
    operator_set,
    quadratures,
)

dims = st.integers(min_value=2, max_value=30)


class TestLadder:
    def test_dim2(self):
        np.testing.assert_array_equal(annihilation(2), [[0, 1], [0, 0]])

    def test_dim3_entry(self):
        c = annihilation(3)
        assert c[1, 2] == pytest.approx(1.41421356, abs=1e-8)
        assert np.count_nonzero(c) == 2

    @given(dims)
    def test_number_diagonal(self, dim):
        c = annihilation(dim)
        np.testing.assert_allclose(np.diag(c.conj().T @ c).real, np.arange(dim), atol=1e-12)
        np.testing.assert_allclose(number(dim), c.conj().T @ c, atol=1e-12)

    @given(dims)
    def test_creation_is_adjoint(self, dim):
        np.testing.assert_array_equal(creation(dim), annihilation(dim).conj().T)

    @pytest.mark.parametrize("bad", [0, 1, -3, 2.5, True])
    def test_invalid_dim(self, bad):
        with pytest.raises(ValueError):
            check_dim(bad)


class TestQuadratures:
    def test_dim2(self):
        x, p = quadratures(2)
        np.testing.assert_allclose(x, [[0, 2**-0.5], [2**-0.5, 0]], atol=1e-15)
        np.testing.assert_allclose(p, [[0, -1j * 2**-0.5], [1j * 2**-0.5, 0]], atol=1e-15)

    @given(dims)
    def test_hermitian(self, dim):
        x, p = quadratures(dim)
        h = hamiltonian(dim, 1.3)
        for op in (x, p, h):
            assert np.max(np.abs(op - op.conj().T)) < 1e-12

    @given(dims)
    def test_interior_commutator(self, dim):
        x, p = quadratures(dim)
        d = np.diag(commutator(x, p))
        np.testing.assert_allclose(d[:-1], 1j, atol=1e-12)
        # the truncation artifact sits in the last level
        assert abs(d[-1] - 1j) > 0.5

    @given(dims)
    def test_energy_identity_interior(self, dim):
        x, p = quadratures(dim)
        lhs = x @ x + p @ p
        rhs = 2 * number(dim) + np.eye(dim)
        np.testing.assert_allclose(lhs[:-1, :-1], rhs[:-1, :-1], atol=1e-12)


class TestHamiltonian:
    def test_values(self):
        np.testing.assert_allclose(hamiltonian(3, 1.0), np.diag([0.5, 1.5, 2.5]))
        np.testing.assert_allclose(hamiltonian(2, 2.0), np.diag([1.0, 3.0]))

    @given(dims)
    def test_quadrature_form(self, dim):
        x, p = quadratures(dim)
        half = 0.5 * (p @ p + x @ x)
        np.testing.assert_allclose(half[:-1, :-1], hamiltonian(dim)[:-1, :-1], atol=1e-12)

    @pytest.mark.parametrize("omega", [0.0, -1.0])
    def test_rejects_nonpositive_omega(self, omega):
        with pytest.raises(ValueError):
            hamiltonian(3, omega)


class TestDissipator:
    def test_vacuum_annihilated(self):
        rho = np.zeros((4, 4), complex)
        rho[0, 0] = 1
        np.testing.assert_allclose(dissipator(annihilation(4), rho), 0, atol=1e-15)

    def test_creation_on_vacuum(self):
        rho = np.zeros((4, 4), complex)
        rho[0, 0] = 1
        expected = np.zeros((4, 4))
        expected[1, 1], expected[0, 0] = 1, -1
        np.testing.assert_allclose(dissipator(creation(4), rho), expected, atol=1e-15)

    def test_trace_free_random_pairs(self, rng):
        for _ in range(100):
            dim = int(rng.integers(2, 12))
            L = rng.standard_normal((dim, dim)) + 1j * rng.standard_normal((dim, dim))
            rho = random_density_matrix(dim, rng)
            assert abs(np.trace(dissipator(L, rho))) < 1e-10

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            dissipator(annihilation(3), np.eye(4))


class TestAlgebraHelpers:
    @settings(max_examples=25)
    @given(st.integers(2, 8), st.integers(0, 2**32 - 1))
    def test_commutators(self, dim, seed):
        r = np.random.default_rng(seed)
        a = r.standard_normal((dim, dim)) + 1j * r.standard_normal((dim, dim))
        b = r.standard_normal((dim, dim))
        np.testing.assert_allclose(commutator(a, b) + anticommutator(a, b), 2 * a @ b, atol=1e-12)
        h = hermitian_part(a)
        np.testing.assert_allclose(h, h.conj().T, atol=0)

    def test_operator_set_cached_and_readonly(self):
        ops = operator_set(6)
        assert ops is operator_set(6)
        with pytest.raises(ValueError):
            ops.x[0, 0] = 1.0
        np.testing.assert_array_equal(ops.cd, ops.c.conj().T)
