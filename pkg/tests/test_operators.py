import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from qpf.errors import DimensionMismatch, NotHermitian, NotNormalized, NotPSD, VanishingTrace
from qpf.operators import (
    as_density,
    fidelity,
    fidelity_batch,
    hermitian_sqrt,
    maximally_mixed,
    normalize,
    pauli,
    pure_state,
    random_density,
)

KET0 = pure_state([1, 0])
KET1 = pure_state([0, 1])


def test_sqrt_examples():
    np.testing.assert_allclose(hermitian_sqrt(np.eye(2)), np.eye(2), atol=1e-14)
    np.testing.assert_allclose(hermitian_sqrt(np.diag([4.0, 9.0])), np.diag([2.0, 3.0]), atol=1e-14)


def test_sqrt_rejects_bad_input():
    with pytest.raises(NotHermitian):
        hermitian_sqrt(np.array([[1, 1], [0, 1]]))
    with pytest.raises(NotPSD):
        hermitian_sqrt(np.diag([1.0, -0.1]))
    with pytest.raises(DimensionMismatch):
        hermitian_sqrt(np.ones((2, 3)))


def test_sqrt_clamps_rounding_noise():
    root = hermitian_sqrt(np.diag([1.0, -1e-12]))
    assert np.all(np.isfinite(root))
    assert root[1, 1] == 0.0


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 5), st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_sqrt_squares_back(dim, seed, scale):
    rng = np.random.default_rng(seed)
    rank = int(rng.integers(1, dim + 1))
    a = scale * random_density(dim, rng, rank=rank)
    root = hermitian_sqrt(a)
    np.testing.assert_allclose(root @ root, a, atol=1e-9 * scale)
    assert np.linalg.eigvalsh(root).min() >= -1e-9 * np.sqrt(scale)


def test_fidelity_examples():
    rng = np.random.default_rng(3)
    rho = random_density(3, rng)
    assert fidelity(rho, rho) == pytest.approx(1.0, abs=1e-10)
    assert fidelity(KET0, KET1) == pytest.approx(0.0, abs=1e-12)
    assert fidelity(KET0, maximally_mixed(2)) == pytest.approx(0.5, abs=1e-12)


def test_fidelity_pure_reduces_to_overlap():
    rng = np.random.default_rng(11)
    psi = rng.standard_normal(3) + 1j * rng.standard_normal(3)
    psi /= np.linalg.norm(psi)
    sigma = random_density(3, rng)
    expected = float(np.real(psi.conj() @ sigma @ psi))
    assert fidelity(pure_state(psi), sigma) == pytest.approx(expected, abs=1e-10)


def test_fidelity_symmetric_and_batched():
    rng = np.random.default_rng(5)
    rhos = np.stack([random_density(2, rng, rank=int(rng.integers(1, 3))) for _ in range(30)])
    sigmas = np.stack([random_density(2, rng) for _ in range(30)])
    single = np.array([fidelity(a, b) for a, b in zip(rhos, sigmas)])
    swapped = np.array([fidelity(b, a) for a, b in zip(rhos, sigmas)])
    np.testing.assert_allclose(single, swapped, atol=1e-8)
    np.testing.assert_allclose(fidelity_batch(rhos, sigmas), single, atol=1e-8)
    assert np.all((single >= 0) & (single <= 1))


def test_fidelity_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        fidelity(KET0, maximally_mixed(3))


def test_normalize_examples():
    rho, tr = normalize(np.diag([0.25, 0.25]))
    np.testing.assert_allclose(rho, np.eye(2) / 2)
    assert tr == pytest.approx(0.5)
    rho, tr = normalize(np.diag([0.0, 0.3]))
    np.testing.assert_allclose(rho, np.diag([0.0, 1.0]))
    assert tr == pytest.approx(0.3)
    with pytest.raises(VanishingTrace):
        normalize(np.diag([1e-16, 1e-16]))


def test_normalize_symmetrizes_and_rejects_negative():
    s = np.array([[0.5, 0.1 + 1e-13j], [0.1, 0.5]])
    rho, _ = normalize(s)
    np.testing.assert_array_equal(rho, rho.conj().T)
    with pytest.raises(NotPSD):
        normalize(np.diag([1.0, -0.01]))


def test_pauli():
    np.testing.assert_array_equal(pauli("X"), [[0, 1], [1, 0]])
    np.testing.assert_array_equal(pauli("Z"), [[1, 0], [0, -1]])
    np.testing.assert_allclose(pauli("Y") @ pauli("Y"), np.eye(2))
    x = pauli("x")
    x[0, 0] = 7
    assert pauli("X")[0, 0] == 0
    with pytest.raises(ValueError):
        pauli("W")


def test_as_density_checks():
    as_density(np.eye(2) / 2)
    with pytest.raises(NotNormalized):
        as_density(np.eye(2))
    with pytest.raises(NotHermitian):
        as_density(np.array([[0.5, 0.2], [0.0, 0.5]]))
