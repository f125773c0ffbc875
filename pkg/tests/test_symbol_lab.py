import numpy as np
import pytest

from lensxray.metric_model import Bump, Domain, MetricSpec, euclidean
from lensxray.symbol_lab import delta_sphere, kernel_analysis, sym_basis, symbol_M1, symbol_N1

X = np.array([0.2, -0.1])
OMEGA = np.array([0.6, 0.8])


def spec3():
    return MetricSpec(Domain(1.0, 0.9, 3), (Bump((0.1, 0.0, 0.1), 0.3, -0.2, True),))


def test_sym_basis_orthonormal():
    for d in (2, 3):
        E = sym_basis(d)
        G = np.einsum("aij,bij->ab", E, E)
        assert np.allclose(G, np.eye(len(E)))


def test_delta_sphere_orthogonal_and_unit():
    g = np.array([[1.2, 0.1, 0.0], [0.1, 0.9, 0.05], [0.0, 0.05, 1.1]])
    w = np.array([0.3, -0.5, 0.8])
    xis, wts = delta_sphere(g, w, 32)
    assert np.abs(xis @ w).max() < 1e-13
    assert np.allclose(np.einsum("ni,ij,nj->n", xis, g, xis), 1.0)
    assert wts.shape == (32,)


def test_euclidean_n1_closed_form():
    # g = I: (sigma_L f)(xi, xi) = -f(xi, xi) omega / 2 and Phi = [[I, (T - s) I], [0, I]]
    spec = euclidean(2)
    T = 3.0
    op = symbol_N1(spec, None, X, OMEGA, T=T)
    E = sym_basis(2)
    ref = np.zeros((3, 3))
    wn = np.linalg.norm(OMEGA)
    for sgn in (1, -1):
        xi = sgn * np.array([-OMEGA[1], OMEGA[0]]) / wn
        s = X @ xi + np.sqrt((X @ xi) ** 2 - X @ X + 1.0)
        e = np.einsum("cij,i,j->c", E, xi, xi)
        ref += np.pi / wn * (1 + (T - s) ** 2) * 0.25 * wn**2 * np.outer(e, e)
    assert np.abs(op.matrix - ref).max() < 1e-10 * np.abs(ref).max()


def test_homogeneity(bump_spec):
    t = 2.5
    m1, m1t = (symbol_M1(bump_spec, None, X, w).matrix for w in (OMEGA, t * OMEGA))
    n1, n1t = (symbol_N1(bump_spec, None, X, w).matrix for w in (OMEGA, t * OMEGA))
    assert np.allclose(m1t, m1 / t, rtol=1e-10, atol=1e-13)
    assert np.allclose(n1t, t * n1, rtol=1e-10, atol=1e-13)


@pytest.mark.parametrize("dim", [2, 3])
def test_kernels_are_potential_directions(dim, bump_spec):
    spec = bump_spec if dim == 2 else spec3()
    x = X if dim == 2 else np.array([0.2, -0.1, 0.05])
    w = OMEGA if dim == 2 else np.array([0.6, 0.0, 0.8])
    for kind, fn, kdim in (("M1", symbol_M1, 2 * dim * dim), ("N1", symbol_N1, dim)):
        op = fn(spec, None, x, w, n_quad=64)
        assert np.allclose(op.matrix, op.matrix.T)
        assert np.linalg.eigvalsh(op.matrix).min() > -1e-10 * np.abs(op.matrix).max()
        rep = kernel_analysis(op)
        assert rep.kernel_dim == kdim, kind
        assert rep.max_angle < 1e-6
        assert rep.min_rayleigh > 0
        assert rep.ok
