import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lensxray.metric_model import (Bump, BumpTensorField, Domain, MetricSpec, christoffel, cutoff, eval_metric,
                                   euclidean, perturbed, verify_support)


def fd_christoffel(spec, x, h=1e-5):
    """Textbook formula with metric derivatives by central differences."""
    d = len(x)
    g = eval_metric(spec, x[None], order=0)[0][0]
    dg = np.zeros((d, d, d))
    for m in range(d):
        e = np.zeros(d)
        e[m] = h
        dg[:, :, m] = (eval_metric(spec, (x + e)[None], 0)[0][0] - eval_metric(spec, (x - e)[None], 0)[0][0]) / (2 * h)
    gi = np.linalg.inv(g)
    G = np.zeros((d, d, d))
    for k in range(d):
        for i in range(d):
            for j in range(d):
                G[k, i, j] = 0.5 * sum(gi[k, l] * (dg[l, i, j] + dg[l, j, i] - dg[i, j, l]) for l in range(d))
    return G


def test_euclidean_metric_is_identity_with_zero_christoffel():
    spec = euclidean()
    x = np.array([[0.1, 0.2], [-0.5, 0.3]])
    g, dg, ddg = eval_metric(spec, x, order=2)
    assert np.array_equal(g, np.broadcast_to(np.eye(2), g.shape))
    assert not np.any(dg) and not np.any(ddg)
    assert not np.any(christoffel(spec, x).gamma)


def test_support_is_exactly_flat_outside_inner_radius(bump_spec):
    rep = verify_support(bump_spec, n_samples=2000)
    assert rep.ok


def test_cutoff_vanishes_beyond_inner_radius():
    q = np.array([0.81, 0.9, 1.0])
    chi, _, _ = cutoff(q, 0.9, 1.0)
    assert np.all(chi == 0)
    assert cutoff(np.array([0.0]), 0.9, 1.0)[0][0] == 1.0


@pytest.mark.parametrize("x", [(0.1, -0.2), (-0.3, 0.25), (0.5, 0.5)])
def test_christoffel_matches_finite_difference_oracle(bump_spec, x):
    x = np.array(x)
    G = christoffel(bump_spec, x).gamma
    assert np.abs(G - fd_christoffel(bump_spec, x)).max() < 1e-8


def test_conformal_christoffel_closed_form():
    # g = e^{2 phi} I: Gamma^k_ij = delta_ki phi_j + delta_kj phi_i - delta_ij phi_k
    spec = MetricSpec(Domain(1.0, 0.9, 2), (Bump((0.1, 0.0), 0.3, 0.5, True),))
    x = np.array([0.2, 0.15])
    g, dg, _ = eval_metric(spec, x[None], order=1)
    lam = g[0, 0, 0]
    phi = 0.5 * dg[0, 0, 0, :] / lam
    d = 2
    E = np.eye(d)
    ref = (np.einsum("ki,j->kij", E, phi) + np.einsum("kj,i->kij", E, phi) - np.einsum("ij,k->kij", E, phi))
    assert np.allclose(christoffel(spec, x).gamma, ref, atol=1e-13)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 0.95), st.floats(0.0, 2 * np.pi))
def test_christoffel_is_symmetric_in_lower_indices(r, t):
    a, b = r * np.cos(t), r * np.sin(t)
    spec = MetricSpec(Domain(1.0, 0.9, 2), (Bump((0.1, 0.2), 0.3, -0.2, True),
                                            Bump((-0.2, 0.1), 0.35, [[0.2, 0.05], [0.05, -0.1]], False)))
    G = christoffel(spec, np.array([[a, b]])).gamma[0]
    assert np.allclose(G, np.transpose(G, (0, 2, 1)), atol=1e-14)


@settings(max_examples=25, deadline=None)
@given(st.floats(0.0, 1.0), st.floats(0.0, 2 * np.pi))
def test_metric_is_symmetric_positive(r, t):
    a, b = r * np.cos(t), r * np.sin(t)
    spec = MetricSpec(Domain(1.0, 0.9, 2), (Bump((-0.2, 0.1), 0.35, [[0.2, 0.05], [0.05, -0.1]], False),))
    g = eval_metric(spec, np.array([[a, b]]), order=0)[0][0]
    assert np.allclose(g, g.T) and np.linalg.eigvalsh(g).min() > 0


def test_negative_metric_rejected():
    spec = MetricSpec(Domain(1.0, 0.9, 2), (Bump((0.0, 0.0), 0.3, -2.0, True),))
    with pytest.raises(ValueError):
        spec.check_positive()


def test_perturbed_adds_scaled_field(bump_spec, test_field):
    x = np.array([[0.1, 0.1], [-0.3, -0.2]])
    g0 = eval_metric(bump_spec, x, 0)[0]
    g1 = eval_metric(perturbed(bump_spec, test_field, 0.01), x, 0)[0]
    assert np.allclose(g1 - g0, 0.01 * test_field.evaluate(x, 0)[0], atol=1e-15)


def test_bump_tensor_derivative_matches_finite_differences(test_field):
    x = np.array([[0.15, -0.05]])
    f, df, _ = test_field.evaluate(x, 1)
    h = 1e-6
    for m in range(2):
        e = np.zeros(2)
        e[m] = h
        fd = (test_field.evaluate(x + e, 0)[0] - test_field.evaluate(x - e, 0)[0]) / (2 * h)
        assert np.abs(fd - df[..., m]).max() < 1e-8


def test_domain_validation():
    with pytest.raises(ValueError):
        Domain(1.0, 1.2, 2)
