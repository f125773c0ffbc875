import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import solve_ivp

from lensxray.geodesic_flow import (PhasePoint, chord_entries, exit_parameter, flow, flow_batch, kappa, kappa_batch,
                                    trace, trace_batch, transport_derivative_check, verify_flow_scatter_batch)
from lensxray.metric_model import Domain, christoffel, eval_metric, euclidean
from lensxray.xray_transform import random_entries


def ivp_flow(spec, x, xi, T):
    """Independent route: scipy's DOP853 on the geodesic equation."""
    d = len(x)

    def rhs(_, y):
        G = christoffel(spec, y[:d][None], check_domain=False).gamma[0]
        return np.concatenate([y[d:], -np.einsum("kij,i,j->k", G, y[d:], y[d:])])

    sol = solve_ivp(rhs, (0, T), np.concatenate([x, xi]), method="DOP853", rtol=1e-12, atol=1e-12)
    return sol.y[:, -1]


def test_euclidean_chords_exact():
    R = 1.0
    beta = np.linspace(0, 2 * np.pi, 13)
    b = np.linspace(-0.95, 0.95, 13)
    X0, Xi0 = chord_entries(R, beta, b)
    rec = trace_batch(euclidean(), X0, Xi0, 3.0, times=[3.0], transport=False)
    assert np.abs(rec.exit_time - 2 * np.sqrt(R * R - b * b)).max() < 1e-12


def test_flow_matches_independent_integrator(bump_spec):
    X0, Xi0 = random_entries(1.0, 2, 6, rng=3)
    st_, _, _, _ = flow_batch(bump_spec, X0, Xi0, [1.5])
    for i in range(len(X0)):
        ref = ivp_flow(bump_spec, X0[i], Xi0[i], 1.5)
        assert np.abs(st_[i, 0] - ref).max() < 1e-8


def test_speed_is_conserved(bump_spec):
    X0, Xi0 = random_entries(1.0, 2, 16, rng=4)
    times = np.linspace(0, 2.0, 9)
    st_, _, _, _ = flow_batch(bump_spec, X0, Xi0, times, tol=1e-12)
    x = st_[..., :2].reshape(-1, 2)
    v = st_[..., 2:].reshape(-1, 2)
    g = eval_metric(bump_spec, x, 0, check_domain=False)[0]
    e = np.einsum("ni,nij,nj->n", v, g, v).reshape(16, -1)
    assert np.abs(e - e[:, :1]).max() < 1e-9


@settings(max_examples=15, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0.0, 0.6), st.floats(0, 2 * np.pi), st.floats(0.2, 1.5))
def test_flow_is_reversible(th, r, a, t):
    from lensxray.metric_model import Bump, MetricSpec
    spec = MetricSpec(Domain(1.0, 0.9, 2), (Bump((0.1, 0.2), 0.3, -0.2, True),))
    p = PhasePoint(np.array([r * np.cos(th), r * np.sin(th)]), np.array([np.cos(a), np.sin(a)]))
    q = flow(spec, flow(spec, p, t), -t)
    assert np.abs(q.as_array() - p.as_array()).max() < 1e-8


def test_transport_matches_difference_quotients(bump_spec):
    X0, Xi0 = random_entries(1.0, 2, 4, rng=5)
    eps, err = transport_derivative_check(bump_spec, X0, Xi0, 3.0, rng=0)
    s = np.polyfit(np.log(eps), np.log(err), 1)[0]
    assert abs(s - 1.0) < 0.1
    assert err[-1] < 1e-5


def test_transport_is_identity_at_zero_and_symplectic(bump_spec):
    X0, Xi0 = random_entries(1.0, 2, 4, rng=6)
    _, Psi, _, _ = flow_batch(bump_spec, X0, Xi0, [0.0, 1.0, 2.0], transport=True)
    assert np.allclose(Psi[:, 0], np.eye(4))
    # the geodesic flow preserves phase volume: det Psi = 1 in (x, velocity) variables for the
    # Euclidean metric, and is strictly positive in general
    assert np.all(np.linalg.det(Psi[:, 1:]) > 0)


def test_boundary_identities(bump_spec):
    X0, Xi0 = random_entries(1.0, 2, 32, rng=7)
    res, rec = verify_flow_scatter_batch(bump_spec, X0, Xi0, 3.0)
    assert not rec.trapped.any()
    assert np.nanmax(res) < 1e-7


def test_kappa_scalar_and_batch_agree():
    dom = Domain(1.0, 0.9, 2)
    Z = np.array([[2.0, 0.0, 1.0, 0.0], [0.3, 0.1, 0.0, 1.0], [3.0, 3.0, 1.0, 0.0]])
    kb = kappa_batch(dom, Z)
    for z, k in zip(Z, kb):
        ks = kappa(dom, PhasePoint(z[:2], z[2:]))
        assert (ks is None and np.isnan(k)) or abs(ks - k) < 1e-14
    assert abs(kb[0] - 1.0) < 1e-14


def test_exit_parameter_closed_form():
    tau = exit_parameter(np.array([[0.0, 0.0]]), np.array([[2.0, 0.0]]), 1.0)
    assert abs(tau[0] - 0.5) < 1e-15


def test_single_trace_record(bump_spec):
    rec = trace(bump_spec, PhasePoint(np.array([-1.0, 0.0]), np.array([1.0, 0.0])), 3.0)
    assert rec.transport.shape[1:] == (4, 4)
    assert 1.5 < rec.exit_time < 2.5
    assert rec.rows().shape[1] == 1 + 4 + 16
