import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.integrate import quad

from lensxray.geodesic_flow import trace
from lensxray.geodesic_flow import PhasePoint
from lensxray.metric_model import euclidean
from lensxray.xray_transform import (CutoffAlpha, boundary_fan, normal_M_fiber, parallel_beam, phi_by_ode,
                                     quadrant_bundles, random_entries, random_weighted_field, transform_I_batch,
                                     transform_X_batch, weight_phi)


class SumField:
    """a f1 + b f2 for analytic fields with evaluate(x, order)."""

    def __init__(self, f1, a, f2, b):
        self.f1, self.a, self.f2, self.b = f1, a, f2, b
        self.support_radius = max(f1.support_radius, f2.support_radius)

    def evaluate(self, x, order=1):
        u = self.f1.evaluate(x, order)
        v = self.f2.evaluate(x, order)
        return tuple(None if p is None else self.a * p + self.b * q for p, q in zip(u, v))


def euclid_oracle(f, x0, xi, T, h=1e-5):
    """-int [(T - t) w; w] dt with w^k = 1/2 (d_i f_jk + d_j f_ik - d_k f_ij) xi^i xi^j,
    derivatives by central differences and scipy's adaptive quadrature."""
    d = len(x0)

    def w(t):
        x = x0 + t * xi
        df = np.empty((d, d, d))
        for m in range(d):
            e = np.zeros(d)
            e[m] = h
            df[..., m] = (f.evaluate((x + e)[None], 0)[0][0] - f.evaluate((x - e)[None], 0)[0][0]) / (2 * h)
        L = 0.5 * (np.einsum("jki->kij", df) + np.einsum("ikj->kij", df) - np.einsum("ijk->kij", df))
        return np.einsum("kij,i,j->k", L, xi, xi)

    out = np.zeros(2 * d)
    for k in range(d):
        out[k] = -quad(lambda t: (T - t) * w(t)[k], 0, T, limit=200, epsabs=1e-12)[0]
        out[d + k] = -quad(lambda t: w(t)[k], 0, T, limit=200, epsabs=1e-12)[0]
    return out


def test_euclidean_transform_matches_line_integrals(test_field):
    spec = euclidean(2)
    X0, Xi0 = random_entries(1.0, 2, 4, rng=11)
    got = transform_X_batch(spec, test_field, X0, Xi0, 3.0, quad_n=1024)
    for i in range(4):
        ref = euclid_oracle(test_field, X0[i], Xi0[i], 3.0)
        assert np.abs(got[i] - ref).max() < 1e-5 * (1 + np.abs(ref).max())


def test_transform_is_linear(bump_spec, test_field):
    from lensxray.inversion import gauge_covector
    from lensxray.tensor_fields import PotentialField
    f2 = PotentialField(bump_spec, gauge_covector(bump_spec))
    X0, Xi0 = random_entries(1.0, 2, 6, rng=12)
    a, b = 0.7, -1.3
    lhs = transform_X_batch(bump_spec, SumField(test_field, a, f2, b), X0, Xi0, 3.0)
    rhs = a * transform_X_batch(bump_spec, test_field, X0, Xi0, 3.0) + b * transform_X_batch(bump_spec, f2, X0, Xi0, 3.0)
    assert np.abs(lhs - rhs).max() < 1e-12 * (1 + np.abs(rhs).max())


def test_zero_cutoff_gives_zero(bump_spec, test_field):
    X0, Xi0 = random_entries(1.0, 2, 3, rng=13)
    assert not np.any(transform_X_batch(bump_spec, test_field, X0, Xi0, 3.0, alpha=CutoffAlpha.zero()))


def test_weight_phi_matches_independent_ode(bump_spec):
    p = PhasePoint(np.array([-1.0, 0.05]), np.array([1.0, 0.1]) / np.hypot(1.0, 0.1))
    times = np.linspace(0, 3.0, 257)
    rec = trace(bump_spec, p, 3.0, times=times)
    ref = phi_by_ode(bump_spec, p.x, p.xi, times[[32, 128, 224]], 3.0)
    for t, r in zip(times[[32, 128, 224]], ref):
        assert np.abs(weight_phi(rec, t) - r).max() < 1e-8


@settings(max_examples=50)
@given(st.floats(0, 2 * np.pi), st.sampled_from([2, 3, 4, 6]))
def test_sector_partition_of_unity(theta, n):
    x = np.array([[np.cos(theta), np.sin(theta)]])
    xi = -x
    s = sum(a(x, xi)[0] ** 2 for a in quadrant_bundles(n))
    assert abs(s - 1.0) < 1e-12


def test_ray_set_weights_total_measure():
    # integral of |<nu, xi>| over the incoming boundary of the unit disk is 4 pi R
    R = 1.0
    assert abs(parallel_beam(R, 16, 16).weights.sum() - 4 * np.pi * R) < 1e-12
    fan = boundary_fan(R, 64, 128)
    # midpoint rule in psi sums to exactly 2 (D/2)/sin(D/2) with D = pi/n_angles
    half = 0.5 * np.pi / 128
    assert abs(fan.weights.sum() - 4 * np.pi * R * half / np.sin(half)) < 1e-11
    assert abs(fan.weights.sum() - 4 * np.pi * R) < 1e-3
    assert np.all(np.einsum("ni,ni->n", fan.X0, fan.Xi0) < 0)


def test_boundary_data_rejects_nonpositive_weights():
    b = parallel_beam(1.0, 4, 4)
    from lensxray.xray_transform import BoundaryData
    with pytest.raises(ValueError):
        BoundaryData(b.X0, b.Xi0, np.zeros(len(b)))


def test_normal_fiber_near_plus_far(bump_spec):
    Pi = random_weighted_field(2, 4, rng=3)
    X = np.array([[0.1, -0.2], [0.3, 0.2]])
    kw = dict(fiber_n=32, radial_n=48)
    full = normal_M_fiber(bump_spec, Pi, X, "all", **kw)
    parts = normal_M_fiber(bump_spec, Pi, X, "near", **kw) + normal_M_fiber(bump_spec, Pi, X, "far", **kw)
    assert np.abs(full - parts).max() < 1e-12 * (1 + np.abs(full).max())
    with pytest.raises(ValueError):
        normal_M_fiber(bump_spec, Pi, X, "middle", **kw)


def test_transform_I_scalar_component_is_line_integral():
    # m = d component field equal to delta^k_0 delta_ij: integral of |xi|^2 along a chord = length
    spec = euclidean(2)
    from lensxray.xray_transform import WeightedTensorField

    def fn(x):
        out = np.zeros((len(x), 2, 2, 2))
        out[:, 0] = np.eye(2)
        return out

    Pi = WeightedTensorField(2, 2, fn, 1.0)
    X0 = np.array([[-1.0, 0.0]])
    got = transform_I_batch(spec, Pi, X0, np.array([[1.0, 0.0]]), 3.0, quad_n=3001)
    assert abs(got[0, 0] - 2.0) < 2e-3


def _disk_nodes(h, r):
    ax = np.arange(-r + h / 2, r, h)
    P = np.stack(np.meshgrid(ax, ax, indexing="ij"), -1).reshape(-1, 2)
    P = P[np.linalg.norm(P, axis=1) < r]
    return P, np.full(len(P), h * h)


def test_l_adjoint_duality(bump_spec, test_field):
    # int <L f, u> = int <f, L^dagger u> in the weighted pairings; both sides by midpoint quadrature
    from lensxray.metric_model import eval_metric
    from lensxray.xray_transform import l_adjoint_point, l_operator
    P, w = _disk_nodes(0.025, 0.9)
    u = random_weighted_field(2, 2, rng=5, support_radius=0.7)
    g = eval_metric(bump_spec, P, order=0)[0]
    gi = np.linalg.inv(g)
    sq = np.sqrt(np.linalg.det(g))
    lhs = np.einsum("n,n,nkij,nia,njb,nkab->", w, sq, l_operator(bump_spec, test_field)(P), gi, gi, u(P))
    LU = np.array([l_adjoint_point(bump_spec, u, x) for x in P])
    rhs = np.einsum("n,n,nij,nia,njb,nab->", w, sq, test_field.evaluate(P, 0)[0], gi, gi, LU)
    assert abs(lhs - rhs) <= 1e-4 * max(abs(lhs), abs(rhs))


def test_normal_operator_symmetric(bump_spec):
    # <M Pi1, Pi2> = <Pi1, M Pi2>: the route to self-adjointness of N = (iota L)^dagger M (iota L)
    from lensxray.xray_transform import pair_on_M
    Pi1 = random_weighted_field(2, 4, rng=1)
    Pi2 = random_weighted_field(2, 4, rng=2)
    Q, w = _disk_nodes(0.1, 0.7)
    kw = dict(fiber_n=16, radial_n=32)
    a = pair_on_M(bump_spec, Q, w, Pi2(Q), normal_M_fiber(bump_spec, Pi1, Q, **kw))
    b = pair_on_M(bump_spec, Q, w, Pi1(Q), normal_M_fiber(bump_spec, Pi2, Q, **kw))
    assert abs(a - b) <= 1e-3 * max(abs(a), abs(b))
