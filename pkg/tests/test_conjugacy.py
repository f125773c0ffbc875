import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from lensxray.conjugacy import (classify_fold, completeness_test, det_dexp, dexp, exp_map, find_conjugate,
                                jacobi_report, sphere_sample, strong_fold_regular_test)
from lensxray.metric_model import eval_metric, euclidean

X_FOCUS = np.array([-0.6, 0.0])
U_FOCUS = np.array([np.cos(0.1), np.sin(0.1)])
# frozen from the brent-refined scan; checked below against finite differences of exp
T_STAR = 1.6752241521401205


def fd_dexp(spec, x, xi, h=1e-6):
    d = len(xi)
    cols = []
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        cols.append((exp_map(spec, x, xi + e)[0] - exp_map(spec, x, xi - e)[0]) / (2 * h))
    return np.column_stack(cols)


@settings(max_examples=20, deadline=None)
@given(st.floats(0, 2 * np.pi), st.floats(0.05, 1.2))
def test_euclidean_exponential_is_translation(a, r):
    spec = euclidean(2)
    x = np.array([-0.2, 0.1])
    xi = r * np.array([np.cos(a), np.sin(a)])
    assert np.allclose(exp_map(spec, x, xi)[0], x + xi, atol=1e-12)
    assert np.allclose(dexp(spec, x, xi), np.eye(2), atol=1e-10)


def test_dexp_matches_finite_differences(bump_spec):
    x = np.array([-0.3, 0.05])
    xi = np.array([0.9, 0.3])
    assert np.abs(dexp(bump_spec, x, xi) - fd_dexp(bump_spec, x, xi)).max() < 1e-7


def test_euclidean_has_no_conjugate_points():
    spec = euclidean(2)
    for u in sphere_sample(2, 8):
        assert find_conjugate(spec, np.array([0.2, -0.1]), u, 2.0) == []


def g_unit(spec, x, u):
    g = eval_metric(spec, x[None], order=0)[0][0]
    return u / np.sqrt(u @ g @ u)


def test_focusing_conjugate_radius(focusing_spec):
    radii = find_conjugate(focusing_spec, X_FOCUS, U_FOCUS, 2.0)
    assert len(radii) == 1 and abs(radii[0] - T_STAR) < 1e-7
    # independent route: determinant of the finite-difference Jacobian of exp changes sign
    u = g_unit(focusing_spec, X_FOCUS, U_FOCUS)
    lo = np.linalg.det(fd_dexp(focusing_spec, X_FOCUS, (T_STAR - 0.02) * u))
    hi = np.linalg.det(fd_dexp(focusing_spec, X_FOCUS, (T_STAR + 0.02) * u))
    assert lo * hi < 0
    assert abs(det_dexp(focusing_spec, X_FOCUS, T_STAR * u)) < 1e-6


def test_focusing_conjugate_is_fold(focusing_spec):
    xi = T_STAR * g_unit(focusing_spec, X_FOCUS, U_FOCUS)
    fr = classify_fold(focusing_spec, X_FOCUS, xi)
    assert fr.is_fold and fr.classification == "fold"
    sr = strong_fold_regular_test(focusing_spec, X_FOCUS, xi)
    assert sr.full_rank
    rep = jacobi_report(focusing_spec, X_FOCUS, U_FOCUS, 2.0)
    assert rep.rows()[0]["classification"] == "fold"


@pytest.mark.parametrize("d,n", [(2, 16), (3, 200)])
def test_sphere_sample_unit(d, n):
    s = sphere_sample(d, n)
    assert s.shape == (n, d)
    assert np.allclose(np.linalg.norm(s, axis=1), 1.0)
    if d == 3:
        assert abs(s.mean(axis=0)).max() < 0.02


def test_completeness_measure():
    spec = euclidean(2)
    x = np.array([0.2, 0.1])
    rep = completeness_test(spec, x, sphere_sample(2, 8))
    # worst xi sits halfway between two of the 8 equispaced directions: sin(pi/16)
    assert abs(rep.max_min - np.sin(np.pi / 16)) < 1e-3
    assert rep.conjugate_free and rep.transverse


def test_symmetric_lens_axial_ray_is_not_a_fold():
    # rotational symmetry about the axis: two singular values vanish together and
    # det d exp touches zero without changing sign
    from lensxray.metric_model import Bump, Domain, MetricSpec
    spec = MetricSpec(Domain(1.0, 0.9, 3), (Bump((0.0, 0.0, 0.0), 0.25, 3.0, True),))
    x = np.array([-0.6, 0.0, 0.0])
    u = g_unit(spec, x, np.array([1.0, 0.0, 0.0]))
    scan = find_conjugate(spec, x, u, 2.0, scan=True)
    assert scan.radii == [] and len(scan.degenerate) == 1
    fr = classify_fold(spec, x, scan.degenerate[0] * u)
    assert not fr.is_fold and fr.classification == "degenerate"
    assert abs(fr.singular_values[1] - fr.singular_values[2]) < 1e-8
