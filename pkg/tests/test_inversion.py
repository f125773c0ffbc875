import numpy as np
import pytest

from lensxray.inversion import (assemble_forward, conjugate_residual, linearization_suite,
                                normal_matrix, reconstruct, sample_truth)
from lensxray.metric_model import BumpTensorField
from lensxray.tensor_fields import GridSpec, SymTensorField
from lensxray.xray_transform import boundary_fan, quadrant_bundles, random_entries, transform_X_batch


@pytest.fixture(scope="module")
def small(bump_spec):
    grid = GridSpec(bump_spec.domain, 33)
    rays = boundary_fan(1.0, 16, 8)
    return assemble_forward(bump_spec, grid, rays, quadrant_bundles(4), 3.0, 256)


def test_zero_field_maps_to_zero(small):
    g = small.grid
    z = SymTensorField(g, np.zeros((g.n**2, 2, 2)))
    assert not np.any(small.apply(z))


def test_assembled_matches_matrix_free(small, test_field):
    f, _ = sample_truth(small.spec, small.grid, test_field)
    a = small.apply(f)
    b = small.apply_matrix_free(f)
    assert np.abs(a - b).max() <= 1e-12 * np.abs(a).max()


def test_assembled_converges_to_analytic_transform(bump_spec, test_field):
    rays = boundary_fan(1.0, 12, 6)
    ref = transform_X_batch(bump_spec, test_field, rays.X0, rays.Xi0, 3.0, quad_n=1024)
    errs = []
    for n in (33, 65):
        S = assemble_forward(bump_spec, GridSpec(bump_spec.domain, n), rays, None, 3.0, 512)
        f, _ = sample_truth(bump_spec, S.grid, test_field)
        errs.append(np.abs(S.apply(f) - ref).max() / np.abs(ref).max())
    assert 1.6 < np.log2(errs[0] / errs[1]) < 2.5


def test_normal_matrix_symmetric_psd(small):
    N = normal_matrix(small)
    assert np.abs(N - N.T).max() <= 1e-12 * np.abs(N).max()
    assert np.linalg.eigvalsh(N).min() > -1e-10 * np.abs(N).max()


def test_potential_residual_recorded_and_small(small):
    assert 0 < small.potential_residual < 0.05


def test_zero_data_reconstructs_zero(small):
    r = reconstruct(small, np.zeros((len(small.rays), 4)))
    assert not np.any(r.field.values) and r.converged and r.iterations == 0


def test_reconstruction_residuals_monotone_and_linear(small, test_field):
    f, fs = sample_truth(small.spec, small.grid, test_field)
    data = small.apply(f)
    r1 = reconstruct(small, data, reg=1e-4, iters=300, tol=1e-10, truth=fs)
    r2 = reconstruct(small, 2.0 * data, reg=1e-4, iters=300, tol=1e-10)
    assert np.all(np.diff(r1.residual_history) <= 1e-12 * r1.residual_history[0])
    assert r1.relative_error is not None and np.isfinite(r1.relative_error)
    assert np.abs(r2.raw.values - 2 * r1.raw.values).max() < 1e-6 * np.abs(r1.raw.values).max()


def test_reconstruct_rejects_wrong_shape(small):
    with pytest.raises(ValueError):
        reconstruct(small, np.zeros((3, 4)))


def test_conjugate_residual_against_direct_solve(rng):
    B = rng.normal(size=(30, 30))
    A = B @ B.T + 30 * np.eye(30)
    b = rng.normal(size=30)
    x, hist, ok = conjugate_residual(lambda u: A @ u, b, tol=1e-12, maxiter=200)
    assert ok
    assert np.allclose(x, np.linalg.solve(A, b), rtol=1e-9, atol=1e-11)
    assert np.all(np.diff(hist) <= 0)


def test_linearization_rejects_tiny_eps(bump_spec, test_field):
    X0, Xi0 = random_entries(1.0, 2, 2, rng=0)
    with pytest.raises(ValueError):
        linearization_suite(bump_spec, test_field, [1e-2, 1e-4], X0, Xi0)


def test_linearization_of_zero_field_is_exact(bump_spec):
    X0, Xi0 = random_entries(1.0, 2, 2, rng=0)
    rep = linearization_suite(bump_spec, BumpTensorField(2, (), 0.8), [1e-1, 1e-2], X0, Xi0)
    assert rep.exact and rep.slopes["christoffel"] is None
