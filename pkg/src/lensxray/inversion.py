"""Discrete X-ray transform on grid tensors, linearized reconstruction and the
linearization-order harness.

The grid map is X = -J L_h: L_h evaluates (L f)^k_ij at every interior node
with centered differences, and J integrates Phi(s) iota(.)(xi, xi) along each
traced ray with multilinear interpolation and the trapezoidal rule.
"""
from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.sparse as sps

from .geodesic_flow import DEFAULT_TOL, Connection, flow_batch, trace_batch
from .metric_model import (BumpTensorField, MetricSpec, christoffel, christoffel_from_metric, eval_metric,
                     perturbed)
from .tensor_fields import (BumpCovectorField, GridSpec, sample_covector, SymTensorField, from_storage, grid_operators, solenoidal_project,
                      sym_index, sym_pairs, tensor_norm, to_storage)
from .xray_transform import (BoundaryData, ChristoffelPerturbation, CutoffAlpha, _ray_nodes, l_apply,
                   transform_X_batch)


class InversionError(RuntimeError):
    pass


@dataclass
class RayGeometry:
    """Live quadrature samples of every ray: positions, velocities and the
    weighted lower-right blocks W = w_q Psi(T) Psi(s_q)^{-1}[:, d:]."""

    ray: np.ndarray  # (S,) ray index per sample
    x: np.ndarray  # (S, d)
    xi: np.ndarray  # (S, d)
    W: np.ndarray  # (S, 2d, d)


@dataclass
class ForwardSystem:
    spec: MetricSpec
    rays: BoundaryData
    grid: GridSpec
    matrix: sps.csr_matrix  # (2d * rays, ns * interior)
    alpha: np.ndarray  # (rays,) combined cutoff weight sqrt(sum_j alpha_j^2)
    bundle_alpha: np.ndarray  # (bundles, rays)
    active: np.ndarray  # interior columns belonging to nodes in the support ball
    geometry: RayGeometry
    T: float
    quad_n: int
    potential_residual: float = float("nan")
    meta: dict = field(default_factory=dict)

    @property
    def d(self) -> int:
        return self.grid.d

    @property
    def row_weights(self) -> np.ndarray:
        return np.repeat(self.rays.weights, 2 * self.d)

    def apply(self, f: SymTensorField) -> np.ndarray:
        return (self.matrix @ f.interior_vector()).reshape(len(self.rays), 2 * self.d)

    def apply_matrix_free(self, f: SymTensorField) -> np.ndarray:
        return apply_matrix_free(self, f)

    def save(self, path):
        sp = self.matrix.tocsr()
        np.savez_compressed(path, data=sp.data, indices=sp.indices, indptr=sp.indptr, shape=sp.shape,
                            X0=self.rays.X0, Xi0=self.rays.Xi0, weights=self.rays.weights,
                            alpha=self.alpha, n=self.grid.n, T=self.T, quad_n=self.quad_n)


def l_matrix(spec: MetricSpec, grid: GridSpec) -> sps.csr_matrix:
    """Sparse L_h from interior storage (ns per node) to (L f)^k_p at interior
    nodes (d * ns per node, k major, p a symmetric pair)."""
    ops = grid_operators(spec, grid.n)
    d, ns, h, m = grid.d, ops.ns, grid.h, ops.m
    C = sym_index(d)
    pairs = sym_pairs(d)
    gi, G = ops.ginv, ops.gamma
    terms = []
    for a in range(d):
        coef = np.zeros((m, d * ns, ns))
        for k in range(d):
            for p, (i, j) in enumerate(pairs):
                r = k * ns + p
                for l in range(d):
                    w = 0.5 * gi[:, l, k]
                    if a == i:
                        coef[:, r, C[j, l]] += w
                    if a == j:
                        coef[:, r, C[i, l]] += w
                    if a == l:
                        coef[:, r, C[i, j]] -= w
        e = ops._unit(a)
        terms.append((e, coef / (2 * h)))
        terms.append((-e, -coef / (2 * h)))
    c0 = np.zeros((m, d * ns, ns))
    for k in range(d):
        for p, (i, j) in enumerate(pairs):
            for l in range(d):
                for q in range(d):
                    c0[:, k * ns + p, C[q, l]] -= gi[:, l, k] * G[:, q, i, j]
    terms.append((np.zeros(d, dtype=int), c0))
    return ops._stencil_matrix(terms, d * ns, ns)


def _active_columns(spec, grid):
    """Interior storage columns whose node lies in the support ball."""
    ns = grid.d * (grid.d + 1) // 2
    pts = grid.points[grid.interior]
    keep = np.linalg.norm(pts, axis=1) < spec.domain.inner_radius
    return np.flatnonzero(np.repeat(keep, ns))


def _cell_weights(grid: GridSpec, x):
    """Multilinear interpolation corners (S, 2^d) and weights."""
    R, h, n, d = grid.domain.radius, grid.h, grid.n, grid.d
    u = (x + R) / h
    i0 = np.clip(np.floor(u).astype(int), 0, n - 2)
    t = u - i0
    corners, weights = [], []
    for bits in range(2**d):
        off = np.array([(bits >> a) & 1 for a in range(d)])
        idx = i0 + off
        w = np.prod(np.where(off == 1, t, 1 - t), axis=1)
        corners.append(np.ravel_multi_index(idx.T, grid.shape))
        weights.append(w)
    return np.stack(corners, 1), np.stack(weights, 1)


def trace_geometry(spec, rays: BoundaryData, T, quad_n, grid: GridSpec, tol=DEFAULT_TOL, chunk=256,
                   margin=None) -> RayGeometry:
    """Trace the rays and keep the samples where L f can be nonzero."""
    d = grid.d
    s, w = _ray_nodes(T, quad_n)
    reach = spec.domain.inner_radius + 2 * grid.h if margin is None else margin
    parts = []
    for a in range(0, len(rays), chunk):
        sl = slice(a, min(len(rays), a + chunk))
        rec = trace_batch(spec, rays.X0[sl], rays.Xi0[sl], T, times=s, tol=tol, transport=True, margin=0.0)
        if rec.trapped.any():
            raise InversionError("trapped ray during assembly")
        if np.any(rec.exit_time > T):
            raise InversionError("horizon T shorter than a ray")
        st = rec.states
        live = np.linalg.norm(st[..., :d], axis=-1) < reach
        ri, qi = np.nonzero(live)
        Psi = rec.transport
        blocks = np.linalg.solve(Psi[ri, qi], np.broadcast_to(np.eye(2 * d)[:, d:], (len(ri), 2 * d, d)))
        Wq = np.matmul(Psi[ri, -1], blocks) * w[qi][:, None, None]
        parts.append((ri + a, st[ri, qi, :d], st[ri, qi, d:], Wq))
    cat = [np.concatenate([p[k] for p in parts]) for k in range(4)]
    return RayGeometry(*cat)


def j_matrix(grid: GridSpec, geo: RayGeometry, n_rays: int, chunk=200000) -> sps.csr_matrix:
    """Sparse J from the interior node field (L f)^k_p to ray data (2d per ray)."""
    d = grid.d
    ns = d * (d + 1) // 2
    pairs = sym_pairs(d)
    lookup = -np.ones(grid.n**d, dtype=int)
    lookup[grid.interior] = np.arange(len(grid.interior))
    mult = np.array([1.0 if i == j else 2.0 for i, j in pairs])
    ncol = len(grid.interior) * d * ns
    out = sps.csr_matrix((n_rays * 2 * d, ncol))
    for a in range(0, len(geo.ray), chunk):
        sl = slice(a, a + chunk)
        xi = geo.xi[sl]
        e = np.stack([xi[:, i] * xi[:, j] for i, j in pairs], 1) * mult  # (S, ns)
        corners, cw = _cell_weights(grid, geo.x[sl])
        node = lookup[corners]
        # value[s, c, row a, k, p] = cw * W[a, k] * e[p]
        v = np.einsum("sc,sak,sp->scakp", cw, geo.W[sl], e)
        rows = geo.ray[sl][:, None, None, None, None] * 2 * d + np.arange(2 * d)[None, None, :, None, None]
        cols = (node[:, :, None, None, None] * d * ns + np.arange(d)[None, None, None, :, None] * ns
                + np.arange(ns)[None, None, None, None, :])
        rows, cols = np.broadcast_arrays(rows, cols, v)[:2]
        ok = (np.broadcast_to(node[:, :, None, None, None], v.shape) >= 0) & (v != 0)
        out = out + sps.csr_matrix((v[ok], (rows[ok], cols[ok])), shape=out.shape)
    return out


def assemble_forward(spec: MetricSpec, grid: GridSpec, rays: BoundaryData, alpha=None, T: float = 3.0,
                     quad_n: int = 256, tol=DEFAULT_TOL) -> ForwardSystem:
    """Assemble the ray-discretized transform.  ``alpha`` is a CutoffAlpha or a
    list of bundle cutoffs; rows of bundle j carry alpha_j and the system
    uses the combined weight sum_j alpha_j^2."""
    if spec.dim != grid.d:
        raise ValueError("grid and metric dimensions differ")
    t0 = time.perf_counter()
    bundles = [CutoffAlpha()] if alpha is None else (list(alpha) if isinstance(alpha, (list, tuple)) else [alpha])
    A = np.array([b(rays.X0, rays.Xi0) for b in bundles])
    comb = np.sqrt((A**2).sum(0))
    geo = trace_geometry(spec, rays, T, quad_n, grid, tol)
    J = j_matrix(grid, geo, len(rays))
    L = l_matrix(spec, grid)
    active = _active_columns(spec, grid)
    keep = np.zeros(L.shape[1])
    keep[active] = 1.0
    X = -(J @ L) @ sps.diags(keep)
    X = sps.diags(np.repeat(comb, 2 * grid.d)) @ X
    X = X.tocsr()
    X.eliminate_zeros()
    sysm = ForwardSystem(spec, rays, grid, X, comb, A, active, geo, float(T), int(quad_n),
                         meta={"interpolation": "multilinear", "bundles": len(bundles), "nnz": int(X.nnz)})
    sysm.potential_residual = potential_residual(sysm)
    sysm.meta["assembly_seconds"] = time.perf_counter() - t0
    return sysm


def gauge_covector(spec: MetricSpec) -> BumpCovectorField:
    """Fixed compactly supported covector used to record the gauge residual."""
    d = spec.dim
    r = spec.domain.inner_radius
    vec = (1.0, 0.5, -0.3)[:d]
    return BumpCovectorField(d, ((0.1 * r,) + (0.0,) * (d - 1),), (0.3 * r,), (vec,), 0.8 * r)


def potential_residual(system: ForwardSystem, v=None) -> float:
    """max |X d^s_h v| / max |v| for the discrete symmetric differential of a
    compactly supported covector; O(h^2) plus quadrature error."""
    v = gauge_covector(system.spec) if v is None else v
    grid = system.grid
    cv = sample_covector(grid, v)
    p = SymTensorField.from_interior(grid, grid_operators(system.spec, grid.n).dsym @ cv.interior_vector())
    return float(np.abs(system.apply(p)).max() / np.abs(cv.values).max())


def apply_matrix_free(system: ForwardSystem, f: SymTensorField) -> np.ndarray:
    """Independent path: L f from np.gradient on the full grid, then
    interpolation along the stored ray samples."""
    grid, spec, d = system.grid, system.spec, system.d
    vals = f.values.copy()
    keep = np.zeros(grid.n**d, dtype=bool)
    cols = system.active.reshape(-1)
    ns = d * (d + 1) // 2
    keep[grid.interior[np.unique(cols // ns)]] = True
    vals[~keep] = 0.0
    arr = vals.reshape(grid.shape + (d, d))
    grads = np.gradient(arr, grid.h, axis=tuple(range(d)), edge_order=1)
    df = np.stack(grads, -1).reshape(-1, d, d, d)
    pts = grid.points
    g, dg, _ = eval_metric(spec, pts, order=1, check_domain=False)
    G, _ = christoffel_from_metric(g, dg)
    lf = l_apply(g, G, vals, df)  # (nodes, k, i, j)
    mask = grid.mask != 0
    lf[mask] = 0.0
    geo = system.geometry
    corners, cw = _cell_weights(grid, geo.x)
    at = np.einsum("sc,sckij->skij", cw, lf[corners])
    contr = np.einsum("skij,si,sj->sk", at, geo.xi, geo.xi)
    per = np.einsum("sak,sk->sa", geo.W, contr)
    out = np.zeros((len(system.rays), 2 * d))
    np.add.at(out, geo.ray, per)
    return -system.alpha[:, None] * out


# ---------------------------------------------------------------------------
# reconstruction


@dataclass
class ReconstructionResult:
    field: SymTensorField  # solenoidal projection of the minimizer
    raw: SymTensorField  # minimizer before projection
    relative_error: float | None
    iterations: int
    reg: float
    residual_history: np.ndarray
    converged: bool
    seconds: float = 0.0
    h1_error: float | None = None


def conjugate_residual(apply_A, b, tol=1e-8, maxiter=500):
    """Conjugate residual iteration for symmetric positive definite A: a
    Krylov method of conjugate-gradient type whose residual norms are
    non-increasing.  Returns (x, history, converged)."""
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    Ar = apply_A(r)
    Ap = Ar.copy()
    rAr = r @ Ar
    bn = np.linalg.norm(b)
    hist = [np.linalg.norm(r)]
    if bn == 0:
        return x, np.array(hist), True
    for _ in range(maxiter):
        den = Ap @ Ap
        if den <= 0:
            break
        a = rAr / den
        x += a * p
        r -= a * Ap
        hist.append(np.linalg.norm(r))
        if hist[-1] > hist[-2] * (1 + 1e-10):
            raise InversionError(f"residual increased at iteration {len(hist) - 1}")
        if hist[-1] <= tol * bn:
            return x, np.array(hist), True
        Ar = apply_A(r)
        rAr_new = r @ Ar
        beta = rAr_new / rAr
        rAr = rAr_new
        p = r + beta * p
        Ap = Ar + beta * Ap
    return x, np.array(hist), hist[-1] <= tol * bn


def reconstruct(system: ForwardSystem, data: BoundaryData | np.ndarray, reg: float = 1e-4, iters: int = 500,
                tol: float = 1e-8, truth: SymTensorField | None = None) -> ReconstructionResult:
    """Minimize |X f - data|_W^2 + reg (|f|^2 + |delta^s f|^2) over fields
    supported on the active nodes, then project onto the solenoidal part.
    ``truth`` (already solenoidal) gives the relative L2 error."""
    t0 = time.perf_counter()
    vals = data.values if isinstance(data, BoundaryData) else np.asarray(data, dtype=float)
    if vals is None or vals.shape != (len(system.rays), 2 * system.d):
        raise ValueError("data dimensions do not match the forward system")
    grid = system.grid
    ops = grid_operators(system.spec, grid.n)
    cols = system.active
    Xa = system.matrix[:, cols].tocsr()
    XT = Xa.T.tocsr()
    Dm = ops.div[:, cols].tocsr()
    DT = Dm.T.tocsr()
    w = system.row_weights
    # scale the penalty with the data operator so reg is dimensionless
    scale = _normal_scale(Xa, w)

    def A(u):
        return XT @ (w * (Xa @ u)) + reg * scale * (u + DT @ (Dm @ u))

    b = XT @ (w * vals.ravel())
    u, hist, ok = conjugate_residual(A, b, tol=tol, maxiter=iters)
    full = np.zeros(system.matrix.shape[1])
    full[cols] = u
    raw = SymTensorField.from_interior(grid, full)
    fs, _ = solenoidal_project(system.spec, raw)
    err = h1 = None
    if truth is not None:
        tn = tensor_norm(system.spec, truth)
        err = tensor_norm(system.spec, fs - truth) / tn if tn > 0 else tensor_norm(system.spec, fs)
    return ReconstructionResult(fs, raw, err, len(hist) - 1, reg, hist, ok, time.perf_counter() - t0)


def _normal_scale(Xa, w, iters=30, seed=0):
    """Largest eigenvalue of X^T W X by power iteration (deterministic start)."""
    rng = np.random.default_rng(seed)
    u = rng.normal(size=Xa.shape[1])
    lam = 0.0
    for _ in range(iters):
        v = Xa.T @ (w * (Xa @ u))
        lam = np.linalg.norm(v)
        if lam == 0:
            return 1.0
        u = v / lam
    return lam


def normal_matrix(system: ForwardSystem) -> np.ndarray:
    """Dense X^T W X on the active columns (small grids only)."""
    Xa = system.matrix[:, system.active].toarray()
    return Xa.T @ (system.row_weights[:, None] * Xa)


# ---------------------------------------------------------------------------
# linearization orders


@dataclass
class SlopeReport:
    eps: np.ndarray
    christoffel: np.ndarray
    connection_flow: np.ndarray
    metric_flow: np.ndarray

    @staticmethod
    def fit(eps, res):
        res = np.asarray(res)
        if np.all(res == 0):
            return float("nan")
        return float(np.polyfit(np.log(eps), np.log(res), 1)[0])

    @property
    def slopes(self) -> dict:
        if self.exact:
            return {"christoffel": None, "connection_flow": None, "metric_flow": None}
        return {"christoffel": self.fit(self.eps, self.christoffel),
                "connection_flow": self.fit(self.eps, self.connection_flow),
                "metric_flow": self.fit(self.eps, self.metric_flow)}

    @property
    def exact(self) -> bool:
        return bool(np.all(self.christoffel == 0) and np.all(self.connection_flow == 0)
                    and np.all(self.metric_flow == 0))

    def rows(self):
        return np.column_stack([self.eps, self.christoffel, self.connection_flow, self.metric_flow])


def linearization_suite(spec: MetricSpec, f: BumpTensorField, eps_list, X0, Xi0, T: float = 3.0,
                        points=None, quad_n: int = 512, tol=DEFAULT_TOL, min_eps: float = 1e-3) -> SlopeReport:
    """Residuals of the three first-order expansions at each eps:
    Gamma(g + eps f) - Gamma(g) - eps L f (max over points),
    H^T(Gamma + eps L f) - H^T(Gamma) - eps X f and
    H^T(g + eps f) - H^T(g) - eps X f (max over rays)."""
    eps_list = np.asarray(sorted(eps_list, reverse=True), dtype=float)
    if np.any(eps_list < min_eps):
        raise ValueError(f"eps below {min_eps} hits the integration tolerance floor")
    d = spec.dim
    if points is None:
        r = spec.domain.inner_radius
        ax = np.linspace(-r, r, 15)
        P = np.stack(np.meshgrid(*[ax] * d, indexing="ij"), -1).reshape(-1, d)
        points = P[np.linalg.norm(P, axis=1) < r]
    for e in eps_list:
        perturbed(spec, f, e).check_positive()
    zero = not np.any(f._arrays[2]) if f.bumps else True
    n = len(eps_list)
    if zero:
        return SlopeReport(eps_list, np.zeros(n), np.zeros(n), np.zeros(n))
    G0 = christoffel(spec, points).gamma
    from .xray_transform import l_operator
    LF = l_operator(spec, f)(points)
    Xf = transform_X_batch(spec, f, X0, Xi0, T, quad_n, tol)
    base = flow_batch(spec, X0, Xi0, [T], tol)[0][:, 0]
    extra = ChristoffelPerturbation(spec, f)
    rc, rk, rm = [], [], []
    for e in eps_list:
        sp = perturbed(spec, f, e)
        G1 = christoffel(sp, points).gamma
        rc.append(np.abs(G1 - G0 - e * LF).max())
        conn = Connection(spec, extra=extra, eps=e, extra_radius=f.support_radius)
        st = flow_batch(conn, X0, Xi0, [T], tol)[0][:, 0]
        rk.append(np.abs(st - base - e * Xf).max())
        st = flow_batch(sp, X0, Xi0, [T], tol)[0][:, 0]
        rm.append(np.abs(st - base - e * Xf).max())
    return SlopeReport(eps_list, np.array(rc), np.array(rk), np.array(rm))


def sample_truth(spec: MetricSpec, grid: GridSpec, f) -> tuple[SymTensorField, SymTensorField]:
    """Sampled analytic field and its discrete solenoidal projection."""
    vals = f.evaluate(grid.points, 0)[0]
    vals[grid.mask != 0] = 0.0
    fs = SymTensorField(grid, vals, getattr(f, "support_radius", None))
    return fs, solenoidal_project(spec, fs)[0]
