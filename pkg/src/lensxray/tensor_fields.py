"""Symmetric 2-tensor calculus on a Cartesian grid clipped to the ball.

Fields live on the full ``n**d`` node array (row-major, ``indexing="ij"``)
and vanish at nodes outside the open ball.  Symmetric tensors are stored in
upper-triangular component order f11, f12, ..., f1d, f22, ...

The potential part of a field is found from v = (Delta^s)^{-1} delta^s f with
Dirichlet data on the staircase boundary.  The operator Delta^s = delta^s d^s
is expanded into second, first and zeroth order terms and discretized with
compact (3-point per axis, 3^d box for mixed terms) stencils; d^s and delta^s
themselves use centered differences.
"""
from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache
import itertools

import numpy as np
import scipy.sparse as sps
import scipy.sparse.linalg as spl

from .metric_model import (MetricSpec, Domain, BumpTensorField, bump_profiles, eval_metric,
                     christoffel_from_metric)


def sym_pairs(d: int):
    return [(i, j) for i in range(d) for j in range(i, d)]


def sym_index(d: int) -> np.ndarray:
    """Matrix C with C[i, j] = storage position of component (i, j)."""
    C = np.zeros((d, d), dtype=int)
    for c, (i, j) in enumerate(sym_pairs(d)):
        C[i, j] = C[j, i] = c
    return C


def to_storage(f):
    """(..., d, d) symmetric matrices -> (..., d(d+1)/2)."""
    d = f.shape[-1]
    return np.stack([f[..., i, j] for i, j in sym_pairs(d)], axis=-1)


def from_storage(F, d):
    out = np.empty(F.shape[:-1] + (d, d))
    for c, (i, j) in enumerate(sym_pairs(d)):
        out[..., i, j] = F[..., c]
        out[..., j, i] = F[..., c]
    return out


@dataclass(frozen=True)
class GridSpec:
    """Regular grid with n nodes per axis covering [-R, R]^d."""

    domain: Domain
    n: int

    @property
    def d(self) -> int:
        return self.domain.dimension

    @property
    def h(self) -> float:
        return 2.0 * self.domain.radius / (self.n - 1)

    @property
    def shape(self):
        return (self.n,) * self.d

    @property
    def axis(self) -> np.ndarray:
        R = self.domain.radius
        return np.linspace(-R, R, self.n)

    @property
    def points(self) -> np.ndarray:
        ax = [self.axis] * self.d
        return np.stack(np.meshgrid(*ax, indexing="ij"), -1).reshape(-1, self.d)

    @property
    def mask(self) -> np.ndarray:
        """Classification per node: 0 interior, 1 boundary, 2 exterior."""
        R = self.domain.radius
        r = np.linalg.norm(self.points, axis=1)
        tol = 1e-12 * R
        return np.where(r < R - tol, 0, np.where(r <= R + tol, 1, 2))

    @property
    def interior(self) -> np.ndarray:
        return np.flatnonzero(self.mask == 0)


@dataclass
class SymTensorField:
    grid: GridSpec
    values: np.ndarray  # (n**d, d, d)
    support_radius: float | None = None

    def storage(self) -> np.ndarray:
        return to_storage(self.values)

    def interior_vector(self) -> np.ndarray:
        return to_storage(self.values[self.grid.interior]).ravel()

    @staticmethod
    def from_interior(grid: GridSpec, vec, support_radius=None) -> "SymTensorField":
        d = grid.d
        vals = np.zeros((grid.n**d, d, d))
        vals[grid.interior] = from_storage(np.asarray(vec).reshape(len(grid.interior), -1), d)
        return SymTensorField(grid, vals, support_radius)

    def __add__(self, other):
        return SymTensorField(self.grid, self.values + other.values)

    def __sub__(self, other):
        return SymTensorField(self.grid, self.values - other.values)

    def scaled(self, c):
        return SymTensorField(self.grid, c * self.values, self.support_radius)


@dataclass
class CovectorField:
    grid: GridSpec
    values: np.ndarray  # (n**d, d)
    dirichlet: bool = True

    def interior_vector(self) -> np.ndarray:
        return self.values[self.grid.interior].ravel()

    @staticmethod
    def from_interior(grid: GridSpec, vec) -> "CovectorField":
        vals = np.zeros((grid.n**grid.d, grid.d))
        vals[grid.interior] = np.asarray(vec).reshape(len(grid.interior), grid.d)
        return CovectorField(grid, vals)


# ---------------------------------------------------------------------------
# analytic fields


@dataclass(frozen=True)
class BumpCovectorField:
    """Analytic covector field sum_b c_b chi(x) G_b(x), compactly supported."""

    dim: int
    centers: tuple
    widths: tuple
    vectors: tuple
    support_radius: float
    steepness: float = 1.0

    def evaluate(self, x, order: int = 1):
        """v (N, d), dv[..., j, m] = d_m v_j, ddv[..., j, m, k]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        P, dP, ddP = bump_profiles(x, np.asarray(self.centers).reshape(-1, self.dim), self.widths,
                                   self.support_radius, self.steepness, order)
        C = np.asarray(self.vectors, dtype=float).reshape(-1, self.dim)
        v = P @ C
        dv = np.einsum("nbm,bj->njm", dP, C) if order >= 1 else None
        ddv = np.einsum("nbmk,bj->njmk", ddP, C) if order >= 2 else None
        return v, dv, ddv


@dataclass(frozen=True)
class PotentialField:
    """Analytic symmetric differential d^s v of an analytic covector field."""

    spec: MetricSpec
    v: BumpCovectorField

    @property
    def support_radius(self) -> float:
        return self.v.support_radius

    def evaluate(self, x, order: int = 1):
        x = np.atleast_2d(np.asarray(x, dtype=float))
        v, dv, ddv = self.v.evaluate(x, order + 1)
        g, dg, ddg = eval_metric(self.spec, x, order=2, check_domain=False)
        G, dG = christoffel_from_metric(g, dg, ddg)
        f = 0.5 * (dv + np.swapaxes(dv, 1, 2)) - np.einsum("nkij,nk->nij", G, v)
        if order == 0:
            return f, None, None
        sym = 0.5 * (np.einsum("njim->nijm", ddv) + ddv)
        df = sym - np.einsum("nkijm,nk->nijm", dG, v) - np.einsum("nkij,nkm->nijm", G, dv)
        return f, df, None


def sample(grid: GridSpec, field_obj, support_radius=None) -> SymTensorField:
    """Sample an analytic symmetric field at the interior grid nodes."""
    d = grid.d
    vals = np.zeros((grid.n**d, d, d))
    I = grid.interior
    vals[I] = field_obj.evaluate(grid.points[I], 0)[0]
    sr = support_radius if support_radius is not None else getattr(field_obj, "support_radius", None)
    return SymTensorField(grid, vals, sr)


def sample_covector(grid: GridSpec, field_obj) -> CovectorField:
    vals = np.zeros((grid.n**grid.d, grid.d))
    I = grid.interior
    vals[I] = field_obj.evaluate(grid.points[I], 0)[0]
    return CovectorField(grid, vals)


# ---------------------------------------------------------------------------
# discrete operators


class GridOperators:
    """Sparse operators on interior degrees of freedom for one (spec, grid)."""

    def __init__(self, spec: MetricSpec, grid: GridSpec):
        if spec.dim != grid.d or spec.domain != grid.domain:
            raise ValueError("grid and metric disagree on the domain")
        self.spec = spec
        self.grid = grid
        d = grid.d
        self.d = d
        self.ns = d * (d + 1) // 2
        I = grid.interior
        self.m = len(I)
        self.X = grid.points[I]
        g, dg, ddg = eval_metric(spec, self.X, order=2)
        self.g = g
        self.ginv = np.linalg.inv(g)
        self.sqrtg = np.sqrt(np.linalg.det(g))
        self.gamma, self.dgamma = christoffel_from_metric(g, dg, ddg)
        lookup = -np.ones(grid.n**d, dtype=int)
        lookup[I] = np.arange(self.m)
        self._lookup = lookup
        self._ij = np.stack(np.unravel_index(I, grid.shape), 1)
        self._lu = None

    # neighbour index in the interior list, -1 if not interior
    def neighbor(self, offset) -> np.ndarray:
        q = self._ij + np.asarray(offset, dtype=int)
        ok = np.all((q >= 0) & (q < self.grid.n), axis=1)
        out = -np.ones(self.m, dtype=int)
        out[ok] = self._lookup[np.ravel_multi_index(q[ok].T, self.grid.shape)]
        return out

    def _stencil_matrix(self, terms, n_out, n_in):
        """terms: list of (offset, coef) with coef of shape (m, n_out, n_in)."""
        rows, cols, vals = [], [], []
        base = np.arange(self.m)
        for off, coef in terms:
            j = self.neighbor(off)
            ok = j >= 0
            if not ok.any():
                continue
            r = base[ok][:, None, None] * n_out + np.arange(n_out)[None, :, None]
            c = j[ok][:, None, None] * n_in + np.arange(n_in)[None, None, :]
            v = coef[ok]
            r, c, v = np.broadcast_arrays(r, c, v)
            nz = v != 0
            rows.append(r[nz])
            cols.append(c[nz])
            vals.append(v[nz])
        if not rows:
            return sps.csr_matrix((self.m * n_out, self.m * n_in))
        return sps.csr_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                              shape=(self.m * n_out, self.m * n_in))

    def _unit(self, a, s=1):
        e = np.zeros(self.d, dtype=int)
        e[a] = s
        return e

    @property
    def dsym(self) -> sps.csr_matrix:
        """[d^s v]_ij = 1/2 (d_i v_j + d_j v_i) - Gamma^k_ij v_k."""
        if not hasattr(self, "_dsym"):
            d, ns, h = self.d, self.ns, self.grid.h
            pairs = sym_pairs(d)
            terms = []
            for a in range(d):
                coef = np.zeros((self.m, ns, d))
                for c, (i, j) in enumerate(pairs):
                    if i == a:
                        coef[:, c, j] += 0.5
                    if j == a:
                        coef[:, c, i] += 0.5
                terms.append((self._unit(a, 1), coef / (2 * h)))
                terms.append((self._unit(a, -1), -coef / (2 * h)))
            c0 = np.zeros((self.m, ns, d))
            for c, (i, j) in enumerate(pairs):
                c0[:, c, :] = -self.gamma[:, :, i, j]
            terms.append((np.zeros(d, dtype=int), c0))
            self._dsym = self._stencil_matrix(terms, ns, d)
        return self._dsym

    @property
    def div(self) -> sps.csr_matrix:
        """[delta^s f]_i = g^{jk}(d_k f_ij - Gamma^l_ki f_lj - Gamma^l_kj f_il)."""
        if not hasattr(self, "_div"):
            d, ns, h = self.d, self.ns, self.grid.h
            C = sym_index(d)
            gi, G = self.ginv, self.gamma
            terms = []
            for k in range(d):
                coef = np.zeros((self.m, d, ns))
                for i in range(d):
                    for j in range(d):
                        coef[:, i, C[i, j]] += gi[:, j, k]
                terms.append((self._unit(k, 1), coef / (2 * h)))
                terms.append((self._unit(k, -1), -coef / (2 * h)))
            c0 = np.zeros((self.m, d, ns))
            for i in range(d):
                for j in range(d):
                    for k in range(d):
                        for l in range(d):
                            c0[:, i, C[l, j]] -= gi[:, j, k] * G[:, l, k, i]
                            c0[:, i, C[i, l]] -= gi[:, j, k] * G[:, l, k, j]
            terms.append((np.zeros(d, dtype=int), c0))
            self._div = self._stencil_matrix(terms, d, ns)
        return self._div

    def laplacian_coefficients(self):
        """Coefficients of Delta^s v = delta^s d^s v written as
        C2[i,l,a,b] d_a d_b v_l + C1[i,l,a] d_a v_l + C0[i,l] v_l."""
        d, m = self.d, self.m
        gi, G, dG = self.ginv, self.gamma, self.dgamma
        C2 = np.zeros((m, d, d, d, d))
        C1 = np.zeros((m, d, d, d))
        C0 = np.zeros((m, d, d))
        for i, j, k in itertools.product(range(d), repeat=3):
            w = gi[:, j, k]
            C2[:, i, j, k, i] += 0.5 * w
            C2[:, i, i, k, j] += 0.5 * w
            for l in range(d):
                C1[:, i, l, k] -= w * G[:, l, i, j]
                C1[:, i, j, l] -= 0.5 * w * G[:, l, k, i]
                C1[:, i, l, j] -= 0.5 * w * G[:, l, k, i]
                C1[:, i, l, i] -= 0.5 * w * G[:, l, k, j]
                C1[:, i, i, l] -= 0.5 * w * G[:, l, k, j]
                C0[:, i, l] -= w * dG[:, l, i, j, k]
                for q in range(d):
                    C0[:, i, q] += w * (G[:, l, k, i] * G[:, q, l, j] + G[:, l, k, j] * G[:, q, i, l])
        return C2, C1, C0

    @property
    def laplacian(self) -> sps.csr_matrix:
        """Compact-stencil discretization of Delta^s with zero Dirichlet data."""
        if not hasattr(self, "_lap"):
            d, h = self.d, self.grid.h
            C2, C1, C0 = self.laplacian_coefficients()
            zero = np.zeros(d, dtype=int)
            terms = [(zero, C0)]
            for a in range(d):
                ea = self._unit(a)
                terms.append((ea, C2[:, :, :, a, a] / h**2 + C1[:, :, :, a] / (2 * h)))
                terms.append((-ea, C2[:, :, :, a, a] / h**2 - C1[:, :, :, a] / (2 * h)))
                terms.append((zero, -2.0 * C2[:, :, :, a, a] / h**2))
                for b in range(a + 1, d):
                    eb = self._unit(b)
                    c = (C2[:, :, :, a, b] + C2[:, :, :, b, a]) / (4 * h * h)
                    terms += [(ea + eb, c), (-ea - eb, c), (ea - eb, -c), (eb - ea, -c)]
            self._lap = self._stencil_matrix(terms, d, d)
        return self._lap

    def solve(self, rhs_vec):
        if self._lu is None:
            self._lu = spl.splu(self.laplacian.tocsc())
        v = self._lu.solve(np.asarray(rhs_vec, dtype=float))
        res = np.linalg.norm(self.laplacian @ v - rhs_vec) / max(np.linalg.norm(rhs_vec), 1e-300)
        return v, res

    # quadrature weights ---------------------------------------------------
    def tensor_weights(self, weighted: bool) -> np.ndarray:
        """Per-node bilinear form B (m, ns, ns) on storage vectors so that the
        inner product is sum_nodes F_p^T B_p H_p (includes h^d)."""
        d, ns = self.d, self.ns
        pairs = sym_pairs(d)
        hd = self.grid.h**d
        B = np.zeros((self.m, ns, ns))
        for p, (a, b) in enumerate(pairs):
            for q, (c, e) in enumerate(pairs):
                P = [(a, b)] if a == b else [(a, b), (b, a)]
                Q = [(c, e)] if c == e else [(c, e), (e, c)]
                if weighted:
                    B[:, p, q] = sum(self.ginv[:, i, k] * self.ginv[:, j, l] for i, j in P for k, l in Q)
                elif p == q:
                    B[:, p, q] = len(P)
        if weighted:
            B *= self.sqrtg[:, None, None]
        return B * hd

    def covector_weights(self, weighted: bool) -> np.ndarray:
        hd = self.grid.h**self.d
        if weighted:
            return self.ginv * self.sqrtg[:, None, None] * hd
        return np.broadcast_to(np.eye(self.d), (self.m, self.d, self.d)) * hd


@lru_cache(maxsize=16)
def grid_operators(spec: MetricSpec, n: int) -> GridOperators:
    return GridOperators(spec, GridSpec(spec.domain, n))


def _ops(spec, grid):
    return grid_operators(spec, grid.n)


def dsym(spec: MetricSpec, v: CovectorField) -> SymTensorField:
    """Symmetric differential with centered differences (v = 0 off the interior)."""
    ops = _ops(spec, v.grid)
    return SymTensorField.from_interior(v.grid, ops.dsym @ v.interior_vector())


def div_s(spec: MetricSpec, f: SymTensorField) -> CovectorField:
    """Covariant divergence with centered differences (f = 0 off the interior)."""
    ops = _ops(spec, f.grid)
    return CovectorField.from_interior(f.grid, ops.div @ f.interior_vector())


class SolverError(RuntimeError):
    pass


def solve_delta_s(spec: MetricSpec, rhs: CovectorField, tol: float = 1e-10) -> CovectorField:
    """Solve Delta^s v = rhs with v = 0 on and outside the boundary."""
    ops = _ops(spec, rhs.grid)
    b = rhs.interior_vector()
    if not np.any(b):
        return CovectorField(rhs.grid, np.zeros_like(rhs.values))
    v, res = ops.solve(b)
    if res > tol:
        raise SolverError(f"relative residual {res:.3e} above {tol:.1e}")
    return CovectorField.from_interior(rhs.grid, v)


def solenoidal_project(spec: MetricSpec, f: SymTensorField):
    """Split f = f^s + d^s v with v = (Delta^s)^{-1} delta^s f.  The splitting
    holds exactly at interior nodes by construction."""
    v = solve_delta_s(spec, div_s(spec, f))
    pot = dsym(spec, v)
    return SymTensorField(f.grid, f.values - pot.values), v


def potential_part(spec: MetricSpec, f: SymTensorField) -> SymTensorField:
    fs, v = solenoidal_project(spec, f)
    return dsym(spec, v)


def inner_product(spec: MetricSpec, f: SymTensorField, hfield: SymTensorField, weighted: bool = True) -> float:
    """Trapezoidal quadrature of f_ij g^ii' g^jj' h_i'j' sqrt(det g) (weighted)
    or of sum_ij f_ij h_ij (flat) over the ball."""
    ops = _ops(spec, f.grid)
    B = ops.tensor_weights(weighted)
    F = to_storage(f.values[f.grid.interior])
    H = to_storage(hfield.values[f.grid.interior])
    return float(np.einsum("np,npq,nq->", F, B, H))


def covector_inner(spec: MetricSpec, v: CovectorField, w: CovectorField, weighted: bool = True) -> float:
    ops = _ops(spec, v.grid)
    B = ops.covector_weights(weighted)
    I = v.grid.interior
    return float(np.einsum("np,npq,nq->", v.values[I], B, w.values[I]))


def tensor_norm(spec, f, weighted=True, region=None) -> float:
    """Discrete L2 norm, optionally restricted to nodes with |x| < region."""
    ops = _ops(spec, f.grid)
    B = ops.tensor_weights(weighted)
    F = to_storage(f.values[f.grid.interior])
    if region is not None:
        keep = np.linalg.norm(ops.X, axis=1) < region
        F, B = F[keep], B[keep]
    return float(np.sqrt(max(np.einsum("np,npq,nq->", F, B, F), 0.0)))


def covector_norm(spec, v, weighted=True, region=None) -> float:
    ops = _ops(spec, v.grid)
    B = ops.covector_weights(weighted)
    V = v.values[v.grid.interior]
    if region is not None:
        keep = np.linalg.norm(ops.X, axis=1) < region
        V, B = V[keep], B[keep]
    return float(np.sqrt(max(np.einsum("np,npq,nq->", V, B, V), 0.0)))


def discrete_norm(f: SymTensorField, k: int = 0) -> float:
    """Discrete H^k norm (k = 0, 1, 2) with flat inner product and centered
    finite-difference derivatives of the zero-extended field."""
    if k not in (0, 1, 2):
        raise ValueError("k must be 0, 1 or 2")
    grid = f.grid
    d = grid.d
    vals = f.values.reshape(grid.shape + (d, d))
    h = grid.h
    hd = h**d
    total = float(np.sum(vals**2)) * hd
    layer = [vals]
    for _ in range(k):
        nxt = []
        for arr in layer:
            for a in range(d):
                p = np.pad(arr, [(1, 1) if ax == a else (0, 0) for ax in range(arr.ndim)])
                sl_p = [slice(None)] * arr.ndim
                sl_m = [slice(None)] * arr.ndim
                sl_p[a] = slice(2, None)
                sl_m[a] = slice(None, -2)
                nxt.append((p[tuple(sl_p)] - p[tuple(sl_m)]) / (2 * h))
        layer = nxt
        total += sum(float(np.sum(a**2)) for a in layer) * hd
    return float(np.sqrt(total))


def pointwise_decompose(f, x):
    """Unique (h, v) with f = h + i_x v and j_x h = 0, where
    (i_x v)_ij = (v_i x_j + v_j x_i)/2 and (j_x h)_i = h_ij x^j (flat)."""
    f = np.asarray(f, dtype=float)
    x = np.asarray(x, dtype=float)
    if not np.any(x):
        raise ValueError("x must be nonzero")
    d = len(x)
    # j_x f = j_x i_x v = (|x|^2 v + (x.v) x)/2  ->  v = (2 j_x f - (x.j_x f) x/|x|^2)/|x|^2
    jf = f @ x
    r2 = x @ x
    v = (2.0 * jf - (x @ jf) * x / r2) / r2
    ixv = 0.5 * (np.outer(v, x) + np.outer(x, v))
    return f - ixv, v
