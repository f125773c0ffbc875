"""Principal symbols of the near-diagonal normal operators at a point.

For a codirection omega the delta(omega . xi) fiber integral lives on
{xi in S_xM : omega . xi = 0}.  Writing xi = g^{-1/2} eta with eta on the
Euclidean sphere, omega . xi = w . eta with w = g^{-1/2} omega, and

    int F(xi) delta(omega . xi) dmu_x = |w|^{-1} int_{eta . w = 0} F dS_{d-2},

which is two antipodal points in d = 2 and a great circle in d = 3.

Matrices are written in a Frobenius-orthonormal basis of S_2 (and of
R^{2d} (x) S_2 for M_1), and assembled in Gram form sum_q w_q B_q^T B_q.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import subspace_angles, null_space

from .geodesic_flow import DEFAULT_TOL
from .metric_model import eval_metric, christoffel_from_metric
from .tensor_fields import sym_pairs
from .xray_transform import CutoffAlpha, AlphaBump, inv_sqrt_metric, rays_through


def sym_basis(d: int) -> np.ndarray:
    """Frobenius-orthonormal basis of S_2 as (ns, d, d)."""
    out = []
    for i, j in sym_pairs(d):
        E = np.zeros((d, d))
        if i == j:
            E[i, i] = 1.0
        else:
            E[i, j] = E[j, i] = 1.0 / np.sqrt(2)
        out.append(E)
    return np.array(out)


def delta_sphere(g, omega, n_quad):
    """g-unit directions xi with omega . xi = 0 and weights including the
    coarea factor 1/|g^{-1/2} omega|."""
    d = len(omega)
    S = inv_sqrt_metric(g[None])[0]
    w = S @ omega
    wn = np.linalg.norm(w)
    if d == 2:
        e = np.array([-w[1], w[0]]) / wn
        etas = np.array([e, -e])
        weights = np.full(2, 1.0 / wn)
    elif d == 3:
        a = w / wn
        Q, _ = np.linalg.qr(np.column_stack([a, np.eye(3)]))
        e1, e2 = Q[:, 1], Q[:, 2]
        th = 2 * np.pi * (np.arange(n_quad) + 0.5) / n_quad
        etas = np.cos(th)[:, None] * e1 + np.sin(th)[:, None] * e2
        weights = np.full(n_quad, 2 * np.pi / n_quad / wn)
    else:
        raise ValueError("d must be 2 or 3")
    return etas @ S.T, weights


@dataclass
class SymbolOperator:
    x: np.ndarray
    omega: np.ndarray
    matrix: np.ndarray
    kind: str  # "M1" or "N1"
    n_quad: int
    metric: np.ndarray

    @property
    def dim(self) -> int:
        return len(self.x)


def _fiber_data(spec, alpha, x, omega, n_quad, T, tol):
    x = np.asarray(x, dtype=float)
    omega = np.asarray(omega, dtype=float)
    g = eval_metric(spec, x[None], order=1)
    G, _ = christoffel_from_metric(g[0], g[1])
    g = g[0][0]
    xis, w = delta_sphere(g, omega, n_quad)
    T = T if T is not None else 2 * spec.domain.radius + 1
    fr = rays_through(spec, np.repeat(x[None], len(xis), 0), xis, T, tol)
    a2 = np.ones(len(xis)) if alpha is None else alpha(fr.entry_x, fr.entry_xi) ** 2
    return g, G[0], xis, np.pi * w * a2, fr.phi


def symbol_M1(spec, alpha, x, omega, n_quad=64, T=None, tol=DEFAULT_TOL) -> SymbolOperator:
    """pi int |alpha#|^2 Phi^T Phi xi_i xi_j xi^m xi^n delta(omega . xi) dmu_x as a
    Gram matrix on R^{2d} (x) S_2: (B Pi) = Phi Pi(xi, xi)."""
    d = len(x)
    g, _, xis, w, phi = _fiber_data(spec, alpha, x, omega, n_quad, T, tol)
    E = sym_basis(d)
    ns = len(E)
    M = np.zeros((2 * d * ns, 2 * d * ns))
    for q in range(len(xis)):
        e = np.einsum("cij,i,j->c", E, xis[q], xis[q])
        B = np.einsum("kl,c->klc", phi[q], e).reshape(2 * d, 2 * d * ns)
        M += w[q] * B.T @ B
    return SymbolOperator(np.asarray(x, float), np.asarray(omega, float), 0.5 * (M + M.T), "M1", n_quad, g)


def l_symbol(g, omega, f):
    """Real symbol of L: (sigma f)^k_mn = 1/2 g^{kl}(f_ml w_n + f_nl w_m - f_mn w_l)."""
    gi = np.linalg.inv(g)
    t = 0.5 * (np.einsum("ml,n->mnl", f, omega) + np.einsum("nl,m->mnl", f, omega)
               - np.einsum("mn,l->mnl", f, omega))
    return np.einsum("kl,mnl->kmn", gi, t)


def symbol_N1(spec, alpha, x, omega, n_quad=64, T=None, tol=DEFAULT_TOL) -> SymbolOperator:
    """sigma(iota L)^T sigma(M_1) sigma(iota L) on S_2, in Gram form with
    B f = Phi iota((sigma_L f)(xi, xi))."""
    d = len(x)
    omega = np.asarray(omega, dtype=float)
    g, _, xis, w, phi = _fiber_data(spec, alpha, x, omega, n_quad, T, tol)
    E = sym_basis(d)
    ns = len(E)
    # lifted symbol of L for each basis element: (ns, 2d, d, d)
    SL = np.zeros((ns, 2 * d, d, d))
    for c in range(ns):
        SL[c, d:] = l_symbol(g, omega, E[c])
    N = np.zeros((ns, ns))
    for q in range(len(xis)):
        v = np.einsum("ckij,i,j->kc", SL, xis[q], xis[q])
        B = phi[q] @ v
        N += w[q] * B.T @ B
    return SymbolOperator(np.asarray(x, float), omega, 0.5 * (N + N.T), "N1", n_quad, g)


def potential_directions(d, omega) -> np.ndarray:
    """Coordinates of sym(v (x) omega) for v in a basis of R^d (d x ns)."""
    E = sym_basis(d)
    out = []
    for a in range(d):
        v = np.zeros(d)
        v[a] = 1.0
        f = 0.5 * (np.outer(v, omega) + np.outer(omega, v))
        out.append(np.einsum("cij,ij->c", E, f))
    return np.array(out)


@dataclass
class KernelReport:
    singular_values: np.ndarray
    kernel_dim: int
    rank: int
    max_angle: float
    min_rayleigh: float
    borderline: bool
    annihilation: float

    @property
    def ok(self) -> bool:
        return self.max_angle <= 1e-4 and self.min_rayleigh > 0 and not self.borderline


def kernel_analysis(op: SymbolOperator, rel_tol=1e-8) -> KernelReport:
    """SVD of the symbol: kernel dimension, principal angles between the
    numerical kernel and span{sym(v (x) omega)} and the smallest Rayleigh
    quotient (relative to sigma_max) on {f : f_ij omega^j = 0}."""
    d = op.dim
    A = op.matrix
    U, s, Vt = np.linalg.svd(A)
    smax = s[0] if s[0] > 0 else 1.0
    ker = s <= rel_tol * smax
    kdim = int(ker.sum())
    borderline = bool(np.any((s > rel_tol * smax) & (s < 10 * rel_tol * smax)))
    E = sym_basis(d)
    ns = len(E)
    P = potential_directions(d, op.omega)
    if op.kind == "M1":
        # one copy of the potential space per R^{2d} component
        blocks = [np.kron(np.eye(2 * d)[k], P) for k in range(2 * d)]
        P = np.vstack(blocks)
    K = Vt[ker].T
    if kdim and K.shape[1] == P.shape[0]:
        ang = float(np.max(subspace_angles(K, P.T)))
    else:
        ang = float(np.pi / 2)
    annihilation = float(np.linalg.norm(A @ P.T) / (smax * np.linalg.norm(P)))
    # complement {f omega^# = 0}
    om = np.linalg.solve(op.metric, op.omega)
    Q = null_space(np.einsum("cij,j->ic", E, om))
    if op.kind == "M1":
        Q = np.kron(np.eye(2 * d), Q)
    R = Q.T @ A @ Q
    rq = float(np.linalg.eigvalsh(0.5 * (R + R.T)).min() / smax)
    return KernelReport(s, kdim, int(len(s) - kdim), ang, rq, borderline, annihilation)


def complete_cutoff(spec, x, omega, n_rays=None, spatial_width=0.6, angular_width=0.6, T=None,
                    tol=DEFAULT_TOL) -> CutoffAlpha:
    """Cutoff made of bumps centered on the entries of the rays through x that
    are orthogonal to omega (the support of the symbol's fiber integral)."""
    x = np.asarray(x, dtype=float)
    d = len(x)
    g = eval_metric(spec, x[None], order=0)[0][0]
    xis, _ = delta_sphere(g, np.asarray(omega, float), n_rays or (2 if d == 2 else 12))
    T = T if T is not None else 2 * spec.domain.radius + 1
    fr = rays_through(spec, np.repeat(x[None], len(xis), 0), xis, T, tol, with_phi=False)
    bumps = tuple(AlphaBump(tuple(a), tuple(b), spatial_width, angular_width)
                  for a, b in zip(fr.entry_x, fr.entry_xi))
    return CutoffAlpha(bumps)
