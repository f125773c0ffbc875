"""Exponential map, its differential, conjugate radii and fold tests.

With r = |xi|_g and eta = xi / r, exp_x(xi) is the position at time r of the
unit speed geodesic from (x, eta), and

    d exp_x(xi) = gamma'(r) (g eta)^T + J(r) (I - eta (g eta)^T) / r,

where J is the position-velocity block of the variational flow Psi.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import brentq

from .geodesic_flow import DEFAULT_TOL, flow_batch, trace_batch
from .metric_model import MetricSpec, eval_metric


def _gnorm(spec, x, v):
    g = eval_metric(spec, x[None], order=0)[0][0]
    return float(np.sqrt(v @ g @ v)), g


def exp_map(spec, x, xi, tol=DEFAULT_TOL):
    """(exp_x(xi), velocity at parameter 1 of the geodesic with initial velocity xi)."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    r, _ = _gnorm(spec, x, xi)
    if r == 0:
        return x.copy(), xi.copy()
    d = len(x)
    st, _, _, _ = flow_batch(spec, x[None], (xi / r)[None], [r], tol)
    return st[0, 0, :d], r * st[0, 0, d:]


def dexp_along(spec, x, eta, ts, tol=DEFAULT_TOL):
    """d exp_x(t eta) for unit eta at the parameters ``ts`` (K, d, d)."""
    x = np.asarray(x, dtype=float)
    eta = np.asarray(eta, dtype=float)
    d = len(x)
    r, g = _gnorm(spec, x, eta)
    eta = eta / r
    ge = g @ eta
    ts = np.asarray(ts, dtype=float)
    st, Psi, _, _ = flow_batch(spec, x[None], eta[None], ts, tol, transport=True)
    vel = st[0, :, d:]
    J = Psi[0, :, :d, d:]
    P = np.eye(d) - np.outer(eta, ge)
    out = np.einsum("ki,j->kij", vel, ge)
    with np.errstate(divide="ignore", invalid="ignore"):
        out += np.einsum("kij,jl->kil", J, P) / ts[:, None, None]
    small = ts == 0
    out[small] = np.eye(d)
    return out


def dexp(spec, x, xi, tol=DEFAULT_TOL):
    """d_xi exp_x(xi) (d x d); the identity at xi = 0."""
    x = np.asarray(x, dtype=float)
    xi = np.asarray(xi, dtype=float)
    r, _ = _gnorm(spec, x, xi)
    if r == 0:
        return np.eye(len(x))
    return dexp_along(spec, x, xi / r, [r], tol)[0]


def det_dexp(spec, x, xi, tol=DEFAULT_TOL) -> float:
    return float(np.linalg.det(dexp(spec, x, xi, tol)))


@dataclass
class ConjugateScan:
    radii: list
    degenerate: list
    ts: np.ndarray
    dets: np.ndarray


def find_conjugate(spec, x, direction, t_max, n_samples=256, tol=DEFAULT_TOL, t_tol=1e-8,
                   scan=False):
    """Conjugate radii t* in (0, t_max] along the unit ray from (x, direction):
    sign changes of det d exp on a uniform scan, refined by Brent's method.
    Near-zero local minima of |det| without a sign change are returned as
    degenerate (tangential) zeros."""
    x = np.asarray(x, dtype=float)
    u = np.asarray(direction, dtype=float)
    r, _ = _gnorm(spec, x, u)
    u = u / r
    ts = np.linspace(t_max / n_samples, t_max, n_samples)
    D = np.linalg.det(dexp_along(spec, x, u, ts, tol))
    radii, degenerate = [], []

    def f(t):
        return det_dexp(spec, x, t * u, tol)

    for k in range(len(ts) - 1):
        if D[k] == 0:
            radii.append(float(ts[k]))
        elif D[k] * D[k + 1] < 0:
            radii.append(float(brentq(f, ts[k], ts[k + 1], xtol=t_tol, rtol=1e-14)))
    scale = np.max(np.abs(D))
    for k in range(1, len(ts) - 1):
        a, b, c = np.abs(D[k - 1:k + 2])
        if b < a and b < c and D[k - 1] * D[k + 1] > 0 and b < 1e-3 * scale:
            degenerate.append(float(ts[k]))
    if scan:
        return ConjugateScan(radii, degenerate, ts, D)
    return radii


def det_gradient(spec, x, xi, h=1e-5, tol=DEFAULT_TOL):
    xi = np.asarray(xi, dtype=float)
    d = len(xi)
    grad = np.empty(d)
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        grad[a] = (det_dexp(spec, x, xi + e, tol) - det_dexp(spec, x, xi - e, tol)) / (2 * h)
    return grad


@dataclass
class FoldReport:
    singular_values: np.ndarray
    kernel: np.ndarray
    cokernel: np.ndarray
    gradient: np.ndarray
    rank_ok: bool
    order_one: bool
    transversal: bool
    transversality: float

    @property
    def is_fold(self) -> bool:
        return self.rank_ok and self.order_one and self.transversal

    @property
    def classification(self) -> str:
        if self.is_fold:
            return "fold"
        if not self.rank_ok:
            return "degenerate"
        return "non-fold"


def classify_fold(spec, x, xi_star, h=1e-5, sigma_tol=1e-6, grad_tol=1e-4, trans_tol=1e-4,
                  tol=DEFAULT_TOL) -> FoldReport:
    """Fold test at a conjugate vector: (a) exactly one singular value below
    sigma_tol * sigma_max, (b) |grad det| >= grad_tol * (det scale),
    (c) |<n, grad det>| >= trans_tol |n| |grad det|.  The det scale is the
    largest |det| change per unit step seen in the gradient stencil
    normalized by |xi_star|."""
    D = dexp(spec, x, xi_star, tol)
    U, s, Vt = np.linalg.svd(D)
    n = Vt[-1]
    grad = det_gradient(spec, x, xi_star, h, tol)
    r = np.linalg.norm(xi_star)
    # scale of det variation: product of the nonzero singular values per unit length
    scale = np.prod(s[:-1]) / max(r, 1e-12)
    rank_ok = int(np.sum(s <= sigma_tol * s[0])) == 1 and s[-2] > 10 * sigma_tol * s[0]
    gnorm = float(np.linalg.norm(grad))
    order_one = gnorm >= grad_tol * scale
    tr = abs(n @ grad) / max(gnorm, 1e-300)
    return FoldReport(s, n, U[:, -1], grad, bool(rank_ok), bool(order_one), bool(tr >= trans_tol), float(tr))


@dataclass
class StrongFoldReport:
    matrix: np.ndarray  # d x (d-1): columns F(eta_a)
    rank: int
    cokernel_rank: int
    singular_values: np.ndarray
    cokernel_values: np.ndarray
    borderline: bool

    @property
    def full_rank(self) -> bool:
        return self.rank == self.matrix.shape[1]


def strong_fold_regular_test(spec, x, xi_star, h=1e-4, rank_tol=1e-6, tol=DEFAULT_TOL,
                             kernel=None) -> StrongFoldReport:
    """Rank of eta -> (d exp(xi* + s eta) - d exp(xi* - s eta))/(2s) n on the
    tangent space of the conjugate locus (orthogonal complement of grad det),
    and of its projection onto the cokernel of d exp(xi*)."""
    xi_star = np.asarray(xi_star, dtype=float)
    d = len(xi_star)
    D = dexp(spec, x, xi_star, tol)
    U, s, Vt = np.linalg.svd(D)
    n = Vt[-1] if kernel is None else np.asarray(kernel, dtype=float)
    grad = det_gradient(spec, x, xi_star, tol=tol)
    q = grad / np.linalg.norm(grad)
    # orthonormal basis of q-perp
    Q, _ = np.linalg.qr(np.column_stack([q, np.eye(d)]))
    basis = Q[:, 1:d]
    cols = []
    for a in range(d - 1):
        e = basis[:, a]
        Dp = dexp(spec, x, xi_star + h * e, tol)
        Dm = dexp(spec, x, xi_star - h * e, tol)
        cols.append((Dp - Dm) @ n / (2 * h))
    F = np.column_stack(cols)
    sv = np.linalg.svd(F, compute_uv=False)
    ref = max(np.linalg.norm(D, 2), 1e-300) * np.linalg.norm(n)
    rank = int(np.sum(sv > rank_tol * ref))
    cok = U[:, -1] @ F
    cv = np.abs(cok)
    crank = int(np.any(cv > rank_tol * ref))
    borderline = bool(np.any((sv > 0.1 * rank_tol * ref) & (sv < 10 * rank_tol * ref))
                      or np.any((cv > 0.1 * rank_tol * ref) & (cv < 10 * rank_tol * ref)))
    return StrongFoldReport(F, rank, crank, sv, cv, borderline)


@dataclass
class JacobiReport:
    x: np.ndarray
    direction: np.ndarray
    radii: list
    folds: list = field(default_factory=list)
    strong: list = field(default_factory=list)

    def rows(self):
        out = []
        for t, fr, sr in zip(self.radii, self.folds, self.strong):
            out.append({
                "t": t,
                "classification": fr.classification,
                "singular_values": fr.singular_values.tolist(),
                "kernel": fr.kernel.tolist(),
                "gradient": fr.gradient.tolist(),
                "transversality": fr.transversality,
                "strong_rank": None if sr is None else sr.rank,
                "strong_cokernel_rank": None if sr is None else sr.cokernel_rank,
            })
        return out


def jacobi_report(spec, x, direction, t_max, tol=DEFAULT_TOL, n_samples=256) -> JacobiReport:
    x = np.asarray(x, dtype=float)
    u = np.asarray(direction, dtype=float)
    u = u / _gnorm(spec, x, u)[0]
    radii = find_conjugate(spec, x, u, t_max, n_samples, tol)
    rep = JacobiReport(x, u, radii)
    for t in radii:
        fr = classify_fold(spec, x, t * u, tol=tol)
        rep.folds.append(fr)
        rep.strong.append(strong_fold_regular_test(spec, x, t * u, tol=tol) if fr.is_fold else None)
    return rep


def sphere_sample(d: int, n: int) -> np.ndarray:
    """Near-uniform unit vectors: equispaced angles (d = 2) or a Fibonacci
    lattice (d = 3)."""
    if d == 2:
        th = np.pi * np.arange(n) / n
        return np.stack([np.cos(th), np.sin(th)], -1)
    k = np.arange(n) + 0.5
    z = 1 - 2 * k / n
    ph = np.pi * (1 + 5**0.5) * k
    s = np.sqrt(1 - z**2)
    return np.stack([s * np.cos(ph), s * np.sin(ph), z], -1)


@dataclass
class CompletenessReport:
    max_min: float
    complete: bool
    conjugate_free: bool
    all_folds: bool
    min_exit_cos: float
    transverse: bool


def completeness_test(spec, x, Z, n_sphere=None, tol=DEFAULT_TOL, check_rays=True, complete_tol=0.05):
    """max over sampled xi of min over theta in Z of |<theta, xi>_g| (after
    normalizing both to g-unit length), plus per-theta checks on the geodesic
    through (x, theta): conjugate vectors are folds and both ends leave the
    boundary transversally."""
    x = np.asarray(x, dtype=float)
    d = len(x)
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    n_sphere = n_sphere or (4096 if d == 2 else 2562)
    g = eval_metric(spec, x[None], order=0)[0][0]
    xs = sphere_sample(d, n_sphere)
    xs = xs / np.sqrt(np.einsum("ni,ij,nj->n", xs, g, xs))[:, None]
    Zn = Z / np.sqrt(np.einsum("ni,ij,nj->n", Z, g, Z))[:, None]
    mm = float(np.max(np.min(np.abs(xs @ g @ Zn.T), axis=1)))
    conj_free, folds, min_cos = True, True, np.inf
    if check_rays:
        T = 2 * spec.domain.radius + 1
        for th in Zn:
            for sgn in (1.0, -1.0):
                rec = trace_batch(spec, x[None], sgn * th[None], T, times=[0.0], tol=tol, transport=False)
                ex = rec.exit_state[0]
                nu = ex[:d] / np.linalg.norm(ex[:d])
                min_cos = min(min_cos, abs(nu @ ex[d:]) / np.linalg.norm(ex[d:]))
                radii = find_conjugate(spec, x, sgn * th, float(rec.exit_time[0]), 64, tol)
                if radii:
                    conj_free = False
                    for t in radii:
                        if not classify_fold(spec, x, t * sgn * th, tol=tol).is_fold:
                            folds = False
    return CompletenessReport(mm, mm <= complete_tol, conj_free, folds, float(min_cos), bool(min_cos >= 1e-3))
