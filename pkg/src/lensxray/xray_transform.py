"""Weighted geodesic X-ray transforms of tensor fields with values in R^{2d}.

Conventions
-----------
* Psi(t) is the forward variational flow along a traced geodesic, so the
  weight at time s on the ray from an entry point is
  Phi(s) = Psi(T) Psi(s)^{-1} = D H^{T-s} evaluated at the ray state.
* A weighted field Pi has m components Pi^k_ij; its integrand on a ray is
  the m-vector Pi^k_ij xi^i xi^j.
* I Pi = int_0^T Phi(s) Pi(x(s))(xi, xi) ds and X f = -I(iota L f): the sign
  makes X f the first variation of H^T under g -> g + f (the spray carries
  -Gamma, and L f is the first variation of Gamma).
* The fiber measure on S_xM is the Riemannian sphere measure of g(x): with
  xi = g^{-1/2} eta it is the Euclidean measure in eta.  The volume factor
  sqrt(det g) sits in the pairing on M.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .geodesic_flow import (DEFAULT_TOL, as_connection, flow_batch, jacobian_blocks, trace_batch,
                   GeodesicRecord)
from .metric_model import MetricSpec, eval_metric, christoffel_from_metric

# ---------------------------------------------------------------------------
# small helpers


def euclid_block(tau, d):
    """Differential [[I, tau I], [0, I]] of the Euclidean flow (batched in tau)."""
    tau = np.asarray(tau, dtype=float)
    E = np.zeros(tau.shape + (2 * d, 2 * d))
    E[..., np.arange(2 * d), np.arange(2 * d)] = 1.0
    for i in range(d):
        E[..., i, d + i] = tau
    return E


def reversal(d):
    return np.diag(np.r_[np.ones(d), -np.ones(d)])


def inv_sqrt_metric(g):
    w, V = np.linalg.eigh(g)
    return np.einsum("nij,nj,nkj->nik", V, 1.0 / np.sqrt(w), V)


def sphere_rule(d: int, n: int):
    """Directions eta (n', d) and weights on the Euclidean unit sphere.
    d = 2: n equispaced angles.  d = 3: Gauss-Legendre in cos(theta) times
    uniform longitudes with about n nodes in total."""
    if d == 2:
        th = 2 * np.pi * (np.arange(n) + 0.5) / n
        return np.stack([np.cos(th), np.sin(th)], -1), np.full(n, 2 * np.pi / n)
    if d == 3:
        nt = max(2, int(round(np.sqrt(n / 2))))
        nphi = 2 * nt
        z, wz = np.polynomial.legendre.leggauss(nt)
        ph = 2 * np.pi * (np.arange(nphi) + 0.5) / nphi
        Z, P = np.meshgrid(z, ph, indexing="ij")
        s = np.sqrt(1 - Z**2)
        eta = np.stack([s * np.cos(P), s * np.sin(P), Z], -1).reshape(-1, 3)
        w = (wz[:, None] * np.full(nphi, 2 * np.pi / nphi)[None, :]).ravel()
        return eta, w
    raise ValueError("sphere_rule supports d = 2, 3")


def fiber_directions(spec: MetricSpec, X, n: int):
    """g-unit directions xi (P, n', d) at points X and sphere weights (n',)."""
    X = np.atleast_2d(X)
    eta, w = sphere_rule(spec.dim, n)
    g = eval_metric(spec, X, order=0)[0]
    S = inv_sqrt_metric(g)
    return np.einsum("pij,qj->pqi", S, eta), w


def _bump(u):
    """C-infinity bump exp(1 - 1/(1 - u^2)) on |u| < 1, value 1 at 0."""
    u = np.asarray(u, dtype=float)
    out = np.zeros_like(u)
    m = np.abs(u) < 1
    out[m] = np.exp(1.0 - 1.0 / (1.0 - u[m] ** 2))
    return out


# ---------------------------------------------------------------------------
# cutoffs on the incoming boundary


@dataclass(frozen=True)
class AlphaBump:
    """Smooth bump on S_-dM around the ray (center_x, center_xi)."""

    center_x: tuple
    center_xi: tuple
    spatial_width: float
    angular_width: float


@dataclass(frozen=True)
class CutoffAlpha:
    """alpha = 1 - prod_b (1 - psi_b), psi_b a product of spatial and angular
    bumps; with no bumps alpha is the constant ``value``.  ``sector = (j, n)``
    instead selects the j-th member of a smooth partition of the boundary
    angle into n sectors with sum_j alpha_j^2 = 1 (d = 2)."""

    bumps: tuple = ()
    value: float = 1.0
    sector: tuple | None = None

    def __call__(self, X0, Xi0) -> np.ndarray:
        X0 = np.atleast_2d(X0)
        Xi0 = np.atleast_2d(Xi0)
        n = len(X0)
        if self.sector is not None:
            j, count = self.sector
            th = np.arctan2(X0[:, 1], X0[:, 0])
            centers = 2 * np.pi * np.arange(count) / count
            half = 2 * np.pi / count
            dist = np.angle(np.exp(1j * (th[:, None] - centers[None, :])))
            w = _bump(dist / half)
            return np.sqrt(w[:, j] / w.sum(axis=1))
        if not self.bumps:
            return np.full(n, float(self.value))
        keep = np.ones(n)
        for b in self.bumps:
            cx = np.asarray(b.center_x, dtype=float)
            cv = np.asarray(b.center_xi, dtype=float)
            cv = cv / np.linalg.norm(cv)
            sp = np.linalg.norm(X0 - cx, axis=1) / b.spatial_width
            u = Xi0 / np.linalg.norm(Xi0, axis=1, keepdims=True)
            ang = np.arccos(np.clip(u @ cv, -1, 1)) / b.angular_width
            keep *= 1.0 - _bump(sp) * _bump(ang)
        return 1.0 - keep

    @staticmethod
    def zero() -> "CutoffAlpha":
        return CutoffAlpha(value=0.0)

    @property
    def is_one(self) -> bool:
        return not self.bumps and self.sector is None and self.value == 1.0


def quadrant_bundles(n: int = 4):
    return [CutoffAlpha(sector=(j, n)) for j in range(n)]


# ---------------------------------------------------------------------------
# boundary data and ray sets


@dataclass
class BoundaryData:
    """Rays on S_-dM with quadrature weights for |<nu, xi>| dSigma and
    per-ray values in R^{2d} (optional)."""

    X0: np.ndarray
    Xi0: np.ndarray
    weights: np.ndarray
    values: np.ndarray | None = None

    def __post_init__(self):
        if np.any(self.weights <= 0):
            raise ValueError("ray weights must be positive")

    def __len__(self):
        return len(self.X0)

    def with_values(self, values) -> "BoundaryData":
        return BoundaryData(self.X0, self.Xi0, self.weights, np.asarray(values, dtype=float))

    def subset(self, idx) -> "BoundaryData":
        return BoundaryData(self.X0[idx], self.Xi0[idx], self.weights[idx],
                            None if self.values is None else self.values[idx])

    def rows(self):
        parts = [self.X0, self.Xi0]
        if self.values is not None:
            parts.append(self.values)
        parts.append(self.weights[:, None])
        return np.hstack(parts)


def parallel_beam(radius: float, n_angles: int, n_impacts: int, jitter: float = 0.0, rng=None) -> BoundaryData:
    """Planar rays on a (direction angle, signed impact) product grid.
    For lines |<nu, xi>| ds dphi = dp dbeta, so weights are dbeta * dp with a
    midpoint rule in p (tangent rays are never generated)."""
    db = 2 * np.pi / n_angles
    dp = 2 * radius / n_impacts
    beta = db * np.arange(n_angles)
    p = -radius + dp * (np.arange(n_impacts) + 0.5)
    if jitter:
        rng = np.random.default_rng(rng)
        beta = beta + jitter * db * (rng.random(n_angles) - 0.5)
    B, P = np.meshgrid(beta, p, indexing="ij")
    B, P = B.ravel(), P.ravel()
    u = np.stack([np.cos(B), np.sin(B)], -1)
    w = np.stack([-np.sin(B), np.cos(B)], -1)
    x0 = P[:, None] * w - np.sqrt(radius**2 - P**2)[:, None] * u
    return BoundaryData(x0, u, np.full(len(B), db * dp))


def boundary_fan(radius: float, n_points: int, n_angles: int) -> BoundaryData:
    """Planar rays uniform in boundary angle theta and inward angle psi to the
    normal; weights R dtheta dpsi cos(psi) for |<nu, xi>| dSigma (midpoint in psi)."""
    dth = 2 * np.pi / n_points
    dps = np.pi / n_angles
    th = dth * np.arange(n_points)
    ps = -0.5 * np.pi + dps * (np.arange(n_angles) + 0.5)
    TH, PS = np.meshgrid(th, ps, indexing="ij")
    TH, PS = TH.ravel(), PS.ravel()
    x0 = radius * np.stack([np.cos(TH), np.sin(TH)], -1)
    a = TH + np.pi + PS
    xi = np.stack([np.cos(a), np.sin(a)], -1)
    return BoundaryData(x0, xi, radius * dth * dps * np.cos(PS))


def random_entries(radius: float, dim: int, n: int, rng=None, min_cos: float = 0.2):
    """Random inward unit rays on the sphere of radius ``radius`` with
    |<nu, xi>| >= min_cos."""
    rng = np.random.default_rng(rng)
    X = np.empty((0, dim))
    V = np.empty((0, dim))
    while len(X) < n:
        x = rng.normal(size=(2 * n, dim))
        x /= np.linalg.norm(x, axis=1, keepdims=True)
        v = rng.normal(size=(2 * n, dim))
        v /= np.linalg.norm(v, axis=1, keepdims=True)
        c = np.einsum("ni,ni->n", x, v)
        v[c > 0] *= -1
        keep = np.abs(c) >= min_cos
        X = np.vstack([X, radius * x[keep]])
        V = np.vstack([V, v[keep]])
    return X[:n], V[:n]


# ---------------------------------------------------------------------------
# weighted fields and the operator L


@dataclass
class WeightedTensorField:
    """Field x -> Pi^k_ij(x), k < m, given by a callable returning (N, m, d, d)."""

    m: int
    dim: int
    fn: object
    support_radius: float | None = None

    def __call__(self, x):
        x = np.atleast_2d(x)
        if self.support_radius is None:
            return self.fn(x)
        out = np.zeros((len(x), self.m, self.dim, self.dim))
        inside = np.einsum("ni,ni->n", x, x) < self.support_radius**2
        if inside.any():
            out[inside] = self.fn(x[inside])
        return out

    def scaled(self, c):
        return WeightedTensorField(self.m, self.dim, lambda x: c * self.fn(x), self.support_radius)


def combine(a, wa, b, wb) -> WeightedTensorField:
    sr = None if a.support_radius is None or b.support_radius is None else max(a.support_radius, b.support_radius)
    return WeightedTensorField(a.m, a.dim, lambda x: wa * a.fn(x) + wb * b.fn(x), sr)


def l_apply(g, G, f, df):
    """(L f)^k_ij = 1/2 g^{lk}(d_i f_jl + d_j f_il - d_l f_ij) - g^{lk} Gamma^m_ij f_ml
    for batches; df[..., i, j, m] = d_m f_ij."""
    gi = np.linalg.inv(g)
    low = 0.5 * (np.einsum("njli->nijl", df) + np.einsum("nilj->nijl", df) - df)
    low = low - np.einsum("nmij,nml->nijl", G, f)
    return np.einsum("nlk,nijl->nkij", gi, low)


def l_operator(spec: MetricSpec, f) -> WeightedTensorField:
    """L f for an analytic symmetric field ``f`` with evaluate(x, order)."""
    d = spec.dim

    def fn(x):
        fv, df, _ = f.evaluate(x, 1)
        g, dg, _ = eval_metric(spec, x, order=1, check_domain=False)
        G, _ = christoffel_from_metric(g, dg)
        return l_apply(g, G, fv, df)

    return WeightedTensorField(d, d, fn, getattr(f, "support_radius", None))


def lift_iota(p: WeightedTensorField) -> WeightedTensorField:
    """Embed a d-component field as components d..2d-1 of a 2d-component field."""
    d = p.m

    def fn(x):
        v = p.fn(x)
        out = np.zeros((len(x), 2 * d) + v.shape[2:])
        out[:, d:] = v
        return out

    return WeightedTensorField(2 * d, p.dim, fn, p.support_radius)


class ChristoffelPerturbation:
    """Extra connection term Gamma~ = L f as used by the Christoffel-to-flow
    linearization; callable as (x, deriv) -> (Gamma~, dGamma~)."""

    def __init__(self, spec: MetricSpec, f, h: float = 1e-5):
        self.spec = spec
        self.f = f
        self.h = h
        self.lf = l_operator(spec, f)

    def __call__(self, x, deriv=False):
        G = self.lf(x)
        if not deriv:
            return G, None
        d = x.shape[1]
        dG = np.empty(G.shape + (d,))
        for m in range(d):
            e = np.zeros(d)
            e[m] = self.h
            dG[..., m] = (self.lf(x + e) - self.lf(x - e)) / (2 * self.h)
        return G, dG


# ---------------------------------------------------------------------------
# weight Phi


def weight_phi(rec: GeodesicRecord, t: float) -> np.ndarray:
    """Phi = Psi(T) Psi(t)^{-1} from the record's transport samples; Psi(t) is
    interpolated by cubic Hermite using Psi' = A Psi."""
    from scipy.interpolate import CubicHermiteSpline

    if rec.trapped:
        raise ValueError("trapped record")
    if not (0.0 <= t <= rec.T):
        raise ValueError("t must lie in [0, T]")
    d = rec.dim
    conn = as_connection(rec.spec)
    times, P = rec.times, rec.transport
    if times[-1] < rec.T:
        raise ValueError("record does not reach T")
    PT = P[np.searchsorted(times, rec.T)] if np.isclose(times[-1], rec.T) else None
    G, dG = conn(rec.states[:, :d], deriv=True)
    A = jacobian_blocks(G, dG, rec.states[:, d:])
    dP = np.matmul(A, P)
    spl = CubicHermiteSpline(times, P.reshape(len(times), -1), dP.reshape(len(times), -1))
    Pt = spl(t).reshape(2 * d, 2 * d)
    if PT is None:
        PT = spl(rec.T).reshape(2 * d, 2 * d)
    if np.linalg.cond(Pt) > 1e12:
        raise np.linalg.LinAlgError("transport matrix is numerically singular")
    return np.linalg.solve(Pt.T, PT.T).T


def phi_by_ode(spec, x0, xi0, t_eval, T, tol=1e-12):
    """Independent route: integrate (x, xi, phi) with phi' = -phi A,
    phi(0) = I, using scipy's solve_ivp, and return phi(T)^{-1} phi(t)."""
    conn = as_connection(spec)
    d = len(x0)
    n = 2 * d

    def rhs(_, y):
        x, xi = y[:d], y[d:n]
        G, dG = conn(x[None], deriv=True)
        A = jacobian_blocks(G, dG, xi[None])[0]
        ph = y[n:].reshape(n, n)
        return np.concatenate([xi, -np.einsum("kij,i,j->k", G[0], xi, xi), (-ph @ A).ravel()])

    y0 = np.concatenate([x0, xi0, np.eye(n).ravel()])
    ts = np.unique(np.r_[t_eval, T])
    sol = solve_ivp(rhs, (0, T), y0, method="DOP853", t_eval=ts, rtol=tol, atol=tol)
    ph = sol.y[n:].T.reshape(-1, n, n)
    phT = ph[np.searchsorted(ts, T)]
    return np.stack([np.linalg.solve(phT, ph[np.searchsorted(ts, t)]) for t in np.atleast_1d(t_eval)])


# ---------------------------------------------------------------------------
# forward transforms


def _ray_nodes(T, quad_n):
    s = np.linspace(0.0, T, quad_n)
    w = np.full(quad_n, s[1] - s[0])
    w[0] = w[-1] = 0.5 * (s[1] - s[0])
    return s, w


def transform_I_batch(spec, Pi: WeightedTensorField, X0, Xi0, T, quad_n=512, tol=DEFAULT_TOL, chunk=256):
    """I Pi on a batch of entries: trapezoidal rule with quad_n nodes on [0, T]
    (the integrand vanishes once the ray has left the support of Pi)."""
    X0 = np.atleast_2d(X0)
    Xi0 = np.atleast_2d(Xi0)
    N, d = X0.shape
    m = Pi.m
    s, w = _ray_nodes(T, quad_n)
    out = np.zeros((N, m))
    for a in range(0, N, chunk):
        sl = slice(a, min(N, a + chunk))
        rec = trace_batch(spec, X0[sl], Xi0[sl], T, times=s, tol=tol, transport=True, margin=0.0)
        if rec.trapped.any():
            raise RuntimeError("trapped ray in transform")
        st = rec.states.reshape(-1, 2 * d)
        vals = Pi(st[:, :d])
        integrand = np.einsum("nkij,ni,nj->nk", vals, st[:, d:], st[:, d:]).reshape(-1, quad_n, m)
        if m == 2 * d:
            Psi = rec.transport
            live = np.any(integrand != 0, axis=2)
            y = np.zeros_like(integrand)
            if live.any():
                y[live] = np.linalg.solve(Psi[live], integrand[live][..., None])[..., 0]
            acc = np.einsum("q,nqk->nk", w, y)
            out[sl] = np.einsum("nij,nj->ni", Psi[:, -1], acc)
        else:
            out[sl] = np.einsum("q,nqk->nk", w, integrand)
    return out


def transform_I(spec, Pi, entry, T, quad_n=512, tol=DEFAULT_TOL):
    return transform_I_batch(spec, Pi, entry.x[None], entry.xi[None], T, quad_n, tol)[0]


def transform_X_batch(spec, f, X0, Xi0, T, quad_n=512, tol=DEFAULT_TOL, alpha: CutoffAlpha | None = None):
    """X f = -I(iota L f), optionally multiplied by the cutoff alpha."""
    out = -transform_I_batch(spec, lift_iota(l_operator(spec, f)), X0, Xi0, T, quad_n, tol)
    if alpha is not None:
        out *= alpha(X0, Xi0)[:, None]
    return out


def transform_X(spec, f, entry, T, quad_n=512, tol=DEFAULT_TOL):
    return transform_X_batch(spec, f, entry.x[None], entry.xi[None], T, quad_n, tol)[0]


# ---------------------------------------------------------------------------
# rays through interior points


@dataclass
class FiberRays:
    """Geodesics through (x, xi): entry on S_-dM, time s since entry and Phi."""

    entry_x: np.ndarray
    entry_xi: np.ndarray
    s: np.ndarray
    phi: np.ndarray | None


def rays_through(spec, X, XI, T, tol=DEFAULT_TOL, with_phi=True, chunk=4096) -> FiberRays:
    """Trace back from (x, xi) to its entry and compute Phi(x, xi).

    Phi(x, xi) = D H^{T-s}(x, xi) = E(-s) Psi_x(T) with E the Euclidean block,
    valid because the forward ray has left the support for good before T - s.
    """
    X = np.atleast_2d(X)
    XI = np.atleast_2d(XI)
    N, d = X.shape
    back = trace_batch(spec, X, -XI, T, times=[0.0], tol=tol, transport=False, chunk=chunk)
    if back.trapped.any():
        raise RuntimeError("backward trace did not reach the boundary")
    s = back.exit_time
    ex = back.exit_state[:, :d]
    exi = -back.exit_state[:, d:]
    phi = None
    if with_phi:
        fwd = trace_batch(spec, X, XI, T, times=[T], tol=tol, transport=True, margin=0.0, chunk=chunk)
        if np.any(fwd.exit_time + s > T + 1e-9):
            raise ValueError("horizon T shorter than a geodesic chord")
        phi = np.matmul(euclid_block(-s, d), fwd.transport[:, 0])
    return FiberRays(ex, exi, s, phi)


def lower(spec, X, XI):
    g = eval_metric(spec, X, order=0)[0]
    return np.einsum("nij,nj->ni", g, XI)


def adjoint_I(spec, h, X, T, fiber_n=128, tol=DEFAULT_TOL, alpha: CutoffAlpha | None = None):
    """I^dagger h at points X as (P, 2d, d, d) with lower tensor indices:
    int_{S_x} Phi^T h#(x, xi) xi_i xi_j dmu_x, h# read at the entry point.
    ``h`` is a callable (X0, Xi0) -> (n, 2d)."""
    X = np.atleast_2d(X)
    P, d = X.shape
    xis, w = fiber_directions(spec, X, fiber_n)
    q = xis.shape[1]
    Xr = np.repeat(X, q, axis=0)
    XI = xis.reshape(-1, d)
    fr = rays_through(spec, Xr, XI, T, tol)
    hv = h(fr.entry_x, fr.entry_xi)
    if alpha is not None:
        hv = hv * alpha(fr.entry_x, fr.entry_xi)[:, None]
    val = np.einsum("nji,nj->ni", fr.phi, hv)
    low = lower(spec, Xr, XI)
    out = np.einsum("nk,ni,nj->nkij", val, low, low).reshape(P, q, 2 * d, d, d)
    return np.einsum("q,pqkij->pkij", w, out)


def pair_on_M(spec, X, weights, A, B):
    """sum_nodes w sqrt(det g) A^k_ij g^{ii'} g^{jj'} B_{k i'j'}  with A upper-
    index-free (lower) and B lower."""
    g = eval_metric(spec, X, order=0)[0]
    gi = np.linalg.inv(g)
    sq = np.sqrt(np.linalg.det(g))
    return float(np.einsum("n,n,nkij,nia,njb,nkab->", weights, sq, A, gi, gi, B))


def pair_on_boundary(data: BoundaryData, a, b):
    return float(np.einsum("n,nk,nk->", data.weights, a, b))


# ---------------------------------------------------------------------------
# normal operator M = I^dagger I


def _smooth_step(r, eps2):
    """chi_eps2: 1 on [0, eps2], 0 beyond 2 eps2, smooth in between."""
    u = np.clip((np.asarray(r) - eps2) / eps2, 0.0, 1.0)
    a = np.where(u > 0, np.exp(-1.0 / np.maximum(u, 1e-300)), 0.0)
    b = np.where(u < 1, np.exp(-1.0 / np.maximum(1 - u, 1e-300)), 0.0)
    return b / (a + b)


def normal_M_fiber(spec, Pi: WeightedTensorField, X, split="all", eps2=0.2, fiber_n=128, radial_n=64,
                   T=None, tol=DEFAULT_TOL, alpha: CutoffAlpha | None = None, r_max=None):
    """Fiber-kernel form of M Pi at points X (P, 2d, d, d), lower indices:
    int_{S_x} int_R Phi(x,xi)^T Phi(H^t(x,xi)) Pi(x(t))(xi(t),xi(t)) dt xi_i xi_j dmu_x
    with Phi(H^t) = Phi(x,xi) Psi_x(t)^{-1}.  Each half line t > 0, t < 0 uses
    radial_n Gauss-Legendre nodes on (0, r_max); ``split`` multiplies by
    chi_eps2(|t|) (near), 1 - chi_eps2 (far) or 1 (all)."""
    X = np.atleast_2d(X)
    P, d = X.shape
    T = T if T is not None else 2 * spec.domain.radius + 1
    r_max = r_max if r_max is not None else T
    z, wz = np.polynomial.legendre.leggauss(radial_n)
    r = 0.5 * r_max * (z + 1)
    wr = 0.5 * r_max * wz
    chi = _smooth_step(r, eps2)
    if split == "near":
        wr = wr * chi
    elif split == "far":
        wr = wr * (1 - chi)
    elif split != "all":
        raise ValueError("split must be all, near or far")
    xis, w = fiber_directions(spec, X, fiber_n)
    q = xis.shape[1]
    Xr = np.repeat(X, q, axis=0)
    XI = xis.reshape(-1, d)
    fr = rays_through(spec, Xr, XI, T, tol)
    a2 = np.ones(len(Xr)) if alpha is None else alpha(fr.entry_x, fr.entry_xi) ** 2
    Rm = reversal(d)
    acc = np.zeros((len(Xr), 2 * d))
    for sign in (1.0, -1.0):
        st, Psi, _, _ = flow_batch(spec, Xr, sign * XI, r, tol, transport=True)
        vals = Pi(st.reshape(-1, 2 * d)[:, :d])
        vv = st.reshape(-1, 2 * d)[:, d:]
        integ = np.einsum("nkij,ni,nj->nk", vals, vv, vv).reshape(len(Xr), radial_n, 2 * d)
        if sign < 0:
            # Psi_x(-r) = R Psi_b(r) R, so Psi_x(-r)^{-1} y = R Psi_b(r)^{-1} R y
            integ = integ @ Rm
        live = np.any(integ != 0, axis=2)
        y = np.zeros_like(integ)
        if live.any():
            y[live] = np.linalg.solve(Psi[live], integ[live][..., None])[..., 0]
        if sign < 0:
            y = y @ Rm
        acc += np.einsum("q,nqk->nk", wr, y)
    val = np.einsum("nji,njl,nl->ni", fr.phi, fr.phi, acc) * a2[:, None]
    low = lower(spec, Xr, XI)
    out = np.einsum("nk,ni,nj->nkij", val, low, low).reshape(P, q, 2 * d, d, d)
    return np.einsum("q,pqkij->pkij", w, out)


def normal_M_composed(spec, Pi: WeightedTensorField, X, fiber_n=128, quad_n=512, T=None,
                      tol=DEFAULT_TOL, alpha: CutoffAlpha | None = None):
    """M Pi = I^dagger(alpha^2 I Pi): the transform evaluated at the entry of
    every fiber ray, then the adjoint fiber integral."""
    X = np.atleast_2d(X)
    P, d = X.shape
    T = T if T is not None else 2 * spec.domain.radius + 1
    xis, w = fiber_directions(spec, X, fiber_n)
    q = xis.shape[1]
    Xr = np.repeat(X, q, axis=0)
    XI = xis.reshape(-1, d)
    fr = rays_through(spec, Xr, XI, T, tol)
    hv = transform_I_batch(spec, Pi, fr.entry_x, fr.entry_xi, T, quad_n, tol)
    if alpha is not None:
        hv = hv * alpha(fr.entry_x, fr.entry_xi)[:, None] ** 2
    val = np.einsum("nji,nj->ni", fr.phi, hv)
    low = lower(spec, Xr, XI)
    out = np.einsum("nk,ni,nj->nkij", val, low, low).reshape(P, q, 2 * d, d, d)
    return np.einsum("q,pqkij->pkij", w, out)


# ---------------------------------------------------------------------------
# adjoint of L and the normal operator N


def l_adjoint_point(spec, u_fn, x, h=1e-3):
    """(L^dagger u)(x) for a d-component field u with lower indices, adjoint
    with respect to the weighted pairings on S(tau_2 M, R^d) and S(tau_2 M).
    Derivatives of Z^{l,ij} = g^{lk} g^{ii'} g^{jj'} u_{k i'j'} sqrt(det g) are
    central differences with step h."""
    x = np.asarray(x, dtype=float)
    d = len(x)
    pts = [x]
    for a in range(d):
        e = np.zeros(d)
        e[a] = h
        pts += [x + e, x - e]
    pts = np.array(pts)
    U = u_fn(pts)  # (1 + 2d, d, d, d)
    g, dg, _ = eval_metric(spec, pts, order=1, check_domain=False)
    gi = np.linalg.inv(g)
    sq = np.sqrt(np.linalg.det(g))
    Z = np.einsum("n,nlk,nia,njb,nkab->nlij", sq, gi, gi, gi, U)
    dZ = np.stack([(Z[1 + 2 * a] - Z[2 + 2 * a]) / (2 * h) for a in range(d)], -1)  # [l,i,j,m]
    G, _ = christoffel_from_metric(g[:1], dg[:1])
    G = G[0]
    Z0 = Z[0]
    Bm = -np.einsum("biai->ab", dZ)
    Bm = 0.5 * (Bm + Bm.T)
    Bm += 0.5 * np.einsum("labl->ab", dZ)
    C = np.einsum("aij,bij->ab", G, Z0)
    Bm -= 0.5 * (C + C.T)
    return g[0] @ Bm @ g[0] / sq[0]


def normal_N_point(spec, f, x, alpha: CutoffAlpha | None = None, h=1e-3, **kw):
    """N f(x) = (iota L)^dagger M_alpha (iota L f)(x) via the fiber-kernel M."""
    Pi = lift_iota(l_operator(spec, f))
    d = spec.dim

    def u_fn(pts):
        return normal_M_fiber(spec, Pi, pts, alpha=alpha, **kw)[:, d:]

    return l_adjoint_point(spec, u_fn, x, h)


def random_weighted_field(dim, m, rng=None, support_radius=0.7, n_bumps=2, width=(0.2, 0.35)):
    """Analytic m-component field with cut-off Gaussian bumps (test fields)."""
    from .metric_model import Bump, BumpTensorField

    rng = np.random.default_rng(rng)
    comps = []
    for _ in range(m):
        bumps = []
        for _ in range(n_bumps):
            c = rng.uniform(-0.35, 0.35, dim)
            a = rng.normal(size=(dim, dim))
            bumps.append(Bump(tuple(c), float(rng.uniform(*width)), (a + a.T) / 2, conformal=False))
        comps.append(BumpTensorField(dim, tuple(bumps), support_radius))

    def fn(x):
        return np.stack([c.evaluate(x, 0)[0] for c in comps], axis=1)

    return WeightedTensorField(m, dim, fn, support_radius)
