"""Geodesic flow on phase space, variational transport, exit data and the
boundary identities relating the flow at a fixed horizon to the scattering
relation.

State layout for batched integration: ``[x (d), xi (d), vec(Psi) (4 d^2)]``
where the transport block is optional.  Psi is the forward variational flow
(Psi' = A Psi, Psi(0) = I).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .integrate import integrate
from .metric_model import MetricSpec, Domain, _raw_metric, christoffel_from_metric

DEFAULT_TOL = 1e-10


@dataclass
class PhasePoint:
    x: np.ndarray
    xi: np.ndarray

    def __post_init__(self):
        self.x = np.asarray(self.x, dtype=float)
        self.xi = np.asarray(self.xi, dtype=float)

    def as_array(self) -> np.ndarray:
        return np.concatenate([self.x, self.xi])

    @staticmethod
    def from_array(z) -> "PhasePoint":
        z = np.asarray(z, dtype=float)
        d = len(z) // 2
        return PhasePoint(z[:d].copy(), z[d:2 * d].copy())


class Connection:
    """Christoffel symbols of a metric spec, optionally plus ``eps`` times an
    extra field ``extra(x, deriv) -> (G, dG)`` with G[..., k, i, j]."""

    def __init__(self, spec: MetricSpec, extra=None, eps: float = 0.0, extra_radius: float | None = None):
        spec.check_positive()
        self.spec = spec
        self.dim = spec.dim
        self.extra = extra
        self.eps = float(eps)
        # Gamma vanishes identically outside this radius
        self.support_radius = spec.domain.inner_radius
        if extra is not None and extra_radius is not None:
            self.support_radius = max(self.support_radius, extra_radius)
        self.flat = spec.is_euclidean and (extra is None or self.eps == 0.0)

    def __call__(self, x, deriv: bool = False):
        x = np.atleast_2d(x)
        n, d = x.shape
        gam = np.zeros((n, d, d, d))
        dgam = np.zeros((n, d, d, d, d)) if deriv else None
        if self.flat:
            return gam, dgam
        inside = np.einsum("ni,ni->n", x, x) < self.support_radius**2
        if not inside.any():
            return gam, dgam
        xi_ = x[inside]
        if not self.spec.is_euclidean:
            g, dg, ddg = _raw_metric(self.spec, xi_, order=2 if deriv else 1)
            G, dG = christoffel_from_metric(g, dg, ddg if deriv else None)
            gam[inside] = G
            if deriv:
                dgam[inside] = dG
        if self.extra is not None and self.eps != 0.0:
            G, dG = self.extra(xi_, deriv)
            gam[inside] += self.eps * G
            if deriv:
                dgam[inside] += self.eps * dG
        return gam, dgam


def as_connection(obj) -> Connection:
    return obj if isinstance(obj, Connection) else Connection(obj)


def _rhs_factory(conn: Connection, transport: bool, compiled: bool = True):
    d = conn.dim
    if compiled and conn.extra is None and not conn.flat:
        from ._kernels import spray_rhs

        arrays = conn.spec.flat_arrays

        def fast(y):
            out = np.empty_like(y)
            spray_rhs(y, *arrays, transport, out)
            return out

        return fast

    def rhs(y):
        x = y[:, :d]
        xi = y[:, d:2 * d]
        G, dG = conn(x, deriv=transport)
        out = np.empty_like(y)
        out[:, :d] = xi
        out[:, d:2 * d] = -np.einsum("nkij,ni,nj->nk", G, xi, xi)
        if transport:
            A = jacobian_blocks(G, dG, xi)
            P = y[:, 2 * d:].reshape(-1, 2 * d, 2 * d)
            out[:, 2 * d:] = np.matmul(A, P).reshape(len(y), -1)
        return out

    return rhs


def jacobian_blocks(G, dG, xi):
    """Jacobian A of the spray (xi, -Gamma xi xi) for a batch."""
    n, d = xi.shape
    A = np.zeros((n, 2 * d, 2 * d))
    A[:, :d, d:] = np.eye(d)
    A[:, d:, :d] = -np.einsum("nkijm,ni,nj->nkm", dG, xi, xi)
    A[:, d:, d:] = -2.0 * np.einsum("nkmj,nj->nkm", G, xi)
    return A


def vector_field(spec, p: PhasePoint):
    """Spray H = (xi, -Gamma^k_ij xi^i xi^j) and its Jacobian A at p."""
    conn = as_connection(spec)
    x = np.atleast_2d(p.x)
    xi = np.atleast_2d(p.xi)
    G, dG = conn(x, deriv=True)
    H = np.concatenate([xi[0], -np.einsum("kij,i,j->k", G[0], xi[0], xi[0])])
    return H, jacobian_blocks(G, dG, xi)[0]


def _escape_factory(radius: float, d: int):
    r2 = radius * radius

    def escaped(y):
        x = y[:, :d]
        xi = y[:, d:2 * d]
        xx = np.einsum("ni,ni->n", x, x)
        xv = np.einsum("ni,ni->n", x, xi)
        vv = np.einsum("ni,ni->n", xi, xi)
        outside = xx >= r2
        # leaving, or the straight line never meets the support ball
        miss = xx - np.where(xv < 0, xv * xv / np.maximum(vv, 1e-300), 0.0) >= r2
        return outside & ((xv >= 0) | miss)

    return escaped


def _flat_propagate_factory(d: int, transport: bool):
    def propagate(y, dt):
        # y (M, n), dt (M, K) -> (M, K, n)
        out = np.repeat(y[:, None, :], dt.shape[1], axis=1)
        out[:, :, :d] += dt[:, :, None] * y[:, None, d:2 * d]
        if transport:
            P = y[:, 2 * d:].reshape(-1, 1, 2 * d, 2 * d)
            Q = np.repeat(P, dt.shape[1], axis=1).copy()
            Q[:, :, :d, :] += dt[:, :, None, None] * P[:, :, d:, :]
            out[:, :, 2 * d:] = Q.reshape(y.shape[0], dt.shape[1], -1)
        return out

    return propagate


def flow_batch(spec, X, Xi, times, tol=DEFAULT_TOL, transport=False, lockstep=False,
               shortcut=True, chunk=4096, h_max=0.25, compiled=True):
    """Flow a batch of phase points to the common nonnegative output times.

    Returns (states (N, K, 2d), Psi (N, K, 2d, 2d) or None, t_escape (N,),
    y_escape (N, n)).  With ``shortcut`` the rays are continued in closed form
    once they are outside the support of Gamma and moving away from it.
    """
    conn = as_connection(spec)
    d = conn.dim
    X = np.atleast_2d(np.asarray(X, dtype=float))
    Xi = np.atleast_2d(np.asarray(Xi, dtype=float))
    times = np.asarray(times, dtype=float).ravel()
    N = len(X)
    n = 2 * d + (4 * d * d if transport else 0)
    y0 = np.zeros((N, n))
    y0[:, :d] = X
    y0[:, d:2 * d] = Xi
    if transport:
        y0[:, 2 * d:] = np.eye(2 * d).ravel()
    rhs = _rhs_factory(conn, transport, compiled)
    esc = _escape_factory(conn.support_radius, d) if shortcut else None
    prop = _flat_propagate_factory(d, transport)
    if conn.flat:
        # exact straight lines, no integration needed
        Y = prop(y0, np.broadcast_to(times, (N, len(times))).copy())
        t_esc = np.zeros(N)
        y_esc = y0.copy()
    else:
        Y = np.empty((N, len(times), n))
        t_esc = np.empty(N)
        y_esc = np.empty((N, n))
        step = N if lockstep else chunk
        for s in range(0, N, max(step, 1)):
            sl = slice(s, min(N, s + step))
            res = integrate(rhs, y0[sl], times, rtol=tol, atol=tol, escaped=esc, propagate=prop,
                            lockstep=lockstep, h_max=h_max)
            Y[sl], t_esc[sl], y_esc[sl] = res.y, res.t_escape, res.y_escape
    states = Y[..., :2 * d]
    Psi = Y[..., 2 * d:].reshape(N, len(times), 2 * d, 2 * d) if transport else None
    return states, Psi, t_esc, y_esc


def _flip(z, d):
    z = np.array(z, dtype=float, copy=True)
    z[..., d:2 * d] *= -1
    return z


def flow(spec, p: PhasePoint, t: float, tol=DEFAULT_TOL) -> PhasePoint:
    """H^t(p); negative t uses the reversibility H^{-t}(x, xi) = R H^t(x, -xi)."""
    d = len(p.x)
    if t >= 0:
        s, _, _, _ = flow_batch(spec, p.x[None], p.xi[None], [t], tol)
        return PhasePoint.from_array(s[0, 0])
    s, _, _, _ = flow_batch(spec, p.x[None], -p.xi[None], [-t], tol)
    return PhasePoint.from_array(_flip(s[0, 0], d))


def euclidean_flow(z, t):
    """Euclidean flow H_0^t on phase arrays (..., 2d) for scalar or array t."""
    z = np.asarray(z, dtype=float)
    d = z.shape[-1] // 2
    out = z.copy()
    out[..., :d] = z[..., :d] + np.asarray(t)[..., None] * z[..., d:]
    return out


def exit_parameter(x, xi, radius):
    """Largest root tau of |x + tau xi|^2 = radius^2 (time to leave the ball
    moving forward); nan when the line misses the sphere."""
    x = np.atleast_2d(x)
    xi = np.atleast_2d(xi)
    a = np.einsum("ni,ni->n", xi, xi)
    b = np.einsum("ni,ni->n", x, xi)
    c = np.einsum("ni,ni->n", x, x) - radius * radius
    disc = b * b - a * c
    with np.errstate(invalid="ignore"):
        return np.where(disc >= 0, (-b + np.sqrt(np.maximum(disc, 0))) / a, np.nan)


def kappa(domain: Domain, q: PhasePoint):
    """Smallest t >= 0 with |q.x - t q.xi| = R, or None if the backward ray
    misses the closed ball."""
    R = domain.radius
    x, v = q.x, q.xi
    a = v @ v
    b = x @ v
    c = x @ x - R * R
    # |x - t v|^2 = R^2  ->  a t^2 - 2 b t + c = 0
    disc = b * b - a * c
    if disc < 0:
        return None
    s = np.sqrt(disc)
    roots = sorted([(b - s) / a, (b + s) / a])
    tol = 1e-12 * max(1.0, R)
    for r in roots:
        if r >= -tol:
            return max(r, 0.0)
    return None


def kappa_batch(domain: Domain, Z):
    """Vectorized kappa on phase arrays (N, 2d); misses are nan."""
    Z = np.atleast_2d(Z)
    d = Z.shape[1] // 2
    x, v = Z[:, :d], Z[:, d:]
    R = domain.radius
    a = np.einsum("ni,ni->n", v, v)
    b = np.einsum("ni,ni->n", x, v)
    c = np.einsum("ni,ni->n", x, x) - R * R
    disc = b * b - a * c
    s = np.sqrt(np.maximum(disc, 0))
    r1, r2 = (b - s) / a, (b + s) / a
    tol = 1e-12 * max(1.0, R)
    out = np.where(r1 >= -tol, np.maximum(r1, 0), np.where(r2 >= -tol, np.maximum(r2, 0), np.nan))
    return np.where(disc >= 0, out, np.nan)


@dataclass
class GeodesicRecord:
    """Trajectory of one geodesic from an inward boundary point."""

    entry: PhasePoint
    T: float
    times: np.ndarray  # (K,)
    states: np.ndarray  # (K, 2d)
    transport: np.ndarray | None  # (K, 2d, 2d)
    exit_time: float
    exit_point: PhasePoint | None
    trapped: bool = False
    spec: MetricSpec | None = field(default=None, repr=False)

    @property
    def dim(self) -> int:
        return len(self.entry.x)

    def rows(self):
        """Rows (t, x, xi, vec Psi) for export."""
        parts = [self.times[:, None], self.states]
        if self.transport is not None:
            parts.append(self.transport.reshape(len(self.times), -1))
        return np.hstack(parts)


@dataclass
class RecordBatch:
    """Vectorized collection of geodesic records sharing output times."""

    entries: np.ndarray  # (N, 2d)
    T: float
    times: np.ndarray  # (K,)
    states: np.ndarray  # (N, K, 2d)
    transport: np.ndarray | None  # (N, K, 2d, 2d)
    exit_time: np.ndarray  # (N,)
    exit_state: np.ndarray  # (N, 2d)
    trapped: np.ndarray  # (N,) bool

    def record(self, i: int) -> GeodesicRecord:
        d = self.entries.shape[1] // 2
        ex = None if self.trapped[i] else PhasePoint.from_array(self.exit_state[i])
        return GeodesicRecord(PhasePoint.from_array(self.entries[i]), self.T, self.times,
                              self.states[i], None if self.transport is None else self.transport[i],
                              float(self.exit_time[i]), ex, bool(self.trapped[i]))


def trace_batch(spec, X0, Xi0, T, times=None, tol=DEFAULT_TOL, transport=True, margin=0.5,
                lockstep=False, chunk=4096):
    """Trace geodesics from boundary entries, recording states (and Psi) at
    ``times`` (default: 257 uniform samples of [0, T]) and exit data.

    The exit time solves |x(t)| = R on the straight segment that follows the
    last exit from the support of the metric perturbation.
    """
    conn = as_connection(spec)
    d = conn.dim
    R = conn.spec.domain.radius
    if times is None:
        times = np.linspace(0.0, T, 257)
    times = np.asarray(times, dtype=float)
    horizon = T * (1.0 + margin)
    t_all = np.append(times, horizon) if (len(times) == 0 or times[-1] < horizon) else times
    states, Psi, t_esc, y_esc = flow_batch(conn, X0, Xi0, t_all, tol, transport, lockstep, chunk=chunk)
    N = len(states)
    trapped = ~np.isfinite(t_esc)
    L = np.full(N, np.nan)
    ex = np.full((N, 2 * d), np.nan)
    ok = ~trapped
    if ok.any():
        tau = exit_parameter(y_esc[ok, :d], y_esc[ok, d:2 * d], R)
        L[ok] = t_esc[ok] + tau
        ex[ok] = euclidean_flow(y_esc[ok, :2 * d], tau)
    K = len(times)
    entries = np.hstack([np.atleast_2d(X0), np.atleast_2d(Xi0)])
    return RecordBatch(entries, float(T), times, states[:, :K], None if Psi is None else Psi[:, :K],
                       L, ex, trapped)


def trace(spec, entry: PhasePoint, T: float, tol=DEFAULT_TOL, times=None, transport=True) -> GeodesicRecord:
    """Trace a single geodesic; see ``trace_batch``."""
    b = trace_batch(spec, entry.x[None], entry.xi[None], T, times, tol, transport)
    rec = b.record(0)
    rec.spec = as_connection(spec).spec
    return rec


@dataclass
class ScatterResiduals:
    horizon: float
    flow_vs_scatter: float
    exit_time: float
    exit_point: float
    skipped: bool = False

    @property
    def max(self) -> float:
        return max(self.flow_vs_scatter, self.exit_time, self.exit_point)


def verify_flow_scatter_batch(spec, X0, Xi0, T, tol=DEFAULT_TOL):
    """Residuals of the three boundary identities for a batch of entries.

    H^T is integrated without the closed-form continuation so that the
    identities compare two independent computations:
      (a) |H^T - H_0^{T-L}(Sigma)|, (b) |L - (T - kappa(H^T))|,
      (c) |Sigma - H_0^{-kappa}(H^T)|.
    Entries tangent to the boundary are skipped (nan rows).
    """
    conn = as_connection(spec)
    dom = conn.spec.domain
    d = conn.dim
    X0 = np.atleast_2d(X0)
    Xi0 = np.atleast_2d(Xi0)
    nu = X0 / np.linalg.norm(X0, axis=1, keepdims=True)
    inward = np.einsum("ni,ni->n", nu, Xi0) < -1e-12
    rec = trace_batch(conn, X0, Xi0, T, times=[T], tol=tol, transport=False)
    HT, _, _, _ = flow_batch(conn, X0, Xi0, [T], tol, shortcut=False)
    HT = HT[:, 0]
    L, Sig = rec.exit_time, rec.exit_state
    a = np.linalg.norm(HT - euclidean_flow(Sig, T - L), axis=1)
    k = kappa_batch(dom, HT)
    b = np.abs(L - (T - k))
    c = np.linalg.norm(Sig - euclidean_flow(HT, -k), axis=1)
    out = np.stack([a, b, c], axis=1)
    out[~inward | rec.trapped] = np.nan
    return out, rec


def verify_flow_scatter(spec, entry: PhasePoint, T: float, tol=DEFAULT_TOL) -> ScatterResiduals:
    res, _ = verify_flow_scatter_batch(spec, entry.x[None], entry.xi[None], T, tol)
    if not np.all(np.isfinite(res[0])):
        return ScatterResiduals(T, np.nan, np.nan, np.nan, skipped=True)
    return ScatterResiduals(T, *map(float, res[0]))


def inward_unit(x, xi):
    """Normalize boundary directions to unit length (g = e on the boundary)."""
    xi = np.atleast_2d(xi)
    return xi / np.linalg.norm(xi, axis=1, keepdims=True)


def chord_entries(R, angles, impacts, dim=2):
    """Entries of parallel-beam lines: direction angle beta, signed impact p."""
    beta = np.asarray(angles, dtype=float)
    p = np.asarray(impacts, dtype=float)
    u = np.stack([np.cos(beta), np.sin(beta)], -1)
    w = np.stack([-np.sin(beta), np.cos(beta)], -1)
    x0 = p[:, None] * w - np.sqrt(R * R - p * p)[:, None] * u
    if dim == 2:
        return x0, u
    raise ValueError("chord_entries is planar")


def transport_derivative_check(spec, X0, Xi0, T, eps_list=(1e-3, 1e-4, 1e-5, 1e-6), rng=None, tol=DEFAULT_TOL):
    """Relative error of one-sided difference quotients of H^T against Psi(T) v
    for random unit directions v; returns (eps, max error over rays).

    Each ray and its perturbations are integrated in lockstep (shared steps),
    so the quotient differentiates the same discrete map and the error
    is the O(eps) truncation term rather than tolerance noise.
    """
    rng = np.random.default_rng(rng)
    X0 = np.atleast_2d(X0)
    Xi0 = np.atleast_2d(Xi0)
    N, d = X0.shape
    eps = np.asarray(eps_list, dtype=float)
    errs = np.zeros((N, len(eps)))
    for i in range(N):
        v = rng.normal(size=2 * d)
        v /= np.linalg.norm(v)
        z = np.concatenate([X0[i], Xi0[i]])
        Z = np.vstack([z, z[None] + eps[:, None] * v[None]])
        st, Psi, _, _ = flow_batch(spec, Z[:, :d], Z[:, d:], [T], tol, transport=True, lockstep=True,
                                   shortcut=False)
        ref = Psi[0, 0] @ v
        fd = (st[1:, 0] - st[0, 0]) / eps[:, None]
        errs[i] = np.linalg.norm(fd - ref, axis=1) / np.linalg.norm(ref)
    return eps, errs.max(axis=0)
