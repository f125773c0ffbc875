"""Batched adaptive Runge-Kutta integration for autonomous systems.

Every trajectory in a batch carries its own step size; states at requested
output times come from the 7th order continuous extension of the method.
The Dormand-Prince 8(5,3) tableau and its dense-output coefficients are
taken from
``scipy.integrate.DOP853`` so that the coefficients are not re-typed here.
In lockstep mode all trajectories share one step sequence, which makes the
discrete flow map a smooth function of the initial data (used for finite
difference checks of the variational equation).
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.integrate import DOP853

_A = np.asarray(DOP853.A, dtype=float)
_B = np.asarray(DOP853.B, dtype=float)
_E3 = np.asarray(DOP853.E3, dtype=float)
_E5 = np.asarray(DOP853.E5, dtype=float)
_STAGES = int(DOP853.n_stages)
_A_EXTRA = np.asarray(DOP853.A_EXTRA, dtype=float)
_D = np.asarray(DOP853.D, dtype=float)
_N_EXT = _STAGES + 1 + len(_A_EXTRA)
_EXPONENT = -1.0 / 8.0
SAFETY, MIN_FACTOR, MAX_FACTOR = 0.9, 0.2, 10.0


class IntegrationError(RuntimeError):
    pass


@dataclass
class BatchResult:
    y: np.ndarray  # (N, K, n) states at the output times
    t_escape: np.ndarray  # (N,) time at which escape was detected, nan if never
    y_escape: np.ndarray  # (N, n) state at escape (nan rows if never)
    n_steps: int


def _step(rhs, y, f0, h):
    """One DOP853 step for a batch.  Returns y_new, f_new, error vectors."""
    K = np.empty((_N_EXT,) + y.shape)
    K[0] = f0
    hh = h[:, None]
    for s in range(1, _STAGES):
        dy = np.tensordot(_A[s, :s], K[:s], axes=(0, 0))
        K[s] = rhs(y + hh * dy)
    y_new = y + hh * np.tensordot(_B, K[:_STAGES], axes=(0, 0))
    f_new = rhs(y_new)
    K[_STAGES] = f_new
    err5 = np.tensordot(_E5, K[:_STAGES + 1], axes=(0, 0))
    err3 = np.tensordot(_E3, K[:_STAGES + 1], axes=(0, 0))
    return y_new, f_new, err5, err3, K


def _dense(rhs, y_old, y_new, K, h):
    """Interpolant coefficients F (7, M, n) of the continuous extension."""
    hh = h[:, None]
    for s, a in enumerate(_A_EXTRA, start=_STAGES + 1):
        K[s] = rhs(y_old + hh * np.tensordot(a[:s], K[:s], axes=(0, 0)))
    dy = y_new - y_old
    F = np.empty((3 + len(_D),) + y_old.shape)
    F[0] = dy
    F[1] = hh * K[0] - dy
    F[2] = 2.0 * dy - hh * (K[_STAGES] + K[0])
    F[3:] = hh[None] * np.tensordot(_D, K, axes=(1, 0))
    return F


def _dense_eval(F, y_old, theta):
    out = np.zeros_like(y_old)
    th = theta[:, None]
    for i, f in enumerate(F[::-1]):
        out += f
        out *= th if i % 2 == 0 else (1.0 - th)
    return out + y_old


def _error_norm(err5, err3, h, y, y_new, rtol, atol):
    scale = atol + np.maximum(np.abs(y), np.abs(y_new)) * rtol
    e5 = np.sum((err5 / scale) ** 2, axis=1)
    e3 = np.sum((err3 / scale) ** 2, axis=1)
    denom = e5 + 0.01 * e3
    out = np.zeros_like(e5)
    nz = denom > 0
    out[nz] = np.abs(h[nz]) * e5[nz] / np.sqrt(denom[nz] * y.shape[1])
    return out


def integrate(
    rhs,
    y0,
    t_out,
    rtol=1e-10,
    atol=1e-10,
    escaped=None,
    propagate=None,
    lockstep=False,
    h_init=0.02,
    h_max=0.25,
    max_steps=200000,
):
    """Integrate y' = rhs(y) for a batch of initial states.

    y0: (N, n); t_out: (K,) nondecreasing, t_out[0] >= 0, common to all rows.
    escaped(y) -> bool mask marks states from which the solution is known in
    closed form; propagate(y, dt) -> states advanced by dt, with y of shape
    (M, n), dt of shape (M, K) and result (M, K, n).  Once a row escapes its
    remaining outputs come from propagate.
    """
    y0 = np.atleast_2d(np.asarray(y0, dtype=float))
    t_out = np.asarray(t_out, dtype=float).ravel()
    N, n = y0.shape
    K = len(t_out)
    Y = np.full((N, K, n), np.nan)
    t_esc = np.full(N, np.nan)
    y_esc = np.full((N, n), np.nan)
    if N == 0 or K == 0:
        return BatchResult(Y, t_esc, y_esc, 0)
    if np.any(np.diff(t_out) < 0) or t_out[0] < 0:
        raise ValueError("output times must be nondecreasing and >= 0")

    t = np.zeros(N)
    y = y0.copy()
    k = np.zeros(N, dtype=int)
    h = np.full(N, float(h_init))

    def record_exact(idx):
        while len(idx):
            idx = idx[k[idx] < K]
            idx = idx[t_out[k[idx]] <= t[idx]]
            Y[idx, k[idx]] = y[idx]
            k[idx] += 1

    def escape(idx):
        if escaped is None or len(idx) == 0:
            return
        e = idx[escaped(y[idx])]
        if len(e) == 0:
            return
        t_esc[e] = t[e]
        y_esc[e] = y[e]
        dt = t_out[None, :] - t[e][:, None]
        later = np.arange(K)[None, :] >= k[e][:, None]
        full = propagate(y[e], np.where(later, dt, 0.0))
        rows, cols = np.nonzero(later)
        Y[e[rows], cols] = full[rows, cols]
        k[e] = K

    record_exact(np.arange(N))
    escape(np.arange(N))
    active = np.flatnonzero(k < K)
    f = np.full((N, n), np.nan)
    if len(active):
        f[active] = rhs(y[active])
    t_end = t_out[-1]
    steps = 0
    while len(active):
        steps += 1
        if steps > max_steps:
            raise IntegrationError("maximum number of steps exceeded")
        gap = t_end - t[active]
        h_prop = np.minimum(h[active], h_max)
        if lockstep:
            h_prop = np.full(len(active), h_prop.min())
        clipped = gap <= h_prop * (1 + 1e-12)
        h_try = np.where(clipped, gap, h_prop)
        if np.any(h_try <= 1e-14 * np.maximum(1.0, np.abs(t[active]))):
            raise IntegrationError("step size underflow")
        ya = y[active]
        y_new, f_new, e5, e3, Kst = _step(rhs, ya, f[active], h_try)
        err = _error_norm(e5, e3, h_try, ya, y_new, rtol, atol)
        if lockstep:
            emax = np.full(len(active), err.max())
        else:
            emax = err
        ok = emax <= 1.0
        with np.errstate(divide="ignore"):
            fac = np.where(emax == 0, MAX_FACTOR, SAFETY * emax**_EXPONENT)
        fac = np.clip(fac, MIN_FACTOR, MAX_FACTOR)
        fac = np.where(ok, fac, np.minimum(fac, 1.0))
        new_h = h_try * fac
        # a clipped accepted step says nothing against the earlier proposal
        keep = ok & clipped & (fac >= 1.0)
        h[active] = np.where(keep, np.maximum(h[active], new_h), new_h)
        if ok.any():
            loc = np.flatnonzero(ok)
            acc = active[loc]
            t_new = np.where(clipped[loc], t_end, t[acc] + h_try[loc])
            # outputs strictly inside the step come from the interpolant
            inner = (k[acc] < K) & (t_out[np.minimum(k[acc], K - 1)] < t_new)
            if inner.any():
                il = loc[inner]
                ia = acc[inner]
                F = _dense(rhs, ya[il], y_new[il], Kst[:, il], h_try[il])
                while True:
                    live = (k[ia] < K)
                    live[live] &= t_out[k[ia[live]]] < t_new[inner][live]
                    if not live.any():
                        break
                    j = np.flatnonzero(live)
                    tt = t_out[k[ia[j]]]
                    theta = (tt - t[ia[j]]) / h_try[il[j]]
                    Y[ia[j], k[ia[j]]] = _dense_eval(F[:, j], ya[il[j]], theta)
                    k[ia[j]] += 1
            t[acc] = t_new
            y[acc] = y_new[loc]
            f[acc] = f_new[loc]
            record_exact(acc)
            escape(acc[k[acc] < K])
        active = np.flatnonzero(k < K)
    return BatchResult(Y, t_esc, y_esc, steps)
