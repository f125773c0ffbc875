"""Compiled per-point kernels for the geodesic spray and its variational
equation.  The numpy implementation in ``metric_model``/``geodesic_flow`` is the reference;
tests compare the two."""
from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, error_model="numpy")
def _inverse(g, out):
    d = g.shape[0]
    if d == 2:
        det = g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]
        out[0, 0] = g[1, 1] / det
        out[1, 1] = g[0, 0] / det
        out[0, 1] = -g[0, 1] / det
        out[1, 0] = -g[1, 0] / det
    elif d == 3:
        c00 = g[1, 1] * g[2, 2] - g[1, 2] * g[2, 1]
        c01 = g[1, 2] * g[2, 0] - g[1, 0] * g[2, 2]
        c02 = g[1, 0] * g[2, 1] - g[1, 1] * g[2, 0]
        det = g[0, 0] * c00 + g[0, 1] * c01 + g[0, 2] * c02
        out[0, 0] = c00 / det
        out[1, 0] = c01 / det
        out[2, 0] = c02 / det
        out[0, 1] = (g[0, 2] * g[2, 1] - g[0, 1] * g[2, 2]) / det
        out[1, 1] = (g[0, 0] * g[2, 2] - g[0, 2] * g[2, 0]) / det
        out[2, 1] = (g[0, 1] * g[2, 0] - g[0, 0] * g[2, 1]) / det
        out[0, 2] = (g[0, 1] * g[1, 2] - g[0, 2] * g[1, 1]) / det
        out[1, 2] = (g[0, 2] * g[1, 0] - g[0, 0] * g[1, 2]) / det
        out[2, 2] = (g[0, 0] * g[1, 1] - g[0, 1] * g[1, 0]) / det
    else:
        out[:, :] = np.linalg.inv(g)


@njit(cache=True, error_model="numpy")
def _metric_point(x, centers, widths, amps, rad, steep, order, g, dg, ddg, dP, ddP, diff, dchi, dG):
    """Accumulate g, dg, ddg at one point.  Returns False when every bump is
    cut off at x (then g = I and derivatives are zero)."""
    d = x.shape[0]
    for i in range(d):
        for j in range(d):
            g[i, j] = 1.0 if i == j else 0.0
            for m in range(d):
                dg[i, j, m] = 0.0
                if order >= 2:
                    for k in range(d):
                        ddg[i, j, m, k] = 0.0
    r2 = 0.0
    for i in range(d):
        r2 += x[i] * x[i]
    live = False
    for b in range(widths.shape[0]):
        a2 = rad[b] * rad[b]
        gap = a2 - r2
        if gap <= 0.0:
            continue
        s2 = steep[b] * steep[b]
        expo = -s2 * r2 / (a2 * gap)
        if expo <= -700.0:
            continue
        live = True
        chi = np.exp(expo)
        p1 = -s2 / (gap * gap)
        p2 = -2.0 * s2 / (gap * gap * gap)
        w2 = widths[b] * widths[b]
        q = 0.0
        for i in range(d):
            diff[i] = x[i] - centers[b, i]
            q += diff[i] * diff[i]
        G = np.exp(-q / (2.0 * w2))
        P = chi * G
        for i in range(d):
            dchi[i] = 2.0 * chi * p1 * x[i]
            dG[i] = -G * diff[i] / w2
            dP[i] = dchi[i] * G + chi * dG[i]
        if order >= 2:
            for i in range(d):
                for j in range(d):
                    dd_chi = chi * (4.0 * (p1 * p1 + p2) * x[i] * x[j] + (2.0 * p1 if i == j else 0.0))
                    dd_G = G * (diff[i] * diff[j] / (w2 * w2) - (1.0 / w2 if i == j else 0.0))
                    ddP[i, j] = dd_chi * G + dchi[i] * dG[j] + dG[i] * dchi[j] + chi * dd_G
        for i in range(d):
            for j in range(d):
                a = amps[b, i, j]
                if a == 0.0:
                    continue
                g[i, j] += P * a
                for m in range(d):
                    dg[i, j, m] += dP[m] * a
                    if order >= 2:
                        for k in range(d):
                            ddg[i, j, m, k] += ddP[m, k] * a
    return live


@njit(cache=True, error_model="numpy")
def spray_rhs(y, centers, widths, amps, rad, steep, transport, out):
    """Right-hand side of (x, xi[, Psi]) for every row of y."""
    N = y.shape[0]
    d = centers.shape[1]
    D = 2 * d
    order = 2 if transport else 1
    g = np.empty((d, d))
    dg = np.empty((d, d, d))
    ddg = np.empty((d, d, d, d))
    low = np.empty((d, d, d))
    gam = np.empty((d, d, d))
    dlow = np.empty((d, d, d, d))
    dgam = np.empty((d, d, d, d))
    dginv = np.empty((d, d, d))
    A = np.empty((D, D))
    ginv = np.empty((d, d))
    dP = np.empty(d)
    ddP = np.empty((d, d))
    diff = np.empty(d)
    dchi = np.empty(d)
    dG = np.empty(d)
    for n in range(N):
        x = y[n, :d]
        xi = y[n, d:D]
        for i in range(d):
            out[n, i] = xi[i]
        live = _metric_point(x, centers, widths, amps, rad, steep, order, g, dg, ddg, dP, ddP, diff, dchi, dG)
        if not live:
            for i in range(d):
                out[n, d + i] = 0.0
            if transport:
                # A = [[0, I], [0, 0]]: top rows of Psi' are the bottom rows of Psi
                for r in range(D):
                    for c in range(D):
                        if r < d:
                            out[n, D + r * D + c] = y[n, D + (r + d) * D + c]
                        else:
                            out[n, D + r * D + c] = 0.0
            continue
        _inverse(g, ginv)
        for l in range(d):
            for i in range(d):
                for j in range(d):
                    low[l, i, j] = 0.5 * (dg[j, l, i] + dg[i, l, j] - dg[i, j, l])
        for k in range(d):
            for i in range(d):
                for j in range(d):
                    s = 0.0
                    for l in range(d):
                        s += ginv[k, l] * low[l, i, j]
                    gam[k, i, j] = s
        for k in range(d):
            s = 0.0
            for i in range(d):
                for j in range(d):
                    s += gam[k, i, j] * xi[i] * xi[j]
            out[n, d + k] = -s
        if not transport:
            continue
        for l in range(d):
            for i in range(d):
                for j in range(d):
                    for m in range(d):
                        dlow[l, i, j, m] = 0.5 * (ddg[j, l, i, m] + ddg[i, l, j, m] - ddg[i, j, l, m])
        # d_m g^{kl} = -g^{ka} d_m g_ab g^{bl}
        for k in range(d):
            for l in range(d):
                for m in range(d):
                    s = 0.0
                    for a in range(d):
                        for b in range(d):
                            s += ginv[k, a] * dg[a, b, m] * ginv[b, l]
                    dginv[k, l, m] = -s
        for k in range(d):
            for i in range(d):
                for j in range(d):
                    for m in range(d):
                        s = 0.0
                        for l in range(d):
                            s += dginv[k, l, m] * low[l, i, j] + ginv[k, l] * dlow[l, i, j, m]
                        dgam[k, i, j, m] = s
        for r in range(D):
            for c in range(D):
                A[r, c] = 0.0
        for i in range(d):
            A[i, d + i] = 1.0
        for k in range(d):
            for m in range(d):
                s = 0.0
                t = 0.0
                for i in range(d):
                    t += gam[k, m, i] * xi[i]
                    for j in range(d):
                        s += dgam[k, i, j, m] * xi[i] * xi[j]
                A[d + k, m] = -s
                A[d + k, d + m] = -2.0 * t
        for r in range(D):
            for c in range(D):
                s = 0.0
                for q in range(D):
                    s += A[r, q] * y[n, D + q * D + c]
                out[n, D + r * D + c] = s
