"""Compactly supported perturbations of the Euclidean metric on a ball.

The metric is ``g(x) = I + chi(|x|) * sum_b a_b * G_b(x)`` where ``G_b`` is a
Gaussian profile and ``chi`` is a smooth cutoff that vanishes identically for
``|x| >= inner_radius``.  All first and second derivatives are analytic.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property

import numpy as np


@dataclass(frozen=True)
class Domain:
    """Ball of radius ``radius`` with perturbations supported in ``inner_radius``."""

    radius: float = 1.0
    inner_radius: float = 0.9
    dimension: int = 2

    def __post_init__(self):
        if not (0.0 < self.inner_radius < self.radius):
            raise ValueError("need 0 < inner_radius < radius")
        if self.dimension < 2:
            raise ValueError("dimension must be >= 2")


@dataclass(frozen=True)
class Bump:
    """Gaussian bump with a constant symmetric amplitude matrix."""

    center: tuple
    width: float
    amplitude: object  # scalar for conformal bumps, nested d x d list otherwise
    conformal: bool = True

    def __post_init__(self):
        # tuples keep specs hashable (used as cache keys)
        object.__setattr__(self, "center", tuple(float(c) for c in np.ravel(self.center)))
        amp = self.amplitude
        if np.ndim(amp) == 0:
            amp = float(amp)
        else:
            amp = tuple(tuple(float(a) for a in row) for row in np.atleast_2d(amp))
        object.__setattr__(self, "amplitude", amp)
        object.__setattr__(self, "width", float(self.width))

    def matrix(self, d: int) -> np.ndarray:
        if self.conformal:
            if np.ndim(self.amplitude) != 0:
                raise ValueError("conformal bump needs a scalar amplitude")
            return float(self.amplitude) * np.eye(d)
        a = np.asarray(self.amplitude, dtype=float).reshape(d, d)
        if not np.allclose(a, a.T, atol=0, rtol=0):
            raise ValueError("amplitude matrix must be symmetric")
        return a


def cutoff(r2, inner_radius, steepness, order=2):
    """Cutoff chi as a function of q = |x|^2 with its first two q-derivatives
    expressed through phi(q) = log chi(q).

    Returns chi, phi', phi'' (arrays of the shape of ``r2``); all vanish where
    chi underflows, including the whole region q >= inner_radius**2.
    """
    r2 = np.asarray(r2, dtype=float)
    a2 = inner_radius * inner_radius
    s2 = steepness * steepness
    gap = a2 - r2
    # exponent below -700 underflows; treat as outside the support
    live = gap > 0
    safe_gap = np.where(live, gap, 1.0)
    expo = np.where(live, -s2 * r2 / (a2 * safe_gap), -np.inf)
    live &= expo > -700.0
    chi = np.where(live, np.exp(np.where(live, expo, 0.0)), 0.0)
    if order == 0:
        return chi, None, None
    p1 = np.where(live, -s2 / safe_gap**2, 0.0)
    p2 = np.where(live, -2.0 * s2 / safe_gap**3, 0.0)
    return chi, p1, p2


def bump_profiles(x, centers, widths, inner_radius, steepness, order=2):
    """Scalar profiles p_b(x) = chi(x) G_b(x) with gradients and Hessians.

    x: (N, d); centers: (B, d); widths: (B,).
    Returns P (N, B), dP (N, B, d), ddP (N, B, d, d); the derivative arrays
    are None when not requested by ``order``.
    """
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    centers = np.asarray(centers, dtype=float).reshape(-1, d)
    widths = np.asarray(widths, dtype=float).reshape(-1)
    r2 = np.einsum("ni,ni->n", x, x)
    chi, p1, p2 = cutoff(r2, inner_radius, steepness, order)
    diff = x[:, None, :] - centers[None, :, :]
    s2 = widths**2
    G = np.exp(-np.einsum("nbi,nbi->nb", diff, diff) / (2.0 * s2))
    P = chi[:, None] * G
    if order == 0:
        return P, None, None
    dchi = (chi * p1 * 2.0)[:, None] * x
    dG = -G[..., None] * diff / s2[None, :, None]
    dP = dchi[:, None, :] * G[..., None] + chi[:, None, None] * dG
    if order == 1:
        return P, dP, None
    eye = np.eye(d)
    ddchi = chi[:, None, None] * (
        (p1**2 + p2)[:, None, None] * 4.0 * x[:, :, None] * x[:, None, :]
        + (2.0 * p1)[:, None, None] * eye
    )
    ddG = G[..., None, None] * (
        diff[..., :, None] * diff[..., None, :] / (s2**2)[None, :, None, None]
        - eye / s2[None, :, None, None]
    )
    ddP = (
        ddchi[:, None] * G[..., None, None]
        + dchi[:, None, :, None] * dG[:, :, None, :]
        + dG[:, :, :, None] * dchi[:, None, None, :]
        + chi[:, None, None, None] * ddG
    )
    return P, dP, ddP


@dataclass(frozen=True)
class BumpTensorField:
    """Analytic symmetric 2-tensor field sum_b a_b chi(x) G_b(x).

    ``support_radius`` is the radius where the cutoff chi vanishes, so the
    field is supported in that closed ball.
    """

    dim: int
    bumps: tuple
    support_radius: float
    steepness: float = 1.0
    scale: float = 1.0

    @cached_property
    def _arrays(self):
        d = self.dim
        if not self.bumps:
            return np.zeros((0, d)), np.ones(0), np.zeros((0, d, d))
        centers = np.array([np.asarray(b.center, dtype=float) for b in self.bumps]).reshape(-1, d)
        widths = np.array([float(b.width) for b in self.bumps])
        amps = self.scale * np.array([b.matrix(d) for b in self.bumps])
        return centers, widths, amps

    def scaled(self, c: float) -> "BumpTensorField":
        return BumpTensorField(self.dim, self.bumps, self.support_radius, self.steepness, self.scale * c)

    def evaluate(self, x, order: int = 1):
        """Values f (N,d,d), df[..., i, j, m] = d_m f_ij, ddf[..., i, j, m, k]."""
        x = np.atleast_2d(np.asarray(x, dtype=float))
        n, d = x.shape
        centers, widths, amps = self._arrays
        if len(widths) == 0:
            return (np.zeros((n, d, d)), np.zeros((n, d, d, d)) if order >= 1 else None,
                    np.zeros((n, d, d, d, d)) if order >= 2 else None)
        P, dP, ddP = bump_profiles(x, centers, widths, self.support_radius, self.steepness, order)
        f = np.einsum("nb,bij->nij", P, amps)
        df = np.einsum("nbm,bij->nijm", dP, amps) if order >= 1 else None
        ddf = np.einsum("nbmk,bij->nijmk", ddP, amps) if order >= 2 else None
        return f, df, ddf


@dataclass(frozen=True)
class MetricSpec:
    """Analytic metric g = I + sum of cut-off Gaussian bumps.

    ``extra`` holds additional analytic tensor fields (used for perturbed
    metrics g + eps f); they are not part of the config file format.
    """

    domain: Domain = field(default_factory=Domain)
    bumps: tuple = ()
    steepness: float = 1.0
    extra: tuple = ()

    @property
    def dim(self) -> int:
        return self.domain.dimension

    @property
    def is_euclidean(self) -> bool:
        return len(self.bumps) == 0 and all(len(f.bumps) == 0 or f.scale == 0 for f in self.extra)

    @cached_property
    def base_field(self) -> BumpTensorField:
        return BumpTensorField(self.dim, tuple(self.bumps), self.domain.inner_radius, self.steepness)

    @cached_property
    def flat_arrays(self):
        """All bumps (base and extra fields) as arrays
        (centers, widths, amplitude matrices, cutoff radii, steepness)."""
        fields = [self.base_field] + list(self.extra)
        parts = [fl._arrays for fl in fields]
        centers = np.concatenate([p[0] for p in parts]).reshape(-1, self.dim)
        widths = np.concatenate([p[1][: len(p[0])] for p in parts])
        amps = np.concatenate([p[2] for p in parts]).reshape(-1, self.dim, self.dim)
        rad = np.concatenate([np.full(len(p[0]), fl.support_radius) for p, fl in zip(parts, fields)])
        steep = np.concatenate([np.full(len(p[0]), fl.steepness) for p, fl in zip(parts, fields)])
        return centers, widths, amps, rad, steep

    @cached_property
    def min_eigenvalue(self) -> float:
        return float(sample_min_eigenvalue(self))

    def check_positive(self):
        if self.min_eigenvalue <= 0.0:
            raise ValueError(
                f"metric is not positive definite (sampled min eigenvalue {self.min_eigenvalue:.3g})"
            )


def _raw_metric(spec: MetricSpec, x, order=2):
    x = np.atleast_2d(np.asarray(x, dtype=float))
    n, d = x.shape
    g, dg, ddg = spec.base_field.evaluate(x, order)
    g = g + np.eye(d)
    for fld in spec.extra:
        if fld.support_radius > spec.domain.inner_radius:
            raise ValueError("perturbation support exceeds inner_radius")
        f, df, ddf = fld.evaluate(x, order)
        g = g + f
        dg = None if df is None else dg + df
        ddg = None if ddf is None else ddg + ddf
    return g, dg, ddg


def sample_min_eigenvalue(spec: MetricSpec, n: int | None = None) -> float:
    """Smallest eigenvalue of g over a dense grid in the ball."""
    d = spec.dim
    R = spec.domain.radius
    if n is None:
        n = 81 if d == 2 else 31
    axes = [np.linspace(-R, R, n)] * d
    pts = np.stack(np.meshgrid(*axes, indexing="ij"), -1).reshape(-1, d)
    pts = pts[np.einsum("ni,ni->n", pts, pts) <= R * R]
    # bump centers are where extreme values usually sit
    centers = spec.base_field._arrays[0]
    if len(centers):
        pts = np.vstack([pts, centers[np.einsum("ni,ni->n", centers, centers) <= R * R]])
    lo = np.inf
    for chunk in np.array_split(pts, max(1, len(pts) // 20000)):
        g, _, _ = _raw_metric(spec, chunk, order=0)
        lo = min(lo, float(np.linalg.eigvalsh(g).min()))
    return lo


def eval_metric(spec: MetricSpec, x, order: int = 2, check_domain: bool = True):
    """Metric g, first derivatives dg[..., i, j, m] = d_m g_ij and second
    derivatives ddg[..., i, j, m, k] at points x of shape (N, d) or (d,).

    Raises ValueError for points outside the closed ball or for a metric that
    fails the positivity check.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = np.atleast_2d(x)
    if check_domain:
        R = spec.domain.radius
        if np.any(np.einsum("ni,ni->n", x2, x2) > R * R * (1 + 1e-12)):
            raise ValueError("point outside the closed domain")
    spec.check_positive()
    out = _raw_metric(spec, x2, order)
    if single:
        return tuple(None if a is None else a[0] for a in out)
    return out


@dataclass
class ChristoffelValue:
    gamma: np.ndarray  # (..., k, i, j)
    dgamma: np.ndarray | None = None  # (..., k, i, j, m)


def christoffel_from_metric(g, dg, ddg=None):
    """Gamma[..., k, i, j] and optionally dGamma[..., k, i, j, m] from metric
    derivatives (arrays with a leading batch axis)."""
    ginv = np.linalg.inv(g)
    # lowered symbol G_lij = 1/2 (d_i g_jl + d_j g_il - d_l g_ij)
    low = 0.5 * (
        np.einsum("njli->nlij", dg) + np.einsum("nilj->nlij", dg) - np.einsum("nijl->nlij", dg)
    )
    gamma = np.einsum("nkl,nlij->nkij", ginv, low)
    if ddg is None:
        return gamma, None
    dlow = 0.5 * (
        np.einsum("njlim->nlijm", ddg) + np.einsum("niljm->nlijm", ddg) - np.einsum("nijlm->nlijm", ddg)
    )
    # d_m g^{kl} = -g^{ka} d_m g_ab g^{bl}
    dginv = -np.einsum("nka,nabm,nbl->nklm", ginv, dg, ginv)
    dgamma = np.einsum("nklm,nlij->nkijm", dginv, low) + np.einsum("nkl,nlijm->nkijm", ginv, dlow)
    return gamma, dgamma


def christoffel(spec: MetricSpec, x, derivatives: bool = False, check_domain: bool = True):
    """Christoffel symbols Gamma^k_ij (array index order k, i, j) at x."""
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    g, dg, ddg = eval_metric(spec, np.atleast_2d(x), order=2 if derivatives else 1, check_domain=check_domain)
    gamma, dgamma = christoffel_from_metric(g, dg, ddg if derivatives else None)
    if single:
        return ChristoffelValue(gamma[0], None if dgamma is None else dgamma[0])
    return ChristoffelValue(gamma, dgamma)


@dataclass
class SupportReport:
    max_exterior_deviation: float
    min_eigenvalue: float
    n_exterior_samples: int

    @property
    def ok(self) -> bool:
        return self.max_exterior_deviation == 0.0 and self.min_eigenvalue > 0.0


def verify_support(spec: MetricSpec, n_samples: int = 10000, seed: int = 0) -> SupportReport:
    """Check exact flatness on the annulus inner_radius <= |x| <= radius and
    positivity over the ball.  Violations are reported, never raised."""
    rng = np.random.default_rng(seed)
    d = spec.dim
    R, Rh = spec.domain.radius, spec.domain.inner_radius
    u = rng.normal(size=(n_samples, d))
    u /= np.linalg.norm(u, axis=1, keepdims=True)
    r = rng.uniform(Rh, R, n_samples)
    r[:2] = [Rh, R]
    pts = u * r[:, None]
    g, _, _ = _raw_metric(spec, pts, order=0)
    dev = float(np.abs(g - np.eye(d)).max())
    return SupportReport(dev, sample_min_eigenvalue(spec), n_samples)


def perturbed(spec: MetricSpec, fld: BumpTensorField, eps: float) -> MetricSpec:
    """Metric g + eps * fld as a new spec."""
    return MetricSpec(spec.domain, spec.bumps, spec.steepness, tuple(spec.extra) + (fld.scaled(eps),))


def euclidean(dimension: int = 2, radius: float = 1.0, inner_radius: float = 0.9) -> MetricSpec:
    return MetricSpec(Domain(radius, inner_radius, dimension))
