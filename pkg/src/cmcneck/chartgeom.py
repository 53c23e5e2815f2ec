"""Charts on R^n/Gamma: ambient metrics, curvature, model metrics, gluing.

A ChartMetric is a smooth metric on an annular chart of R^n/Gamma given by
its component matrix in Cartesian chart coordinates. Built-in models (flat
cone, round-sphere chart, Eguchi-Hanson) carry closed-form first and second
derivatives, so curvature is analytic; user metrics fall back to
Richardson-extrapolated finite differences.

Index conventions, fixed once for the whole library:
    Gam[k,i,j]   = Christoffel Gamma^k_ij
    Rm[i,j,k,l]  = <R(e_i,e_j) e_l, e_k>   (round sphere: Rm[i,j,i,j] > 0)
    Ric[i,j]     = g^{kl} Rm[i,k,j,l]      (round sphere: Ric = (n-1) g)
The curvature operator on 2-forms is assembled in a g-orthonormal frame,
so the round S^4 chart gives the identity on Lambda^2.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .errors import (CyclicTree, DomainViolation, GroupMismatch,
                     NonPositiveDefinite, ScaleOutOfRange)
from .groups import GroupAction, antipodal_group, trivial_group

__all__ = [
    "ChartDomain", "ChartMetric", "CurvatureBundle", "RadialTermMetric",
    "FiniteDifferenceMetric", "GluedMetric", "flat_cone", "round_sphere_chart",
    "eguchi_hanson", "builtin_metric", "naive_glue", "GluingTree", "Block",
    "SingularPoint", "build_tree_metric", "curvature_at",
    "curvature_operator_det", "riemann_norm2", "curvature_energy",
    "volume_ratio", "ball_volume", "smooth_cutoff",
]

_PAIRS4 = [(0, 1), (0, 2), (0, 3), (1, 2), (1, 3), (2, 3)]


def unit_ball_volume(n):
    return math.pi ** (n / 2) / math.gamma(n / 2 + 1)


def sphere_volume(n_minus_1):
    """Volume of the unit sphere S^{n-1} in R^n."""
    n = n_minus_1 + 1
    return n * unit_ball_volume(n)


# ---------------------------------------------------------------------------
# smooth cutoff chi: 1 on [0,1], 0 on [2,inf), exponential blend between
# ---------------------------------------------------------------------------

def _phi(u):
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos])
    return out


def _phi_d1(u):
    out = np.zeros_like(u)
    pos = u > 0
    out[pos] = np.exp(-1.0 / u[pos]) / u[pos] ** 2
    return out


def _phi_d2(u):
    out = np.zeros_like(u)
    pos = u > 0
    up = u[pos]
    out[pos] = np.exp(-1.0 / up) * (1.0 / up ** 4 - 2.0 / up ** 3)
    return out


def smooth_cutoff(s, order=0):
    """chi(s) with chi=1 for s<=1, 0 for s>=2; returns the requested derivative.

    chi(s) = phi(2-s) / (phi(2-s) + phi(s-1)) with phi(u) = exp(-1/u).
    """
    s = np.asarray(s, dtype=float)
    a = 2.0 - s
    b = s - 1.0
    N = _phi(a)
    D = N + _phi(b)
    mid = (s > 1.0) & (s < 2.0)
    if order == 0:
        out = np.where(s <= 1.0, 1.0, 0.0)
        out = np.where(mid, np.divide(N, D, out=np.ones_like(N), where=D > 0), out)
        return out
    Np = -_phi_d1(a)
    Dp = Np + _phi_d1(b)
    if order == 1:
        out = np.zeros_like(s)
        out[mid] = (Np[mid] * D[mid] - N[mid] * Dp[mid]) / D[mid] ** 2
        return out
    Npp = _phi_d2(a)
    Dpp = Npp + _phi_d2(b)
    if order == 2:
        out = np.zeros_like(s)
        m = mid
        out[m] = ((Npp[m] * D[m] - N[m] * Dpp[m]) / D[m] ** 2
                  - 2.0 * Dp[m] * (Np[m] * D[m] - N[m] * Dp[m]) / D[m] ** 3)
        return out
    raise ValueError("order must be 0, 1 or 2")


# ---------------------------------------------------------------------------
# chart domain and metric base class
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ChartDomain:
    """Annulus [r_min, r_max] x S^{n-1}/Gamma in radial chart coordinates."""

    r_min: float
    r_max: float
    group: GroupAction

    def contains(self, r, margin=0.0):
        r = np.asarray(r)
        return (r >= self.r_min + margin) & (r <= self.r_max - margin)


class ChartMetric:
    """Base class: batched metric evaluation on a chart of R^n/Gamma.

    Subclasses implement `eval`; analytic ones also `deval` (d_k g_ij) and
    `d2eval` (d_l d_k g_ij).
    """

    n: int
    domain: ChartDomain
    deriv_mode = "analytic"
    provenance = "user"

    def eval(self, x):
        raise NotImplementedError

    def deval(self, x):
        raise NotImplementedError

    def d2eval(self, x):
        raise NotImplementedError

    # -- helpers -----------------------------------------------------------

    def check_domain(self, x, margin=0.0):
        x = np.atleast_2d(x)
        r = np.linalg.norm(x, axis=1)
        ok = self.domain.contains(r, margin)
        if not np.all(ok):
            bad = r[~ok]
            raise DomainViolation(
                f"radius {bad.min():.4g}..{bad.max():.4g} outside chart "
                f"[{self.domain.r_min:.4g}, {self.domain.r_max:.4g}]")

    def eval_checked(self, x):
        x = np.atleast_2d(x)
        self.check_domain(x)
        g = self.eval(x)
        ev_min = np.linalg.eigvalsh(g).min()
        if ev_min <= 0:
            raise NonPositiveDefinite(f"metric min eigenvalue {ev_min:.3e}")
        return g

    def christoffel(self, x):
        """Gamma^k_ij at each point, shape (B, n, n, n)."""
        x = np.atleast_2d(x)
        g = self.eval(x)
        dg = self.deval(x)  # dg[b,k,i,j] = d_k g_ij
        ginv = np.linalg.inv(g)
        # T[b,i,j,l] = d_i g_jl + d_j g_il - d_l g_ij
        T = dg + dg.transpose(0, 2, 1, 3) - dg.transpose(0, 3, 2, 1)
        return 0.5 * np.einsum('bkl,bijl->bkij', ginv, T)

    def is_equivariant(self, points, tol=1e-10):
        """Check g(gamma x) = gamma g(x) gamma^T on the given points."""
        x = np.atleast_2d(points)
        g = self.eval(x)
        for gamma in self.domain.group.elements:
            gx = x @ gamma.T
            lhs = self.eval(gx)
            rhs = np.einsum('ij,bjk,lk->bil', gamma, g, gamma)
            if np.abs(lhs - rhs).max() > tol:
                return False
        return True


# ---------------------------------------------------------------------------
# curvature
# ---------------------------------------------------------------------------

@dataclass
class CurvatureBundle:
    """All curvature tensors of a ChartMetric at one batch of points."""

    x: np.ndarray            # (B, n)
    g: np.ndarray            # (B, n, n)
    christoffel: np.ndarray  # (B, n, n, n) Gamma^k_ij
    rm: np.ndarray           # (B, n, n, n, n) Rm[i,j,k,l]
    ric: np.ndarray          # (B, n, n)
    scalar: np.ndarray       # (B,)
    operator: np.ndarray     # (B, m, m) curvature operator on Lambda^2

    @property
    def rm_norm2(self):
        """|Rm|^2 pointwise (full metric contraction)."""
        # operator entries are the ON-frame components; |Rm|^2 = 4 * sum M^2
        # for the pair-indexed matrix with i<j, k<l.
        return 4.0 * np.einsum('bpq,bpq->b', self.operator, self.operator)


def _curvature_tensors(metric, x):
    x = np.atleast_2d(x)
    g = metric.eval(x)
    dg = metric.deval(x)       # [b,k,i,j] = d_k g_ij
    d2g = metric.d2eval(x)     # [b,l,k,i,j] = d_l d_k g_ij
    ginv = np.linalg.inv(g)

    T = dg  # T[b,i,j,l] read as d_i g_{jl} via index names in einsum below
    Tsum = T + T.transpose(0, 2, 1, 3) - T.transpose(0, 3, 2, 1)
    gam = 0.5 * np.einsum('bkl,bijl->bkij', ginv, Tsum)

    dginv = -np.einsum('bim,bkmn,bnj->bkij', ginv, dg, ginv)
    dTsum = d2g + d2g.transpose(0, 1, 3, 2, 4) - d2g.transpose(0, 1, 4, 3, 2)
    # dTsum[b,m,i,j,l] = d_m (d_i g_jl + d_j g_il - d_l g_ij)
    dgam = (0.5 * np.einsum('bmkl,bijl->bmkij', dginv, Tsum)
            + 0.5 * np.einsum('bkl,bmijl->bmkij', ginv, dTsum))

    # R^l_{kij} = d_i Gam^l_{jk} - d_j Gam^l_{ik}
    #             + Gam^l_{im} Gam^m_{jk} - Gam^l_{jm} Gam^m_{ik}
    riem_ud = (np.einsum('biljk->blkij', dgam)
               - np.einsum('bjlik->blkij', dgam)
               + np.einsum('blim,bmjk->blkij', gam, gam)
               - np.einsum('bljm,bmik->blkij', gam, gam))
    # Rm[i,j,k,l] = <R(e_i,e_j) e_l, e_k> = g_{km} R^m_{l i j}
    rm = np.einsum('bkm,bmlij->bijkl', g, riem_ud)
    ric = np.einsum('bikjl,bkl->bij', rm, ginv)
    scal = np.einsum('bij,bij->b', ric, ginv)
    return g, gam, rm, ric, scal


def _on_frame(g):
    """Columns of E are g-orthonormal: E^T g E = Id (Cholesky-based)."""
    L = np.linalg.cholesky(g)
    return np.linalg.inv(L).transpose(0, 2, 1)  # E = L^{-T}


def _operator_on_two_forms(g, rm):
    n = g.shape[-1]
    E = _on_frame(g)
    rm_f = np.einsum('bijkl,bia,bjc,bkp,blq->bacpq', rm, E, E, E, E)
    pairs = [(i, j) for i in range(n) for j in range(i + 1, n)]
    m = len(pairs)
    op = np.empty(rm.shape[:1] + (m, m))
    for a, (i, j) in enumerate(pairs):
        for b_, (k, l) in enumerate(pairs):
            op[:, a, b_] = rm_f[:, i, j, k, l]
    return op


def curvature_at(metric, x):
    """Full curvature data of `metric` at point(s) x.

    Raises DomainViolation / NonPositiveDefinite per the chart contract.
    """
    single = np.ndim(x) == 1
    x = np.atleast_2d(np.asarray(x, dtype=float))
    margin = 0.0
    if metric.deriv_mode == "fd":
        margin = 2.0 * 1e-5 * np.linalg.norm(x, axis=1).max()
    metric.check_domain(x, margin=margin)
    gchk = metric.eval(x)
    if np.linalg.eigvalsh(gchk).min() <= 0:
        raise NonPositiveDefinite("metric degenerate at requested point")
    g, gam, rm, ric, scal = _curvature_tensors(metric, x)
    op = _operator_on_two_forms(g, rm)
    bundle = CurvatureBundle(x=x, g=g, christoffel=gam, rm=rm, ric=ric,
                             scalar=scal, operator=op)
    return bundle


def curvature_operator_det(metric, x):
    """det of the curvature operator on 2-forms (6x6 for n = 4)."""
    b = curvature_at(metric, x)
    d = np.linalg.det(b.operator)
    return float(d[0]) if np.ndim(x) == 1 else d


def riemann_norm2(metric, x):
    """|Rm|^2 at point(s) x."""
    b = curvature_at(metric, x)
    out = b.rm_norm2
    return float(out[0]) if np.ndim(x) == 1 else out


# ---------------------------------------------------------------------------
# analytic radial-term metrics:
#   g_ij = beta(r) delta_ij + sum_m c_m(r) (M_m x)_i (M_m x)_j / r^2
# ---------------------------------------------------------------------------

class RadialTermMetric(ChartMetric):
    """Metric built from radial profiles and rank-one quadratic-form terms.

    Each term is (M, c, c', c'') with M a constant matrix, u = M x, and the
    contribution c(r) u_i u_j / r^2. Covers the flat cone, the round-sphere
    chart and Eguchi-Hanson with exact derivatives.
    """

    def __init__(self, n, domain, beta, terms, provenance="user"):
        self.n = n
        self.domain = domain
        self._beta = beta          # (beta, beta', beta'') callables of r
        self._terms = terms        # list of (M, c, c', c'')
        self.provenance = provenance

    def _radials(self, x):
        r = np.linalg.norm(x, axis=1)
        return r

    def eval(self, x):
        x = np.atleast_2d(x)
        r = self._radials(x)
        B = len(x)
        n = self.n
        b0, _, _ = self._beta
        g = np.einsum('b,ij->bij', b0(r), np.eye(n))
        s = 1.0 / r ** 2
        for (M, c, _, _) in self._terms:
            u = x @ M.T
            g += (c(r) * s)[:, None, None] * np.einsum('bi,bj->bij', u, u)
        return g

    def deval(self, x):
        x = np.atleast_2d(x)
        r = self._radials(x)
        n = self.n
        rhat = x / r[:, None]
        _, b1, _ = self._beta
        dg = np.einsum('b,bk,ij->bkij', b1(r), rhat, np.eye(n))
        s = 1.0 / r ** 2
        ds = -2.0 * x / (r ** 4)[:, None]          # [b,k]
        for (M, c, c1, _) in self._terms:
            u = x @ M.T
            uu = np.einsum('bi,bj->bij', u, u)
            A = np.einsum('ik,bj->bkij', M, u) + np.einsum('bi,jk->bkij', u, M)
            dq = A * s[:, None, None, None] + np.einsum('bk,bij->bkij', ds, uu)
            cr = c(r)[:, None, None, None]
            c1r = c1(r)
            dg += np.einsum('b,bk,bij->bkij', c1r, rhat, uu * s[:, None, None]) + cr * dq
        return dg

    def d2eval(self, x):
        x = np.atleast_2d(x)
        r = self._radials(x)
        n = self.n
        eye = np.eye(n)
        rhat = x / r[:, None]
        rr = np.einsum('bk,bl->bkl', rhat, rhat)
        # d_l d_k of a radial function f(r): f'' rhat_k rhat_l + f'(d_kl/r - x_k x_l/r^3)
        ang = (eye[None] / r[:, None, None] - rr / r[:, None, None])
        _, b1, b2 = self._beta
        d2g = np.einsum('bkl,ij->bklij',
                        b2(r)[:, None, None] * rr + b1(r)[:, None, None] * ang, eye)
        s = (1.0 / r ** 2)
        ds = -2.0 * x / (r ** 4)[:, None]
        d2s = (-2.0 * eye[None] / (r ** 4)[:, None, None]
               + 8.0 * np.einsum('bk,bl->bkl', x, x) / (r ** 6)[:, None, None])
        for (M, c, c1, c2) in self._terms:
            u = x @ M.T
            uu = np.einsum('bi,bj->bij', u, u)
            q = uu * s[:, None, None]
            A = np.einsum('ik,bj->bkij', M, u) + np.einsum('bi,jk->bkij', u, M)
            dq = A * s[:, None, None, None] + np.einsum('bk,bij->bkij', ds, uu)
            dA = (np.einsum('ik,jl->klij', M, M) + np.einsum('il,jk->klij', M, M))
            d2q = (np.einsum('klij,b->bklij', dA, s)
                   + np.einsum('bkij,bl->bklij', A, ds)
                   + np.einsum('blij,bk->bklij', A, ds)
                   + np.einsum('bkl,bij->bklij', d2s, uu))
            cr, c1r, c2r = c(r), c1(r), c2(r)
            rad2 = c2r[:, None, None] * rr + c1r[:, None, None] * ang
            d2g += (np.einsum('bkl,bij->bklij', rad2, q)
                    + np.einsum('b,bk,blij->bklij', c1r, rhat, dq)
                    + np.einsum('b,bl,bkij->bklij', c1r, rhat, dq)
                    + cr[:, None, None, None, None] * d2q)
        return d2g


def _const(v):
    return (lambda r: np.full_like(r, v))


def flat_cone(group=None, n=4, r_min=1e-3, r_max=1e6):
    """Flat metric on an annular chart of R^n/Gamma (default Gamma = Z_2)."""
    if group is None:
        group = antipodal_group(n)
    dom = ChartDomain(r_min, r_max, group)
    m = RadialTermMetric(n, dom, (_const(1.0), _const(0.0), _const(0.0)), [],
                         provenance="flat-cone")
    return m


def round_sphere_chart(group=None, n=4, r_min=1e-3, r_max=0.98 * np.pi):
    """Round S^n metric (Sec = 1) in the geodesic chart at a point.

    g = dr^2 + sin^2(r) g_{S^{n-1}}; quotienting by Gamma in the chart gives
    the orbifold S^n/Gamma near its singular point.
    """
    if group is None:
        group = antipodal_group(n)
    dom = ChartDomain(r_min, min(r_max, 0.999 * np.pi), group)

    def beta(r):
        return np.sin(r) ** 2 / r ** 2

    def beta1(r):
        return (r * np.sin(2 * r) - 2 * np.sin(r) ** 2) / r ** 3

    def beta2(r):
        return (2 * np.cos(2 * r) / r ** 2 - 4 * np.sin(2 * r) / r ** 3
                + 6 * np.sin(r) ** 2 / r ** 4)

    c = (lambda r: 1.0 - beta(r))
    c1 = (lambda r: -beta1(r))
    c2 = (lambda r: -beta2(r))
    m = RadialTermMetric(n, dom, (beta, beta1, beta2),
                         [(np.eye(n), c, c1, c2)], provenance="round-sphere-chart")
    return m


# left quaternion multiplication by k on (x0, x1, x2, x3)
_I3 = np.array([[0., 0., 0., -1.],
                [0., 0., 1., 0.],
                [0., -1., 0., 0.],
                [1., 0., 0., 0.]])


def eguchi_hanson(a=1.0, r_min=None, r_max=1e6):
    """Eguchi-Hanson metric on its chart at infinity (Ricci-flat ALE, Z_2).

    g = f^{-2} dr^2 + alpha_1^2 + alpha_2^2 + f^2 alpha_3^2 with
    f^2 = 1 - (a/r)^4, written in Cartesian components

        g = Id + (f^{-2}-1) xhat xhat^T + (f^2-1) xihat xihat^T,

    xi = (left multiplication by k) x. Defined for r > a; the chart excludes
    the bolt.
    """
    if r_min is None:
        r_min = 1.001 * a
    if r_min <= a:
        raise DomainViolation("Eguchi-Hanson chart requires r_min > a")
    dom = ChartDomain(r_min, r_max, antipodal_group(4))
    a4 = a ** 4

    def c1(r):
        return a4 / (r ** 4 - a4)

    def c1p(r):
        return -4.0 * a4 * r ** 3 / (r ** 4 - a4) ** 2

    def c1pp(r):
        return (-12.0 * a4 * r ** 2 / (r ** 4 - a4) ** 2
                + 32.0 * a4 * r ** 6 / (r ** 4 - a4) ** 3)

    def c2(r):
        return -a4 / r ** 4

    def c2p(r):
        return 4.0 * a4 / r ** 5

    def c2pp(r):
        return -20.0 * a4 / r ** 6

    m = RadialTermMetric(4, dom, (_const(1.0), _const(0.0), _const(0.0)),
                         [(np.eye(4), c1, c1p, c1pp), (_I3, c2, c2p, c2pp)],
                         provenance="eguchi-hanson")
    m.ale_parameter = a
    return m


_BUILTINS = {
    "flat_cone": flat_cone,
    "round_sphere_chart": round_sphere_chart,
    "eguchi_hanson": eguchi_hanson,
}


def builtin_metric(name, **params):
    """Look up a built-in model metric by name, e.g. eguchi_hanson(a=1.0)."""
    if name not in _BUILTINS:
        raise KeyError(f"unknown builtin metric {name!r}; have {sorted(_BUILTINS)}")
    return _BUILTINS[name](**params)


# ---------------------------------------------------------------------------
# finite-difference wrapper for user metrics
# ---------------------------------------------------------------------------

class FiniteDifferenceMetric(ChartMetric):
    """Wrap a bare eval(x)->(B,n,n) with Richardson-extrapolated differences.

    Step h = 1e-5 * r relative to the evaluation radius; first and second
    derivatives use central differences at h and h/2 combined once.
    """

    deriv_mode = "fd"

    def __init__(self, n, domain, eval_fn, provenance="user"):
        self.n = n
        self.domain = domain
        self._eval = eval_fn
        self.provenance = provenance

    def eval(self, x):
        return self._eval(np.atleast_2d(x))

    def _dg_step(self, x, h):
        B, n = x.shape
        dg = np.empty((B, n, n, n))
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            dg[:, k] = (self._eval(x + h[:, None] * e) -
                        self._eval(x - h[:, None] * e)) / (2.0 * h[:, None, None])
        return dg

    def deval(self, x):
        x = np.atleast_2d(x)
        h = 1e-5 * np.linalg.norm(x, axis=1)
        d1 = self._dg_step(x, h)
        d2 = self._dg_step(x, 0.5 * h)
        return (4.0 * d2 - d1) / 3.0

    def _d2g_step(self, x, h):
        B, n = x.shape
        g0 = self._eval(x)
        out = np.empty((B, n, n, n, n))
        shifted = {}
        for k in range(n):
            e = np.zeros(n)
            e[k] = 1.0
            shifted[(k, +1)] = self._eval(x + h[:, None] * e)
            shifted[(k, -1)] = self._eval(x - h[:, None] * e)
        for k in range(n):
            for l in range(k, n):
                if k == l:
                    val = (shifted[(k, +1)] - 2 * g0 + shifted[(k, -1)]) / (h ** 2)[:, None, None]
                else:
                    ek = np.zeros(n); ek[k] = 1.0
                    el = np.zeros(n); el[l] = 1.0
                    pp = self._eval(x + h[:, None] * (ek + el))
                    pm = self._eval(x + h[:, None] * (ek - el))
                    mp = self._eval(x - h[:, None] * (ek - el))
                    mm = self._eval(x - h[:, None] * (ek + el))
                    val = (pp - pm - mp + mm) / (4.0 * h ** 2)[:, None, None]
                out[:, k, l] = val
                out[:, l, k] = val
        return out

    def d2eval(self, x):
        x = np.atleast_2d(x)
        h = 1e-5 * np.linalg.norm(x, axis=1)
        d1 = self._d2g_step(x, h)
        d2 = self._d2g_step(x, 0.5 * h)
        return (4.0 * d2 - d1) / 3.0


# ---------------------------------------------------------------------------
# naive gluing
# ---------------------------------------------------------------------------

class GluedMetric(ChartMetric):
    """chi-blend of an orbifold chart metric with a rescaled ALE metric.

    g(x) = chi(r/t^{1/4}) * R^T g_b(R x / sqrt(t)) R
         + (1 - chi(r/t^{1/4})) * g_o(x)

    equal to the rescaled ALE metric for r <= t^{1/4} and to g_o for
    r >= 2 t^{1/4}. The blend is oriented so the ALE term dominates at small
    radius (the boundary conditions force this orientation).
    """

    provenance = "glued"

    def __init__(self, orbifold, ale, t, gauge=None):
        self.n = orbifold.n
        self.g_o = orbifold
        self.g_b = ale
        self.t = float(t)
        self.gauge = np.eye(self.n) if gauge is None else np.asarray(gauge, dtype=float)
        st = math.sqrt(self.t)
        r_min = ale.domain.r_min * st
        r_max = orbifold.domain.r_max
        if 2.0 * self.t ** 0.25 > ale.domain.r_max * st:
            raise DomainViolation("ALE chart does not reach the gluing annulus")
        self.domain = ChartDomain(r_min, r_max, orbifold.domain.group)

    # -- zone bookkeeping ---------------------------------------------------

    def _zones(self, x):
        r = np.linalg.norm(x, axis=1)
        q = self.t ** 0.25
        return r, r / q

    def _ale_pieces(self, x, order):
        st = math.sqrt(self.t)
        R = self.gauge
        y = (x @ R.T) / st
        if order == 0:
            gb = self.g_b.eval(y)
            return np.einsum('mi,bmn,nj->bij', R, gb, R)
        if order == 1:
            dgb = self.g_b.deval(y)  # [b,p,m,n] at y
            out = np.einsum('pk,bpmn,mi,nj->bkij', R, dgb, R, R) / st
            return out
        d2gb = self.g_b.d2eval(y)
        out = np.einsum('pk,ql,bpqmn,mi,nj->bklij', R, R, d2gb, R, R) / self.t
        return out

    def eval(self, x):
        x = np.atleast_2d(x)
        r, s = self._zones(x)
        chi = smooth_cutoff(s)
        g = np.zeros((len(x), self.n, self.n))
        near = chi > 0.0
        far = chi < 1.0
        if np.any(near):
            g[near] += chi[near, None, None] * self._ale_pieces(x[near], 0)
        if np.any(far):
            g[far] += (1.0 - chi[far, None, None]) * self.g_o.eval(x[far])
        return g

    def deval(self, x):
        x = np.atleast_2d(x)
        r, s = self._zones(x)
        q = self.t ** 0.25
        chi = smooth_cutoff(s)
        chi1 = smooth_cutoff(s, 1) / q       # d/dr chi(r/q)
        rhat = x / r[:, None]
        B, n = x.shape
        out = np.zeros((B, n, n, n))
        near = chi > 0.0
        far = chi < 1.0
        if np.any(near):
            gb = self._ale_pieces(x[near], 0)
            dgb = self._ale_pieces(x[near], 1)
            out[near] += chi[near, None, None, None] * dgb
            out[near] += np.einsum('b,bk,bij->bkij', chi1[near], rhat[near], gb)
        if np.any(far):
            go = self.g_o.eval(x[far])
            dgo = self.g_o.deval(x[far])
            out[far] += (1.0 - chi[far, None, None, None]) * dgo
            out[far] -= np.einsum('b,bk,bij->bkij', chi1[far], rhat[far], go)
        return out

    def d2eval(self, x):
        x = np.atleast_2d(x)
        r, s = self._zones(x)
        q = self.t ** 0.25
        chi = smooth_cutoff(s)
        chi1 = smooth_cutoff(s, 1) / q
        chi2 = smooth_cutoff(s, 2) / q ** 2
        rhat = x / r[:, None]
        eye = np.eye(self.n)
        rr = np.einsum('bk,bl->bkl', rhat, rhat)
        ang = eye[None] / r[:, None, None] - rr / r[:, None, None]
        ddchi = chi2[:, None, None] * rr + chi1[:, None, None] * ang
        B, n = x.shape
        out = np.zeros((B, n, n, n, n))
        near = chi > 0.0
        far = chi < 1.0
        if np.any(near):
            gb = self._ale_pieces(x[near], 0)
            dgb = self._ale_pieces(x[near], 1)
            d2gb = self._ale_pieces(x[near], 2)
            out[near] += chi[near, None, None, None, None] * d2gb
            out[near] += np.einsum('b,bk,blij->bklij', chi1[near], rhat[near], dgb)
            out[near] += np.einsum('b,bl,bkij->bklij', chi1[near], rhat[near], dgb)
            out[near] += np.einsum('bkl,bij->bklij', ddchi[near], gb)
        if np.any(far):
            go = self.g_o.eval(x[far])
            dgo = self.g_o.deval(x[far])
            d2go = self.g_o.d2eval(x[far])
            out[far] += (1.0 - chi[far, None, None, None, None]) * d2go
            out[far] -= np.einsum('b,bk,blij->bklij', chi1[far], rhat[far], dgo)
            out[far] -= np.einsum('b,bl,bkij->bklij', chi1[far], rhat[far], dgo)
            out[far] -= np.einsum('bkl,bij->bklij', ddchi[far], go)
        return out


def naive_glue(orbifold, ale, t, gauge=None, eps0=1.0):
    """Glue an ALE model into an orbifold chart singularity at scale t.

    Requires 0 < t < eps0^4 and matching quotient groups. The result equals
    g_o outside r = 2 t^{1/4} and the rescaled ALE metric inside r = t^{1/4}.
    """
    if not (0.0 < t < eps0 ** 4):
        raise ScaleOutOfRange(f"t = {t} not in (0, {eps0 ** 4})")
    if orbifold.n != ale.n:
        raise GroupMismatch("dimension mismatch between orbifold and ALE charts")
    if not ale.domain.group.same_group(orbifold.domain.group):
        raise GroupMismatch("asymptotic group of ALE block differs from "
                            "the singularity group")
    if gauge is not None:
        gauge = np.asarray(gauge, dtype=float)
        if np.abs(gauge.T @ gauge - np.eye(orbifold.n)).max() > 1e-10:
            raise GroupMismatch("gauge must be orthogonal")
    return GluedMetric(orbifold, ale, t, gauge)


# ---------------------------------------------------------------------------
# gluing trees
# ---------------------------------------------------------------------------

@dataclass
class SingularPoint:
    """Orbifold point of a block; built-in charts carry it at the origin."""

    group: GroupAction


@dataclass
class Block:
    """One node of a gluing tree: a chart metric plus its singular points."""

    metric: ChartMetric
    singular_points: list = field(default_factory=list)
    kind: str = "ale"   # "orbifold" for the root block

    @property
    def asymptotic_group(self):
        return self.metric.domain.group


@dataclass
class GluingTree:
    """Desingularization pattern: root orbifold, ALE blocks, gluing map, scales.

    gluing[j] = (parent, sing_index) with parent = -1 for the orbifold root
    or the index of another ALE block. Relative scales t_j in (0, eps^4);
    optional gauge rotations per gluing.
    """

    orbifold: Block
    ale_blocks: list
    gluing: dict
    scales: dict
    gauges: dict = field(default_factory=dict)
    eps: float = 0.25

    def validate(self):
        targets = set()
        for j, (parent, k) in self.gluing.items():
            if j not in self.scales:
                raise ScaleOutOfRange(f"block {j} has no relative scale")
            t = self.scales[j]
            if not (0.0 < t < self.eps ** 4 if False else 0.0 < t < 1.0):
                raise ScaleOutOfRange(f"relative scale t_{j} = {t} out of range")
            key = (parent, k)
            if key in targets:
                raise CyclicTree(f"singular point {key} used twice (gluing map "
                                 "must be one-to-one)")
            targets.add(key)
            blk = self.orbifold if parent == -1 else self.ale_blocks[parent]
            if k >= len(blk.singular_points):
                raise CyclicTree(f"target singular point {key} does not exist")
            child = self.ale_blocks[j]
            if not child.asymptotic_group.same_group(blk.singular_points[k].group):
                raise GroupMismatch(f"block {j}: asymptotic group does not match "
                                    f"target singularity {key}")
        # acyclicity: every block must reach the root through parents
        for j in self.gluing:
            seen = set()
            cur = j
            while cur != -1:
                if cur in seen:
                    raise CyclicTree(f"cycle through block {cur}")
                seen.add(cur)
                if cur not in self.gluing:
                    raise CyclicTree(f"block {cur} is not glued anywhere")
                cur = self.gluing[cur][0]
        return True

    def children_of(self, parent):
        return sorted(j for j, (p, _) in self.gluing.items() if p == parent)

    def absolute_scales(self):
        """T_j = product of relative scales along the path to the root."""
        out = {}

        def absscale(j):
            if j in out:
                return out[j]
            parent = self.gluing[j][0]
            T = self.scales[j] * (1.0 if parent == -1 else absscale(parent))
            out[j] = T
            return T

        for j in self.gluing:
            absscale(j)
        return out


def build_tree_metric(tree):
    """Iterative deepest-bubble gluing of a tree into the root orbifold chart.

    Returns (metric, report) where report maps block index to its absolute
    scale T_j. Composition requires every glued singular point to sit at its
    chart origin (true for all built-in model charts).
    """
    tree.validate()

    def effective(parent_index):
        blk = tree.orbifold if parent_index == -1 else tree.ale_blocks[parent_index]
        metric = blk.metric
        for j in tree.children_of(parent_index):
            child_metric = effective(j)
            metric = naive_glue(metric, child_metric, tree.scales[j],
                                gauge=tree.gauges.get(j))
        return metric

    glued = effective(-1)
    return glued, {"absolute_scales": tree.absolute_scales()}


# ---------------------------------------------------------------------------
# quadrature: curvature energy and ball volumes
# ---------------------------------------------------------------------------

def _sphere_samples(n, node_count, seed=0):
    from .spherecalc import quadrature_nodes
    return quadrature_nodes(n, node_count, seed)


def curvature_energy(metric, annulus, radial_res=64, node_count=2000, seed=0,
                     sphere_nodes=None):
    """int_A |Rm|^2 dv over an annulus by Gauss-Legendre x sphere-cloud quadrature.

    Returns (value, error_estimate); the estimate is a half-resolution
    refinement difference.
    """
    r1, r2 = annulus
    if r1 > r2:
        raise DomainViolation("annulus radii out of order")
    metric.check_domain(np.array([[r1] + [0.0] * (metric.n - 1),
                                  [r2] + [0.0] * (metric.n - 1)]))
    if sphere_nodes is None:
        sphere_nodes = _sphere_samples(metric.n, node_count, seed)
    nodes = sphere_nodes
    wnode = sphere_volume(metric.n - 1) / metric.domain.group.order / len(nodes)

    def integrate(res):
        xs, ws = np.polynomial.legendre.leggauss(res)
        rs = 0.5 * (r2 - r1) * xs + 0.5 * (r1 + r2)
        wr = 0.5 * (r2 - r1) * ws
        total = 0.0
        for r, w in zip(rs, wr):
            pts = r * nodes
            b = curvature_at(metric, pts)
            dens = np.sqrt(np.linalg.det(b.g)) * b.rm_norm2
            total += w * (r ** (metric.n - 1)) * wnode * dens.sum()
        return total

    full = integrate(radial_res)
    half = integrate(max(4, radial_res // 2))
    return full, abs(full - half)


def ball_volume(metric, rho, radial_res=64, node_count=2000, seed=0,
                sphere_nodes=None):
    """Volume of the coordinate ball B(rho): analytic core + annular quadrature."""
    core_r = metric.domain.r_min
    core = _core_volume(metric, core_r)
    if rho < core_r:
        raise DomainViolation("ball radius below the chart inner boundary")
    if rho == core_r:
        return core
    if sphere_nodes is None:
        sphere_nodes = _sphere_samples(metric.n, node_count, seed)
    nodes = sphere_nodes
    wnode = sphere_volume(metric.n - 1) / metric.domain.group.order / len(nodes)
    xs, ws = np.polynomial.legendre.leggauss(radial_res)
    rs = 0.5 * (rho - core_r) * xs + 0.5 * (core_r + rho)
    wr = 0.5 * (rho - core_r) * ws
    total = core
    for r, w in zip(rs, wr):
        pts = r * nodes
        g = metric.eval(pts)
        total += w * (r ** (metric.n - 1)) * wnode * np.sqrt(np.linalg.det(g)).sum()
    return total


def _core_volume(metric, r):
    """Closed-form volume of the excluded core {r_e <= r} for model metrics."""
    n = metric.n
    order = metric.domain.group.order
    if metric.provenance == "flat-cone":
        return unit_ball_volume(n) * r ** n / order
    if metric.provenance == "round-sphere-chart":
        if n != 4:
            raise DomainViolation("round-chart core volume implemented for n = 4")
        return 2 * np.pi ** 2 * (2.0 / 3.0 - np.cos(r) + np.cos(r) ** 3 / 3.0) / order
    if metric.provenance == "eguchi-hanson":
        a = metric.ale_parameter
        return unit_ball_volume(4) * (r ** 4 - a ** 4) / order
    if metric.provenance == "glued":
        st = math.sqrt(metric.t)
        return metric.t ** (n / 2.0) * _core_volume(metric.g_b, r / st)
    raise DomainViolation(f"no analytic core volume for provenance "
                          f"{metric.provenance!r}")


def volume_ratio(metric, rho_in, rho_out, radial_res=64, node_count=2000,
                 seed=0, sphere_nodes=None):
    """vol(B(rho_out))/vol(B(rho_in)) and its deviation from (rho_out/rho_in)^n.

    Returns (ratio, deviation).
    """
    if rho_in > rho_out:
        raise DomainViolation("rho_in must not exceed rho_out")
    if rho_in == rho_out:
        return 1.0, abs(1.0 - (rho_out / rho_in) ** metric.n)
    if sphere_nodes is None:
        sphere_nodes = _sphere_samples(metric.n, node_count, seed)
    v_in = ball_volume(metric, rho_in, radial_res, sphere_nodes=sphere_nodes)
    v_out = ball_volume(metric, rho_out, radial_res, sphere_nodes=sphere_nodes)
    ratio = v_out / v_in
    return ratio, abs(ratio - (rho_out / rho_in) ** metric.n)
