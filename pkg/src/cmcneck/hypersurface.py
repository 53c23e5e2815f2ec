"""Embedded hypersurfaces of chart metrics.

Leaves are embeddings of the node cloud (graphs over S^{n-1}/Gamma): the
embedding map is differentiated with the cloud's MLS stencils, so induced
metric, outward normal, second fundamental form and mean curvature come out
exactly on coordinate spheres of radial metrics (the position and normal
fields are then linear in the node coordinates).

Normal geodesics are integrated in batch with an adaptive RK45 at local
tolerance 1e-10, stored on a fine parameter grid, and evaluated per node by
cubic Hermite interpolation.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp
from scipy.spatial import cKDTree

from .chartgeom import ChartMetric, curvature_at
from .errors import (DegenerateEmbedding, DomainViolation, GraphCollision,
                     NoIntersection, StepFailure)
from .spherecalc import NodeCloud, SphereField, _tangent_frames, _transport_to

__all__ = [
    "EmbeddedLeaf", "coordinate_sphere", "induced_geometry",
    "normal_exponential", "GeodesicFamily", "normal_family", "normal_graph",
    "regraph", "codazzi_residual", "RadialSurface", "project_to_surface",
]


# ---------------------------------------------------------------------------
# leaf
# ---------------------------------------------------------------------------

@dataclass
class EmbeddedLeaf:
    """Hypersurface embedding of the node cloud into a chart.

    Cached geometry (filled by induced_geometry): outward unit normal,
    induced metric and second fundamental form in cloud-frame components
    (d x d per node) and as ambient-projected SphereFields, mean curvature.
    """

    cloud: NodeCloud
    ambient: ChartMetric
    positions: np.ndarray                 # (N, n)
    outward: bool = True
    tangents: np.ndarray = None           # (N, d, n) pushforward of cloud frame
    normal: np.ndarray = None             # (N, n) unit for ambient metric
    metric_frame: np.ndarray = None       # (N, d, d) induced metric
    shape_frame: np.ndarray = None        # (N, d, d) second fundamental form
    mean_curvature: np.ndarray = None     # (N,)
    _filled: bool = False

    # -- derived fields ------------------------------------------------------

    @property
    def induced_metric(self):
        return SphereField(self.cloud, "sym2",
                           self.cloud.from_frame_sym2(self.metric_frame))

    @property
    def second_fundamental(self):
        return SphereField(self.cloud, "sym2",
                           self.cloud.from_frame_sym2(self.shape_frame))

    @property
    def H(self):
        return SphereField(self.cloud, "scalar", self.mean_curvature)

    @property
    def radii(self):
        return np.linalg.norm(self.positions, axis=1)

    @property
    def directions(self):
        return self.positions / self.radii[:, None]

    def shape_eigen_bound(self):
        """sup over nodes of |shape operator| (largest principal curvature)."""
        ginv = np.linalg.inv(self.metric_frame)
        shape = np.einsum('nab,nbc->nac', ginv, self.shape_frame)
        return float(np.abs(np.linalg.eigvals(shape)).max())

    def normal_injectivity_estimate(self):
        """Conservative bound 1/(2 |A|) clipped by the chart boundary gap."""
        bound = 1.0 / (2.0 * self.shape_eigen_bound())
        r = self.radii
        gap = min(self.ambient.domain.r_max - r.max(),
                  r.min() - self.ambient.domain.r_min)
        return min(bound, max(gap, 0.0))

    def rm_sup(self):
        """sup over nodes of the ambient |Rm|."""
        b = curvature_at(self.ambient, self.positions)
        return float(np.sqrt(b.rm_norm2).max())

    def to_npz(self, path):
        np.savez(path, version=1, positions=self.positions,
                 normal=self.normal, metric_frame=self.metric_frame,
                 shape_frame=self.shape_frame,
                 mean_curvature=self.mean_curvature)

    @staticmethod
    def from_npz(path, cloud, ambient):
        z = np.load(path)
        leaf = EmbeddedLeaf(cloud, ambient, z["positions"])
        leaf.normal = z["normal"]
        leaf.metric_frame = z["metric_frame"]
        leaf.shape_frame = z["shape_frame"]
        leaf.mean_curvature = z["mean_curvature"]
        leaf.tangents = _position_tangents(cloud, leaf.positions)
        leaf._filled = True
        return leaf


def coordinate_sphere(cloud, ambient, radius):
    """The coordinate sphere r = radius as a leaf, with geometry filled."""
    leaf = EmbeddedLeaf(cloud, ambient, radius * cloud.nodes)
    return induced_geometry(leaf)


def _position_tangents(cloud, positions):
    """d1 of each position component, (N, d, n), exact on coordinate spheres."""
    return cloud.d1_components(positions)


def _normal_from_tangents(g, T, positions, outward=True):
    """Unit g-normal orthogonal to the rows of T, oriented radially outward."""
    B, d, n = T.shape
    gT = np.einsum('bij,baj->bai', g, T)  # (B, d, n) rows of the constraint
    # generalized cross product: nu_i = (-1)^i det(minor_i)
    nu = np.empty((B, n))
    cols = list(range(n))
    sign = 1.0
    for i in range(n):
        minor = gT[:, :, [c for c in cols if c != i]]
        nu[:, i] = sign * np.linalg.det(minor)
        sign = -sign
    norms2 = np.einsum('bi,bij,bj->b', nu, g, nu)
    if np.any(norms2 <= 0):
        raise DegenerateEmbedding("normal construction degenerate")
    nu /= np.sqrt(norms2)[:, None]
    orient = np.einsum('bi,bi->b', nu, positions)
    flip = orient < 0 if outward else orient > 0
    nu[flip] *= -1.0
    return nu


def induced_geometry(leaf):
    """Fill tangents, normal, induced metric, A and H; returns the leaf.

    H = tr_{g_Sigma} A with the outward normal convention (flat-space
    spheres have positive mean curvature).
    """
    cloud = leaf.cloud
    X = leaf.positions
    leaf.ambient.check_domain(X)
    g = leaf.ambient.eval(X)
    T = _position_tangents(cloud, X)
    G = np.einsum('bai,bij,bcj->bac', T, g, T)
    det = np.linalg.det(G)
    if det.min() <= 0:
        raise DegenerateEmbedding("tangent map loses rank")
    N = _normal_from_tangents(g, T, X, leaf.outward)
    dN = _position_tangents(cloud, N)  # (B, a, i) = d_a N^i
    gam = leaf.ambient.christoffel(X)
    covdN = dN + np.einsum('bljk,bj,bak->bal', gam, N, T)
    A = np.einsum('bij,bai,bcj->bac', g, T, covdN)
    A = 0.5 * (A + A.transpose(0, 2, 1))
    Ginv = np.linalg.inv(G)
    H = np.einsum('bac,bac->b', Ginv, A)
    leaf.tangents = T
    leaf.normal = N
    leaf.metric_frame = G
    leaf.shape_frame = A
    leaf.mean_curvature = H
    leaf._filled = True
    return leaf


# ---------------------------------------------------------------------------
# geodesic integration
# ---------------------------------------------------------------------------

class GeodesicFamily:
    """Batch of geodesics with Hermite-evaluable dense storage."""

    def __init__(self, metric, starts, velocities, tau_min, tau_max,
                 grid=129, tol=1e-10):
        self.metric = metric
        B, n = starts.shape
        self.B, self.n = B, n

        def rhs(_, state):
            s = state.reshape(2, B, n)
            pos, vel = s[0], s[1]
            gam = metric.christoffel(pos)
            acc = -np.einsum('bkij,bi,bj->bk', gam, vel, vel)
            return np.concatenate([vel.ravel(), acc.ravel()])

        y0 = np.concatenate([starts.ravel(), velocities.ravel()])
        self.taus = np.linspace(tau_min, tau_max, grid)
        span_pieces = []
        if tau_min < 0:
            span_pieces.append((0.0, tau_min))
        if tau_max > 0:
            span_pieces.append((0.0, tau_max))
        pos = np.empty((grid, B, n))
        vel = np.empty((grid, B, n))
        for (a, b) in span_pieces:
            sel = (self.taus >= min(a, b) - 1e-15) & (self.taus <= max(a, b) + 1e-15)
            t_eval = np.sort(self.taus[sel]) if b > a else np.sort(self.taus[sel])[::-1]
            sol = solve_ivp(rhs, (a, b), y0, method="RK45", rtol=tol,
                            atol=tol, t_eval=t_eval, dense_output=False)
            if not sol.success:
                raise StepFailure(f"geodesic integrator failed: {sol.message}")
            for ti, t in zip(range(len(sol.t)), sol.t):
                gi = int(np.argmin(np.abs(self.taus - t)))
                st = sol.y[:, ti].reshape(2, B, n)
                pos[gi] = st[0]
                vel[gi] = st[1]
        zi = int(np.argmin(np.abs(self.taus)))
        if abs(self.taus[zi]) < 1e-15:
            pos[zi] = starts
            vel[zi] = velocities
        self.pos = pos
        self.vel = vel

    def eval(self, tau):
        """Positions at per-node parameters tau (scalar or (B,))."""
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (self.B,))
        ts = self.taus
        idx = np.clip(np.searchsorted(ts, tau) - 1, 0, len(ts) - 2)
        t0, t1 = ts[idx], ts[idx + 1]
        h = t1 - t0
        s = (tau - t0) / h
        rng = np.arange(self.B)
        p0 = self.pos[idx, rng]
        p1 = self.pos[idx + 1, rng]
        v0 = self.vel[idx, rng] * h[:, None]
        v1 = self.vel[idx + 1, rng] * h[:, None]
        s = s[:, None]
        h00 = 2 * s ** 3 - 3 * s ** 2 + 1
        h10 = s ** 3 - 2 * s ** 2 + s
        h01 = -2 * s ** 3 + 3 * s ** 2
        h11 = s ** 3 - s ** 2
        return h00 * p0 + h10 * v0 + h01 * p1 + h11 * v1

    def eval_velocity(self, tau):
        tau = np.broadcast_to(np.asarray(tau, dtype=float), (self.B,))
        ts = self.taus
        idx = np.clip(np.searchsorted(ts, tau) - 1, 0, len(ts) - 2)
        t0, t1 = ts[idx], ts[idx + 1]
        h = t1 - t0
        s = ((tau - t0) / h)[:, None]
        p0 = self.pos[idx, np.arange(self.B)]
        p1 = self.pos[idx + 1, np.arange(self.B)]
        v0 = self.vel[idx, np.arange(self.B)]
        v1 = self.vel[idx + 1, np.arange(self.B)]
        dh00 = (6 * s ** 2 - 6 * s) / h[:, None]
        dh10 = 3 * s ** 2 - 4 * s + 1
        dh01 = (-6 * s ** 2 + 6 * s) / h[:, None]
        dh11 = 3 * s ** 2 - 2 * s
        return dh00 * p0 + dh10 * v0 + dh01 * p1 + dh11 * v1


def normal_family(leaf, tau_min, tau_max, tol=1e-10, metric=None,
                  grid=129):
    """Geodesic family from the leaf along its (metric-)normal directions."""
    if not leaf._filled:
        induced_geometry(leaf)
    metric = metric or leaf.ambient
    if metric is leaf.ambient:
        N = leaf.normal
    else:
        g = metric.eval(leaf.positions)
        N = _normal_from_tangents(g, leaf.tangents, leaf.positions,
                                  leaf.outward)
    return GeodesicFamily(metric, leaf.positions, N, tau_min, tau_max,
                          grid=grid, tol=tol)


def normal_exponential(leaf, s, tol=1e-10):
    """F(x, s): follow the unit normal geodesics to parameter s.

    s is a scalar or a per-node array; geodesics must stay inside the chart.
    """
    s_arr = np.broadcast_to(np.asarray(s, dtype=float), (len(leaf.cloud.nodes),))
    lo, hi = min(s_arr.min(), 0.0), max(s_arr.max(), 0.0)
    pad = 1e-9 * max(1.0, abs(hi), abs(lo))
    fam = normal_family(leaf, lo - pad, hi + pad, tol=tol)
    out = fam.eval(s_arr)
    leaf.ambient.check_domain(out)
    return out


def normal_graph(leaf, w, tol=1e-10, collision_factor=1.0):
    """Leaf through gamma_x(w(x)); raises GraphCollision past 1/(2|A|)."""
    wv = w.values if isinstance(w, SphereField) else np.asarray(w, dtype=float)
    wv = np.broadcast_to(wv, (len(leaf.cloud.nodes),))
    if not leaf._filled:
        induced_geometry(leaf)
    bound = leaf.normal_injectivity_estimate() * collision_factor
    if np.abs(wv).max() >= bound:
        raise GraphCollision(
            f"|w| = {np.abs(wv).max():.4g} exceeds the normal-injectivity "
            f"estimate {bound:.4g}")
    pos = normal_exponential(leaf, wv, tol=tol)
    return induced_geometry(EmbeddedLeaf(leaf.cloud, leaf.ambient, pos,
                                         outward=leaf.outward))


# ---------------------------------------------------------------------------
# radial surface representation and graph projection
# ---------------------------------------------------------------------------

class RadialSurface:
    """Star-shaped surface given by scattered (direction, radius) samples.

    Radius queries interpolate with a local polyharmonic RBF + polynomial
    fit; exact at the sample directions.
    """

    def __init__(self, points, k=40, deg=4):
        self.points = points
        self.radii = np.linalg.norm(points, axis=1)
        self.dirs = points / self.radii[:, None]
        self.tree = cKDTree(self.dirs)
        self.k = min(k, len(points))
        self.deg = deg

    def radius_at(self, directions, chunk=1024):
        from .spherecalc import _monomials
        dirs = np.atleast_2d(directions)
        dirs = dirs / np.linalg.norm(dirs, axis=1, keepdims=True)
        k = self.k
        _, neigh = self.tree.query(dirs, k)
        exps = _monomials(dirs.shape[1] - 1, self.deg)
        M = len(exps)
        frames = _tangent_frames(dirs)
        out = np.empty(len(dirs))
        for lo in range(0, len(dirs), chunk):
            hi = min(lo + chunk, len(dirs))
            p = dirs[lo:hi]
            idx = neigh[lo:hi]
            q = self.dirs[idx]
            c = np.clip(np.einsum('cki,ci->ck', q, p), -1.0, 1.0)
            theta = np.arccos(c)
            tang = q - c[..., None] * p[:, None, :]
            tn = np.linalg.norm(tang, axis=2)
            tn[tn < 1e-15] = 1.0
            y = (theta / tn)[..., None] * np.einsum('cki,cai->cka', tang,
                                                    frames[lo:hi])
            vals = self.radii[idx]
            dist = np.linalg.norm(y[:, :, None, :] - y[:, None, :, :], axis=3)
            C = hi - lo
            V = np.ones((C, k, M))
            for m_i, e in enumerate(exps):
                col = np.ones((C, k))
                for a_i in range(len(e)):
                    if e[a_i]:
                        col = col * y[:, :, a_i] ** e[a_i]
                V[:, :, m_i] = col
            full = np.zeros((C, k + M, k + M))
            full[:, :k, :k] = dist ** 3 + 1e-12 * np.eye(k)[None]
            full[:, :k, k:] = V
            full[:, k:, :k] = V.transpose(0, 2, 1)
            rhs = np.zeros((C, k + M))
            rhs[:, :k] = vals
            coef = np.linalg.solve(full, rhs[..., None])[..., 0]
            phi0 = np.linalg.norm(y, axis=2) ** 3
            out[lo:hi] = np.einsum('ck,ck->c', phi0, coef[:, :k]) + coef[:, k]
        return out


def project_to_surface(family, surface, tau_guess, iters=30, tol=1e-12):
    """Per-node parameter where each geodesic meets the radial surface.

    Secant iteration on phi(tau) = |gamma(tau)| - r_S(dir(gamma(tau))).
    """
    B = family.B
    t0 = np.asarray(tau_guess, dtype=float) * np.ones(B)
    t0 = np.clip(t0, family.taus[0], family.taus[-1])

    def phi(tau):
        pos = family.eval(tau)
        r = np.linalg.norm(pos, axis=1)
        return r - surface.radius_at(pos), r

    span = family.taus[-1] - family.taus[0]
    f0, _ = phi(t0)
    t1 = np.clip(t0 - np.sign(f0) * 1e-3 * span, family.taus[0],
                 family.taus[-1])
    same = np.abs(t1 - t0) < 1e-18
    t1[same] += 1e-3 * span
    f1, _ = phi(t1)
    for _ in range(iters):
        df = f1 - f0
        bad = np.abs(df) < 1e-300
        df[bad] = 1.0
        t2 = t1 - f1 * (t1 - t0) / df
        t2[bad] = t1[bad]
        t2 = np.clip(t2, family.taus[0], family.taus[-1])
        t0, f0 = t1, f1
        t1 = t2
        f1, _ = phi(t1)
        if np.abs(f1).max() < tol * max(1.0, np.abs(t1).max()):
            break
    else:
        if np.abs(f1).max() > 1e-6:
            raise NoIntersection(
                f"graph projection did not converge: residual "
                f"{np.abs(f1).max():.3e}")
    return t1


def regraph(leaf, w, other_metric, tol=1e-12):
    """w' with Sigma_g(w) = Sigma_{other}(w') as point sets.

    The target surface is generated with the leaf's own ambient metric; the
    other metric's normal geodesics from the same base leaf are intersected
    with it.
    """
    if not leaf._filled:
        induced_geometry(leaf)
    wv = w.values if isinstance(w, SphereField) else np.asarray(w, dtype=float)
    wv = np.broadcast_to(wv, (len(leaf.cloud.nodes),)).astype(float)
    bound = leaf.normal_injectivity_estimate()
    wmax = np.abs(wv).max()
    if wmax >= bound:
        raise GraphCollision("graph exceeds the normal-injectivity estimate")
    fam_own = normal_family(leaf, min(wv.min(), 0) - 1e-9,
                            max(wv.max(), 0) + 1e-9)
    target = RadialSurface(fam_own.eval(wv))
    pad = 2.0 * max(wmax, 1e-6 * leaf.radii.mean())
    fam_other = normal_family(leaf, -pad, pad, metric=other_metric)
    tau = project_to_surface(fam_other, target, tau_guess=wv, tol=tol)
    return SphereField(leaf.cloud, "scalar", tau)


# ---------------------------------------------------------------------------
# Codazzi residuals
# ---------------------------------------------------------------------------

def codazzi_residual(leaf):
    """Sup-norm residuals of the two Codazzi identities on the leaf.

    d^nabla A (X,Y,Z) = <Rm(X,Y) N, Z> and
    delta^nabla A (X) = Ric(N, X) - dH(X),
    both pulled back to the parameter sphere. Returns (res_d, res_delta).
    """
    from .spherecalc import dnabla_delta
    if not leaf._filled:
        induced_geometry(leaf)
    cloud = leaf.cloud
    gsig = leaf.induced_metric
    afld = leaf.second_fundamental
    d3, div = dnabla_delta(afld, gsig)
    bundle = curvature_at(leaf.ambient, leaf.positions)
    T = leaf.tangents
    N = leaf.normal
    # RHS of the d identity in cloud-frame slots, then ambient-ized
    rhs_d_fr = np.einsum('bijkl,bai,bcj,bek,bl->bace',
                         bundle.rm, T, T, T, N)
    fr = cloud.frames
    rhs_d = np.einsum('bace,bax,bcy,bez->bxyz', rhs_d_fr, fr, fr, fr)
    d3_vals = d3.values if isinstance(d3, SphereField) else d3
    res_d = np.abs(d3_vals - rhs_d).max()
    # RHS of the delta identity
    ric_n = np.einsum('bij,bi,baj->ba', bundle.ric, N, T)
    dH = cloud.d1(leaf.mean_curvature)
    rhs_delta = np.einsum('ba,bax->bx', ric_n - dH, fr)
    res_delta = np.abs(div.values - rhs_delta).max()
    return float(res_d), float(res_delta)
