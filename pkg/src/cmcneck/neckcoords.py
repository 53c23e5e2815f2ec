"""CMC-based coordinates on a foliated neck and weighted decay measurement.

The coordinate map follows the normal flow between adjacent leaves from an
anchor leaf (the scale where the measured deviation is smallest), with
per-grid lapse fields solving (n-1)/s^2 = (Delta^s + |A|^2 + Ric(N,N)) u_s.
In these coordinates the metric is u_s^2 ds^2 + s^2 h_s with no cross
terms; the rescaled pullback is compared against the flat cone over dyadic
annuli and the resulting profile fitted to the two-power decay model
eps [ (rho1/rho)^beta1 + (rho/rho2)^beta2 ].
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import CubicSpline

from .cmcsolve import JacobiOperator
from .errors import DomainViolation, FitDegenerate, GridTooCoarse, NearSingular
from .hypersurface import (EmbeddedLeaf, RadialSurface, induced_geometry,
                           normal_family, project_to_surface)
from .spherecalc import SphereField, _apply_group_average

__all__ = ["CoordinateMap", "DecayProfile", "solve_lapse",
           "integrate_radial_metric", "weighted_norm", "norm_sweep",
           "decay_fit"]


def solve_lapse(foliation, index, group=None, tol=1e-8):
    """Lapse u_s on one foliation leaf: (n-1)/s^2 = J u_s.

    Solves for u - 1 with the leaf's Jacobi operator on the invariant band
    (plus the smooth-tail complement), so the flat cone returns u = 1
    identically. Returns (SphereField u, info dict with residuals).
    """
    leaf = foliation.leaves[index]
    s = foliation.s_values[index]
    cloud = leaf.cloud
    group = group or foliation.group or cloud.group
    n = cloud.n
    op = JacobiOperator(leaf)
    small, vecs, sel = op.small_matrix(group)
    gap = np.abs(np.linalg.eigvalsh(0.5 * (small + small.T))).min()
    if gap < 1e-3 * (n - 1) / s ** 2:
        raise NearSingular("lapse operator nearly singular on the "
                           "invariant band")
    rhs = (n - 1) / s ** 2 - op.coeff          # residual of u = 1
    rhs = _apply_group_average(cloud, group, rhs)
    du = np.zeros(len(cloud.nodes))
    res = rhs.copy()
    res_hist = []
    for _ in range(30):
        delta = op.lu().solve(res)
        if cloud.n > 2:
            delta = cloud.smooth(delta)
        delta = _apply_group_average(cloud, group, delta)
        du = du + delta
        res = rhs - op.apply(du)
        res_hist.append(float(np.abs(res).max()))
        if res_hist[-1] <= tol * max(np.abs(rhs).max(), (n - 1) / s ** 2):
            break
    u = 1.0 + du
    info = {
        "residual": res_hist[-1] if res_hist else 0.0,
        "residual_rel": (res_hist[-1] if res_hist else 0.0)
        / ((n - 1) / s ** 2),
        "u_minus_one_sup": float(np.abs(du).max()),
        "gap": float(gap),
    }
    return SphereField(cloud, "scalar", u), info


@dataclass
class CoordinateMap:
    """Threaded CMC coordinates: positions, lapses and transverse metrics.

    thread_positions[k] are the points Phi(s_k, x); the anchor leaf carries
    the identity node correspondence. Cross terms g(d_s Phi, tangials)
    vanish by construction (the flow follows the leaf normals).
    """

    foliation: object
    anchor_index: int
    s_values: np.ndarray
    thread_positions: np.ndarray      # (m, N, n)
    lapse: np.ndarray                 # (m, N)
    h_fields: np.ndarray              # (m, N, n, n) ambient sym2, h_s
    h_frame: np.ndarray               # (m, N, d, d) frame components of h_s
    cross_terms: np.ndarray           # (m,) sup relative cross term
    lapse_info: list
    consistency: float = np.nan       # est-1 integration vs direct pullback

    @property
    def cloud(self):
        return self.foliation.leaves[0].cloud


def _thread_leaf(cloud, metric, positions, outward=True):
    return induced_geometry(EmbeddedLeaf(cloud, metric, positions,
                                         outward=outward))


def integrate_radial_metric(foliation, lapses=None, anchor_index=None,
                            group=None, consistency_tol=1e-4):
    """Build the coordinate map: threads, lapses, transverse metrics.

    Threads hop between adjacent leaves along leaf normals starting from
    the anchor (identity correspondence there); h_s is read off the actual
    leaves through the thread correspondence, and independently integrated
    by the est-1 law d_s(s^2 h_s) = 2 u_s A(s) as a cross-check.
    """
    leaves = foliation.leaves
    s_grid = np.asarray(foliation.s_values, dtype=float)
    m = len(s_grid)
    cloud = leaves[0].cloud
    metric = leaves[0].ambient
    N = len(cloud.nodes)
    n = cloud.n

    if lapses is None:
        lapses = []
        lapse_info = []
        for k in range(m):
            u, info = solve_lapse(foliation, k, group=group)
            lapses.append(u.values)
            lapse_info.append(info)
    else:
        lapses = [u.values if isinstance(u, SphereField) else u
                  for u in lapses]
        lapse_info = [{} for _ in range(m)]
    lapses = np.asarray(lapses)

    if anchor_index is None:
        anchor_index = m // 2

    # thread positions by leaf-to-leaf normal hops
    thread = np.empty((m, N, n))
    thread[anchor_index] = leaves[anchor_index].positions
    for k in range(anchor_index + 1, m):
        thread[k] = _hop(cloud, metric, thread[k - 1],
                         leaves[k], s_grid[k] - s_grid[k - 1])
    for k in range(anchor_index - 1, -1, -1):
        thread[k] = _hop(cloud, metric, thread[k + 1],
                         leaves[k], s_grid[k] - s_grid[k + 1])

    # per-level geometry in the thread parameterization
    h_frame = np.empty((m, N, n - 1, n - 1))
    h_amb = np.empty((m, N, n, n))
    cross = np.empty(m)
    u_thread = np.empty((m, N))
    a_frame = np.empty((m, N, n - 1, n - 1))
    for k in range(m):
        tl = _thread_leaf(cloud, metric, thread[k])
        h_frame[k] = tl.metric_frame / s_grid[k] ** 2
        h_amb[k] = cloud.from_frame_sym2(h_frame[k])
        a_frame[k] = tl.shape_frame
        g = metric.eval(thread[k])
        ds_dir = tl.normal            # d_s Phi direction = u N
        crossv = np.einsum('nai,nij,nj->na', tl.tangents, g, ds_dir)
        scale = np.sqrt(np.einsum('nai,nij,naj->na', tl.tangents, g,
                                  tl.tangents))
        cross[k] = float(np.abs(crossv / scale).max())
        # lapse transported to the thread parameterization
        if k == anchor_index:
            u_thread[k] = lapses[k]
        else:
            dirs = thread[k] / np.linalg.norm(thread[k], axis=1)[:, None]
            leaf_dirs = leaves[k].directions
            u_thread[k] = _scatter_interp(leaf_dirs, lapses[k], dirs)

    # est-1 cross-check: d_s (s^2 h_s) = 2 u A(s), spline-integrated
    if m >= 3:
        f = (s_grid[:, None, None, None] ** 2) * h_frame
        fprime = 2.0 * u_thread[:, :, None, None] * a_frame
        spline = CubicSpline(s_grid, fprime, axis=0)
        integ = spline.antiderivative()(s_grid)
        integ = integ - integ[anchor_index] + f[anchor_index]
        consistency = float(np.abs(integ - f).max()
                            / np.abs(f).max())
        if consistency > consistency_tol:
            raise GridTooCoarse(
                f"est-1 integration deviates by {consistency:.2e} "
                f"(> {consistency_tol:.0e}) from the direct pullback")
    else:
        consistency = np.nan

    return CoordinateMap(
        foliation=foliation, anchor_index=anchor_index, s_values=s_grid,
        thread_positions=thread, lapse=u_thread, h_fields=h_amb,
        h_frame=h_frame, cross_terms=cross, lapse_info=lapse_info,
        consistency=consistency)


def _hop(cloud, metric, start_positions, target_leaf, ds_hint):
    leaf = _thread_leaf(cloud, metric, start_positions)
    span = 2.5 * abs(ds_hint) + 1e-12
    fam = normal_family(leaf, -span, span)
    tau = project_to_surface(fam, RadialSurface(target_leaf.positions),
                             tau_guess=ds_hint)
    return fam.eval(tau)


def _scatter_interp(sample_dirs, values, query_dirs, k=40, deg=4):
    """Local RBF interpolation of a scalar field between sphere directions."""
    surf = RadialSurface(sample_dirs * (1.0 + 0.0), k=k, deg=deg)
    # reuse the radius interpolator on a synthetic surface 1 + values
    surf2 = RadialSurface.__new__(RadialSurface)
    surf2.points = sample_dirs
    surf2.radii = values
    surf2.dirs = sample_dirs
    surf2.tree = surf.tree
    surf2.k = surf.k
    surf2.deg = surf.deg
    return surf2.radius_at(query_dirs)


def weighted_norm(cmap, metric, rho, ell=0):
    """Sampled C^l distance of the rescaled pullback from the flat cone.

    On the dyadic annulus [rho, 2 rho]: the pullback in CMC coordinates is
    u^2 ds^2 + s^2 h_s, compared against ds^2 + s^2 g_round after rescaling
    by rho; derivatives up to order `ell` are taken by stencils in log s
    and the sphere directions.
    """
    s = cmap.s_values
    sel = np.where((s >= rho * (1 - 1e-12)) & (s <= 2 * rho * (1 + 1e-12)))[0]
    if len(sel) < ell + 2:
        raise DomainViolation(
            f"dyadic annulus [{rho:.4g}, {2 * rho:.4g}] contains only "
            f"{len(sel)} grid leaves (need {ell + 2})")
    cloud = cmap.cloud
    d = cloud.dim
    sigma = s[sel] / rho
    eye = np.eye(d)

    # dimensionless component fields on the annulus
    comp = {}
    comp["ss"] = cmap.lapse[sel] ** 2 - 1.0
    dev = cmap.h_frame[sel] - eye[None, None]
    comp["tan"] = (sigma ** 2)[:, None, None, None] * dev
    cross = cmap.cross_terms[sel]

    def sup_norm(arr):
        if arr.ndim == 2:
            return float(np.abs(arr).max())
        return float(np.abs(np.linalg.eigvalsh(arr)).max())

    best = max(sup_norm(comp["ss"]), sup_norm(comp["tan"]),
               float(np.abs(cross).max()))
    if ell == 0:
        return best

    # sampled derivatives: all combinations of log-s and sphere directions
    # with total order <= ell, measured as sup of gradient magnitudes
    logs = np.log(s[sel])
    out = best
    flat_fields = [comp["ss"][:, :, None],
                   comp["tan"].reshape(len(sel), -1, d * d)]
    for fld in flat_fields:
        ncomp = fld.shape[2]
        for ci in range(ncomp):
            for js in range(0, ell + 1):
                base = fld[:, :, ci] if js == 0 else \
                    _log_s_derivative(logs, fld[:, :, ci], js)
                if js > 0:
                    out = max(out, float(np.abs(base).max()))
                levels = [base[j] for j in range(base.shape[0])]
                for _ in range(ell - js):
                    levels = [np.linalg.norm(cloud.d1(c), axis=1)
                              for c in levels]
                    out = max(out,
                              max(float(np.abs(c).max()) for c in levels))
    return float(out)


def _log_s_derivative(logs, values, order):
    """Derivative in log s by a polynomial fit over the grid window."""
    import math
    m = len(logs)
    deg = min(m - 1, max(order + 1, 3))
    if order > deg:
        return np.zeros_like(values)
    t0 = logs.mean()
    V = np.vander(logs - t0, deg + 1, increasing=True)
    coef, *_ = np.linalg.lstsq(V, values, rcond=None)
    dcoef = coef[order:] * np.array(
        [math.factorial(k + order) / math.factorial(k)
         for k in range(deg + 1 - order)])[:, None]
    Vd = np.vander(logs - t0, deg + 1 - order, increasing=True)
    return Vd @ dcoef


def norm_sweep(cmap, metric, rhos=None, ell=0):
    """Weighted norms over a sweep of dyadic scales."""
    s = cmap.s_values
    if rhos is None:
        lo, hi = s[0], s[-1] / 2.0
        count = max(4, int(np.floor(np.log(hi / lo) / np.log(np.sqrt(2.0)))))
        rhos = lo * (hi / lo) ** (np.arange(count + 1) / count)
    return np.asarray(rhos), np.array(
        [weighted_norm(cmap, metric, r, ell) for r in rhos])


@dataclass
class DecayProfile:
    """Fitted two-power decay profile eps [(r1/r)^b1 + (r/r2)^b2]."""

    rho1: float
    rho2: float
    eps: float
    beta1: float
    beta2: float
    rho_bar: float
    residual: float
    samples: np.ndarray
    inner_span_dyadic: float = 0.0
    outer_span_dyadic: float = 0.0

    def eta(self, rho):
        rho = np.asarray(rho, dtype=float)
        return self.eps * ((self.rho1 / rho) ** self.beta1
                           + (rho / self.rho2) ** self.beta2)


def decay_fit(samples, rho1, rho2, monotone_slack=1):
    """Least-squares fit of the two-power decay model to a norm sweep.

    `samples` is a sequence of (rho, norm). beta1 is fitted on the inner
    monotone branch, beta2 on the outer, the amplitude eps jointly.
    Raises FitDegenerate if either branch has fewer than 3 samples or the
    branch pattern is non-monotone beyond `monotone_slack` grid steps.
    """
    samples = np.asarray(sorted((float(r), float(v)) for r, v in samples))
    if len(samples) < 6:
        raise FitDegenerate("need at least 6 samples")
    rho, val = samples[:, 0], samples[:, 1]
    if np.any(val <= 0) or val.max() <= 1e-14:
        raise FitDegenerate("no signal in the norm sweep")
    imin = int(np.argmin(val))
    inner = samples[:imin + 1]
    outer = samples[imin:]
    if len(inner) < 3 or len(outer) < 3:
        raise FitDegenerate(
            f"branch too short around the minimum (inner {len(inner)}, "
            f"outer {len(outer)})")
    for branch, sign, name in ((inner, -1.0, "inner"), (outer, 1.0, "outer")):
        diffs = np.diff(np.log(branch[:, 1]))
        bad = int(np.sum(sign * diffs < 0))
        if bad > monotone_slack:
            raise FitDegenerate(f"{name} branch is not monotone")
    b1, _ = np.polyfit(np.log(rho1 / inner[:, 0]), np.log(inner[:, 1]), 1)
    b2, _ = np.polyfit(np.log(outer[:, 0] / rho2), np.log(outer[:, 1]), 1)
    beta1 = float(b1)
    beta2 = float(b2)
    # joint amplitude in log space with the exponents fixed
    shape = ((rho1 / rho) ** beta1 + (rho / rho2) ** beta2)
    eps = float(np.exp(np.mean(np.log(val) - np.log(shape))))
    model = eps * shape
    residual = float(np.sqrt(np.mean(((model - val) / val) ** 2)))
    return DecayProfile(
        rho1=rho1, rho2=rho2, eps=eps, beta1=beta1, beta2=beta2,
        rho_bar=float(rho[imin]), residual=residual, samples=samples,
        inner_span_dyadic=float(np.log2(rho[imin] / rho[0])),
        outer_span_dyadic=float(np.log2(rho[-1] / rho[imin])))
