"""CMC foliations of neck annuli.

Equidistant leaves evolve by the normal geodesic flow with the shape
operator integrated alongside through the Riccati equation
(nabla_N S)(X) = -(S^2(X) + Rm(X, N) N); each equidistant (or coordinate
sphere) is then perturbed to constant mean curvature (n-1)/s. Leaf
separations, strict nesting and the local/global consistency weld are the
computational counterparts of the foliation property.
"""
from __future__ import annotations

import os
from dataclasses import dataclass, field

import numpy as np
from scipy.integrate import solve_ivp

from .chartgeom import _curvature_tensors
from .cmcsolve import CmcConfig, cmc_posteriori_check, solve_cmc
from .errors import (DomainViolation, FocalPoint, LeafCrossing, NotCMC,
                     StepFailure)
from .hypersurface import (EmbeddedLeaf, RadialSurface, coordinate_sphere,
                           induced_geometry, normal_family,
                           project_to_surface)
from .spherecalc import SphereField

__all__ = ["RiccatiState", "Foliation", "equidistant_evolve",
           "local_foliate", "global_foliate"]

_S_BLOWUP = 1e8


@dataclass
class RiccatiState:
    """Shape operator along the normal flow, in a parallel ON frame."""

    s: float
    shape: np.ndarray            # (N, d, d)
    curvature_term: np.ndarray   # (N, d, d)  K_ab = Rm(f_a, N, f_b, N)
    mean_trace: np.ndarray       # (N,) tr S

    def max_eigen(self):
        return float(np.abs(np.linalg.eigvals(self.shape)).max())


def _initial_frame_shape(leaf):
    """g-orthonormal tangent frame and shape operator matrix per node."""
    L = np.linalg.cholesky(leaf.metric_frame)
    Linv = np.linalg.inv(L)
    frame = np.einsum('nba,nbi->nai', Linv.transpose(0, 2, 1), leaf.tangents)
    shape = np.einsum('nab,nbc,ndc->nad', Linv, leaf.shape_frame, Linv)
    return frame, shape


def equidistant_evolve(start, s_values, tol=1e-10):
    """Evolve equidistant leaves and their Riccati data from a CMC-ish leaf.

    `s_values` are foliation parameters; the leaf at s sits at normal
    distance s - s0 from the start leaf where s0 = (n-1)/mean(H). Returns a
    list of (s, EmbeddedLeaf, RiccatiState). Raises FocalPoint when the
    shape operator blows up, DomainViolation when the flow leaves the chart.
    """
    if not start._filled:
        induced_geometry(start)
    cloud = start.cloud
    metric = start.ambient
    n = cloud.n
    d = n - 1
    N = len(cloud.nodes)
    s0 = (n - 1) / float(start.mean_curvature.mean())
    s_values = np.atleast_1d(np.asarray(s_values, dtype=float))

    frame0, shape0 = _initial_frame_shape(start)
    state0 = np.concatenate([
        start.positions.ravel(), start.normal.ravel(),
        frame0.ravel(), shape0.ravel()])

    sizes = [N * n, N * n, N * d * n, N * d * d]
    offs = np.cumsum([0] + sizes)

    def unpack(y):
        pos = y[offs[0]:offs[1]].reshape(N, n)
        vel = y[offs[1]:offs[2]].reshape(N, n)
        fr = y[offs[2]:offs[3]].reshape(N, d, n)
        S = y[offs[3]:offs[4]].reshape(N, d, d)
        return pos, vel, fr, S

    def rhs(_, y):
        pos, vel, fr, S = unpack(y)
        g, gam, rm, _, _ = _curvature_tensors(metric, pos)
        acc = -np.einsum('nkij,ni,nj->nk', gam, vel, vel)
        dfr = -np.einsum('nkij,ni,naj->nak', gam, vel, fr)
        K = np.einsum('nijkl,nai,nj,nbk,nl->nab', rm, fr, vel, fr, vel)
        dS = -(np.einsum('nab,nbc->nac', S, S) + K)
        return np.concatenate([vel.ravel(), acc.ravel(),
                               dfr.ravel(), dS.ravel()])

    taus = s_values - s0
    out = []
    for sign in (-1.0, 1.0):
        sel = taus < 0 if sign < 0 else taus >= 0
        if not np.any(sel):
            continue
        t_sel = np.sort(taus[sel])
        if sign < 0:
            t_sel = t_sel[::-1]
        t_end = t_sel[-1]
        if abs(t_end) < 1e-15:
            batch = [(0.0, state0)]
        else:
            sol = solve_ivp(rhs, (0.0, t_end), state0, method="RK45",
                            rtol=tol, atol=tol,
                            t_eval=t_sel[np.abs(t_sel) > 1e-15])
            if not sol.success:
                raise FocalPoint(f"Riccati/geodesic integration broke down: "
                                 f"{sol.message}")
            batch = [(t, sol.y[:, i]) for i, t in enumerate(sol.t)]
            if np.any(np.abs(t_sel) < 1e-15):
                batch.append((0.0, state0))
        for t, y in batch:
            pos, vel, fr, S = unpack(y)
            if not np.all(np.isfinite(S)):
                raise FocalPoint("shape operator lost finiteness")
            metric.check_domain(pos)
            g = metric.eval(pos)
            # re-orthonormalize the transported frame against drift
            fr = _gram_schmidt_frames(fr, g)
            leaf = induced_geometry(EmbeddedLeaf(cloud, metric, pos,
                                                 outward=start.outward))
            gm, gam, rm, _, _ = _curvature_tensors(metric, pos)
            K = np.einsum('nijkl,nai,nj,nbk,nl->nab', rm, fr, vel, fr, vel)
            state = RiccatiState(s=float(s0 + t), shape=S,
                                 curvature_term=K,
                                 mean_trace=np.einsum('naa->n', S))
            if state.max_eigen() > _S_BLOWUP:
                raise FocalPoint("shape operator beyond the integrator floor")
            out.append((float(s0 + t), leaf, state))
    out.sort(key=lambda rec: rec[0])
    return out


def _gram_schmidt_frames(fr, g):
    out = np.empty_like(fr)
    d = fr.shape[1]
    for a in range(d):
        v = fr[:, a]
        for b in range(a):
            proj = np.einsum('ni,nij,nj->n', out[:, b], g, v)
            v = v - proj[:, None] * out[:, b]
        nrm = np.sqrt(np.einsum('ni,nij,nj->n', v, g, v))
        out[:, a] = v / nrm[:, None]
    return out


@dataclass
class Foliation:
    """Ordered CMC leaves with H = (n-1)/s and their separation data."""

    s_values: np.ndarray
    leaves: list
    separations: list            # adjacent-pair radial separations (fields)
    records: list                # cmc_posteriori_check dicts
    annulus: tuple
    group: object = None
    reports: list = field(default_factory=list)

    @property
    def radii_fields(self):
        return [np.linalg.norm(leaf.positions, axis=1) for leaf in self.leaves]

    def min_separation(self):
        return min(float(sep.min()) for sep in self.separations)

    def check_nesting(self):
        """Strict monotonicity of the radial graph coordinate in s."""
        for k, sep in enumerate(self.separations):
            if sep.min() <= 0:
                raise LeafCrossing(
                    f"leaves {k} and {k + 1} cross "
                    f"(min separation {sep.min():.3e})")
        return True

    def leaf_at(self, s):
        k = int(np.argmin(np.abs(self.s_values - s)))
        return self.leaves[k]

    def save(self, directory):
        os.makedirs(directory, exist_ok=True)
        np.savez(os.path.join(directory, "foliation_meta.npz"),
                 version=1, s_values=self.s_values,
                 annulus=np.asarray(self.annulus))
        for s, leaf in zip(self.s_values, self.leaves):
            leaf.to_npz(os.path.join(directory, _leaf_name(s)))


def _leaf_name(s):
    return f"leaf_{s:.10e}.npz"


def local_foliate(center, r0=0.125, group=None, count=5, config=None,
                  solver=None):
    """Local CMC foliation around a CMC center leaf.

    Equidistants of the center at parameters s in
    [s_c/(1+2 r0), (1+2 r0) s_c] are perturbed leafwise to H = (n-1)/s;
    separation functions are measured along the center leaf's normals and
    must satisfy the first-order law w = (s'-s) + O((s'-s)^2 + eps (s'-s)).
    """
    if not (0.0 < r0 < 1.0 / 6.0):
        raise ValueError("r0 must lie in (0, 1/6)")
    solver = solver or CmcConfig(tol_rel=1e-7)
    group = group or center.cloud.group
    cmc_posteriori_check(center, solver_tol_rel=max(solver.tol_rel, 1e-7))
    n = center.cloud.n
    s_c = (n - 1) / float(center.mean_curvature.mean())
    lo, hi = s_c / (1.0 + 2.0 * r0), s_c * (1.0 + 2.0 * r0)
    s_grid = np.geomspace(lo, hi, count)
    evolved = equidistant_evolve(center, s_grid)

    leaves, records, reports = [], [], []
    for (s, eq_leaf, state) in evolved:
        out, w, rep = solve_cmc(eq_leaf, (n - 1) / s, group, solver)
        leaves.append(out)
        records.append(cmc_posteriori_check(
            out, solver_tol_rel=10 * solver.tol_rel))
        reports.append(rep)

    # separations measured along the center leaf's normals
    span = (hi - lo) * 1.2 + 1e-9
    fam = normal_family(center, -span, span)
    graphs = [project_to_surface(fam, RadialSurface(leaf.positions),
                                 tau_guess=s - s_c)
              for s, leaf in zip(s_grid, leaves)]
    seps = [graphs[k + 1] - graphs[k] for k in range(len(graphs) - 1)]
    fol = Foliation(s_values=s_grid, leaves=leaves, separations=seps,
                    records=records, annulus=(lo, hi), group=group,
                    reports=reports)
    fol.check_nesting()
    fol.separation_law = [
        float(np.abs(seps[k] - (s_grid[k + 1] - s_grid[k])).max())
        for k in range(len(seps))]
    return fol


def global_foliate(metric, annulus, ratio=1.125, cloud=None, group=None,
                   solver=None, weld_stride=0, checkpoint_dir=None):
    """Foliate a neck annulus [a, b] by CMC perturbations of coordinate spheres.

    The s-grid is geometric with effective ratio <= `ratio` and exact
    endpoints, so the boundary leaves have mean curvature (n-1)/a and
    (n-1)/b. With weld_stride > 0, every weld_stride-th adjacent pair is
    re-derived through the local equidistant route and compared against the
    independently solved leaf (the uniqueness weld). Failed stacks resume
    from checkpointed leaves.
    """
    a, b = annulus
    if a >= b:
        raise ValueError("annulus radii out of order")
    if cloud is None:
        raise ValueError("global_foliate needs a node cloud")
    group = group or cloud.group
    solver = solver or CmcConfig(tol_rel=1e-7)
    n = metric.n
    m = max(1, int(np.ceil(np.log(b / a) / np.log(ratio))))
    s_grid = a * (b / a) ** (np.arange(m + 1) / m)
    s_grid[0], s_grid[-1] = a, b

    leaves, records, reports = [], [], []
    for s in s_grid:
        path = None
        if checkpoint_dir:
            os.makedirs(checkpoint_dir, exist_ok=True)
            path = os.path.join(checkpoint_dir, _leaf_name(s))
            if os.path.exists(path):
                leaves.append(EmbeddedLeaf.from_npz(path, cloud, metric))
                records.append(cmc_posteriori_check(
                    leaves[-1], solver_tol_rel=10 * solver.tol_rel))
                reports.append(None)
                continue
        try:
            sphere = coordinate_sphere(cloud, metric, s)
            out, w, rep = solve_cmc(sphere, (n - 1) / s, group, solver)
        except Exception as exc:
            raise type(exc)(f"leaf s = {s:.6g}: {exc}") from exc
        leaves.append(out)
        records.append(cmc_posteriori_check(
            out, solver_tol_rel=10 * solver.tol_rel))
        reports.append(rep)
        if path:
            out.to_npz(path)

    radii = [np.linalg.norm(leaf.positions, axis=1) for leaf in leaves]
    seps = [radii[k + 1] - radii[k] for k in range(len(radii) - 1)]
    fol = Foliation(s_values=s_grid, leaves=leaves, separations=seps,
                    records=records, annulus=(a, b), group=group,
                    reports=reports)
    fol.check_nesting()

    if weld_stride:
        welds = []
        for k in range(0, len(s_grid) - 1, weld_stride):
            welds.append((float(s_grid[k + 1]),
                          _weld_gap(fol, k, metric, group, solver)))
        fol.welds = welds
    return fol


def _weld_gap(fol, k, metric, group, solver):
    """Uniqueness weld: local route from leaf k vs the independent leaf k+1."""
    n = metric.n
    s_next = fol.s_values[k + 1]
    evolved = equidistant_evolve(fol.leaves[k], [s_next])
    _, eq_leaf, _ = evolved[-1]
    out, _, _ = solve_cmc(eq_leaf, (n - 1) / s_next, group, solver)
    r_local = np.linalg.norm(out.positions, axis=1)
    r_indep = np.linalg.norm(fol.leaves[k + 1].positions, axis=1)
    return float(np.abs(r_local - r_indep).max() / s_next)
