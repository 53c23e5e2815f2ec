"""Finite subgroups of SO(n) acting freely on the unit sphere.

A GroupAction is given by generator matrices; the full element list is
obtained by closure under products. Freeness is checked on sampled sphere
points (no non-identity element may fix one).
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import GroupMismatch

_ORTHO_TOL = 1e-12
_FIX_TOL = 1e-9
_MAX_ORDER = 512


def _element_key(mat, decimals=9):
    return tuple(np.round(mat, decimals).ravel().tolist())


@dataclass(frozen=True)
class GroupAction:
    """Finite Gamma < SO(n) acting freely on S^{n-1}, given by generators.

    Generators must be special orthogonal to 1e-12; the generated group must
    close up within 512 elements.
    """

    n: int
    generators: tuple = ()
    _elements: np.ndarray = field(init=False, repr=False, compare=False, default=None)

    def __post_init__(self):
        gens = [np.asarray(g, dtype=float) for g in self.generators]
        for g in gens:
            if g.shape != (self.n, self.n):
                raise GroupMismatch(f"generator shape {g.shape}, expected {(self.n, self.n)}")
            if np.abs(g.T @ g - np.eye(self.n)).max() > _ORTHO_TOL:
                raise GroupMismatch("generator is not orthogonal to 1e-12")
            if abs(np.linalg.det(g) - 1.0) > 1e-12:
                raise GroupMismatch("generator must have det +1")
        object.__setattr__(self, "generators", tuple(g.copy() for g in gens))
        object.__setattr__(self, "_elements", self._close())

    def _close(self):
        eye = np.eye(self.n)
        elems = {_element_key(eye): eye}
        frontier = [eye]
        while frontier:
            nxt = []
            for e in frontier:
                for g in self.generators:
                    prod = g @ e
                    key = _element_key(prod)
                    if key not in elems:
                        if len(elems) >= _MAX_ORDER:
                            raise GroupMismatch("group closure exceeded 512 elements")
                        elems[key] = prod
                        nxt.append(prod)
            frontier = nxt
        order = sorted(elems.values(), key=_element_key)
        return np.array(order)

    @property
    def elements(self):
        return self._elements

    @property
    def order(self):
        return len(self._elements)

    @property
    def is_trivial(self):
        return self.order == 1

    def check_free(self, points):
        """No non-identity element may fix any of the given unit vectors."""
        pts = np.atleast_2d(points)
        for e in self._elements:
            if np.abs(e - np.eye(self.n)).max() < 1e-12:
                continue
            moved = np.linalg.norm(pts @ e.T - pts, axis=1)
            if moved.min() < _FIX_TOL:
                raise GroupMismatch("action is not free: a sampled point is fixed")
        return True

    def same_group(self, other, tol=1e-9):
        """Equality as matrix sets (not just isomorphism)."""
        if self.n != other.n or self.order != other.order:
            return False
        for e in self._elements:
            d = np.abs(other._elements - e[None]).max(axis=(1, 2))
            if d.min() > tol:
                return False
        return True


def cyclic_group(n, k, plane=(0, 1), extra_plane=None):
    """Z_k generated by simultaneous rotation(s) by 2*pi/k.

    For n = 4 a free action needs rotation in two orthogonal planes; by
    default `extra_plane` = the complementary plane, giving the standard
    free Z_k < SO(4) (x, y) -> (e^{2pi i/k} x, e^{2pi i/k} y).
    """
    theta = 2.0 * np.pi / k
    g = np.eye(n)
    c, s = np.cos(theta), np.sin(theta)
    i, j = plane
    g[i, i] = c; g[i, j] = -s; g[j, i] = s; g[j, j] = c
    if n == 4:
        if extra_plane is None:
            extra_plane = tuple(a for a in range(4) if a not in plane)
        p, q = extra_plane
        g[p, p] = c; g[p, q] = -s; g[q, p] = s; g[q, q] = c
    return GroupAction(n, (g,))


def antipodal_group(n):
    """Z_2 = {+-Id}; free on S^{n-1} for even n, det +1 needs n even."""
    if n % 2 != 0:
        raise GroupMismatch("antipodal map has det -1 in odd dimensions")
    return GroupAction(n, (-np.eye(n),))


def trivial_group(n):
    return GroupAction(n, ())
