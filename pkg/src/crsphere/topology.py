"""Integer-valued topological quantities computed on quadrature grids.

Two primitives cover every degree/Chern computation in the package:

* plaquette-flux sums for complex line subbundles of a trivial bundle
  (gauge invariant, so arbitrary per-node phase choices are harmless);
* signed spherical-area sums for maps into the 2-sphere.

Both include the two polar caps, so the total is an exact integer up to
floating-point rounding once the field is resolved by the grid.  The
global sign convention is calibrated so that the tautological line
bundle over CP^1 reports first Chern number -1.
"""

from __future__ import annotations

import numpy as np

from .grid import SphereGrid

# Left quaternion multiplications on (x1, x2, x3, x4) = x1 + x2 i + x3 j + x4 k.
# LI equals the canonical complex structure J0 of the C^2 identification.
LI = np.array([[0., -1., 0., 0.], [1., 0., 0., 0.],
               [0., 0., 0., -1.], [0., 0., 1., 0.]])
LJ = np.array([[0., 0., -1., 0.], [0., 0., 0., 1.],
               [1., 0., 0., 0.], [0., -1., 0., 0.]])
LK = np.array([[0., 0., 0., -1.], [0., 0., -1., 0.],
               [0., 1., 0., 0.], [1., 0., 0., 0.]])


def _rows(grid, field):
    return field.reshape(grid.n_theta, grid.n_phi, *field.shape[1:])


def _link_phase(va, vb):
    """Phase of the overlap <va, vb>; magnitude reported for diagnostics."""
    ip = np.sum(np.conj(va) * vb, axis=-1)
    return ip


def line_bundle_chern(vectors, grid: SphereGrid):
    """First Chern number of span(v(z)) inside a trivial C^k bundle.

    ``vectors``: (n_nodes, k) complex, nonvanishing (normalization is not
    required).  Returns (chern: float, min_overlap: float); chern is an
    exact integer up to rounding when min_overlap stays well above zero.
    """
    v = np.asarray(vectors, dtype=complex)
    v = v / np.linalg.norm(v, axis=1)[:, None]
    V = _rows(grid, v)
    right = _link_phase(V, np.roll(V, -1, axis=1))          # (j,k) -> (j,k+1)
    down = _link_phase(V[:-1], V[1:])                       # (j,k) -> (j+1,k)
    min_ov = min(np.abs(right).min(), np.abs(down).min())

    # interior plaquettes: (j,k) -> (j,k+1) -> (j+1,k+1) -> (j+1,k)
    prod = (right[:-1]
            * np.roll(down, -1, axis=1)[:, :]
            * np.conj(right[1:])
            * np.conj(down))
    flux = np.angle(prod).sum()
    # caps close the sphere; their loop holonomies are reduced mod 2 pi
    # (a resolved cap carries less than pi of flux, the winding part is
    # what makes the total integral integer-valued)
    h0 = np.angle(right[0]).sum()
    hl = np.angle(right[-1]).sum()
    h0 -= 2.0 * np.pi * np.round(h0 / (2.0 * np.pi))
    hl -= 2.0 * np.pi * np.round(hl / (2.0 * np.pi))
    # global sign calibrated so the tautological bundle over CP^1 gives -1
    total = -(flux - h0 + hl) / (2.0 * np.pi)
    return float(total), float(min_ov)


def _triangle_solid_angle(a, b, c):
    """Oriented solid angle of spherical triangles (vectorized)."""
    num = np.einsum("...i,...i->...", a, np.cross(b, c))
    den = (1.0 + np.einsum("...i,...i->...", a, b)
           + np.einsum("...i,...i->...", b, c)
           + np.einsum("...i,...i->...", c, a))
    return 2.0 * np.arctan2(num, den)


def sphere_map_degree(uvecs, grid: SphereGrid):
    """Topological degree of a map into S^2 given by unit 3-vectors per node."""
    u = np.asarray(uvecs, dtype=float)
    u = u / np.linalg.norm(u, axis=1)[:, None]
    U = _rows(grid, u)
    A = U[:-1]
    B = np.roll(U[:-1], -1, axis=1)
    C = np.roll(U[1:], -1, axis=1)
    D = U[1:]
    area = _triangle_solid_angle(A, B, C).sum() + _triangle_solid_angle(A, C, D).sum()
    # caps: fan triangles from the normalized row mean
    for row, sign in ((U[0], -1.0), (U[-1], +1.0)):
        center = row.mean(axis=0)
        center = center / np.linalg.norm(center)
        tri = _triangle_solid_angle(np.broadcast_to(center, row.shape),
                                    row, np.roll(row, -1, axis=0))
        area += sign * tri.sum()
    # sign calibrated so the identity map has degree +1
    return float(-area / (4.0 * np.pi))


def orthogonal_part(mats):
    """Polar orthogonal factor of (batched) matrices via SVD."""
    u, _, vt = np.linalg.svd(mats)
    return u @ vt


def acs_unit_vector(J):
    """Unit imaginary-quaternion coordinates of orthogonal complex structures.

    For J in SO(4) with J^2 = -Id inducing the standard orientation,
    J = u1 LI + u2 LJ + u3 LK with u on the unit 2-sphere.  Non-orthogonal
    complex structures are polar-retracted first.
    """
    J = np.asarray(J, dtype=float)
    batch = J.shape[:-2]
    Q = orthogonal_part(J.reshape((-1, 4, 4)))
    u = np.stack([-0.25 * np.einsum("nab,ba->n", Q, L) for L in (LI, LJ, LK)],
                 axis=1)
    norms = np.linalg.norm(u, axis=1)
    return (u / norms[:, None]).reshape(batch + (3,)), norms.reshape(batch)


def acs_from_unit_vector(u):
    """Orthogonal complex structure with the given quaternion coordinates."""
    u = np.asarray(u, dtype=float)
    return (u[..., 0, None, None] * LI + u[..., 1, None, None] * LJ
            + u[..., 2, None, None] * LK)
