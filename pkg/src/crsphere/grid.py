"""Quadrature grids on the unit 2-sphere.

Colatitude nodes are Gauss-Legendre in x = cos(theta) (exact for the
band-limited products the transforms integrate), azimuth nodes are
equispaced.  Node order throughout the package is theta-major:
``index = j * n_phi + k`` for row j, column k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.special import roots_legendre


class GridError(ValueError):
    pass


@dataclass(frozen=True)
class SphereGrid:
    """Product quadrature grid with n_theta Gauss-Legendre rows."""

    L: int
    n_theta: int
    n_phi: int
    theta: np.ndarray = field(repr=False)
    w_theta: np.ndarray = field(repr=False)
    phi: np.ndarray = field(repr=False)

    @property
    def n_nodes(self) -> int:
        return self.n_theta * self.n_phi

    @property
    def weights(self) -> np.ndarray:
        """Flattened quadrature weights, summing to 4*pi."""
        w = np.repeat(self.w_theta, self.n_phi) * (2.0 * np.pi / self.n_phi)
        return w

    @property
    def theta_grid(self) -> np.ndarray:
        return np.repeat(self.theta, self.n_phi)

    @property
    def phi_grid(self) -> np.ndarray:
        return np.tile(self.phi, self.n_theta)

    @property
    def chart_coord(self) -> np.ndarray:
        """North-chart stereographic coordinate z = tan(theta/2) e^{-i phi}."""
        return np.tan(self.theta_grid / 2.0) * np.exp(-1j * self.phi_grid)

    @property
    def unit_vectors(self) -> np.ndarray:
        """Cartesian points (x0, x1, x2) with x0 = cos(theta), shape (n_nodes, 3)."""
        th, ph = self.theta_grid, self.phi_grid
        st = np.sin(th)
        return np.stack([np.cos(th), st * np.cos(ph), st * np.sin(ph)], axis=1)

    def node_angles(self, index: int) -> tuple[float, float]:
        j, k = divmod(int(index), self.n_phi)
        return float(self.theta[j]), float(self.phi[k])

    def refined(self, factor: int = 2) -> "SphereGrid":
        """Same truncation, node count scaled by ``factor`` (verification grids)."""
        return _build(self.L, self.n_theta * factor, self.n_phi * factor)

    def describe(self) -> dict:
        return {"L": self.L, "n_theta": self.n_theta, "n_phi": self.n_phi}


def _build(L: int, n_theta: int, n_phi: int) -> SphereGrid:
    x, w = roots_legendre(n_theta)
    order = np.argsort(-x)  # theta ascending from the north pole
    theta = np.arccos(x[order])
    phi = 2.0 * np.pi * np.arange(n_phi) / n_phi
    return SphereGrid(L=L, n_theta=n_theta, n_phi=n_phi,
                      theta=theta, w_theta=w[order], phi=phi)


def make_grid(L: int) -> SphereGrid:
    """Minimal exact-quadrature grid for truncation degree L.

    n_theta = L + 2 and n_phi = 2L + 4 integrate every product of two
    basis functions of degree <= L exactly.
    """
    if L < 2:
        raise GridError(f"truncation degree L={L} rejected, need L >= 2")
    return _build(L, L + 2, 2 * L + 4)
