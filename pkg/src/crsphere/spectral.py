"""Spin-weighted spectral fields on the 2-sphere.

Conventions (used consistently everywhere in this package)
-----------------------------------------------------------
* Colatitude theta in (0, pi) measured from the north pole, azimuth phi.
* North-chart holomorphic coordinate  z = tan(theta/2) * exp(-i phi),
  south chart w = 1/z.  The complex structure j on the sphere is the
  pullback of the standard one from the z chart.
* Basis functions of spin weight s:

      Y[s,l,m](theta, phi) = (-1)^s sqrt((2l+1)/4pi) d^l_{m,-s}(theta) e^{i m phi}

  with d the Wigner rotation function, l >= max(|s|, |m|).  They are
  L2-orthonormal, so coefficient dot products equal L2 pairings.
* Spin lowering (the flat Cauchy-Riemann operator componentwise):

      dbar0 : a[l,m] (spin 0)  ->  -sqrt(l(l+1)) a[l,m] (spin -1),

  annihilating exactly the l = 0 modes.
* A (0,1)-form with spin-(-1) value eta has north-chart representation
  h(z) dzbar with  h = -exp(-i phi) * eta / (1 + |z|^2).
* Values in R^4: (x1, x2, x3, x4) <-> (x1 + i x2, x3 + i x4); J0 is the
  block rotation making that identification complex linear.
* Sections are C^2-valued spin-0 fields (real dimension 4(L+1)^2 at
  truncation L), AntiForms are C^2-valued spin-(-1) fields (real
  dimension 4(L+1)^2 - 4); the difference 4 is the real index of every
  operator assembled on these spaces.
"""

from __future__ import annotations

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy.special import gammaln

from .grid import SphereGrid, make_grid

__all__ = [
    "Section", "AntiForm", "KindError", "n_modes", "mode_degrees",
    "analyze", "synthesize", "synthesize_at", "dbar0", "eth_raise",
    "l2_inner", "l2_norm", "values", "values_r4", "from_values",
    "from_values_r4", "pointwise_frame_matrix", "frame_matrices",
    "scalar_gradient_chart", "spin_to_chart_form", "chart_form_to_spin",
    "to_real_vec", "from_real_vec", "save_field", "load_field",
    "J0", "tail_fraction", "random_smooth_scalar",
]

J0 = np.array([[0.0, -1.0, 0.0, 0.0],
               [1.0, 0.0, 0.0, 0.0],
               [0.0, 0.0, 0.0, -1.0],
               [0.0, 0.0, 1.0, 0.0]])


class KindError(TypeError):
    """Mismatched field kinds or truncations."""


# ---------------------------------------------------------------------------
# Wigner d recursion
# ---------------------------------------------------------------------------

def _seed_log(l0, m, mu, theta):
    """d^{l0}_{m,mu}(theta) for l0 = max(|m|,|mu|), stable log-space form."""
    ct = np.cos(theta / 2.0)
    st = np.sin(theta / 2.0)
    if abs(m) >= abs(mu):
        if m == l0:  # top row
            sign = (-1.0) ** (m - mu)
            a, b = l0 + mu, l0 - mu
        elif -m == l0:  # bottom row
            sign = 1.0
            a, b = l0 - mu, l0 + mu
        else:
            raise AssertionError("seed case")
        logc = 0.5 * (gammaln(2 * l0 + 1) - gammaln(a + 1) - gammaln(b + 1))
        return sign * np.exp(logc + a * np.log(ct) + b * np.log(st))
    # |mu| > |m|: swap indices, d^j_{m,mu} = (-1)^{m-mu} d^j_{mu,m}
    return (-1.0) ** (m - mu) * _seed_log(l0, mu, m, theta)


def wigner_d_block(L, m, mu, theta):
    """d^l_{m,mu}(theta) for l = l0..L, returned as (len(theta), L-l0+1).

    Upward three-term recursion in l seeded by the closed form at
    l0 = max(|m|,|mu|); degrees here stay small enough (L <= ~100) that
    the recursion is stable in double precision.
    """
    l0 = max(abs(m), abs(mu))
    nl = L - l0 + 1
    if nl <= 0:
        return np.zeros((len(theta), 0))
    out = np.empty((len(theta), nl))
    out[:, 0] = _seed_log(l0, m, mu, theta)
    if nl == 1:
        return out
    x = np.cos(theta)
    prev = np.zeros_like(x)
    cur = out[:, 0]
    for k in range(nl - 1):
        j = l0 + k
        if j == 0:  # m = mu = 0 start: d^1_00 = cos(theta)
            nxt = x.copy()
        else:
            c_next = j * np.sqrt(((j + 1.0) ** 2 - m * m) * ((j + 1.0) ** 2 - mu * mu))
            c_mid = (2 * j + 1.0) * (j * (j + 1.0) * x - m * mu)
            c_prev = (j + 1.0) * np.sqrt(float((j * j - m * m) * (j * j - mu * mu)))
            nxt = (c_mid * cur - c_prev * prev) / c_next
        out[:, k + 1] = nxt
        prev, cur = cur, nxt
    return out


@lru_cache(maxsize=96)
def _theta_basis(grid_key, s, L):
    """Per-m colatitude factors of the spin-s basis, cached per grid."""
    grid = _GRID_REGISTRY[grid_key]
    blocks = []
    for m in range(-L, L + 1):
        l0 = max(abs(s), abs(m))
        d = wigner_d_block(L, m, -s, grid.theta)  # columns l0..L already
        ls = np.arange(l0, L + 1)
        norm = (-1.0) ** s * np.sqrt((2 * ls + 1) / (4.0 * np.pi))
        blocks.append(d * norm)
    return blocks


# A tiny registry so cached basis tables can key on lightweight grid ids.
_GRID_REGISTRY: dict = {}


def _grid_key(grid: SphereGrid):
    key = (grid.L, grid.n_theta, grid.n_phi)
    _GRID_REGISTRY[key] = grid
    return key


def n_modes(L, s):
    lmin = abs(s)
    return (L + 1) ** 2 - lmin * lmin


def mode_degrees(L, s):
    """Arrays (l, m) indexing the flat coefficient layout (l-major)."""
    lmin = abs(s)
    ls, ms = [], []
    for l in range(lmin, L + 1):
        ls.extend([l] * (2 * l + 1))
        ms.extend(range(-l, l + 1))
    return np.array(ls), np.array(ms)


@lru_cache(maxsize=64)
def _mode_slices(L, s):
    """For each m, the flat indices of modes with that order."""
    ls, ms = mode_degrees(L, s)
    return {m: np.nonzero(ms == m)[0] for m in range(-L, L + 1)}, ls, ms


def analyze(vals, s, L, grid: SphereGrid):
    """Spin-s coefficients of gridded values.

    ``vals`` has shape (..., n_theta, n_phi) complex; returns
    (..., n_modes).  Exact for fields band-limited at the grid's L.
    """
    vals = np.asarray(vals, dtype=complex)
    batch = vals.shape[:-2]
    v = vals.reshape((-1, grid.n_theta, grid.n_phi))
    fm = np.fft.fft(v, axis=2) * (2.0 * np.pi / grid.n_phi)
    blocks = _theta_basis(_grid_key(grid), s, L)
    slices, _, _ = _mode_slices(L, s)
    out = np.zeros((v.shape[0], n_modes(L, s)), dtype=complex)
    wth = grid.w_theta
    for m in range(-L, L + 1):
        lam = blocks[m + L]
        if lam.shape[1] == 0:
            continue
        col = fm[:, :, m % grid.n_phi] * wth
        out[:, slices[m]] = col @ lam
    return out.reshape(batch + (n_modes(L, s),))


def synthesize(coeffs, s, L, grid: SphereGrid):
    """Gridded values of spin-s coefficients, shape (..., n_theta, n_phi)."""
    coeffs = np.asarray(coeffs, dtype=complex)
    batch = coeffs.shape[:-1]
    c = coeffs.reshape((-1, coeffs.shape[-1]))
    blocks = _theta_basis(_grid_key(grid), s, L)
    slices, _, _ = _mode_slices(L, s)
    spec = np.zeros((c.shape[0], grid.n_theta, grid.n_phi), dtype=complex)
    for m in range(-L, L + 1):
        lam = blocks[m + L]
        if lam.shape[1] == 0:
            continue
        spec[:, :, m % grid.n_phi] = c[:, slices[m]] @ lam.T
    vals = np.fft.ifft(spec, axis=2) * grid.n_phi
    return vals.reshape(batch + (grid.n_theta, grid.n_phi))


def synthesize_at(coeffs, s, L, theta, phi):
    """Pointwise evaluation at arbitrary (theta, phi) arrays."""
    theta = np.atleast_1d(np.asarray(theta, dtype=float))
    phi = np.atleast_1d(np.asarray(phi, dtype=float))
    coeffs = np.asarray(coeffs, dtype=complex)
    batch = coeffs.shape[:-1]
    c = coeffs.reshape((-1, coeffs.shape[-1]))
    slices, _, _ = _mode_slices(L, s)
    out = np.zeros((c.shape[0], len(theta)), dtype=complex)
    for m in range(-L, L + 1):
        idx = slices[m]
        if len(idx) == 0:
            continue
        lam = wigner_d_block(L, m, -s, theta)
        ls = np.arange(max(abs(m), abs(s)), L + 1)
        lam = lam * ((-1.0) ** s * np.sqrt((2 * ls + 1) / (4 * np.pi)))
        out += (c[:, idx] @ lam.T) * np.exp(1j * m * phi)
    return out.reshape(batch + (len(theta),))


# ---------------------------------------------------------------------------
# Field containers
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Section:
    """C^2-valued spin-0 field, complex coefficients shaped (2, (L+1)^2)."""

    coeffs: np.ndarray
    L: int

    spin = 0

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (2, n_modes(self.L, 0)):
            raise KindError(f"Section coefficients shaped {c.shape}, "
                            f"expected (2, {n_modes(self.L, 0)})")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zero(cls, L):
        return cls(np.zeros((2, n_modes(L, 0)), dtype=complex), L)

    @classmethod
    def constant(cls, L, value):
        """Constant section with the given C^2 (or R^4) fiber value."""
        v = np.asarray(value)
        if v.shape == (4,):
            v = np.array([v[0] + 1j * v[1], v[2] + 1j * v[3]])
        c = np.zeros((2, n_modes(L, 0)), dtype=complex)
        c[:, 0] = v * np.sqrt(4.0 * np.pi)  # Y[0,0,0] = 1/sqrt(4 pi)
        return cls(c, L)


@dataclass(frozen=True)
class AntiForm:
    """C^2-valued spin-(-1) field; no l = 0 mode exists."""

    coeffs: np.ndarray
    L: int

    spin = -1

    def __post_init__(self):
        c = np.asarray(self.coeffs, dtype=complex)
        if c.shape != (2, n_modes(self.L, -1)):
            raise KindError(f"AntiForm coefficients shaped {c.shape}, "
                            f"expected (2, {n_modes(self.L, -1)})")
        object.__setattr__(self, "coeffs", c)

    @classmethod
    def zero(cls, L):
        return cls(np.zeros((2, n_modes(L, -1)), dtype=complex), L)


def _check_pair(a, b):
    if type(a) is not type(b):
        raise KindError(f"kind mismatch: {type(a).__name__} vs {type(b).__name__}")
    if a.L != b.L:
        raise KindError(f"truncation mismatch: L={a.L} vs L={b.L}")


def dbar0(x: Section) -> AntiForm:
    """Flat Cauchy-Riemann operator, spin lowering applied componentwise."""
    ls, _ = mode_degrees(x.L, 0)
    fac = -np.sqrt(ls * (ls + 1.0))
    out = (x.coeffs * fac)[:, 1:]  # drop the annihilated l = 0 column block
    # l-major layout puts the single l=0 mode first; remaining modes align
    # one-to-one with the spin-(-1) layout.
    return AntiForm(out, x.L)


def eth_raise(x: Section, grid: SphereGrid):
    """Spin-raising companion of dbar0, returned as gridded spin-(+1) values."""
    ls, _ = mode_degrees(x.L, 0)
    fac = np.sqrt(ls * (ls + 1.0))
    c = (x.coeffs * fac)[:, 1:]
    return synthesize(c, +1, x.L, grid)


def l2_inner(a, b) -> float:
    """Real L2 pairing; equals the quadrature sum of pointwise inner products."""
    _check_pair(a, b)
    return float(np.sum(a.coeffs.real * b.coeffs.real
                        + a.coeffs.imag * b.coeffs.imag))


def l2_norm(a) -> float:
    return float(np.sqrt(np.sum(np.abs(a.coeffs) ** 2)))


def l2_inner_quadrature(a, b, grid: SphereGrid) -> float:
    """Independent quadrature route for the same pairing (Parseval check)."""
    _check_pair(a, b)
    va = values(a, grid).reshape(-1, 2)
    vb = values(b, grid).reshape(-1, 2)
    dots = np.sum(va.real * vb.real + va.imag * vb.imag, axis=1)
    return float(np.dot(grid.weights, dots))


def values(x, grid: SphereGrid):
    """Complex C^2 values at the grid nodes, shape (n_nodes, 2)."""
    v = synthesize(x.coeffs, x.spin, x.L, grid)
    return np.moveaxis(v.reshape(2, grid.n_nodes), 0, 1)


def values_r4(x, grid: SphereGrid):
    """R^4 values (Re1, Im1, Re2, Im2) at the grid nodes, shape (n_nodes, 4)."""
    v = values(x, grid)
    return np.stack([v[:, 0].real, v[:, 0].imag,
                     v[:, 1].real, v[:, 1].imag], axis=1)


def values_at(x, theta, phi):
    v = synthesize_at(x.coeffs, x.spin, x.L, theta, phi)
    return np.moveaxis(v, 0, -1)


def from_values(vals, L, grid: SphereGrid, kind="section"):
    """Analyze gridded C^2 values (n_nodes, 2) into a field."""
    v = np.moveaxis(np.asarray(vals, dtype=complex), 1, 0)
    v = v.reshape(2, grid.n_theta, grid.n_phi)
    if kind == "section":
        return Section(analyze(v, 0, L, grid), L)
    if kind == "antiform":
        return AntiForm(analyze(v, -1, L, grid), L)
    raise KindError(f"unknown kind {kind!r}")


def from_values_r4(vals, L, grid: SphereGrid, kind="section"):
    v = np.asarray(vals, dtype=float)
    return from_values(np.stack([v[:, 0] + 1j * v[:, 1],
                                 v[:, 2] + 1j * v[:, 3]], axis=1), L, grid, kind)


def frame_matrices(sections, grid: SphereGrid):
    """(n_nodes, 4, 4) arrays whose columns are the R^4 values of 4 sections."""
    cols = [values_r4(e, grid) for e in sections]
    return np.stack(cols, axis=2)


def pointwise_frame_matrix(sections, node, grid: SphereGrid):
    """4x4 frame matrix at one grid node (columns = section values)."""
    return frame_matrices(sections, grid)[node]


# ---------------------------------------------------------------------------
# Chart calculus
# ---------------------------------------------------------------------------

def scalar_gradient_chart(coeffs, L, grid: SphereGrid):
    """(d/dz, d/dzbar) of a spin-0 complex scalar, sampled on the grid.

    Derivatives are taken spectrally through the spin ladder:
    d_theta = -(eth + ethbar)/2 and i csc(theta) d_phi = -(eth - ethbar)/2,
    then rotated into the z = tan(theta/2) e^{-i phi} chart.
    """
    coeffs = np.asarray(coeffs, dtype=complex)
    ls, _ = mode_degrees(L, 0)
    up = synthesize((coeffs * np.sqrt(ls * (ls + 1.0)))[..., 1:], +1, L, grid)
    dn = synthesize((coeffs * -np.sqrt(ls * (ls + 1.0)))[..., 1:], -1, L, grid)
    up = up.reshape(up.shape[:-2] + (grid.n_nodes,))
    dn = dn.reshape(dn.shape[:-2] + (grid.n_nodes,))
    d_theta = -(up + dn) / 2.0
    th = grid.theta_grid
    icsc_dphi = -(up - dn) / 2.0          # (i/sin theta) d_phi
    r = np.tan(th / 2.0)
    pref = 1.0 / (1.0 + r * r)
    half_csc = np.sin(th) / (2.0 * r) * icsc_dphi   # (i/(2r)) d_phi
    ph = grid.phi_grid
    dz = np.exp(1j * ph) * pref * (d_theta + half_csc)
    dzbar = np.exp(-1j * ph) * pref * (d_theta - half_csc)
    return dz, dzbar


def spin_to_chart_form(eta, grid: SphereGrid):
    """North-chart component h(z) of the form h dzbar with spin value eta."""
    z = grid.chart_coord
    return -np.exp(-1j * grid.phi_grid) * eta / (1.0 + np.abs(z) ** 2)


def chart_form_to_spin(h, grid: SphereGrid):
    z = grid.chart_coord
    return -np.exp(1j * grid.phi_grid) * h * (1.0 + np.abs(z) ** 2)


# ---------------------------------------------------------------------------
# Real coefficient layout (operators act on these vectors)
# ---------------------------------------------------------------------------

def to_real_vec(coeffs):
    """Stack (2, n) complex coefficients as (Re0, Im0, Re1, Im1) blocks."""
    c = np.asarray(coeffs)
    return np.concatenate([c[0].real, c[0].imag, c[1].real, c[1].imag])


def from_real_vec(vec, L, spin):
    n = n_modes(L, spin)
    v = np.asarray(vec, dtype=float)
    c = np.stack([v[0:n] + 1j * v[n:2 * n], v[2 * n:3 * n] + 1j * v[3 * n:4 * n]])
    if spin == 0:
        return Section(c, L)
    return AntiForm(c, L)


def real_dim(L, spin):
    return 4 * n_modes(L, spin)


# ---------------------------------------------------------------------------
# Misc utilities
# ---------------------------------------------------------------------------

def tail_fraction(coeffs, L, spin, l_split):
    """Energy fraction carried by degrees l > l_split (smoothness certificate)."""
    ls, _ = mode_degrees(L, spin)
    c = np.asarray(coeffs)
    tot = float(np.sum(np.abs(c) ** 2))
    if tot == 0.0:
        return 0.0
    tail = float(np.sum(np.abs(c[..., ls > l_split]) ** 2))
    return tail / tot


def random_smooth_scalar(L, grid, rng, l_band=None, decay=2.0):
    """Real-valued random band-limited spin-0 scalar sampled on the grid."""
    l_band = l_band if l_band is not None else max(2, L // 3)
    c = np.zeros(n_modes(L, 0), dtype=complex)
    ls, ms = mode_degrees(L, 0)
    sel = ls <= l_band
    amp = (1.0 + ls[sel]) ** (-decay)
    c[sel] = (rng.standard_normal(sel.sum()) + 1j * rng.standard_normal(sel.sum())) * amp
    vals = synthesize(c, 0, L, grid).real.reshape(grid.n_nodes)
    return vals


def save_field(path, field, grid: SphereGrid | None = None):
    """Lossless self-describing serialization (numpy archive + json header)."""
    import json
    meta = dict(kind=type(field).__name__.lower(), L=field.L, spin=field.spin)
    arrays = {"coeffs": field.coeffs}
    if grid is not None:
        arrays["grid"] = np.array([grid.L, grid.n_theta, grid.n_phi])
    np.savez(path, meta=np.frombuffer(json.dumps(meta).encode(), dtype=np.uint8),
             **arrays)


def load_field(path):
    import json
    with np.load(path, allow_pickle=False) as data:
        meta = json.loads(bytes(data["meta"]).decode())
        coeffs = data["coeffs"]
        grid = None
        if "grid" in data:
            grid = make_grid(int(data["grid"][0]))
    cls = Section if meta["kind"] == "section" else AntiForm
    return cls(coeffs, int(meta["L"])), grid
