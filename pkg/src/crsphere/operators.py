"""Real-linear Cauchy-Riemann operators D = dbar0 + (1/2) Y.

Operators act on the real coefficient layout of Sections and produce
AntiForms.  The domain/codomain dimensions differ by exactly 4, so the
real Fredholm index of every assembled operator is 4 by construction;
kernel and cokernel dimensions are decided by singular value thresholds
with an explicit spectral-gap certificate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.sparse.linalg import LinearOperator, lobpcg

from . import spectral as sp
from .grid import SphereGrid
from .spectral import AntiForm, Section

TAU_RANK = 1e-8        # relative singular value threshold
GAP_REQUIRED = 1e3     # spectral gap demanded across the rank cut
TAU_SUPERREG = 1e-6    # normalized least-singular-value floor for frames


class CertificationError(RuntimeError):
    """Raised when a certified construction step fails; carries a witness."""

    def __init__(self, code, message, witness=None):
        super().__init__(f"{code}: {message}")
        self.code = code
        self.witness = witness


# ---------------------------------------------------------------------------
# Bundle homomorphisms
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class BundleHom:
    """Grid-sampled real-linear map from Section values to AntiForm values.

    samples[n] is the 4x4 real matrix acting on the R^4 fiber value at
    grid node n, producing a spin-(-1) value pair in the same real layout.
    """

    samples: np.ndarray
    grid: SphereGrid
    L: int

    def __post_init__(self):
        s = np.asarray(self.samples, dtype=float)
        if s.shape != (self.grid.n_nodes, 4, 4):
            raise sp.KindError(f"BundleHom samples shaped {s.shape}")
        object.__setattr__(self, "samples", s)

    @classmethod
    def zero(cls, grid, L):
        return cls(np.zeros((grid.n_nodes, 4, 4)), grid, L)

    def operator_norm_bound(self) -> float:
        """sup-node spectral norm; bounds the induced L2 operator norm."""
        return float(np.linalg.norm(self.samples, ord=2, axis=(1, 2)).max())

    def smoothness_tail(self, l_split=None) -> float:
        """Spectral tail fraction of the matrix entries (smoothness check)."""
        l_split = l_split if l_split is not None else max(2, (4 * self.L) // 5)
        entries = self.samples.reshape(self.grid.n_nodes, 16).T
        entries = entries.reshape(16, self.grid.n_theta, self.grid.n_phi)
        coeffs = sp.analyze(entries.astype(complex), 0, self.L, self.grid)
        return sp.tail_fraction(coeffs, self.L, 0, l_split)

    def __add__(self, other):
        if self.grid is not other.grid and self.grid.describe() != other.grid.describe():
            raise sp.KindError("grid mismatch")
        return BundleHom(self.samples + other.samples, self.grid, self.L)

    def __mul__(self, a):
        return BundleHom(self.samples * float(a), self.grid, self.L)

    __rmul__ = __mul__


def _complex_pair(vals_r4):
    return np.stack([vals_r4[..., 0] + 1j * vals_r4[..., 1],
                     vals_r4[..., 2] + 1j * vals_r4[..., 3]], axis=-1)


def _real_quad(vals_c2):
    return np.stack([vals_c2[..., 0].real, vals_c2[..., 0].imag,
                     vals_c2[..., 1].real, vals_c2[..., 1].imag], axis=-1)


def _batch_synth_values(coeffs, L, grid):
    """(B, 2, n_modes0) complex coefficients -> (B, n_nodes, 4) real values."""
    B = coeffs.shape[0]
    v = sp.synthesize(coeffs.reshape(B * 2, -1), 0, L, grid)
    v = v.reshape(B, 2, grid.n_nodes)
    return _real_quad(np.moveaxis(v, 1, 2))


def _batch_analyze_values(vals_r4, L, grid):
    """(B, n_nodes, 4) real antiform values -> (B, 2, n_modes1) complex."""
    c2 = np.moveaxis(_complex_pair(vals_r4), 2, 1)
    B = c2.shape[0]
    out = sp.analyze(c2.reshape(B * 2, grid.n_theta, grid.n_phi), -1, L, grid)
    return out.reshape(B, 2, -1)


def apply_hom(y: BundleHom, x: Section) -> AntiForm:
    """Pointwise action of the homomorphism, re-analyzed at spin -1."""
    vals = sp.values_r4(x, y.grid)
    out = np.einsum("nab,nb->na", y.samples, vals)
    return AntiForm(_batch_analyze_values(out[None], y.L, y.grid)[0], y.L)


# ---------------------------------------------------------------------------
# Operator container
# ---------------------------------------------------------------------------

def _dbar0_factors(L):
    ls, _ = sp.mode_degrees(L, 0)
    return -np.sqrt(ls[1:] * (ls[1:] + 1.0))  # aligned: out-mode j <- in-mode j+1


@dataclass
class CROperator:
    """Assembled operator with its dense real matrix built on demand."""

    y: BundleHom | None
    L: int
    grid: SphereGrid
    provenance: str = "assembled"
    half_weight: float = 0.5
    _matrix: np.ndarray | None = field(default=None, repr=False)

    @property
    def shape(self):
        return (sp.real_dim(self.L, -1), sp.real_dim(self.L, 0))

    # fast application paths ------------------------------------------------
    def apply_coeffs(self, coeffs):
        """(B, 2, n_modes0) complex -> (B, 2, n_modes1) complex, D applied."""
        coeffs = np.asarray(coeffs, dtype=complex)
        fac = _dbar0_factors(self.L)
        flat = (coeffs * 1.0)[:, :, 1:] * fac
        if self.y is not None:
            vals = _batch_synth_values(coeffs, self.L, self.grid)
            w = np.einsum("nab,Bnb->Bna", self.y.samples, vals)
            flat = flat + self.half_weight * _batch_analyze_values(w, self.L, self.grid)
        return flat

    def apply(self, x: Section) -> AntiForm:
        if x.L != self.L:
            raise sp.KindError("truncation mismatch")
        return AntiForm(self.apply_coeffs(x.coeffs[None])[0], self.L)

    def apply_real(self, vecs):
        """Matrix-free action on stacked real coefficient vectors (dim0, B)."""
        v = np.asarray(vecs, dtype=float)
        one = v.ndim == 1
        v = v.reshape(self.shape[1], -1)
        n0 = sp.n_modes(self.L, 0)
        c = np.stack([v[0:n0] + 1j * v[n0:2 * n0],
                      v[2 * n0:3 * n0] + 1j * v[3 * n0:4 * n0]], axis=1).T
        out = self.apply_coeffs(np.ascontiguousarray(c))
        n1 = sp.n_modes(self.L, -1)
        r = np.concatenate([out[:, 0].real.T, out[:, 0].imag.T,
                            out[:, 1].real.T, out[:, 1].imag.T])
        return r[:, 0] if one else r


    # dense matrix ----------------------------------------------------------
    @property
    def matrix(self):
        if self._matrix is None:
            self._matrix = self._assemble_dense()
        return self._matrix

    def _assemble_dense(self, chunk=512):
        dim1, dim0 = self.shape
        n0, n1 = sp.n_modes(self.L, 0), sp.n_modes(self.L, -1)
        M = np.zeros((dim1, dim0))
        fac = _dbar0_factors(self.L)
        rows = np.arange(n1)
        for b in range(4):
            M[b * n1 + rows, b * n0 + 1 + rows] = fac
        if self.y is None:
            return M
        for comp in range(2):
            for part, scale in ((0, 1.0), (1, 1j)):
                for start in range(0, n0, chunk):
                    stop = min(start + chunk, n0)
                    B = stop - start
                    cc = np.zeros((B, 2, n0), dtype=complex)
                    cc[:, comp, start:stop] = np.eye(B) * scale
                    vals = _batch_synth_values(cc, self.L, self.grid)
                    w = np.einsum("nab,Bnb->Bna", self.y.samples, vals)
                    out = _batch_analyze_values(w, self.L, self.grid)
                    colblock = (2 * comp + part) * n0
                    cols = np.s_[colblock + start: colblock + stop]
                    M[0 * n1:1 * n1, cols] += self.half_weight * out[:, 0].real.T
                    M[1 * n1:2 * n1, cols] += self.half_weight * out[:, 0].imag.T
                    M[2 * n1:3 * n1, cols] += self.half_weight * out[:, 1].real.T
                    M[3 * n1:4 * n1, cols] += self.half_weight * out[:, 1].imag.T
        return M

    def sigma_max(self, iters=40, seed=7):
        """Largest singular value via power iteration on D^T D."""
        rng = np.random.default_rng(seed)
        v = rng.standard_normal(self.shape[1])
        v /= np.linalg.norm(v)
        lam = 1.0
        for _ in range(iters):
            w = self.apply_real(v)
            u = self.apply_real_adjoint(w)
            lam = np.linalg.norm(u)
            v = u / lam
        return float(np.sqrt(lam))

    def apply_real_adjoint(self, w):
        """D^T acting matrix-free on stacked antiform real vectors.

        The quadrature weights inside analysis commute with the per-node
        transposed multiplication, so the adjoint pipeline is again
        analyze(Y^T synthesize(.)) with no explicit weight factors.
        """
        w = np.asarray(w, dtype=float)
        one = w.ndim == 1
        w = w.reshape(self.shape[0], -1)
        n1 = sp.n_modes(self.L, -1)
        c = np.stack([w[0:n1] + 1j * w[n1:2 * n1],
                      w[2 * n1:3 * n1] + 1j * w[3 * n1:4 * n1]], axis=1).T
        c = np.ascontiguousarray(c)
        B = c.shape[0]
        fac = _dbar0_factors(self.L)
        n0 = sp.n_modes(self.L, 0)
        out = np.zeros((B, 2, n0), dtype=complex)
        out[:, :, 1:] = c * fac
        if self.y is not None:
            v = sp.synthesize(c.reshape(B * 2, -1), -1, self.L, self.grid)
            v = v.reshape(B, 2, self.grid.n_nodes)
            vr = _real_quad(np.moveaxis(v, 1, 2))
            u = np.einsum("nba,Bnb->Bna", self.y.samples, vr)
            uc = np.moveaxis(_complex_pair(u), 2, 1)
            ana = sp.analyze(uc.reshape(B * 2, self.grid.n_theta, self.grid.n_phi),
                             0, self.L, self.grid).reshape(B, 2, n0)
            out = out + self.half_weight * ana
        res = np.concatenate([out[:, 0].real.T, out[:, 0].imag.T,
                              out[:, 1].real.T, out[:, 1].imag.T])
        return res[:, 0] if one else res


def assemble(y: BundleHom, provenance="assembled") -> CROperator:
    """D = dbar0 + (1/2) * (pointwise action of y), on y's grid."""
    return CROperator(y=y, L=y.L, grid=y.grid, provenance=provenance)


def flat_operator(L, grid) -> CROperator:
    return CROperator(y=None, L=L, grid=grid, provenance="dbar0")


def perturbed(d: CROperator, y_extra: BundleHom, t: float, provenance=None) -> CROperator:
    """D + t * (action of y_extra); the stored 1/2 convention is absorbed."""
    base = d.y if d.y is not None else BundleHom.zero(d.grid, d.L)
    combined = BundleHom(base.samples + (t / d.half_weight) * y_extra.samples,
                         d.grid, d.L)
    return CROperator(y=combined, L=d.L, grid=d.grid,
                      provenance=provenance or f"{d.provenance}+t*Ys")


# ---------------------------------------------------------------------------
# Kernel / cokernel extraction
# ---------------------------------------------------------------------------

@dataclass
class KernelReport:
    kernel_basis: list
    cokernel_basis: list
    singular_values: np.ndarray     # descending, length min(shape)
    rank: int
    gap_ratio: float                # last kept / first dropped singular value
    threshold: float
    sigma_max: float
    indeterminate: bool
    provenance: str = "svd"

    @property
    def dim_kernel(self):
        return len(self.kernel_basis)

    @property
    def dim_cokernel(self):
        return len(self.cokernel_basis)

    @property
    def index(self):
        return self.dim_kernel - self.dim_cokernel


def _rank_cut(svals, smax, tau_rel=TAU_RANK, gap=GAP_REQUIRED):
    """Rank decision: threshold rule plus a mandatory spectral gap."""
    tau = tau_rel * smax
    r = int(np.sum(svals > tau))
    if r == len(svals):
        return r, np.inf, tau, False   # only structural zeros dropped: exact
    if r == 0:
        return 0, np.inf, tau, True
    ratio = svals[r - 1] / max(svals[r], np.finfo(float).tiny)
    if ratio >= gap:
        return r, float(ratio), tau, False
    # scan nearby admissible cuts before flagging
    best = None
    for rr in range(max(1, r - 3), min(len(svals), r + 4)):
        rat = svals[rr - 1] / max(svals[rr], np.finfo(float).tiny)
        if rat >= gap and svals[rr] <= 1e-4 * smax:
            if best is None or abs(rr - r) < abs(best[0] - r):
                best = (rr, rat)
    if best is not None:
        return best[0], float(best[1]), tau, False
    return r, float(ratio), tau, True


def kernel_cokernel(d: CROperator, tau_rel=TAU_RANK) -> KernelReport:
    """Full-SVD kernel/cokernel report with gap certificate.

    Kernel and cokernel bases are L2-orthonormal because the coefficient
    layout is an L2 isometry.  dim ker - dim coker = 4 structurally; the
    report asserts it as a certificate.
    """
    m = d.matrix
    u, svals, vt = np.linalg.svd(m, full_matrices=True)
    smax = float(svals[0])
    r, ratio, tau, indet = _rank_cut(svals, smax, tau_rel)
    kernel = [sp.from_real_vec(vt[j], d.L, 0) for j in range(r, vt.shape[0])]
    coker = [sp.from_real_vec(u[:, j], d.L, -1) for j in range(r, u.shape[1])]
    rep = KernelReport(kernel_basis=kernel, cokernel_basis=coker,
                       singular_values=svals, rank=r, gap_ratio=ratio,
                       threshold=tau, sigma_max=smax, indeterminate=indet,
                       provenance="svd")
    if rep.index != 4:
        raise CertificationError(
            "INDEX_VIOLATION",
            f"dim ker - dim coker = {rep.index}, expected 4",
            witness=rep)
    return rep


def _lobpcg_bottom(matvec, n, k, precond, rng, X0=None, tol=1e-9, maxiter=250):
    A = LinearOperator((n, n), matvec=matvec, matmat=matvec)
    M = LinearOperator((n, n), matvec=precond, matmat=precond)
    X = X0 if X0 is not None else rng.standard_normal((n, k))
    import warnings
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        w, V = lobpcg(A, X, M=M, largest=False, tol=tol, maxiter=maxiter)
    order = np.argsort(w)
    return np.sqrt(np.clip(w[order], 0.0, None)), V[:, order]


def bottom_spectrum(d: CROperator, k=8, side="right", seed=11, X0=None):
    """Smallest-k singular values (and vectors) without a dense SVD.

    Preconditioned LOBPCG on D^T D (or D D^T for the cokernel side); the
    flat-operator spectrum supplies the diagonal preconditioner.  Results
    are residual-validated; callers cross-check against LAPACK in tests.
    """
    rng = np.random.default_rng(seed)
    ls1 = sp.mode_degrees(d.L, 0)[0]
    lam0 = np.tile(ls1 * (ls1 + 1.0), 4)
    shift = 1.0 + (0.0 if d.y is None else
                   (d.half_weight * d.y.operator_norm_bound()) ** 2)
    if side == "right":
        n = d.shape[1]
        pre_d = 1.0 / (lam0 + shift)

        def mv(x):
            x2 = x.reshape(n, -1)
            return d.apply_real_adjoint(d.apply_real(x2)).reshape(x.shape)
    else:
        n = d.shape[0]
        ls2 = sp.mode_degrees(d.L, -1)[0]
        pre_d = 1.0 / (np.tile(ls2 * (ls2 + 1.0), 4) + shift)

        def mv(x):
            x2 = x.reshape(n, -1)
            return d.apply_real(d.apply_real_adjoint(x2)).reshape(x.shape)

    def prec(x):
        return x * pre_d[:, None] if x.ndim == 2 else x * pre_d

    svals, V = _lobpcg_bottom(mv, n, k, prec, rng, X0=X0)
    res = mv(V) - V * (svals ** 2)[None, :]
    resn = np.linalg.norm(res, axis=0)
    return svals, V, resn


def index_certificate(d: CROperator, k=8, seed=11, tau_rel=1e-6, X0=None):
    """(dim ker, dim coker, gap_ratio) via the bottom spectrum of both sides.

    Uses the relative threshold tau_rel * sigma_max on the k smallest
    singular values; the spectral gap across the cut must still clear
    GAP_REQUIRED.  Falls back to dense svdvals when LOBPCG is inconclusive.
    """
    smax = d.sigma_max()
    tau = tau_rel * smax

    def _count(side):
        try:
            svals, V, resn = bottom_spectrum(d, k=k, side=side, seed=seed, X0=X0)
        except Exception:
            return None, None
        ok = resn <= 1e-6 * smax ** 2
        if not ok[: max(1, k // 2)].all():
            return None, None
        nzero = int(np.sum(svals < tau))
        if nzero >= k:
            return None, None  # null space larger than the probe window
        gap = svals[nzero] / max(svals[nzero - 1], np.finfo(float).tiny) \
            if nzero > 0 else np.inf
        return nzero, gap

    dim_ker, gap_r = _count("right")   # ker(D^T D) = ker(D), structural zeros included
    dim_coker, _ = _count("left")      # ker(D D^T) = coker(D)
    if dim_ker is None or dim_coker is None:
        svals = np.linalg.svd(d.matrix, compute_uv=False)
        r, ratio, _, indet = _rank_cut(svals, float(svals[0]), tau_rel)
        if indet:
            raise CertificationError("INDETERMINATE", "no usable spectral gap")
        dim_ker = d.shape[1] - r
        dim_coker = d.shape[0] - r
        gap_r = ratio
    return dim_ker, dim_coker, float(gap_r)


# ---------------------------------------------------------------------------
# Frame-built operators
# ---------------------------------------------------------------------------

def operator_from_frame(frame, grid: SphereGrid, tau=TAU_SUPERREG) -> CROperator:
    """Unique operator annihilating four pointwise-independent sections.

    The pointwise rule fixes the homomorphism: with nu_i the flat images
    of the frame, the stored samples solve (1/2) Y(z) e_i(z) = -nu_i(z),
    so D e_i = 0 exactly in the truncated model.
    """
    if len(frame) != 4:
        raise ValueError("need exactly four sections")
    L = frame[0].L
    for check_grid in (grid, grid.refined(4)):
        mats = sp.frame_matrices(frame, check_grid)
        sig = np.linalg.svd(mats, compute_uv=False)
        ratio = sig[:, 3] / sig[:, 0]
        worst = int(np.argmin(ratio))
        if ratio[worst] <= tau:
            raise CertificationError(
                "FRAME_DEGENERATE",
                f"frame least singular value ratio {ratio[worst]:.3e} at node {worst}",
                witness={"node": worst, "sigma_ratio": float(ratio[worst]),
                         "grid": check_grid.describe()})
    emat = sp.frame_matrices(frame, grid)
    nus = [sp.values_r4(apply_flat(e), grid) for e in frame]
    numat = np.stack(nus, axis=2)
    y = -2.0 * np.linalg.solve(np.swapaxes(emat, 1, 2), np.swapaxes(numat, 1, 2))
    y = np.swapaxes(y, 1, 2)
    return assemble(BundleHom(y, grid, L), provenance="frame")


def apply_flat(x: Section) -> AntiForm:
    return sp.dbar0(x)


# ---------------------------------------------------------------------------
# Superregularity certification
# ---------------------------------------------------------------------------

@dataclass
class SuperregCertificate:
    verdict: str                    # SUPERREGULAR | DEGENERATE | NOT_FOUND
    min_frame_sigma: float          # min over nodes of sigma_min/sigma_max
    argmin_node: int
    det_signs: tuple                # (n_positive, n_negative, n_small)
    witness: dict | None
    basis: list | None
    oversample_agrees: bool

    @property
    def superregular(self):
        return self.verdict == "SUPERREGULAR"


def _frame_scan(frame, grid):
    mats = sp.frame_matrices(frame, grid)
    sig = np.linalg.svd(mats, compute_uv=False)
    ratio = sig[:, 3] / sig[:, 0]
    dets = np.linalg.det(mats)
    return ratio, dets


def certify_frame(frame, grid: SphereGrid, tau=TAU_SUPERREG) -> SuperregCertificate:
    """Pointwise-independence certificate on quadrature + 4x oversampled grids."""
    fine = grid.refined(4)
    verdicts = []
    data = None
    for g in (grid, fine):
        ratio, dets = _frame_scan(frame, g)
        worst = int(np.argmin(ratio))
        ok = ratio[worst] > tau and dets.min() > 0
        verdicts.append(ok)
        if g is fine:
            signs = (int(np.sum(dets > tau)), int(np.sum(dets < -tau)),
                     int(np.sum(np.abs(dets) <= tau)))
            witness = None
            if not ok:
                witness = {"node": worst, "sigma_ratio": float(ratio[worst]),
                           "det": float(dets[worst]),
                           "angles": fine.node_angles(worst)}
            data = (float(ratio[worst]), worst, signs, witness)
    min_sigma, argmin, signs, witness = data
    verdict = "SUPERREGULAR" if all(verdicts) else "DEGENERATE"
    return SuperregCertificate(verdict=verdict, min_frame_sigma=min_sigma,
                               argmin_node=argmin, det_signs=signs,
                               witness=witness, basis=list(frame),
                               oversample_agrees=(verdicts[0] == verdicts[1]))


def certify_superregular(d: CROperator, basis=None, seed=0, rotations=60,
                         tau=TAU_SUPERREG, report: KernelReport | None = None):
    """Superregularity certificate for an operator.

    With an explicit basis the scan is direct.  With basis=None (AUTO) the
    kernel is searched over coordinate 4-subsets plus seeded random
    rotations; a failed search is NOT_FOUND, not a degeneracy proof.
    """
    if basis is not None:
        return certify_frame(basis, d.grid, tau)
    rep = report if report is not None else kernel_cokernel(d)
    kdim = rep.dim_kernel
    if kdim < 4:
        raise CertificationError("NOT_APPLICABLE", f"kernel dim {kdim} < 4")
    rng = np.random.default_rng(seed)
    kmat = np.stack([sp.to_real_vec(s.coeffs) for s in rep.kernel_basis], axis=1)

    from itertools import combinations
    candidates = [np.eye(kdim)[:, list(cmb)] for cmb in combinations(range(kdim), 4)]
    for _ in range(rotations):
        q, _ = np.linalg.qr(rng.standard_normal((kdim, 4)))
        candidates.append(q)
    best = None
    for sel in candidates:
        vecs = kmat @ sel
        frame = [sp.from_real_vec(vecs[:, j], d.L, 0) for j in range(4)]
        cert = certify_frame(frame, d.grid, tau)
        if best is None or cert.min_frame_sigma > best.min_frame_sigma:
            best = cert
        if cert.superregular:
            return cert
    return SuperregCertificate(verdict="NOT_FOUND",
                               min_frame_sigma=best.min_frame_sigma,
                               argmin_node=best.argmin_node,
                               det_signs=best.det_signs, witness=best.witness,
                               basis=None, oversample_agrees=best.oversample_agrees)
