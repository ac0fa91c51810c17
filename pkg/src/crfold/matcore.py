"""Dense complex linear algebra primitives sized for the 4-fold classifier.

Everything here operates on small (2x2, 3x3, and their doubled 4x4/6x6)
complex matrices: tolerance-based ranks, Hermitian signatures, the Takagi
factorization of complex symmetric matrices, the two congruence actions
(star and plain), the doubled block matrix Gamma whose determinant sign is
the intersection index, and the realification identity that ties the real
Hessian determinant to det(Gamma).

All functions are pure and thread-safe; matrices are value objects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

DEFAULT_TOL = 1e-9


class MatcoreError(Exception):
    """Base class for matrix-kernel failures."""


class DimensionMismatch(MatcoreError):
    pass


class NotHermitian(MatcoreError):
    pass


class NotSymmetric(MatcoreError):
    pass


class TakagiError(MatcoreError):
    """Takagi refinement could not push the reconstruction below tolerance."""


@dataclass(frozen=True)
class CMat:
    """Dense complex matrix with explicit shape and a comparison tolerance.

    `entries` is row-major. `tol` is the relative threshold used by rank
    and symmetry checks on this matrix; it must lie in (0, 1).
    """

    rows: int
    cols: int
    entries: tuple
    tol: float = DEFAULT_TOL

    def __post_init__(self):
        if len(self.entries) != self.rows * self.cols:
            raise DimensionMismatch(
                f"{self.rows}x{self.cols} matrix needs {self.rows * self.cols} "
                f"entries, got {len(self.entries)}"
            )
        if not (0.0 < self.tol < 1.0):
            raise ValueError(f"tol must be in (0, 1), got {self.tol}")

    @classmethod
    def from_array(cls, a, tol: float = DEFAULT_TOL) -> "CMat":
        a = np.atleast_2d(np.asarray(a, dtype=complex))
        return cls(a.shape[0], a.shape[1], tuple(complex(x) for x in a.ravel()), tol)

    @property
    def a(self) -> np.ndarray:
        """The matrix as a complex ndarray."""
        return np.array(self.entries, dtype=complex).reshape(self.rows, self.cols)

    def to_json(self) -> dict:
        arr = self.a
        return {
            "rows": self.rows,
            "cols": self.cols,
            "re": [float(x) for x in arr.real.ravel()],
            "im": [float(x) for x in arr.imag.ravel()],
        }

    @classmethod
    def from_json(cls, d: dict, tol: float = DEFAULT_TOL) -> "CMat":
        rows, cols = int(d["rows"]), int(d["cols"])
        re = np.asarray(d["re"], dtype=float)
        im = np.asarray(d["im"], dtype=float)
        if re.size != rows * cols or im.size != rows * cols:
            raise DimensionMismatch("re/im length does not match rows*cols")
        return cls.from_array((re + 1j * im).reshape(rows, cols), tol)


@dataclass(frozen=True)
class Signature:
    """Inertia of a Hermitian matrix: counts of positive and negative eigenvalues."""

    p: int
    q: int

    @property
    def rank(self) -> int:
        return self.p + self.q

    @property
    def sigma(self) -> int:
        """|p - q|, invariant under sign flips of the matrix."""
        return abs(self.p - self.q)


@dataclass(frozen=True)
class TakagiFactors:
    """U unitary and D nonnegative real diagonal with S = U D U^T, D descending."""

    U: CMat
    D: CMat


def _coerce(M, tol=None):
    """Accept a CMat or array-like; return (ndarray, tol)."""
    if isinstance(M, CMat):
        return M.a, (M.tol if tol is None else tol)
    return np.atleast_2d(np.asarray(M, dtype=complex)), (DEFAULT_TOL if tol is None else tol)


def rank(M, tol: float | None = None) -> int:
    """Numerical rank: singular values above tol times the largest one.

    The zero matrix has rank 0. The threshold is relative because the
    classification moduli degenerate continuously (theta -> 0, tau -> 1),
    which makes absolute thresholds unstable.
    """
    a, tol = _coerce(M, tol)
    if a.size == 0:
        raise DimensionMismatch("rank of an empty matrix is undefined")
    s = np.linalg.svd(a, compute_uv=False)
    if s[0] == 0.0:
        return 0
    return int(np.count_nonzero(s > tol * s[0]))


def hermitian_signature(H, tol: float | None = None) -> Signature:
    """Signature (p, q) of a Hermitian matrix; eigenvalues within tol*norm of 0 count in neither.

    Raises NotHermitian when the defect ||H - H^dagger|| exceeds tol*||H||.
    """
    a, tol = _coerce(H, tol)
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch("signature needs a square matrix")
    nrm = np.linalg.norm(a)
    if np.linalg.norm(a - a.conj().T) > tol * max(nrm, 1e-300):
        raise NotHermitian("matrix is not Hermitian within tolerance")
    sym = (a + a.conj().T) / 2.0
    w = np.linalg.eigvalsh(sym)
    cut = tol * max(nrm, 0.0)
    p = int(np.count_nonzero(w > cut))
    q = int(np.count_nonzero(w < -cut))
    return Signature(p, q)


def _takagi_attempt(a: np.ndarray, cluster_rtol: float) -> tuple[np.ndarray, np.ndarray]:
    V, s, Wh = np.linalg.svd(a)
    W = Wh.conj().T
    n = a.shape[0]
    # cluster singular values so repeated/near-repeated ones share one block
    blocks: list[list[int]] = []
    for i in range(n):
        if blocks and abs(s[blocks[-1][-1]] - s[i]) <= cluster_rtol * max(s[0], 1e-300):
            blocks[-1].append(i)
        else:
            blocks.append([i])
    qblocks = []
    for idx in blocks:
        Z = V[:, idx].T @ W[:, idx]
        qblocks.append(scipy.linalg.sqrtm(Z))
    Q = scipy.linalg.block_diag(*qblocks)
    U = V @ Q.conj()
    return U, s


def takagi(S, tol: float | None = None) -> TakagiFactors:
    """Takagi factorization S = U D U^T of a complex symmetric matrix.

    D carries the singular values of S in descending order. Column phases of
    U are pinned (up to the intrinsic +-1 freedom) so output is reproducible.
    Near-repeated singular values are merged into blocks and refined; if the
    reconstruction error cannot be pushed below tolerance this fails loudly.
    """
    a, tol = _coerce(S, tol)
    n = a.shape[0]
    if a.shape[0] != a.shape[1]:
        raise DimensionMismatch("takagi needs a square matrix")
    nrm = np.linalg.norm(a)
    if np.linalg.norm(a - a.T) > tol * max(nrm, 1e-300):
        raise NotSymmetric("matrix is not complex symmetric within tolerance")
    a = (a + a.T) / 2.0

    best = None
    for cluster_rtol in (1e-14, 1e-12, 1e-9, 1e-7, 1e-5, 1e-3):
        U, s = _takagi_attempt(a, cluster_rtol)
        err = np.linalg.norm(U @ np.diag(s) @ U.T - a)
        if best is None or err < best[0]:
            best = (err, U, s)
        if err <= tol * max(nrm, 1.0):
            break
    err, U, s = best
    if err > tol * max(nrm, 1.0):
        raise TakagiError(f"reconstruction error {err:.3e} above tolerance")

    # sign canonicalization: +-1 is the only free phase per column
    U = U.copy()
    for j in range(n):
        col = U[:, j]
        nz = np.flatnonzero(np.abs(col) > 1e-8)
        if nz.size:
            lead = col[nz[0]]
            if lead.real < -1e-14 or (abs(lead.real) <= 1e-14 and lead.imag < 0):
                U[:, j] = -col
    mtol = tol if tol is not None else DEFAULT_TOL
    return TakagiFactors(
        U=CMat.from_array(U, mtol), D=CMat.from_array(np.diag(s), mtol)
    )


def star_congruence(c, A, M) -> CMat:
    """c * conj(A)^T M A, the action on the sesquilinear coefficient matrix."""
    Aa, tol = _coerce(A)
    Ma, _ = _coerce(M)
    if Aa.shape != Ma.shape or Aa.shape[0] != Aa.shape[1]:
        raise DimensionMismatch("star_congruence needs square A, M of equal size")
    return CMat.from_array(complex(c) * (Aa.conj().T @ Ma @ Aa), tol)


def sym_congruence(c, A, M) -> CMat:
    """c * A^T M A, the companion action on the bilinear coefficient matrix."""
    Aa, tol = _coerce(A)
    Ma, _ = _coerce(M)
    if Aa.shape != Ma.shape or Aa.shape[0] != Aa.shape[1]:
        raise DimensionMismatch("sym_congruence needs square A, M of equal size")
    return CMat.from_array(complex(c) * (Aa.T @ Ma @ Aa), tol)


def build_gamma(R, P) -> CMat:
    """Doubled block matrix [[R, conj(P)], [P, conj(R)]].

    Its determinant is real; nonsingularity means the CR singular point is
    in general position and sign(det) is the intersection index.
    """
    Ra, tol = _coerce(R)
    Pa, _ = _coerce(P)
    if Ra.shape != Pa.shape or Ra.shape[0] != Ra.shape[1]:
        raise DimensionMismatch("build_gamma needs square R, P of equal size")
    top = np.hstack([Ra, Pa.conj()])
    bot = np.hstack([Pa, Ra.conj()])
    return CMat.from_array(np.vstack([top, bot]), tol)


def realify(R, S) -> tuple[np.ndarray, np.ndarray]:
    """Real 2n x 2n images R', S' of complex n x n matrices R, S.

    Each entry r of R becomes the rotation-style block [[Re r, -Im r],
    [Im r, Re r]]; each entry s of S becomes the reflection-style block
    [[Re s, Im s], [Im s, -Re s]]. Then det(R' + S') equals the determinant
    of the doubled matrix [[R, S], [conj(S), conj(R)]].
    """
    Ra, _ = _coerce(R)
    Sa, _ = _coerce(S)
    if Ra.shape != Sa.shape or Ra.shape[0] != Ra.shape[1]:
        raise DimensionMismatch("realify needs square R, S of equal size")
    n = Ra.shape[0]
    Rp = np.zeros((2 * n, 2 * n))
    Sp = np.zeros((2 * n, 2 * n))
    for j in range(n):
        for k in range(n):
            r, s = Ra[j, k], Sa[j, k]
            Rp[2 * j : 2 * j + 2, 2 * k : 2 * k + 2] = [
                [r.real, -r.imag],
                [r.imag, r.real],
            ]
            Sp[2 * j : 2 * j + 2, 2 * k : 2 * k + 2] = [
                [s.real, s.imag],
                [s.imag, -s.real],
            ]
    return Rp, Sp


def kappa_matrix(n: int, tol: float = DEFAULT_TOL) -> CMat:
    """The interleaving unitary K (det K = 1) that block-diagonalizes realifications.

    K @ R' @ conj(K)^T = blockdiag(R, conj(R)) and K @ S' @ conj(K)^T is the
    antidiagonal block matrix with S and conj(S).
    """
    if n < 1:
        raise DimensionMismatch("kappa_matrix needs n >= 1")
    K = np.zeros((2 * n, 2 * n), dtype=complex)
    for j in range(n):
        K[j, 2 * j] = 1.0
        K[j, 2 * j + 1] = 1j
        K[n + j, 2 * j] = 1.0
        K[n + j, 2 * j + 1] = -1j
    return CMat.from_array(K * (np.sqrt(2.0) / 2.0), tol)
