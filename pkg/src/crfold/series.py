"""Truncated power series in (z, zbar) and holomorphic coordinate changes.

A defining function h(z, zbar) of a graph z_n = h is stored as a truncated
formal series with complex coefficients indexed by bidegree multi-indices
(alpha, beta), meaning the monomial z^alpha * zbar^beta.  The module knows
how to read off the quadratic coefficient matrices (Q, R, S), normalize Q
away, push h through a holomorphic coordinate change (re-solving the graph
by fixed-point substitution), flatten the cubic part of the definite
quadratically flat form, and evaluate the doubled real Hessian whose
determinant sign is the intersection index.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .matcore import CMat, DEFAULT_TOL

CLEANUP_REL = 1e-13


class SeriesError(Exception):
    pass


class NotStandardPosition(SeriesError):
    pass


class TruncationTooLow(SeriesError):
    pass


class NonInvertibleC(SeriesError):
    pass


class PreconditionViolated(SeriesError):
    """Cubic flattening precondition failed; `condition` names the culprit."""

    def __init__(self, condition: str, detail: str = ""):
        self.condition = condition
        super().__init__(f"{condition}" + (f": {detail}" if detail else ""))


class FlattenError(SeriesError):
    pass


def _zero_idx(n):
    return (0,) * n


_DEG_MASKS: dict = {}


def _degree_mask(nvars, trunc):
    key = (nvars, trunc)
    if key not in _DEG_MASKS:
        axes = 2 * nvars
        g = np.zeros((trunc + 1,) * axes, dtype=int)
        for ax in range(axes):
            shape = [1] * axes
            shape[ax] = trunc + 1
            g = g + np.arange(trunc + 1).reshape(shape)
        _DEG_MASKS[key] = (g <= trunc).astype(float)
    return _DEG_MASKS[key]


@dataclass(frozen=True)
class PSeries:
    """Truncated series sum coeffs[(alpha, beta)] * z^alpha * zbar^beta.

    Keys with |alpha|+|beta| > trunc are never stored; absent keys are zero.
    Instances are treated as immutable values.
    """

    nvars: int
    trunc: int
    coeffs: dict = field(default_factory=dict)

    def __post_init__(self):
        for (a, b) in self.coeffs:
            if len(a) != self.nvars or len(b) != self.nvars:
                raise SeriesError("multi-index arity does not match nvars")
            if sum(a) + sum(b) > self.trunc:
                raise SeriesError("stored key exceeds truncation degree")

    @classmethod
    def zero(cls, nvars, trunc):
        return cls(nvars, trunc, {})

    @classmethod
    def one(cls, nvars, trunc):
        return cls(nvars, trunc, {(_zero_idx(nvars), _zero_idx(nvars)): 1.0 + 0j})

    @classmethod
    def variable(cls, nvars, trunc, k, conjugated=False):
        a = [0] * nvars
        a[k] = 1
        key = (_zero_idx(nvars), tuple(a)) if conjugated else (tuple(a), _zero_idx(nvars))
        return cls(nvars, trunc, {key: 1.0 + 0j})

    @classmethod
    def from_terms(cls, nvars, trunc, terms):
        """terms: iterable of (alpha, beta, coefficient)."""
        coeffs = {}
        for a, b, c in terms:
            a, b = tuple(a), tuple(b)
            if sum(a) + sum(b) <= trunc and c != 0:
                coeffs[(a, b)] = coeffs.get((a, b), 0.0) + complex(c)
        return cls(nvars, trunc, {k: v for k, v in coeffs.items() if v != 0})

    def coeff(self, alpha, beta) -> complex:
        return self.coeffs.get((tuple(alpha), tuple(beta)), 0.0 + 0j)

    def degree_part(self, d: int) -> "PSeries":
        kept = {k: v for k, v in self.coeffs.items() if sum(k[0]) + sum(k[1]) == d}
        return PSeries(self.nvars, self.trunc, kept)

    def max_abs(self) -> float:
        return max((abs(v) for v in self.coeffs.values()), default=0.0)

    def __add__(self, other):
        if isinstance(other, PSeries):
            if other.nvars != self.nvars:
                raise SeriesError("nvars mismatch")
            trunc = min(self.trunc, other.trunc)
            out = {}
            for k, v in self.coeffs.items():
                if sum(k[0]) + sum(k[1]) <= trunc:
                    out[k] = v
            for k, v in other.coeffs.items():
                if sum(k[0]) + sum(k[1]) <= trunc:
                    out[k] = out.get(k, 0.0) + v
            return PSeries(self.nvars, trunc, {k: v for k, v in out.items() if v != 0})
        return self + PSeries(
            self.nvars, self.trunc, {(_zero_idx(self.nvars), _zero_idx(self.nvars)): complex(other)}
        )

    def __neg__(self):
        return self.scale(-1.0)

    def __sub__(self, other):
        return self + (-other if isinstance(other, PSeries) else -complex(other))

    def scale(self, c) -> "PSeries":
        c = complex(c)
        if c == 0:
            return PSeries.zero(self.nvars, self.trunc)
        return PSeries(self.nvars, self.trunc, {k: c * v for k, v in self.coeffs.items()})

    def _dense(self, trunc):
        A = np.zeros((trunc + 1,) * (2 * self.nvars), dtype=complex)
        for (a, b), v in self.coeffs.items():
            if sum(a) + sum(b) <= trunc:
                A[a + b] = v
        return A

    @staticmethod
    def _from_dense(nvars, trunc, A):
        A = A * _degree_mask(nvars, trunc)
        out = {}
        nz = np.nonzero(A)
        vals = A[nz]
        for i in range(len(vals)):
            idx = tuple(int(ax[i]) for ax in nz)
            out[(idx[:nvars], idx[nvars:])] = complex(vals[i])
        return PSeries(nvars, trunc, out)

    def __mul__(self, other):
        if not isinstance(other, PSeries):
            return self.scale(other)
        if other.nvars != self.nvars:
            raise SeriesError("nvars mismatch")
        trunc = min(self.trunc, other.trunc)
        big, small = (self, other) if len(self.coeffs) >= len(other.coeffs) else (other, self)
        if len(big.coeffs) >= 12 and len(small.coeffs) >= 3:
            # dense shifted-accumulate path for fat operands
            A = big._dense(trunc)
            R = np.zeros_like(A)
            t1 = trunc + 1
            for (a, b), v in small.coeffs.items():
                shift = a + b
                if sum(shift) > trunc:
                    continue
                dst = tuple(slice(s, t1) for s in shift)
                src = tuple(slice(0, t1 - s) for s in shift)
                R[dst] += v * A[src]
            return PSeries._from_dense(self.nvars, trunc, R)
        out = {}
        for (a1, b1), v1 in self.coeffs.items():
            d1 = sum(a1) + sum(b1)
            if d1 > trunc:
                continue
            for (a2, b2), v2 in other.coeffs.items():
                if d1 + sum(a2) + sum(b2) > trunc:
                    continue
                key = (
                    tuple(x + y for x, y in zip(a1, a2)),
                    tuple(x + y for x, y in zip(b1, b2)),
                )
                out[key] = out.get(key, 0.0) + v1 * v2
        return PSeries(self.nvars, trunc, {k: v for k, v in out.items() if v != 0})

    def conj(self) -> "PSeries":
        """Series of conj(h): coefficient at (a, b) is conj(coeff at (b, a))."""
        return PSeries(
            self.nvars, self.trunc, {(b, a): np.conj(v) for (a, b), v in self.coeffs.items()}
        )

    def cleanup(self, rel: float = CLEANUP_REL) -> "PSeries":
        """Drop degree >= 3 coefficients tiny relative to the largest one.

        Degrees <= 2 are kept verbatim so quadratic bookkeeping stays exact.
        """
        m = self.max_abs()
        if m == 0:
            return self
        kept = {
            k: v
            for k, v in self.coeffs.items()
            if sum(k[0]) + sum(k[1]) <= 2 or abs(v) >= rel * m
        }
        return PSeries(self.nvars, self.trunc, kept)

    def retrunc(self, trunc: int) -> "PSeries":
        kept = {k: v for k, v in self.coeffs.items() if sum(k[0]) + sum(k[1]) <= trunc}
        return PSeries(self.nvars, trunc, kept)

    def to_json(self) -> dict:
        terms = [
            {"alpha": list(a), "beta": list(b), "re": float(v.real), "im": float(v.imag)}
            for (a, b), v in sorted(self.coeffs.items())
        ]
        return {"nvars": self.nvars, "trunc": self.trunc, "terms": terms}

    @classmethod
    def from_json(cls, d: dict) -> "PSeries":
        return cls.from_terms(
            int(d["nvars"]),
            int(d["trunc"]),
            [
                (tuple(t["alpha"]), tuple(t["beta"]), t["re"] + 1j * t["im"])
                for t in d["terms"]
            ],
        )


def compose(f: PSeries, zargs: list, wargs: list | None = None) -> PSeries:
    """Substitute series for the variables of f.

    zargs[j] replaces z_j and wargs[j] replaces zbar_j; wargs may be omitted
    when f is holomorphic (no beta keys).  All argument series must share one
    ambient (nvars, trunc).
    """
    if len(zargs) != f.nvars:
        raise SeriesError("wrong number of substitution arguments")
    nv, tr = zargs[0].nvars, zargs[0].trunc
    m = f.nvars
    zero_key = (_zero_idx(m), _zero_idx(m))

    # one shared monomial table: each entry is built from a predecessor by a
    # single series multiplication, so products are reused across terms
    mono = {zero_key: PSeries.one(nv, tr)}

    def monomial(key):
        if key in mono:
            return mono[key]
        a, b = key
        for j in range(m):
            if a[j]:
                prev = (a[:j] + (a[j] - 1,) + a[j + 1 :], b)
                mono[key] = monomial(prev) * zargs[j]
                return mono[key]
        for j in range(m):
            if b[j]:
                if wargs is None:
                    raise SeriesError("holomorphic composition got a zbar key")
                prev = (a, b[:j] + (b[j] - 1,) + b[j + 1 :])
                mono[key] = monomial(prev) * wargs[j]
                return mono[key]
        raise AssertionError("unreachable")

    acc: dict = {}
    for key, c in f.coeffs.items():
        for k2, v2 in monomial(key).coeffs.items():
            acc[k2] = acc.get(k2, 0.0) + c * v2
    return PSeries(nv, tr, {k: v for k, v in acc.items() if v != 0})


@dataclass(frozen=True)
class HoloChange:
    """Holomorphic coordinate change ztilde = C z + p(z) preserving standard position.

    C is n x n with last row (0, ..., 0, c_nn), c_nn != 0; each p_k is a
    holomorphic polynomial (a PSeries in n variables with beta = 0) with no
    constant or linear part.
    """

    C: CMat
    p: tuple

    def __post_init__(self):
        C = self.C.a
        n = C.shape[0]
        if C.shape[0] != C.shape[1]:
            raise NonInvertibleC("C must be square")
        if n >= 2 and np.any(C[n - 1, : n - 1] != 0):
            raise NonInvertibleC("last row of C must be (0, ..., 0, c_nn)")
        if C[n - 1, n - 1] == 0 or abs(np.linalg.det(C)) == 0:
            raise NonInvertibleC("C must be invertible with c_nn nonzero")
        if len(self.p) != n:
            raise SeriesError("need one p_k per coordinate")
        for pk in self.p:
            if pk.nvars != n:
                raise SeriesError("p_k must live in n holomorphic variables")
            for (a, b) in pk.coeffs:
                if any(b):
                    raise SeriesError("p_k must be holomorphic (no zbar keys)")
                if sum(a) < 2:
                    raise SeriesError("p_k must have no constant or linear part")

    @classmethod
    def identity(cls, n: int, trunc: int = 4) -> "HoloChange":
        return cls(CMat.from_array(np.eye(n)), tuple(PSeries.zero(n, trunc) for _ in range(n)))

    @classmethod
    def build(cls, C, p_terms: dict | None = None, trunc: int = 4) -> "HoloChange":
        """p_terms maps k -> list of (exponent tuple, coefficient)."""
        C = np.asarray(C, dtype=complex)
        n = C.shape[0]
        ps = []
        for k in range(n):
            terms = (p_terms or {}).get(k, [])
            ps.append(
                PSeries.from_terms(n, trunc, [(e, _zero_idx(n), c) for e, c in terms])
            )
        return cls(CMat.from_array(C), tuple(ps))

    def map_components(self, trunc: int) -> list:
        """The n holomorphic series C z + p(z), truncated to `trunc`."""
        C = self.C.a
        n = C.shape[0]
        comps = []
        for j in range(n):
            s = PSeries.zero(n, trunc)
            for k in range(n):
                if C[j, k] != 0:
                    s = s + PSeries.variable(n, trunc, k).scale(C[j, k])
            s = s + self.p[j].retrunc(trunc)
            comps.append(s)
        return comps


def compose_changes(first: HoloChange, second: HoloChange, trunc: int = 4) -> HoloChange:
    """The change applying `first` and then `second` (i.e. second o first)."""
    n = first.C.a.shape[0]
    m1 = first.map_components(trunc)
    m2 = second.map_components(trunc)
    comps = [compose(m2[j], m1) for j in range(n)]
    C = np.zeros((n, n), dtype=complex)
    ps = []
    for j, comp in enumerate(comps):
        pk = {}
        for (a, b), v in comp.coeffs.items():
            d = sum(a)
            if d == 1:
                C[j, a.index(1)] = v
            elif d >= 2:
                pk[(a, b)] = v
        ps.append(PSeries(n, trunc, pk))
    return HoloChange(CMat.from_array(C), tuple(ps))


@dataclass(frozen=True)
class QuadData:
    """Quadratic coefficient triple of h = z^T Q z + zbar^T R z + zbar^T S zbar + O(3)."""

    Q: CMat
    R: CMat
    S: CMat


def _sym_from_quadratic_keys(h: PSeries, conjugated: bool) -> np.ndarray:
    m = h.nvars
    M = np.zeros((m, m), dtype=complex)
    zero = _zero_idx(m)
    for j in range(m):
        for k in range(j, m):
            idx = [0] * m
            idx[j] += 1
            idx[k] += 1
            key = ((zero, tuple(idx)) if conjugated else (tuple(idx), zero))
            c = h.coeffs.get(key, 0.0)
            if j == k:
                M[j, j] = c
            else:
                M[j, k] = M[k, j] = c / 2.0
    return M


def check_standard_position(h: PSeries, tol: float = DEFAULT_TOL):
    scale = max(1.0, h.max_abs())
    for (a, b), v in h.coeffs.items():
        if sum(a) + sum(b) <= 1 and abs(v) > tol * scale:
            raise NotStandardPosition(
                f"constant/linear coefficient {v} at {(a, b)} is not zero"
            )


def extract_QRS(h: PSeries, tol: float = DEFAULT_TOL) -> QuadData:
    """Read off (Q, R, S) from the degree-2 coefficients.  Pure bookkeeping.

    Q and S are symmetrized; the row index of R is the conjugated variable,
    so the zbar_j z_k coefficient lands in R[j, k].
    """
    check_standard_position(h, tol)
    m = h.nvars
    Q = _sym_from_quadratic_keys(h, conjugated=False)
    S = _sym_from_quadratic_keys(h, conjugated=True)
    R = np.zeros((m, m), dtype=complex)
    for j in range(m):
        for k in range(m):
            a = [0] * m
            b = [0] * m
            a[k] = 1
            b[j] = 1
            R[j, k] = h.coeffs.get((tuple(a), tuple(b)), 0.0)
    return QuadData(CMat.from_array(Q), CMat.from_array(R), CMat.from_array(S))


def from_quadratic(Q, R, S, trunc: int = 4, extra=None) -> PSeries:
    """Assemble z^T Q z + zbar^T R z + zbar^T S zbar (+ extra terms)."""
    Q = np.atleast_2d(np.asarray(Q, dtype=complex))
    R = np.atleast_2d(np.asarray(R, dtype=complex))
    S = np.atleast_2d(np.asarray(S, dtype=complex))
    m = R.shape[0]
    zero = _zero_idx(m)
    terms = []
    for j in range(m):
        for k in range(m):
            a = [0] * m
            b = [0] * m
            a[k] = 1
            b[j] = 1
            terms.append((tuple(a), tuple(b), R[j, k]))
    for M, conjugated in ((Q, False), (S, True)):
        for j in range(m):
            for k in range(j, m):
                idx = [0] * m
                idx[j] += 1
                idx[k] += 1
                c = M[j, j] if j == k else 2.0 * M[j, k]
                if conjugated:
                    terms.append((zero, tuple(idx), c))
                else:
                    terms.append((tuple(idx), zero, c))
    if extra:
        terms.extend(extra)
    return PSeries.from_terms(m, trunc, terms)


def eliminate_Q(h: PSeries, tol: float = DEFAULT_TOL) -> PSeries:
    """Replace Q by conj(S), so the pure-z and pure-zbar quadratics have a real sum.

    Only the (2, 0) bidegree keys move; every other coefficient is copied
    bit for bit.
    """
    qrs = extract_QRS(h, tol)
    Sbar = qrs.S.a.conj()
    m = h.nvars
    zero = _zero_idx(m)
    out = {
        k: v for k, v in h.coeffs.items() if not (sum(k[0]) == 2 and sum(k[1]) == 0)
    }
    for j in range(m):
        for k in range(j, m):
            idx = [0] * m
            idx[j] += 1
            idx[k] += 1
            c = Sbar[j, j] if j == k else 2.0 * Sbar[j, k]
            if c != 0:
                out[(tuple(idx), zero)] = c
    return PSeries(m, h.trunc, out)


def apply_change(h: PSeries, t: HoloChange, tol: float = DEFAULT_TOL) -> PSeries:
    """Defining function of the same germ in the new coordinates ztilde = C z + p(z).

    The tangential components are inverted by fixed-point iteration (each
    pass raises the correct degree, so trunc passes always suffice) and the
    graph relation z_n = h(z, zbar) is substituted into the p terms.
    """
    if h.trunc < 2:
        raise TruncationTooLow("need trunc >= 2")
    check_standard_position(h, tol)
    n = h.nvars + 1
    C = t.C.a
    if C.shape[0] != n:
        raise SeriesError("change dimension does not match the series")
    m = h.nvars
    B = C[:m, :m]
    if abs(np.linalg.det(B)) == 0:
        raise NonInvertibleC("tangential block of C is singular")
    col = C[:m, m]
    cnn = C[m, m]
    Binv = np.linalg.inv(B)

    tr = h.trunc
    zt = [PSeries.variable(m, tr, j) for j in range(m)]
    lin = []
    for j in range(m):
        s = PSeries.zero(m, tr)
        for k in range(m):
            if Binv[j, k] != 0:
                s = s + zt[k].scale(Binv[j, k])
        lin.append(s)

    xi = list(lin)
    needs_iteration = np.any(col != 0) or any(t.p[j].coeffs for j in range(m))
    for _ in range(tr if needs_iteration else 0):
        xibar = [x.conj() for x in xi]
        h_sub = compose(h, xi, xibar)
        args = xi + [h_sub]
        corr = [compose(t.p[j], args) if t.p[j].coeffs else None for j in range(m)]
        new_xi = []
        for j in range(m):
            s = lin[j]
            for k in range(m):
                if Binv[j, k] == 0:
                    continue
                extra = PSeries.zero(m, tr)
                if col[k] != 0:
                    extra = extra + h_sub.scale(col[k])
                if corr[k] is not None:
                    extra = extra + corr[k]
                if extra.coeffs:
                    s = s - extra.scale(Binv[j, k])
            new_xi.append(s)
        if all(a.coeffs == b.coeffs for a, b in zip(new_xi, xi)):
            break
        xi = new_xi

    xibar = [x.conj() for x in xi]
    h_sub = compose(h, xi, xibar)
    out = h_sub.scale(cnn)
    if t.p[m].coeffs:
        out = out + compose(t.p[m], xi + [h_sub])
    return out.cleanup()


def _wirtinger2(h: PSeries):
    """Second Wirtinger derivatives at 0: (R, S2) with R[j,k]=h_{zbar_j z_k},
    S2[j,k]=h_{zbar_j zbar_k}."""
    m = h.nvars
    R = np.zeros((m, m), dtype=complex)
    S2 = np.zeros((m, m), dtype=complex)
    zero = _zero_idx(m)
    for j in range(m):
        for k in range(m):
            a, b = [0] * m, [0] * m
            a[k] = 1
            b[j] = 1
            R[j, k] = h.coeffs.get((tuple(a), tuple(b)), 0.0)
            bb = [0] * m
            bb[j] += 1
            bb[k] += 1
            c = h.coeffs.get((zero, tuple(bb)), 0.0)
            S2[j, k] = 2.0 * c if j == k else c
    return R, S2


def hessian_matrix(h: PSeries, tol: float = DEFAULT_TOL) -> np.ndarray:
    """The real 2m x 2m matrix Hf1 + J Hf2 built from Wirtinger data at 0.

    Block (j, k) is 2*[[Re(u+s), Im(-u+s)], [Im(u+s), Re(u-s)]] with
    u = h_{zbar_j z_k} and s = h_{zbar_j zbar_k}; the pure-z second
    derivatives (the Q coefficients) do not enter at all.
    """
    check_standard_position(h, tol)
    R, S2 = _wirtinger2(h)
    m = h.nvars
    M = np.zeros((2 * m, 2 * m))
    for j in range(m):
        for k in range(m):
            u, s = R[j, k], S2[j, k]
            M[2 * j : 2 * j + 2, 2 * k : 2 * k + 2] = 2.0 * np.array(
                [
                    [(u + s).real, (-u + s).imag],
                    [(u + s).imag, (u - s).real],
                ]
            )
    return M


def hessian_index(h: PSeries, tol: float = DEFAULT_TOL):
    """(det, sign) of the doubled real Hessian; sign is '+', '-' or '0'.

    det equals 2^(2m) * det [[R, 2S], [conj(2S), conj(R)]] for the quadratic
    data of h, which ties the index to sign(det Gamma).
    """
    M = hessian_matrix(h, tol)
    sv = np.linalg.svd(M, compute_uv=False)
    det = float(np.linalg.det(M))
    if sv[0] == 0.0 or sv[-1] <= tol * sv[0]:
        return det, "0"
    return det, ("+" if det > 0 else "-")


def flat_quadratic_series(g1: float, g2: float, trunc: int = 3) -> PSeries:
    """The definite quadratically flat form with invariants (2 g1, 2 g2)."""
    return from_quadratic(np.diag([g1, g2]), np.eye(2), np.diag([g1, g2]), trunc=trunc)


# cubic multi-index shorthands: key (alpha, beta) for z1^p zbar1^q z2^r zbar2^s
def _k(p, q, r, s):
    return ((p, r), (q, s))


_REALITY_CONDITIONS = (
    ("e1200_conj_e2100", _k(1, 2, 0, 0), _k(2, 1, 0, 0)),
    ("e0021_conj_e0012", _k(0, 0, 2, 1), _k(0, 0, 1, 2)),
    ("e1110_conj_e1101", _k(1, 1, 1, 0), _k(1, 1, 0, 1)),
    ("e2001_conj_e0210", _k(2, 0, 0, 1), _k(0, 2, 1, 0)),
    ("e1011_conj_e0111", _k(1, 0, 1, 1), _k(0, 1, 1, 1)),
    ("e1002_conj_e0120", _k(1, 0, 0, 2), _k(0, 1, 2, 0)),
)

_FLAT_CUBIC_KEYS = (_k(2, 0, 1, 0), _k(0, 2, 0, 1), _k(1, 0, 2, 0), _k(0, 1, 0, 2))


def _build_stage_change(n, slots, params, trunc):
    C = np.eye(n, dtype=complex)
    p_terms = {}
    for slot, val in zip(slots, params):
        if slot[0] == "C":
            C[slot[1], slot[2]] = val
        else:
            p_terms.setdefault(slot[1], []).append((slot[2], val))
    return HoloChange.build(C, p_terms, trunc=trunc)


_STAGE_CACHE: dict = {}


def _affine_stage(h3: PSeries, quad: PSeries, cache_key, slots, kills, pairs, trunc):
    """Solve for complex parameters making the listed cubic targets vanish.

    Every slot receives one complex parameter: ("C", j, k) writes C[j][k],
    ("p", k, expo) writes a monomial of p_k.  At cubic truncation the
    parameter-to-target map is exactly real-linear and its linear part only
    sees the quadratic coefficients, so the probe columns are built once per
    quadratic form (two probes per real axis) and cached; lstsq then gives
    the exact parameters whenever the stage is solvable.
    """
    n = h3.nvars + 1

    def targets(series):
        vals = [series.coeff(*k) for k in kills]
        vals += [series.coeff(*k1) - np.conj(series.coeff(*k2)) for k1, k2 in pairs]
        v = np.array(vals, dtype=complex)
        return np.concatenate([v.real, v.imag])

    if cache_key not in _STAGE_CACHE:
        cols = []
        for i in range(len(slots)):
            for unit in (1.0, 1.0j):
                params = [0.0] * len(slots)
                params[i] = unit
                probe = apply_change(quad, _build_stage_change(n, slots, params, trunc))
                cols.append(targets(probe))
        _STAGE_CACHE[cache_key] = np.array(cols).T
    Areal = _STAGE_CACHE[cache_key]

    base = targets(h3)
    x, *_ = np.linalg.lstsq(Areal, -base, rcond=None)
    params = [complex(x[2 * i], x[2 * i + 1]) for i in range(len(slots))]
    change = _build_stage_change(n, slots, params, trunc)
    return apply_change(h3, change), change


def cubic_flatten(h: PSeries, tol: float = DEFAULT_TOL):
    """Normalize the cubic part over the definite real quadratic form.

    Requires the quadratic part z1 zbar1 + g1 (z1^2 + zbar1^2) + z2 zbar2 +
    g2 (z2^2 + zbar2^2) with 0 < g1 < g2 and neither equal to 1/2, plus the
    six conjugate-pairing conditions on the cubic coefficients.  The output
    cubic is the real-valued four-monomial form in z1^2 z2 and z1 z2^2; the
    quadratic part is returned untouched and the composed change is reported.
    """
    if h.nvars != 2:
        raise PreconditionViolated("quadratic_shape", "needs two tangential variables")
    if h.trunc < 3:
        raise TruncationTooLow("need trunc >= 3 to see the cubic part")
    qrs = extract_QRS(h, tol)
    Q, R, S = qrs.Q.a, qrs.R.a, qrs.S.a
    scale = max(1.0, h.max_abs())
    g = np.array([S[0, 0].real, S[1, 1].real])
    quad_dev = max(
        np.linalg.norm(R - np.eye(2)),
        np.linalg.norm(Q - np.diag(g)),
        np.linalg.norm(S - np.diag(g)),
        abs(S[0, 0].imag),
        abs(S[1, 1].imag),
    )
    if quad_dev > tol * scale:
        raise PreconditionViolated("quadratic_shape", f"deviation {quad_dev:.2e}")
    g1, g2 = float(g[0]), float(g[1])
    if not (0.0 < g1 < g2):
        raise PreconditionViolated("gamma_order", f"got ({g1}, {g2})")
    for gi in (g1, g2):
        if abs(gi - 0.5) <= tol:
            raise PreconditionViolated("gamma_half", f"gamma = {gi}")

    def check_reality(series, names, hard=True):
        for name, k1, k2 in _REALITY_CONDITIONS:
            if name not in names:
                continue
            dev = abs(series.coeff(*k1) - np.conj(series.coeff(*k2)))
            if dev > 1e-8 * scale:
                if hard:
                    raise PreconditionViolated(name, f"deviation {dev:.2e}")
                raise FlattenError(f"reality condition {name} broke mid-pipeline")

    all_names = [c[0] for c in _REALITY_CONDITIONS]
    check_reality(h, all_names)

    h3 = h.retrunc(3)
    tr = 3
    quad = flat_quadratic_series(g1, g2, trunc=tr)

    # stage 1: cubic terms in z1, zbar1 only
    h3, t1 = _affine_stage(
        h3,
        quad,
        (g1, g2, "z1", tr),
        [("C", 0, 2), ("p", 0, (2, 0, 0)), ("p", 2, (3, 0, 0))],
        [_k(3, 0, 0, 0), _k(2, 1, 0, 0), _k(1, 2, 0, 0), _k(0, 3, 0, 0)],
        [],
        tr,
    )
    check_reality(h3, all_names[2:], hard=False)

    # stage 2: cubic terms in z2, zbar2 only
    h3, t2 = _affine_stage(
        h3,
        quad,
        (g1, g2, "z2", tr),
        [("C", 1, 2), ("p", 1, (0, 2, 0)), ("p", 2, (0, 3, 0))],
        [_k(0, 0, 3, 0), _k(0, 0, 2, 1), _k(0, 0, 1, 2), _k(0, 0, 0, 3)],
        [],
        tr,
    )
    check_reality(h3, all_names[2:], hard=False)

    # stage 3: kill the eight mixed terms, then pair the remaining four
    mixed = [c[1] for c in _REALITY_CONDITIONS[2:]] + [c[2] for c in _REALITY_CONDITIONS[2:]]
    h3, t3 = _affine_stage(
        h3,
        quad,
        (g1, g2, "mixed", tr),
        [
            ("p", 0, (1, 1, 0)),
            ("p", 0, (0, 2, 0)),
            ("p", 1, (2, 0, 0)),
            ("p", 1, (1, 1, 0)),
            ("p", 2, (2, 1, 0)),
            ("p", 2, (1, 2, 0)),
        ],
        mixed,
        [(_k(2, 0, 1, 0), _k(0, 2, 0, 1)), (_k(1, 0, 2, 0), _k(0, 1, 0, 2))],
        tr,
    )

    cubic = h3.degree_part(3)
    worst = max(
        (abs(v) for k, v in cubic.coeffs.items() if k not in _FLAT_CUBIC_KEYS),
        default=0.0,
    )
    if worst > 1e-9 * scale:
        raise FlattenError(f"residual off-form cubic coefficient {worst:.2e}")

    change = compose_changes(compose_changes(t1, t2, tr), t3, tr)
    if h.trunc == 3:
        return h3, change
    out = apply_change(h, change)
    return out, change
