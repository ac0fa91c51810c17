import json

import numpy as np
import pytest

from crfold.matcore import (
    CMat,
    DimensionMismatch,
    NotHermitian,
    NotSymmetric,
    Signature,
    build_gamma,
    hermitian_signature,
    kappa_matrix,
    rank,
    realify,
    star_congruence,
    sym_congruence,
    takagi,
)


def test_cmat_validation():
    with pytest.raises(DimensionMismatch):
        CMat(2, 2, (1, 2, 3))
    with pytest.raises(ValueError):
        CMat.from_array(np.eye(2), tol=0.0)
    with pytest.raises(ValueError):
        CMat.from_array(np.eye(2), tol=2.0)


def test_cmat_json_roundtrip():
    a = np.array([[1 + 2j, 3], [0, -1j]])
    m = CMat.from_array(a, tol=1e-8)
    d = json.loads(json.dumps(m.to_json()))
    m2 = CMat.from_json(d, tol=1e-8)
    assert np.array_equal(m.a, m2.a)
    assert m2.rows == 2 and m2.cols == 2


def test_rank_examples():
    assert rank(np.zeros((2, 2))) == 0
    assert rank([[1, 0], [0, 0]]) == 1
    # det of [[0,1],[tau,0]] is -tau, nonzero at tau=0.5
    assert rank([[0, 1], [0.5, 0]]) == 2


def test_rank_relative_threshold():
    # scale invariance: tiny but structurally full-rank matrices keep rank
    assert rank(1e-200 * np.eye(2)) == 2
    assert rank([[1, 0], [0, 1e-12]]) == 1
    assert rank([[1, 0], [0, 1e-12]], tol=1e-15) == 2


def test_signature_examples():
    assert hermitian_signature(np.eye(4)) == Signature(4, 0)
    assert hermitian_signature(np.diag([1, -1])) == Signature(1, 1)
    # Gamma of R=I2, P=diag(0,2): eigenvalues {1,1,3,-1}
    g = build_gamma(np.eye(2), np.diag([0.0, 2.0]))
    sig = hermitian_signature(g)
    assert sig == Signature(3, 1)
    assert sig.rank == 4 and sig.sigma == 2


def test_signature_rejects_non_hermitian():
    with pytest.raises(NotHermitian):
        hermitian_signature([[0, 1], [0, 0]])


def test_takagi_zero_and_exchange():
    f = takagi(np.zeros((2, 2)))
    assert np.allclose(f.D.a, 0)
    assert np.allclose(f.U.a @ f.U.a.conj().T, np.eye(2), atol=1e-12)

    f = takagi(np.array([[0, 1], [1, 0]], dtype=complex))
    assert np.allclose(np.diag(f.D.a), [1, 1], atol=1e-12)


def test_takagi_descending_diagonal():
    f = takagi(np.diag([3.0, 2.0]))
    assert np.allclose(np.diag(f.D.a), [3, 2], atol=1e-12)
    # U is a permutation/phase matrix here
    assert np.allclose(np.abs(f.U.a), np.eye(2), atol=1e-12)


def test_takagi_random_properties():
    rng = np.random.default_rng(7)
    for n in (2, 3):
        for _ in range(200):
            a = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            s = a + a.T
            f = takagi(s)
            U, D = f.U.a, f.D.a
            assert np.linalg.norm(U @ U.conj().T - np.eye(n)) < 1e-10
            d = np.diag(D)
            assert np.all(d >= -1e-14)
            assert np.all(np.diff(d) <= 1e-12)
            sv = np.linalg.svd(s, compute_uv=False)
            assert np.allclose(d, sv, atol=1e-10 * max(1.0, sv[0]))
            assert np.linalg.norm(U @ D @ U.T - s) < 1e-10 * max(1.0, sv[0])


def test_takagi_repeated_singular_values():
    rng = np.random.default_rng(11)
    for _ in range(50):
        # symmetric unitary times scalar: all singular values equal
        q, _ = np.linalg.qr(rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2)))
        s = 2.5 * (q @ q.T)
        f = takagi(s)
        assert np.linalg.norm(f.U.a @ f.D.a @ f.U.a.T - s) < 1e-9


def test_takagi_rejects_nonsymmetric():
    with pytest.raises(NotSymmetric):
        takagi([[0, 1], [0.5, 0]])


def test_takagi_deterministic():
    a = np.array([[1 + 1j, 0.3], [0.3, -2j]])
    f1, f2 = takagi(a), takagi(a)
    assert np.array_equal(f1.U.a, f2.U.a)


def test_congruence_examples():
    m = np.array([[1, 2j], [2j, 3]])
    assert np.allclose(star_congruence(1, np.eye(2), m).a, m)
    # real scaling A = lam*I cancelled by c = lam^-2
    lam = 1.7
    assert np.allclose(star_congruence(lam**-2, lam * np.eye(2), m).a, m, atol=1e-14)
    # pure phase on one axis fixes a diagonal under the star action
    A = np.diag([np.exp(0.4j), 1.0])
    d = np.diag([2.0, -3.0])
    assert np.allclose(star_congruence(1, A, d).a, d, atol=1e-14)
    # but not under the bilinear action
    assert not np.allclose(sym_congruence(1, A, d).a, d)


def test_congruence_dimension_mismatch():
    with pytest.raises(DimensionMismatch):
        star_congruence(1, np.eye(2), np.eye(3))


def test_build_gamma_examples():
    g = build_gamma([[1.0]], [[0.6]])
    assert np.allclose(g.a, [[1, 0.6], [0.6, 1]])
    # Bishop determinant 1 - 4*gamma^2 at gamma = 0.3
    assert np.isclose(np.linalg.det(g.a).real, 1 - 4 * 0.09)

    assert np.allclose(build_gamma(np.zeros((2, 2)), np.zeros((2, 2))).a, np.zeros((4, 4)))

    r = np.diag([1.0, 1j])
    g = build_gamma(r, np.zeros((2, 2)))
    assert np.allclose(g.a[:2, :2], r)
    assert np.allclose(g.a[2:, 2:], r.conj())
    assert np.allclose(g.a[:2, 2:], 0) and np.allclose(g.a[2:, :2], 0)


def test_gamma_determinant_real():
    rng = np.random.default_rng(3)
    for _ in range(1000):
        r = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        p = rng.standard_normal((2, 2)) + 1j * rng.standard_normal((2, 2))
        p = p + p.T
        d = np.linalg.det(build_gamma(r, p).a)
        assert abs(d.imag) <= 1e-10 * (1 + abs(d))


def test_realify_examples():
    rp, sp = realify(np.eye(2), np.zeros((2, 2)))
    assert np.allclose(rp, np.eye(4)) and np.allclose(sp, 0)

    rp, _ = realify([[1j]], [[0]])
    assert np.allclose(rp, [[0, -1], [1, 0]])

    _, sp = realify([[0]], [[1]])
    assert np.allclose(sp, [[1, 0], [0, -1]])


def test_kappa_examples():
    k1 = kappa_matrix(1).a
    assert np.allclose(k1, (np.sqrt(2) / 2) * np.array([[1, 1j], [1, -1j]]))
    for n in (1, 2, 3):
        k = kappa_matrix(n).a
        assert np.allclose(k @ k.conj().T, np.eye(2 * n), atol=1e-14)
        assert np.isclose(abs(np.linalg.det(k)), 1.0)
    # the 4x4 interleaver is special-unitary
    assert np.isclose(np.linalg.det(kappa_matrix(2).a), 1.0)


def test_kappa_block_diagonalizes_realification():
    rng = np.random.default_rng(5)
    for n in (1, 2, 3):
        k = kappa_matrix(n).a
        for _ in range(50):
            r = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            s = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            rp, sp = realify(r, s)
            lhs = k @ rp @ k.conj().T
            want = np.zeros((2 * n, 2 * n), dtype=complex)
            want[:n, :n], want[n:, n:] = r, r.conj()
            assert np.linalg.norm(lhs - want) < 1e-12 * (1 + np.linalg.norm(r))
            lhs = k @ sp @ k.conj().T
            want = np.zeros((2 * n, 2 * n), dtype=complex)
            want[:n, n:], want[n:, :n] = s, s.conj()
            assert np.linalg.norm(lhs - want) < 1e-12 * (1 + np.linalg.norm(s))


def _doubled(r, s):
    n = r.shape[0]
    m = np.zeros((2 * n, 2 * n), dtype=complex)
    m[:n, :n], m[:n, n:], m[n:, :n], m[n:, n:] = r, s, s.conj(), r.conj()
    return m


def test_realification_determinant_identity():
    rng = np.random.default_rng(1)
    for n, trials in ((2, 1000), (3, 200)):
        for _ in range(trials):
            r = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            s = rng.standard_normal((n, n)) + 1j * rng.standard_normal((n, n))
            rp, sp = realify(r, s)
            lhs = np.linalg.det(rp + sp)
            rhs = np.linalg.det(_doubled(r, s)).real
            assert abs(lhs - rhs) <= 1e-9 * (1 + abs(rhs))


def test_gamma_scaling_law():
    rng = np.random.default_rng(9)
    for _ in range(300):
        n1 = 2
        r = rng.standard_normal((n1, n1)) + 1j * rng.standard_normal((n1, n1))
        p = rng.standard_normal((n1, n1)) + 1j * rng.standard_normal((n1, n1))
        p = p + p.T
        c = complex(rng.standard_normal() + 1j * rng.standard_normal())
        A = rng.standard_normal((n1, n1)) + 1j * rng.standard_normal((n1, n1))
        if abs(np.linalg.det(A)) < 0.1 or abs(c) < 0.1:
            continue
        r2 = star_congruence(c, A, r).a
        p2 = sym_congruence(np.conj(c), A, p).a
        lhs = np.linalg.det(build_gamma(r2, p2).a).real
        rhs = (
            abs(c) ** (2 * n1)
            * abs(np.linalg.det(A)) ** 4
            * np.linalg.det(build_gamma(r, p).a).real
        )
        assert abs(lhs - rhs) <= 1e-8 * (1 + abs(rhs))
