import numpy as np
import pytest

from kronadapt.errors import ArgumentError, DimensionError
from kronadapt.kpsvd import approximation_error, kpsvd, reconstruct, truncate
from kronadapt.tensor import KronShape, kron, rearrange

from conftest import SHAPES, orthonormal_set, unit


def test_exact_kron_is_rank_one(rng):
    shape = KronShape(3, 2, 2, 3)
    A, B = unit(rng.standard_normal((3, 2))), unit(rng.standard_normal((2, 3)))
    W = kron(A, B)
    res = kpsvd(W, shape, 1)
    assert res.terms[0].sigma == pytest.approx(1.0, rel=1e-12)
    assert np.all(res.spectrum[1:] < 1e-14)
    assert res.residual_fro < 1e-14
    np.testing.assert_allclose(reconstruct(res), W, atol=1e-10)
    assert approximation_error(W, res) <= 1e-10


def test_factors_recovered_up_to_sign(rng):
    shape = KronShape(2, 3, 3, 2)
    A, B = unit(rng.standard_normal((2, 3))), unit(rng.standard_normal((3, 2)))
    t = kpsvd(4.0 * kron(A, B), shape, 1).terms[0]
    s = np.sign(np.sum(t.U * A))
    np.testing.assert_allclose(s * t.U, A, atol=1e-12)
    np.testing.assert_allclose(s * t.V, B, atol=1e-12)
    assert t.sigma == pytest.approx(4.0, rel=1e-12)


def test_orthogonal_rank_two(rng):
    shape = KronShape(2, 2, 3, 3)
    A1, A2 = orthonormal_set(rng, 2, 2, 2)
    B1, B2 = orthonormal_set(rng, 3, 3, 2)
    W = 2 * kron(A1, B1) + kron(A2, B2)
    res = kpsvd(W, shape, 2)
    np.testing.assert_allclose(res.spectrum[:2], [2, 1], rtol=1e-12)
    assert res.residual_fro < 1e-12


def test_random_tail_energy_against_numpy(rng):
    shape = KronShape(3, 2, 2, 3)
    W = rng.standard_normal((6, 6))
    oracle = np.linalg.svd(rearrange(W, shape), compute_uv=False)
    res = kpsvd(W, shape, 2)
    np.testing.assert_allclose(res.spectrum, oracle, rtol=1e-12)
    assert res.residual_fro**2 == pytest.approx(np.sum(oracle[2:] ** 2), rel=1e-8)


@pytest.mark.parametrize("shape", SHAPES, ids=str)
def test_error_nonincreasing_and_full_round_trip(shape, rng):
    W = rng.standard_normal((shape.rows, shape.cols))
    errs = [approximation_error(W, kpsvd(W, shape, r)) for r in range(1, shape.max_rank + 1)]
    assert all(b <= a + 1e-12 for a, b in zip(errs, errs[1:]))
    full = kpsvd(W, shape, shape.max_rank)
    assert np.linalg.norm(reconstruct(full) - W) <= 1e-9 * np.linalg.norm(W)


@pytest.mark.parametrize("shape", SHAPES, ids=str)
def test_result_invariants(shape, rng):
    W = rng.standard_normal((shape.rows, shape.cols))
    res = kpsvd(W, shape, shape.max_rank)
    assert np.sum(res.spectrum**2) == pytest.approx(np.sum(W**2), rel=1e-9)
    Us = np.array([t.U.ravel() for t in res.terms])
    Vs = np.array([t.V.ravel() for t in res.terms])
    np.testing.assert_allclose(Us @ Us.T, np.eye(res.rank), atol=1e-9)
    np.testing.assert_allclose(Vs @ Vs.T, np.eye(res.rank), atol=1e-9)
    for k, t in enumerate(res.terms):
        assert t.sigma == res.spectrum[k] and t.sigma >= 0
        assert t.U.shape == (shape.m, shape.n) and t.V.shape == (shape.p, shape.q)


def test_deterministic(rng):
    shape = KronShape(4, 5, 3, 2)
    W = rng.standard_normal((12, 10))
    a, b = kpsvd(W, shape, 3), kpsvd(W.copy(), shape, 3)
    assert np.array_equal(a.spectrum, b.spectrum) and a.residual_fro == b.residual_fro
    for s, t in zip(a.terms, b.terms):
        assert s.sigma == t.sigma and np.array_equal(s.U, t.U) and np.array_equal(s.V, t.V)


def test_zero_matrix_gives_unit_factors():
    shape = KronShape(2, 2, 2, 2)
    res = kpsvd(np.zeros((4, 4)), shape, 3)
    assert res.rank == 3 and res.residual_fro == 0
    for t in res.terms:
        assert t.sigma == 0
        assert np.linalg.norm(t.U) == pytest.approx(1) and np.linalg.norm(t.V) == pytest.approx(1)
    np.testing.assert_array_equal(reconstruct(res), 0)


def test_truncate_and_empty_reconstruct(rng):
    shape = KronShape(3, 2, 2, 3)
    W = rng.standard_normal((6, 6))
    full = kpsvd(W, shape, 6)
    cut = truncate(full, 2, W)
    assert cut.rank == 2
    assert cut.residual_fro == pytest.approx(kpsvd(W, shape, 2).residual_fro, rel=1e-12)
    empty = truncate(full, 0, W)
    np.testing.assert_array_equal(reconstruct(empty), np.zeros((6, 6)))
    assert empty.residual_fro == pytest.approx(np.linalg.norm(W), rel=1e-14)


def test_errors(rng):
    shape = KronShape(3, 2, 2, 3)
    W = rng.standard_normal((6, 6))
    with pytest.raises(ArgumentError):
        kpsvd(W, shape, 0)
    with pytest.raises(ArgumentError):
        kpsvd(W, shape, 7)
    with pytest.raises(DimensionError):
        kpsvd(rng.standard_normal((6, 5)), shape, 1)
    with pytest.raises(DimensionError):
        approximation_error(rng.standard_normal((5, 6)), kpsvd(W, shape, 1))
