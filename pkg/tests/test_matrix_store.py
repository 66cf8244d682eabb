import numpy as np
import pytest

from simnet.matrix_store import (
    CsrMatrix,
    csr_from_bytes,
    csr_matvec,
    csr_to_bytes,
    inf_norm,
    load_csr,
    pf_eigenvalue,
    save_csr,
    to_csr,
    to_dense,
)


def test_inf_norm_hand_values():
    assert inf_norm(np.array([[0.2, -0.3], [0.1, 0.4]])) == pytest.approx(0.5)
    assert inf_norm(np.zeros((3, 3))) == 0.0
    assert inf_norm(np.array([[1.0, -2.0], [3.0, 4.0]])) == pytest.approx(7.0)


def test_inf_norm_matches_recomputation():
    rng = np.random.default_rng(0)
    for _ in range(20):
        a = rng.normal(size=(5, 5))
        expected = max(sum(abs(v) for v in row) for row in a)
        np.testing.assert_allclose(inf_norm(a), expected, rtol=1e-15)


def test_inf_norm_rejects_empty():
    with pytest.raises(ValueError, match="empty input"):
        inf_norm(np.zeros((0, 3)))


def test_inf_norm_rejects_nonfinite():
    with pytest.raises(ValueError):
        inf_norm(np.array([[1.0, np.nan]]))


def test_pf_eigenvalue_symmetric_pair():
    # eigenvalues of [[0, 0.5], [0.5, 0]] are +/- 0.5
    assert pf_eigenvalue(np.array([[0.0, 0.5], [0.5, 0.0]])) == pytest.approx(0.5)


def test_pf_eigenvalue_hand_value():
    # |[[0.2, -0.3], [0.1, 0.4]]| has eigenvalues 0.5 and 0.1
    a_abs = np.abs(np.array([[0.2, -0.3], [0.1, 0.4]]))
    np.testing.assert_allclose(pf_eigenvalue(a_abs), 0.5, atol=1e-9)


def test_pf_eigenvalue_nilpotent_is_zero():
    rng = np.random.default_rng(1)
    for n in (2, 4, 7):
        a = np.triu(rng.uniform(0.1, 2.0, size=(n, n)), k=1)
        assert pf_eigenvalue(a) <= 1e-8


def test_pf_eigenvalue_matches_dense_eigensolver():
    rng = np.random.default_rng(2)
    for _ in range(25):
        a = rng.uniform(0.0, 1.0, size=(6, 6))
        expected = np.max(np.abs(np.linalg.eigvals(a)))
        np.testing.assert_allclose(pf_eigenvalue(a), expected, atol=1e-8)


def test_pf_eigenvalue_handles_periodic_matrix():
    # permutation matrices make the plain power iteration oscillate
    p = np.array([[0.0, 1.0], [1.0, 0.0]])
    np.testing.assert_allclose(pf_eigenvalue(p), 1.0, atol=1e-6)
    cycle = np.zeros((4, 4))
    for i in range(4):
        cycle[i, (i + 1) % 4] = 1.0
    np.testing.assert_allclose(pf_eigenvalue(cycle), 1.0, atol=1e-6)


def test_pf_eigenvalue_bounded_by_inf_norm():
    rng = np.random.default_rng(3)
    for _ in range(30):
        a = rng.uniform(0.0, 2.0, size=(5, 5))
        a[rng.uniform(size=(5, 5)) < 0.5] = 0.0
        if not a.any():
            continue
        assert pf_eigenvalue(a) <= inf_norm(a) + 1e-8


def test_pf_eigenvalue_rejects_bad_input():
    with pytest.raises(ValueError):
        pf_eigenvalue(np.zeros((2, 3)))
    with pytest.raises(ValueError, match="expects"):
        pf_eigenvalue(np.array([[0.1, -0.2], [0.3, 0.4]]))


def test_to_csr_identity():
    s = to_csr(np.eye(3))
    assert s.nnz == 3
    np.testing.assert_array_equal(s.row_offsets, [0, 1, 2, 3])
    np.testing.assert_array_equal(s.col_indices, [0, 1, 2])
    np.testing.assert_array_equal(s.values, [1.0, 1.0, 1.0])


def test_to_csr_all_zero():
    s = to_csr(np.zeros((4, 2)))
    assert s.nnz == 0
    assert s.rows == 4 and s.cols == 2
    np.testing.assert_array_equal(to_dense(s), np.zeros((4, 2)))


def test_to_csr_zero_tol_drops_small_entries():
    a = np.array([[0.5, 1e-12], [-1e-9, 2.0]])
    s = to_csr(a, zero_tol=1e-8)
    assert s.nnz == 2
    np.testing.assert_array_equal(to_dense(s), np.array([[0.5, 0.0], [0.0, 2.0]]))


def test_csr_roundtrip_bit_exact():
    rng = np.random.default_rng(4)
    for _ in range(20):
        a = rng.normal(size=(10, 10))
        a[rng.uniform(size=(10, 10)) < 0.5] = 0.0
        back = to_dense(to_csr(a))
        assert (back == a).all()


def test_csr_validation_rejects_bad_structure():
    with pytest.raises(ValueError):
        CsrMatrix(2, 2, np.array([0, 2, 1]), np.array([0, 1]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        # columns must strictly increase within a row
        CsrMatrix(1, 3, np.array([0, 2]), np.array([1, 1]), np.array([1.0, 2.0]))
    with pytest.raises(ValueError):
        # explicit zeros are not representable
        CsrMatrix(1, 2, np.array([0, 1]), np.array([0]), np.array([0.0]))
    with pytest.raises(ValueError):
        CsrMatrix(1, 2, np.array([0, 1]), np.array([5]), np.array([1.0]))


def test_csr_allows_empty_leading_rows():
    # regression guard: offsets [0, 0, ...] must not wrap to the last entry
    a = np.zeros((3, 3))
    a[2, 0] = 5.0
    s = to_csr(a)
    np.testing.assert_array_equal(s.row_offsets, [0, 0, 0, 1])
    np.testing.assert_array_equal(to_dense(s), a)


def test_csr_matvec_identity_and_zero():
    x = np.arange(3.0)
    np.testing.assert_array_equal(csr_matvec(to_csr(np.eye(3)), x), x)
    np.testing.assert_array_equal(csr_matvec(to_csr(np.zeros((3, 3))), x), np.zeros(3))


def test_csr_matvec_matches_dense_product():
    rng = np.random.default_rng(5)
    for _ in range(20):
        a = rng.normal(size=(8, 8))
        a[rng.uniform(size=(8, 8)) < 0.6] = 0.0
        x = rng.normal(size=8)
        np.testing.assert_allclose(csr_matvec(to_csr(a), x), a @ x, rtol=1e-12, atol=1e-12)


def test_csr_matvec_rejects_dimension_mismatch():
    with pytest.raises(ValueError):
        csr_matvec(to_csr(np.eye(3)), np.zeros(4))


def test_csr_bytes_roundtrip_bit_exact():
    rng = np.random.default_rng(6)
    for _ in range(20):
        a = rng.normal(size=(6, 9))
        a[rng.uniform(size=(6, 9)) < 0.5] = 0.0
        s = to_csr(a)
        blob = csr_to_bytes(s)
        assert blob.startswith(b"SIMCSR1")
        back, consumed = csr_from_bytes(blob)
        assert consumed == len(blob)
        assert back.rows == s.rows and back.cols == s.cols
        np.testing.assert_array_equal(back.row_offsets, s.row_offsets)
        np.testing.assert_array_equal(back.col_indices, s.col_indices)
        assert (back.values == s.values).all()


def test_csr_file_roundtrip(tmp_path):
    a = np.array([[0.0, -1.5, 0.0], [2.25, 0.0, 1e-300]])
    path = tmp_path / "block.csr"
    save_csr(to_csr(a), path)
    back = load_csr(path)
    assert (to_dense(back) == a).all()


def test_csr_from_bytes_rejects_corruption(tmp_path):
    blob = csr_to_bytes(to_csr(np.eye(2)))
    with pytest.raises(ValueError):
        csr_from_bytes(b"XXXXXXX" + blob[7:])
    with pytest.raises(ValueError):
        csr_from_bytes(blob[:-4])
    path = tmp_path / "trailing.csr"
    path.write_bytes(blob + b"\x00")
    with pytest.raises(ValueError):
        load_csr(path)
