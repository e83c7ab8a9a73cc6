import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from ntfkmix.tensor import (TensorFormatError, TuckerModel, fold, mode_product,
                            read_tensor, reconstruct, relative_error, unfold,
                            write_tensor, write_tensor_csv)


def brute_reconstruct(G, W, H, V):
    K, M, N = W.shape[0], H.shape[0], V.shape[0]
    k, m, n = G.shape
    out = np.zeros((K, M, N))
    for i in range(K):
        for j in range(M):
            for l in range(N):
                s = 0.0
                for p in range(k):
                    for q in range(m):
                        for r in range(n):
                            s += G[p, q, r] * W[i, p] * H[j, q] * V[l, r]
                out[i, j, l] = s
    return out


def test_unfold_time_small():
    X = np.array([[[i * 4 + j * 2 + l for l in range(2)] for j in range(2)] for i in range(2)], float)
    U = unfold(X, "time")
    assert U.shape == (2, 4)
    # x slowest, y fastest
    assert U.tolist() == [[0, 1, 2, 3], [4, 5, 6, 7]]
    assert np.array_equal(fold(U, "time", X.shape), X)


def test_unfold_zero():
    assert not unfold(np.zeros((2, 3, 4)), 1).any()


def test_unfold_index_arithmetic():
    rng = np.random.default_rng(0)
    X = rng.random((3, 4, 5))
    K, M, N = X.shape
    U0, U1, U2 = unfold(X, 0), unfold(X, 1), unfold(X, 2)
    for i in range(K):
        for j in range(M):
            for l in range(N):
                assert U0[i, j * N + l] == X[i, j, l]
                assert U1[j, l * K + i] == X[i, j, l]
                assert U2[l, i * M + j] == X[i, j, l]
    for mode in range(3):
        assert np.array_equal(fold(unfold(X, mode), mode, X.shape), X)


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 5), st.integers(1, 5), st.integers(1, 5)),
              elements=st.floats(-1e6, 1e6)),
       st.sampled_from(["time", "x", "y"]))
def test_fold_unfold_roundtrip(X, mode):
    assert np.array_equal(fold(unfold(X, mode), mode, X.shape), X)


def test_fold_shape_mismatch():
    with pytest.raises(ValueError):
        fold(np.zeros((2, 5)), 0, (2, 2, 2))


def test_mode_product_matches_einsum():
    rng = np.random.default_rng(1)
    X = rng.random((3, 4, 5))
    U = rng.random((2, 4))
    assert np.allclose(mode_product(X, U, 1), np.einsum("ijl,qj->iql", X, U))


def test_reconstruct_rank_one():
    model = TuckerModel(np.array([[[2.0]]]), np.array([[1.0], [0.5]]),
                        np.array([[1.0], [1.0]]), np.array([[1.0], [2.0]]))
    X = reconstruct(model)
    assert X[0, 0, 1] == 4.0
    assert X[1, 1, 0] == 1.0


def test_reconstruct_zero_core():
    rng = np.random.default_rng(2)
    model = TuckerModel(np.zeros((2, 2, 2)), rng.random((3, 2)), rng.random((3, 2)), rng.random((3, 2)))
    assert not reconstruct(model).any()


def test_reconstruct_brute_force():
    rng = np.random.default_rng(3)
    G, W, H, V = rng.random((2, 2, 2)), rng.random((6, 2)), rng.random((5, 2)), rng.random((4, 2))
    X = reconstruct(TuckerModel(G, W, H, V))
    ref = brute_reconstruct(G, W, H, V)
    assert np.max(np.abs(X - ref)) <= 1e-12 * np.max(np.abs(ref))
    assert np.all(X >= 0)


def test_relative_error_cases():
    rng = np.random.default_rng(4)
    X = rng.random((3, 3, 3)) + 0.1
    assert relative_error(X, X) == 0.0
    assert relative_error(X, np.zeros_like(X)) == 1.0
    with pytest.raises(ValueError):
        relative_error(np.zeros((2, 2, 2)), np.zeros((2, 2, 2)))


def test_relative_error_noise_level():
    rng = np.random.default_rng(5)
    model = TuckerModel(rng.random((2, 2, 2)), rng.random((8, 2)), rng.random((7, 2)), rng.random((6, 2)))
    clean = reconstruct(model)
    noise = rng.normal(size=clean.shape)
    noise *= 0.01 * np.linalg.norm(clean) / np.linalg.norm(noise)
    X = clean + noise
    # ||noise|| / ||clean + noise|| for a noise vector of 1% relative norm
    R = relative_error(X, clean)
    assert 0.0099 <= R <= 0.0101


def test_binary_roundtrip(tmp_path):
    rng = np.random.default_rng(6)
    X = rng.random((3, 4, 5))
    p = tmp_path / "x.ntk"
    write_tensor(p, X)
    raw = p.read_bytes()
    assert raw[:4] == b"NTK1"
    assert int.from_bytes(raw[4:12], "little") == 3
    assert len(raw) == 4 + 24 + 8 * X.size
    assert np.array_equal(read_tensor(p), X)


def test_binary_matrix_stored_with_trailing_one(tmp_path):
    p = tmp_path / "m.ntk"
    write_tensor(p, np.ones((4, 2)))
    assert read_tensor(p).shape == (4, 2, 1)


def test_corrupt_header(tmp_path):
    p = tmp_path / "bad.ntk"
    p.write_bytes(b"NOPE" + bytes(24))
    with pytest.raises(TensorFormatError):
        read_tensor(p)
    q = tmp_path / "short.ntk"
    write_tensor(q, np.ones((2, 2, 2)))
    q.write_bytes(q.read_bytes()[:-8])
    with pytest.raises(TensorFormatError):
        read_tensor(q)


def test_csv_export(tmp_path):
    X = np.arange(8, dtype=float).reshape(2, 2, 2)
    p = tmp_path / "x.csv"
    write_tensor_csv(p, X)
    lines = p.read_text().splitlines()
    assert lines[0] == "i,j,l,value"
    assert lines[1] == "0,0,0,0.0"
    assert lines[-1] == "1,1,1,7.0"
    assert len(lines) == 9
