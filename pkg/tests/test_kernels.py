import numpy as np
import pytest
import scipy.sparse as sp

from ntfkmix import _kernels_py, kernels
from ntfkmix.rdsim import SimulationConfig, assemble_operator, greedy_coloring, lumped_mass

compiled = pytest.mark.skipif("compiled" not in kernels.available_backends(),
                              reason="extension not built")


@pytest.fixture
def restore_backend():
    name = kernels.BACKEND
    yield
    kernels.use_backend(name)


def pgs_problem():
    cfg = SimulationConfig(nodes=9, v0=0.3)
    K, _ = assemble_operator(cfg, 0.0)
    A = (sp.diags(lumped_mass(cfg) / cfg.dt) + K).tocsr()
    A.sort_indices()
    order, ptr = greedy_coloring(A)
    rng = np.random.default_rng(0)
    n = A.shape[0]
    rhs = rng.normal(size=n)
    return (A.indptr.astype(np.int32), A.indices.astype(np.int32), A.data.copy(),
            A.diagonal().copy(), order, ptr, rhs, np.zeros(n), np.ones(n))


def test_unknown_backend(restore_backend):
    with pytest.raises(ValueError):
        kernels.use_backend("fortran")
    kernels.use_backend("python")
    assert kernels.BACKEND == "python" and kernels.core_cd is _kernels_py.core_cd


@compiled
def test_pgs_backends_agree():
    from ntfkmix import _kernels
    args = pgs_problem()
    x1 = np.zeros(len(args[6]))
    x2 = x1.copy()
    it1, d1 = _kernels.pgs_solve(*args, x1, 1e-12, 5000)
    it2, d2 = _kernels_py.pgs_solve(*args, x2, 1e-12, 5000)
    assert it1 == it2
    assert np.max(np.abs(x1 - x2)) <= 1e-13


@compiled
def test_core_cd_backends_agree():
    from ntfkmix import _kernels
    rng = np.random.default_rng(1)
    ranks = (3, 4, 2)
    mats = [rng.random((5, r)) for r in ranks]
    A, B, C = (np.ascontiguousarray(M.T @ M) for M in mats)
    G = rng.random(ranks)
    T = rng.random(ranks) * 3
    grad = np.einsum("ap,bq,cr,pqr->abc", A, B, C, G) - T
    out = []
    for mod in (_kernels, _kernels_py):
        g, gr = G.copy(), grad.copy()
        mod.core_cd(g, gr, A, B, C, 0.05)
        out.append((g, gr))
    assert np.allclose(out[0][0], out[1][0], rtol=0, atol=1e-13)
    assert np.allclose(out[0][1], out[1][1], rtol=0, atol=1e-12)
    # grad stays consistent with the updated core
    g = out[0][0]
    assert np.allclose(out[0][1], np.einsum("ap,bq,cr,pqr->abc", A, B, C, g) - T, atol=1e-12)


@compiled
def test_hals_backends_agree():
    from ntfkmix import _kernels
    rng = np.random.default_rng(2)
    F = rng.random((30, 4))
    P = rng.random((30, 4))
    M = rng.random((6, 4))
    Q = M.T @ M
    a, b = F.copy(), F.copy()
    _kernels.hals_columns(a, P, Q, 5)
    _kernels_py.hals_columns(b, P, Q, 5)
    assert np.allclose(a, b, rtol=0, atol=1e-13)
    assert a.min() >= 0


@compiled
def test_decompose_same_on_both_backends(restore_backend):
    from ntfkmix.ntf import NtfOptions, decompose
    X = np.random.default_rng(3).random((10, 6, 5))
    res = {}
    for name in ("compiled", "python"):
        kernels.use_backend(name)
        res[name] = decompose(X, NtfOptions(ranks=(2, 2, 2), seed=4, max_sweeps=30))
    assert abs(res["compiled"][1].final_r - res["python"][1].final_r) <= 1e-10
