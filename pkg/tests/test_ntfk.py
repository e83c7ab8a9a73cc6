import math

import numpy as np
import pytest

from ntfkmix.ntf import NtfOptions
from ntfkmix.ntfk import (EnsembleConfig, cluster_columns, ensemble_run,
                          restart_seeds, select_k, silhouette, write_reports)
from ntfkmix.synthetic import add_noise, bump_tensor, rank_one_model
from ntfkmix.tensor import TuckerModel, reconstruct


def d(deg):
    return 1.0 - math.cos(math.radians(deg))


def unit(deg):
    return np.array([math.cos(math.radians(deg)), math.sin(math.radians(deg))])


def test_restart_seeds_deterministic_and_distinct():
    a = restart_seeds(3, 2, 10)
    assert a == restart_seeds(3, 2, 10)
    assert len(set(a)) == 10
    assert a != restart_seeds(3, 3, 10)
    assert a != restart_seeds(4, 2, 10)


def test_ensemble_deterministic():
    X, _ = bump_tensor((12, 8, 8), k=2, noise=0.01)
    cfg = EnsembleConfig(restarts=3, base=NtfOptions(ranks=(1, 1, 1), max_sweeps=30), seed=4)
    a = ensemble_run(X, 2, cfg)
    b = ensemble_run(X, 2, cfg)
    for (ma, ta), (mb, tb) in zip(a, b):
        assert ta.objectives == tb.objectives
        assert np.array_equal(ma.W, mb.W) and np.array_equal(ma.core, mb.core)


def test_ensemble_parallel_matches_serial():
    X, _ = bump_tensor((12, 8, 8), k=2, noise=0.01)
    base = NtfOptions(ranks=(1, 1, 1), max_sweeps=20)
    serial = ensemble_run(X, 2, EnsembleConfig(restarts=3, base=base, seed=1))
    para = ensemble_run(X, 2, EnsembleConfig(restarts=3, base=base, seed=1, jobs=2))
    for (ma, _), (mb, _) in zip(serial, para):
        assert np.array_equal(ma.W, mb.W)


def test_ensemble_exact_tensor_all_runs_fit():
    # dense factors: with fully disjoint supports a restart can get stuck
    # with every column on the same feature, where all gradients vanish
    rng = np.random.default_rng(0)
    X = reconstruct(TuckerModel(rng.random((2, 2, 2)), rng.random((20, 2)),
                                rng.random((10, 2)), rng.random((10, 2))))
    cfg = EnsembleConfig(restarts=4, spatial_ranks=(2, 2), seed=2,
                         base=NtfOptions(ranks=(1, 1, 1), max_sweeps=5000, tolerance=1e-15))
    runs = ensemble_run(X, 2, cfg)
    assert all(t.final_r <= 1e-6 for _, t in runs)


def test_ensemble_noisy_objectives_distinct():
    X, _ = bump_tensor((15, 8, 8), k=2, noise=0.05, seed=3)
    cfg = EnsembleConfig(restarts=5, base=NtfOptions(ranks=(1, 1, 1), max_sweeps=40), seed=0)
    objs = [t.objective for _, t in ensemble_run(X, 2, cfg)]
    assert len(set(objs)) == len(objs)


def test_config_validation():
    with pytest.raises(ValueError):
        EnsembleConfig(restarts=1).validate()
    with pytest.raises(ValueError):
        EnsembleConfig(k_range=(3, 2)).validate()
    with pytest.raises(ValueError):
        EnsembleConfig(k_range=(1, 9)).validate(K=5)
    with pytest.raises(ValueError):
        EnsembleConfig(silhouette_threshold=1.5).validate()


def test_cluster_orthogonal_copies():
    e = np.eye(6)
    cols = np.stack([e[:, [0, 3]] if i % 2 else e[:, [3, 0]] for i in range(4)])
    res = cluster_columns(cols)
    assert abs(res.average_silhouette - 1.0) <= 1e-12
    # one column of every restart in each cluster
    for i in range(4):
        assert sorted(res.labels[i]) == [0, 1]
    first = [res.labels[i][np.argmax(cols[i][0])] for i in range(4)]
    assert len(set(first)) == 1


def test_cluster_single_feature_zero_silhouette():
    rng = np.random.default_rng(0)
    res = cluster_columns(rng.random((5, 10, 1)))
    assert res.average_silhouette == 0.0
    assert np.all(res.silhouettes == 0.0)


def test_cluster_rejects_zero_column():
    cols = np.ones((3, 4, 2))
    cols[1, :, 0] = 0.0
    with pytest.raises(ValueError):
        cluster_columns(cols)


def sphere_samples(rng, mean, n, std_deg):
    mean = mean / np.linalg.norm(mean)
    out = []
    for _ in range(n):
        u = rng.normal(size=mean.size)
        u -= (u @ mean) * mean
        u /= np.linalg.norm(u)
        theta = math.radians(abs(rng.normal(scale=std_deg)))
        out.append(math.cos(theta) * mean + math.sin(theta) * u)
    return np.array(out)


def test_cluster_gaussians_on_sphere():
    rng = np.random.default_rng(11)
    K, N = 12, 30
    m1, m2 = np.eye(K)[0], np.eye(K)[1]
    a = sphere_samples(rng, m1, N, 5.0)
    b = sphere_samples(rng, m2, N, 5.0)
    cols, truth = [], []
    for i in range(N):
        if rng.random() < 0.5:
            cols.append(np.stack([a[i], b[i]], 1))
            truth.append([0, 1])
        else:
            cols.append(np.stack([b[i], a[i]], 1))
            truth.append([1, 0])
    res = cluster_columns(np.stack(cols))
    truth = np.array(truth)
    agree = np.mean(res.labels == truth)
    assert agree in (0.0, 1.0)
    assert res.average_silhouette >= 0.9


def test_silhouette_two_triangles_by_hand():
    angles = [0, 10, 20, 80, 90, 100]
    cols = np.stack([unit(a) for a in angles], 1)
    labels = [0, 0, 0, 1, 1, 1]
    a = [(d(10) + d(20)) / 2, d(10), (d(10) + d(20)) / 2] * 2
    b = [(d(80) + d(90) + d(100)) / 3, (d(70) + d(80) + d(90)) / 3, (d(60) + d(70) + d(80)) / 3,
         (d(60) + d(70) + d(80)) / 3, (d(70) + d(80) + d(90)) / 3, (d(80) + d(90) + d(100)) / 3]
    expected = [(bi - ai) / max(ai, bi) for ai, bi in zip(a, b)]
    s, avg = silhouette(labels, cols)
    assert np.max(np.abs(s - expected)) <= 1e-12
    assert abs(avg - np.mean(expected)) <= 1e-12


def test_silhouette_conventions():
    cols = np.random.default_rng(1).random((4, 5))
    s, avg = silhouette([0] * 5, cols)
    assert avg == 0.0 and not s.any()
    s, _ = silhouette([0, 0, 1, 1, 2], cols)
    assert s[4] == 0.0
    assert np.all((s >= -1) & (s <= 1))


def test_silhouette_identical_within_distant_clusters():
    cols = np.stack([unit(0)] * 3 + [unit(90)] * 3, 1)
    s, avg = silhouette([0, 0, 0, 1, 1, 1], cols)
    assert np.allclose(s, 1.0) and avg == pytest.approx(1.0)


def test_cluster_permutation_invariance():
    rng = np.random.default_rng(5)
    K, N, k = 10, 6, 3
    means = np.eye(K)[:, :k] + 0.1
    cols = np.stack([means + 0.02 * rng.random((K, k)) for _ in range(N)])
    base = cluster_columns(cols)
    perm_r = rng.permutation(N)
    shuffled = np.stack([cols[i][:, rng.permutation(k)] for i in perm_r])
    other = cluster_columns(shuffled)
    assert other.average_silhouette == pytest.approx(base.average_silhouette, abs=1e-12)
    key = lambda C: sorted(map(tuple, np.round(C.T, 10)))
    assert key(other.centroids) == key(base.centroids)


def test_select_k_bumps():
    X, true = bump_tensor((40, 16, 16), k=3, noise=0.005, seed=1)
    sel = select_k(X, EnsembleConfig(restarts=4, k_range=(2, 4), seed=3))
    assert sel.k == 3 and sel.status == "ok"
    for k, cl in sel.clusters.items():
        assert cl.labels.shape == (4, k)
        for c in range(k):
            assert np.sum(cl.labels == c) == 4
    Wt = true.W / np.linalg.norm(true.W, axis=0)
    cos = sel.clusters[3].centroids.T @ Wt
    assert np.all(cos.max(axis=0) >= 0.95)


def test_select_k_rank_one():
    X = reconstruct(rank_one_model((15, 8, 7), seed=2))
    sel = select_k(X, EnsembleConfig(restarts=4, k_range=(1, 3), seed=0))
    assert sel.k == 1
    assert sel.trace.final_r <= 1e-6


def test_select_k_order_of_restarts_irrelevant():
    X = add_noise(bump_tensor((20, 10, 10), k=2)[0], 0.01, seed=2)
    cfg = EnsembleConfig(restarts=3, k_range=(1, 2), seed=6,
                         base=NtfOptions(ranks=(1, 1, 1), max_sweeps=60))
    a = select_k(X, cfg)
    b = select_k(X, EnsembleConfig(**{**cfg.__dict__, "jobs": 2}))
    assert a.k == b.k
    for k in a.clusters:
        assert a.clusters[k].average_silhouette == b.clusters[k].average_silhouette


def test_write_reports(tmp_path):
    X = add_noise(bump_tensor((12, 6, 6), k=2)[0], 0.01)
    sel = select_k(X, EnsembleConfig(restarts=2, k_range=(1, 2),
                                     base=NtfOptions(ranks=(1, 1, 1), max_sweeps=10)))
    write_reports(sel, tmp_path / "runs.csv", tmp_path / "summary.csv")
    runs = (tmp_path / "runs.csv").read_text().splitlines()
    assert runs[0] == "k,restart,sweepCount,objective,R"
    assert len(runs) == 1 + 2 * 2
    summary = (tmp_path / "summary.csv").read_text().splitlines()
    assert summary[0] == "k,averageSilhouette,medianR,chosen"
    assert sum(int(line.split(",")[-1]) for line in summary[1:]) == 1
