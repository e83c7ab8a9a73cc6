"""Restart ensembles, balanced cosine k-means and selection of the feature count.

For a candidate number of temporal features ``k`` the tensor is factorised
``N`` times from independent random starts. The ``N*k`` temporal columns are
clustered into ``k`` groups with the constraint that each restart gives
exactly one column to every group; tight groups (high silhouettes) mean the
``k`` features are reproducible.
"""
from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .ntf import NtfOptions, decompose

log = logging.getLogger(__name__)


@dataclass
class EnsembleConfig:
    restarts: int = 50
    k_range: tuple = (2, 5)
    silhouette_threshold: float = 0.7
    r_ratio: float = 1.1
    r_floor: float = 1e-3
    spatial_ranks: tuple | None = None
    base: NtfOptions = field(default_factory=lambda: NtfOptions(ranks=(1, 1, 1)))
    seed: int = 0
    jobs: int = 1

    def validate(self, K=None):
        if self.restarts < 2:
            raise ValueError("need at least 2 restarts")
        lo, hi = self.k_range
        if lo < 1 or hi < lo:
            raise ValueError(f"invalid k range {self.k_range}")
        if K is not None and hi > K:
            raise ValueError(f"k range upper bound {hi} exceeds time dimension {K}")
        if not -1.0 <= self.silhouette_threshold <= 1.0:
            raise ValueError("silhouette threshold must lie in [-1, 1]")


@dataclass
class ClusterResult:
    k: int
    labels: np.ndarray          # (N, k): cluster of column p of restart i
    silhouettes: np.ndarray     # (N, k)
    average_silhouette: float
    centroids: np.ndarray       # (K, k), unit columns
    iterations: int
    median_r: float = float("nan")


@dataclass
class SelectionResult:
    k: int
    status: str                 # "ok" or "warning"
    clusters: dict
    runs: dict
    model: object
    trace: object


def spatial_ranks_for(k, dims, cfg):
    if cfg.spatial_ranks is not None:
        m, n = cfg.spatial_ranks
        return min(m, dims[1]), min(n, dims[2])
    return min(dims[1], 3 * k), min(dims[2], 3 * k)


def restart_seeds(master, k, restarts):
    ss = np.random.SeedSequence([int(master), int(k)])
    return [int(s.generate_state(2, dtype=np.uint64)[0] >> 1) for s in ss.spawn(restarts)]


def _run_one(args):
    X, opts = args
    return decompose(X, opts)


def ensemble_run(X, k, cfg):
    """`cfg.restarts` independent factorisations with ``k`` temporal features.

    Seeds depend only on ``(cfg.seed, k, restart index)``, so results do not
    depend on scheduling.
    """
    m, n = spatial_ranks_for(k, X.shape, cfg)
    seeds = restart_seeds(cfg.seed, k, cfg.restarts)
    tasks = [(X, replace(cfg.base, ranks=(k, m, n), seed=s)) for s in seeds]
    if cfg.jobs > 1:
        with ProcessPoolExecutor(max_workers=cfg.jobs) as pool:
            return list(pool.map(_run_one, tasks))
    return [_run_one(t) for t in tasks]


def cosine_distances(A, B):
    """``1 - cos`` between the columns of `A` and of `B`."""
    na = np.linalg.norm(A, axis=0)
    nb = np.linalg.norm(B, axis=0)
    return 1.0 - (A.T @ B) / np.outer(na, nb)


def _balanced_assign(dist):
    """Greedy one-to-one assignment of columns (rows) to clusters (cols).

    Pairs are taken by ascending distance; ties go to the lower cluster
    index, then the lower column index.
    """
    k = dist.shape[0]
    flat = sorted((dist[p, c], c, p) for p in range(k) for c in range(k))
    labels = np.full(k, -1)
    taken = np.zeros(k, dtype=bool)
    for _, c, p in flat:
        if labels[p] < 0 and not taken[c]:
            labels[p] = c
            taken[c] = True
    return labels


def silhouette(labels, columns):
    """Per-column cosine-distance silhouettes and their mean.

    `labels` is a flat array of cluster ids for the columns of `columns`.
    With a single cluster, or for singleton clusters, silhouettes are 0.
    """
    labels = np.asarray(labels).ravel()
    ids = np.unique(labels)
    s = np.zeros(len(labels))
    if len(ids) < 2:
        return s, 0.0
    D = np.clip(cosine_distances(columns, columns), 0.0, 2.0)
    for i in range(len(labels)):
        own = labels == labels[i]
        if own.sum() < 2:
            continue
        a = D[i, own].sum() / (own.sum() - 1)
        b = min(D[i, labels == c].mean() for c in ids if c != labels[i])
        den = max(a, b)
        s[i] = 0.0 if den == 0 else (b - a) / den
    return s, float(s.mean())


def cluster_columns(columns, max_iter=100):
    """Balanced cosine k-means over the temporal columns of an ensemble.

    Parameters
    ----------
    columns : (N, K, k) array
        Temporal factor of each of the ``N`` restarts.

    Returns
    -------
    ClusterResult
    """
    columns = np.asarray(columns, dtype=float)
    N, K, k = columns.shape
    norms = np.linalg.norm(columns, axis=1)
    if np.any(norms == 0):
        raise ValueError("degenerate all-zero column in ensemble")
    U = columns / norms[:, None, :]
    centroids = U[0].copy()
    labels = np.full((N, k), -1)
    it = 0
    for it in range(1, max_iter + 1):
        new = np.stack([_balanced_assign(cosine_distances(U[i], centroids)) for i in range(N)])
        stable = np.array_equal(new, labels)
        labels = new
        for c in range(k):
            members = np.stack([U[i][:, labels[i] == c][:, 0] for i in range(N)], axis=1)
            mean = members.mean(axis=1)
            nrm = np.linalg.norm(mean)
            if nrm > 0:
                centroids[:, c] = mean / nrm
        if stable:
            break
    flat_cols = U.transpose(1, 0, 2).reshape(K, N * k)
    s, avg = silhouette(labels.ravel(), flat_cols)
    return ClusterResult(k, labels, s.reshape(N, k), avg, centroids, it)


def select_k(X, cfg):
    """Choose the number of temporal features.

    The chosen ``k`` is the largest one whose average silhouette reaches
    ``cfg.silhouette_threshold`` and whose ensemble-median ``R`` is within
    ``cfg.r_ratio * min_R + cfg.r_floor``. ``k = 1`` has no silhouette, so it
    only has to meet the ``R`` guard. If nothing qualifies the ``k`` with the
    best silhouette is returned with ``status="warning"``.
    """
    cfg.validate(X.shape[0])
    clusters, runs = {}, {}
    for k in range(cfg.k_range[0], cfg.k_range[1] + 1):
        res = ensemble_run(X, k, cfg)
        runs[k] = res
        cl = cluster_columns(np.stack([m.W for m, _ in res]))
        cl.median_r = float(np.median([t.final_r for _, t in res]))
        clusters[k] = cl
        log.info("k=%d avg silhouette=%.3f median R=%.3e", k, cl.average_silhouette, cl.median_r)
    best_r = min(c.median_r for c in clusters.values())
    guard = cfg.r_ratio * best_r + cfg.r_floor
    passing = [k for k, c in clusters.items()
               if c.median_r <= guard and (k == 1 or c.average_silhouette >= cfg.silhouette_threshold)]
    if passing:
        chosen, status = max(passing), "ok"
    else:
        chosen = max(clusters, key=lambda k: (clusters[k].average_silhouette, -k))
        status = "warning"
        log.warning("no k passed the selection rule; falling back to k=%d", chosen)
    model, trace = min(runs[chosen], key=lambda mt: mt[1].objective)
    return SelectionResult(chosen, status, clusters, runs, model, trace)


def write_reports(selection, runs_path, summary_path):
    """Ensemble CSV ``k,restart,sweepCount,objective,R`` and summary CSV."""
    with open(runs_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "restart", "sweepCount", "objective", "R"])
        for k, res in selection.runs.items():
            for i, (_, tr) in enumerate(res):
                w.writerow([k, i, tr.sweeps, repr(float(tr.objective)), repr(float(tr.final_r))])
    with open(summary_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["k", "averageSilhouette", "medianR", "chosen"])
        for k, cl in selection.clusters.items():
            w.writerow([k, repr(float(cl.average_silhouette)), repr(float(cl.median_r)),
                        int(k == selection.k)])
