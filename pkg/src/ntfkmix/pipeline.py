"""From NTFk models to physical features of the reaction product.

A temporal feature ``p`` of a Tucker model is the rank-one-in-time
sub-tensor ``X_p = W[:, p] (x) A_p`` with spatial map
``A_p = H @ G[p] @ V.T``; the features add up to the full reconstruction.
Features of the two invariants are paired by the similarity of their
temporal profiles and pushed through the fast-reaction max-transform one
pair at a time.
"""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field

import numpy as np
from scipy.interpolate import make_interp_spline

from .ntfk import select_k
from .rdsim import recover_species
from .tensor import TuckerModel, reconstruct

log = logging.getLogger(__name__)


@dataclass
class FeatureSet:
    profiles: np.ndarray        # (K, k) temporal profiles W
    maps: np.ndarray            # (k, M, N) spatial maps A_p
    labels: list = field(default_factory=list)

    @property
    def k(self):
        return self.profiles.shape[1]

    def tensor(self, p):
        return self.profiles[:, p, None, None] * self.maps[p][None]

    def tensors(self):
        return [self.tensor(p) for p in range(self.k)]

    def total(self):
        return np.einsum("ip,pjl->ijl", self.profiles, self.maps)


def peak_order(profiles):
    """Feature indices sorted by the time of their peak (earliest first)."""
    peaks = np.argmax(profiles, axis=0)
    return sorted(range(profiles.shape[1]), key=lambda p: (peaks[p], p))


def feature_decompose(model, labels=None):
    """Split a Tucker model into its temporal features.

    Features are ordered by time of peak and labelled ``T1, T2, ...`` unless
    `labels` is given. The labels are annotations only.
    """
    model.validate()
    order = peak_order(model.W)
    maps = np.stack([model.H @ model.core[p] @ model.V.T for p in order])
    profiles = model.W[:, order]
    if labels is None:
        labels = [f"T{i + 1}" for i in range(len(order))]
    return FeatureSet(profiles.copy(), maps, list(labels))


def pair_features(fs_f, fs_g):
    """Greedy pairing by cosine similarity of temporal profiles.

    Returns a list of ``(index_in_f, index_in_g, similarity)`` sorted by the
    F index. Ties go to the lower index.
    """
    if fs_f.k != fs_g.k:
        raise ValueError(f"feature counts differ: {fs_f.k} vs {fs_g.k}")
    a = fs_f.profiles / np.linalg.norm(fs_f.profiles, axis=0)
    b = fs_g.profiles / np.linalg.norm(fs_g.profiles, axis=0)
    sim = np.clip(a.T @ b, 0.0, 1.0)
    cand = sorted((-sim[i, j], i, j) for i in range(fs_f.k) for j in range(fs_g.k))
    used_f, used_g, pairs = set(), set(), []
    for s, i, j in cand:
        if i in used_f or j in used_g:
            continue
        used_f.add(i)
        used_g.add(j)
        pairs.append((i, j, -s))
    return sorted(pairs)


@dataclass
class ProductFeature:
    label: str
    c_a: np.ndarray
    c_b: np.ndarray
    c_c: np.ndarray
    f_index: int
    g_index: int
    similarity: float


def product_features(fs_f, fs_g, pairing, n_a=1.0, n_b=1.0, n_c=1.0):
    """Per-feature reactant and product concentrations.

    For each pair: ``c_A|p = max(F_p - (n_A/n_B) G_p, 0)``,
    ``c_B|p = max(G_p - (n_B/n_A) F_p, 0)`` and ``c_C|p = (n_C/n_A)(F_p - c_A|p)``.
    """
    if fs_f.k != fs_g.k or len(pairing) != fs_f.k:
        raise ValueError("pairing must cover equally sized feature sets")
    out = []
    for i, j, s in pairing:
        F = fs_f.tensor(i)
        G = fs_g.tensor(j)
        c_a, c_b, c_c = recover_species(F, G, n_a, n_b, n_c)
        out.append(ProductFeature(fs_f.labels[i], c_a, c_b, c_c, i, j, float(s)))
    return out


def transient_stats(tensors):
    """Per-step spatial max and mean of each tensor. Returns ``(max, mean)`` of shape (k, K)."""
    tensors = [np.asarray(t) for t in tensors]
    mx = np.stack([t.reshape(t.shape[0], -1).max(axis=1) for t in tensors])
    mean = np.stack([t.reshape(t.shape[0], -1).mean(axis=1) for t in tensors])
    return mx, mean


def decay_time(times, series, fraction=0.1):
    """First time after the peak where `series` is below ``fraction * peak``.

    Returns ``times[-1]`` plus one step when the series never decays that far.
    """
    p = int(np.argmax(series))
    below = np.flatnonzero(series[p:] < fraction * series[p])
    if below.size == 0:
        return float(times[-1] + (times[-1] - times[-2] if len(times) > 1 else 0.0))
    return float(times[p + below[0]])


def fit_temporal_splines(W, times):
    """Degree-1 B-spline interpolant of every column of `W` over `times`."""
    times = np.asarray(times, dtype=float)
    if times.ndim != 1 or len(times) < 2 or np.any(np.diff(times) <= 0):
        raise ValueError("time grid must be strictly increasing with at least two points")
    return make_interp_spline(times, np.asarray(W, dtype=float), k=1)


def extrapolate_profiles(splines, t_future):
    """Evaluate the profile splines, clamping negative values to zero."""
    return np.maximum(splines(np.atleast_1d(np.asarray(t_future, dtype=float)), extrapolate=True), 0.0)


def blind_predict(model, splines, t_future):
    """Synthesize slices at `t_future` from extrapolated temporal profiles."""
    Wf = extrapolate_profiles(splines, t_future)
    return reconstruct(TuckerModel(model.core, Wf, model.H, model.V))


def extrapolate_features(fs, times_train, t_future):
    """Feature set at `t_future` with the spatial maps of `fs` and extrapolated profiles."""
    profiles = extrapolate_profiles(fit_temporal_splines(fs.profiles, times_train), t_future)
    return FeatureSet(profiles, fs.maps, list(fs.labels))


def predict_product_means(fs_f, fs_g, times_train, t_future, n_a=1.0, n_b=1.0, n_c=1.0):
    """Blind prediction of the spatial mean of product C.

    The total comes from the max-transform of the predicted invariant
    fields (the feature sum); the per-feature means are the attribution of
    the paired feature products and need not add up to it. Pairing is fixed
    on the training profiles. Returns ``(total, per_feature, labels)`` with
    ``per_feature`` of shape (k, len(t_future)).
    """
    pairing = pair_features(fs_f, fs_g)
    fut_f = extrapolate_features(fs_f, times_train, t_future)
    fut_g = extrapolate_features(fs_g, times_train, t_future)
    prods = product_features(fut_f, fut_g, pairing, n_a, n_b, n_c)
    _, means = transient_stats([p.c_c for p in prods])
    c_c = recover_species(fut_f.total(), fut_g.total(), n_a, n_b, n_c)[2]
    return c_c.reshape(len(c_c), -1).mean(axis=1), means, [p.label for p in prods]


def compression_ratio(model, X_shape):
    """Stored model entries over stored tensor entries."""
    if hasattr(X_shape, "shape"):
        X_shape = X_shape.shape
    K, M, N = X_shape
    k, m, n = model.ranks
    return (k * m * n + K * k + M * m + N * n) / (K * M * N)


# -- orchestration -------------------------------------------------------------

@dataclass
class Analysis:
    k: int
    status: str
    model_f: TuckerModel
    model_g: TuckerModel
    features_f: FeatureSet
    features_g: FeatureSet
    pairing: list
    products: list
    selection_f: object
    selection_g: object


def common_k(sel_f, sel_g, cfg):
    """Largest k accepted for both invariants (falls back to the smaller choice)."""
    if sel_f.k == sel_g.k:
        return sel_f.k, "ok" if sel_f.status == sel_g.status == "ok" else "warning"

    def accepted(sel):
        best = min(c.median_r for c in sel.clusters.values())
        guard = cfg.r_ratio * best + cfg.r_floor
        return {k for k, c in sel.clusters.items()
                if c.median_r <= guard and (k == 1 or c.average_silhouette >= cfg.silhouette_threshold)}

    both = accepted(sel_f) & accepted(sel_g)
    if both:
        return max(both), "ok"
    return min(sel_f.k, sel_g.k), "warning"


def best_model(sel, k):
    return min(sel.runs[k], key=lambda mt: mt[1].objective)[0]


def analyze(c_f, c_g, cfg, n_a=1.0, n_b=1.0, n_c=1.0):
    """Run NTFk on both invariants and derive the product features."""
    sel_f = select_k(c_f, cfg)
    sel_g = select_k(c_g, cfg)
    k, status = common_k(sel_f, sel_g, cfg)
    mf, mg = best_model(sel_f, k), best_model(sel_g, k)
    fs_f, fs_g = feature_decompose(mf), feature_decompose(mg)
    pairing = pair_features(fs_f, fs_g)
    products = product_features(fs_f, fs_g, pairing, n_a, n_b, n_c)
    return Analysis(k, status, mf, mg, fs_f, fs_g, pairing, products, sel_f, sel_g)


def write_feature_stats(path, times, products):
    mx, mean = transient_stats([p.c_c for p in products])
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "featureLabel", "maxConcentration", "meanConcentration"])
        for p, prod in enumerate(products):
            for i, t in enumerate(times):
                w.writerow([repr(float(t)), prod.label, repr(float(mx[p, i])), repr(float(mean[p, i]))])


def write_extrapolation(path, times, predicted_mean, per_feature, labels, true_mean=None):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["time", "trueMean", "predictedMean"] + [f"mean_{lab}" for lab in labels])
        for i, t in enumerate(times):
            tm = "" if true_mean is None else repr(float(true_mean[i]))
            w.writerow([repr(float(t)), tm, repr(float(predicted_mean[i]))]
                       + [repr(float(per_feature[p][i])) for p in range(len(labels))])
