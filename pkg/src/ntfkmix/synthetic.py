"""Synthetic tensors with known Tucker structure, for testing and benchmarks."""
from __future__ import annotations

import numpy as np

from .tensor import TuckerModel, reconstruct


def bump_model(dims=(50, 20, 20), k=3, width=0.1):
    """Model with ``k`` Gaussian temporal pulses and triangular spatial bumps.

    Pulse ``p`` is centred at an evenly spaced time and owns one x bump and
    one y bump; the core is superdiagonal. Spatial bumps overlap a little so
    the factors are not trivially disjoint.
    """
    K, M, N = dims
    t = np.linspace(0.0, 1.0, K)
    W = np.stack([np.exp(-((t - c) / width) ** 2) for c in np.linspace(0.15, 0.85, k)], 1)
    x = np.linspace(0.0, 1.0, M)
    y = np.linspace(0.0, 1.0, N)
    centres = np.linspace(0.2, 0.8, k)
    H = np.stack([np.maximum(0.0, 1.0 - np.abs(x - c) / 0.3) for c in centres], 1)
    V = np.stack([np.maximum(0.0, 1.0 - np.abs(y - c) / 0.3) for c in centres[::-1]], 1)
    G = np.zeros((k, k, k))
    for p in range(k):
        G[p, p, p] = 1.0
    return TuckerModel(G, W, H, V)


def rank_one_model(dims, seed=0):
    rng = np.random.default_rng(seed)
    K, M, N = dims
    return TuckerModel(np.ones((1, 1, 1)), 0.1 + rng.random((K, 1)),
                       0.1 + rng.random((M, 1)), 0.1 + rng.random((N, 1)))


def add_noise(X, level, seed=0):
    """Gaussian noise of relative Frobenius norm `level`, clipped at zero."""
    rng = np.random.default_rng(seed)
    noise = rng.normal(size=X.shape)
    noise *= level * np.linalg.norm(X) / np.linalg.norm(noise)
    return np.maximum(X + noise, 0.0)


def bump_tensor(dims=(50, 20, 20), k=3, width=0.1, noise=0.0, seed=0):
    """``(X, model)`` for :func:`bump_model` with optional noise."""
    model = bump_model(dims, k, width)
    X = reconstruct(model)
    if noise > 0:
        X = add_noise(X, noise, seed)
    return X, model
