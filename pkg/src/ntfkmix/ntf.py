"""Non-negative Tucker-3 factorization by block coordinate descent.

Each sweep updates ``W``, ``H``, ``V`` with hierarchical column-wise
non-negative least squares (HALS) and then the core with exact cyclic
coordinate descent including an l1 penalty. Every block update is an exact
minimisation of its subproblem, so the objective

    0.5 * ||X - G x1 W x2 H x3 V||^2 + sparsity * sum(G)

never increases from one sweep to the next.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import kernels
from .tensor import (TuckerModel, as_tensor3, frobenius,
                     multi_mode_product, read_tensor, reconstruct,
                     relative_error, unfold, write_tensor)

log = logging.getLogger(__name__)


@dataclass
class NtfOptions:
    ranks: tuple
    max_sweeps: int = 500
    tolerance: float = 1e-8
    sparsity: float = 0.0
    seed: int = 0
    inner: int = 10

    def validate(self, dims=None):
        if len(self.ranks) != 3 or any(int(r) < 1 for r in self.ranks):
            raise ValueError(f"ranks must be three integers >= 1, got {self.ranks}")
        if dims is not None:
            for r, d, name in zip(self.ranks, dims, ("time", "x", "y")):
                if r > d:
                    raise ValueError(f"{name} rank {r} exceeds dimension {d}")
        if not self.tolerance > 0:
            raise ValueError("tolerance must be > 0")
        if self.sparsity < 0:
            raise ValueError("sparsity weight must be >= 0")
        if self.max_sweeps < 1:
            raise ValueError("max_sweeps must be >= 1")


@dataclass
class ConvergenceTrace:
    objectives: list = field(default_factory=list)
    final_r: float = float("nan")
    sweeps: int = 0
    converged: bool = False

    @property
    def objective(self):
        return self.objectives[-1] if self.objectives else float("nan")


def init_factors(dims, ranks, seed):
    """Random model with entries uniform on (0, 1], then column-normalised."""
    for r, d in zip(ranks, dims):
        if r < 1 or r > d:
            raise ValueError(f"rank {r} invalid for dimension {d}")
    rng = np.random.default_rng(seed)
    k, m, n = ranks
    G = 1.0 - rng.random((k, m, n))
    W = 1.0 - rng.random((dims[0], k))
    H = 1.0 - rng.random((dims[1], m))
    V = 1.0 - rng.random((dims[2], n))
    return TuckerModel(G, W, H, V).normalized()


def objective(X, model, sparsity=0.0):
    R = X - reconstruct(model)
    return 0.5 * float(np.vdot(R, R)) + sparsity * float(model.core.sum())


def _factor_update(X, model, axis, rng, inner=1):
    factors = [model.W, model.H, model.V]
    G = model.core
    F = factors[axis]
    others = [None if b == axis else factors[b] for b in range(3)]
    grams = [None if b == axis else factors[b].T @ factors[b] for b in range(3)]
    Y = multi_mode_product(X, others, transpose=True)
    Gu = unfold(G, axis)
    P = unfold(Y, axis) @ Gu.T
    Q = Gu @ unfold(multi_mode_product(G, grams), axis).T
    # P and Q do not change inside the block, so repeated column passes are
    # cheap and bring the block much closer to its exact minimiser
    Fc = np.ascontiguousarray(F)
    kernels.hals_columns(Fc, np.ascontiguousarray(P), np.ascontiguousarray(Q), int(inner))
    F[...] = Fc
    dead = np.flatnonzero(~F.any(axis=0))
    for p in dead:
        # The matching core slice is zeroed as well, which leaves the
        # reconstruction (and the objective) unchanged.
        F[:, p] = 1.0 - rng.random(F.shape[0])
        F[:, p] /= np.linalg.norm(F[:, p])
        idx = [slice(None)] * 3
        idx[axis] = p
        G[tuple(idx)] = 0.0


def _core_update(X, model, sparsity):
    W, H, V = model.W, model.H, model.V
    A = np.ascontiguousarray(W.T @ W)
    B = np.ascontiguousarray(H.T @ H)
    C = np.ascontiguousarray(V.T @ V)
    T = multi_mode_product(X, (W, H, V), transpose=True)
    G = np.ascontiguousarray(model.core)
    grad = np.ascontiguousarray(multi_mode_product(G, (A, B, C)) - T)
    kernels.core_cd(G, grad, A, B, C, float(sparsity))
    model.core = G
    # 0.5*||X - Xhat||^2 - 0.5*||X||^2 = <G, 0.5*G x (A, B, C) - T>, and the
    # kernel keeps grad = G x (A, B, C) - T current
    return 0.5 * float(np.vdot(G, grad - T)) + sparsity * float(G.sum())


def _sweep(X, model, opts, rng):
    model = model.copy()
    model.validate()
    for axis in range(3):
        _factor_update(X, model, axis, rng, opts.inner)
    partial = _core_update(X, model, opts.sparsity)
    return model, partial


def bcd_sweep(X, model, opts, rng=None):
    """One W, H, V, G cycle. Returns a new model; the input is untouched."""
    if rng is None:
        rng = np.random.default_rng(opts.seed)
    return _sweep(X, model, opts, rng)[0]


def decompose(X, opts, init=None):
    """Fit a non-negative Tucker-3 model to `X`.

    Returns ``(model, trace)`` with the model column-normalised. Iteration
    stops when the relative objective decrease drops below
    ``opts.tolerance`` or after ``opts.max_sweeps`` sweeps.
    """
    X = as_tensor3(X)
    if np.any(X < 0):
        raise ValueError("tensor has negative entries")
    nx = frobenius(X)
    if nx == 0.0:
        raise ValueError("tensor has zero norm")
    opts.validate(X.shape)
    rng = np.random.default_rng(opts.seed)
    if init is None:
        model = init_factors(X.shape, opts.ranks, rng.integers(2**63))
        model.core *= nx / max(frobenius(reconstruct(model)), 1e-300)
    else:
        model = init.copy()
    floor = 0.5 * (1e-13 * nx) ** 2
    trace = ConvergenceTrace()
    prev = objective(X, model, opts.sparsity)
    for sweep in range(1, opts.max_sweeps + 1):
        model, partial = _sweep(X, model, opts, rng)
        # clamp the cancellation noise of the Gram form near an exact fit
        cur = max(0.5 * nx * nx + partial, 0.0)
        trace.objectives.append(cur)
        trace.sweeps = sweep
        if prev - cur <= opts.tolerance * prev or cur <= floor:
            trace.converged = True
            break
        prev = cur
    model = model.normalized()
    trace.final_r = relative_error(X, reconstruct(model))
    log.debug("decompose ranks=%s sweeps=%d R=%.3e", opts.ranks, trace.sweeps, trace.final_r)
    return model, trace


@dataclass
class ResidualDiagnostics:
    residual: np.ndarray
    mean: float
    variance: float
    lag1_autocorrelation: float


def residual_diagnostics(X, model):
    """Residual ``X - Xhat`` with white-noise summary statistics.

    The autocorrelation is taken over the per-time-step residual norms.
    """
    eps = np.asarray(X, dtype=float) - reconstruct(model)
    norms = np.sqrt((eps ** 2).reshape(eps.shape[0], -1).sum(axis=1))
    d = norms - norms.mean()
    denom = float(d @ d)
    rho = float(d[:-1] @ d[1:]) / denom if denom > 0 and len(d) > 1 else 0.0
    return ResidualDiagnostics(eps, float(eps.mean()), float(eps.var()), rho)


# -- model files ---------------------------------------------------------------

def save_model(path, model, meta=None):
    """Write core, W, H, V as NTK1 files plus ``metadata.txt``."""
    path = Path(path)
    path.mkdir(parents=True, exist_ok=True)
    write_tensor(path / "core.ntk", model.core)
    write_tensor(path / "W.ntk", model.W)
    write_tensor(path / "H.ntk", model.H)
    write_tensor(path / "V.ntk", model.V)
    lines = [f"ranks = {' '.join(str(r) for r in model.ranks)}"]
    for key, value in (meta or {}).items():
        lines.append(f"{key} = {value}")
    (path / "metadata.txt").write_text("\n".join(lines) + "\n")


def load_model(path):
    path = Path(path)
    mats = [read_tensor(path / f"{name}.ntk")[:, :, 0] for name in ("W", "H", "V")]
    model = TuckerModel(read_tensor(path / "core.ntk"), *mats)
    model.validate()
    return model


def read_metadata(path):
    meta = {}
    for line in (Path(path) / "metadata.txt").read_text().splitlines():
        if "=" in line:
            key, value = line.split("=", 1)
            meta[key.strip()] = value.strip()
    return meta
