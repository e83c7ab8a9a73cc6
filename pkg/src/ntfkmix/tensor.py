"""Dense 3-way tensors and Tucker-3 algebra.

Tensors are plain ``float64`` numpy arrays indexed ``(time, x, y)``.

Unfolding convention: the mode-``n`` unfolding puts mode ``n`` on the rows
and orders columns by the remaining two modes taken cyclically, the first
of them slowest. Mode 0 (time) therefore has columns ``(x, y)`` with ``y``
fastest, mode 1 has ``(y, time)``, mode 2 has ``(time, x)``.
"""
from __future__ import annotations

import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

MODES = {"time": 0, "x": 1, "y": 2}
MAGIC = b"NTK1"


class TensorFormatError(ValueError):
    """Raised for malformed tensor files."""


def _mode_index(mode):
    if isinstance(mode, str):
        try:
            return MODES[mode]
        except KeyError:
            raise ValueError(f"unknown mode {mode!r}") from None
    if mode not in (0, 1, 2):
        raise ValueError(f"unknown mode {mode!r}")
    return int(mode)


def _cyclic(n):
    return (n, (n + 1) % 3, (n + 2) % 3)


def unfold(X, mode):
    """Mode-`mode` unfolding of a 3-way array (see module docstring)."""
    n = _mode_index(mode)
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError("expected a 3-way array")
    return np.transpose(X, _cyclic(n)).reshape(X.shape[n], -1)


def fold(M, mode, dims):
    """Inverse of :func:`unfold`."""
    n = _mode_index(mode)
    dims = tuple(int(d) for d in dims)
    M = np.asarray(M)
    perm = _cyclic(n)
    shape = tuple(dims[p] for p in perm)
    if M.shape != (shape[0], shape[1] * shape[2]):
        raise ValueError(f"matrix of shape {M.shape} does not fold to {dims} along mode {n}")
    return np.transpose(M.reshape(shape), np.argsort(perm))


def mode_product(X, U, mode):
    """``X x_mode U``: multiply every mode-`mode` fibre of `X` by `U`."""
    n = _mode_index(mode)
    X = np.asarray(X)
    if X.ndim != 3:
        raise ValueError("expected a 3-way array")
    K, M, N = X.shape
    if U.shape[1] != X.shape[n]:
        raise ValueError(f"matrix of shape {U.shape} does not act on mode {n} of size {X.shape[n]}")
    # one GEMM per mode, no transposed copies of X
    if n == 0:
        return (U @ X.reshape(K, M * N)).reshape(U.shape[0], M, N)
    if n == 2:
        return (X.reshape(K * M, N) @ U.T).reshape(K, M, U.shape[0])
    return np.matmul(U, X)


def multi_mode_product(X, mats, transpose=False):
    """Apply one matrix per mode (``None`` skips a mode)."""
    for n, U in enumerate(mats):
        if U is not None:
            X = mode_product(X, U.T if transpose else U, n)
    return X


@dataclass
class TuckerModel:
    """Core ``G`` (k, m, n) with factors ``W`` (K, k), ``H`` (M, m), ``V`` (N, n)."""

    core: np.ndarray
    W: np.ndarray
    H: np.ndarray
    V: np.ndarray

    @property
    def ranks(self):
        return self.core.shape

    @property
    def dims(self):
        return (self.W.shape[0], self.H.shape[0], self.V.shape[0])

    def copy(self):
        return TuckerModel(self.core.copy(), self.W.copy(), self.H.copy(), self.V.copy())

    def validate(self):
        k, m, n = self.core.shape
        if self.W.shape[1] != k or self.H.shape[1] != m or self.V.shape[1] != n:
            raise ValueError("core ranks do not match factor columns")

    def normalized(self):
        """Unit-norm factor columns, scale pushed into the core.

        All-zero columns are left as they are.
        """
        W, H, V = self.W.copy(), self.H.copy(), self.V.copy()
        G = self.core.copy()
        for axis, F in enumerate((W, H, V)):
            s = np.linalg.norm(F, axis=0)
            s[s == 0] = 1.0
            F /= s
            shape = [1, 1, 1]
            shape[axis] = -1
            G *= s.reshape(shape)
        return TuckerModel(G, W, H, V)


def reconstruct(model):
    """Tucker-3 synthesis ``sum_pqr G_pqr W_ip H_jq V_lr``."""
    model.validate()
    return multi_mode_product(model.core, (model.W, model.H, model.V))


def frobenius(X):
    return float(np.sqrt(np.vdot(X, X).real))


def relative_error(X, Xhat):
    """``||X - Xhat|| / ||X||`` in the Frobenius norm."""
    X = np.asarray(X, dtype=float)
    Xhat = np.asarray(Xhat, dtype=float)
    if X.shape != Xhat.shape:
        raise ValueError(f"shape mismatch {X.shape} vs {Xhat.shape}")
    nx = frobenius(X)
    if nx == 0.0:
        raise ValueError("reference tensor has zero norm")
    return frobenius(X - Xhat) / nx


def as_tensor3(X, nonnegative=False):
    """Validate and coerce to a C-contiguous float64 3-way array."""
    X = np.ascontiguousarray(X, dtype=np.float64)
    if X.ndim != 3:
        raise ValueError(f"expected a 3-way array, got ndim={X.ndim}")
    if not np.all(np.isfinite(X)):
        raise ValueError("tensor has non-finite entries")
    if nonnegative and np.any(X < 0):
        raise ValueError("tensor has negative entries")
    return X


# -- file formats ------------------------------------------------------------

def write_tensor(path, X):
    """Write the ``NTK1`` binary format: magic, three u64 dims, f64 data."""
    X = np.asarray(X, dtype="<f8")
    if X.ndim == 2:
        X = X[:, :, None]
    if X.ndim != 3:
        raise ValueError("only 2- or 3-way arrays can be written")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<3Q", *X.shape))
        fh.write(np.ascontiguousarray(X).tobytes())


def read_tensor(path):
    data = Path(path).read_bytes()
    if len(data) < 28 or data[:4] != MAGIC:
        raise TensorFormatError(f"{path}: missing NTK1 header")
    dims = struct.unpack("<3Q", data[4:28])
    count = dims[0] * dims[1] * dims[2]
    if len(data) != 28 + 8 * count:
        raise TensorFormatError(
            f"{path}: header dims {dims} need {8 * count} data bytes, found {len(data) - 28}")
    return np.frombuffer(data, dtype="<f8", offset=28).reshape(dims).astype(np.float64)


def write_tensor_csv(path, X):
    """One row per entry: ``i,j,l,value``."""
    X = np.asarray(X)
    idx = np.indices(X.shape).reshape(3, -1).T
    with open(path, "w") as fh:
        fh.write("i,j,l,value\n")
        for (i, j, l), v in zip(idx, X.ravel()):
            fh.write(f"{i},{j},{l},{float(v)!r}\n")
