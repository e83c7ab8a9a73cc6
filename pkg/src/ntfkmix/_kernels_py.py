"""Pure-Python/numpy versions of the compiled kernels.

Used when the extension module is not built, or when ``NTFKMIX_PURE=1``.
"""
from __future__ import annotations

import numpy as np
import scipy.sparse as sp


def _color_blocks(indptr, indices, data, order, color_ptr):
    A = sp.csr_matrix((data, indices, indptr), shape=(len(indptr) - 1,) * 2)
    A = A - sp.diags(A.diagonal())
    blocks = []
    for c in range(len(color_ptr) - 1):
        rows = np.asarray(order[color_ptr[c]:color_ptr[c + 1]])
        blocks.append((rows, A[rows].tocsr()))
    return blocks


def pgs_solve(indptr, indices, data, diag, order, color_ptr, rhs, lo, hi, x,
              tol, maxiter):
    # Rows within one color block are mutually uncoupled, so updating a block
    # at once is the same sweep as visiting its rows one by one.
    blocks = _color_blocks(indptr, indices, data, order, color_ptr)
    it = 0
    dmax = 0.0
    while it < maxiter:
        it += 1
        dmax = 0.0
        for rows, Aoff in blocks:
            xnew = np.clip((rhs[rows] - Aoff @ x) / diag[rows], lo[rows], hi[rows])
            d = np.abs(xnew - x[rows])
            if d.size:
                dmax = max(dmax, float(d.max()))
            x[rows] = xnew
        if dmax <= tol:
            break
    return it, dmax


def core_cd(G, grad, A, B, C, lam):
    k, m, n = G.shape
    for p in range(k):
        for q in range(m):
            for r in range(n):
                d = A[p, p] * B[q, q] * C[r, r]
                if d <= 0.0:
                    continue
                gnew = G[p, q, r] - (grad[p, q, r] + lam) / d
                if gnew < 0.0:
                    gnew = 0.0
                delta = gnew - G[p, q, r]
                if delta == 0.0:
                    continue
                G[p, q, r] = gnew
                grad += ((delta * A[:, p])[:, None] * B[:, q])[:, :, None] * C[:, r]


def hals_columns(F, P, Q, passes):
    for _ in range(passes):
        for p in range(F.shape[1]):
            qpp = Q[p, p]
            if qpp <= 0.0:
                continue
            F[:, p] = np.maximum(0.0, F[:, p] + (P[:, p] - F @ Q[:, p]) / qpp)
