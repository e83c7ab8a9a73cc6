# cython: boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled inner loops.

Both kernels mirror :mod:`ntfkmix._kernels_py` exactly: same visiting order,
same update formulas. Only the loop implementation differs.
"""
import numpy as np

cimport numpy as cnp
from libc.math cimport fabs

cnp.import_array()


def pgs_solve(const cnp.int32_t[::1] indptr,
              const cnp.int32_t[::1] indices,
              const double[::1] data,
              const double[::1] diag,
              const cnp.int32_t[::1] order,
              const cnp.int32_t[::1] color_ptr,
              const double[::1] rhs,
              const double[::1] lo,
              const double[::1] hi,
              double[::1] x,
              double tol,
              long maxiter):
    """Projected Gauss-Seidel sweeps in the given row order, in place on `x`.

    Returns ``(sweeps, last_max_update)``.
    """
    cdef Py_ssize_t n = x.shape[0]
    cdef Py_ssize_t nrow = order.shape[0]
    cdef Py_ssize_t k, i, p
    cdef long it = 0
    cdef double s, xi, xnew, delta, dmax = 0.0

    while it < maxiter:
        it += 1
        dmax = 0.0
        for k in range(nrow):
            i = order[k]
            s = rhs[i]
            for p in range(indptr[i], indptr[i + 1]):
                if indices[p] != i:
                    s -= data[p] * x[indices[p]]
            xnew = s / diag[i]
            if xnew < lo[i]:
                xnew = lo[i]
            elif xnew > hi[i]:
                xnew = hi[i]
            delta = fabs(xnew - x[i])
            if delta > dmax:
                dmax = delta
            x[i] = xnew
        if dmax <= tol:
            break
    return it, dmax


def core_cd(double[:, :, ::1] G,
            double[:, :, ::1] grad,
            const double[:, ::1] A,
            const double[:, ::1] B,
            const double[:, ::1] C,
            double lam):
    """One cyclic pass of exact non-negative coordinate descent over the core.

    Minimises ``0.5*<G, G x1 A x2 B x3 C> - <G, T> + lam*sum(G)`` entry by
    entry, where `grad` holds ``G x1 A x2 B x3 C - T`` on entry and is kept
    consistent on exit.
    """
    cdef Py_ssize_t k = G.shape[0], m = G.shape[1], n = G.shape[2]
    cdef Py_ssize_t p, q, r, a, b, c
    cdef double d, gnew, delta, da, dab

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
                for a in range(k):
                    da = delta * A[a, p]
                    if da == 0.0:
                        continue
                    for b in range(m):
                        dab = da * B[b, q]
                        for c in range(n):
                            grad[a, b, c] += dab * C[c, r]


def hals_columns(double[:, ::1] F,
                 const double[:, ::1] P,
                 const double[:, ::1] Q,
                 long passes):
    """HALS passes over the columns of `F`, in place.

    Column ``p`` becomes ``max(0, F[:, p] + (P[:, p] - F @ Q[:, p]) / Q[p, p])``.
    Columns with a non-positive ``Q[p, p]`` are left alone.
    """
    cdef Py_ssize_t I = F.shape[0], r = F.shape[1]
    cdef Py_ssize_t it, p, i, q
    cdef double qpp, s

    for it in range(passes):
        for p in range(r):
            qpp = Q[p, p]
            if qpp <= 0.0:
                continue
            for i in range(I):
                s = P[i, p]
                for q in range(r):
                    s -= F[i, q] * Q[q, p]
                s = F[i, p] + s / qpp
                F[i, p] = s if s > 0.0 else 0.0
