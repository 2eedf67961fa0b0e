"""Numba kernels for simplicial sparse Cholesky on a fixed symbolic pattern.

All matrices are CSC with sorted row indices. ``L`` patterns always store the
diagonal as the first entry of every column.
"""

import numpy as np
from numba import njit


@njit(cache=True, nogil=True)
def etree(n, Ap, Ai):
    """Elimination tree of a symmetric matrix given by its upper triangle (CSC)."""
    parent = np.full(n, -1, dtype=np.int64)
    ancestor = np.full(n, -1, dtype=np.int64)
    for k in range(n):
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i != -1 and i < k:
                inext = ancestor[i]
                ancestor[i] = k
                if inext == -1:
                    parent[i] = k
                i = inext
    return parent


@njit(cache=True, nogil=True)
def symbolic_pattern(n, Ap, Ai, parent):
    """Column pattern of L from row subtrees of the elimination tree.

    ``Ap, Ai`` hold the upper triangle (row <= col) in CSC form.
    Returns ``Lp, Li`` with the diagonal first in each column.
    """
    mark = np.full(n, -1, dtype=np.int64)
    counts = np.ones(n, dtype=np.int64)
    # first pass: counts
    for k in range(n):
        mark[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i < k and mark[i] != k:
                counts[i] += 1
                mark[i] = k
                i = parent[i]
                if i == -1:
                    break
    Lp = np.zeros(n + 1, dtype=np.int64)
    for j in range(n):
        Lp[j + 1] = Lp[j] + counts[j]
    Li = np.empty(Lp[n], dtype=np.int64)
    fill = Lp[:-1].copy()
    for j in range(n):
        Li[fill[j]] = j
        fill[j] += 1
    mark[:] = -1
    # rows are visited in increasing k, so each column ends up sorted
    for k in range(n):
        mark[k] = k
        for p in range(Ap[k], Ap[k + 1]):
            i = Ai[p]
            while i < k and mark[i] != k:
                Li[fill[i]] = k
                fill[i] += 1
                mark[i] = k
                i = parent[i]
                if i == -1:
                    break
    return Lp, Li


@njit(cache=True, nogil=True)
def row_pattern(n, Lp, Li):
    """Transpose the strictly-lower pattern: for each row, the columns it touches."""
    counts = np.zeros(n, dtype=np.int64)
    for j in range(n):
        for q in range(Lp[j] + 1, Lp[j + 1]):
            counts[Li[q]] += 1
    Rp = np.zeros(n + 1, dtype=np.int64)
    for i in range(n):
        Rp[i + 1] = Rp[i] + counts[i]
    Rj = np.empty(Rp[n], dtype=np.int64)
    fill = Rp[:-1].copy()
    for j in range(n):
        for q in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[q]
            Rj[fill[i]] = j
            fill[i] += 1
    return Rp, Rj


@njit(cache=True, nogil=True)
def numeric_cholesky(n, Ap, Ai, Ax, Lp, Li, Rp, Rj, rel_tol):
    """Left-looking Cholesky of the lower triangle ``(Ap, Ai, Ax)``.

    Returns ``(Lx, bad)`` where ``bad`` is -1 on success, otherwise the
    column whose pivot was not safely positive.
    """
    Lx = np.zeros(Lp[n], dtype=np.float64)
    work = np.zeros(n, dtype=np.float64)
    cursor = Lp[:-1] + 1
    for j in range(n):
        diag_in = 0.0
        for p in range(Ap[j], Ap[j + 1]):
            i = Ai[p]
            work[i] = Ax[p]
            if i == j:
                diag_in = Ax[p]
        for r in range(Rp[j], Rp[j + 1]):
            k = Rj[r]
            p = cursor[k]
            ljk = Lx[p]
            for q in range(p, Lp[k + 1]):
                work[Li[q]] -= Lx[q] * ljk
            cursor[k] = p + 1
        d = work[j]
        if not (d > rel_tol * abs(diag_in)) or not np.isfinite(d):
            return Lx, j
        ljj = np.sqrt(d)
        Lx[Lp[j]] = ljj
        work[j] = 0.0
        for q in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[q]
            Lx[q] = work[i] / ljj
            work[i] = 0.0
    return Lx, -1


@njit(cache=True, nogil=True)
def forward_solve(n, Lp, Li, Lx, B):
    """Solve L Y = B in place; B has shape (n, m)."""
    m = B.shape[1]
    for j in range(n):
        ljj = Lx[Lp[j]]
        for c in range(m):
            B[j, c] /= ljj
        for q in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[q]
            v = Lx[q]
            for c in range(m):
                B[i, c] -= v * B[j, c]
    return B


@njit(cache=True, nogil=True)
def backward_solve(n, Lp, Li, Lx, B):
    """Solve L^T X = B in place; B has shape (n, m)."""
    m = B.shape[1]
    for j in range(n - 1, -1, -1):
        for q in range(Lp[j] + 1, Lp[j + 1]):
            i = Li[q]
            v = Lx[q]
            for c in range(m):
                B[j, c] -= v * B[i, c]
        ljj = Lx[Lp[j]]
        for c in range(m):
            B[j, c] /= ljj
    return B


@njit(cache=True, nogil=True)
def selected_inverse(n, Lp, Li, Lx):
    """Entries of (L L^T)^{-1} on the pattern of L (Takahashi recursions).

    For column i with off-diagonal rows J, the entries S[J, i] equal
    -S[J, J] @ L[J, i] / L[i, i]; S[J, J] lives on the pattern of the
    columns in J because that pattern is closed under elimination.
    """
    S = np.zeros(Lp[n], dtype=np.float64)
    where = np.full(n, -1, dtype=np.int64)
    y = np.zeros(n, dtype=np.float64)
    for i in range(n - 1, -1, -1):
        start = Lp[i]
        end = Lp[i + 1]
        lii = Lx[start]
        for q in range(start + 1, end):
            where[Li[q]] = q
        for kk in range(start + 1, end):
            k = Li[kk]
            lk = Lx[kk]
            # diagonal of column k
            y[k] += S[Lp[k]] * lk
            for p in range(Lp[k] + 1, Lp[k + 1]):
                j = Li[p]
                q = where[j]
                if q >= 0:
                    s = S[p]
                    y[j] += s * lk
                    y[k] += s * Lx[q]
        acc = 0.0
        for q in range(start + 1, end):
            j = Li[q]
            S[q] = -y[j] / lii
            acc += Lx[q] * S[q]
            y[j] = 0.0
            where[j] = -1
        S[start] = 1.0 / (lii * lii) - acc / lii
    return S
