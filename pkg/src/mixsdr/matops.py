"""vec/vech operator matrices and small spectral helpers.

Conventions used throughout the package:

* ``vec`` stacks columns (Fortran order).
* ``vech`` stacks the lower triangle column by column, diagonal included:
  ``(g11, g21, ..., gq1, g22, ..., gq2, ..., gqq)``.
"""
from functools import lru_cache

import numpy as np

DEFAULT_PINV_TOL = 1e-10


def vec(a):
    return np.asarray(a).reshape(-1, order="F")


def unvec(v, rows, cols):
    return np.asarray(v).reshape(rows, cols, order="F")


@lru_cache(maxsize=64)
def _vech_pairs(q):
    rows, cols = [], []
    for j in range(q):
        for i in range(j, q):
            rows.append(i)
            cols.append(j)
    return np.array(rows, dtype=int), np.array(cols, dtype=int)


def vech_index(q):
    """Row and column indices of the vech coordinates of a ``q x q`` matrix."""
    r, c = _vech_pairs(q)
    return r.copy(), c.copy()


def diag_positions(q):
    """Positions of the diagonal entries inside ``vech``."""
    r, c = _vech_pairs(q)
    return np.flatnonzero(r == c)


def offdiag_positions(q):
    """Positions of the strict-lower entries inside ``vech``."""
    r, c = _vech_pairs(q)
    return np.flatnonzero(r != c)


def vech(g):
    g = np.asarray(g)
    r, c = _vech_pairs(g.shape[0])
    return g[r, c]


def unvech(v, q=None):
    """Symmetric matrix whose lower triangle is ``v``."""
    v = np.asarray(v, dtype=float)
    if q is None:
        q = int(round((np.sqrt(8 * v.size + 1) - 1) / 2))
    r, c = _vech_pairs(q)
    g = np.zeros((q, q))
    g[r, c] = v
    g[c, r] = v
    return g


def n_vech(q):
    return q * (q + 1) // 2


def n_offdiag(q):
    return q * (q - 1) // 2


def duplication_matrix(q):
    """``D_q`` with ``D_q @ vech(G) == vec(G)`` for symmetric ``G``."""
    r, c = _vech_pairs(q)
    d = np.zeros((q * q, r.size))
    k = np.arange(r.size)
    d[r + c * q, k] = 1.0
    d[c + r * q, k] = 1.0
    return d


def selector_matrices(q):
    """Return ``(C, L, J)`` for dimension ``q``.

    ``C`` maps vec of a symmetric matrix to its vech, averaging the two
    copies of each off-diagonal entry. ``L`` picks the diagonal coordinates
    of a vech and ``J`` the strict-lower ones.
    """
    r, c = _vech_pairs(q)
    m = r.size
    cmat = np.zeros((m, q * q))
    for k in range(m):
        if r[k] == c[k]:
            cmat[k, r[k] + c[k] * q] = 1.0
        else:
            cmat[k, r[k] + c[k] * q] = 0.5
            cmat[k, c[k] + r[k] * q] = 0.5
    dpos = diag_positions(q)
    opos = offdiag_positions(q)
    lmat = np.zeros((q, m))
    lmat[np.arange(q), dpos] = 1.0
    jmat = np.zeros((opos.size, m))
    jmat[np.arange(opos.size), opos] = 1.0
    return cmat, lmat, jmat


def commutation_matrix(p, m):
    """``K_pm`` with ``K_pm @ vec(A) == vec(A.T)`` for ``A`` of shape (p, m)."""
    k = np.zeros((p * m, p * m))
    i, j = np.meshgrid(np.arange(p), np.arange(m), indexing="ij")
    k[(j + i * m).ravel(), (i + j * p).ravel()] = 1.0
    return k


def pinv(mat, tol=DEFAULT_PINV_TOL):
    """Moore-Penrose inverse; singular values below ``tol * s_max`` are dropped."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return np.zeros(mat.shape[::-1])
    return np.linalg.pinv(mat, rcond=tol)


def numerical_rank(mat, tol=DEFAULT_PINV_TOL):
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return 0
    s = np.linalg.svd(mat, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > tol * s[0]))


def orthonormal_basis(mat, tol=DEFAULT_PINV_TOL):
    """Orthonormal basis of the column space of ``mat`` (rank detected by SVD)."""
    mat = np.atleast_2d(np.asarray(mat, dtype=float))
    if mat.size == 0:
        return np.zeros((mat.shape[0], 0))
    u, s, _ = np.linalg.svd(mat, full_matrices=False)
    if s.size == 0 or s[0] == 0:
        return np.zeros((mat.shape[0], 0))
    return u[:, s > tol * s[0]]


def projection(b, tol=DEFAULT_PINV_TOL):
    """Orthogonal projection onto the column space of ``b``."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    u = orthonormal_basis(b, tol)
    return u @ u.T


def subspace_distance(a, b):
    """Spectral norm of ``P_a - P_b`` computed from principal angles."""
    qa = orthonormal_basis(a)
    qb = orthonormal_basis(b)
    if qa.shape[1] != qb.shape[1]:
        return float(np.linalg.norm(qa @ qa.T - qb @ qb.T, 2))
    if qa.shape[1] == 0:
        return 0.0
    s = np.linalg.svd(qa.T @ qb, compute_uv=False)
    return float(np.sqrt(max(0.0, 1.0 - min(1.0, s.min()) ** 2)))
