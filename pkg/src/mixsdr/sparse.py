"""Group-penalized factorization of the reduction coefficients.

The full-rank estimate ``b`` is written as ``C B`` with ``B`` held at its
truncated-SVD value; ``C`` is then shrunk by a mixed-norm penalty whose
groups map onto predictors, so that a zero group removes a predictor from
the reduction.  Continuous predictors own one row of ``C`` each.  A binary
predictor owns two groups, its main-effect row and the set of interaction
rows it takes part in; interaction rows are shared by two such groups.

Tuning of ``(lambda, gamma)`` is done by K-fold cross-validation of a
downstream predictor fitted on the reduced data.
"""

from dataclasses import dataclass, field

import numpy as np
from numba import njit
from scipy.special import logsumexp

from . import matops
from .estim import (
    assemble_c,
    fit_model,
    ising_theta,
    reduction_target,
    resolve_kind,
    statistic,
    svd_truncate,
    _restrict,
)
from .model import stat_w

PENALTY_KINDS = ("continuous-rows", "binary-overlapping", "mixed")
N_LAMBDA = 100
N_GAMMA = 11
N_FOLDS = 10
LAMBDA_MIN_RATIO = 1e-3
ZERO_TOL = 1e-8
SOLVER_TOL = 1e-8
SOLVER_MAX_ITER = 5000
PROX_TOL = 1e-13
PROX_MAX_SWEEPS = 5000
LOGIT_RIDGE = 1e-4

_TINY = np.finfo(float).tiny


# --------------------------------------------------------------------------
# penalty structure
# --------------------------------------------------------------------------

def _binary_groups(q, offset, layout):
    """Main-effect and interaction row groups of each binary variable.

    ``layout="b"`` orders the binary rows as (main effects, strict-lower
    interactions); ``layout="vech"`` uses the plain vech order.
    """
    rows, cols = matops.vech_index(q)
    if layout == "vech":
        where = {(int(i), int(j)): offset + k for k, (i, j) in enumerate(zip(rows, cols))}
    elif layout == "b":
        off = matops.offdiag_positions(q)
        where = {(j, j): offset + j for j in range(q)}
        where.update({(int(rows[k]), int(cols[k])): offset + q + t for t, k in enumerate(off)})
    else:
        raise ValueError(f"unknown binary layout {layout!r}")
    main, inter = [], []
    for j in range(q):
        main.append((where[(j, j)],))
        shared = sorted(where[(max(i, j), min(i, j))] for i in range(q) if i != j)
        inter.append(tuple(shared))
    return main, inter


@dataclass(frozen=True)
class PenaltySpec:
    """Groups of rows of ``C`` and their weights.

    Attributes
    ----------
    kind : {"continuous-rows", "binary-overlapping", "mixed"}
    m : int
        Number of rows of ``C``.
    groups : tuple of tuple of int
        Row indices of every group; a group covers all ``d`` columns.
    weights : tuple of float
    gamma : float or None
        Continuous/binary trade-off, only for ``"mixed"``.
    p, q : int
        Continuous rows and binary variables the groups were built for.
    layout : str
        Row layout of the binary block (``"b"`` or ``"vech"``).
    """

    kind: str
    m: int
    groups: tuple
    weights: tuple
    gamma: float = None
    p: int = 0
    q: int = 0
    layout: str = "b"

    def __post_init__(self):
        if len(self.groups) != len(self.weights):
            raise ValueError("one weight per group required")
        if any(w < 0 for w in self.weights):
            raise ValueError("penalty weights must be non-negative")
        for g in self.groups:
            if not g or min(g) < 0 or max(g) >= self.m:
                raise ValueError(f"group {g} outside rows 0..{self.m - 1}")

    def with_gamma(self, gamma):
        return penalty_spec(self.kind, self.p, self.q, gamma, self.layout)

    def value(self, C):
        """Penalty ``sum_g w_g ||C_g||``."""
        C = np.asarray(C, dtype=float).reshape(self.m, -1)
        return float(sum(w * np.linalg.norm(C[list(g)]) for g, w in zip(self.groups, self.weights)))


def penalty_spec(kind, p=0, q=0, gamma=0.5, layout="b"):
    """Build the group structure for a reduction with ``p`` continuous rows
    and ``q`` binary variables.

    ``"continuous-rows"`` puts every one of the ``p`` rows in its own group.
    ``"binary-overlapping"`` covers the ``q(q+1)/2`` binary rows with two
    groups per variable.  ``"mixed"`` stacks both, weighting the continuous
    groups by ``gamma`` and the binary ones by ``1 - gamma``.
    """
    if kind == "continuous-rows":
        return PenaltySpec(kind, p, tuple((j,) for j in range(p)), (1.0,) * p, None, p, 0, layout)
    if kind == "binary-overlapping":
        main, inter = _binary_groups(q, 0, layout)
        groups = tuple(main) + tuple(g for g in inter if g)
        return PenaltySpec(kind, matops.n_vech(q), groups, (1.0,) * len(groups), None, 0, q, layout)
    if kind == "mixed":
        if not 0.0 <= gamma <= 1.0:
            raise ValueError(f"gamma={gamma} outside [0, 1]")
        main, inter = _binary_groups(q, p, layout)
        bin_groups = tuple(main) + tuple(g for g in inter if g)
        groups = tuple((j,) for j in range(p)) + bin_groups
        weights = (float(gamma),) * p + (1.0 - float(gamma),) * len(bin_groups)
        return PenaltySpec(kind, p + matops.n_vech(q), groups, weights, float(gamma), p, q, layout)
    raise ValueError(f"unknown penalty kind {kind!r}")


class _Structure:
    """Split of the groups into those with private rows and the overlapping rest."""

    def __init__(self, m, groups):
        self.m = m
        self.groups = [np.asarray(g, dtype=int) for g in groups]
        count = np.zeros(m, dtype=int)
        for g in self.groups:
            count[g] += 1
        shared = count > 1
        self.overlap = [k for k, g in enumerate(self.groups) if shared[g].any()]
        self.disjoint = [k for k, g in enumerate(self.groups) if not shared[g].any()]
        self.member = np.zeros((len(self.groups), m))
        for k, g in enumerate(self.groups):
            self.member[k, g] = 1.0
        self.member_d = self.member[self.disjoint]
        sizes = [self.groups[k].size for k in self.overlap]
        self.sizes = np.array(sizes, dtype=np.int64)
        self.pad = np.zeros((len(sizes), max(sizes, default=0)), dtype=np.int64)
        for i, k in enumerate(self.overlap):
            self.pad[i, :sizes[i]] = self.groups[k]
        self.overlap_rows = (np.unique(np.concatenate([self.groups[k] for k in self.overlap]))
                             if self.overlap else np.zeros(0, dtype=int))

    def norms(self, C):
        """Group norms of a batch ``C`` of shape (B, m, d) -> (B, G)."""
        return np.sqrt(np.maximum((C ** 2).sum(-1) @ self.member.T, 0.0))

    def prox(self, Z, thr, state=None, sweeps=PROX_MAX_SWEEPS):
        """Proximal map of ``sum_g thr_g ||.||`` for a batch.

        ``thr`` has shape (B, G).  ``state`` carries the dual variables of
        the overlapping groups between calls (warm start).  Overlapping
        groups are handled by at most ``sweeps`` passes of cyclic block
        ascent on the dual; exact zeros are only set once it has converged.
        """
        out = Z.copy()
        if self.disjoint:
            nrm = np.sqrt((Z ** 2).sum(-1) @ self.member_d.T)
            t = thr[:, self.disjoint]
            with np.errstate(divide="ignore", invalid="ignore"):
                scale = np.where(nrm > t, 1.0 - t / np.where(nrm > 0, nrm, 1.0), 0.0)
            rows = self.member_d.sum(0) > 0
            out[:, rows] = Z[:, rows] * (scale @ self.member_d)[:, rows, None]
        if self.overlap:
            out, state = self._overlap_prox(Z, out, thr, state, sweeps)
        return out, state

    def _overlap_prox(self, Z, out, thr, state, sweeps):
        radius = np.ascontiguousarray(thr[:, self.overlap], dtype=float)
        nb, _, d = Z.shape
        if state is None:
            duals = np.zeros((nb, len(self.overlap), self.pad.shape[1], d))
        else:
            nrm = np.sqrt((state ** 2).sum((2, 3)))
            fac = np.where(nrm > radius, radius / np.where(nrm > 0, nrm, 1.0), 1.0)
            duals = state * fac[:, :, None, None]
        rows = self.overlap_rows
        res = np.zeros_like(Z)
        res[:, rows] = Z[:, rows]
        for k in range(len(self.overlap)):
            size = self.sizes[k]
            res[:, self.pad[k, :size]] -= duals[:, k, :size]
        scale = np.maximum(np.abs(Z[:, rows]).max(axis=(1, 2)), _TINY)
        converged = _dual_sweeps(res, duals, self.pad, self.sizes, radius, int(sweeps), PROX_TOL * scale)
        # a group whose dual lies strictly inside its ball is zero at the optimum;
        # so is one whose residual is below what the dual ascent can resolve
        vn = np.sqrt((duals ** 2).sum((2, 3)))
        inactive = vn < radius * (1.0 - 1e-9)
        for k in range(len(self.overlap)):
            part = res[:, self.pad[k, :self.sizes[k]]]
            inactive[:, k] |= np.abs(part).max(axis=(1, 2)) <= 10.0 * PROX_TOL * scale
        inactive &= converged[:, None]
        for k in range(len(self.overlap)):
            hit = np.flatnonzero(inactive[:, k])
            if hit.size:
                res[np.ix_(hit, self.pad[k, :self.sizes[k]])] = 0.0
        out[:, rows] = res[:, rows]
        return out, duals


@njit(cache=True)
def _dual_sweeps(res, duals, pad, sizes, radius, sweeps, tol):
    """Cyclic block ascent on the dual of an overlapping group prox.

    ``res`` holds ``z - sum_g v_g`` and is updated in place together with
    ``duals``; each batch element stops on its own once a full pass moves
    ``res`` by at most ``tol[b]``.
    """
    nb, ng = radius.shape
    d = res.shape[2]
    converged = np.zeros(nb, dtype=np.bool_)
    for b in range(nb):
        for _ in range(sweeps):
            delta = 0.0
            for g in range(ng):
                nrm2 = 0.0
                for k in range(sizes[g]):
                    r = pad[g, k]
                    for c in range(d):
                        u = res[b, r, c] + duals[b, g, k, c]
                        nrm2 += u * u
                nrm = np.sqrt(nrm2)
                fac = 1.0
                if nrm > radius[b, g]:
                    fac = radius[b, g] / nrm
                for k in range(sizes[g]):
                    r = pad[g, k]
                    for c in range(d):
                        u = res[b, r, c] + duals[b, g, k, c]
                        v = u * fac
                        new = u - v
                        step = abs(new - res[b, r, c])
                        if step > delta:
                            delta = step
                        res[b, r, c] = new
                        duals[b, g, k, c] = v
            if delta <= tol[b]:
                converged[b] = True
                break
    return converged


# --------------------------------------------------------------------------
# solver
# --------------------------------------------------------------------------

@dataclass
class SolveInfo:
    """Diagnostics of :func:`solve_penalized` (one entry per batch element)."""

    objective: np.ndarray
    history: list
    iterations: np.ndarray
    converged: np.ndarray


def _objective(b, B, C, lam_w, struct):
    resid = b[None] - C @ B
    return (resid ** 2).sum((1, 2)) + (struct.norms(C) * lam_w).sum(-1)


def _zero_certified(G, struct, lam_w):
    """Batch elements whose penalized rows are exactly zero at the optimum.

    The loss separates over rows, so zero is optimal for the penalized rows
    as soon as the gradient there lies in the dual ball.  The dual norm is
    homogeneous in the weights and is computed once per weight pattern.
    """
    ok = np.zeros(lam_w.shape[0], dtype=bool)
    top = lam_w.max(axis=1)
    cache = {}
    for k in np.flatnonzero(top > 0):
        w = lam_w[k] / top[k]
        key = tuple(np.round(w, 12))
        if key not in cache:
            cache[key] = _dual_norm(G, struct, w)
        # slack absorbs rounding in the weight normalization at lam = lambda_max
        ok[k] = cache[key] <= top[k] * (1.0 + 1e-12)
    return ok


def _solve_batch(b, B, lam_w, struct, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER, start=None):
    """Monotone FISTA for ``||b - C B||_F^2 + sum_g lam_w[., g] ||C_g||``.

    ``lam_w`` has shape (batch, groups).  Returns ``(C, SolveInfo)``.
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    lam_w = np.atleast_2d(np.asarray(lam_w, dtype=float))
    nb = lam_w.shape[0]
    m, d = b.shape[0], B.shape[0]
    bbt = B @ B.T
    rhs = b @ B.T
    lip = 2.0 * float(np.linalg.eigvalsh(bbt).max()) if d else 0.0
    if d == 0 or lip <= 0.0:
        C = np.zeros((nb, m, d))
        obj = _objective(b, B, C, lam_w, struct)
        return C, SolveInfo(obj, [obj], np.zeros(nb, dtype=int), np.ones(nb, dtype=bool))
    if start is None:
        start = rhs @ matops.pinv(bbt)
    x = np.broadcast_to(start, (nb, m, d)).copy()
    # above lambda_max: penalized rows vanish, the rest keep their least-squares value
    done = _zero_certified(2.0 * rhs, struct, lam_w)
    for k in np.flatnonzero(done):
        x[k, struct.member[lam_w[k] > 0].sum(0) > 0] = 0.0
    fx = _objective(b, B, x, lam_w, struct)
    y = x.copy()
    t = np.ones(nb)
    thr = lam_w / lip
    iters = np.zeros(nb, dtype=int)
    history = [fx.copy()]
    state = None
    for _ in range(max_iter):
        if done.all():
            break
        act = ~done
        grad = 2.0 * (y[act] @ bbt - rhs)
        sub_state = None if state is None else state[act]
        z, sub_state = struct.prox(y[act] - grad / lip, thr[act], sub_state)
        if sub_state is not None:
            if state is None:
                state = np.zeros((nb,) + sub_state.shape[1:])
            state[act] = sub_state
        fz = _objective(b, B, z, lam_w[act], struct)
        xa, fa = x[act], fx[act]
        accept = fz <= fa
        xn = np.where(accept[:, None, None], z, xa)
        fn = np.minimum(fz, fa)
        tn = (1.0 + np.sqrt(1.0 + 4.0 * t[act] ** 2)) / 2.0
        ya = y[act]
        y_new = xn + (t[act] / tn)[:, None, None] * (z - xn) + ((t[act] - 1.0) / tn)[:, None, None] * (xn - xa)
        rel = np.abs(fa - fn) / np.maximum(np.abs(fn), _TINY)
        move = np.sqrt(((z - ya) ** 2).sum((1, 2)))
        size = np.sqrt((xn ** 2).sum((1, 2)))
        conv = (rel <= tol) & (move <= np.sqrt(tol) * np.maximum(size, 1e-12))
        conv |= (fn == 0.0)
        x[act], fx[act], y[act], t[act] = xn, fn, y_new, tn
        iters[act] += 1
        idx = np.flatnonzero(act)
        done[idx[conv]] = True
        history.append(fx.copy())
    return x, SolveInfo(fx, history, iters, done)


def solve_penalized(b_hat, B_hat, lam, penalty, tol=SOLVER_TOL, max_iter=SOLVER_MAX_ITER,
                    full_output=False):
    """Minimize ``||vec(b) - (B' kron I) vec(C)||^2 + lam * Omega(C)`` over ``C``.

    Parameters
    ----------
    b_hat : (m, r) array
    B_hat : (d, r) array
        Right factor, normally ``K1 R1'`` from the rank-d SVD of ``b_hat``.
    lam : float or 1-D array
        A vector of penalty levels is solved as one batch.
    penalty : PenaltySpec
    full_output : bool
        Also return :class:`SolveInfo`.

    Returns
    -------
    C : (m, d) array, or (len(lam), m, d) for vector ``lam``.
    """
    lam_arr = np.atleast_1d(np.asarray(lam, dtype=float))
    if np.any(lam_arr < 0):
        raise ValueError("penalty level must be non-negative")
    b_hat = np.atleast_2d(np.asarray(b_hat, dtype=float))
    if b_hat.shape[0] != penalty.m:
        raise ValueError(f"b has {b_hat.shape[0]} rows, penalty expects {penalty.m}")
    struct = _Structure(penalty.m, penalty.groups)
    lam_w = lam_arr[:, None] * np.asarray(penalty.weights)[None, :]
    C, info = _solve_batch(b_hat, B_hat, lam_w, struct, tol, max_iter)
    if np.ndim(lam) == 0:
        C = C[0]
    return (C, info) if full_output else C


# --------------------------------------------------------------------------
# lambda_max
# --------------------------------------------------------------------------

def _dual_norm(G, struct, weights):
    """Smallest ``lam`` with ``G`` in ``lam`` times the unit ball of the dual penalty.

    Groups with zero weight and rows they alone cover are ignored.  The
    overlapping part is found by bracketing on feasibility of the dual
    projection, so the result errs slightly on the large side.
    """
    weights = np.asarray(weights, dtype=float)
    pos = weights > 0
    covered = np.zeros(struct.m, dtype=bool)
    for g, w in zip(struct.groups, weights):
        if w > 0:
            covered[g] = True
    G = np.where(covered[:, None], G, 0.0)
    best = 0.0
    for k in struct.disjoint:
        if pos[k]:
            best = max(best, float(np.linalg.norm(G[struct.groups[k]])) / weights[k])
    ov = [k for k in struct.overlap if pos[k]]
    if not ov:
        return best
    rows = np.unique(np.concatenate([struct.groups[k] for k in ov]))
    if np.abs(G[rows]).max() == 0.0:
        return best
    hi = max(float(np.linalg.norm(G[struct.groups[k]])) / weights[k] for k in ov)
    wsum = np.zeros(struct.m)
    for k in ov:
        wsum[struct.groups[k]] += weights[k]
    row_norm = np.linalg.norm(G, axis=1)
    lo = float(np.max(row_norm[rows] / np.where(wsum[rows] > 0, wsum[rows], np.inf)))
    lo = max(lo, 1e-12 * hi)
    sub = _Structure(struct.m, [struct.groups[k] for k in ov])
    wv = weights[ov]
    gmax = float(np.abs(G[rows]).max())
    for _ in range(3):
        grid = np.geomspace(lo, hi, 17)
        lam_w = np.zeros((grid.size, len(sub.groups)))
        lam_w[:] = grid[:, None] * wv[None, :]
        res, _ = sub.prox(np.broadcast_to(G, (grid.size,) + G.shape).copy(), lam_w)
        # the dual ascent leaves residuals at the prox tolerance near the boundary
        feasible = np.abs(res[:, rows]).max(axis=(1, 2)) <= 1e3 * PROX_TOL * gmax
        feasible[-1] = True
        first = int(np.argmax(feasible))
        if first == 0:
            hi = grid[0]
            break
        lo, hi = grid[first - 1], grid[first]
    return max(best, float(hi))


def lambda_max(b_hat, B_hat, penalty):
    """Smallest penalty level at which every penalized row of the solution is zero.

    Rows covered only by zero-weight groups are unpenalized and are left at
    their least-squares value; they do not enter the bound.
    """
    b_hat = np.atleast_2d(np.asarray(b_hat, dtype=float))
    B_hat = np.atleast_2d(np.asarray(B_hat, dtype=float))
    grad0 = 2.0 * b_hat @ B_hat.T
    return _dual_norm(grad0, _Structure(penalty.m, penalty.groups), penalty.weights)


# --------------------------------------------------------------------------
# selection helpers
# --------------------------------------------------------------------------

def _zero_tol(C, tol):
    if tol is not None:
        return tol
    norms = np.linalg.norm(np.atleast_2d(C), axis=1)
    return ZERO_TOL * (norms.max() if norms.size else 0.0)


def selected_variables(C, p, q, tol=None, layout="b"):
    """Indices of the predictors a penalized coefficient matrix keeps.

    ``X_j`` is kept when its row is nonzero.  ``H_j`` is kept when its
    main-effect row or any interaction row involving it is nonzero.  Row
    norms at or below ``tol`` (default ``1e-8`` times the largest row norm)
    count as zero.

    Returns
    -------
    (kept_x, kept_h) : tuple of int tuples
    """
    C = np.atleast_2d(np.asarray(C, dtype=float))
    if C.shape[0] != p + matops.n_vech(q):
        raise ValueError(f"C has {C.shape[0]} rows, expected {p + matops.n_vech(q)}")
    norms = np.linalg.norm(C, axis=1) if C.shape[1] else np.zeros(C.shape[0])
    tol = _zero_tol(C, tol)
    alive = norms > tol
    if not alive.any():
        return (), ()
    kept_x = tuple(int(j) for j in np.flatnonzero(alive[:p]))
    main, inter = _binary_groups(q, p, layout)
    kept_h = tuple(j for j in range(q) if alive[list(main[j] + inter[j])].any())
    return kept_x, kept_h


def orthonormalize(C, tol=1e-10):
    """Orthonormal basis of the column space of ``C`` (batched).

    Zero rows stay exactly zero; directions with relative singular value
    below ``tol`` are replaced by zero columns so the shape is kept.
    """
    C = np.asarray(C, dtype=float)
    single = C.ndim == 2
    Cb = C[None] if single else C
    if Cb.shape[-1] == 0:
        return C.copy()
    u, s, _ = np.linalg.svd(Cb, full_matrices=False)
    top = np.maximum(s[:, :1], _TINY)
    keep = (s > tol * top) & (s > 0)
    u = u * keep[:, None, :]
    zero_rows = ~np.any(Cb != 0, axis=-1)
    u[zero_rows] = 0.0
    return u[0] if single else u


# --------------------------------------------------------------------------
# downstream predictors
# --------------------------------------------------------------------------

def _standardize(Ztr, Zte):
    sd = Ztr.std(axis=1, keepdims=True)
    ok = sd > 1e-12 * np.maximum(np.abs(Ztr).max(axis=1, keepdims=True), _TINY)
    sd = np.where(ok, sd, 1.0)
    mu = Ztr.mean(axis=1, keepdims=True)
    return np.where(ok, (Ztr - mu) / sd, 0.0), np.where(ok, (Zte - mu) / sd, 0.0)


def _design(Z):
    return np.concatenate([np.ones(Z.shape[:-1] + (1,)), Z], axis=-1)


@njit(cache=True)
def _softmax_nll(X, labels, W, ridge, prob):
    """Mean negative log-likelihood plus ridge; fills ``prob`` (non-reference classes)."""
    n, k1 = X.shape
    K1 = W.shape[1]
    eta = np.zeros(K1)
    total = 0.0
    for i in range(n):
        top = 0.0
        for c in range(K1):
            v = 0.0
            for a in range(k1):
                v += X[i, a] * W[a, c]
            eta[c] = v
            if v > top:
                top = v
        z = np.exp(-top)
        for c in range(K1):
            z += np.exp(eta[c] - top)
        lse = top + np.log(z)
        for c in range(K1):
            prob[i, c] = np.exp(eta[c] - lse)
        total += lse
        if labels[i] > 0:
            total -= eta[labels[i] - 1]
    pen = 0.0
    for a in range(1, k1):
        for c in range(K1):
            pen += W[a, c] * W[a, c]
    return total / n + 0.5 * ridge * pen


@njit(cache=True)
def _multinomial_newton(X, labels, K1, ridge, max_iter, tol, chain):
    nb, n, k1 = X.shape
    P = k1 * K1
    out = np.zeros((nb, k1, K1))
    prob = np.empty((n, K1))
    trial = np.empty((n, K1))
    for b in range(nb):
        Xb = X[b]
        W = out[b - 1].copy() if chain[b] and b > 0 else np.zeros((k1, K1))
        f = _softmax_nll(Xb, labels, W, ridge, prob)
        for _ in range(max_iter):
            grad = np.zeros(P)
            hess = np.zeros((P, P))
            for i in range(n):
                for c in range(K1):
                    r = prob[i, c] - (1.0 if labels[i] == c + 1 else 0.0)
                    for a in range(k1):
                        grad[a * K1 + c] += Xb[i, a] * r
                for c in range(K1):
                    for e in range(c, K1):
                        w = prob[i, c] * ((1.0 if c == e else 0.0) - prob[i, e])
                        for a in range(k1):
                            xa = Xb[i, a] * w
                            for g in range(k1):
                                hess[a * K1 + c, g * K1 + e] += xa * Xb[i, g]
            for c in range(K1):
                for e in range(c + 1, K1):
                    for a in range(k1):
                        for g in range(k1):
                            hess[g * K1 + e, a * K1 + c] = hess[a * K1 + c, g * K1 + e]
            gmax = 0.0
            for a in range(k1):
                for c in range(K1):
                    j = a * K1 + c
                    grad[j] /= n
                    if a > 0:
                        grad[j] += ridge * W[a, c]
                    if abs(grad[j]) > gmax:
                        gmax = abs(grad[j])
            if gmax <= tol:
                break
            for j in range(P):
                for l in range(P):
                    hess[j, l] /= n
                hess[j, j] += 1e-12 + (ridge if j >= K1 else 0.0)
            step = np.linalg.solve(hess, grad)
            scale = 1.0
            moved = False
            for _ in range(40):
                cand = W.copy()
                for a in range(k1):
                    for c in range(K1):
                        cand[a, c] -= scale * step[a * K1 + c]
                fc = _softmax_nll(Xb, labels, cand, ridge, trial)
                if fc <= f + 1e-12 * abs(f):
                    W = cand
                    f = fc
                    prob[:, :] = trial
                    moved = True
                    break
                scale *= 0.5
            if not moved:
                break
        out[b] = W
    return out


def fit_multinomial(Z, labels, n_classes, ridge=LOGIT_RIDGE, max_iter=50, tol=1e-8, chain=None):
    """Batched ridge multinomial logistic regression by damped Newton steps.

    Parameters
    ----------
    Z : (B, n, k) array
        One feature matrix per batch element (no intercept column).
    labels : (n,) int array in ``0..n_classes-1``
        Class 0 is the reference category.
    chain : (B,) bool array, optional
        Where true, element ``b`` starts from the fit of element ``b-1``
        (useful along a path of slowly varying features).

    Returns
    -------
    W : (B, k+1, n_classes-1) array, intercept first.
    """
    X = np.ascontiguousarray(_design(np.asarray(Z, dtype=float)))
    labels = np.ascontiguousarray(labels, dtype=np.int64)
    chain = np.zeros(X.shape[0], dtype=np.bool_) if chain is None else np.asarray(chain, dtype=np.bool_)
    return _multinomial_newton(X, labels, int(n_classes) - 1, float(ridge), int(max_iter), float(tol),
                               chain)


def multinomial_proba(W, Z):
    """Fitted class probabilities, shape (B, n, n_classes)."""
    eta = _design(np.asarray(Z, dtype=float)) @ W
    full = np.concatenate([np.zeros(eta.shape[:-1] + (1,)), eta], axis=-1)
    return np.exp(full - logsumexp(full, axis=-1, keepdims=True))


def predict_multinomial(W, Z):
    """Class indices with the largest fitted probability."""
    eta = _design(np.asarray(Z, dtype=float)) @ W
    full = np.concatenate([np.zeros(eta.shape[:-1] + (1,)), eta], axis=-1)
    return full.argmax(-1)


def multinomial_deviance(W, Z, labels):
    """Mean negative log-likelihood of ``labels`` under the fitted model."""
    eta = _design(np.asarray(Z, dtype=float)) @ W
    full = np.concatenate([np.zeros(eta.shape[:-1] + (1,)), eta], axis=-1)
    logp = full - logsumexp(full, axis=-1, keepdims=True)
    return -np.take_along_axis(logp, labels[None, :, None], axis=-1)[..., 0].mean(-1)


def _prediction_error(Ztr, ytr, Zte, yte, fy, criterion="deviance", chain=None):
    """Held-out misclassification rate or deviance (categorical response), or MSE."""
    Ztr, Zte = _standardize(Ztr, Zte)
    if fy.kind == "categorical":
        labels = np.asarray(fy.labels)
        itr = np.searchsorted(labels, ytr)
        ite = np.searchsorted(labels, yte)
        W = fit_multinomial(Ztr, itr, labels.size, chain=chain)
        if criterion == "deviance":
            return multinomial_deviance(W, Zte, ite)
        return (predict_multinomial(W, Zte) != ite[None]).mean(-1)
    Xtr, Xte = _design(Ztr), _design(Zte)
    gram = np.einsum("bna,bnc->bac", Xtr, Xtr) + 1e-10 * np.eye(Xtr.shape[-1])
    coef = np.linalg.solve(gram, np.einsum("bna,n->ba", Xtr, np.asarray(ytr, dtype=float)))
    pred = np.einsum("bna,ba->bn", Xte, coef)
    return ((pred - np.asarray(yte, dtype=float)[None]) ** 2).mean(-1)


# --------------------------------------------------------------------------
# cross-validation
# --------------------------------------------------------------------------

@dataclass
class RegPath:
    """Regularization path over a ``(gamma, lambda)`` grid with CV errors.

    Arrays are indexed ``[gamma, lambda]``; lambda grids are ascending and
    end at the ``lambda_max`` of the full-sample fit for that gamma.
    ``gammas`` is ``[nan]`` for penalties without a trade-off weight.
    """

    kind: str
    penalty_kind: str
    d: int
    p: int
    q: int
    layout: str
    lambdas: np.ndarray
    gammas: np.ndarray
    solutions: np.ndarray
    zero_rows: np.ndarray
    cv_mean: np.ndarray
    cv_sd: np.ndarray
    best: tuple
    coef: np.ndarray
    basis: np.ndarray
    kept_x: tuple
    kept_h: tuple
    folds: int
    skipped_folds: tuple = ()
    lambda_max: np.ndarray = field(default=None)
    criterion: str = "deviance"

    @property
    def best_lambda(self):
        return float(self.lambdas[self.best])

    @property
    def best_gamma(self):
        g = self.gammas[self.best[0]]
        return None if np.isnan(g) else float(g)

    def to_dict(self, include_solutions=False):
        out = {
            "kind": self.kind, "penalty": self.penalty_kind, "d": self.d, "folds": self.folds,
            "criterion": self.criterion,
            "lambdas": self.lambdas.tolist(),
            "gammas": [None if np.isnan(g) else float(g) for g in self.gammas],
            "lambda_max": None if self.lambda_max is None else self.lambda_max.tolist(),
            "cv_mean": self.cv_mean.tolist(), "cv_sd": self.cv_sd.tolist(),
            "best_lambda": self.best_lambda, "best_gamma": self.best_gamma,
            "kept_x": list(self.kept_x), "kept_h": list(self.kept_h),
            "skipped_folds": list(self.skipped_folds),
            "coef": self.coef.tolist(), "basis": self.basis.tolist(),
            "zero_rows": self.zero_rows.astype(int).tolist(),
        }
        if include_solutions:
            out["solutions"] = self.solutions.tolist()
        return out


@dataclass
class SuboptimalPath:
    """Separate paths for the continuous-side and binary-side coefficients."""

    c1: RegPath
    c2: RegPath
    kept_x: tuple
    kept_h: tuple

    @property
    def best_lambda(self):
        return (self.c1.best_lambda, None if self.c2 is None else self.c2.best_lambda)

    @property
    def best_gamma(self):
        return None

    def to_dict(self, include_solutions=False):
        return {
            "kind": "suboptimal", "kept_x": list(self.kept_x), "kept_h": list(self.kept_h),
            "c1": self.c1.to_dict(include_solutions),
            "c2": None if self.c2 is None else self.c2.to_dict(include_solutions),
        }


@dataclass(frozen=True)
class _Branch:
    name: str
    penalty: PenaltySpec
    d: int
    target: object
    stat: object


def _branches(kind, data, d):
    p, q = data.p, data.q
    if kind == "pfc":
        return [_Branch("b", penalty_spec("continuous-rows", p), int(d),
                        lambda fit: reduction_target("pfc", fit), lambda X, H: statistic("pfc", X, H))]
    if kind == "binary":
        return [_Branch("b", penalty_spec("binary-overlapping", 0, q), int(d),
                        lambda fit: reduction_target("binary", fit), lambda X, H: statistic("binary", X, H))]
    if kind == "optimal":
        return [_Branch("b", penalty_spec("mixed", p, q, 0.5), int(d),
                        lambda fit: reduction_target("optimal", fit), lambda X, H: statistic("optimal", X, H))]
    d1, d2 = (d, d) if np.isscalar(d) else tuple(d)
    out = [_Branch("c1", penalty_spec("continuous-rows", p + q), int(d1),
                   lambda fit: assemble_c(fit.cont, fit.ising)[0],
                   lambda X, H: stat_w(X, H)[:, :p + q])]
    if d2 > 0:
        out.append(_Branch("c2", penalty_spec("binary-overlapping", 0, q, layout="vech"), int(d2),
                           lambda fit: assemble_c(fit.cont, fit.ising)[1],
                           lambda X, H: stat_w(X, H)[:, p + q:]))
    return out


def _factor(target, d):
    parts = svd_truncate(target, d)
    return parts.K1 @ parts.R1.T


def _grid_weights(branch, gammas, n_lambda, lambda_min_ratio, target, B):
    specs = [branch.penalty.with_gamma(g) if branch.penalty.kind == "mixed" else branch.penalty
             for g in gammas]
    lmax = np.array([lambda_max(target, B, s) for s in specs])
    ladder = np.geomspace(lambda_min_ratio, 1.0, n_lambda) if n_lambda > 1 else np.ones(1)
    lambdas = lmax[:, None] * ladder[None, :]
    lam_w = np.concatenate([lambdas[i][:, None] * np.asarray(s.weights)[None, :]
                            for i, s in enumerate(specs)])
    return lambdas, lmax, lam_w


def _pick_best(mean):
    """Minimal mean error; ties go to the largest lambda, then the smallest gamma."""
    best_val = np.nanmin(mean)
    hits = np.argwhere(mean <= best_val + 1e-12)
    order = sorted(hits.tolist(), key=lambda gl: (-gl[1], gl[0]))
    return tuple(int(v) for v in order[0])


def _branch_path(kind, branch, data, fy, full_fit, fold_fits, fold_ids, gammas, n_lambda,
                 lambda_min_ratio, tol, max_iter, criterion):
    struct = _Structure(branch.penalty.m, branch.penalty.groups)
    target = branch.target(full_fit)
    B = _factor(target, branch.d)
    lambdas, lmax, lam_w = _grid_weights(branch, gammas, n_lambda, lambda_min_ratio, target, B)
    ng, nl = lambdas.shape
    sols, _ = _solve_batch(target, B, lam_w, struct, tol, max_iter)
    stats = branch.stat(data.X, data.H)
    chain = np.tile(np.arange(nl) > 0, ng)
    errors = []
    for k, fit in enumerate(fold_fits):
        if fit is None:
            continue
        train = fold_ids != k
        tk = branch.target(fit)
        Ck, _ = _solve_batch(tk, _factor(tk, branch.d), lam_w, struct, tol, max_iter)
        # C and its orthonormal basis span the same space; C varies smoothly
        # along lambda, so each downstream fit starts from its neighbour's
        center = stats[train].mean(axis=0)
        Ztr = np.matmul(stats[train] - center, Ck)
        Zte = np.matmul(stats[~train] - center, Ck)
        errors.append(_prediction_error(Ztr, data.y[train], Zte, data.y[~train], fy, criterion, chain))
    errors = np.asarray(errors)
    mean = errors.mean(axis=0).reshape(ng, nl)
    sd = (errors.std(axis=0, ddof=1) if errors.shape[0] > 1 else np.zeros(ng * nl)).reshape(ng, nl)
    best = _pick_best(mean)
    sols = sols.reshape(ng, nl, *sols.shape[1:])
    coef = sols[best]
    tolv = _zero_tol(coef, None)
    zero_rows = np.linalg.norm(sols, axis=-1) <= np.maximum(
        ZERO_TOL * np.linalg.norm(sols, axis=-1).max(axis=-1, keepdims=True), 0.0)
    pen = branch.penalty
    if pen.kind == "mixed":
        kept_x, kept_h = selected_variables(coef, pen.p, pen.q, tolv)
    elif pen.kind == "binary-overlapping":
        kept_x, kept_h = selected_variables(coef, 0, pen.q, tolv, pen.layout)
    else:
        norms = np.linalg.norm(coef, axis=1)
        kept_x, kept_h = tuple(int(j) for j in np.flatnonzero(norms > tolv)), ()
    return RegPath(kind, pen.kind, branch.d, pen.p, pen.q, pen.layout, lambdas, np.asarray(gammas, dtype=float),
                   sols, zero_rows, mean, sd, best, coef, orthonormalize(coef), kept_x, kept_h,
                   len(fold_fits), tuple(k for k, f in enumerate(fold_fits) if f is None), lmax,
                   criterion if fy.kind == "categorical" else "mse")


def cv_select(data, fy, kind="optimal", d=1, n_lambda=N_LAMBDA, gammas=None, folds=N_FOLDS,
              rng=None, lambda_min_ratio=LAMBDA_MIN_RATIO, ridge=None, tol=SOLVER_TOL,
              max_iter=SOLVER_MAX_ITER, criterion="deviance"):
    """Choose the penalty level (and continuous/binary weight) by K-fold CV.

    Each fold refits the model on its training part, factors the fitted
    coefficient matrix by a rank-``d`` SVD, solves the penalized problem on
    the whole grid, reduces both parts with the orthonormalized solution and
    scores a downstream predictor on the held-out part.  The final
    coefficients are the full-sample solution at the chosen grid point.

    Parameters
    ----------
    data : Dataset
    fy : FyBasis
    kind : {"optimal", "suboptimal", "pfc", "binary"}
    d : int or (int, int)
    n_lambda : int
        Points on each log-spaced lambda grid ending at ``lambda_max``.
    gammas : sequence of float, optional
        Weights of the mixed penalty; 11 equispaced values in [0, 1] by default.
    folds : int
    rng : numpy Generator or seed
        Drives the fold assignment, the only random step.
    criterion : {"deviance", "misclassification"}
        Held-out loss of the downstream logistic model for a categorical
        response.  Misclassification is a step function of the fit and is
        nearly flat along the path whenever one class is well separated, so
        the smoother deviance is the default.  A continuous response always
        uses mean squared error.

    Returns
    -------
    RegPath, or SuboptimalPath for ``kind="suboptimal"``.
    Folds whose training part has a constant binary column are skipped and
    listed in ``skipped_folds``.
    """
    kind = resolve_kind(kind, data.p, data.q)
    if criterion not in ("deviance", "misclassification"):
        raise ValueError(f"unknown criterion {criterion!r}")
    if data.n < folds:
        raise ValueError(f"n={data.n} is smaller than the number of folds ({folds})")
    if folds < 2:
        raise ValueError("need at least two folds")
    rng = np.random.default_rng(rng)
    sub = _restrict(data, kind)
    fold_ids = rng.permutation(data.n) % folds
    full_fit = fit_model(sub, fy, ridge)
    warm = {"theta0": ising_theta(full_fit.ising)} if sub.q else {}
    fold_fits = []
    for k in range(folds):
        train = sub.subset(np.flatnonzero(fold_ids != k))
        hm = train.H.mean(axis=0) if train.q else np.zeros(0)
        if np.any((hm == 0) | (hm == 1)):
            fold_fits.append(None)
            continue
        fold_fits.append(fit_model(train, fy, ridge, **warm))
    if all(f is None for f in fold_fits):
        raise ValueError("every fold has a constant binary column")
    if gammas is None:
        gammas = np.linspace(0.0, 1.0, N_GAMMA)
    paths = {}
    for branch in _branches(kind, sub, d):
        g = np.asarray(gammas, dtype=float) if branch.penalty.kind == "mixed" else np.array([np.nan])
        paths[branch.name] = _branch_path(kind, branch, sub, fy, full_fit, fold_fits, fold_ids, g,
                                          n_lambda, lambda_min_ratio, tol, max_iter, criterion)
    if kind != "suboptimal":
        return paths["b"]
    c1, c2 = paths["c1"], paths.get("c2")
    p = data.p
    kept_x = tuple(j for j in c1.kept_x if j < p)
    kept_h = {j - p for j in c1.kept_x if j >= p}
    if c2 is not None:
        kept_h |= set(c2.kept_h)
    return SuboptimalPath(c1, c2, kept_x, tuple(sorted(kept_h)))
