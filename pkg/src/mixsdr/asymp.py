"""Asymptotic covariances of the estimated reductions and sequential rank tests."""
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import chi2

from . import matops
from .estim import assemble_b, assemble_c, fit_model, resolve_kind, svd_truncate, _restrict
from .matops import n_offdiag, n_vech
from .model import (ENUM_CAP, effective_gamma, f_matrix, ising_energy, ising_states,
                    natural_params, theta_sizes)

N_NULL_DRAWS = 10_000


# --------------------------------------------------------------------------
# Hessian of the log-partition function
# --------------------------------------------------------------------------

def _pairs(states, q):
    r, c = matops.vech_index(q)
    opos = matops.offdiag_positions(q)
    return states[:, r[opos]] * states[:, c[opos]]


def psi_hessian(eta, p, q, cap=ENUM_CAP):
    """Hessian of psi, i.e. the covariance of T(X, H) under ``eta``.

    Uses Var(T) = E[Var(T | H)] + Var(E[T | H]). Given H = h, X is normal
    with covariance Sigma and mean m_h = Sigma (eta1 + eta4bar h), so the
    first term only needs E[h], E[hh'] of the marginal Ising model; the
    second is an exact sum over the 2^q states.
    """
    gam, sigma, e1, e4bar = effective_gamma(eta, p, q)
    if q > cap:
        raise ValueError(f"enumeration limit exceeded: q={q} > {cap}")
    states = ising_states(q)
    if q:
        energy = ising_energy(states, gam)
        w = np.exp(energy - logsumexp(energy))
    else:
        w = np.ones(1)
    mp, k = n_vech(p), n_offdiag(q)
    dim = p + q + mp + p * q + k
    sx, sh = slice(0, p), slice(p, p + q)
    sc = slice(p + q, p + q + mp)
    sd = slice(p + q + mp, p + q + mp + p * q)
    se = slice(p + q + mp + p * q, dim)

    a = sigma @ e1
    proj = sigma @ e4bar
    means = a + states @ proj.T
    dc = -0.5 * matops.duplication_matrix(p).T if p else np.zeros((0, 0))

    # conditional means of T for every state
    mu = np.zeros((states.shape[0], dim))
    mu[:, sx] = means
    mu[:, sh] = states
    if p:
        second = sigma.reshape(1, -1, order="F") + np.einsum("ni,nj->nji", means, means).reshape(means.shape[0], -1)
        mu[:, sc] = second @ dc.T
        mu[:, sd] = np.einsum("ni,nj->nij", states, means).reshape(states.shape[0], -1)
    if k:
        mu[:, se] = _pairs(states, q)
    centered = mu - w @ mu
    hess = (centered * w[:, None]).T @ centered

    if p:
        eh = w @ states
        ehh = (states * w[:, None]).T @ states
        em = w @ means
        emm = (means * w[:, None]).T @ means
        emh = (means * w[:, None]).T @ states
        hess[sx, sx] += sigma
        xc = 2.0 * np.kron(em[None, :], sigma) @ dc.T
        hess[sx, sc] += xc
        hess[sc, sx] += xc.T
        xd = np.kron(eh[None, :], sigma)
        hess[sx, sd] += xd
        hess[sd, sx] += xd.T
        cc = 2.0 * dc @ (np.kron(sigma, sigma) + np.kron(sigma, emm) + np.kron(emm, sigma)) @ dc.T
        hess[sc, sc] += cc
        cd = 2.0 * dc @ np.kron(emh, sigma)
        hess[sc, sd] += cd
        hess[sd, sc] += cd.T
        hess[sd, sd] += np.kron(ehh, sigma)
    return 0.5 * (hess + hess.T)


# --------------------------------------------------------------------------
# V and V_rcl
# --------------------------------------------------------------------------

def information(F, nat, cap=ENUM_CAP):
    """(1/n) sum_i F_{y_i}' J(eta_{y_i}) F_{y_i}, grouping identical basis rows."""
    F = np.asarray(F, dtype=float).reshape(-1, nat.r)
    uniq, counts = np.unique(F, axis=0, return_counts=True)
    dim = nat.theta.size
    info = np.zeros((dim, dim))
    for f, c in zip(uniq, counts):
        fm = f_matrix(f, nat.p, nat.q)
        jac = psi_hessian(nat.eta(f), nat.p, nat.q, cap)
        info += c * (fm.T @ jac @ fm)
    info /= F.shape[0]
    return 0.5 * (info + info.T)


def estimate_V(data, fy, params, cap=ENUM_CAP, return_rank=False):
    """Moore-Penrose inverse of the average information; covariance of sqrt(n) theta-hat."""
    nat = natural_params(params)
    info = information(fy(data.y), nat, cap)
    v = matops.pinv(info)
    v = 0.5 * (v + v.T)
    if return_rank:
        return v, matops.numerical_rank(info)
    return v


def selector_M(p, q, r):
    """0/1 matrix picking (theta11, theta21, theta51) out of theta."""
    sizes = theta_sizes(p, q, r)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    idx = np.concatenate([starts[1] + np.arange(sizes[1]), starts[3] + np.arange(sizes[3]),
                          starts[7] + np.arange(sizes[7])])
    m = np.zeros((idx.size, sum(sizes)))
    m[np.arange(idx.size), idx] = 1.0
    return m


def stacking_W(p, q, r):
    """W with W (vec B11, vec B21, vec B51) = vec([B11; B21; B51])."""
    k = n_offdiag(q)
    m = p + q + k
    eye = np.eye(m)
    blocks = [np.kron(np.eye(r), eye[:, :p]), np.kron(np.eye(r), eye[:, p:p + q]),
              np.kron(np.eye(r), eye[:, p + q:])]
    return np.hstack(blocks)


def vrcl(V, p, q, r):
    """Covariance of sqrt(n) vec(b-hat): W M V M' W'."""
    V = np.asarray(V, dtype=float)
    dim = sum(theta_sizes(p, q, r))
    if V.shape != (dim, dim):
        raise ValueError(f"V has shape {V.shape}, expected ({dim}, {dim})")
    wm = stacking_W(p, q, r) @ selector_M(p, q, r)
    out = wm @ V @ wm.T
    return 0.5 * (out + out.T)


@dataclass(frozen=True)
class CovarianceEstimates:
    V: np.ndarray
    V_rcl: np.ndarray
    W: np.ndarray
    M: np.ndarray
    info_rank: int
    deficient: bool


def covariance_estimates(data, fy, params, cap=ENUM_CAP):
    V, rank = estimate_V(data, fy, params, cap, return_rank=True)
    p, q, r = params.p, params.q, params.r
    W, M = stacking_W(p, q, r), selector_M(p, q, r)
    return CovarianceEstimates(V, vrcl(V, p, q, r), W, M, rank, rank < V.shape[0])


def c_jacobians(params):
    """Jacobians of vec(c1) and vec(c2) with respect to theta.

    With B1 = unvec(theta11), E = unvec(theta4) and Delta = Omega^{-1},
    c1 = (B1; -E' Delta B1) and c2 holds unvec(theta21) + E' Delta B1 on the
    diagonal vech positions and unvec(theta51) on the others.
    """
    p, q, r = params.p, params.q, params.r
    nat = natural_params(params)
    blk = nat.blocks
    sizes = theta_sizes(p, q, r)
    starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
    dim = sum(sizes)
    b1 = matops.unvec(blk["t11"], p, r)
    e4 = matops.unvec(blk["t4"], p, q)
    delta = params.Delta
    db1 = delta @ b1
    ed = e4.T @ delta
    # derivative of vec(D1), D1 = -E' Delta B1 (q x r)
    jd = np.zeros((q * r, dim))
    jd[:, starts[1]:starts[1] + sizes[1]] = -np.kron(np.eye(r), ed)
    jd[:, starts[5]:starts[5] + sizes[5]] = -np.kron(db1.T, np.eye(q)) @ matops.commutation_matrix(p, q)
    jd[:, starts[4]:starts[4] + sizes[4]] = np.kron(db1.T, ed) @ matops.duplication_matrix(p)
    eye = np.eye(p + q)
    top = np.kron(np.eye(r), eye[:, :p])
    bot = np.kron(np.eye(r), eye[:, p:])
    jb1 = np.zeros((p * r, dim))
    jb1[:, starts[1]:starts[1] + sizes[1]] = np.eye(p * r)
    j1 = top @ jb1 + bot @ jd
    _, lmat, jmat = matops.selector_matrices(q)
    j21 = np.zeros((q * r, dim))
    j21[:, starts[3]:starts[3] + sizes[3]] = np.eye(q * r)
    j51 = np.zeros((n_offdiag(q) * r, dim))
    j51[:, starts[7]:starts[7] + sizes[7]] = np.eye(sizes[7])
    j2 = np.kron(np.eye(r), lmat.T) @ (j21 - jd) + np.kron(np.eye(r), jmat.T) @ j51
    return j1, j2


# --------------------------------------------------------------------------
# rank tests
# --------------------------------------------------------------------------

def _check_j(b, j):
    m, r = b.shape
    if not 0 <= j < min(m, r):
        raise ValueError(f"candidate rank j={j} must satisfy 0 <= j < {min(m, r)}")


def _residual_parts(b, V_rcl, j):
    parts = svd_truncate(b, j)
    kron = np.kron(parts.R0, parts.U0)
    q = kron.T @ V_rcl @ kron
    return parts, 0.5 * (q + q.T)


def test_rank_weighted(b, V_rcl, j, alpha, n, rng, draws=N_NULL_DRAWS):
    """Weighted chi-square test of rank(b) = j.

    Returns
    -------
    (statistic, critical value, reject)
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    _check_j(b, j)
    parts, q = _residual_parts(b, V_rcl, j)
    stat = n * float(np.sum(parts.singular_values[j:] ** 2))
    weights = np.clip(np.linalg.eigvalsh(q)[::-1], 0.0, None)
    weights = weights[weights > 0]
    if weights.size == 0:
        crit = 0.0
    else:
        sims = (rng.standard_normal((draws, weights.size)) ** 2) @ weights
        crit = float(np.quantile(sims, 1 - alpha))
    return stat, crit, bool(stat > crit)


def test_rank_wald(b, V_rcl, j, alpha, n):
    """Wald test of rank(b) = j.

    Returns
    -------
    (statistic, degrees of freedom, critical value, reject)
    """
    b = np.atleast_2d(np.asarray(b, dtype=float))
    _check_j(b, j)
    m, r = b.shape
    parts, q = _residual_parts(b, V_rcl, j)
    k0 = matops.vec(parts.K0)
    stat = n * float(k0 @ matops.pinv(q) @ k0)
    df = min(matops.numerical_rank(V_rcl), (r - j) * (m - j))
    crit = float(chi2.ppf(1 - alpha, df)) if df > 0 else 0.0
    return stat, df, crit, bool(df > 0 and stat > crit)


@dataclass(frozen=True)
class RankTestRow:
    j: int
    lambda1: float
    crit1: float
    reject1: bool
    lambda2: float
    df: int
    crit2: float
    reject2: bool


@dataclass(frozen=True)
class BranchResult:
    target: str
    rows: tuple
    d_wchisq: int
    d_wald: int
    all_reject_wchisq: bool
    all_reject_wald: bool


@dataclass(frozen=True)
class DimensionTestReport:
    kind: str
    test: str
    alpha: float
    seed: int
    n: int
    branches: dict
    info_deficient: bool = False

    @property
    def d(self):
        key = "d_wchisq" if self.test == "wchisq" else "d_wald"
        vals = tuple(getattr(self.branches[t], key) for t in self.branches)
        return vals[0] if len(vals) == 1 else vals

    def to_dict(self):
        return {
            "kind": self.kind, "test": self.test, "alpha": self.alpha, "seed": self.seed,
            "n": self.n, "d": self.d, "info_deficient": self.info_deficient,
            "branches": {
                name: {
                    "d_wchisq": br.d_wchisq, "d_wald": br.d_wald,
                    "all_reject_wchisq": br.all_reject_wchisq, "all_reject_wald": br.all_reject_wald,
                    "rows": [row.__dict__ for row in br.rows],
                } for name, br in self.branches.items()
            },
        }


def sequential_tests(b, cov, n, alpha, seed, target="b", tests=("wchisq", "wald")):
    """Run both tests for j = 0, ..., min(m, r) - 1 and pick the first non-rejection."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    top = min(b.shape)
    rows = []
    for j in range(top):
        if "wchisq" in tests:
            rng = np.random.default_rng([seed, j])
            l1, c1, r1 = test_rank_weighted(b, cov, j, alpha, n, rng)
        else:
            l1, c1, r1 = np.nan, np.nan, False
        if "wald" in tests:
            l2, df, c2, r2 = test_rank_wald(b, cov, j, alpha, n)
        else:
            l2, df, c2, r2 = np.nan, 0, np.nan, False
        rows.append(RankTestRow(j, l1, c1, r1, l2, int(df), c2, r2))

    def first(flag):
        for row in rows:
            if not getattr(row, flag):
                return row.j, False
        return top, True

    d1, all1 = first("reject1")
    d2, all2 = first("reject2")
    return BranchResult(target, tuple(rows), d1, d2, all1, all2)


def select_dimension(data, fy, kind="optimal", test="wchisq", alpha=0.05, seed=0,
                     fit=None, cap=ENUM_CAP, ridge=None):
    """Sequential dimension selection for a reduction of the given kind.

    For ``kind="suboptimal"`` the c1 and c2 blocks are tested separately and
    ``report.d`` is the pair (d1, d2).
    """
    if test not in ("wchisq", "wald"):
        raise ValueError(f"unknown test {test!r}")
    kind = resolve_kind(kind, data.p, data.q)
    sub = _restrict(data, kind)
    if fit is None:
        fit = fit_model(sub, fy, ridge)
    params = fit.params
    cov = covariance_estimates(sub, fy, params, cap)
    n = data.n
    if kind == "suboptimal":
        c1, c2 = assemble_c(fit.cont, fit.ising)
        j1, j2 = c_jacobians(params)
        v1 = j1 @ cov.V @ j1.T
        v2 = j2 @ cov.V @ j2.T
        branches = {
            "c1": sequential_tests(c1, 0.5 * (v1 + v1.T), n, alpha, seed, "c1"),
            "c2": sequential_tests(c2, 0.5 * (v2 + v2.T), n, alpha, seed + 1, "c2"),
        }
    else:
        b = assemble_b(fit.cont, fit.ising)
        branches = {"b": sequential_tests(b, cov.V_rcl, n, alpha, seed, "b")}
    return DimensionTestReport(kind, test, alpha, seed, n, branches, cov.deficient)


# --------------------------------------------------------------------------
# projection covariance
# --------------------------------------------------------------------------

def projection_covariance(b, V_rcl, d):
    """Plug-in covariance of sqrt(n) vec(P_alpha-hat - P_alpha) for the rank-d reduction."""
    b = np.atleast_2d(np.asarray(b, dtype=float))
    m, r = b.shape
    parts = svd_truncate(b, d)
    if d == 0:
        return np.zeros((m * m, m * m))
    if parts.singular_values[d - 1] <= 1e-12 * max(parts.singular_values[0], 1e-300):
        raise ValueError(f"rank of b below requested d={d}")
    b_minus = parts.R1 @ np.diag(1.0 / np.diag(parts.K1)) @ parts.U1.T
    qb = np.eye(m) - parts.U1 @ parts.U1.T
    g = (np.eye(m * m) + matops.commutation_matrix(m, m)) @ np.kron(b_minus.T, qb)
    out = g @ V_rcl @ g.T
    return 0.5 * (out + out.T)
