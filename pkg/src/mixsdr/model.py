"""Inverse-regression model for mixed continuous/binary predictors.

``X | (H, Y=y) ~ N(mu_x + A f_y + beta (H - mu_h), Delta)`` and ``H | Y=y``
follows an Ising model whose natural parameter matrix satisfies
``vech(Gamma_y) = tau0 + tau f_y``. Together they form a natural exponential
family in the sufficient statistic ``T(x, h)`` with natural parameter
``eta_y = F_y theta``.
"""
from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
from scipy.special import logsumexp

from . import matops
from .matops import n_offdiag, n_vech, offdiag_positions, diag_positions

ENUM_CAP = 20
GIBBS_BURN_IN = 1000
GIBBS_THIN = 10
_CHUNK = 1 << 15


class DegenerateResponseError(ValueError):
    pass


class EnumerationLimitError(ValueError):
    pass


# --------------------------------------------------------------------------
# data containers
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Dataset:
    """Response vector plus continuous (n x p) and binary (n x q) predictors."""

    y: np.ndarray
    X: np.ndarray
    H: np.ndarray
    x_names: tuple = ()
    h_names: tuple = ()
    response_name: str = "y"

    def __post_init__(self):
        y = np.asarray(self.y)
        n = y.shape[0]
        X = np.asarray(self.X, dtype=float).reshape(n, -1)
        H = np.asarray(self.H, dtype=float).reshape(n, -1)
        if H.size and not np.all((H == 0) | (H == 1)):
            raise ValueError("binary predictors must contain only 0/1 values")
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "H", H)
        if not self.x_names:
            object.__setattr__(self, "x_names", tuple(f"x{j + 1}" for j in range(X.shape[1])))
        if not self.h_names:
            object.__setattr__(self, "h_names", tuple(f"h{j + 1}" for j in range(H.shape[1])))

    @property
    def n(self):
        return self.y.shape[0]

    @property
    def p(self):
        return self.X.shape[1]

    @property
    def q(self):
        return self.H.shape[1]

    def subset(self, idx):
        idx = np.asarray(idx)
        return Dataset(self.y[idx], self.X[idx], self.H[idx], self.x_names,
                       self.h_names, self.response_name)


@dataclass(frozen=True)
class FyBasis:
    """Known function f_Y, centered with the training-sample mean.

    ``kind`` is ``"categorical"`` (indicators of every sorted label except
    the first), ``"polynomial"`` (powers 1..degree) or ``"custom"``.
    """

    kind: str
    r: int
    mean: np.ndarray
    labels: tuple = ()
    degree: int = 0
    func: Optional[Callable] = field(default=None, compare=False)

    def raw(self, y):
        y = np.asarray(y)
        if self.kind == "categorical":
            out = np.zeros((y.shape[0], self.r))
            for k, lab in enumerate(self.labels[1:]):
                out[:, k] = (y == lab)
            return out
        if self.kind == "polynomial":
            yf = y.astype(float)
            return np.column_stack([yf ** k for k in range(1, self.degree + 1)])
        return np.asarray(self.func(y), dtype=float).reshape(y.shape[0], self.r)

    def __call__(self, y):
        return self.raw(y) - self.mean


def build_fy(y, kind="categorical", degree=2, func=None):
    """Construct the centered basis f_Y from training responses."""
    y = np.asarray(y)
    if kind == "categorical":
        labels = tuple(np.unique(y).tolist())
        if len(labels) < 2:
            raise DegenerateResponseError("degenerate response: fewer than two categories")
        basis = FyBasis("categorical", len(labels) - 1, np.zeros(len(labels) - 1), labels=labels)
    elif kind == "polynomial":
        if np.unique(y).size < 2:
            raise DegenerateResponseError("degenerate response: constant values")
        basis = FyBasis("polynomial", int(degree), np.zeros(int(degree)), degree=int(degree))
    elif kind == "custom":
        if func is None:
            raise ValueError("custom basis needs a callable")
        r = np.asarray(func(y[:1])).reshape(1, -1).shape[1]
        basis = FyBasis("custom", r, np.zeros(r), func=func)
    else:
        raise ValueError(f"unknown f_Y kind {kind!r}")
    mean = basis.raw(y).mean(axis=0)
    return FyBasis(basis.kind, basis.r, mean, basis.labels, basis.degree, basis.func)


# --------------------------------------------------------------------------
# sufficient statistics
# --------------------------------------------------------------------------

def _check_binary(h):
    if h.size and not np.all((h == 0) | (h == 1)):
        raise ValueError("binary statistic requires entries in {0, 1}")


def _pair_products(H, positions):
    q = H.shape[1]
    r, c = matops.vech_index(q)
    return H[:, r[positions]] * H[:, c[positions]]


def stat_s(h):
    """(h, J vech(h h^T)): main effects and pairwise interactions."""
    H = np.atleast_2d(np.asarray(h, dtype=float))
    _check_binary(H)
    out = np.hstack([H, _pair_products(H, offdiag_positions(H.shape[1]))])
    return out[0] if np.ndim(h) == 1 else out


def stat_t(x, h):
    """(x, h, J vech(h h^T)), the statistic of the optimal reduction."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    H = np.atleast_2d(np.asarray(h, dtype=float))
    _check_binary(H)
    if H.shape[0] != X.shape[0]:
        H = H.reshape(X.shape[0], -1)
    out = np.hstack([X, H, _pair_products(H, offdiag_positions(H.shape[1]))])
    return out[0] if np.ndim(x) == 1 else out


def stat_w(x, h):
    """(x, h, vech(h h^T)), the statistic of the sub-optimal reduction."""
    X = np.atleast_2d(np.asarray(x, dtype=float))
    H = np.atleast_2d(np.asarray(h, dtype=float))
    _check_binary(H)
    if H.shape[0] != X.shape[0]:
        H = H.reshape(X.shape[0], -1)
    q = H.shape[1]
    out = np.hstack([X, H, _pair_products(H, np.arange(n_vech(q)))])
    return out[0] if np.ndim(x) == 1 else out


def stat_T(x, h):
    """Full exponential-family statistic (x, h, -1/2 D'vec(xx'), vec(xh'), J vech(hh'))."""
    x = np.asarray(x, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    p = x.size
    d_p = matops.duplication_matrix(p)
    quad = -0.5 * d_p.T @ np.kron(x, x)
    inter = np.kron(h, x)
    pairs = h[matops.vech_index(h.size)[0][offdiag_positions(h.size)]] * \
        h[matops.vech_index(h.size)[1][offdiag_positions(h.size)]]
    return np.concatenate([x, h, quad, inter, pairs])


# --------------------------------------------------------------------------
# Ising model
# --------------------------------------------------------------------------

def _check_cap(q, cap):
    if q > cap:
        raise EnumerationLimitError(f"enumeration limit exceeded: q={q} > {cap}")


def ising_states(q, start=0, stop=None):
    """Binary states ``start..stop-1`` in bit order (h_1 is the lowest bit)."""
    stop = 1 << q if stop is None else stop
    idx = np.arange(start, stop, dtype=np.int64)
    return ((idx[:, None] >> np.arange(q)) & 1).astype(float)


def ising_energy(states, gamma):
    """vech(hh')' vech(Gamma) for each row of ``states``."""
    gamma = np.asarray(gamma, dtype=float)
    low = np.tril(gamma, -1)
    return states @ np.diag(gamma) + np.einsum("ni,ij,nj->n", states, low, states)


def _chunks(q):
    total = 1 << q
    for start in range(0, total, _CHUNK):
        yield start, min(total, start + _CHUNK)


def ising_log_partition(gamma, cap=ENUM_CAP):
    """log G(Gamma) by exact enumeration of the 2^q states."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    q = gamma.shape[0] if gamma.size else 0
    if q == 0:
        return 0.0
    _check_cap(q, cap)
    parts = [logsumexp(ising_energy(ising_states(q, a, b), gamma)) for a, b in _chunks(q)]
    return float(logsumexp(parts))


def ising_pmf(h, gamma, cap=ENUM_CAP):
    """P(H = h) under the Ising model with symmetric parameter matrix ``gamma``."""
    h = np.atleast_2d(np.asarray(h, dtype=float))
    _check_binary(h)
    logg = ising_log_partition(gamma, cap)
    p = np.exp(ising_energy(h, gamma) - logg)
    return p[0] if p.size == 1 else p


def ising_table(gamma, cap=ENUM_CAP):
    """All states with their probabilities (small q only)."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    q = gamma.shape[0]
    _check_cap(q, cap)
    states = ising_states(q)
    e = ising_energy(states, gamma)
    return states, np.exp(e - logsumexp(e))


def ising_moments(gamma, cap=ENUM_CAP):
    """E[h] and E[h h'] under the Ising model."""
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    q = gamma.shape[0]
    _check_cap(q, cap)
    logg = ising_log_partition(gamma, cap)
    m1 = np.zeros(q)
    m2 = np.zeros((q, q))
    for a, b in _chunks(q):
        s = ising_states(q, a, b)
        w = np.exp(ising_energy(s, gamma) - logg)
        m1 += w @ s
        m2 += (s * w[:, None]).T @ s
    return m1, m2


def ising_sample(gamma, rng, n, cap=ENUM_CAP):
    """Draw ``n`` i.i.d. binary vectors.

    Exact inverse-CDF sampling over the enumerated table when ``q <= cap``,
    otherwise a systematic-scan Gibbs sampler.
    """
    gamma = np.atleast_2d(np.asarray(gamma, dtype=float))
    q = gamma.shape[0]
    if q <= cap:
        states, prob = ising_table(gamma, cap)
        cdf = np.cumsum(prob)
        cdf[-1] = 1.0
        idx = np.searchsorted(cdf, rng.random(n), side="right")
        return states[np.minimum(idx, cdf.size - 1)]
    return _gibbs(gamma, rng, n)


def _gibbs(gamma, rng, n):
    q = gamma.shape[0]
    sym = np.tril(gamma, -1)
    sym = sym + sym.T
    diag = np.diag(gamma)
    h = (rng.random(q) < 0.5).astype(float)
    out = np.empty((n, q))
    total = GIBBS_BURN_IN + n * GIBBS_THIN
    for sweep in range(total):
        for j in range(q):
            logit = diag[j] + sym[j] @ h
            h[j] = float(rng.random() < 1.0 / (1.0 + np.exp(-logit)))
        k = sweep - GIBBS_BURN_IN
        if k >= 0 and (k + 1) % GIBBS_THIN == 0:
            out[(k + 1) // GIBBS_THIN - 1] = h
    return out


# --------------------------------------------------------------------------
# parameters
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MixedModelParams:
    """All inverse-regression parameters of the mixed model."""

    Delta: np.ndarray
    mu_x: np.ndarray
    mu_h: np.ndarray
    A: np.ndarray
    beta: np.ndarray
    tau0: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        p = np.atleast_1d(self.mu_x).size
        q = np.atleast_1d(self.mu_h).size
        r = np.asarray(self.tau).shape[1] if np.ndim(self.tau) == 2 else np.asarray(self.A).reshape(p, -1).shape[1]
        object.__setattr__(self, "Delta", np.asarray(self.Delta, dtype=float).reshape(p, p))
        object.__setattr__(self, "mu_x", np.asarray(self.mu_x, dtype=float).reshape(p))
        object.__setattr__(self, "mu_h", np.asarray(self.mu_h, dtype=float).reshape(q))
        object.__setattr__(self, "A", np.asarray(self.A, dtype=float).reshape(p, r))
        object.__setattr__(self, "beta", np.asarray(self.beta, dtype=float).reshape(p, q))
        object.__setattr__(self, "tau0", np.asarray(self.tau0, dtype=float).reshape(n_vech(q)))
        object.__setattr__(self, "tau", np.asarray(self.tau, dtype=float).reshape(n_vech(q), r))

    @property
    def p(self):
        return self.mu_x.size

    @property
    def q(self):
        return self.mu_h.size

    @property
    def r(self):
        return self.A.shape[1]

    def gamma(self, f):
        """Ising parameter matrix Gamma_y for a centered basis value ``f``."""
        return matops.unvech(self.tau0 + self.tau @ np.asarray(f, dtype=float), self.q)


def eta_sizes(p, q):
    return [p, q, n_vech(p), p * q, n_offdiag(q)]


def theta_sizes(p, q, r):
    k = n_offdiag(q)
    return [p, p * r, q, q * r, n_vech(p), p * q, k, r * k]


def _split(v, sizes):
    return np.split(np.asarray(v, dtype=float), np.cumsum(sizes)[:-1])


@dataclass(frozen=True)
class NaturalParams:
    """Blocks of theta; ``eta(f)`` gives eta_y = F_y theta."""

    p: int
    q: int
    r: int
    theta: np.ndarray

    @property
    def blocks(self):
        names = ["t10", "t11", "t20", "t21", "t3", "t4", "t50", "t51"]
        return dict(zip(names, _split(self.theta, theta_sizes(self.p, self.q, self.r))))

    def eta(self, f):
        f = np.asarray(f, dtype=float).reshape(self.r)
        b = self.blocks
        k = n_offdiag(self.q)
        eta1 = b["t10"] + matops.unvec(b["t11"], self.p, self.r) @ f
        eta2 = b["t20"] + matops.unvec(b["t21"], self.q, self.r) @ f
        eta5 = b["t50"] + matops.unvec(b["t51"], k, self.r) @ f
        return np.concatenate([eta1, eta2, b["t3"], b["t4"], eta5])

    def F(self, f):
        return f_matrix(f, self.p, self.q)

    def a_matrix(self):
        """Stack (unvec t11; unvec t21; 0; 0; unvec t51) spanning eta_y - E(eta_y)."""
        b = self.blocks
        p, q, r = self.p, self.q, self.r
        k = n_offdiag(q)
        return np.vstack([matops.unvec(b["t11"], p, r), matops.unvec(b["t21"], q, r),
                          np.zeros((n_vech(p) + p * q, r)), matops.unvec(b["t51"], k, r)])


def f_matrix(f, p, q):
    """Block matrix F_y mapping theta to eta_y."""
    f = np.asarray(f, dtype=float).ravel()
    r = f.size
    k = n_offdiag(q)
    mp = n_vech(p)
    rows = sum(eta_sizes(p, q))
    cols = sum(theta_sizes(p, q, r))
    out = np.zeros((rows, cols))
    ft = f[None, :]
    ri = ci = 0
    for dim, has_f in ((p, True), (q, True), (mp, False), (p * q, False), (k, True)):
        out[ri:ri + dim, ci:ci + dim] = np.eye(dim)
        ci += dim
        if has_f:
            out[ri:ri + dim, ci:ci + dim * r] = np.kron(ft, np.eye(dim))
            ci += dim * r
        ri += dim
    return out


def natural_params(params):
    """Map (Delta, mu_x, mu_h, A, beta, tau0, tau) to the theta blocks."""
    p, q = params.p, params.q
    if p:
        try:
            chol = np.linalg.cholesky(params.Delta)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("Delta is singular or not positive definite") from exc
        omega = np.linalg.inv(params.Delta)
        omega = 0.5 * (omega + omega.T)
        del chol
    else:
        omega = np.zeros((0, 0))
    beta, A = params.beta, params.A
    dpos, opos = diag_positions(q), offdiag_positions(q)
    btob = beta.T @ omega @ beta
    t10 = omega @ params.mu_x - omega @ beta @ params.mu_h
    t11 = matops.vec(omega @ A)
    t20 = (-beta.T @ omega @ params.mu_x + btob @ params.mu_h
           + params.tau0[dpos] - 0.5 * np.diag(btob))
    t21 = matops.vec(params.tau[dpos] - beta.T @ omega @ A)
    t3 = matops.vech(omega)
    t4 = matops.vec(omega @ beta)
    low = matops.vech(btob)[opos]
    t50 = -low + params.tau0[opos]
    t51 = matops.vec(params.tau[opos])
    theta = np.concatenate([t10, t11, t20, t21, t3, t4, t50, t51])
    return NaturalParams(p, q, params.r, theta)


# --------------------------------------------------------------------------
# log-partition and densities
# --------------------------------------------------------------------------

def split_eta(eta, p, q):
    return _split(eta, eta_sizes(p, q))


def effective_gamma(eta, p, q):
    """Ising parameter matrix of the marginal of H implied by ``eta``.

    Returns ``(Gamma, Sigma, eta1, eta4bar)`` with ``Sigma`` the conditional
    covariance of X given H.
    """
    e1, e2, e3, e4, e5 = split_eta(eta, p, q)
    if p:
        omega = matops.unvech(e3, p)
        try:
            chol = np.linalg.cholesky(omega)
        except np.linalg.LinAlgError as exc:
            raise np.linalg.LinAlgError("eta3 block is not positive definite") from exc
        cinv = np.linalg.inv(chol)
        sigma = cinv.T @ cinv
    else:
        sigma = np.zeros((0, 0))
    e4bar = matops.unvec(e4, p, q)
    quad = e4bar.T @ sigma @ e4bar
    main = e2 + e4bar.T @ sigma @ e1 + 0.5 * np.diag(quad)
    gam = np.zeros((q, q))
    if q:
        r_idx, c_idx = matops.vech_index(q)
        opos = offdiag_positions(q)
        inter = e5 + quad[r_idx[opos], c_idx[opos]]
        gam[r_idx[opos], c_idx[opos]] = inter
        gam[c_idx[opos], r_idx[opos]] = inter
        gam[np.arange(q), np.arange(q)] = main
    return gam, sigma, e1, e4bar


def psi(eta, p, q, cap=ENUM_CAP):
    """Log-partition function psi(eta) = psi1 + psi2 + psi3."""
    gam, sigma, e1, _ = effective_gamma(eta, p, q)
    psi1 = psi3 = 0.0
    if p:
        sign, logdet = np.linalg.slogdet(sigma)
        psi1 = 0.5 * logdet
        psi3 = 0.5 * e1 @ sigma @ e1
    psi2 = ising_log_partition(gam, cap) if q else 0.0
    return float(psi1 + psi2 + psi3)


def log_density_factorized(x, h, f, params, cap=ENUM_CAP):
    """log f(x | h, y) + log P(h | y)."""
    x = np.asarray(x, dtype=float).ravel()
    h = np.asarray(h, dtype=float).ravel()
    f = np.asarray(f, dtype=float).ravel()
    out = 0.0
    if params.p:
        mean = params.mu_x + params.A @ f + params.beta @ (h - params.mu_h)
        chol = np.linalg.cholesky(params.Delta)
        z = np.linalg.solve(chol, x - mean)
        out += (-0.5 * params.p * np.log(2 * np.pi)
                - np.sum(np.log(np.diag(chol))) - 0.5 * z @ z)
    if params.q:
        gam = params.gamma(f)
        out += float(ising_energy(h[None, :], gam)[0]) - ising_log_partition(gam, cap)
    return float(out)


def log_density_canonical(x, h, f, params, cap=ENUM_CAP):
    """log h(x, h) + T(x, h)' eta_y - psi(eta_y)."""
    nat = natural_params(params)
    eta = nat.eta(f)
    t = stat_T(x, h)
    return float(-0.5 * params.p * np.log(2 * np.pi) + t @ eta - psi(eta, params.p, params.q, cap))


def log_density(x, h, f, params, cap=ENUM_CAP):
    """Both evaluations of log f(x, h | y): (factorized, canonical)."""
    return (log_density_factorized(x, h, f, params, cap),
            log_density_canonical(x, h, f, params, cap))


def sample_mixed(params, F, rng, cap=ENUM_CAP):
    """Draw (X, H) given rows of centered basis values ``F``.

    H is sampled per distinct row of ``F`` from its Ising model, then X from
    its conditional normal.
    """
    F = np.asarray(F, dtype=float).reshape(-1, params.r)
    n = F.shape[0]
    H = np.zeros((n, params.q))
    if params.q:
        uniq, inv = np.unique(F, axis=0, return_inverse=True)
        inv = inv.ravel()
        for k, f in enumerate(uniq):
            idx = np.flatnonzero(inv == k)
            H[idx] = ising_sample(params.gamma(f), rng, idx.size, cap)
    X = np.zeros((n, params.p))
    if params.p:
        chol = np.linalg.cholesky(params.Delta)
        mean = params.mu_x + F @ params.A.T + (H - params.mu_h) @ params.beta.T
        X = mean + rng.standard_normal((n, params.p)) @ chol.T
    return X, H
