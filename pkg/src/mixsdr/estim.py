"""Maximum-likelihood fitting and truncated-SVD reduction estimators."""
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve
from scipy.special import expit

from . import matops
from .matops import n_vech, diag_positions, offdiag_positions
from .model import Dataset, FyBasis, MixedModelParams, stat_s, stat_t, stat_w

KINDS = ("optimal", "suboptimal", "pfc", "binary")


class RankDeficientError(ValueError):
    pass


class SeparationError(ValueError):
    pass


class DimensionError(ValueError):
    pass


# --------------------------------------------------------------------------
# continuous block
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ContinuousFit:
    """OLS fit of centered X on centered (f_y, H)."""

    A: np.ndarray
    beta: np.ndarray
    Delta: np.ndarray
    residuals: np.ndarray
    x_mean: np.ndarray
    h_mean: np.ndarray
    f_mean: np.ndarray


def fit_continuous(data, fy, ridge=None):
    """Multivariate normal linear model of X on (f_y, H).

    Parameters
    ----------
    data : Dataset
    fy : FyBasis
    ridge : float or bool, optional
        ``True`` adds ``1e-8 * trace(L'L) / k`` to the normal equations; a
        float sets the ridge explicitly. Off by default.
    """
    f = fy(data.y)
    x_mean = data.X.mean(axis=0)
    h_mean = data.H.mean(axis=0)
    xc = data.X - x_mean
    design = np.hstack([f - f.mean(axis=0), data.H - h_mean])
    k = design.shape[1]
    gram = design.T @ design
    if ridge is None or ridge is False:
        if matops.numerical_rank(design, 1e-10) < k:
            raise RankDeficientError("rank-deficient design: regressors (f_y, H) are collinear")
        eps = 0.0
    else:
        eps = 1e-8 * np.trace(gram) / max(k, 1) if ridge is True else float(ridge)
    coef = np.linalg.solve(gram + eps * np.eye(k), design.T @ xc)
    resid = xc - design @ coef
    delta = resid.T @ resid / data.n
    delta = 0.5 * (delta + delta.T)
    return ContinuousFit(coef[:fy.r].T.copy(), coef[fy.r:].T.copy(), delta, resid,
                         x_mean, h_mean, f.mean(axis=0))


# --------------------------------------------------------------------------
# binary block: joint pseudo-likelihood
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class IsingFit:
    tau0: np.ndarray
    tau: np.ndarray
    converged: bool
    loglik: float
    iterations: int
    grad_norm: float


def pseudo_design(H, F):
    """Stacked design for the q conditional log-odds.

    Row ``i*q + j`` holds the coefficients of ``vec([tau0, tau])`` in the
    log-odds of H_ij given the other binaries.
    """
    H = np.asarray(H, dtype=float)
    n, q = H.shape
    m = n_vech(q)
    g = np.hstack([np.ones((n, 1)), np.asarray(F, dtype=float).reshape(n, -1)])
    rows, cols = matops.vech_index(q)
    s = np.zeros((n, q, m))
    for k in range(m):
        i, j = rows[k], cols[k]
        if i == j:
            s[:, i, k] = 1.0
        else:
            s[:, i, k] = H[:, j]
            s[:, j, k] = H[:, i]
    z = np.einsum("njk,nc->njck", s, g).reshape(n * q, g.shape[1] * m)
    return z


def pseudo_loglik(theta, H, F, design=None):
    """Average joint pseudo-log-likelihood and its gradient in ``vec([tau0, tau])``."""
    H = np.asarray(H, dtype=float)
    z = pseudo_design(H, F) if design is None else design
    eps = z @ theta
    resp = H.reshape(-1)
    ll = (resp @ eps - np.logaddexp(0.0, eps).sum()) / H.shape[0]
    grad = z.T @ (resp - expit(eps)) / H.shape[0]
    return float(ll), grad


def pseudo_scores(theta, H, F):
    """Per-observation gradients of the pseudo-log-likelihood (n x dim)."""
    H = np.asarray(H, dtype=float)
    n, q = H.shape
    z = pseudo_design(H, F)
    prob = expit(z @ theta)
    return (z * (H.reshape(-1) - prob)[:, None]).reshape(n, q, -1).sum(axis=1), z, prob


def pseudo_covariance(theta, H, F):
    """Sandwich covariance of the pseudo-likelihood estimate ``vec([tau0, tau])``."""
    scores, z, prob = pseudo_scores(theta, H, F)
    n = scores.shape[0]
    info = (z * (prob * (1 - prob))[:, None]).T @ z / n
    meat = scores.T @ scores / n
    inv = matops.pinv(info)
    return inv @ meat @ inv / n


def fit_ising(data, fy, max_iter=500, tol=1e-6, theta0=None):
    """Maximize the joint pseudo-likelihood of H given f_y.

    Newton's method with step halving; a gradient-ascent step replaces the
    Newton step when the latter is not an ascent direction.
    """
    H = data.H
    n, q = H.shape
    r = fy.r
    m = n_vech(q)
    if q == 0:
        return IsingFit(np.zeros(0), np.zeros((0, r)), True, 0.0, 0, 0.0)
    means = H.mean(axis=0)
    for j in np.flatnonzero((means == 0) | (means == 1)):
        raise SeparationError(f"binary column {data.h_names[j]!r} is constant")
    F = fy(data.y)
    z = pseudo_design(H, F)
    theta = np.zeros(z.shape[1]) if theta0 is None else np.array(theta0, dtype=float)
    ll, grad = pseudo_loglik(theta, H, F, z)
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(grad)) <= tol:
            converged = True
            it -= 1
            break
        prob = expit(z @ theta)
        info = (z * (prob * (1 - prob))[:, None]).T @ z / n
        try:
            step = np.linalg.solve(info + 1e-12 * np.eye(info.shape[0]), grad)
            if not np.all(np.isfinite(step)) or step @ grad <= 0:
                raise np.linalg.LinAlgError
        except np.linalg.LinAlgError:
            step = grad
        t = 1.0
        while True:
            cand = theta + t * step
            ll_c, grad_c = pseudo_loglik(cand, H, F, z)
            if ll_c >= ll - 1e-14 * abs(ll) or t < 1e-10:
                break
            t *= 0.5
        if t < 1e-10 and ll_c < ll:
            break
        theta, ll, grad = cand, ll_c, grad_c
    else:
        converged = np.max(np.abs(grad)) <= tol
    coef = matops.unvec(theta, m, r + 1)
    return IsingFit(coef[:, 0].copy(), coef[:, 1:].copy(), bool(converged), float(ll),
                    int(it), float(np.max(np.abs(grad))))


def ising_theta(ising):
    """``vec([tau0, tau])``, the pseudo-likelihood parameter vector."""
    return matops.vec(np.column_stack([ising.tau0, ising.tau]))


# --------------------------------------------------------------------------
# assembly
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class MixedFit:
    """Both fitted blocks plus the implied parameter record."""

    cont: ContinuousFit
    ising: IsingFit
    params: MixedModelParams


def fit_model(data, fy, ridge=None, **ising_kw):
    cont = fit_continuous(data, fy, ridge)
    ising = fit_ising(data, fy, **ising_kw)
    params = MixedModelParams(cont.Delta, cont.x_mean, cont.h_mean, cont.A, cont.beta,
                              ising.tau0, ising.tau)
    return MixedFit(cont, ising, params)


def _omega_a(cont):
    p = cont.A.shape[0]
    if p == 0:
        return np.zeros((0, cont.A.shape[1]))
    try:
        chol = np.linalg.cholesky(cont.Delta)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular Delta estimate") from exc
    return cho_solve((chol, True), cont.A)


def assemble_b(cont, ising):
    """(Delta^-1 A; L tau - beta' Delta^-1 A; J tau)."""
    q = cont.beta.shape[1]
    oa = _omega_a(cont)
    tau = ising.tau
    top = oa
    mid = tau[diag_positions(q)] - cont.beta.T @ oa
    low = tau[offdiag_positions(q)]
    return np.vstack([top, mid, low])


def assemble_c(cont, ising):
    """(c1, c2) = ((Delta^-1 A; -beta' Delta^-1 A), tau)."""
    oa = _omega_a(cont)
    return np.vstack([oa, -cont.beta.T @ oa]), ising.tau.copy()


@dataclass(frozen=True)
class SVDParts:
    U1: np.ndarray
    K1: np.ndarray
    R1: np.ndarray
    U0: np.ndarray
    K0: np.ndarray
    R0: np.ndarray
    singular_values: np.ndarray


def svd_full(M):
    """Full SVD with the largest-magnitude entry of each left vector positive."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    u, s, vt = np.linalg.svd(M, full_matrices=True)
    v = vt.T
    for k in range(u.shape[1]):
        if u[np.argmax(np.abs(u[:, k])), k] < 0:
            u[:, k] *= -1
            if k < v.shape[1]:
                v[:, k] *= -1
    return u, s, v


def svd_truncate(M, d):
    """Split the SVD of ``M`` into the leading ``d`` and trailing parts."""
    M = np.atleast_2d(np.asarray(M, dtype=float))
    m, r = M.shape
    if not 0 <= d <= min(m, r):
        raise DimensionError(f"rank {d} outside [0, {min(m, r)}]")
    u, s, v = svd_full(M)
    k1 = np.diag(s[:d])
    k0 = np.zeros((m - d, r - d))
    rest = s[d:]
    k0[np.arange(rest.size), np.arange(rest.size)] = rest
    return SVDParts(u[:, :d], k1, v[:, :d], u[:, d:], k0, v[:, d:], s)


# --------------------------------------------------------------------------
# reductions
# --------------------------------------------------------------------------

def statistic(kind, X, H):
    """Rows of the statistic a reduction of ``kind`` acts on."""
    X = np.atleast_2d(np.asarray(X, dtype=float))
    H = np.atleast_2d(np.asarray(H, dtype=float))
    if kind == "optimal":
        return stat_t(X, H)
    if kind == "suboptimal":
        return stat_w(X, H)
    if kind == "pfc":
        return X
    if kind == "binary":
        return stat_s(H)
    raise ValueError(f"unknown reduction kind {kind!r}")


@dataclass(frozen=True)
class ReductionModel:
    """Estimated reduction ``basis' (stat - center)``."""

    kind: str
    basis: np.ndarray
    d: tuple
    singular_values: np.ndarray
    center: np.ndarray
    p: int
    q: int
    fy: Optional[FyBasis] = None
    fit: Optional[MixedFit] = field(default=None, compare=False, repr=False)
    b: Optional[np.ndarray] = field(default=None, compare=False, repr=False)

    @property
    def dim(self):
        return self.basis.shape[1]

    def to_dict(self):
        return {
            "kind": self.kind,
            "p": self.p,
            "q": self.q,
            "d": list(self.d),
            "basis": self.basis.tolist(),
            "center": self.center.tolist(),
            "singular_values": self.singular_values.tolist(),
        }

    @classmethod
    def from_dict(cls, obj):
        basis = np.array(obj["basis"], dtype=float).reshape(len(obj["center"]), -1)
        return cls(obj["kind"], basis, tuple(obj["d"]), np.array(obj["singular_values"], dtype=float),
                   np.array(obj["center"], dtype=float), int(obj["p"]), int(obj["q"]))


def resolve_kind(kind, p, q):
    if kind not in KINDS:
        raise ValueError(f"unknown reduction kind {kind!r}")
    if kind in ("optimal", "suboptimal"):
        if q == 0:
            return "pfc"
        if p == 0:
            return "binary"
    return kind


def reduction_target(kind, fit):
    """Matrix whose left singular space defines the reduction (c1/c2 for suboptimal)."""
    q = fit.params.q
    if kind == "optimal":
        return assemble_b(fit.cont, fit.ising)
    if kind == "pfc":
        return _omega_a(fit.cont)
    if kind == "binary":
        tau = fit.ising.tau
        return np.vstack([tau[diag_positions(q)], tau[offdiag_positions(q)]])
    return assemble_c(fit.cont, fit.ising)


def _restrict(data, kind):
    if kind == "pfc":
        return Dataset(data.y, data.X, np.zeros((data.n, 0)), data.x_names, (), data.response_name)
    if kind == "binary":
        return Dataset(data.y, np.zeros((data.n, 0)), data.H, (), data.h_names, data.response_name)
    return data


def fit_sdr(data, fy, kind="optimal", d=1, ridge=None, fit=None):
    """Estimate a reduction of the given kind.

    Parameters
    ----------
    data : Dataset
    fy : FyBasis
    kind : {"optimal", "suboptimal", "pfc", "binary"}
        ``"optimal"`` falls back to ``"pfc"`` when there are no binary
        predictors and to ``"binary"`` when there are no continuous ones.
    d : int or (int, int)
        Rank; for ``"suboptimal"`` a pair ``(d1, d2)`` (an int is used for both).
    fit : MixedFit, optional
        Reuse an existing parameter fit.
    """
    kind = resolve_kind(kind, data.p, data.q)
    sub = _restrict(data, kind)
    if fit is None:
        fit = fit_model(sub, fy, ridge)
    r = fy.r
    if kind == "suboptimal":
        d1, d2 = (d, d) if np.isscalar(d) else tuple(d)
        c1, c2 = assemble_c(fit.cont, fit.ising)
        if not 0 <= d1 <= min(r, c1.shape[0]):
            raise DimensionError(f"d1={d1} outside [0, {min(r, c1.shape[0])}]")
        if not 0 <= d2 <= min(r, c2.shape[0]):
            raise DimensionError(f"d2={d2} outside [0, {min(r, c2.shape[0])}]")
        if np.linalg.norm(c2) <= 1e-10:
            d2 = 0
        s1 = svd_truncate(c1, d1)
        s2 = svd_truncate(c2, d2)
        basis = np.zeros((c1.shape[0] + c2.shape[0], d1 + d2))
        basis[:c1.shape[0], :d1] = s1.U1
        basis[c1.shape[0]:, d1:] = s2.U1
        dims = (d1, d2)
        sv = np.concatenate([s1.singular_values, s2.singular_values])
        target = None
    else:
        d = int(d if np.isscalar(d) else d[0])
        target = reduction_target(kind, fit)
        if not 0 <= d <= min(target.shape):
            raise DimensionError(f"d={d} outside [0, {min(target.shape)}]")
        parts = svd_truncate(target, d)
        basis, dims, sv = parts.U1, (d,), parts.singular_values
    center = statistic(kind, sub.X, sub.H).mean(axis=0)
    return ReductionModel(kind, basis, dims, sv, center, data.p, data.q, fy, fit, target)


def apply_reduction(model, X, H=None):
    """``basis' (stat(x, h) - center)`` for one observation or a batch of rows."""
    X = np.asarray(X, dtype=float)
    H = np.zeros(X.shape[:-1] + (0,)) if H is None else np.asarray(H, dtype=float)
    ref = X if model.p else H
    single = ref.ndim == 1
    n = 1 if single else ref.shape[0]
    X = X.reshape(n, -1) if X.size else np.zeros((n, 0))
    H = H.reshape(n, -1) if H.size else np.zeros((n, 0))
    if X.shape[1] != model.p or H.shape[1] != model.q:
        raise DimensionError(f"expected p={model.p}, q={model.q}; got p={X.shape[1]}, q={H.shape[1]}")
    stat = statistic(model.kind, X, H)
    out = (stat - model.center) @ model.basis
    return out[0] if single else out
