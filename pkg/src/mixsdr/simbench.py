"""Simulation scenarios, error metrics and the seeded experiment runner."""
import time
from dataclasses import dataclass, field

import numpy as np

from . import matops
from .estim import fit_sdr, statistic
from .model import Dataset, MixedModelParams, build_fy, sample_mixed

P, Q, R = 20, 10, 5
N_CLASSES = R + 1
SCENARIOS = ("cont-d1", "cont-d2", "bin-d1", "bin-d2", "mixed-d1", "mixed-d2")
N_GRID = (100, 200, 300, 500, 750)

K1 = np.array([
    [1, 30, 5, 0, 0, 0, 0, 0, 0, 0],
    [30, 1, 10, 0, 0, 0, 0, 0, 0, 0],
    [5, 10, 1, 30, 0, 0, 0, 0, 0, 0],
    [0, 0, 30, 1, 30, 0, 0, 0, 0, 0],
    [0, 0, 0, 30, 1, 30, 0, 0, 0, 0],
    [0, 0, 0, 0, 30, 1, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 30, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
    [0, 0, 0, 0, 0, 0, 0, 0, 0, 0],
], dtype=float)


# --------------------------------------------------------------------------
# scenarios
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Scenario:
    """True parameters of one simulation setting.

    ``params`` are expressed in the generating basis f_j = I(y=j) - n_j/n,
    j = 1..5, so spans derived from them are basis free.
    """

    name: str
    family: str
    params: MixedModelParams
    d: int
    d_sub: tuple
    alpha: np.ndarray = field(repr=False)

    @property
    def kind(self):
        return {"cont": "pfc", "bin": "binary", "mixed": "optimal"}[self.family]

    @property
    def b(self):
        return true_b(self.params)

    def sub_basis(self):
        c1, c2 = true_c(self.params)
        d1, d2 = self.d_sub
        u1 = matops.orthonormal_basis(c1)[:, :d1]
        u2 = matops.orthonormal_basis(c2)[:, :d2]
        out = np.zeros((c1.shape[0] + c2.shape[0], d1 + d2))
        out[:c1.shape[0], :d1] = u1
        out[c1.shape[0]:, d1:] = u2
        return out

    def irrelevant(self, tol=1e-12):
        """Boolean masks of irrelevant continuous and binary predictors (zero rows of b)."""
        p, q = self.params.p, self.params.q
        b = self.b
        xmask = np.linalg.norm(b[:p], axis=1) <= tol
        hmask = np.zeros(q, dtype=bool)
        if q:
            r_idx, c_idx = matops.vech_index(q)
            opos = matops.offdiag_positions(q)
            inter = b[p + q:]
            for j in range(q):
                rows = [k for k, pos in enumerate(opos) if r_idx[pos] == j or c_idx[pos] == j]
                norm = np.linalg.norm(b[p + j]) + (np.linalg.norm(inter[rows]) if rows else 0.0)
                hmask[j] = norm <= tol
        return xmask, hmask


def true_b(params):
    p, q = params.p, params.q
    oa = np.linalg.solve(params.Delta, params.A) if p else np.zeros((0, params.r))
    tau = params.tau
    return np.vstack([oa, tau[matops.diag_positions(q)] - params.beta.T @ oa,
                      tau[matops.offdiag_positions(q)]])


def true_c(params):
    p = params.p
    oa = np.linalg.solve(params.Delta, params.A) if p else np.zeros((0, params.r))
    return np.vstack([oa, -params.beta.T @ oa]), params.tau.copy()


def _continuous_parts(d):
    a1 = np.r_[np.zeros(P // 2), np.ones(P // 2)]
    if d == 1:
        alpha = a1[:, None]
        xi = np.ones((1, R))
        delta = 5 * (np.eye(P) + 0.55 * alpha @ alpha.T)
    else:
        a2 = np.r_[np.zeros(P // 2), np.ones(P // 4), -np.ones(P // 4)]
        # a1 and a2 are orthogonal, so normalizing each gives an orthonormal basis
        alpha = np.column_stack([a1 / np.linalg.norm(a1), a2 / np.linalg.norm(a2)])
        xi = np.array([[1, 1, 1, 1, 1], [0, 0, 0, 1, 1]], dtype=float)
        delta = 5 * (np.eye(P) + 0.55 * np.outer(alpha[:, 0], alpha[:, 0])
                     + 0.25 * np.outer(alpha[:, 1], alpha[:, 1]))
    return delta, delta @ alpha @ xi


def _binary_tau(d):
    k1 = 0.5 * (K1 + K1.T)
    base = 3 * k1 / np.sqrt(k1.sum())
    mats = [base] * R
    if d == 2:
        t2 = np.zeros((Q, Q))
        t2[:6, :6] = np.eye(6)
        mats = [base, 12 / np.sqrt(6) * t2, base, base, base]
    return np.column_stack([matops.vech(m) for m in mats])


def make_scenario(name):
    if name not in SCENARIOS:
        raise ValueError(f"unknown scenario {name!r}")
    family, dpart = name.split("-")
    d = int(dpart[1])
    mq = matops.n_vech(Q)
    if family == "cont":
        delta, a = _continuous_parts(d)
        params = MixedModelParams(delta, np.zeros(P), np.zeros(0), a, np.zeros((P, 0)),
                                  np.zeros(0), np.zeros((0, R)))
        d_sub = (d, 0)
    elif family == "bin":
        params = MixedModelParams(np.zeros((0, 0)), np.zeros(0), np.zeros(Q), np.zeros((0, R)),
                                  np.zeros((0, Q)), np.zeros(mq), _binary_tau(d))
        d_sub = (0, d)
    else:
        delta, a = _continuous_parts(d)
        beta = np.hstack([np.ones((P, 6)) / 10, np.zeros((P, 4))])
        params = MixedModelParams(delta, np.zeros(P), np.zeros(Q), a, beta, np.zeros(mq), _binary_tau(1))
        d_sub = (d, 1)
    alpha = matops.orthonormal_basis(true_b(params), 1e-8)
    if alpha.shape[1] != d:
        raise AssertionError(f"{name}: true b has rank {alpha.shape[1]}, expected {d}")
    return Scenario(name, family, params, d, d_sub, alpha)


# --------------------------------------------------------------------------
# generators
# --------------------------------------------------------------------------

def uniform_labels(n, rng):
    """Exactly balanced labels 1..6 (remainder round-robin) in random order."""
    return rng.permutation(np.arange(n) % N_CLASSES + 1)


def generating_f(y):
    """f_j = I(y=j) - n_j/n for j = 1..r."""
    y = np.asarray(y)
    ind = np.column_stack([(y == j).astype(float) for j in range(1, R + 1)])
    return ind - ind.mean(axis=0)


def _names(data_p, data_q):
    return tuple(f"X{j + 1}" for j in range(data_p)), tuple(f"H{j + 1}" for j in range(data_q))


def generate(scenario, n, rng):
    """Draw a dataset of size ``n`` from ``scenario``."""
    if isinstance(scenario, str):
        scenario = make_scenario(scenario)
    y = uniform_labels(n, rng)
    X, H = sample_mixed(scenario.params, generating_f(y), rng)
    xn, hn = _names(X.shape[1], H.shape[1])
    return Dataset(y, X, H, xn, hn)


def gen_continuous(scenario, n, rng):
    scenario = make_scenario(scenario) if isinstance(scenario, str) else scenario
    if scenario.family != "cont":
        raise ValueError("gen_continuous needs a cont-* scenario")
    return generate(scenario, n, rng)


def gen_binary(scenario, n, rng):
    scenario = make_scenario(scenario) if isinstance(scenario, str) else scenario
    if scenario.family != "bin":
        raise ValueError("gen_binary needs a bin-* scenario")
    return generate(scenario, n, rng)


def gen_mixed(scenario, n, rng):
    scenario = make_scenario(scenario) if isinstance(scenario, str) else scenario
    if scenario.family != "mixed":
        raise ValueError("gen_mixed needs a mixed-* scenario")
    return generate(scenario, n, rng)


# --------------------------------------------------------------------------
# metrics
# --------------------------------------------------------------------------

def metric_subspace(alpha_hat, alpha):
    """||P_alpha_hat - P_alpha||_2."""
    return matops.subspace_distance(alpha_hat, alpha)


def metric_prediction(alpha_hat, alpha, stat):
    """Distance between the column spaces of the reduced fresh-sample coordinates."""
    stat = np.asarray(stat, dtype=float)
    centered = stat - stat.mean(axis=0)
    return matops.subspace_distance(centered @ alpha_hat, centered @ alpha)


def selection_rates(kept_x, kept_h, scenario):
    """(TP, FN): share of irrelevant variables dropped, share of relevant variables dropped.

    ``kept_x`` and ``kept_h`` are indices of the retained predictors.
    """
    xmask, hmask = scenario.irrelevant()
    keep_x = np.zeros(xmask.size, dtype=bool)
    keep_x[list(kept_x)] = True
    keep_h = np.zeros(hmask.size, dtype=bool)
    keep_h[list(kept_h)] = True
    drop = np.concatenate([~keep_x, ~keep_h])
    irr = np.concatenate([xmask, hmask])
    tp = drop[irr].mean() if irr.any() else np.nan
    fn = drop[~irr].mean() if (~irr).any() else np.nan
    return float(tp), float(fn)


# --------------------------------------------------------------------------
# runner
# --------------------------------------------------------------------------

@dataclass
class ExperimentResult:
    """Per-replicate rows plus the seeds that produced them."""

    rows: list
    seed: int
    reps: int
    config: dict = field(default_factory=dict)

    def aggregate(self):
        """Means, medians and proportions per (scenario, n, task)."""
        groups = {}
        for row in self.rows:
            groups.setdefault((row["scenario"], row["n"], row["task"]), []).append(row)
        out = []
        for (scen, n, task), rows in sorted(groups.items()):
            agg = {"scenario": scen, "n": n, "task": task, "reps": len(rows),
                   "failures": sum(1 for r in rows if r.get("error"))}
            keys = sorted({k for r in rows for k, v in r.items()
                           if isinstance(v, (int, float, bool, np.floating)) and k not in ("n", "rep", "seed")})
            for k in keys:
                vals = np.array([float(r.get(k, np.nan)) for r in rows], dtype=float)
                if k.startswith("correct"):
                    # failed replicates count as incorrect
                    agg[f"prop_{k}"] = float(np.nansum(vals) / len(rows))
                else:
                    agg[f"mean_{k}"] = float(np.nanmean(vals)) if np.isfinite(vals).any() else np.nan
                    agg[f"median_{k}"] = float(np.nanmedian(vals)) if np.isfinite(vals).any() else np.nan
            out.append(agg)
        return out


def rep_seed(seed, scenario, n, rep):
    return np.random.SeedSequence([seed, SCENARIOS.index(scenario), n, rep])


def _estimate_row(scen, data, rng_fresh):
    fy = build_fy(data.y)
    red = fit_sdr(data, fy, scen.kind, scen.d)
    fresh = generate(scen, 2000, rng_fresh)
    stat = statistic(red.kind, fresh.X, fresh.H)
    row = {"est_err": metric_subspace(red.basis, scen.alpha),
           "pred_err": metric_prediction(red.basis, scen.alpha, stat)}
    if scen.family == "mixed":
        sub = fit_sdr(data, fy, "suboptimal", scen.d_sub, fit=red.fit)
        truth = scen.sub_basis()
        wstat = statistic("suboptimal", fresh.X, fresh.H)
        row["est_err_sub"] = metric_subspace(sub.basis, truth)
        row["pred_err_sub"] = metric_prediction(sub.basis, truth, wstat)
    return row


def _testdim_row(scen, data, alpha, seed, suboptimal=True):
    from .asymp import select_dimension
    fy = build_fy(data.y)
    rep = select_dimension(data, fy, scen.kind, "wald", alpha, seed)
    br = next(iter(rep.branches.values()))
    row = {"d_wchisq": br.d_wchisq, "d_wald": br.d_wald,
           "correct_wchisq": br.d_wchisq == scen.d, "correct_wald": br.d_wald == scen.d}
    if scen.family == "mixed" and suboptimal:
        sub = select_dimension(data, fy, "suboptimal", "wald", alpha, seed)
        for name, target in zip(("c1", "c2"), scen.d_sub):
            b = sub.branches[name]
            tag = "cts" if name == "c1" else "bin"
            row[f"d_wchisq_{tag}"] = b.d_wchisq
            row[f"d_wald_{tag}"] = b.d_wald
            row[f"correct_wchisq_{tag}"] = b.d_wchisq == target
            row[f"correct_wald_{tag}"] = b.d_wald == target
    return row


def _select_row(scen, data, rng, select_opts):
    from .sparse import cv_select
    fy = build_fy(data.y)
    path = cv_select(data, fy, scen.kind, scen.d, rng=rng, **select_opts)
    tp, fn = selection_rates(path.kept_x, path.kept_h, scen)
    return {"tp": tp, "fn": fn, "lambda": path.best_lambda, "gamma": path.best_gamma}


def run_experiment(scenarios=SCENARIOS, n_grid=N_GRID, reps=100, tasks=("estimate",), seed=0,
                   alpha=0.05, select_opts=None, progress=None):
    """Run the seeded simulation grid.

    Each (scenario, n, rep) draws its data from a dedicated seed sequence, so
    any subset of the grid reproduces the same replicates. Per-replicate
    failures are recorded in the ``error`` column and count as incorrect.
    """
    select_opts = {} if select_opts is None else dict(select_opts)
    rows = []
    for name in scenarios:
        scen = make_scenario(name)
        for n in n_grid:
            for rep in range(reps):
                ss = rep_seed(seed, name, n, rep)
                data_ss, fresh_ss, task_ss = ss.spawn(3)
                data = generate(scen, n, np.random.default_rng(data_ss))
                task_seed = int(task_ss.generate_state(1)[0])
                for task in tasks:
                    row = {"scenario": name, "n": n, "rep": rep, "task": task, "seed": task_seed}
                    start = time.perf_counter()
                    try:
                        if task == "estimate":
                            row.update(_estimate_row(scen, data, np.random.default_rng(fresh_ss)))
                        elif task == "testdim":
                            row.update(_testdim_row(scen, data, alpha, task_seed))
                        elif task == "select":
                            row.update(_select_row(scen, data, np.random.default_rng(task_ss), select_opts))
                        else:
                            raise ValueError(f"unknown task {task!r}")
                        row["error"] = ""
                    except (ValueError, np.linalg.LinAlgError, FloatingPointError) as exc:
                        row["error"] = f"{type(exc).__name__}: {exc}"
                    row["seconds"] = time.perf_counter() - start
                    rows.append(row)
                    if progress:
                        progress(row)
    config = {"scenarios": list(scenarios), "n_grid": list(n_grid), "reps": reps,
              "tasks": list(tasks), "alpha": alpha, "select_opts": select_opts}
    return ExperimentResult(rows, seed, reps, config)
