"""Command-line interface: data ingestion, fitting, reduction, dimension tests,
regularized selection, downstream prediction and simulation runs.

Every command reads an optional YAML config; explicit flags override it.  All
outputs go to ``--out`` and embed the resolved configuration, the seed and the
library version.
"""

import argparse
import csv
import json
import logging
import sys
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

import numpy as np
import yaml
from scipy.stats import rankdata

from . import __version__
from .asymp import select_dimension
from .estim import (DimensionError, RankDeficientError, ReductionModel, SeparationError, apply_reduction,
                    fit_model, fit_sdr, ising_theta, resolve_kind)
from .model import Dataset, DegenerateResponseError, EnumerationLimitError, build_fy
from .simbench import N_GRID, SCENARIOS, run_experiment
from .sparse import N_FOLDS, N_GAMMA, N_LAMBDA, cv_select, fit_multinomial, multinomial_proba

log = logging.getLogger("mixsdr")

EXIT_OK, EXIT_VALIDATION, EXIT_NUMERICAL = 0, 2, 3
COMMANDS = ("fit", "reduce", "testdim", "select", "predict", "simulate")
PENALTY_OF_KIND = {"pfc": "continuous-rows", "binary": "binary-overlapping", "optimal": "mixed",
                   "suboptimal": "separate"}
DOWNSTREAM_RIDGE = 1e-4


class ValidationError(ValueError):
    """Bad input: schema, data file, config or argument values."""


class NumericalError(RuntimeError):
    """Estimation could not be carried out on otherwise valid input."""


# --------------------------------------------------------------------------
# schema and data files
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class DataSchema:
    """Column roles of a delimited data file.

    With ``header=False`` columns are referred to by their 0-based position.
    """

    response: str
    response_type: str = "categorical"
    continuous: tuple = ()
    binary: tuple = ()
    delimiter: str = ","
    header: bool = True

    def __post_init__(self):
        if self.response_type not in ("categorical", "continuous"):
            raise ValidationError(f"response type must be categorical or continuous, got {self.response_type!r}")
        both = set(self.continuous) & set(self.binary)
        if both:
            raise ValidationError(f"columns listed as both continuous and binary: {sorted(both)}")
        if self.response in set(self.continuous) | set(self.binary):
            raise ValidationError(f"response column {self.response!r} also listed as a predictor")
        if not self.continuous and not self.binary:
            raise ValidationError("schema lists no predictors")

    @classmethod
    def from_dict(cls, obj):
        if not isinstance(obj, dict) or "response" not in obj:
            raise ValidationError("schema needs a 'response' entry")
        resp = obj["response"]
        name, rtype = (resp.get("name"), resp.get("type", "categorical")) if isinstance(resp, dict) else (resp, "categorical")
        return cls(str(name), rtype, tuple(str(c) for c in obj.get("continuous", []) or []),
                   tuple(str(c) for c in obj.get("binary", []) or []),
                   obj.get("delimiter", ","), bool(obj.get("header", True)))

    def to_dict(self):
        return {"response": {"name": self.response, "type": self.response_type},
                "continuous": list(self.continuous), "binary": list(self.binary),
                "delimiter": self.delimiter, "header": self.header}


def load_schema(path):
    try:
        with open(path) as fh:
            return DataSchema.from_dict(yaml.safe_load(fh))
    except OSError as exc:
        raise ValidationError(f"cannot read schema {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"schema {path} is not valid YAML: {exc}") from exc


def _data_lines(fh):
    return (line for line in fh if line.strip() and not line.startswith("#"))


def load_dataset(path, schema):
    """Read a delimited file into a :class:`Dataset` following ``schema``.

    Raises
    ------
    ValidationError
        Unreadable file, unknown column, missing or non-numeric value, or a
        binary column with a value other than 0/1.  Messages name the row
        (1-based data row) and column.
    """
    try:
        with open(path, newline="") as fh:
            rows = list(csv.reader(_data_lines(fh), delimiter=schema.delimiter))
    except OSError as exc:
        raise ValidationError(f"cannot read data {path}: {exc}") from exc
    if schema.header:
        if not rows:
            raise ValidationError(f"{path}: empty file")
        names, rows = [c.strip() for c in rows[0]], rows[1:]
    else:
        width = len(rows[0]) if rows else 0
        names = [str(j) for j in range(width)]
    pos = {name: j for j, name in enumerate(names)}
    for col in (schema.response,) + schema.continuous + schema.binary:
        if col not in pos:
            raise ValidationError(f"{path}: column {col!r} not found")
    if not rows:
        raise ValidationError(f"{path}: no data rows")

    def column(col, numeric):
        j = pos[col]
        out = []
        for i, row in enumerate(rows, start=1):
            if len(row) != len(names):
                raise ValidationError(f"{path}: row {i} has {len(row)} fields, expected {len(names)}")
            val = row[j].strip()
            if val == "" or val.lower() in ("na", "nan"):
                raise ValidationError(f"{path}: missing value in row {i}, column {col!r}")
            if numeric:
                try:
                    val = float(val)
                except ValueError:
                    raise ValidationError(f"{path}: non-numeric value {val!r} in row {i}, column {col!r}") from None
            out.append(val)
        return out

    X = np.array([column(c, True) for c in schema.continuous], dtype=float).T.reshape(len(rows), -1)
    H = np.array([column(c, True) for c in schema.binary], dtype=float).T.reshape(len(rows), -1)
    for k, col in enumerate(schema.binary):
        bad = np.flatnonzero((H[:, k] != 0) & (H[:, k] != 1))
        if bad.size:
            i = int(bad[0])
            raise ValidationError(f"{path}: binary column {col!r} has value {H[i, k]:g} in row {i + 1}")
    y = column(schema.response, schema.response_type == "continuous")
    y = np.array(y, dtype=float if schema.response_type == "continuous" else None)
    if schema.response_type == "categorical":
        y = _maybe_numeric_labels(y)
    data = Dataset(y, X, H, schema.continuous, schema.binary, schema.response)
    log.info("loaded %s: n=%d, p=%d, q=%d", path, data.n, data.p, data.q)
    with np.errstate(over="ignore", invalid="ignore"):
        for k, col in enumerate(schema.continuous):
            log.info("  %s: mean=%.4g sd=%.4g", col, X[:, k].mean(), X[:, k].std())
    for k, col in enumerate(schema.binary):
        log.info("  %s: share of ones=%.4g", col, H[:, k].mean())
    return data


def _maybe_numeric_labels(y):
    try:
        as_float = y.astype(float)
    except ValueError:
        return y
    if np.all(as_float == np.round(as_float)):
        return as_float.astype(int)
    return as_float


def _fmt(v):
    if isinstance(v, (float, np.floating)):
        return repr(float(v))
    if isinstance(v, (np.integer,)):
        return str(int(v))
    return str(v)


def write_table(path, header, rows, meta=None, delimiter=","):
    """Delimited table with shortest round-trip floats and an optional ``#`` metadata line."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as fh:
        if meta is not None:
            fh.write("# " + json.dumps(meta, sort_keys=True, default=_json_default) + "\n")
        writer = csv.writer(fh, delimiter=delimiter, lineterminator="\n")
        writer.writerow(header)
        for row in rows:
            writer.writerow([_fmt(v) for v in row])
    return path


def read_table(path, delimiter=","):
    """Inverse of :func:`write_table`: ``(header, float matrix, metadata)``."""
    meta = None
    with open(path, newline="") as fh:
        lines = fh.readlines()
    if lines and lines[0].startswith("# "):
        meta = json.loads(lines[0][2:])
    rows = list(csv.reader(_data_lines(lines), delimiter=delimiter))
    header, body = rows[0], rows[1:]
    mat = np.array([[float(v) for v in r] for r in body], dtype=float).reshape(len(body), len(header))
    return header, mat, meta


def write_dataset(path, data, schema, meta=None):
    """Write ``data`` in the layout ``schema`` describes (round-trips through :func:`load_dataset`)."""
    if not schema.header:
        raise ValidationError("writing requires a schema with a header")
    header = [schema.response, *schema.continuous, *schema.binary]
    rows = ([y, *x, *(int(v) for v in h)] for y, x, h in zip(data.y.tolist(), data.X, data.H))
    return write_table(path, header, rows, meta, schema.delimiter)


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating,)):
        return float(obj)
    if isinstance(obj, (np.bool_,)):
        return bool(obj)
    if isinstance(obj, tuple):
        return list(obj)
    raise TypeError(f"not serializable: {type(obj).__name__}")


def write_json(path, obj):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n")
    return path


# --------------------------------------------------------------------------
# run configuration
# --------------------------------------------------------------------------

@dataclass
class RunConfig:
    """Resolved settings of one command; every field has an explicit default."""

    command: str = "fit"
    data: str = None
    schema: str = None
    model: str = None
    newdata: str = None
    kind: str = "optimal"
    d: object = 1
    test: str = "wald"
    alpha: float = 0.05
    penalty: str = "auto"
    criterion: str = "deviance"
    folds: int = N_FOLDS
    n_lambda: int = N_LAMBDA
    gammas: list = field(default_factory=lambda: np.linspace(0.0, 1.0, N_GAMMA).tolist())
    seed: int = 0
    out: str = "mixsdr-out"
    loo: bool = False
    strict_loo: bool = False
    scenarios: list = field(default_factory=lambda: list(SCENARIOS))
    n_grid: list = field(default_factory=lambda: list(N_GRID))
    reps: int = 100
    tasks: list = field(default_factory=lambda: ["estimate"])

    def validate(self):
        if self.command not in COMMANDS:
            raise ValidationError(f"unknown command {self.command!r}")
        if self.kind not in PENALTY_OF_KIND:
            raise ValidationError(f"unknown kind {self.kind!r}")
        self.d = parse_d(self.d)
        if self.test not in ("wchisq", "wald"):
            raise ValidationError(f"unknown test {self.test!r}")
        if not 0.0 < float(self.alpha) < 1.0:
            raise ValidationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.penalty not in ("auto", "continuous-rows", "binary-overlapping", "mixed", "separate"):
            raise ValidationError(f"unknown penalty {self.penalty!r}")
        if self.criterion not in ("deviance", "misclassification"):
            raise ValidationError(f"unknown criterion {self.criterion!r}")
        for name in ("folds", "n_lambda", "reps"):
            if int(getattr(self, name)) < 1:
                raise ValidationError(f"{name} must be positive")
        if any(not 0.0 <= float(g) <= 1.0 for g in self.gammas):
            raise ValidationError("gamma values must lie in [0, 1]")
        unknown = set(self.scenarios) - set(SCENARIOS)
        if unknown:
            raise ValidationError(f"unknown scenarios {sorted(unknown)}")
        bad_tasks = set(self.tasks) - {"estimate", "testdim", "select"}
        if bad_tasks:
            raise ValidationError(f"unknown tasks {sorted(bad_tasks)}")
        return self

    def metadata(self):
        return {"config": asdict(self), "seed": self.seed, "version": __version__}


def parse_d(value):
    """``"auto"``, an int, or ``"d1,d2"`` for the suboptimal kind."""
    if value is None or value == "auto":
        return "auto"
    if isinstance(value, (list, tuple)):
        return tuple(int(v) for v in value)
    if isinstance(value, (int, np.integer)):
        if value < 0:
            raise ValidationError("d must be non-negative")
        return int(value)
    try:
        parts = [int(v) for v in str(value).split(",")]
    except ValueError:
        raise ValidationError(f"d must be 'auto', an integer or 'd1,d2'; got {value!r}") from None
    if any(v < 0 for v in parts):
        raise ValidationError("d must be non-negative")
    return parts[0] if len(parts) == 1 else tuple(parts)


_SECTIONS = ("data", "select", "simulate", "test", "predict")


def load_config(path):
    """Flatten a YAML config; nested sections merge into the top level."""
    try:
        with open(path) as fh:
            raw = yaml.safe_load(fh) or {}
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ValidationError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ValidationError("config must be a mapping")
    flat = {}
    for key, val in raw.items():
        if key in _SECTIONS and isinstance(val, dict):
            for sub, v in val.items():
                flat["data" if (key, sub) == ("data", "path") else sub] = v
        else:
            flat[key.replace("-", "_")] = val
    known = {f.name for f in fields(RunConfig)}
    unknown = set(flat) - known
    if unknown:
        raise ValidationError(f"unknown config keys: {sorted(unknown)}")
    return flat


def resolve_config(args):
    """Defaults, then the config file, then flags given on the command line."""
    values = {}
    if getattr(args, "config", None):
        values.update(load_config(args.config))
    for f in fields(RunConfig):
        v = getattr(args, f.name, None)
        if v is not None and f.name != "command":
            values[f.name] = v
    if getattr(args, "auto", False):
        values["d"] = "auto"
    values["command"] = args.command
    return RunConfig(**values).validate()


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def _require(cfg, *names):
    for name in names:
        if not getattr(cfg, name):
            raise ValidationError(f"command {cfg.command!r} needs --{name.replace('_', '-')}")


def _load(cfg, path=None):
    _require(cfg, "schema")
    schema = load_schema(cfg.schema)
    data = load_dataset(path or cfg.data, schema)
    return data, schema


def _fy(data, schema):
    if schema.response_type == "continuous":
        return build_fy(data.y.astype(float), "polynomial")
    return build_fy(data.y)


def _choose_d(cfg, data, fy, kind):
    if cfg.d != "auto":
        return cfg.d, None
    report = select_dimension(data, fy, kind, cfg.test, cfg.alpha, cfg.seed)
    return report.d, report


def _model_files(out, model, data, meta):
    rows = model.basis.tolist()
    cols = [f"dir{k + 1}" for k in range(model.basis.shape[1])]
    write_table(out / "alpha.csv", cols, rows, meta)
    write_table(out / "center.csv", ["center"], [[c] for c in model.center], meta)
    doc = {"meta": meta, "model": model.to_dict(),
           "x_names": list(data.x_names), "h_names": list(data.h_names)}
    return write_json(out / "model.json", doc)


def _params_doc(params):
    return {"Delta": params.Delta, "mu_x": params.mu_x, "mu_h": params.mu_h, "A": params.A,
            "beta": params.beta, "tau0": params.tau0, "tau": params.tau}


def cmd_fit(cfg):
    _require(cfg, "data")
    data, schema = _load(cfg)
    fy = _fy(data, schema)
    kind = resolve_kind(cfg.kind, data.p, data.q)
    d, report = _choose_d(cfg, data, fy, kind)
    model = fit_sdr(data, fy, kind, d)
    out = Path(cfg.out)
    meta = cfg.metadata()
    meta["resolved"] = {"kind": kind, "d": list(model.d)}
    write_json(out / "parameters.json", {"meta": meta, "parameters": _params_doc(model.fit.params)})
    if report is not None:
        write_json(out / "testdim.json", {"meta": meta, "report": report.to_dict()})
    _model_files(out, model, data, meta)
    return {"kind": kind, "d": list(model.d), "m": model.basis.shape[0], "out": str(out)}


def load_model(path):
    try:
        doc = json.loads(Path(path).read_text())
        return ReductionModel.from_dict(doc["model"]), doc
    except (OSError, KeyError, json.JSONDecodeError) as exc:
        raise ValidationError(f"cannot read model {path}: {exc}") from exc


def cmd_reduce(cfg):
    _require(cfg, "data", "model")
    data, schema = _load(cfg)
    model, _ = load_model(cfg.model)
    Z = apply_reduction(model, data.X, data.H)
    meta = cfg.metadata()
    cols = [schema.response] + [f"r{k + 1}" for k in range(Z.shape[1])]
    path = write_table(Path(cfg.out) / "reduced.csv", cols,
                       ([y, *z] for y, z in zip(data.y.tolist(), Z)), meta)
    return {"n": data.n, "dim": Z.shape[1], "out": str(path)}


def cmd_testdim(cfg):
    _require(cfg, "data")
    data, schema = _load(cfg)
    fy = _fy(data, schema)
    report = select_dimension(data, fy, cfg.kind, cfg.test, cfg.alpha, cfg.seed)
    path = write_json(Path(cfg.out) / "testdim.json", {"meta": cfg.metadata(), "report": report.to_dict()})
    d = report.d
    return {"d": list(d) if isinstance(d, tuple) else d, "out": str(path)}


def cmd_select(cfg):
    _require(cfg, "data")
    data, schema = _load(cfg)
    fy = _fy(data, schema)
    kind = resolve_kind(cfg.kind, data.p, data.q)
    expected = PENALTY_OF_KIND[kind]
    if cfg.penalty not in ("auto", expected):
        raise ValidationError(f"penalty {cfg.penalty!r} does not match kind {kind!r} (uses {expected!r})")
    d, _ = _choose_d(cfg, data, fy, kind)
    if kind != "suboptimal" and not np.isscalar(d):
        raise ValidationError(f"kind {kind!r} takes a single d")
    if np.isscalar(d) and int(d) == 0 or (not np.isscalar(d) and max(d) == 0):
        raise ValidationError("selection needs d >= 1")
    path = cv_select(data, fy, kind, d, n_lambda=cfg.n_lambda, gammas=cfg.gammas, folds=cfg.folds,
                     rng=cfg.seed, criterion=cfg.criterion)
    kept_x = [data.x_names[j] for j in path.kept_x]
    kept_h = [data.h_names[j] for j in path.kept_h]
    doc = {"meta": cfg.metadata(), "kept_continuous": kept_x, "kept_binary": kept_h,
           "path": path.to_dict()}
    out = write_json(Path(cfg.out) / "regpath.json", doc)
    return {"kept_continuous": kept_x, "kept_binary": kept_h, "out": str(out)}


# downstream prediction ---------------------------------------------------------

def auc(scores, positive):
    """Area under the empirical ROC curve (trapezoidal; tied scores count one half)."""
    scores = np.asarray(scores, dtype=float)
    positive = np.asarray(positive, dtype=bool)
    n1, n0 = positive.sum(), (~positive).sum()
    if n1 == 0 or n0 == 0:
        raise ValidationError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[positive].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))


def multiclass_auc(prob, labels):
    """AUC of P(second class) for two classes; mean one-vs-rest AUC otherwise."""
    k = prob.shape[1]
    if k == 2:
        return auc(prob[:, 1], labels == 1)
    vals = [auc(prob[:, c], labels == c) for c in range(k) if 0 < (labels == c).sum() < labels.size]
    return float(np.mean(vals))


def _standardize(Ztr, Zte):
    mu = Ztr.mean(axis=0)
    sd = Ztr.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(np.abs(Ztr).max(axis=0), 1e-300), sd, np.inf)
    return (Ztr - mu) / sd, (Zte - mu) / sd


@dataclass
class Downstream:
    """Logistic (categorical response) or least-squares (continuous response) fit on features."""

    kind: str
    coef: np.ndarray
    mu: np.ndarray
    sd: np.ndarray
    labels: tuple = ()

    def _scaled(self, Z):
        return (np.asarray(Z, dtype=float).reshape(-1, self.mu.size) - self.mu) / self.sd

    def proba(self, Z):
        return multinomial_proba(self.coef[None], self._scaled(Z)[None])[0]

    def predict(self, Z):
        if self.kind == "linear":
            Zs = self._scaled(Z)
            return np.column_stack([np.ones(Zs.shape[0]), Zs]) @ self.coef
        return np.asarray(self.labels, dtype=object)[self.proba(Z).argmax(axis=1)]


def fit_downstream(Z, y, continuous=False):
    Z = np.asarray(Z, dtype=float).reshape(len(y), -1)
    mu = Z.mean(axis=0)
    sd = Z.std(axis=0)
    sd = np.where(sd > 1e-12 * np.maximum(np.abs(Z).max(axis=0, initial=0.0), 1e-300), sd, np.inf)
    Zs = (Z - mu) / sd
    if continuous:
        design = np.column_stack([np.ones(len(y)), Zs])
        coef, *_ = np.linalg.lstsq(design, np.asarray(y, dtype=float), rcond=None)
        return Downstream("linear", coef, mu, sd)
    labels = tuple(np.unique(y).tolist())
    if len(labels) < 2:
        raise DegenerateResponseError("training response has a single class")
    idx = np.searchsorted(np.asarray(labels, dtype=object), np.asarray(y, dtype=object))
    W = fit_multinomial(Zs[None], idx, len(labels), ridge=DOWNSTREAM_RIDGE)[0]
    return Downstream("logistic", W, mu, sd, labels)


def loo_evaluate(data, fy_kind, kind, d, strict=True, features="reduced"):
    """Leave-one-out predictions of the downstream model.

    ``strict`` refits the reduction on every training fold; otherwise the
    reduction is fitted once on all rows and only the downstream model is
    refitted.  ``features="full"`` skips the reduction and uses the raw
    predictors (X, H).

    Returns
    -------
    dict with ``pred`` and, for a categorical response, ``prob`` (n x classes
    in sorted label order), ``error`` (misclassification) and ``auc``; for a
    continuous response ``error`` is the mean squared error.
    """
    n = data.n
    continuous = fy_kind == "polynomial"
    labels = None if continuous else tuple(np.unique(data.y).tolist())

    def basis(train):
        return build_fy(train.y.astype(float), "polynomial") if continuous else build_fy(train.y)

    kind = resolve_kind(kind, data.p, data.q)
    if features == "full":
        feats = np.hstack([data.X, data.H])
    else:
        model = fit_sdr(data, basis(data), kind, d)
        feats = apply_reduction(model, data.X, data.H).reshape(n, -1)
        # fold fits start from the full-data Ising estimate
        theta0 = ising_theta(model.fit.ising) if kind in ("optimal", "suboptimal") else None
    preds, probs = [], []
    for i in range(n):
        train_idx = np.delete(np.arange(n), i)
        if features == "reduced" and strict:
            train = data.subset(train_idx)
            fyt = basis(train)
            warm = theta0 is not None and fyt.r == model.fy.r
            fit = fit_model(train, fyt, theta0=theta0) if warm else None
            fold = fit_sdr(train, fyt, kind, d, fit=fit)
            ztr = apply_reduction(fold, train.X, train.H).reshape(n - 1, -1)
            zte = apply_reduction(fold, data.X[i:i + 1], data.H[i:i + 1]).reshape(1, -1)
        else:
            ztr, zte = feats[train_idx], feats[i:i + 1]
        ds = fit_downstream(ztr, data.y[train_idx], continuous)
        if continuous:
            preds.append(float(ds.predict(zte)[0]))
            continue
        pr = ds.proba(zte)[0]
        full = np.zeros(len(labels))
        full[[labels.index(l) for l in ds.labels]] = pr
        probs.append(full)
        preds.append(ds.labels[int(pr.argmax())])
    if continuous:
        pred = np.array(preds)
        return {"pred": pred, "error": float(np.mean((pred - data.y.astype(float)) ** 2))}
    prob = np.array(probs)
    y_idx = np.array([labels.index(v) for v in data.y.tolist()])
    pred = np.array(preds, dtype=object)
    return {"pred": pred, "prob": prob, "error": float(np.mean(pred != np.asarray(data.y, dtype=object))),
            "auc": multiclass_auc(prob, y_idx)}


def cmd_predict(cfg):
    _require(cfg, "data", "model")
    data, schema = _load(cfg)
    model, doc = load_model(cfg.model)
    continuous = schema.response_type == "continuous"
    Z = apply_reduction(model, data.X, data.H).reshape(data.n, -1)
    ds = fit_downstream(Z, data.y, continuous)
    target = load_dataset(cfg.newdata, schema) if cfg.newdata else data
    Zt = apply_reduction(model, target.X, target.H).reshape(target.n, -1)
    out = Path(cfg.out)
    meta = cfg.metadata()
    if continuous:
        header, rows = ["observed", "predicted"], zip(target.y.tolist(), ds.predict(Zt))
    else:
        prob = ds.proba(Zt)
        header = ["observed", "predicted"] + [f"p_{l}" for l in ds.labels]
        rows = ([y, p, *pr] for y, p, pr in zip(target.y.tolist(), ds.predict(Zt), prob))
    write_table(out / "predictions.csv", header, rows, meta)
    result = {"n_train": data.n, "n_predicted": target.n}
    if cfg.loo or cfg.strict_loo:
        kind = model.kind
        d = model.d[0] if len(model.d) == 1 else model.d
        ev = loo_evaluate(data, "polynomial" if continuous else "categorical", kind, d, strict=cfg.strict_loo)
        result["loo"] = {"mode": "strict" if cfg.strict_loo else "fast", "error": ev["error"]}
        if "auc" in ev:
            result["loo"]["auc"] = ev["auc"]
    write_json(out / "metrics.json", {"meta": meta, "metrics": result})
    return result


def cmd_simulate(cfg):
    opts = {"n_lambda": cfg.n_lambda, "gammas": cfg.gammas, "folds": cfg.folds, "criterion": cfg.criterion}
    res = run_experiment(tuple(cfg.scenarios), tuple(int(n) for n in cfg.n_grid), int(cfg.reps),
                         tuple(cfg.tasks), int(cfg.seed), float(cfg.alpha), opts,
                         progress=lambda row: log.info("%s n=%d rep=%d %s %.2fs", row["scenario"], row["n"],
                                                       row["rep"], row["task"], row["seconds"]))
    out = Path(cfg.out)
    meta = cfg.metadata()
    keys = sorted({k for r in res.rows for k in r})
    write_table(out / "replicates.csv", keys, ([r.get(k, "") for k in keys] for r in res.rows), meta)
    agg = res.aggregate()
    akeys = sorted({k for r in agg for k in r})
    write_table(out / "summary.csv", akeys, ([r.get(k, "") for r in [a] for k in akeys] for a in agg), meta)
    return {"rows": len(res.rows), "out": str(out)}


HANDLERS = {"fit": cmd_fit, "reduce": cmd_reduce, "testdim": cmd_testdim, "select": cmd_select,
            "predict": cmd_predict, "simulate": cmd_simulate}


# --------------------------------------------------------------------------
# entry point
# --------------------------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="YAML config; flags override its values")
    common.add_argument("--data", help="delimited data file")
    common.add_argument("--schema", help="YAML schema describing the data columns")
    common.add_argument("--kind", choices=list(PENALTY_OF_KIND))
    common.add_argument("--d", help="reduction dimension: integer, 'd1,d2' or 'auto'")
    common.add_argument("--auto", action="store_true", default=None, help="choose d by sequential testing")
    common.add_argument("--test", choices=["wchisq", "wald"])
    common.add_argument("--alpha", type=float)
    common.add_argument("--seed", type=int)
    common.add_argument("--out", help="output directory")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(prog="mixsdr", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("fit", parents=[common], help="fit the model and the reduction")
    red = sub.add_parser("reduce", parents=[common], help="apply a fitted reduction to data")
    red.add_argument("--model", help="model.json written by 'fit'")
    sub.add_parser("testdim", parents=[common], help="sequential tests for the dimension")
    sel = sub.add_parser("select", parents=[common], help="penalized variable selection with CV")
    sel.add_argument("--penalty", choices=["auto", "continuous-rows", "binary-overlapping", "mixed", "separate"])
    sel.add_argument("--folds", type=int)
    sel.add_argument("--n-lambda", dest="n_lambda", type=int)
    sel.add_argument("--gammas", type=lambda s: [float(v) for v in s.split(",")])
    sel.add_argument("--criterion", choices=["deviance", "misclassification"])
    pred = sub.add_parser("predict", parents=[common], help="downstream prediction on the reduced data")
    pred.add_argument("--model", help="model.json written by 'fit'")
    pred.add_argument("--newdata", help="rows to predict (default: the training data)")
    pred.add_argument("--loo", action="store_true", default=None, help="leave-one-out, downstream refit only")
    pred.add_argument("--strict-loo", dest="strict_loo", action="store_true", default=None,
                      help="leave-one-out refitting the reduction too")
    sim = sub.add_parser("simulate", parents=[common], help="run the simulation scenarios")
    sim.add_argument("--scenarios", type=lambda s: s.split(","))
    sim.add_argument("--n-grid", dest="n_grid", type=lambda s: [int(v) for v in s.split(",")])
    sim.add_argument("--reps", type=int)
    sim.add_argument("--tasks", type=lambda s: s.split(","))
    sim.add_argument("--folds", type=int)
    sim.add_argument("--n-lambda", dest="n_lambda", type=int)
    sim.add_argument("--criterion", choices=["deviance", "misclassification"])
    return parser


_NUMERICAL = (NumericalError, RankDeficientError, SeparationError, EnumerationLimitError,
              np.linalg.LinAlgError, FloatingPointError)


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        result = HANDLERS[cfg.command](cfg)
    except _NUMERICAL as exc:
        print(f"mixsdr: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERICAL
    except (ValidationError, DimensionError, DegenerateResponseError, ValueError, TypeError) as exc:
        print(f"mixsdr: error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    print(json.dumps(result, default=_json_default))
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
