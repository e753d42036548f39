"""EM fitting of BIRDiE outcome models on top of BISG probabilities.

Records are compressed to distinct ``(cell, outcome, probability row)``
combinations with frequency weights before fitting. The E-step and the
sufficient statistics are exact under this compression, and the reduction
order no longer depends on record order.
"""

from __future__ import annotations

import os
import time
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .baseline import check_aligned, census_cell_weights
from .census import CensusTables
from .data import UNDEFINED, DisparityEstimate, ProbMatrix, RecordTable
from .models import (MixedParams, OutcomeModelSpec, dirichlet_log_prior, m_step_mixed,
                     m_step_pooling, m_step_saturated, mixed_design, mixed_init,
                     mixed_log_prior, mixed_probs)

ACCELERATIONS = ("none", "squarem", "anderson")


class NonConvergenceError(RuntimeError):
    """Raised by callers that require convergence; carries the fit."""

    def __init__(self, message, fit=None):
        super().__init__(message)
        self.fit = fit


# ---- compressed design -----------------------------------------------------

@dataclass
class Design:
    """Distinct (cell, outcome, probability row) combinations with counts."""

    cell: np.ndarray        # M
    y: np.ndarray           # M
    p: np.ndarray           # M x R
    weight: np.ndarray      # M
    inverse: np.ndarray     # N -> M
    cell_keys: list
    races: tuple
    outcomes: tuple

    @property
    def n_cells(self) -> int:
        return len(self.cell_keys)

    @property
    def n_y(self) -> int:
        return len(self.outcomes)

    @property
    def n_r(self) -> int:
        return len(self.races)


def model_cells(records: RecordTable, spec: OutcomeModelSpec, extra_keys=None):
    """Cell codes and keys: a single cell for complete pooling, (geo, cov[, extra]) otherwise."""
    if spec.kind == "complete_pooling":
        return np.zeros(records.n, dtype=np.int64), [("", "", "")]
    src = records if spec.use_cov else RecordTable(records.surname, records.geo, None,
                                                   ids=records.ids)
    return src.cells(spec.level, extra_keys)


def build_design(probs: ProbMatrix, records: RecordTable, spec: OutcomeModelSpec,
                 extra_keys=None) -> Design:
    check_aligned(probs, records)
    cell, keys = model_cells(records, spec, extra_keys)
    y = records.y
    p = probs.probs
    if records.n == 0:
        raise ValueError("no records to fit")
    frame = pd.DataFrame(p, columns=[f"p{k}" for k in range(p.shape[1])])
    frame.insert(0, "y", y)
    frame.insert(0, "cell", cell)
    group = frame.groupby(list(frame.columns), sort=True)
    inverse = group.ngroup().to_numpy(dtype=np.int64)
    m = int(inverse.max()) + 1
    first = np.full(m, -1, dtype=np.int64)
    # first occurrence of every distinct row, independent of record order content
    first[inverse[::-1]] = np.arange(records.n - 1, -1, -1)
    weight = np.bincount(inverse, minlength=m).astype(float)
    return Design(cell[first], y[first], p[first], weight, inverse, keys,
                  probs.races, records.y_levels)


# ---- E-step ----------------------------------------------------------------

def _estep(design: Design, lik: np.ndarray, weight: Optional[np.ndarray] = None,
           want_updated: bool = False):
    """Posterior race weights on distinct rows, sufficient statistics and log-likelihood.

    ``lik`` is the C x R x Y table of Pr(Y=y | R=r, cell).
    """
    w = design.weight if weight is None else weight
    like = lik[design.cell, :, design.y]            # M x R
    joint = like * design.p
    norm = joint.sum(axis=1)
    zero = norm <= 0
    upd = np.divide(joint, norm[:, None], out=design.p.copy(), where=~zero[:, None])
    loglik = float(np.dot(w[~zero], np.log(norm[~zero])))
    idx = design.cell * design.n_y + design.y
    size = design.n_cells * design.n_y
    wu = upd * w[:, None]
    stats = np.stack([np.bincount(idx, weights=wu[:, k], minlength=size)
                      for k in range(design.n_r)], axis=1)     # (C*Y) x R
    stats = stats.reshape(design.n_cells, design.n_y, design.n_r).transpose(0, 2, 1)
    n_zero = float(w[zero].sum())
    return stats, loglik, n_zero, (upd if want_updated else None)


# ---- model adapters --------------------------------------------------------

class _DirichletModel:
    def __init__(self, spec: OutcomeModelSpec, design: Design):
        self.spec = spec
        self.alpha = spec.alpha_vector(design.n_y)
        self.pooled = spec.kind == "complete_pooling"
        self.n_c = 1 if self.pooled else design.n_cells
        self.shape = (self.n_c, design.n_r, design.n_y)
        self.n_cells = design.n_cells
        self.empty = np.zeros(self.shape[:2], dtype=bool)

    def init(self):
        return np.full(self.shape, 1.0 / self.shape[2]).ravel()

    def lik(self, vec):
        t = vec.reshape(self.shape)
        return np.broadcast_to(t, (self.n_cells,) + self.shape[1:]) if self.pooled else t

    def mstep(self, stats, vec):
        if self.pooled:
            theta, empty = m_step_pooling(stats, self.spec)
            theta, empty = theta[None], empty[None]
        else:
            theta, empty = m_step_saturated(stats, self.spec)
        self.empty = empty
        return theta.ravel()

    def log_prior(self, vec):
        return dirichlet_log_prior(vec.reshape(self.shape), self.alpha)

    def valid(self, vec):
        return bool(np.all(np.isfinite(vec)) and np.all(vec >= 0))

    def to_free(self, vec):
        return np.log(np.clip(vec, 1e-300, None))

    def from_free(self, z):
        t = np.exp(z.reshape(self.shape) - z.reshape(self.shape).max(axis=-1, keepdims=True))
        return (t / t.sum(axis=-1, keepdims=True)).ravel()

    def public(self, vec):
        t = vec.reshape(self.shape)
        return t[0].copy() if self.pooled else t.copy()


class _MixedModel:
    def __init__(self, spec: OutcomeModelSpec, design: Design):
        self.spec = spec
        self.mdesign = mixed_design(design.cell_keys, spec)
        self.template = mixed_init(self.mdesign, design.n_r, design.n_y, spec)
        self.empty = np.zeros((design.n_cells, design.n_r), dtype=bool)

    def _params(self, vec):
        return MixedParams.from_vector(vec, self.template)

    def init(self):
        return self.template.to_vector()

    def lik(self, vec):
        return mixed_probs(self._params(vec), self.mdesign)

    def mstep(self, stats, vec):
        # one Newton/scale alternation per EM iteration (a generalized EM step)
        new = m_step_mixed(stats, self.spec, self.mdesign, init=self._params(vec), alternations=1)
        return new.to_vector()

    def log_prior(self, vec):
        return mixed_log_prior(self._params(vec), self.spec)

    def valid(self, vec):
        return bool(np.all(np.isfinite(vec)))

    def to_free(self, vec):
        return vec

    def from_free(self, z):
        return z

    def public(self, vec):
        return self._params(vec)


def _adapter(spec, design):
    return _MixedModel(spec, design) if spec.kind == "mixed_effects" else _DirichletModel(spec, design)


# ---- fit -------------------------------------------------------------------

@dataclass
class OutcomeFit:
    """Result of :func:`fit_birdie`.

    ``theta`` is |R| x |Y| for complete pooling, C x |R| x |Y| for the
    saturated model, and :class:`~birdie.models.MixedParams` for the mixed
    model. ``cell_probs`` always holds the implied C x |R| x |Y| outcome
    probabilities and ``suffstats`` the final sufficient statistics in the
    same layout.
    """

    spec: OutcomeModelSpec
    theta: object
    cell_probs: np.ndarray
    cell_keys: list
    races: tuple
    outcomes: tuple
    updated_probs: ProbMatrix
    trace: np.ndarray
    iterations: int
    converged: bool
    runtime: float
    suffstats: np.ndarray
    accel: str = "none"
    n_evals: int = 0
    diagnostics: dict = field(default_factory=dict)
    cell_index: Optional[np.ndarray] = field(default=None, repr=False)

    @property
    def log_posterior(self) -> float:
        return float(self.trace[-1])

    def theta_frame(self) -> pd.DataFrame:
        """Long table ``level,geo,cov,r,y,prob`` of implied outcome probabilities."""
        rows = []
        for c, key in enumerate(self.cell_keys):
            key = tuple(key) + ("",) * (3 - len(key))
            extra = key[3] if len(key) > 3 else ""
            for k, r in enumerate(self.races):
                for j, y in enumerate(self.outcomes):
                    rows.append((key[0], key[1], key[2], extra, r, y, self.cell_probs[c, k, j]))
        return pd.DataFrame(rows, columns=["level", "geo", "cov", "extra", "r", "y", "prob"])

    def trace_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"iter": np.arange(len(self.trace)), "log_post": self.trace})

    def save(self, theta_path, trace_path):
        self.theta_frame().to_csv(theta_path, index=False, float_format="%.17g", lineterminator="\n")
        self.trace_frame().to_csv(trace_path, index=False, float_format="%.17g", lineterminator="\n")


class _Evaluator:
    """One E-step plus one M-step, counting calls."""

    def __init__(self, model, design, weight=None):
        self.model, self.design, self.weight = model, design, weight
        self.calls = 0

    def __call__(self, vec):
        self.calls += 1
        stats, loglik, _, _ = _estep(self.design, self.model.lik(vec), self.weight)
        obj = loglik + self.model.log_prior(vec)
        return obj, self.model.mstep(stats, vec)


def _run_plain(ev, x, tol, max_iter):
    obj, fx = ev(x)
    trace = [obj]
    for _ in range(max_iter):
        x = fx
        obj_new, fx = ev(x)
        trace.append(obj_new)
        done = abs(obj_new - obj) < tol
        obj = obj_new
        if done:
            return x, trace, True
    return x, trace, False


def _run_squarem(ev, model, x, tol, max_iter):
    """SQUAREM with the SqS3 step length and a monotone safeguard."""
    obj0, x1 = ev(x)
    trace = [obj0]
    for _ in range(max_iter):
        obj1, x2 = ev(x1)
        r = x1 - x
        v = x2 - x1 - r
        nv = np.linalg.norm(v)
        x_new = x2
        if nv > 0:
            step = min(-np.linalg.norm(r) / nv, -1.0)
            cand = x - 2.0 * step * r + step * step * v
            if model.valid(cand):
                obj_c, f_c = ev(cand)
                if obj_c >= obj0:
                    x_new = f_c
        obj_new, fx_new = ev(x_new)
        if obj_new < obj0:
            # extrapolated point passed the check but its EM image did not improve
            x_new = x2
            obj_new, fx_new = ev(x_new)
        trace.append(obj_new)
        done = abs(obj_new - obj0) < tol
        x, x1, obj0 = x_new, fx_new, obj_new
        if done:
            return x, trace, True
    return x, trace, False


def _run_anderson(ev, model, x, tol, max_iter, memory=5):
    """Type-II Anderson mixing on the EM map with a monotone safeguard.

    Mixing happens in unconstrained coordinates (log-probabilities for the
    Dirichlet models, renormalized on the way back), so candidates stay in
    the parameter space; a candidate that lowers the objective is replaced
    by the plain EM step and the history is cleared.
    """
    obj, fx = ev(x)
    trace = [obj]
    z = model.to_free(x)
    zs, gs = [z], [model.to_free(fx) - z]
    for _ in range(max_iter):
        accepted = worse = False
        if len(zs) > 1:
            dg = np.column_stack([gs[i + 1] - gs[i] for i in range(len(gs) - 1)])
            dz = np.column_stack([zs[i + 1] - zs[i] for i in range(len(zs) - 1)])
            gamma = np.linalg.lstsq(dg, gs[-1], rcond=None)[0]
            cand = model.from_free(z + gs[-1] - (dz + dg) @ gamma)
            if model.valid(cand):
                obj_c, f_c = ev(cand)
                if obj_c >= obj:
                    x_new, obj_new, fx_new, accepted = cand, obj_c, f_c, True
                else:
                    worse = True
        if not accepted:
            x_new = fx
            obj_new, fx_new = ev(x_new)
            if worse:
                zs, gs = [], []
        z = model.to_free(x_new)
        zs.append(z)
        gs.append(model.to_free(fx_new) - z)
        if len(zs) > memory + 1:
            zs.pop(0)
            gs.pop(0)
        trace.append(obj_new)
        done = abs(obj_new - obj) < tol
        x, obj, fx = x_new, obj_new, fx_new
        if done:
            return x, trace, True
    return x, trace, False


def _fit_design(design: Design, spec: OutcomeModelSpec, accel="none", tol=1e-8, max_iter=1000,
                init=None, weight=None):
    if accel not in ACCELERATIONS:
        raise ValueError(f"accel must be one of {ACCELERATIONS}")
    if tol <= 0:
        raise ValueError("tol must be positive")
    if spec.kind != "mixed_effects" and np.any(spec.alpha_vector(design.n_y) < 1):
        raise ValueError("posterior-mode fitting needs alpha >= 1 (the mode is unbounded otherwise)")
    model = _adapter(spec, design)
    ev = _Evaluator(model, design, weight)
    x0 = model.init() if init is None else np.asarray(init, dtype=float).copy()
    if accel == "none":
        x, trace, ok = _run_plain(ev, x0, tol, max_iter)
    elif accel == "squarem":
        x, trace, ok = _run_squarem(ev, model, x0, tol, max_iter)
    else:
        x, trace, ok = _run_anderson(ev, model, x0, tol, max_iter)
    return model, x, np.asarray(trace), ok, ev.calls


def fit_birdie(probs: ProbMatrix, records: RecordTable, spec: Optional[OutcomeModelSpec] = None,
               accel: str = "none", tol: float = 1e-8, max_iter: int = 1000,
               extra_keys=None) -> OutcomeFit:
    """Fit a BIRDiE outcome model by EM.

    Parameters
    ----------
    probs : ProbMatrix
        BISG race probabilities aligned with ``records``.
    records : RecordTable
        Must carry an outcome column.
    spec : OutcomeModelSpec, optional
        Defaults to complete pooling with a uniform prior.
    accel : {"none", "squarem", "anderson"}
        Fixed-point acceleration. Extrapolated points that leave the
        parameter space or lower the marginal log-posterior are replaced by
        plain EM steps, so the trace is monotone in every mode.
    tol : float
        Stop when the marginal log-posterior changes by less than this.
    max_iter : int
        Iteration cap; on reaching it the fit is returned with
        ``converged=False`` and a warning.
    extra_keys : array, optional
        Additional per-record cell key (used for surname-group refits).

    Returns
    -------
    OutcomeFit
    """
    spec = spec or OutcomeModelSpec()
    start = time.perf_counter()
    design = build_design(probs, records, spec, extra_keys)
    model, x, trace, ok, calls = _fit_design(design, spec, accel, tol, max_iter)
    lik = np.ascontiguousarray(model.lik(x))
    stats, _, n_zero, upd = _estep(design, lik, want_updated=True)
    if not ok:
        warnings.warn(f"EM did not converge in {max_iter} iterations", stacklevel=2)
    updated = ProbMatrix(upd[design.inverse], probs.races, probs.conditioning + "Y", ids=probs.ids,
                         level_used=probs.level_used)
    diag = {"zero_likelihood_records": n_zero, "distinct_rows": int(design.weight.size),
            "empty_cells": model.empty.copy()}
    return OutcomeFit(spec, model.public(x), lik, design.cell_keys, probs.races, design.outcomes,
                      updated, trace, len(trace) - 1, ok, time.perf_counter() - start, stats,
                      accel, calls, diag, design.cell[design.inverse])


# ---- public single-step functions -----------------------------------------

def _theta_to_lik(theta, design: Design, spec: OutcomeModelSpec) -> np.ndarray:
    if isinstance(theta, MixedParams):
        return mixed_probs(theta, mixed_design(design.cell_keys, spec))
    t = np.asarray(theta, dtype=float)
    if t.ndim == 2:
        return np.broadcast_to(t, (design.n_cells,) + t.shape)
    if t.shape[0] != design.n_cells:
        raise ValueError(f"theta has {t.shape[0]} cells but the records define {design.n_cells}")
    return t


def _default_spec(theta, spec):
    if spec is not None:
        return spec
    if isinstance(theta, MixedParams):
        raise ValueError("a spec is required for mixed-model parameters")
    return OutcomeModelSpec("complete_pooling" if np.ndim(theta) == 2 else "saturated")


def e_step(theta, probs: ProbMatrix, records: RecordTable,
           spec: Optional[OutcomeModelSpec] = None):
    """Bayes update of race probabilities given outcomes.

    Returns the updated :class:`ProbMatrix`, the C x |R| x |Y| sufficient
    statistics (summed updated probabilities by cell, race and outcome) and
    the number of records whose likelihood vanished for every race (those
    keep their input row).
    """
    spec = _default_spec(theta, spec)
    design = build_design(probs, records, spec)
    stats, _, n_zero, upd = _estep(design, _theta_to_lik(theta, design, spec), want_updated=True)
    updated = ProbMatrix(upd[design.inverse], probs.races, probs.conditioning + "Y", ids=probs.ids)
    return updated, stats, int(n_zero)


def log_prior(theta, spec: OutcomeModelSpec, n_y: Optional[int] = None) -> float:
    if isinstance(theta, MixedParams):
        return mixed_log_prior(theta, spec)
    t = np.asarray(theta, dtype=float)
    return dirichlet_log_prior(t, spec.alpha_vector(t.shape[-1] if n_y is None else n_y))


def marginal_log_posterior(theta, probs: ProbMatrix, records: RecordTable,
                           spec: Optional[OutcomeModelSpec] = None) -> float:
    """log prior(theta) + sum_i log sum_r Pr(Y_i | r, cell_i, theta) P_ir.

    Records with zero likelihood under every race are left out of the sum
    (they are reported by :func:`e_step`).
    """
    spec = _default_spec(theta, spec)
    design = build_design(probs, records, spec)
    _, loglik, _, _ = _estep(design, _theta_to_lik(theta, design, spec))
    return loglik + log_prior(theta, spec, design.n_y)


# ---- aggregation -----------------------------------------------------------

def estimate_from_fit(fit: OutcomeFit, tables: Optional[CensusTables] = None,
                      cell_weights: Optional[np.ndarray] = None) -> DisparityEstimate:
    """Pr(Y | R) from a fitted model.

    Complete pooling passes theta through. Otherwise the cell tables are
    averaged with weights q_{gx|r} from ``tables`` (or explicit
    ``cell_weights``, C x |R|), renormalized over the fitted cells. Without
    either, each cell is weighted by its posterior race mass.
    """
    if fit.spec.kind == "complete_pooling":
        mu = np.asarray(fit.theta).T.copy()
        return DisparityEstimate("birdie_pooling", fit.races, fit.outcomes, mu,
                                 info={"iterations": fit.iterations, "converged": fit.converged})
    if cell_weights is not None:
        w = np.asarray(cell_weights, dtype=float)
    elif tables is not None:
        w = census_cell_weights(tables, fit.cell_keys)
    else:
        w = fit.suffstats.sum(axis=2)
    total = w.sum(axis=0)
    mu = np.full((len(fit.outcomes), len(fit.races)), np.nan)
    flags = []
    for k in range(len(fit.races)):
        if total[k] > 0:
            mu[:, k] = w[:, k] @ fit.cell_probs[:, k, :] / total[k]
            flags.append("")
        else:
            flags.append(UNDEFINED)
    return DisparityEstimate(f"birdie_{fit.spec.kind}", fit.races, fit.outcomes, mu, flags,
                             cell_keys=fit.cell_keys,
                             mu_cells=fit.cell_probs.transpose(0, 2, 1).copy(),
                             info={"iterations": fit.iterations, "converged": fit.converged})


# ---- bootstrap -------------------------------------------------------------

def bootstrap_pooling(probs: ProbMatrix, records: RecordTable,
                      spec: Optional[OutcomeModelSpec] = None, B: int = 100, seed=0,
                      threads: int = 1, tol: float = 1e-8, max_iter: int = 1000) -> pd.DataFrame:
    """Bootstrap covariance of the complete-pooling theta.

    Each replicate resamples records with replacement. Because the fit only
    depends on counts of distinct (outcome, probability row) combinations,
    a replicate is drawn as multinomial counts over those combinations,
    which has the same law as resampling records. Replicate ``b`` uses the
    ``b``-th child of ``SeedSequence(seed)``, so results do not depend on
    ``threads``.

    Returns
    -------
    DataFrame
        (|R||Y|) x (|R||Y|) covariance indexed by ``race|outcome`` labels.
    """
    spec = spec or OutcomeModelSpec()
    if spec.kind != "complete_pooling":
        raise ValueError("bootstrap_pooling needs a complete-pooling spec")
    if B < 2:
        raise ValueError("B must be at least 2")
    design = build_design(probs, records, spec)
    model, x_full, _, _, _ = _fit_design(design, spec, "squarem", tol, max_iter)
    n = float(design.weight.sum())
    share = design.weight / n
    root = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    # same children as root.spawn(B) on a fresh sequence, without mutating ``root``
    children = [np.random.SeedSequence(root.entropy, spawn_key=root.spawn_key + (b,))
                for b in range(B)]

    def one(child):
        rng = np.random.default_rng(child)
        counts = rng.multinomial(int(n), share).astype(float)
        _, x, _, _, _ = _fit_design(design, spec, "squarem", tol, max_iter, init=x_full, weight=counts)
        return model.public(x).ravel()

    threads = threads or os.cpu_count() or 1
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            draws = np.array(list(pool.map(one, children)))
    else:
        draws = np.array([one(c) for c in children])
    labels = [f"{r}|{y}" for r in probs.races for y in design.outcomes]
    cov = np.cov(draws, rowvar=False)
    cov = 0.5 * (cov + cov.T)
    return pd.DataFrame(cov, index=labels, columns=labels)
