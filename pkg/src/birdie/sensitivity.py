"""Checks of the surname exclusion restriction and bounds on BISG-error bias.

* :func:`residual_correlation` correlates BIRDiE outcome residuals with
  surname-group indicators; correlations away from zero suggest surname
  affects the outcome beyond race, geography and covariates.
* :func:`refit_with_groups` refits with surname group as an extra cell key.
* :func:`bias_bound` gives the first-order worst-case shift of a posterior
  quantity when the input probabilities are off by a perturbation of given
  total norm.
* :func:`ols_perturbation_bias` gives the exact bias of the cell least-squares
  estimator under a known perturbation.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np
import pandas as pd
from scipy.stats import norm

from .baseline import census_cell_weights, numerical_rank
from .census import CensusTables
from .data import UNDEFINED, DisparityEstimate, ProbMatrix, RecordTable
from .em import OutcomeFit, build_design, estimate_from_fit, fit_birdie
from .models import OutcomeModelSpec

DEFAULT_GROUP = "Other"


# ---- surname groups --------------------------------------------------------

@dataclass
class SurnameGroups:
    """Map from surname to group label; unmapped names go to ``default``."""

    mapping: dict
    default: str = DEFAULT_GROUP

    def assign(self, surnames) -> np.ndarray:
        s = pd.Series(np.asarray(surnames, dtype=object))
        return s.map(self.mapping).fillna(self.default).to_numpy(dtype=object)

    @property
    def labels(self) -> list:
        return sorted(set(self.mapping.values()) | {self.default})

    @classmethod
    def read_csv(cls, path, default: str = DEFAULT_GROUP) -> "SurnameGroups":
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        if list(df.columns) != ["surname", "group"]:
            raise ValueError(f"{path}: expected columns surname,group")
        if df["surname"].duplicated().any():
            raise ValueError(f"{path}: duplicate surnames")
        return cls(dict(zip(df["surname"], df["group"])), default)

    def to_csv(self, path):
        df = pd.DataFrame(sorted(self.mapping.items()), columns=["surname", "group"])
        df.to_csv(path, index=False, lineterminator="\n")


# ---- residual correlation --------------------------------------------------

def fitted_outcome_probs(fit: OutcomeFit) -> np.ndarray:
    """N x |Y| fitted Pr(Y_i = y) = sum_r updated_ir * Pr(y | r, cell_i)."""
    upd = fit.updated_probs.probs
    out = np.zeros((upd.shape[0], len(fit.outcomes)))
    for c in range(fit.cell_probs.shape[0]):
        idx = np.flatnonzero(fit.cell_index == c)
        if idx.size:
            out[idx] = upd[idx] @ fit.cell_probs[c]
    return out


def residual_correlation(fit: OutcomeFit, records: RecordTable, groups: SurnameGroups,
                         level: float = 0.90) -> pd.DataFrame:
    """Pearson correlation of outcome residuals with each surname-group indicator.

    The residual for record i and level y is 1{Y_i = y} minus the fitted
    probability. Confidence intervals use the Fisher z transform with a
    normal approximation. A residual column that is identically zero gets
    correlation 0. Groups with fewer than two members, or containing every
    record, are flagged undefined.

    Returns
    -------
    DataFrame with columns ``group,y,correlation,ci_lo,ci_hi,flag``.
    """
    n = records.n
    resid = np.eye(len(fit.outcomes))[records.y] - fitted_outcome_probs(fit)
    member = groups.assign(records.surname)
    zq = norm.ppf(0.5 + level / 2)
    rows = []
    for g in sorted(set(member.tolist()) | set(groups.labels)):
        ind = (member == g).astype(float)
        m = int(ind.sum())
        for j, y in enumerate(fit.outcomes):
            if m < 2 or m == n or n < 4:
                rows.append((g, y, np.nan, np.nan, np.nan, UNDEFINED))
                continue
            e = resid[:, j]
            sd = e.std()
            rho = 0.0 if sd <= 1e-12 else float(np.corrcoef(e, ind)[0, 1])
            z = np.arctanh(np.clip(rho, -1 + 1e-15, 1 - 1e-15))
            half = zq / np.sqrt(n - 3)
            rows.append((g, y, rho, float(np.tanh(z - half)), float(np.tanh(z + half)), ""))
    return pd.DataFrame(rows, columns=["group", "y", "correlation", "ci_lo", "ci_hi", "flag"])


# ---- refit with groups -----------------------------------------------------

@dataclass
class RefitResult:
    fit: OutcomeFit
    base_fit: OutcomeFit
    estimate: DisparityEstimate
    base_estimate: DisparityEstimate
    change: pd.DataFrame          # y, r, base, refit, change

    @property
    def mean_abs_change(self) -> float:
        return float(self.change["change"].abs().mean())

    @property
    def max_abs_change(self) -> float:
        return float(self.change["change"].abs().max())


def group_weights(tables: CensusTables, groups: SurnameGroups) -> dict:
    """q_{f|r}: census surname mass of each group (unlisted mass goes to the default)."""
    labels = groups.assign(np.asarray(tables.surnames, dtype=object))
    out = {g: np.zeros(len(tables.races)) for g in groups.labels}
    for g in set(labels.tolist()):
        out[g] = tables.surname_given_race[labels == g].sum(axis=0)
    out[groups.default] = out.get(groups.default, 0) + tables.surname_residual
    return out


def refit_with_groups(probs: ProbMatrix, records: RecordTable, groups: SurnameGroups,
                      spec: Optional[OutcomeModelSpec] = None,
                      tables: Optional[CensusTables] = None,
                      base_fit: Optional[OutcomeFit] = None, **fit_kw) -> RefitResult:
    """Refit with surname group added to the model cells and compare with the base fit.

    A complete-pooling base becomes a model saturated in the group; other
    models gain the group as an extra cell key. With census ``tables`` the
    refit is aggregated with weights q_{gx|r} q_{f|r}; otherwise by posterior
    race mass.
    """
    spec = spec or OutcomeModelSpec()
    base_fit = base_fit or fit_birdie(probs, records, spec, **fit_kw)
    if spec.kind == "complete_pooling":
        refit_spec = OutcomeModelSpec("saturated", alpha=spec.alpha, level=None, use_cov=False)
    else:
        refit_spec = spec
    member = groups.assign(records.surname)
    fit = fit_birdie(probs, records, refit_spec, extra_keys=member, **fit_kw)
    base_est = estimate_from_fit(base_fit, tables)
    weights = None
    if tables is not None:
        qf = group_weights(tables, groups)
        w = []
        for key in fit.cell_keys:
            gx = census_cell_weights(tables, [key])[0] if key[0] else np.ones(len(fit.races))
            w.append(gx * qf.get(key[-1], np.zeros(len(fit.races))))
        weights = np.array(w)
    est = estimate_from_fit(fit, cell_weights=weights)
    rows = []
    for k, r in enumerate(fit.races):
        for j, y in enumerate(fit.outcomes):
            rows.append((y, r, base_est.mu[j, k], est.mu[j, k], est.mu[j, k] - base_est.mu[j, k]))
    change = pd.DataFrame(rows, columns=["y", "r", "base", "refit", "change"])
    return RefitResult(fit, base_fit, est, base_est, change)


# ---- bias bound ------------------------------------------------------------

@dataclass
class BiasBoundReport:
    """First-order worst-case shift of each quantity for total input error ``delta``.

    ``cov_norm`` is the Frobenius norm of the posterior covariance between
    the quantity and the per-record, per-race perturbation score;
    ``direction`` (N x |R| per quantity) is that covariance itself.
    """

    quantities: list
    delta: float
    bound: np.ndarray
    cov_norm: np.ndarray
    draws: int
    direction: Optional[np.ndarray] = field(default=None, repr=False)

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"quantity": self.quantities, "delta": self.delta,
                             "bound": self.bound})

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n")


def _dirichlet_rows(rng, conc: np.ndarray) -> np.ndarray:
    g = rng.standard_gamma(conc)
    s = g.sum(axis=-1, keepdims=True)
    return np.divide(g, s, out=np.full_like(g, 1.0 / g.shape[-1]), where=s > 0)


def dirichlet_draws(fit: OutcomeFit, draws: int, seed=0) -> np.ndarray:
    """Draws from the conjugate Dirichlet given the final sufficient statistics.

    This conditions on the imputed race weights, so it understates posterior
    spread when race is uncertain. Returns draws x C x |R| x |Y| (C = 1 for
    complete pooling).
    """
    alpha = fit.spec.alpha_vector(len(fit.outcomes))
    stats = fit.suffstats
    if fit.spec.kind == "complete_pooling":
        stats = stats.sum(axis=0, keepdims=True)
    rng = np.random.default_rng(seed)
    return np.stack([_dirichlet_rows(rng, stats + alpha) for _ in range(draws)])


DRAW_FLOOR = 1e-10


def laplace_draws(fit: OutcomeFit, probs: ProbMatrix, records: RecordTable, draws: int,
                  seed=0, design=None) -> np.ndarray:
    """Normal draws around the posterior mode with the observed-data curvature.

    Each (cell, race) outcome vector is parameterized by its first |Y| - 1
    entries. The Hessian of the marginal log-posterior is block diagonal
    over cells, so every cell is drawn independently. Draws that leave the
    simplex are clipped at a small positive floor and renormalized, so every
    outcome keeps nonzero probability. Returns
    draws x C x |R| x |Y| (C = 1 for complete pooling).
    """
    design = design or build_design(probs, records, fit.spec)
    theta = np.asarray(fit.theta, dtype=float)
    theta = theta[None] if theta.ndim == 2 else theta
    n_c, n_r, n_y = theta.shape
    k = n_r * (n_y - 1)
    alpha = fit.spec.alpha_vector(n_y)
    rng = np.random.default_rng(seed)
    out = np.repeat(theta[None], draws, axis=0)
    cell = design.cell if n_c > 1 else np.zeros_like(design.cell)
    order = np.argsort(cell, kind="stable")
    bounds = np.searchsorted(cell[order], np.arange(n_c + 1))
    for c in range(n_c):
        rows = order[bounds[c]:bounds[c + 1]]
        t = theta[c]
        lik = t[:, design.y[rows]].T                         # m x R
        v = design.p[rows] / (lik * design.p[rows]).sum(axis=1, keepdims=True)
        b = np.zeros((rows.size, n_r, n_y - 1))
        y = design.y[rows]
        inner = y < n_y - 1
        b[np.flatnonzero(inner), :, y[inner]] = v[inner]
        b[~inner] = -v[~inner][:, :, None]
        b = b.reshape(rows.size, k)
        info = (b * design.weight[rows, None]).T @ b
        curv = (alpha - 1.0) / np.clip(t, 1e-12, None) ** 2      # R x Y, prior curvature
        for r in range(n_r):
            sl = slice(r * (n_y - 1), (r + 1) * (n_y - 1))
            info[sl, sl] += np.diag(curv[r, :-1]) + curv[r, -1]
        vals, vecs = np.linalg.eigh(0.5 * (info + info.T))
        vals = np.maximum(vals, 1e-12 * max(vals.max(), 1.0))
        z = rng.standard_normal((draws, k)) / np.sqrt(vals)
        free = t[:, :-1].ravel() + z @ vecs.T
        free = free.reshape(draws, n_r, n_y - 1)
        full = np.concatenate([free, 1.0 - free.sum(axis=2, keepdims=True)], axis=2)
        full = np.clip(full, DRAW_FLOOR, None)
        out[:, c] = full / full.sum(axis=2, keepdims=True)
    return out


DRAW_METHODS = ("laplace", "dirichlet")


def bias_bound(fit: OutcomeFit, probs: ProbMatrix, records: RecordTable,
               g_fn: Callable[[np.ndarray], np.ndarray], delta_norm: float,
               draws: int = 500, seed=0, names: Optional[Sequence[str]] = None,
               method: str = "laplace", theta_draws: Optional[np.ndarray] = None,
               keep_direction: bool = False) -> BiasBoundReport:
    """Worst-case first-order bias of E[g(theta)] for input error of norm ``delta_norm``.

    Parameters
    ----------
    fit : OutcomeFit
        Complete-pooling or saturated fit.
    g_fn : callable
        Maps one posterior draw, laid out like ``fit.theta`` (|R| x |Y| for
        pooling, C x |R| x |Y| for the saturated model), to a scalar or
        vector of quantities.
    delta_norm : float
        Total Frobenius norm of the input-probability error.
    draws : int
        Number of posterior draws (at least 10).
    method : {"laplace", "dirichlet"}
        Source of posterior draws; see :func:`laplace_draws` and
        :func:`dirichlet_draws`.
    theta_draws : array, optional
        Precomputed draws (draws x C x |R| x |Y|) used instead of ``method``.
    keep_direction : bool
        Also return the covariance matrices (the worst-case error directions).

    Notes
    -----
    For draw d and record i, the score of race r is
    theta_d[r, cell_i, y_i] / sum_r' theta_d[r', cell_i, y_i] P_ir'. The bound
    is ``delta_norm`` times the Frobenius norm of the draw covariance between
    g and the score matrix. Identical records share a score, so the norm is
    accumulated over distinct rows with multiplicities.
    """
    if fit.spec.kind == "mixed_effects":
        raise ValueError("bias_bound needs a complete-pooling or saturated fit")
    if delta_norm < 0:
        raise ValueError("delta_norm must be nonnegative")
    design = build_design(probs, records, fit.spec)
    if theta_draws is not None:
        thetas = np.asarray(theta_draws, dtype=float)
        if thetas.ndim == 3:
            thetas = thetas[:, None]
    elif method == "laplace":
        thetas = laplace_draws(fit, probs, records, draws, seed, design)
    elif method == "dirichlet":
        thetas = dirichlet_draws(fit, draws, seed)
    else:
        raise ValueError(f"method must be one of {DRAW_METHODS}")
    if thetas.shape[0] < 10:
        raise ValueError("bias_bound needs at least 10 posterior draws")
    n_draws = thetas.shape[0]
    pooled = fit.spec.kind == "complete_pooling"
    gs = np.array([np.atleast_1d(np.asarray(g_fn(t[0] if pooled else t), dtype=float))
                   for t in thetas])
    cell = design.cell if thetas.shape[1] > 1 else np.zeros_like(design.cell)
    # shifting by the first draw first makes identical draws centre to exactly zero
    gc = gs - gs[0]
    gc -= gc.mean(axis=0)
    m, n_r = design.p.shape
    cross = np.zeros((gs.shape[1], m, n_r))
    for d in range(n_draws):
        lik = thetas[d][cell, :, design.y]           # M x R
        denom = np.maximum((lik * design.p).sum(axis=1, keepdims=True), np.finfo(float).tiny)
        score = lik / denom
        cross += gc[d][:, None, None] * score[None]
    cov = cross / n_draws                            # centred g makes this the covariance
    cov_norm = np.sqrt(np.einsum("qmr,m->q", cov ** 2, design.weight))
    names = list(names) if names is not None else [f"q{j}" for j in range(gs.shape[1])]
    direction = cov[:, design.inverse, :] if keep_direction else None
    return BiasBoundReport(names, float(delta_norm), delta_norm * cov_norm, cov_norm, n_draws,
                           direction)


# ---- OLS perturbation bias -------------------------------------------------

def ols_perturbation_bias(probs_cell, delta_cell, mu_true) -> np.ndarray:
    """Exact bias (P'P)^{-1} P' delta mu of cell least squares under input error delta.

    ``probs_cell`` and ``delta_cell`` are n x |R|; ``mu_true`` is |R| x |Y|
    (or a length-|R| vector). Raises if ``probs_cell`` is rank deficient.
    """
    p = np.asarray(probs_cell, dtype=float)
    d = np.asarray(delta_cell, dtype=float)
    mu = np.asarray(mu_true, dtype=float)
    if p.shape != d.shape:
        raise ValueError("probs_cell and delta_cell must have the same shape")
    if numerical_rank(p) < p.shape[1]:
        raise ValueError("probs_cell is rank deficient")
    return np.linalg.solve(p.T @ p, p.T @ (d @ mu))
