"""Weighting, thresholding and least-squares disparity estimators."""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import pandas as pd

from .bisg import map_codes
from .census import CensusTables
from .data import UNDEFINED, UNIDENTIFIED, DisparityEstimate, ProbMatrix, RecordTable


def check_aligned(probs: ProbMatrix, records: RecordTable):
    if probs.n != records.n:
        raise ValueError(f"probs has {probs.n} rows but records has {records.n}")
    if probs.ids is not None and not np.array_equal(probs.ids, records.ids):
        raise ValueError("probs and records ids are not aligned")


def weighted_table(y: np.ndarray, n_y: int, p: np.ndarray) -> np.ndarray:
    """|Y| x |R| table of sum_i 1{y_i = y} p_ir."""
    return np.stack([np.bincount(y, weights=p[:, k], minlength=n_y)
                     for k in range(p.shape[1])], axis=1)


def _conditional(num: np.ndarray, den: np.ndarray):
    mu = np.full(num.shape, np.nan)
    ok = den > 0
    mu[:, ok] = num[:, ok] / den[ok]
    return mu, [("" if d else UNDEFINED) for d in ok]


def weighting_estimate(probs: ProbMatrix, records: RecordTable) -> DisparityEstimate:
    """Probability-weighted outcome frequencies by race.

    Races with zero total weight are left undefined (NaN with a flag).
    """
    check_aligned(probs, records)
    p = probs.probs
    num = weighted_table(records.y, len(records.y_levels), p)
    mu, flags = _conditional(num, p.sum(axis=0))
    return DisparityEstimate("weighting", probs.races, records.y_levels, mu, flags,
                             weights_r=p.mean(axis=0) if probs.n else None)


def thresholding_estimate(probs: ProbMatrix, records: RecordTable) -> DisparityEstimate:
    """Outcome frequencies after assigning each record its MAP race."""
    check_aligned(probs, records)
    k = len(probs.races)
    onehot = np.eye(k)[map_codes(probs.probs)]
    num = weighted_table(records.y, len(records.y_levels), onehot)
    mu, flags = _conditional(num, onehot.sum(axis=0))
    return DisparityEstimate("thresholding", probs.races, records.y_levels, mu, flags,
                             weights_r=onehot.mean(axis=0) if probs.n else None)


def weighting_bias_formula(records: RecordTable, probs: ProbMatrix, y, r) -> float:
    """Asymptotic bias of the weighting estimator for binary race.

    Returns -E[Cov(1{Y=y}, 1{R=r} | G, X, S)] / Pr(R=r). Cells are the
    distinct (all geo levels, cov, surname) combinations; within a cell the
    race expectation is the cell mean of the supplied probabilities, so the
    covariance estimate has no small-cell degrees-of-freedom bias.
    """
    check_aligned(probs, records)
    if len(probs.races) != 2:
        raise ValueError("the weighting-bias formula is only available for binary race")
    j = records.y_levels.index(str(y))
    k = probs.races.index(r)
    iy = (records.y == j).astype(float)
    ir = (records.race_codes(probs.races) == k).astype(float)
    cols = {f"g_{lvl}": records.geo[lvl] for lvl in records.levels}
    cols.update(cov=records.cov, s=records.surname)
    cell = pd.DataFrame(cols).groupby(list(cols), sort=True).ngroup().to_numpy()
    n_cell = np.bincount(cell)
    p_cell = np.bincount(cell, weights=probs.probs[:, k]) / n_cell
    e_yr = np.bincount(cell, weights=iy * ir) / n_cell
    e_y = np.bincount(cell, weights=iy) / n_cell
    cov = e_yr - e_y * p_cell
    expected_cov = np.sum(n_cell * cov) / records.n
    return float(-expected_cov / ir.mean())


# ---- least squares --------------------------------------------------------

def numerical_rank(m: np.ndarray) -> int:
    """Rank with threshold max(dim) * eps * sigma_max."""
    m = np.atleast_2d(np.asarray(m, dtype=float))
    if m.size == 0:
        return 0
    s = np.linalg.svd(m, compute_uv=False)
    if s[0] == 0:
        return 0
    return int(np.sum(s > max(m.shape) * np.finfo(float).eps * s[0]))


def check_identification(probs_cell, outcome_cell) -> str:
    """Classify a cell system P mu = b.

    Returns ``"identified"`` when P and the augmented matrix (P | b) both have
    rank |R|, ``"rank_deficient"`` when P has lower rank, and
    ``"inconsistent"`` when b lies outside the column space of P.
    """
    p = np.atleast_2d(np.asarray(probs_cell, dtype=float))
    b = np.asarray(outcome_cell, dtype=float).reshape(p.shape[0], -1)
    k = p.shape[1]
    if numerical_rank(p) < k:
        return "rank_deficient"
    if numerical_rank(np.hstack([p, b])) > k:
        return "inconsistent"
    return "identified"


def _split_by_cell(codes: np.ndarray, n_cells: int):
    order = np.argsort(codes, kind="stable")
    bounds = np.searchsorted(codes[order], np.arange(n_cells + 1))
    return [order[bounds[c]:bounds[c + 1]] for c in range(n_cells)]


def ols_cell(p: np.ndarray, y_onehot: np.ndarray) -> Optional[np.ndarray]:
    """(P'P)^{-1} P' 1{Y=y} for all y at once (|R| x |Y|), None if rank deficient."""
    if numerical_rank(p) < p.shape[1]:
        return None
    return np.linalg.solve(p.T @ p, p.T @ y_onehot)


def ols_estimate(probs: ProbMatrix, records: RecordTable,
                 level: Optional[str] = None) -> DisparityEstimate:
    """Cell-level least-squares estimates of Pr(Y | R, G, X).

    Cells are (geo at ``level``, cov); ``level=None`` uses the finest geo
    level the records carry. Rank-deficient cells are flagged
    ``"unidentified"`` and left as NaN. ``mu`` aggregates identified cells with
    weights proportional to the in-cell probability mass of each race; use
    :func:`ols_poststratify` for census weights.
    """
    check_aligned(probs, records)
    if level is None and records.levels:
        level = records.levels[0]
    codes, keys = records.cells(level)
    n_y, n_r = len(records.y_levels), len(probs.races)
    onehot = np.eye(n_y)[records.y]
    cells = np.full((len(keys), n_y, n_r), np.nan)
    cell_flags = []
    mass = np.zeros((len(keys), n_r))
    for c, idx in enumerate(_split_by_cell(codes, len(keys))):
        p = probs.probs[idx]
        mass[c] = p.sum(axis=0)
        sol = ols_cell(p, onehot[idx])
        if sol is None:
            cell_flags.append(UNIDENTIFIED)
        else:
            cells[c] = sol.T
            cell_flags.append("")
    n_bad = cell_flags.count(UNIDENTIFIED)
    if n_bad:
        warnings.warn(f"{n_bad} of {len(keys)} cells are not identified and were excluded",
                      stacklevel=2)
    ok = np.array([f == "" for f in cell_flags], dtype=bool)
    mu, flags = _aggregate(cells, ok, mass)
    return DisparityEstimate("ols", probs.races, records.y_levels, mu, flags,
                             weights_r=probs.probs.mean(axis=0), cell_keys=keys,
                             mu_cells=cells, cell_flags=cell_flags)


def _aggregate(cells: np.ndarray, ok: np.ndarray, weights: np.ndarray):
    """Weighted average of cell tables over identified cells, per race."""
    w = np.where(ok[:, None], weights, 0.0)
    total = w.sum(axis=0)
    n_y, n_r = cells.shape[1], cells.shape[2]
    mu = np.full((n_y, n_r), np.nan)
    flags = []
    safe = np.where(ok[:, None, None], cells, 0.0)
    for k in range(n_r):
        if total[k] > 0:
            mu[:, k] = (safe[:, :, k] * w[:, k, None]).sum(axis=0) / total[k]
            flags.append("")
        else:
            flags.append(UNDEFINED)
    return mu, flags


def census_cell_weights(tables: CensusTables, keys) -> np.ndarray:
    """q_{gx|r} for each cell key ``(level, geo, cov, ...)``; raises when absent."""
    w = np.zeros((len(keys), len(tables.races)))
    for c, key in enumerate(keys):
        level, geo, cov = key[0], key[1], key[2]
        tab = tables.geo_tables.get(level)
        if tab is None:
            raise KeyError(f"no census table at level {level!r} for cell {key}")
        row = tab.lookup(np.array([geo], dtype=object), np.array([cov], dtype=object))[0]
        if row < 0:
            raise KeyError(f"cell {key} has no census weight q_(gx|r)")
        w[c] = tab.probs[row]
    return w


def ols_poststratify(cell_estimates: DisparityEstimate, tables: CensusTables) -> DisparityEstimate:
    """Aggregate cell estimates with census weights q_{gx|r}.

    Unidentified cells are dropped and the weights renormalized over the
    remaining cells, race by race.
    """
    est = cell_estimates
    if est.mu_cells is None:
        raise ValueError("estimate carries no cell-level tables")
    ok = np.array([f == "" for f in est.cell_flags], dtype=bool)
    w = census_cell_weights(tables, est.cell_keys)
    mu, flags = _aggregate(est.mu_cells, ok, w)
    if UNDEFINED in flags:
        bad = [r for r, f in zip(est.races, flags) if f]
        raise ValueError(f"every cell is unidentified for race(s) {bad}")
    return DisparityEstimate("ols_poststrat", est.races, est.outcomes, mu, flags,
                             weights_r=tables.prior, cell_keys=est.cell_keys,
                             mu_cells=est.mu_cells, cell_flags=est.cell_flags)


@dataclass
class EqualityReport:
    """Outcome of comparing weighting and OLS estimates within one cell."""

    verdict: str
    wtd: np.ndarray
    ols: np.ndarray
    orthogonal: np.ndarray
    same_estimate: np.ndarray

    @property
    def condition_holds(self) -> bool:
        """Every race pair either perfectly discriminates or shares a weighting estimate."""
        return bool(np.all(self.orthogonal | self.same_estimate))


def wtd_ols_equality_check(probs_cell, outcome_cell, tol: float = 1e-9) -> EqualityReport:
    """Compare weighting and OLS estimates for one outcome level in one cell."""
    p = np.asarray(probs_cell, dtype=float)
    b = np.asarray(outcome_cell, dtype=float).ravel()
    if numerical_rank(p) < p.shape[1]:
        raise ValueError("cell probability matrix is rank deficient")
    wtd = (p.T @ b) / p.sum(axis=0)
    ols = np.linalg.solve(p.T @ p, p.T @ b)
    gram = p.T @ p
    orthogonal = gram <= tol * np.sqrt(np.outer(np.diag(gram), np.diag(gram)))
    np.fill_diagonal(orthogonal, False)
    same = np.abs(wtd[:, None] - wtd[None, :]) <= tol
    verdict = "equal" if np.max(np.abs(wtd - ols)) <= tol else "unequal"
    return EqualityReport(verdict, wtd, ols, orthogonal, same)
