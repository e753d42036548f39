"""Accuracy measures for disparity estimates and race probabilities."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd
from scipy.stats import rankdata

from .bisg import map_codes
from .data import UNDEFINED, DisparityEstimate, ProbMatrix

LOG_FLOOR = 1e-12


def _aligned(est: DisparityEstimate, truth: DisparityEstimate):
    """Truth columns/rows reordered to match ``est``; raises on differing supports."""
    if set(est.races) != set(truth.races) or set(est.outcomes) != set(truth.outcomes):
        raise ValueError("estimate and truth have different (outcome, race) supports")
    ri = [truth.races.index(r) for r in est.races]
    yi = [truth.outcomes.index(y) for y in est.outcomes]
    return est.mu, truth.mu[np.ix_(yi, ri)]


def tv_distance(est: DisparityEstimate, truth: DisparityEstimate, marginal_r) -> float:
    """Total variation distance between joint (outcome, race) tables.

    Both conditional tables are multiplied by the same race marginal
    Pr(R = r) (given in ``est.races`` order).
    """
    a, b = _aligned(est, truth)
    m = np.asarray(marginal_r, dtype=float)
    if m.shape != (a.shape[1],):
        raise ValueError("marginal_r must have one entry per race")
    return float(0.5 * np.abs((a - b) * m).sum())


def tv_within_race(est: DisparityEstimate, truth: DisparityEstimate) -> pd.Series:
    """Per-race TV distance between Pr(Y | R = r) tables; NaN for undefined races."""
    a, b = _aligned(est, truth)
    return pd.Series(0.5 * np.abs(a - b).sum(axis=0), index=list(est.races), name="tv")


def _qualifying(est_cells, truth_cells, counts, min_cell):
    est_cells = np.asarray(est_cells, dtype=float)
    truth_cells = np.asarray(truth_cells, dtype=float)
    if est_cells.shape != truth_cells.shape or est_cells.ndim != 3:
        raise ValueError("cell tables must both be areas x outcomes x races")
    n_area, _, n_r = est_cells.shape
    counts = np.full((n_area, n_r), np.inf) if counts is None else np.asarray(counts, float)
    ok = (counts >= min_cell) & np.isfinite(est_cells).all(axis=1) & np.isfinite(truth_cells).all(axis=1)
    if not ok.any():
        raise ValueError(f"no area-race cell has at least {min_cell} records")
    return est_cells, truth_cells, ok


def small_area_mean_tv(est_cells, truth_cells, counts=None, min_cell: int = 5,
                       races=None) -> pd.Series:
    """Mean over areas of the within-race TV distance.

    ``est_cells`` and ``truth_cells`` are areas x outcomes x races; area-race
    cells with fewer than ``min_cell`` records (per ``counts``, areas x races)
    are skipped.
    """
    est, tru, ok = _qualifying(est_cells, truth_cells, counts, min_cell)
    tv = 0.5 * np.abs(est - tru).sum(axis=1)              # areas x races
    out = np.array([tv[ok[:, k], k].mean() if ok[:, k].any() else np.nan
                    for k in range(tv.shape[1])])
    return pd.Series(out, index=races, name="mean_tv")


def rmse_and_correlation(est_cells, truth_cells, counts=None, min_cell: int = 5,
                         races=None) -> pd.DataFrame:
    """Per race, RMSE over (outcome, area) entries and mean cross-area correlation.

    The correlation is computed across qualifying areas for each outcome level
    and then averaged over levels whose estimate and truth both vary; it is
    NaN when no level qualifies.
    """
    est, tru, ok = _qualifying(est_cells, truth_cells, counts, min_cell)
    rows = []
    for k in range(est.shape[2]):
        a, b = est[ok[:, k], :, k], tru[ok[:, k], :, k]
        if a.shape[0] == 0:
            rows.append((np.nan, np.nan))
            continue
        rmse = float(np.sqrt(np.mean((a - b) ** 2)))
        cors = []
        for j in range(a.shape[1]):
            if a.shape[0] > 1 and np.ptp(a[:, j]) > 0 and np.ptp(b[:, j]) > 0:
                cors.append(np.corrcoef(a[:, j], b[:, j])[0, 1])
        rows.append((rmse, float(np.mean(cors)) if cors else np.nan))
    return pd.DataFrame(rows, columns=["rmse", "corr"], index=races)


def _true_codes(probs: ProbMatrix, true_race) -> np.ndarray:
    tr = np.asarray(true_race, dtype=object).astype(str)
    codes = pd.Index(probs.races).get_indexer(tr)
    if (codes < 0).any():
        raise ValueError("true_race has labels outside the probability columns")
    return codes


def log_score(probs: ProbMatrix, true_race) -> float:
    """Mean log-probability assigned to the true race (entries floored at 1e-12)."""
    codes = _true_codes(probs, true_race)
    p = probs.probs[np.arange(probs.n), codes]
    return float(np.mean(np.log(np.maximum(p, LOG_FLOOR))))


def map_accuracy(probs: ProbMatrix, true_race) -> float:
    codes = _true_codes(probs, true_race)
    return float(np.mean(map_codes(probs.probs) == codes))


def roc_auc(probs: ProbMatrix, true_race) -> pd.Series:
    """One-vs-rest AUC per race from the rank-sum statistic (midranks for ties).

    NaN for races with no positive or no negative cases.
    """
    codes = _true_codes(probs, true_race)
    out = []
    for k in range(len(probs.races)):
        pos = codes == k
        n1, n0 = int(pos.sum()), int((~pos).sum())
        if n1 == 0 or n0 == 0:
            out.append(np.nan)
            continue
        ranks = rankdata(probs.probs[:, k])
        out.append((ranks[pos].sum() - n1 * (n1 + 1) / 2) / (n1 * n0))
    return pd.Series(out, index=list(probs.races), name="auc")


# ---- cell tables -----------------------------------------------------------

def empirical_cell_tables(cell_codes, n_cells: int, y, n_y: int, race_codes, n_r: int):
    """True Pr(Y | R, area) tables from labelled records, with area-race counts.

    Returns (areas x outcomes x races table with NaN where empty, areas x races counts).
    """
    cnt = np.zeros((n_cells, n_y, n_r))
    np.add.at(cnt, (cell_codes, y, race_codes), 1.0)
    tot = cnt.sum(axis=1)
    tab = np.divide(cnt, tot[:, None, :], out=np.full_like(cnt, np.nan), where=tot[:, None, :] > 0)
    return tab, tot


# ---- report ----------------------------------------------------------------

@dataclass
class EvalReport:
    """Tidy metric table with columns ``metric,scope,key,value,flag``."""

    rows: list = field(default_factory=list)

    def add(self, metric: str, value, scope: str = "overall", key: str = "",
            flag: Optional[str] = None):
        if isinstance(value, pd.Series):
            for k, v in value.items():
                self.add(metric, v, scope, str(k))
            return self
        v = float(value)
        self.rows.append((metric, scope, key, v, flag if flag is not None else
                          (UNDEFINED if np.isnan(v) else "")))
        return self

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(self.rows, columns=["metric", "scope", "key", "value", "flag"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n",
                               na_rep="")
