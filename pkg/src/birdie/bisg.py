"""Bayesian Improved Surname Geocoding."""

from __future__ import annotations

import numpy as np

from .census import CensusTables
from .data import ProbMatrix, RecordTable


def geo_factor(tables: CensusTables, records: RecordTable, level: str):
    """q_{G_i X_i | r} for every record, with per-record fallback to coarser levels.

    Returns the N x |R| factor and the level each row came from (``""`` when no
    level matched; those rows get a flat factor of one).
    """
    chain = tables.geo_fallbacks
    if level not in chain:
        raise ValueError(f"level {level!r} not among census levels {chain}")
    n, k = records.n, len(tables.races)
    factor = np.ones((n, k))
    used = np.full(n, "", dtype=object)
    pending = np.ones(n, dtype=bool)
    for lvl in chain[chain.index(level):]:
        if lvl not in records.geo or not pending.any():
            continue
        idx = np.flatnonzero(pending & (records.geo[lvl] != ""))
        if idx.size == 0:
            continue
        tab = tables.geo_tables[lvl]
        rows = tab.lookup(records.geo[lvl][idx], records.cov[idx])
        hit = rows >= 0
        factor[idx[hit]] = tab.probs[rows[hit]]
        used[idx[hit]] = lvl
        pending[idx[hit]] = False
    return factor, used


def surname_factor(tables: CensusTables, records: RecordTable) -> np.ndarray:
    rows = tables.surname_rows(records.surname)
    factor = tables.surname_given_race[np.clip(rows, 0, None)] if len(tables.surnames) \
        else np.zeros((records.n, len(tables.races)))
    unlisted = rows < 0
    if unlisted.any():
        other = tables.surname_residual
        factor[unlisted] = other if other.sum() > 0 else 1.0
    return factor


def bisg_predict(tables: CensusTables, records: RecordTable, level: str,
                 unmatched: str = "prior") -> ProbMatrix:
    """BISG race probabilities, proportional to q_{gx|r} q_{s|r} q_r.

    Parameters
    ----------
    tables : CensusTables
    records : RecordTable
    level : str
        Finest geo level to use. Records without a key at this level (or whose
        key is not in the table) fall back along ``tables.geo_fallbacks``.
    unmatched : {"prior", "drop"}
        What to do with rows whose numerator is zero for every race. ``"prior"``
        returns q_R for them; ``"drop"`` leaves them out of the result (align
        with records through ``ProbMatrix.ids``).

    Returns
    -------
    ProbMatrix
        With ``level_used`` recording the geo level that supplied each row.
    """
    if unmatched not in ("prior", "drop"):
        raise ValueError("unmatched must be 'prior' or 'drop'")
    gx, used = geo_factor(tables, records, level)
    num = gx * surname_factor(tables, records) * tables.prior
    total = num.sum(axis=1, keepdims=True)
    zero = total[:, 0] <= 0
    probs = np.divide(num, total, out=np.zeros_like(num), where=total > 0)
    ids = records.ids
    if zero.any():
        if unmatched == "prior":
            probs[zero] = tables.prior
        else:
            keep = ~zero
            probs, ids, used = probs[keep], ids[keep], used[keep]
    # exact renormalization keeps rows stochastic to rounding
    probs /= probs.sum(axis=1, keepdims=True)
    return ProbMatrix(probs, tables.races, "GXS", ids=ids, level_used=used)


def map_classify(probs: ProbMatrix) -> np.ndarray:
    """Maximum a posteriori race per row; ties go to the earliest race."""
    return np.asarray(probs.races, dtype=object)[map_codes(probs.probs)]


def map_codes(p: np.ndarray) -> np.ndarray:
    # np.argmax returns the first maximal index
    return np.argmax(p, axis=1)
