"""Pr(Y | W, R) for an extra covariate W that BISG did not use.

Two routes are offered. The joint route fits BIRDiE to the combined outcome
(Y, W) and conditions afterwards. The two-step route first fits BIRDiE to W,
then uses the W-updated race probabilities as inputs to a separate fit of Y
within every W stratum.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import pandas as pd

from .census import CensusTables
from .data import UNDEFINED, ProbMatrix, RecordTable
from .em import estimate_from_fit, fit_birdie
from .models import OutcomeModelSpec

JOINT_CAP = 64
_SEP = "\x1f"


@dataclass
class ConditionalEstimate:
    """``mu[y, w, r]`` = estimated Pr(Y = y | W = w, R = r)."""

    approach: str
    outcomes: tuple
    extras: tuple
    races: tuple
    mu: np.ndarray
    flags: np.ndarray          # |W| x |R|, "" or "undefined"
    intermediate: dict = field(default_factory=dict, repr=False)

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for k, r in enumerate(self.races):
            for i, w in enumerate(self.extras):
                for j, y in enumerate(self.outcomes):
                    rows.append((self.approach, y, w, r, self.mu[j, i, k], self.flags[i, k]))
        return pd.DataFrame(rows, columns=["approach", "y", "w", "r", "estimate", "flag"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g", lineterminator="\n",
                               na_rep="")


def _normalize_over_y(joint: np.ndarray):
    """joint[y, w, r] -> conditional over y, flagging (w, r) with no mass."""
    tot = joint.sum(axis=0)
    mu = np.divide(joint, tot[None], out=np.full_like(joint, np.nan), where=tot[None] > 0)
    flags = np.where(tot > 0, "", UNDEFINED).astype(object)
    return mu, flags


def estimate_joint(probs: ProbMatrix, records: RecordTable,
                   spec: Optional[OutcomeModelSpec] = None, tables: Optional[CensusTables] = None,
                   cap: int = JOINT_CAP, **fit_kw) -> ConditionalEstimate:
    """Fit the combined outcome (Y, W), then condition on W.

    Raises
    ------
    ValueError
        If |Y| x |W| exceeds ``cap``; use :func:`estimate_two_step` instead.
    """
    spec = spec or OutcomeModelSpec()
    ny, nw = len(records.y_levels), len(records.w_levels)
    if ny * nw > cap:
        raise ValueError(f"combined outcome has {ny * nw} levels (> {cap}); "
                         "use the two-step approach")
    combined = (records.y * nw + records.w)
    levels = [f"{y}{_SEP}{w}" for y in records.y_levels for w in records.w_levels]
    labels = np.asarray(levels, dtype=object)[combined]
    fit = fit_birdie(probs, records.with_outcome(labels, levels), spec, **fit_kw)
    est = estimate_from_fit(fit, tables)
    joint = est.mu.reshape(ny, nw, -1)
    mu, flags = _normalize_over_y(np.nan_to_num(joint))
    return ConditionalEstimate("joint", records.y_levels, records.w_levels, probs.races,
                               mu, flags, {"fit": fit})


def estimate_two_step(probs: ProbMatrix, records: RecordTable,
                      spec_w: Optional[OutcomeModelSpec] = None,
                      spec_y: Optional[OutcomeModelSpec] = None, **fit_kw) -> ConditionalEstimate:
    """Fit W first, then Y within each W stratum from the W-updated probabilities.

    Stratum estimates weight cells by posterior race mass within the stratum,
    since census tables do not condition on W. Strata with no records are
    flagged undefined.
    """
    spec_w = spec_w or OutcomeModelSpec()
    spec_y = spec_y or spec_w
    fit_w = fit_birdie(probs, records.with_outcome(records.extra, records.w_levels), spec_w, **fit_kw)
    p_w = fit_w.updated_probs
    ny, nw, nr = len(records.y_levels), len(records.w_levels), len(probs.races)
    mu = np.full((ny, nw, nr), np.nan)
    flags = np.full((nw, nr), UNDEFINED, dtype=object)
    fits = {}
    for i, w in enumerate(records.w_levels):
        idx = np.flatnonzero(records.w == i)
        if idx.size == 0:
            continue
        sub = records.subset(idx)
        sub_p = ProbMatrix(p_w.probs[idx], p_w.races, p_w.conditioning, ids=sub.ids)
        fit = fit_birdie(sub_p, sub, spec_y, **fit_kw)
        est = estimate_from_fit(fit)
        fits[w] = fit
        for k in range(nr):
            if est.flags[k] == "":
                mu[:, i, k] = est.mu[:, k]
                flags[i, k] = ""
    return ConditionalEstimate("two_step", records.y_levels, records.w_levels, probs.races,
                               mu, flags, {"fit_w": fit_w, "probs_w": p_w, "fits_y": fits})


def conditional_tv(est: ConditionalEstimate, truth: np.ndarray, joint_wr: np.ndarray) -> float:
    """TV distance between Pr(Y, W, R) tables built from conditionals and true Pr(W, R).

    ``truth`` is |Y| x |W| x |R| and ``joint_wr`` is the true Pr(W = w, R = r).
    """
    diff = np.nan_to_num(est.mu - truth, nan=1.0)
    return float(0.5 * np.abs(diff * joint_wr[None]).sum())
