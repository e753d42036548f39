"""Record, probability-matrix and estimate containers plus their CSV formats."""

from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import Optional, Sequence

import numpy as np
import pandas as pd

#: geo granularity levels, finest first, as they appear in ``records.csv``
GEO_LEVELS = ("block", "tract", "zcta", "county")

RECORD_COLUMNS = ["id", "surname"] + [f"geo_{lvl}" for lvl in GEO_LEVELS] + [
    "cov", "outcome", "extra", "true_race"]

UNDEFINED = "undefined"
UNIDENTIFIED = "unidentified"


def _as_str_array(values, n=None) -> np.ndarray:
    if values is None:
        return np.full(n, "", dtype=object)
    s = pd.Series(np.asarray(values, dtype=object), dtype=object)
    return s.where(s.notna(), "").astype(str).to_numpy(dtype=object)


def _codes(values: np.ndarray, levels: Optional[Sequence]) -> tuple[np.ndarray, tuple]:
    if levels is None:
        levels = tuple(sorted(set(values.tolist())))
    else:
        levels = tuple(str(v) for v in levels)
    codes = pd.Index(levels).get_indexer(values)
    if (codes < 0).any():
        bad = sorted(set(values[codes < 0].tolist()))[:5]
        raise ValueError(f"values outside the declared level set: {bad}")
    return codes.astype(np.int64), levels


@dataclass
class RecordTable:
    """Per-individual observations.

    ``geo`` maps each level in :data:`GEO_LEVELS` (or a subset) to an array of
    keys, ``""`` where the level is unknown. String arrays are kept as given;
    integer codes for outcomes, extra covariates and model cells are derived
    lazily.
    """

    surname: np.ndarray
    geo: dict
    cov: Optional[np.ndarray] = None
    outcome: Optional[np.ndarray] = None
    extra: Optional[np.ndarray] = None
    true_race: Optional[np.ndarray] = None
    ids: Optional[np.ndarray] = None
    outcome_levels: Optional[tuple] = None
    extra_levels: Optional[tuple] = None

    def __post_init__(self):
        self.surname = _as_str_array(self.surname)
        n = self.surname.shape[0]
        self.geo = {lvl: _as_str_array(v) for lvl, v in self.geo.items()}
        for lvl, v in self.geo.items():
            if v.shape[0] != n:
                raise ValueError(f"geo level {lvl!r} has {v.shape[0]} rows, expected {n}")
        self.cov = _as_str_array(self.cov, n)
        for name in ("outcome", "extra", "true_race"):
            v = getattr(self, name)
            if v is not None:
                v = _as_str_array(v)
                if v.shape[0] != n:
                    raise ValueError(f"{name} has {v.shape[0]} rows, expected {n}")
                setattr(self, name, v)
        if self.ids is None:
            self.ids = np.arange(n).astype(str).astype(object)
        else:
            self.ids = _as_str_array(self.ids)
        if self.geo:
            coarsest = self.levels[-1]
            if (self.geo[coarsest] == "").any():
                raise ValueError(f"every record needs the coarsest geo level ({coarsest!r})")

    @property
    def n(self) -> int:
        return int(self.surname.shape[0])

    def __len__(self):
        return self.n

    @property
    def levels(self) -> tuple:
        """Geo levels present, finest first."""
        known = [lvl for lvl in GEO_LEVELS if lvl in self.geo]
        other = [lvl for lvl in self.geo if lvl not in GEO_LEVELS]
        return tuple(known + other)

    @cached_property
    def _outcome_coding(self):
        if self.outcome is None:
            raise ValueError("records carry no outcome column")
        return _codes(self.outcome, self.outcome_levels)

    @property
    def y(self) -> np.ndarray:
        """Integer outcome codes."""
        return self._outcome_coding[0]

    @property
    def y_levels(self) -> tuple:
        return self._outcome_coding[1]

    @cached_property
    def _extra_coding(self):
        if self.extra is None:
            raise ValueError("records carry no extra column")
        return _codes(self.extra, self.extra_levels)

    @property
    def w(self) -> np.ndarray:
        return self._extra_coding[0]

    @property
    def w_levels(self) -> tuple:
        return self._extra_coding[1]

    def race_codes(self, races: Sequence) -> np.ndarray:
        if self.true_race is None:
            raise ValueError("records carry no true_race column")
        return _codes(self.true_race, races)[0]

    def geo_at(self, level: str) -> tuple[np.ndarray, np.ndarray]:
        """Geo key at ``level`` with per-record fallback to coarser levels.

        Returns the keys and the level each key was taken from.
        """
        levels = self.levels
        if level not in levels:
            raise ValueError(f"records have no geo level {level!r}")
        keys = np.full(self.n, "", dtype=object)
        used = np.full(self.n, "", dtype=object)
        for lvl in levels[levels.index(level):]:
            pending = keys == ""
            if not pending.any():
                break
            vals = self.geo[lvl]
            take = pending & (vals != "")
            keys[take] = vals[take]
            used[take] = lvl
        return keys, used

    def cells(self, level: Optional[str], extra_keys: Optional[np.ndarray] = None):
        """Integer codes of the (geo, cov) cells used by outcome models.

        ``level=None`` gives one cell per covariate value (no geography).
        ``extra_keys`` adds another per-record key (e.g. a surname group) to
        the cell. Cell keys are ``(geo_level, geo, cov[, extra])`` tuples in
        sorted order, so codes do not depend on record order.
        """
        if level is None:
            geo = np.full(self.n, "", dtype=object)
            used = geo
        else:
            geo, used = self.geo_at(level)
        cols = {"lvl": used, "geo": geo, "cov": self.cov}
        if extra_keys is not None:
            cols["extra"] = _as_str_array(extra_keys)
        df = pd.DataFrame(cols)
        grouped = df.groupby(list(cols), sort=True)
        codes = grouped.ngroup().to_numpy(dtype=np.int64)
        keys = [k if isinstance(k, tuple) else (k,) for k in grouped.groups.keys()]
        keys = sorted(keys)
        return codes, keys

    def subset(self, mask: np.ndarray) -> "RecordTable":
        idx = np.flatnonzero(mask) if np.asarray(mask).dtype == bool else np.asarray(mask)
        pick = lambda v: None if v is None else v[idx]  # noqa: E731
        return RecordTable(
            surname=self.surname[idx], geo={k: v[idx] for k, v in self.geo.items()},
            cov=self.cov[idx], outcome=pick(self.outcome), extra=pick(self.extra),
            true_race=pick(self.true_race), ids=self.ids[idx],
            outcome_levels=self.outcome_levels if self.outcome is None else self.y_levels,
            extra_levels=self.extra_levels if self.extra is None else self.w_levels)

    def with_outcome(self, outcome: np.ndarray, levels: Optional[Sequence] = None) -> "RecordTable":
        """Copy with a different outcome column (used for combined and W outcomes)."""
        return RecordTable(
            surname=self.surname, geo=self.geo, cov=self.cov, outcome=outcome,
            extra=self.extra, true_race=self.true_race, ids=self.ids,
            outcome_levels=None if levels is None else tuple(levels),
            extra_levels=self.extra_levels)

    # ---- CSV -------------------------------------------------------------
    @classmethod
    def read_csv(cls, path, outcome_levels=None, extra_levels=None) -> "RecordTable":
        df = pd.read_csv(path, dtype=str, keep_default_na=False)
        missing = [c for c in ("id", "surname", "geo_county") if c not in df.columns]
        if missing:
            raise ValueError(f"{path}: missing required columns {missing}")
        unknown = [c for c in df.columns if c not in RECORD_COLUMNS]
        if unknown:
            raise ValueError(f"{path}: unexpected columns {unknown}")
        geo = {lvl: df[f"geo_{lvl}"].to_numpy(object) for lvl in GEO_LEVELS
               if f"geo_{lvl}" in df.columns}

        def opt(col):
            if col not in df.columns or (df[col] == "").all():
                return None
            return df[col].to_numpy(object)

        outcome = opt("outcome")
        if outcome is not None and (outcome == "").any():
            raise ValueError(f"{path}: outcome column has empty cells")
        return cls(surname=df["surname"].to_numpy(object), geo=geo,
                   cov=df["cov"].to_numpy(object) if "cov" in df.columns else None,
                   outcome=outcome, extra=opt("extra"), true_race=opt("true_race"),
                   ids=df["id"].to_numpy(object),
                   outcome_levels=outcome_levels, extra_levels=extra_levels)

    def to_frame(self) -> pd.DataFrame:
        n = self.n
        out = {"id": self.ids, "surname": self.surname}
        for lvl in GEO_LEVELS:
            out[f"geo_{lvl}"] = self.geo.get(lvl, np.full(n, "", dtype=object))
        out["cov"] = self.cov
        for name in ("outcome", "extra", "true_race"):
            v = getattr(self, name)
            out[name] = np.full(n, "", dtype=object) if v is None else v
        return pd.DataFrame(out, columns=RECORD_COLUMNS)

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, lineterminator="\n")


@dataclass
class ProbMatrix:
    """Row-stochastic N x |R| matrix of race probabilities."""

    probs: np.ndarray
    races: tuple
    conditioning: str = "GXS"
    ids: Optional[np.ndarray] = None
    level_used: Optional[np.ndarray] = None

    def __post_init__(self):
        self.probs = np.asarray(self.probs, dtype=float)
        self.races = tuple(self.races)
        if self.probs.ndim != 2 or self.probs.shape[1] != len(self.races):
            raise ValueError(f"probs must be N x {len(self.races)}, got {self.probs.shape}")
        if (self.probs < 0).any():
            raise ValueError("probabilities must be nonnegative")
        sums = self.probs.sum(axis=1)
        if np.abs(sums - 1).max(initial=0) > 1e-9:
            raise ValueError("every probability row must sum to 1")

    @property
    def n(self) -> int:
        return self.probs.shape[0]

    def __len__(self):
        return self.n

    def to_csv(self, path):
        ids = self.ids if self.ids is not None else np.arange(self.n).astype(str)
        df = pd.DataFrame(self.probs, columns=list(self.races))
        df.insert(0, "id", ids)
        df.to_csv(path, index=False, float_format="%.17g", lineterminator="\n")

    @classmethod
    def read_csv(cls, path, conditioning="GXS") -> "ProbMatrix":
        df = pd.read_csv(path, dtype={"id": str}, keep_default_na=False,
                         float_precision="round_trip")
        if df.columns[0] != "id":
            raise ValueError(f"{path}: first column must be 'id'")
        races = tuple(df.columns[1:])
        probs = df[list(races)].to_numpy(float)
        # files written elsewhere may carry rounded decimals
        sums = probs.sum(axis=1, keepdims=True)
        if np.any(np.abs(sums - 1) > 1e-12):
            probs = probs / sums
        return cls(probs, races, conditioning, ids=df["id"].to_numpy(object))


@dataclass
class DisparityEstimate:
    """Estimated Pr(Y=y | R=r), optionally per (geo, cov) cell.

    ``mu`` is |Y| x |R|; undefined columns hold NaN and carry a flag.
    """

    method: str
    races: tuple
    outcomes: tuple
    mu: np.ndarray
    flags: list = field(default_factory=list)
    weights_r: Optional[np.ndarray] = None
    cell_keys: Optional[list] = None
    mu_cells: Optional[np.ndarray] = None
    cell_flags: Optional[list] = None
    info: dict = field(default_factory=dict)

    def __post_init__(self):
        self.races = tuple(self.races)
        self.outcomes = tuple(self.outcomes)
        self.mu = np.asarray(self.mu, dtype=float)
        if self.mu.shape != (len(self.outcomes), len(self.races)):
            raise ValueError("mu must be |Y| x |R|")
        if not self.flags:
            self.flags = [UNDEFINED if np.isnan(self.mu[:, k]).any() else ""
                          for k in range(len(self.races))]

    def defined(self) -> np.ndarray:
        return np.array([f == "" for f in self.flags])

    def to_frame(self) -> pd.DataFrame:
        rows = []
        for k, r in enumerate(self.races):
            for j, y in enumerate(self.outcomes):
                rows.append((self.method, y, r, self.mu[j, k], self.flags[k]))
        return pd.DataFrame(rows, columns=["method", "y", "r", "estimate", "flag"])

    def to_csv(self, path):
        self.to_frame().to_csv(path, index=False, float_format="%.17g",
                               lineterminator="\n", na_rep="")

    @classmethod
    def read_csv(cls, path) -> "DisparityEstimate":
        df = pd.read_csv(path, dtype={"y": str, "r": str, "flag": str, "method": str},
                         keep_default_na=False, na_values={"estimate": [""]},
                         float_precision="round_trip")
        if list(df.columns) != ["method", "y", "r", "estimate", "flag"]:
            raise ValueError(f"{path}: expected columns method,y,r,estimate,flag")
        races = tuple(dict.fromkeys(df["r"]))
        outcomes = tuple(dict.fromkeys(df["y"]))
        mu = np.full((len(outcomes), len(races)), np.nan)
        flags = [""] * len(races)
        for row in df.itertuples(index=False):
            k = races.index(row.r)
            mu[outcomes.index(row.y), k] = row.estimate
            if row.flag:
                flags[k] = row.flag
        return cls(str(df["method"].iloc[0]), races, outcomes, mu, flags)
