"""Census probability tables used by BISG.

Three kinds of table are read: the race prior ``prior.csv``, the surname
table ``surname_race.csv`` and one geo/covariate table ``geo_race_<level>.csv``
per geographic level. Each conditional column may sum to less than one; the
shortfall is kept as explicit residual mass (for surnames it is the mass of
the ``OTHER`` pseudo-surname that every unlisted name maps to).
"""

from __future__ import annotations

import os
import warnings
from dataclasses import dataclass, field, replace
from typing import Mapping, Optional, Sequence

import numpy as np
import pandas as pd

from .data import GEO_LEVELS

OTHER_SURNAME = "OTHER"

PRIOR_TOL = 1e-9
SURNAME_TOL = 1e-9
GEO_TOL = 1e-6


class CensusSchemaError(ValueError):
    """A census file does not match its documented layout."""


def _fmt(x: float) -> str:
    # repr() is the shortest string that reads back to the same double
    return repr(float(x))


@dataclass(frozen=True)
class GeoTable:
    """q_{GX|R} at one geographic level, rows keyed by ``(geo, cov)``."""

    level: str
    keys: tuple
    probs: np.ndarray
    residual: np.ndarray
    uses_cov: bool

    @property
    def index(self) -> pd.MultiIndex:
        return pd.MultiIndex.from_tuples(self.keys, names=["geo", "cov"])

    def lookup(self, geo: np.ndarray, cov: np.ndarray) -> np.ndarray:
        """Row index for each (geo, cov) pair, -1 where absent."""
        if not self.uses_cov:
            cov = np.full(len(geo), "", dtype=object)
        if len(self.keys) == 0:
            return np.full(len(geo), -1, dtype=np.int64)
        target = pd.MultiIndex.from_arrays([np.asarray(geo, dtype=object),
                                            np.asarray(cov, dtype=object)])
        return self.index.get_indexer(target).astype(np.int64)


@dataclass(frozen=True)
class CensusTables:
    races: tuple
    prior: np.ndarray
    surnames: tuple
    surname_given_race: np.ndarray
    surname_residual: np.ndarray
    geo_tables: dict = field(default_factory=dict)

    @property
    def geo_fallbacks(self) -> tuple:
        """Configured geo levels, finest first."""
        return tuple(self.geo_tables)

    def surname_rows(self, surnames: np.ndarray) -> np.ndarray:
        """Row index into ``surname_given_race`` per name, -1 for unlisted."""
        return pd.Index(self.surnames).get_indexer(np.asarray(surnames, dtype=object))

    def surname_lookup(self, surname: str) -> np.ndarray:
        k = self.surname_rows(np.array([surname], dtype=object))[0]
        return self.surname_residual.copy() if k < 0 else self.surname_given_race[k].copy()

    def save(self, directory) -> None:
        os.makedirs(directory, exist_ok=True)
        prior = pd.DataFrame({"race": list(self.races), "prob": [_fmt(p) for p in self.prior]})
        prior.to_csv(os.path.join(directory, "prior.csv"), index=False, lineterminator="\n")
        sur = pd.DataFrame([[s] + [_fmt(v) for v in row]
                            for s, row in zip(self.surnames, self.surname_given_race)],
                           columns=["surname"] + list(self.races))
        sur.to_csv(os.path.join(directory, "surname_race.csv"), index=False, lineterminator="\n")
        for level, tab in self.geo_tables.items():
            geo = pd.DataFrame([[g, c] + [_fmt(v) for v in row]
                                for (g, c), row in zip(tab.keys, tab.probs)],
                               columns=["geo", "cov"] + list(self.races))
            geo.to_csv(os.path.join(directory, f"geo_race_{level}.csv"), index=False,
                       lineterminator="\n")


def _check_races(path, found: Sequence, races: Sequence):
    if list(found) != list(races):
        raise CensusSchemaError(
            f"{path}: race columns {list(found)} inconsistent with race labels {list(races)}")


def _read(path) -> pd.DataFrame:
    if not os.path.exists(path):
        raise FileNotFoundError(path)
    return pd.read_csv(path, dtype=str, keep_default_na=False)


def _numeric(df: pd.DataFrame, cols, path) -> np.ndarray:
    try:
        arr = df[list(cols)].apply(pd.to_numeric).to_numpy(float)
    except (ValueError, TypeError) as e:
        raise CensusSchemaError(f"{path}: non-numeric probability ({e})") from None
    if not np.isfinite(arr).all():
        raise CensusSchemaError(f"{path}: non-finite probability")
    if (arr < 0).any():
        raise CensusSchemaError(f"{path}: negative probability")
    return arr


def _column_mass_check(mass: np.ndarray, races, tol, path):
    over = mass > 1 + tol
    if over.any():
        bad = [races[k] for k in np.flatnonzero(over)]
        raise CensusSchemaError(f"{path}: column mass exceeds 1 for race(s) {bad}")


def build_surname_table(surnames, probs, races, path="surname table"):
    """Split a surname table into listed rows and the OTHER residual."""
    surnames = [str(s) for s in surnames]
    probs = np.asarray(probs, dtype=float).reshape(len(surnames), len(races))
    if len(set(surnames)) != len(surnames):
        raise CensusSchemaError(f"{path}: duplicate surnames")
    _column_mass_check(probs.sum(axis=0), races, SURNAME_TOL, path)
    # an explicit OTHER row is folded into the residual
    if OTHER_SURNAME in surnames:
        k = surnames.index(OTHER_SURNAME)
        probs = np.delete(probs, k, axis=0)
        del surnames[k]
    residual = np.clip(1.0 - probs.sum(axis=0), 0.0, None)
    dead = np.flatnonzero(probs.sum(axis=1) == 0)
    if dead.size:
        names = [surnames[i] for i in dead[:5]]
        warnings.warn(f"{path}: {dead.size} surname(s) with zero mass for every race, e.g. {names}",
                      stacklevel=3)
    return tuple(surnames), probs, residual


def build_geo_table(level, geos, covs, probs, races, path="geo table") -> GeoTable:
    geos = [str(g) for g in geos]
    covs = ["" if c is None else str(c) for c in covs]
    probs = np.asarray(probs, dtype=float).reshape(len(geos), len(races))
    keys = tuple(zip(geos, covs))
    if len(set(keys)) != len(keys):
        raise CensusSchemaError(f"{path}: duplicate (geo, cov) rows")
    mass = probs.sum(axis=0)
    _column_mass_check(mass, races, GEO_TOL, path)
    uses_cov = any(c != "" for c in covs)
    if uses_cov and any(c == "" for c in covs):
        raise CensusSchemaError(f"{path}: cov must be filled on every row or on none")
    return GeoTable(level, keys, probs, np.clip(1.0 - mass, 0.0, None), uses_cov)


def load_census_tables(paths, race_labels: Sequence[str],
                       levels: Optional[Sequence[str]] = None) -> CensusTables:
    """Load and validate census tables.

    Parameters
    ----------
    paths : str or mapping
        Either a directory holding ``prior.csv``, ``surname_race.csv`` and
        ``geo_race_<level>.csv`` files, or a mapping with keys ``prior``,
        ``surname`` and ``geo`` (itself a ``{level: path}`` mapping).
    race_labels : sequence of str
        Expected race labels, in order. Every file must use exactly these.
    levels : sequence of str, optional
        Geo fallback order, finest first. Defaults to the standard
        block/tract/zcta/county order restricted to the files present.
    """
    races = tuple(race_labels)
    if isinstance(paths, Mapping):
        prior_path, surname_path = paths["prior"], paths["surname"]
        geo_paths = dict(paths.get("geo", {}))
    else:
        prior_path = os.path.join(paths, "prior.csv")
        surname_path = os.path.join(paths, "surname_race.csv")
        geo_paths = {}
        for fname in sorted(os.listdir(paths)):
            if fname.startswith("geo_race_") and fname.endswith(".csv"):
                geo_paths[fname[len("geo_race_"):-4]] = os.path.join(paths, fname)
    if levels is None:
        levels = [lvl for lvl in GEO_LEVELS if lvl in geo_paths]
        levels += sorted(lvl for lvl in geo_paths if lvl not in GEO_LEVELS)
    missing = [lvl for lvl in levels if lvl not in geo_paths]
    if missing:
        raise CensusSchemaError(f"no geo table for level(s) {missing}")

    df = _read(prior_path)
    if list(df.columns) != ["race", "prob"]:
        raise CensusSchemaError(f"{prior_path}: expected columns race,prob")
    _check_races(prior_path, df["race"].tolist(), races)
    prior = _numeric(df, ["prob"], prior_path)[:, 0]
    if abs(prior.sum() - 1) > PRIOR_TOL:
        raise CensusSchemaError(f"{prior_path}: prior sums to {prior.sum()!r}, not 1")

    df = _read(surname_path)
    if not df.columns.size or df.columns[0] != "surname":
        raise CensusSchemaError(f"{surname_path}: first column must be 'surname'")
    _check_races(surname_path, df.columns[1:], races)
    surnames, q_s, resid = build_surname_table(
        df["surname"].tolist(), _numeric(df, races, surname_path), races, surname_path)

    geo_tables = {}
    for level in levels:
        path = geo_paths[level]
        df = _read(path)
        if list(df.columns[:2]) != ["geo", "cov"]:
            raise CensusSchemaError(f"{path}: first columns must be 'geo,cov'")
        _check_races(path, df.columns[2:], races)
        geo_tables[level] = build_geo_table(level, df["geo"].tolist(), df["cov"].tolist(),
                                            _numeric(df, races, path), races, path)
    return CensusTables(races, prior, surnames, q_s, resid, geo_tables)


def set_population_prior(tables: CensusTables, prior) -> CensusTables:
    """Replace q_R by the (normalized) marginal race distribution of the study population."""
    prior = np.asarray(prior, dtype=float)
    if prior.shape != (len(tables.races),):
        raise ValueError(f"prior must have length {len(tables.races)}")
    if (prior < 0).any() or not np.isfinite(prior).all():
        raise ValueError("prior entries must be finite and nonnegative")
    total = prior.sum()
    if total <= 0:
        raise ValueError("prior must have positive mass")
    return replace(tables, prior=prior / total)


def make_census_tables(races, prior, surnames, surname_given_race, geo_tables) -> CensusTables:
    """Build validated tables from arrays.

    ``geo_tables`` maps level to ``(keys, probs)`` where ``keys`` is a list of
    ``(geo, cov)`` pairs.
    """
    races = tuple(races)
    prior = np.asarray(prior, dtype=float)
    if abs(prior.sum() - 1) > PRIOR_TOL or (prior < 0).any():
        raise CensusSchemaError("prior must be a probability vector")
    names, q_s, resid = build_surname_table(surnames, surname_given_race, races)
    geo = {}
    for level, (keys, probs) in geo_tables.items():
        geo[level] = build_geo_table(level, [k[0] for k in keys], [k[1] for k in keys],
                                     probs, races)
    return CensusTables(races, prior, names, q_s, resid, geo)
