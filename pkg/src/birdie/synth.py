"""Synthetic populations with known ground truth, and exact identification oracles.

A :class:`DagConfig` fixes the full sampling law: race, then surname and
(geo, cov) independently given race, then the outcome (and optionally an
extra covariate W). Census tables are computed exactly from the law, so BISG
probabilities equal the true Pr(R | G, X, S) unless a perturbation is asked for.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from typing import Optional, Sequence

import numpy as np
from scipy.special import softmax

from .baseline import check_identification
from .census import CensusTables, make_census_tables
from .data import DisparityEstimate, RecordTable

GEO_LEVEL = "county"
ROW_TOL = 1e-12


@dataclass
class DagConfig:
    """Sampling law of a synthetic population.

    Array layouts (all nested lists in the JSON file):

    * ``prior_r``: |R|
    * ``s_given_r``: |S| x |R|, columns sum to one
    * ``gx_given_r``: |G| x |X| x |R|, each race slice sums to one
    * ``y_given_rgx``: |R| x |G| x |X| x |Y|, the outcome law when S has no
      direct effect
    * ``y_given_gxs``: optional |G| x |X| x |S| x |Y|; when set it replaces
      ``y_given_rgx`` and the outcome ignores race given (G, X, S)
    * ``surname_group``: optional group label per surname
    * ``group_effect``: optional ``{group: [logit shift per outcome]}`` added
      to the outcome logits of records whose surname is in that group
    * ``w_given_rgx``: optional |R| x |G| x |X| x |W| law of an extra covariate;
      requires ``y_given_rgxw`` (|R| x |G| x |X| x |W| x |Y|), which then
      replaces ``y_given_rgx``
    """

    races: list
    surnames: list
    geos: list
    covs: list
    outcomes: list
    prior_r: list
    s_given_r: list
    gx_given_r: list
    y_given_rgx: Optional[list] = None
    y_given_gxs: Optional[list] = None
    surname_group: Optional[list] = None
    group_effect: Optional[dict] = None
    extras: Optional[list] = None
    w_given_rgx: Optional[list] = None
    y_given_rgxw: Optional[list] = None
    seed: int = 0

    def __post_init__(self):
        self.validate()

    # array views
    def arr(self, name) -> Optional[np.ndarray]:
        v = getattr(self, name)
        return None if v is None else np.asarray(v, dtype=float)

    @property
    def shape(self):
        return (len(self.races), len(self.surnames), len(self.geos), len(self.covs),
                len(self.outcomes))

    def validate(self):
        n_r, n_s, n_g, n_x, n_y = self.shape

        def stochastic(name, expected, axis):
            a = self.arr(name)
            if a.shape != expected:
                raise ValueError(f"{name} has shape {a.shape}, expected {expected}")
            if (a < 0).any():
                raise ValueError(f"{name} has negative entries")
            s = a.sum(axis=axis)
            if np.abs(s - 1).max(initial=0) > ROW_TOL:
                raise ValueError(f"{name} is not stochastic within {ROW_TOL}")

        stochastic("prior_r", (n_r,), 0)
        stochastic("s_given_r", (n_s, n_r), 0)
        stochastic("gx_given_r", (n_g, n_x, n_r), (0, 1))
        laws = [self.y_given_rgx is not None, self.y_given_gxs is not None,
                self.y_given_rgxw is not None]
        if sum(laws) != 1:
            raise ValueError("exactly one of y_given_rgx, y_given_gxs, y_given_rgxw must be set")
        if self.y_given_rgx is not None:
            stochastic("y_given_rgx", (n_r, n_g, n_x, n_y), -1)
        if self.y_given_gxs is not None:
            stochastic("y_given_gxs", (n_g, n_x, n_s, n_y), -1)
        if (self.w_given_rgx is None) != (self.y_given_rgxw is None):
            raise ValueError("w_given_rgx and y_given_rgxw must be given together")
        if self.w_given_rgx is not None:
            if not self.extras:
                raise ValueError("extras labels required with w_given_rgx")
            n_w = len(self.extras)
            stochastic("w_given_rgx", (n_r, n_g, n_x, n_w), -1)
            stochastic("y_given_rgxw", (n_r, n_g, n_x, n_w, n_y), -1)
        if self.group_effect is not None:
            if self.surname_group is None or len(self.surname_group) != n_s:
                raise ValueError("group_effect needs a group label for every surname")
            for g, shift in self.group_effect.items():
                if len(shift) != n_y:
                    raise ValueError(f"group_effect[{g!r}] needs one shift per outcome")

    # ---- serialization ---------------------------------------------------
    def to_json(self, path):
        with open(path, "w") as fh:
            json.dump(asdict(self), fh, indent=1)

    @classmethod
    def from_json(cls, path) -> "DagConfig":
        with open(path) as fh:
            return cls(**json.load(fh))

    @classmethod
    def from_arrays(cls, **kw) -> "DagConfig":
        out = {}
        for k, v in kw.items():
            out[k] = v.tolist() if isinstance(v, np.ndarray) else v
        return cls(**out)


# ---- config builders -------------------------------------------------------

def _labels(prefix, n):
    width = len(str(n - 1))
    return [f"{prefix}{i:0{width}d}" for i in range(n)]


def random_config(seed=0, n_races=4, n_surnames=200, n_geos=30, n_covs=2, n_outcomes=4,
                  surname_concentration=0.3, geo_concentration=3.0, race_effect=2.0,
                  geo_effect=0.0, cov_effect=0.0, prior_r=None) -> DagConfig:
    """Random population in which the outcome depends on race, geography and cov only.

    Parameters
    ----------
    surname_concentration : float
        Dirichlet concentration of Pr(S | R); smaller values make surnames more
        race-specific.
    geo_concentration : float
        Dirichlet concentration of Pr(G, X | R); smaller values mean more
        residential segregation.
    race_effect, geo_effect, cov_effect : float
        Standard deviations of the race, geo and cov contributions to the
        outcome logits. ``geo_effect = cov_effect = 0`` makes the outcome
        independent of (G, X) given race, so the complete-pooling model holds.
    """
    rng = np.random.default_rng(seed)
    prior = rng.dirichlet(np.full(n_races, 4.0)) if prior_r is None else np.asarray(prior_r, float)
    s_given_r = rng.dirichlet(np.full(n_surnames, surname_concentration), size=n_races).T
    gx = rng.dirichlet(np.full(n_geos * n_covs, geo_concentration), size=n_races).T
    gx = gx.reshape(n_geos, n_covs, n_races)
    logits = (race_effect * rng.standard_normal((n_races, 1, 1, n_outcomes))
              + geo_effect * rng.standard_normal((n_races, n_geos, 1, n_outcomes))
              + cov_effect * rng.standard_normal((1, 1, n_covs, n_outcomes)))
    logits = np.broadcast_to(logits, (n_races, n_geos, n_covs, n_outcomes))
    return DagConfig.from_arrays(
        races=_labels("r", n_races), surnames=_labels("S", n_surnames),
        geos=_labels("g", n_geos), covs=_labels("x", n_covs), outcomes=_labels("y", n_outcomes),
        prior_r=_normalize(prior), s_given_r=_normalize(s_given_r, 0),
        gx_given_r=_normalize(gx, (0, 1)), y_given_rgx=_normalize(softmax(logits, axis=-1), -1),
        seed=int(seed))


def _normalize(a, axis=None):
    a = np.asarray(a, dtype=float)
    return a / a.sum(axis=axis, keepdims=axis is not None)


def add_extra_covariate(config: DagConfig, n_extra=3, seed=0, w_race_effect=1.0,
                        y_w_effect=1.0) -> DagConfig:
    """Add a covariate W drawn given (R, G, X) and make Y depend on W as well.

    W is independent of surname given (R, G, X) and Y depends on (R, G, X, W)
    only, so surname is still excluded from the outcome law.
    """
    rng = np.random.default_rng(seed)
    n_r, n_s, n_g, n_x, n_y = config.shape
    base = config.arr("y_given_rgx")
    if base is None:
        raise ValueError("add_extra_covariate needs a y_given_rgx law")
    w_logit = w_race_effect * rng.standard_normal((n_r, 1, 1, n_extra))
    w_law = softmax(np.broadcast_to(w_logit, (n_r, n_g, n_x, n_extra)), axis=-1)
    shift = y_w_effect * rng.standard_normal((n_r, 1, 1, n_extra, n_y))
    y_law = softmax(np.log(base)[:, :, :, None, :] + shift, axis=-1)
    kw = asdict(config)
    kw.update(extras=_labels("w", n_extra), w_given_rgx=_normalize(w_law, -1).tolist(),
              y_given_rgxw=_normalize(y_law, -1).tolist(), y_given_rgx=None)
    return DagConfig(**kw)


def add_group_effect(config: DagConfig, groups: Sequence, shifts: dict) -> DagConfig:
    """Attach surname groups and per-group outcome logit shifts."""
    kw = asdict(config)
    kw.update(surname_group=[str(g) for g in groups],
              group_effect={str(k): list(map(float, v)) for k, v in shifts.items()})
    return DagConfig(**kw)


def home_race_groups(config: DagConfig) -> list:
    """Group each surname by the race in which it is most common (relative to the prior)."""
    s_r = config.arr("s_given_r") * config.arr("prior_r")
    return [f"grp_{config.races[k]}" for k in np.argmax(s_r, axis=1)]


# ---- exact laws ------------------------------------------------------------

def outcome_law(config: DagConfig) -> np.ndarray:
    """Pr(Y | R, G, X, S) as an |R| x |G| x |X| x |S| x |Y| array (W marginalized)."""
    n_r, n_s, n_g, n_x, n_y = config.shape
    if config.y_given_gxs is not None:
        law = np.broadcast_to(config.arr("y_given_gxs")[None], (n_r, n_g, n_x, n_s, n_y))
    elif config.y_given_rgxw is not None:
        w = config.arr("w_given_rgx")
        y = np.einsum("rgxw,rgxwy->rgxy", w, config.arr("y_given_rgxw"))
        law = np.broadcast_to(y[:, :, :, None, :], (n_r, n_g, n_x, n_s, n_y))
    else:
        law = np.broadcast_to(config.arr("y_given_rgx")[:, :, :, None, :], (n_r, n_g, n_x, n_s, n_y))
    if config.group_effect:
        shift = np.array([config.group_effect.get(g, [0.0] * n_y) for g in config.surname_group])
        if config.y_given_rgxw is not None:
            raise ValueError("group effects with an extra covariate are not supported")
        law = softmax(np.log(np.clip(law, 1e-300, None)) + shift[None, None, None], axis=-1)
    return np.asarray(law)


def joint_rgxs(config: DagConfig) -> np.ndarray:
    """Pr(R, G, X, S) as |R| x |G| x |X| x |S|."""
    return np.einsum("r,gxr,sr->rgxs", config.arr("prior_r"), config.arr("gx_given_r"),
                     config.arr("s_given_r"))


def true_disparity(config: DagConfig) -> DisparityEstimate:
    """Population Pr(Y | R)."""
    joint = joint_rgxs(config)
    pry = np.einsum("rgxs,rgxsy->ry", joint, outcome_law(config))
    mu = (pry / pry.sum(axis=1, keepdims=True)).T
    return DisparityEstimate("truth", config.races, config.outcomes, mu)


def true_cell_disparity(config: DagConfig) -> np.ndarray:
    """Population Pr(Y | R, G, X) as |R| x |G| x |X| x |Y| (NaN where Pr(R, G, X) = 0)."""
    joint = joint_rgxs(config)
    num = np.einsum("rgxs,rgxsy->rgxy", joint, outcome_law(config))
    den = num.sum(axis=-1, keepdims=True)
    return np.divide(num, den, out=np.full_like(num, np.nan), where=den > 0)


def true_conditional(config: DagConfig) -> np.ndarray:
    """Population Pr(Y | W, R) as |Y| x |W| x |R|."""
    if config.w_given_rgx is None:
        raise ValueError("config has no extra covariate")
    pgx = config.arr("gx_given_r")
    num = np.einsum("gxr,rgxw,rgxwy->ywr", pgx, config.arr("w_given_rgx"),
                    config.arr("y_given_rgxw"))
    return num / num.sum(axis=0, keepdims=True)


def race_marginal(config: DagConfig) -> np.ndarray:
    return config.arr("prior_r").copy()


# ---- census tables ---------------------------------------------------------

def census_from_config(config: DagConfig) -> CensusTables:
    """Census tables equal to the true conditional laws."""
    gx = config.arr("gx_given_r")
    keys = [(g, x) for g in config.geos for x in config.covs]
    return make_census_tables(config.races, config.arr("prior_r"), config.surnames,
                              config.arr("s_given_r"),
                              {GEO_LEVEL: (keys, gx.reshape(-1, len(config.races)))})


def perturb_surname_table(tables: CensusTables, delta_norm: float, seed=0) -> CensusTables:
    """Surname table plus a random perturbation of Frobenius norm about ``delta_norm``.

    The perturbation has zero column sums before clipping at zero; columns are
    renormalized afterwards so the result is a valid table.
    """
    from dataclasses import replace
    rng = np.random.default_rng(seed)
    q = tables.surname_given_race
    d = rng.standard_normal(q.shape)
    d -= d.mean(axis=0, keepdims=True)
    d *= delta_norm / np.linalg.norm(d)
    new = np.clip(q + d, 0.0, None)
    mass = q.sum(axis=0)
    new = new / new.sum(axis=0, keepdims=True) * mass
    return replace(tables, surname_given_race=new)


# ---- sampling --------------------------------------------------------------

def _categorical(rng, probs: np.ndarray) -> np.ndarray:
    """One categorical draw per row of ``probs``."""
    cdf = np.cumsum(probs, axis=1)
    u = rng.random(probs.shape[0]) * cdf[:, -1]
    return np.minimum((cdf < u[:, None]).sum(axis=1), probs.shape[1] - 1)


def generate(config: DagConfig, n: int, seed=None, delta_norm: float = 0.0):
    """Sample ``n`` records and return them with exact census tables.

    Parameters
    ----------
    config : DagConfig
    n : int
    seed : int or SeedSequence, optional
        Defaults to ``config.seed``.
    delta_norm : float
        When positive, the returned census surname table is perturbed (see
        :func:`perturb_surname_table`) so BISG no longer matches the truth.

    Returns
    -------
    (RecordTable, CensusTables)
    """
    seed = config.seed if seed is None else seed
    ss = seed if isinstance(seed, np.random.SeedSequence) else np.random.SeedSequence(seed)
    sample_seed, perturb_seed = (np.random.SeedSequence(ss.entropy, spawn_key=ss.spawn_key + (k,))
                                 for k in range(2))
    rng = np.random.default_rng(sample_seed)
    n_r, n_s, n_g, n_x, n_y = config.shape
    race = rng.choice(n_r, size=n, p=config.arr("prior_r"))
    surname = np.zeros(n, dtype=np.int64)
    gx = np.zeros(n, dtype=np.int64)
    s_law, gx_law = config.arr("s_given_r"), config.arr("gx_given_r").reshape(n_g * n_x, n_r)
    for k in range(n_r):
        idx = np.flatnonzero(race == k)
        surname[idx] = rng.choice(n_s, size=idx.size, p=s_law[:, k])
        gx[idx] = rng.choice(n_g * n_x, size=idx.size, p=gx_law[:, k])
    g, x = np.divmod(gx, n_x)
    extra = None
    if config.w_given_rgx is not None:
        w = _categorical(rng, config.arr("w_given_rgx")[race, g, x])
        y = _categorical(rng, config.arr("y_given_rgxw")[race, g, x, w])
        extra = np.asarray(config.extras, dtype=object)[w]
    else:
        law = outcome_law(config)
        y = _categorical(rng, law[race, g, x, surname])
    labels = lambda names, codes: np.asarray(names, dtype=object)[codes]  # noqa: E731
    records = RecordTable(
        surname=labels(config.surnames, surname), geo={GEO_LEVEL: labels(config.geos, g)},
        cov=labels(config.covs, x), outcome=labels(config.outcomes, y), extra=extra,
        true_race=labels(config.races, race), ids=np.arange(n).astype(str).astype(object),
        outcome_levels=tuple(config.outcomes),
        extra_levels=tuple(config.extras) if config.extras else None)
    tables = census_from_config(config)
    if delta_norm > 0:
        tables = perturb_surname_table(tables, delta_norm, perturb_seed)
    return records, tables


# ---- oracle ----------------------------------------------------------------

@dataclass
class OracleResult:
    status: str               # identified | rank_deficient | inconsistent
    mu: Optional[np.ndarray]  # |R| x |Y| when identified
    P: np.ndarray = field(repr=False, default=None)
    b: np.ndarray = field(repr=False, default=None)

    @property
    def identified(self) -> bool:
        return self.status == "identified"


def oracle_solve(config: DagConfig, cell) -> OracleResult:
    """Exact Pr(Y | R, g, x) from population quantities in one cell.

    Builds P (rows Pr(R | g, x, s) over surnames present in the cell) and b
    (rows Pr(Y | g, x, s)), checks ranks and solves P mu = b by least
    squares when identified.
    """
    gi = config.geos.index(cell[0]) if not isinstance(cell[0], (int, np.integer)) else int(cell[0])
    xi = config.covs.index(cell[1]) if not isinstance(cell[1], (int, np.integer)) else int(cell[1])
    joint = joint_rgxs(config)[:, gi, xi, :]       # R x S
    law = outcome_law(config)[:, gi, xi]           # R x S x Y
    ps = joint.sum(axis=0)
    keep = ps > 0
    p_mat = (joint[:, keep] / ps[keep]).T          # S' x R
    b = np.einsum("sr,rsy->sy", p_mat, law[:, keep])
    status = check_identification(p_mat, b)
    mu = None
    if status == "identified":
        mu = np.linalg.lstsq(p_mat, b, rcond=None)[0]
    return OracleResult(status, mu, p_mat, b)


def true_w_race_joint(config: DagConfig) -> np.ndarray:
    """Population Pr(W = w, R = r) as |W| x |R|."""
    if config.w_given_rgx is None:
        raise ValueError("config has no extra covariate")
    return np.einsum("r,gxr,rgxw->wr", config.arr("prior_r"), config.arr("gx_given_r"),
                     config.arr("w_given_rgx"))
