"""Complete-data outcome models for BIRDiE and their M-steps.

All M-steps consume sufficient statistics ``stats[c, r, y]``: the summed
posterior race weight of records in model cell ``c`` with outcome ``y``.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Optional

import numpy as np
from scipy import stats as sps
from scipy.special import gammaln, log_softmax, softmax, xlogy

KINDS = ("complete_pooling", "saturated", "mixed_effects")
_ALIASES = {"pooling": "complete_pooling", "no_pooling": "saturated", "mixed": "mixed_effects"}

PHI_MIN = 1e-6


class MixedModelConvergenceError(RuntimeError):
    """Inner optimizer failed; ``params`` holds the last iterate."""

    def __init__(self, message, params):
        super().__init__(message)
        self.params = params


@dataclass
class OutcomeModelSpec:
    """Outcome model choice and priors.

    Parameters
    ----------
    kind : {"complete_pooling", "saturated", "mixed_effects"}
    alpha : float or array
        Dirichlet concentration over outcome levels (pooling and saturated).
        The M-step returns the posterior mode, so ``alpha = 1`` is weighted
        maximum likelihood.
    fixed_effect_sd : float
        Prior sd of every fixed-effect coefficient (mixed).
    intercept_scale_shape, intercept_scale_rate : float
        Gamma prior on the random-intercept sd (mixed). Defaults give a prior
        centred at 0.2.
    intercept_scale : float, optional
        Hold the random-intercept sd fixed at this value instead of estimating it.
    group_covariates : mapping, optional
        ``{geo key: vector}`` of numeric area-level covariates, entered as
        fixed effects (mixed).
    level : str, optional
        Geo level defining model cells (saturated) or random intercepts
        (mixed). ``None`` ignores geography.
    use_cov : bool
        Whether the covariate X is part of the model cell (saturated) or a
        fixed effect (mixed).
    """

    kind: str = "complete_pooling"
    alpha: object = 1.0
    fixed_effect_sd: float = 1.0
    intercept_scale_shape: float = 2.0
    intercept_scale_rate: float = 10.0
    intercept_scale: Optional[float] = None
    group_covariates: Optional[Mapping] = None
    level: Optional[str] = None
    use_cov: bool = True
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        self.kind = _ALIASES.get(self.kind, self.kind)
        if self.kind not in KINDS:
            raise ValueError(f"unknown model kind {self.kind!r}; expected one of {KINDS}")
        if np.any(np.asarray(self.alpha, dtype=float) <= 0):
            raise ValueError("alpha entries must be positive")
        if self.fixed_effect_sd <= 0:
            raise ValueError("fixed_effect_sd must be positive")
        if self.intercept_scale_shape <= 0 or self.intercept_scale_rate <= 0:
            raise ValueError("Gamma prior parameters must be positive")

    def alpha_vector(self, n_y: int) -> np.ndarray:
        a = np.asarray(self.alpha, dtype=float)
        if a.ndim == 0:
            return np.full(n_y, float(a))
        if a.shape != (n_y,):
            raise ValueError(f"alpha has length {a.size}, outcome has {n_y} levels")
        return a


# ---- Dirichlet models ------------------------------------------------------

def dirichlet_map(counts: np.ndarray, alpha: np.ndarray):
    """Posterior mode of Dir(alpha) given weighted counts along the last axis.

    Rows with no mass (possible only when ``alpha <= 1``) come back uniform and
    are flagged in the returned mask.
    """
    num = np.clip(counts + alpha - 1.0, 0.0, None)
    total = num.sum(axis=-1, keepdims=True)
    empty = total[..., 0] <= 0
    theta = np.divide(num, total, out=np.full_like(num, 1.0 / num.shape[-1]), where=total > 0)
    return theta, empty


def m_step_pooling(suffstats: np.ndarray, spec: OutcomeModelSpec):
    """theta_r = Dirichlet mode given outcome weights pooled over cells.

    Returns the |R| x |Y| table and a mask of races with no weight.
    """
    s = np.asarray(suffstats, dtype=float)
    if s.ndim == 3:
        s = s.sum(axis=0)
    return dirichlet_map(s, spec.alpha_vector(s.shape[-1]))


def m_step_saturated(suffstats: np.ndarray, spec: OutcomeModelSpec):
    """Independent Dirichlet modes per (cell, race); returns C x |R| x |Y| and the empty mask."""
    s = np.asarray(suffstats, dtype=float)
    return dirichlet_map(s, spec.alpha_vector(s.shape[-1]))


def dirichlet_log_prior(theta: np.ndarray, alpha: np.ndarray) -> float:
    rows = int(np.prod(theta.shape[:-1]))
    const = gammaln(alpha.sum()) - gammaln(alpha).sum()
    return float(rows * const + xlogy(alpha - 1.0, theta).sum())


# ---- mixed-effects model ---------------------------------------------------

@dataclass
class MixedDesign:
    """Fixed-effect rows per cell and the geo unit of each cell."""

    fixed: np.ndarray      # C x p
    geo_index: np.ndarray  # C
    n_geo: int
    fixed_names: list

    @property
    def n_fixed(self) -> int:
        return self.fixed.shape[1]


def mixed_design(cell_keys, spec: OutcomeModelSpec) -> MixedDesign:
    """Intercept, indicators for cov and any extra cell key (first level dropped) and group covariates."""
    geos = sorted({(k[0], k[1]) for k in cell_keys})
    geo_index = np.array([geos.index((k[0], k[1])) for k in cell_keys], dtype=np.int64)
    cols = [np.ones(len(cell_keys))]
    names = ["(intercept)"]
    if spec.use_cov:
        covs = sorted({k[2] for k in cell_keys})
        for cv in covs[1:]:
            cols.append(np.array([1.0 if k[2] == cv else 0.0 for k in cell_keys]))
            names.append(f"cov[{cv}]")
    extras = sorted({k[3] for k in cell_keys if len(k) > 3})
    for ev in extras[1:]:
        cols.append(np.array([1.0 if len(k) > 3 and k[3] == ev else 0.0 for k in cell_keys]))
        names.append(f"extra[{ev}]")
    if spec.group_covariates:
        rows = []
        for k in cell_keys:
            if k[1] not in spec.group_covariates:
                raise KeyError(f"no group covariates for geo {k[1]!r}")
            rows.append(np.atleast_1d(np.asarray(spec.group_covariates[k[1]], dtype=float)))
        rows = np.vstack(rows)
        for j in range(rows.shape[1]):
            cols.append(rows[:, j])
            names.append(f"group[{j}]")
    return MixedDesign(np.column_stack(cols), geo_index, len(geos), names)


@dataclass
class MixedParams:
    """Per-race coefficients; the first outcome level is the reference category.

    ``beta`` is |R| x p x (|Y|-1), ``u`` is |R| x G x (|Y|-1), ``phi`` is
    |R| x (|Y|-1) random-intercept sds.
    """

    beta: np.ndarray
    u: np.ndarray
    phi: np.ndarray

    def to_vector(self) -> np.ndarray:
        return np.concatenate([self.beta.ravel(), self.u.ravel(), np.log(self.phi).ravel()])

    @classmethod
    def from_vector(cls, vec, like: "MixedParams") -> "MixedParams":
        nb, nu = like.beta.size, like.u.size
        return cls(vec[:nb].reshape(like.beta.shape), vec[nb:nb + nu].reshape(like.u.shape),
                   np.exp(vec[nb + nu:]).reshape(like.phi.shape))

    def copy(self) -> "MixedParams":
        return MixedParams(self.beta.copy(), self.u.copy(), self.phi.copy())


def mixed_init(design: MixedDesign, n_r: int, n_y: int, spec: OutcomeModelSpec) -> MixedParams:
    phi0 = spec.intercept_scale if spec.intercept_scale is not None else \
        spec.intercept_scale_shape / spec.intercept_scale_rate
    return MixedParams(np.zeros((n_r, design.n_fixed, n_y - 1)),
                       np.zeros((n_r, design.n_geo, n_y - 1)),
                       np.full((n_r, n_y - 1), max(phi0, PHI_MIN)))


def _linear_predictor(design: MixedDesign, beta_r, u_r):
    """C x |Y| logits with a zero reference column."""
    eta = design.fixed @ beta_r + u_r[design.geo_index]
    return np.hstack([np.zeros((eta.shape[0], 1)), eta])


def mixed_probs(params: MixedParams, design: MixedDesign) -> np.ndarray:
    """Implied cell probabilities, C x |R| x |Y|."""
    out = [softmax(_linear_predictor(design, params.beta[r], params.u[r]), axis=1)
           for r in range(params.beta.shape[0])]
    return np.stack(out, axis=1)


def mixed_log_prior(params: MixedParams, spec: OutcomeModelSpec) -> float:
    lp = sps.norm.logpdf(params.beta, scale=spec.fixed_effect_sd).sum()
    lp += sps.norm.logpdf(params.u, scale=params.phi[:, None, :]).sum()
    if spec.intercept_scale is None:
        lp += sps.gamma.logpdf(params.phi, spec.intercept_scale_shape,
                               scale=1.0 / spec.intercept_scale_rate).sum()
    return float(lp)


def _race_objective(theta, n, design, prec):
    """Negative penalized log-likelihood for one race, its gradient and Hessian."""
    p, g = design.n_fixed, design.n_geo
    k = n.shape[1] - 1
    beta, u = theta[:p], theta[p:]
    logits = _linear_predictor(design, beta, u)
    logpi = log_softmax(logits, axis=1)
    pi = np.exp(logpi)
    tot = n.sum(axis=1)
    nll = -np.sum(xlogy(n, pi)) if np.any(n == 0) else -np.sum(n * logpi)
    f = nll + 0.5 * np.sum(prec * theta ** 2)
    resid = (tot[:, None] * pi - n)[:, 1:]                  # C x k
    a = np.hstack([design.fixed, np.eye(g)[design.geo_index]])   # C x (p+g)
    grad = a.T @ resid + prec * theta
    pk = pi[:, 1:]
    s = tot[:, None, None] * (np.einsum("ca,ab->cab", pk, np.eye(k)) - pk[:, :, None] * pk[:, None, :])
    hess = np.einsum("ci,cj,cab->iajb", a, a, s).reshape((p + g) * k, (p + g) * k)
    hess[np.diag_indices_from(hess)] += prec.ravel()
    return f, grad, hess


def _newton_race(theta, n, design, prec, tol, max_iter):
    f, grad, hess = _race_objective(theta, n, design, prec)
    for it in range(max_iter):
        step = np.linalg.solve(hess, grad.ravel()).reshape(theta.shape)
        t = 1.0
        while True:
            cand = theta - t * step
            f_new, g_new, h_new = _race_objective(cand, n, design, prec)
            if f_new <= f + 1e-12 * max(1.0, abs(f)) or t < 1e-10:
                break
            t *= 0.5
        change = np.max(np.abs(cand - theta)) if theta.size else 0.0
        theta, f, grad, hess = cand, f_new, g_new, h_new
        if change < tol:
            return theta, True
    return theta, False


def update_phi(u_r: np.ndarray, shape: float, rate: float) -> np.ndarray:
    """MAP of each random-intercept sd given the intercepts.

    Maximizes -G log phi - S / (2 phi^2) + (shape - 1) log phi - rate * phi,
    whose stationarity condition is the cubic
    -rate phi^3 + (shape - 1 - G) phi^2 + S = 0.
    """
    g = u_r.shape[0]
    out = np.empty(u_r.shape[1])
    for j in range(u_r.shape[1]):
        ss = float(np.sum(u_r[:, j] ** 2))
        roots = np.roots([-rate, shape - 1.0 - g, 0.0, ss])
        real = roots[np.abs(roots.imag) < 1e-9 * max(1.0, np.abs(roots).max())].real
        pos = real[real > 0]
        out[j] = max(pos.max() if pos.size else 0.0, PHI_MIN)
    return out


def m_step_mixed(suffstats: np.ndarray, spec: OutcomeModelSpec, design: MixedDesign,
                 init: Optional[MixedParams] = None, tol: float = 1e-8,
                 max_inner: int = 100, alternations: Optional[int] = None) -> MixedParams:
    """MAP of the multinomial mixed model given sufficient statistics.

    Coefficients and random intercepts are fitted by damped Newton with the
    intercept sds held fixed; the sds are then set to their conditional MAP.
    The two blocks alternate until the largest parameter change falls below
    ``tol`` (or for ``alternations`` rounds, when given). Races are
    independent and fitted one at a time.

    Raises
    ------
    MixedModelConvergenceError
        If Newton or the alternation does not converge within ``max_inner``
        iterations.
    """
    s = np.asarray(suffstats, dtype=float)
    n_r, n_y = s.shape[1], s.shape[2]
    params = init.copy() if init is not None else mixed_init(design, n_r, n_y, spec)
    if spec.intercept_scale is not None:
        params.phi[:] = max(spec.intercept_scale, PHI_MIN)
    p = design.n_fixed
    rounds = alternations if alternations is not None else max_inner
    for r in range(n_r):
        theta = np.vstack([params.beta[r], params.u[r]])
        for _ in range(rounds):
            prec = np.vstack([np.full((p, n_y - 1), spec.fixed_effect_sd ** -2.0),
                              np.broadcast_to(params.phi[r] ** -2.0, (design.n_geo, n_y - 1))])
            theta_new, ok = _newton_race(theta, s[:, r, :], design, prec, tol, max_inner)
            if not ok:
                params.beta[r], params.u[r] = theta_new[:p], theta_new[p:]
                raise MixedModelConvergenceError(
                    f"Newton did not converge for race index {r}", params)
            phi_old = params.phi[r].copy()
            if spec.intercept_scale is None:
                params.phi[r] = update_phi(theta_new[p:], spec.intercept_scale_shape,
                                           spec.intercept_scale_rate)
            change = max(np.max(np.abs(theta_new - theta)), np.max(np.abs(params.phi[r] - phi_old)))
            theta = theta_new
            if change < tol:
                break
        else:
            if alternations is None:
                params.beta[r], params.u[r] = theta[:p], theta[p:]
                raise MixedModelConvergenceError(
                    f"coefficient/scale alternation did not converge for race index {r}", params)
        params.beta[r], params.u[r] = theta[:p], theta[p:]
    return params
