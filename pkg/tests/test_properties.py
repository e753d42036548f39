"""Property-based checks of invariants that must hold for every input."""

import numpy as np
from hypothesis import HealthCheck, given, settings
from hypothesis import strategies as st

from birdie.baseline import check_identification, ols_cell, weighting_estimate
from birdie.bisg import bisg_predict
from birdie.census import make_census_tables
from birdie.data import DisparityEstimate, ProbMatrix
from birdie.em import fit_birdie, marginal_log_posterior
from birdie.models import OutcomeModelSpec
from birdie.sensitivity import bias_bound

from conftest import make_records

SETTINGS = settings(max_examples=40, deadline=None,
                    suppress_health_check=[HealthCheck.too_slow])


@st.composite
def small_dataset(draw):
    """Random records and probabilities: 2-4 races, 2-3 outcomes, 2 cells."""
    seed = draw(st.integers(0, 2 ** 32 - 1))
    rng = np.random.default_rng(seed)
    n_r = draw(st.integers(2, 4))
    n_y = draw(st.integers(2, 3))
    n = draw(st.integers(5, 60))
    conc = draw(st.sampled_from([0.2, 1.0, 5.0]))
    p = rng.dirichlet(np.full(n_r, conc), n)
    p = np.clip(p, 1e-300, None)
    p /= p.sum(axis=1, keepdims=True)
    y = rng.integers(0, n_y, n)
    levels = tuple(f"y{j}" for j in range(n_y))
    rec = make_records(["S"] * n, rng.choice(["c1", "c2"], n),
                       outcome=np.array(levels, dtype=object)[y], outcome_levels=levels)
    races = tuple(f"r{k}" for k in range(n_r))
    return ProbMatrix(p, races), rec, rng


@SETTINGS
@given(st.integers(0, 2 ** 32 - 1), st.integers(1, 4))
def test_bisg_rows_are_stochastic(seed, n_r):
    rng = np.random.default_rng(seed)
    races = tuple(f"r{k}" for k in range(n_r))
    q_s = rng.dirichlet(np.ones(6), n_r).T[:4]           # leaves an OTHER residual
    q_g = rng.dirichlet(np.full(3, 0.3), n_r).T
    tables = make_census_tables(races, rng.dirichlet(np.ones(n_r)), ["A", "B", "C", "D"], q_s,
                                {"county": ([(g, "") for g in ("g0", "g1", "g2")], q_g)})
    n = 30
    rec = make_records(rng.choice(["A", "B", "C", "D", "ZZ"], n), rng.choice(["g0", "g1", "g2"], n))
    p = bisg_predict(tables, rec, "county").probs
    assert np.all(p >= 0) and np.allclose(p.sum(axis=1), 1, atol=1e-9)
    if n_r == 1:
        assert np.all(p == 1.0)


@SETTINGS
@given(small_dataset())
def test_weighting_columns_are_distributions(data):
    probs, rec, _ = data
    est = weighting_estimate(probs, rec)
    ok = np.array(est.flags) == ""
    assert np.all(est.mu[:, ok] >= 0)
    assert np.allclose(est.mu[:, ok].sum(axis=0), 1, atol=1e-9)


@SETTINGS
@given(small_dataset(), st.sampled_from(["none", "squarem", "anderson"]),
       st.sampled_from(["pooling", "saturated"]))
def test_em_trace_monotone_and_valid(data, accel, kind):
    probs, rec, _ = data
    spec = OutcomeModelSpec(kind, level="county")
    fit = fit_birdie(probs, rec, spec, accel=accel, max_iter=300)
    assert np.all(np.diff(fit.trace) >= -1e-8)
    assert np.allclose(fit.cell_probs.sum(axis=-1), 1, atol=1e-9)
    assert fit.trace[-1] == np.float64(marginal_log_posterior(fit.theta, probs, rec, spec)) or \
        abs(fit.trace[-1] - marginal_log_posterior(fit.theta, probs, rec, spec)) < 1e-8


@SETTINGS
@given(small_dataset())
def test_pooling_fit_is_permutation_invariant(data):
    probs, rec, rng = data
    perm = rng.permutation(rec.n)
    a = fit_birdie(probs, rec, accel="squarem", max_iter=300)
    b = fit_birdie(ProbMatrix(probs.probs[perm], probs.races, ids=rec.ids[perm]),
                   rec.subset(perm), accel="squarem", max_iter=300)
    assert np.max(np.abs(a.theta - b.theta)) <= 1e-12


@SETTINGS
@given(small_dataset())
def test_ols_columns_sum_to_one(data):
    probs, rec, _ = data
    y = np.eye(len(rec.y_levels))[rec.y]
    sol = ols_cell(probs.probs, y)
    if sol is not None:
        assert np.allclose(sol.sum(axis=1), 1, atol=1e-6)
        status = check_identification(probs.probs, y)
        assert status in ("identified", "inconsistent")


@SETTINGS
@given(small_dataset(), st.floats(1e-4, 10.0))
def test_bias_bound_linear_in_delta(data, delta):
    probs, rec, _ = data
    fit = fit_birdie(probs, rec, max_iter=300)
    g = lambda t: t[:, 0]  # noqa: E731
    one = bias_bound(fit, probs, rec, g, delta, draws=20, seed=1)
    two = bias_bound(fit, probs, rec, g, 2 * delta, draws=20, seed=1)
    assert np.all(np.isfinite(one.bound)) and np.all(one.bound >= 0)
    assert np.all(np.abs(two.bound - 2 * one.bound) <= 1e-12 * np.maximum(two.bound, 1e-300))


@SETTINGS
@given(seed=st.integers(0, 2 ** 32 - 1))
def test_estimate_csv_round_trip(tmp_path_factory, seed):
    rng = np.random.default_rng(seed)
    mu = rng.dirichlet(np.ones(3), 2).T
    mu[:, 1] = np.nan
    est = DisparityEstimate("weighting", ("a", "b"), ("x", "y", "z"), mu, ["", "undefined"])
    path = tmp_path_factory.mktemp("csv") / "e.csv"
    est.to_csv(path)
    back = DisparityEstimate.read_csv(path)
    assert np.array_equal(back.mu, mu, equal_nan=True) and back.flags == est.flags
