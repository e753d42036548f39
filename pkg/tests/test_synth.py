from dataclasses import asdict

import numpy as np
import pytest
from scipy import stats

from birdie.baseline import ols_estimate, weighting_estimate
from birdie.bisg import bisg_predict
from birdie.synth import (DagConfig, generate, joint_rgxs, oracle_solve, random_config,
                          true_cell_disparity, true_disparity)


def with_fields(config, **kw):
    data = asdict(config)
    data.update({k: v.tolist() if isinstance(v, np.ndarray) else v for k, v in kw.items()})
    return DagConfig(**data)


class TestGenerate:
    def test_reproducible(self):
        cfg = random_config(seed=8)
        a, ta = generate(cfg, 2000, seed=5)
        b, tb = generate(cfg, 2000, seed=5)
        for name in ("surname", "cov", "outcome", "true_race"):
            assert np.array_equal(getattr(a, name), getattr(b, name))
        assert np.array_equal(ta.surname_given_race, tb.surname_given_race)
        c, _ = generate(cfg, 2000, seed=6)
        assert not np.array_equal(a.outcome, c.outcome)

    def test_empty(self):
        rec, tables = generate(random_config(seed=1), 0)
        assert rec.n == 0
        assert np.allclose(tables.prior.sum(), 1)

    def test_deterministic_config(self):
        cfg = DagConfig(races=["A", "B"], surnames=["SA", "SB"], geos=["g"], covs=["x"],
                        outcomes=["yes", "no"], prior_r=[0.5, 0.5],
                        s_given_r=[[1.0, 0.0], [0.0, 1.0]], gx_given_r=[[[1.0, 1.0]]],
                        y_given_rgx=[[[[1.0, 0.0]]], [[[0.0, 1.0]]]])
        rec, _ = generate(cfg, 500, seed=0)
        a = rec.true_race == "A"
        assert np.all(rec.surname[a] == "SA") and np.all(rec.surname[~a] == "SB")
        assert np.all(rec.outcome[a] == "yes") and np.all(rec.outcome[~a] == "no")

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_race_surname_chi_square(self, seed):
        cfg = random_config(seed=20, n_surnames=30)
        rec, _ = generate(cfg, 100_000, seed=seed)
        pr = np.array(cfg.prior_r)[:, None] * np.array(cfg.s_given_r).T        # R x S
        obs = np.zeros_like(pr)
        r = np.array([cfg.races.index(v) for v in rec.true_race])
        s = np.array([cfg.surnames.index(v) for v in rec.surname])
        np.add.at(obs, (r, s), 1)
        keep = pr.ravel() > 0
        expected = pr.ravel()[keep] * rec.n
        pooled = expected >= 5
        chi2 = np.sum((obs.ravel()[keep][pooled] - expected[pooled]) ** 2 / expected[pooled])
        p = stats.chi2.sf(chi2, pooled.sum() - 1)
        assert p > 0.001

    def test_json_round_trip(self, tmp_path):
        cfg = random_config(seed=3)
        cfg.to_json(tmp_path / "dag.json")
        assert asdict(DagConfig.from_json(tmp_path / "dag.json")) == asdict(cfg)

    def test_validation(self):
        cfg = random_config(seed=0, n_races=2, n_surnames=3, n_geos=2, n_covs=1, n_outcomes=2)
        with pytest.raises(ValueError, match="stochastic"):
            with_fields(cfg, prior_r=[0.6, 0.6])
        with pytest.raises(ValueError, match="exactly one"):
            with_fields(cfg, y_given_gxs=np.full((2, 1, 3, 2), 0.5))


class TestBisgAccuracy:
    def test_cell_frequencies_match_bisg(self):
        # coarse cells (about 10,000 records each) keep the sampling sd near 0.005
        cfg = random_config(seed=6, n_surnames=5, n_geos=2, n_covs=1, surname_concentration=1.0)
        rec, tables = generate(cfg, 100_000, seed=6)
        probs = bisg_predict(tables, rec, "county")
        key = rec.geo["county"] + "|" + rec.cov + "|" + rec.surname
        codes, inverse = np.unique(key, return_inverse=True)
        counts = np.bincount(inverse)
        race = rec.race_codes(probs.races)
        checked = 0
        for c in np.flatnonzero(counts >= 500):
            rows = inverse == c
            freq = np.bincount(race[rows], minlength=len(probs.races)) / rows.sum()
            assert np.max(np.abs(freq - probs.probs[rows].mean(axis=0))) < 0.02
            checked += 1
        assert checked >= 5


class TestOracle:
    def test_uninformative_surnames_are_unidentified(self):
        cfg = random_config(seed=1, n_races=3)
        col = np.array(cfg.s_given_r)[:, :1]
        flat = with_fields(cfg, s_given_r=np.repeat(col, 3, axis=1))
        assert oracle_solve(flat, ("g00", "x0")).status == "rank_deficient"

    def test_indicator_surnames(self):
        cfg = random_config(seed=2, n_races=3, n_surnames=3, geo_effect=1.0)
        exact = with_fields(cfg, s_given_r=np.eye(3))
        truth = np.array(cfg.y_given_rgx)
        for gi in range(len(cfg.geos)):
            res = oracle_solve(exact, (gi, 0))
            assert res.identified
            assert np.max(np.abs(res.mu - truth[:, gi, 0])) < 1e-12

    def test_two_race_random_config(self):
        cfg = random_config(seed=3, n_races=2, n_surnames=10, geo_effect=1.0, cov_effect=1.0)
        res = oracle_solve(cfg, ("g01", "x1"))
        assert np.max(np.abs(res.mu - np.array(cfg.y_given_rgx)[:, 1, 1])) < 1e-10

    def test_direct_surname_effect_is_inconsistent(self):
        cfg = random_config(seed=4, n_races=2, n_surnames=10)
        rng = np.random.default_rng(0)
        law = rng.dirichlet(np.ones(4), (len(cfg.geos), len(cfg.covs), 10))
        surname_driven = with_fields(cfg, y_given_rgx=None, y_given_gxs=law)
        assert oracle_solve(surname_driven, (0, 0)).status == "inconsistent"

    def test_ols_agrees_with_oracle(self):
        cfg = random_config(seed=9, n_races=2, n_surnames=15, n_geos=2, n_covs=1,
                            n_outcomes=2, surname_concentration=0.5, geo_effect=1.0)
        rec, tables = generate(cfg, 200_000, seed=9)
        est = ols_estimate(bisg_predict(tables, rec, "county"), rec)
        for c, key in enumerate(est.cell_keys):
            res = oracle_solve(cfg, (key[1], key[2]))
            assert np.max(np.abs(est.mu_cells[c] - res.mu.T)) < 0.03


class TestDags:
    def test_surname_driven_outcome_weighting_is_consistent(self):
        cfg = random_config(seed=12, n_races=2, n_outcomes=2)
        rng = np.random.default_rng(12)
        law = rng.dirichlet(np.ones(2), (len(cfg.geos), len(cfg.covs), len(cfg.surnames)))
        surname_driven = with_fields(cfg, y_given_rgx=None, y_given_gxs=law)
        rec, tables = generate(surname_driven, 200_000, seed=12)
        est = weighting_estimate(bisg_predict(tables, rec, "county"), rec)
        assert np.max(np.abs(est.mu - true_disparity(surname_driven).mu)) < 0.01

    def test_truth_tables(self):
        cfg = random_config(seed=13, geo_effect=1.0)
        cells = true_cell_disparity(cfg)
        assert np.allclose(cells, np.array(cfg.y_given_rgx))
        joint = joint_rgxs(cfg).sum(axis=3)                     # R x G x X
        mu = np.einsum("rgx,rgxy->yr", joint, cells) / joint.sum(axis=(1, 2))
        assert np.allclose(mu, true_disparity(cfg).mu)
