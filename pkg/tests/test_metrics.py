import numpy as np
import pandas as pd
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from birdie.data import DisparityEstimate, ProbMatrix
from birdie.metrics import (EvalReport, empirical_cell_tables, log_score, map_accuracy,
                            rmse_and_correlation, roc_auc, small_area_mean_tv, tv_distance,
                            tv_within_race)

RACES = ("r1", "r2")


def table(cols, races=RACES, outcomes=("a", "b")):
    return DisparityEstimate("x", races, outcomes, np.array(cols, dtype=float).T)


class TestTv:
    def test_hand_fixture(self):
        est, truth = table([[0.3, 0.7], [0.6, 0.4]]), table([[0.5, 0.5], [0.6, 0.4]])
        assert tv_distance(est, truth, [0.5, 0.5]) == pytest.approx(0.1)
        assert list(tv_within_race(est, truth)) == pytest.approx([0.2, 0.0])

    def test_identical_and_disjoint(self):
        a = table([[1.0, 0.0], [0.0, 1.0]])
        b = table([[0.0, 1.0], [1.0, 0.0]])
        assert tv_distance(a, a, [0.5, 0.5]) == 0
        assert tv_distance(a, b, [0.5, 0.5]) == pytest.approx(1.0)
        assert list(tv_within_race(a, b)) == [1.0, 1.0]

    def test_aligns_by_label(self):
        est = table([[0.3, 0.7], [0.6, 0.4]])
        truth = DisparityEstimate("t", ("r2", "r1"), ("b", "a"), np.array([[0.4, 0.5], [0.6, 0.5]]))
        assert tv_distance(est, truth, [0.5, 0.5]) == pytest.approx(0.1)

    def test_support_mismatch(self):
        with pytest.raises(ValueError):
            tv_distance(table([[1, 0], [1, 0]]), table([[1, 0], [1, 0]], races=("r1", "r9")),
                        [0.5, 0.5])

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 10_000))
    def test_symmetry_and_event_bound(self, seed):
        rng = np.random.default_rng(seed)
        a = table(rng.dirichlet(np.ones(3), 2), outcomes=("a", "b", "c"))
        b = table(rng.dirichlet(np.ones(3), 2), outcomes=("a", "b", "c"))
        m = rng.dirichlet(np.ones(2))
        d = tv_distance(a, b, m)
        assert d == pytest.approx(tv_distance(b, a, m), abs=1e-15)
        assert tv_distance(a, a, m) == 0
        assert 0 <= d <= 1
        diff = ((a.mu - b.mu) * m).ravel()
        # any event is a subset of the (y, r) cells; the largest error uses the positive part
        assert d >= diff[diff > 0].sum() - 1e-15
        assert d >= np.abs(diff).max() - 1e-15


class TestSmallArea:
    def test_one_area_equals_within_race(self):
        est, truth = table([[0.3, 0.7], [0.6, 0.4]]), table([[0.5, 0.5], [0.6, 0.4]])
        out = small_area_mean_tv(est.mu[None], truth.mu[None], races=RACES)
        assert np.allclose(out, tv_within_race(est, truth))

    def test_mean_over_areas_and_min_cell(self):
        truth = np.tile(np.array([[0.5], [0.5]]), (3, 1, 1))
        est = truth.copy()
        est[0, :, 0] = [0.6, 0.4]
        est[1, :, 0] = [0.8, 0.2]
        est[2, :, 0] = [1.0, 0.0]
        counts = np.array([[10], [10], [2]])
        assert small_area_mean_tv(est, truth, counts).iloc[0] == pytest.approx(0.2)
        with pytest.raises(ValueError):
            small_area_mean_tv(est, truth, np.zeros((3, 1)))

    def test_rmse_and_correlation_examples(self):
        rng = np.random.default_rng(0)
        truth = rng.dirichlet(np.ones(3), (5, 2)).transpose(0, 2, 1)
        out = rmse_and_correlation(truth, truth)
        assert np.allclose(out["rmse"], 0) and np.allclose(out["corr"], 1)
        shifted = rmse_and_correlation(truth + 0.1, truth)
        assert np.allclose(shifted["rmse"], 0.1) and np.allclose(shifted["corr"], 1)
        const = np.full((5, 3, 2), 1 / 3)
        assert rmse_and_correlation(const, const)["corr"].isna().all()

    def test_rmse_and_correlation_oracle(self):
        rng = np.random.default_rng(1)
        est = rng.dirichlet(np.ones(3), (5, 2)).transpose(0, 2, 1)
        truth = rng.dirichlet(np.ones(3), (5, 2)).transpose(0, 2, 1)
        out = rmse_and_correlation(est, truth)
        for k in range(2):
            frame = pd.DataFrame({"e": est[:, :, k].ravel(), "t": truth[:, :, k].ravel(),
                                  "y": np.tile(np.arange(3), 5)})
            rmse = np.sqrt(((frame.e - frame.t) ** 2).mean())
            corr = np.mean([g.e.corr(g.t) for _, g in frame.groupby("y")])
            assert out["rmse"].iloc[k] == pytest.approx(rmse, abs=1e-12)
            assert out["corr"].iloc[k] == pytest.approx(corr, abs=1e-12)

    def test_empirical_cell_tables(self):
        tab, cnt = empirical_cell_tables(np.array([0, 0, 1]), 2, np.array([0, 1, 1]), 2,
                                         np.array([0, 0, 1]), 2)
        assert np.allclose(tab[0, :, 0], [0.5, 0.5]) and np.isnan(tab[0, :, 1]).all()
        assert cnt.tolist() == [[2, 0], [0, 1]]


class TestProbabilityScores:
    def test_log_score(self):
        p = ProbMatrix(np.eye(2)[[0, 1, 1]], RACES)
        assert log_score(p, ["r1", "r2", "r2"]) == 0
        assert log_score(ProbMatrix([[0.5, 0.5]], RACES), ["r1"]) == pytest.approx(np.log(0.5))
        assert log_score(p, ["r2", "r2", "r2"]) == pytest.approx(np.log(1e-12) / 3)

    @settings(max_examples=50, deadline=None)
    @given(st.floats(1e-6, 1 - 1e-6))
    def test_log_score_deviation_decreases(self, eps):
        truth = ["r1", "r2"]
        perfect = ProbMatrix(np.eye(2), RACES)
        off = ProbMatrix([[1 - eps, eps], [0.0, 1.0]], RACES)
        assert log_score(off, truth) < log_score(perfect, truth)

    def test_map_accuracy(self):
        p = ProbMatrix(np.eye(2)[[0, 1]], RACES)
        assert map_accuracy(p, ["r1", "r2"]) == 1.0
        assert map_accuracy(p, ["r2", "r1"]) == 0.0

    def test_auc(self):
        p = ProbMatrix([[0.9, 0.1], [0.8, 0.2], [0.3, 0.7], [0.1, 0.9]], RACES)
        assert list(roc_auc(p, ["r1", "r1", "r2", "r2"])) == [1.0, 1.0]
        assert list(roc_auc(p, ["r2", "r2", "r1", "r1"])) == [0.0, 0.0]
        assert roc_auc(p, ["r1"] * 4).isna().all()
        ties = ProbMatrix(np.full((4, 2), 0.5), RACES)
        assert list(roc_auc(ties, ["r1", "r2", "r1", "r2"])) == [0.5, 0.5]

    def test_auc_uninformative(self):
        rng = np.random.default_rng(2)
        p = ProbMatrix(rng.dirichlet([1, 1], 10_000), RACES)
        truth = np.where(rng.random(10_000) < 0.4, "r1", "r2")
        assert np.allclose(roc_auc(p, truth), 0.5, atol=0.02)

    def test_auc_against_pairwise_count(self):
        rng = np.random.default_rng(3)
        p = ProbMatrix(np.round(rng.dirichlet([1, 1], 60), 1), RACES)
        p = ProbMatrix(p.probs / p.probs.sum(axis=1, keepdims=True), RACES)
        truth = np.where(rng.random(60) < 0.5, "r1", "r2")
        s, pos = p.probs[:, 0], truth == "r1"
        diff = s[pos][:, None] - s[~pos][None, :]
        expected = ((diff > 0) + 0.5 * (diff == 0)).mean()
        assert roc_auc(p, truth).iloc[0] == pytest.approx(expected, abs=1e-12)


def test_report_csv(tmp_path):
    rep = EvalReport().add("tv", 0.25).add("tv_race", pd.Series([0.1, np.nan], index=RACES),
                                           scope="race")
    rep.to_csv(tmp_path / "eval.csv")
    text = (tmp_path / "eval.csv").read_text().splitlines()
    assert text[0] == "metric,scope,key,value,flag"
    assert text[-1] == "tv_race,race,r2,,undefined"
