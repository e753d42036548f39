import numpy as np
import pytest

from birdie.baseline import (check_identification, numerical_rank, ols_estimate,
                             ols_poststratify, thresholding_estimate, weighting_bias_formula,
                             weighting_estimate, wtd_ols_equality_check)
from birdie.census import make_census_tables
from birdie.data import UNDEFINED, UNIDENTIFIED, DisparityEstimate, ProbMatrix

from conftest import indicator_probs, make_records


def one_cell(outcomes, n=None):
    n = len(outcomes) if n is None else n
    return make_records(["S"] * n, ["c"] * n, outcome=outcomes)


class TestWeighting:
    def test_hand_example(self):
        rec = one_cell(["a", "b"])
        p = ProbMatrix([[0.5, 0.5], [1.0, 0.0]], ("r1", "r2"))
        est = weighting_estimate(p, rec)
        assert est.mu[0, 0] == pytest.approx(1 / 3, abs=1e-15)
        assert est.mu[:, 1] == pytest.approx([1.0, 0.0])

    def test_indicator_probs_give_empirical_table(self):
        labels = ["A", "B", "A", "A", "B", "B"]
        ys = ["y", "n", "n", "y", "y", "y"]
        rec = one_cell(ys)
        p = indicator_probs(("A", "B"), labels)
        for est in (weighting_estimate(p, rec), thresholding_estimate(p, rec)):
            assert est.mu[:, 0] == pytest.approx([1 / 3, 2 / 3])   # levels sorted: n, y
            assert est.mu[:, 1] == pytest.approx([1 / 3, 2 / 3])

    def test_zero_column_is_flagged(self):
        rec = one_cell(["a", "b"])
        p = ProbMatrix([[1.0, 0.0], [1.0, 0.0]], ("r1", "r2"))
        est = weighting_estimate(p, rec)
        assert est.flags[1] == UNDEFINED and np.isnan(est.mu[:, 1]).all()
        assert np.allclose(est.mu[:, 0].sum(), 1)

    def test_thresholding_hand_example(self):
        rec = one_cell(["a", "b"])
        p = ProbMatrix([[0.6, 0.4], [0.6, 0.4]], ("r1", "r2"))
        est = thresholding_estimate(p, rec)
        assert est.mu[:, 0] == pytest.approx([0.5, 0.5])
        assert est.flags[1] == UNDEFINED

    def test_tie_goes_to_first_race(self):
        rec = one_cell(["a", "b"])
        p = ProbMatrix([[0.5, 0.5], [0.5, 0.5]], ("r1", "r2"))
        est = thresholding_estimate(p, rec)
        assert est.flags == ["", UNDEFINED]

    def test_csv_round_trip(self, tmp_path):
        rec = one_cell(["a", "b", "a"])
        p = ProbMatrix([[0.2, 0.8], [0.7, 0.3], [0.9, 0.1]], ("r1", "r2"))
        est = weighting_estimate(p, rec)
        est.to_csv(tmp_path / "e.csv")
        back = DisparityEstimate.read_csv(tmp_path / "e.csv")
        assert np.array_equal(back.mu, est.mu)


class TestBiasFormula:
    def test_independent_outcome_gives_zero(self):
        # outcome is a function of surname alone, and race frequencies match P-hat exactly
        surnames = np.array(["S1"] * 10 + ["S2"] * 10)
        race = np.array(["A"] * 8 + ["B"] * 2 + ["A"] * 3 + ["B"] * 7)
        rec = make_records(surnames, ["c"] * 20, outcome=np.where(surnames == "S1", "a", "b"),
                           true_race=race)
        p = ProbMatrix(np.where((surnames == "S1")[:, None], [0.8, 0.2], [0.3, 0.7]), ("A", "B"))
        assert weighting_bias_formula(rec, p, "a", "A") == pytest.approx(0.0, abs=1e-15)

    def test_deterministic_single_cell(self):
        n = 1000
        race = np.array(["A", "B"] * (n // 2))
        rec = make_records(["S"] * n, ["c"] * n, outcome=np.where(race == "A", "1", "0"),
                           true_race=race)
        p = ProbMatrix(np.tile([0.5, 0.5], (n, 1)), ("A", "B"))
        assert weighting_bias_formula(rec, p, "1", "A") == pytest.approx(-0.5, abs=1e-12)

    def test_requires_binary_race(self):
        rec = one_cell(["a"])
        rec.true_race = np.array(["A"], dtype=object)
        p = ProbMatrix([[0.2, 0.3, 0.5]], ("A", "B", "C"))
        with pytest.raises(ValueError, match="binary"):
            weighting_bias_formula(rec, p, "a", "A")


class TestOls:
    def test_perfect_discrimination(self):
        rec = one_cell(["a", "b"])
        est = ols_estimate(ProbMatrix([[1, 0], [0, 1]], ("r1", "r2")), rec)
        assert np.allclose(est.mu_cells[0][:, 0], [1, 0])

    def test_rank_deficient_cell_is_flagged(self):
        rec = make_records(["S"] * 4, ["c1", "c1", "c2", "c2"], outcome=["a", "b", "a", "b"])
        p = ProbMatrix([[1, 0], [1, 0], [1, 0], [0, 1]], ("r1", "r2"))
        with pytest.warns(UserWarning, match="not identified"):
            est = ols_estimate(p, rec)
        assert est.cell_flags == [UNIDENTIFIED, ""]

    def test_hand_normal_equations(self):
        rec = one_cell(["a", "b", "a"])
        p = np.array([[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]])
        est = ols_estimate(ProbMatrix(p, ("r1", "r2")), rec)
        b = np.array([1.0, 0.0, 1.0])
        # P'P = [[1.25, .25], [.25, 1.25]], P'b = [.5, 1.5]
        gram_inv = np.array([[1.25, -0.25], [-0.25, 1.25]]) / (1.25 ** 2 - 0.25 ** 2)
        expected = gram_inv @ np.array([0.5, 1.5])
        assert np.allclose(est.mu_cells[0][0], expected, atol=1e-14)
        assert np.allclose(est.mu_cells[0][0], np.linalg.lstsq(p, b, rcond=None)[0])
        assert np.allclose(est.mu_cells[0].sum(axis=0), 1, atol=1e-12)

    def test_poststratify_weights(self):
        races = ("r1", "r2")
        tables = make_census_tables(races, [0.5, 0.5], ["S"], [[1.0, 1.0]],
                                    {"county": ([("c1", ""), ("c2", "")],
                                                [[0.5, 0.5], [0.5, 0.5]])})
        cells = np.zeros((2, 2, 2))
        cells[0, 0] = [0.2, 0.2]
        cells[1, 0] = [0.4, 0.4]
        cells[:, 1] = 1 - cells[:, 0]
        est = DisparityEstimate("ols", races, ("a", "b"), np.zeros((2, 2)), ["", ""],
                                cell_keys=[("county", "c1", ""), ("county", "c2", "")],
                                mu_cells=cells, cell_flags=["", ""])
        out = ols_poststratify(est, tables)
        assert np.allclose(out.mu[0], [0.3, 0.3])

    def test_poststratify_single_cell_is_identity(self):
        rec = one_cell(["a", "b", "a"])
        p = ProbMatrix([[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]], ("r1", "r2"))
        tables = make_census_tables(("r1", "r2"), [0.5, 0.5], ["S"], [[1.0, 1.0]],
                                    {"county": ([("c", "")], [[1.0, 1.0]])})
        est = ols_estimate(p, rec)
        assert np.allclose(ols_poststratify(est, tables).mu, est.mu_cells[0])


class TestIdentification:
    def test_examples(self):
        assert check_identification(np.eye(2), [0.3, 0.9]) == "identified"
        assert check_identification([[0.5, 0.5], [0.2, 0.2]], [1, 0]) == "rank_deficient"
        p = np.array([[1.0, 0.0], [0.0, 1.0], [0.5, 0.5]])
        b = np.array([0.0, 0.0, 1.0])       # not P @ mu for any mu
        assert numerical_rank(np.column_stack([p, b])) == 3
        assert check_identification(p, b) == "inconsistent"
        assert check_identification(p, p @ [0.2, 0.6]) == "identified"


class TestEquality:
    def test_orthogonal_columns(self):
        rep = wtd_ols_equality_check([[1, 0], [0, 1], [1, 0]], [1, 0, 0])
        assert rep.verdict == "equal" and rep.condition_holds

    def test_constant_outcome(self):
        rep = wtd_ols_equality_check([[0.3, 0.7], [0.6, 0.4], [0.5, 0.5]], [1, 1, 1])
        assert rep.verdict == "equal" and rep.condition_holds

    def test_generic_cell(self):
        rep = wtd_ols_equality_check([[0.3, 0.7], [0.6, 0.4], [0.9, 0.1]], [1, 0, 0])
        assert rep.verdict == "unequal" and not rep.condition_holds


def random_equality_cell(rng):
    """Random cell drawn from one of four regimes, about half of them equal."""
    n_r = int(rng.integers(2, 5))
    n = int(rng.integers(n_r + 2, 25))
    regime = rng.integers(4)
    if regime == 0:          # generic overlap
        p = rng.dirichlet(np.ones(n_r), n)
        b = rng.integers(0, 2, n).astype(float)
    else:                    # races split into blocks with disjoint support
        block = rng.integers(0, 2, n_r)
        block[:2] = [0, 1]
        rows = []
        for i in range(n):
            members = np.flatnonzero(block == (i % 2))
            row = np.zeros(n_r)
            row[members] = rng.dirichlet(np.ones(members.size))
            rows.append(row)
        p = np.array(rows)
        if regime == 1:      # outcome constant within each block
            b = np.array([float(rng.integers(0, 2)) for _ in range(2)])[np.arange(n) % 2]
        elif regime == 2:    # singleton blocks where possible
            p = np.eye(n_r)[rng.integers(0, n_r, n)]
            p[:n_r] = np.eye(n_r)
            b = rng.integers(0, 2, n).astype(float)
        else:                # blocks with varying outcomes
            b = rng.integers(0, 2, n).astype(float)
    return p, b


def test_equality_condition_both_directions_on_1000_cells():
    rng = np.random.default_rng(2024)
    counts = {"equal": 0, "unequal": 0}
    checked = 0
    while checked < 1000:
        p, b = random_equality_cell(rng)
        if numerical_rank(p) < p.shape[1]:
            continue
        rep = wtd_ols_equality_check(p, b)
        assert (rep.verdict == "equal") == rep.condition_holds, (p, b, rep)
        counts[rep.verdict] += 1
        checked += 1
    assert counts["equal"] > 100 and counts["unequal"] > 100
