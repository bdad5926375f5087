import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from dcdl.errors import ContractError
from dcdl.metrics import (
    RunScores,
    accuracy,
    corrected_resampled_ttest,
    format_csv_row,
    regularized_incomplete_beta,
    render_pvalue_table,
    similarity,
    student_t_two_sided_p,
)


# --- similarity / accuracy ------------------------------------------------------

def test_similarity_identical():
    assert similarity([1, 0, 1], [1, 0, 1]) == 1.0


def test_similarity_complementary():
    assert similarity([1, 0, 1], [0, 1, 0]) == 0.0


def test_similarity_half():
    assert similarity([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5


def test_similarity_errors():
    with pytest.raises(ContractError):
        similarity([], [])
    with pytest.raises(ContractError):
        similarity([1, 0], [1])


def test_accuracy_is_similarity_against_truth():
    assert accuracy([1, 0, 1, 1], [1, 1, 1, 0]) == 0.5


@given(st.lists(st.booleans(), min_size=1, max_size=50))
def test_similarity_reflexive_and_bounded(vec):
    assert similarity(vec, vec) == 1.0
    other = [not v for v in vec]
    s = similarity(vec, other)
    assert 0.0 <= s <= 1.0
    assert similarity(vec, other) == similarity(other, vec)


# --- t distribution oracle --------------------------------------------------------

def t_density(u, df):
    c = math.gamma((df + 1) / 2) / (math.sqrt(df * math.pi) * math.gamma(df / 2))
    return c * (1 + u * u / df) ** (-(df + 1) / 2)


def integrated_two_sided_p(t, df):
    scipy_integrate = pytest.importorskip("scipy.integrate")
    tail, _ = scipy_integrate.quad(t_density, abs(t), np.inf, args=(df,))
    return 2.0 * tail


@pytest.mark.parametrize("t,df", [(0.5, 3), (1.2, 9), (2.7, 29), (0.01, 2), (4.5, 11)])
def test_t_tail_matches_integration(t, df):
    assert student_t_two_sided_p(t, df) == pytest.approx(integrated_two_sided_p(t, df), abs=1e-9)


def test_incomplete_beta_edges():
    assert regularized_incomplete_beta(2.0, 3.0, 0.0) == 0.0
    assert regularized_incomplete_beta(2.0, 3.0, 1.0) == 1.0
    # symmetric case I_0.5(a, a) = 0.5
    assert regularized_incomplete_beta(4.0, 4.0, 0.5) == pytest.approx(0.5, abs=1e-12)


# --- corrected resampled t-test -----------------------------------------------------

def scores(values, n_train=55_000, n_test=10_000):
    return RunScores(np.asarray(values, dtype=float), n_train, n_test)


def test_identical_scores_give_t0_p1():
    a = scores([0.9, 0.8, 0.85])
    t, p = corrected_resampled_ttest(a, scores([0.9, 0.8, 0.85]))
    assert t == 0.0 and p == 1.0


def test_swapping_negates_t_keeps_p():
    a = scores([0.9, 0.85, 0.8, 0.95])
    b = scores([0.7, 0.8, 0.75, 0.7])
    t_ab, p_ab = corrected_resampled_ttest(a, b)
    t_ba, p_ba = corrected_resampled_ttest(b, a)
    assert t_ab == pytest.approx(-t_ba)
    assert p_ab == pytest.approx(p_ba)


def test_zero_variance_nonzero_mean():
    t, p = corrected_resampled_ttest(scores([0.9, 0.9]), scores([0.8, 0.8]))
    assert math.isinf(t) and t > 0 and p == 0.0
    t, p = corrected_resampled_ttest(scores([0.8, 0.8]), scores([0.9, 0.9]))
    assert math.isinf(t) and t < 0 and p == 0.0


def test_thirty_run_case_matches_integration_oracle():
    rng = np.random.default_rng(0)
    d = rng.normal(0.05, 0.04, size=30)
    base = rng.random(30)
    a = scores(base + d)
    b = scores(base)
    t, p = corrected_resampled_ttest(a, b)
    j = 30
    expected_t = d.mean() / math.sqrt((1 / j + 10_000 / 55_000) * d.var(ddof=1))
    assert t == pytest.approx(expected_t, rel=1e-12)
    assert p == pytest.approx(integrated_two_sided_p(t, j - 1), abs=1e-6)


def test_random_pairs_match_integration_oracle():
    rng = np.random.default_rng(1)
    for _ in range(10):
        j = int(rng.integers(2, 31))
        a = scores(rng.random(j), n_train=1000, n_test=200)
        b = scores(rng.random(j), n_train=1000, n_test=200)
        t, p = corrected_resampled_ttest(a, b)
        if math.isinf(t):
            continue
        assert p == pytest.approx(integrated_two_sided_p(t, j - 1), abs=1e-6)


@given(st.lists(st.floats(min_value=0.0, max_value=1.0), min_size=2, max_size=20),
       st.integers(min_value=1, max_value=60_000), st.integers(min_value=1, max_value=20_000))
@settings(max_examples=100)
def test_correction_factor_identity(diffs, n_train, n_test):
    """t_corrected = t_standard * sqrt((1/J) / (1/J + n_test/n_train))"""
    d = np.asarray(diffs)
    if d.var(ddof=1) == 0.0:
        return
    j = d.size
    a = RunScores(d, n_train, n_test)
    b = RunScores(np.zeros(j), n_train, n_test)
    t_corrected, p = corrected_resampled_ttest(a, b)
    t_standard = d.mean() / math.sqrt(d.var(ddof=1) / j)
    factor = math.sqrt((1 / j) / (1 / j + n_test / n_train))
    assert t_corrected == pytest.approx(t_standard * factor, rel=1e-12, abs=1e-12)
    assert 0.0 <= p <= 1.0


def test_ttest_contract_errors():
    with pytest.raises(ContractError):
        corrected_resampled_ttest(scores([0.5]), scores([0.5]))
    with pytest.raises(ContractError):
        corrected_resampled_ttest(scores([0.5, 0.6]), scores([0.5, 0.6, 0.7]))
    with pytest.raises(ContractError):
        corrected_resampled_ttest(scores([0.5, 0.6], n_train=10), scores([0.5, 0.6], n_train=20))


# --- report helpers --------------------------------------------------------------------

def test_pvalue_table_rendering():
    data = {
        "dcdl": scores([0.95, 0.94, 0.96], 100, 50),
        "bb_prediction": scores([0.80, 0.82, 0.81], 100, 50),
        "neural_network": scores([0.97, 0.96, 0.98], 100, 50),
    }
    table = render_pvalue_table(data, order=["dcdl", "bb_prediction", "neural_network"])
    assert "alpha=0.05" in table
    assert "dcdl" in table and "bb_prediction" in table
    lines = table.splitlines()
    assert any("*" in line for line in lines[2:])  # dcdl vs bb is clearly significant


def test_csv_row_formatting():
    row = format_csv_row("mnist-c3-s0", 3, 0, "dcdl", 0.987654321, 0.9)
    assert row == "mnist-c3-s0,3,0,dcdl,0.987654,0.900000"
