import itertools

import numpy as np
import pytest

from dcdl.boolcore import (
    BitDataset,
    DnfFormula,
    Term,
    eval_formula,
    format_formula,
    random_formula,
    score,
)
from dcdl.errors import ContractError
from dcdl.sls import SlsParams, _MaskState, _negative_step, _positive_step, score_batchwise, sls_search


def truth_table(n):
    return np.array(list(itertools.product([False, True], repeat=n)), dtype=bool)


def full_dataset_for(formula):
    rows = truth_table(formula.n)
    labels = np.array([eval_formula(formula, _inst(row)) for row in rows])
    return BitDataset.from_bool_matrix(rows, labels)


def _inst(row):
    from dcdl.boolcore import BitInstance

    return BitInstance.from_bools(row)


def formulas_agree(a, b, n):
    rows = truth_table(n)
    return all(eval_formula(a, _inst(r)) == eval_formula(b, _inst(r)) for r in rows)


def test_determinism():
    rng = np.random.default_rng(1)
    planted = random_formula(2, 6, rng)
    data = full_dataset_for(planted)
    params = SlsParams(k=2, max_iteration=300, seed=99)
    r1 = sls_search(data, data, params)
    r2 = sls_search(data, data, params)
    assert format_formula(r1.formula) == format_formula(r2.formula)
    assert r1.best_validation_score == r2.best_validation_score
    assert r1.iterations_used == r2.iterations_used
    assert r1.restarts == r2.restarts
    assert r1.train_score_trace == r2.train_score_trace


def test_result_invariants():
    rng = np.random.default_rng(2)
    planted = random_formula(2, 5, rng)
    data = full_dataset_for(planted)
    params = SlsParams(k=2, max_iteration=500, seed=3)
    res = sls_search(data, data, params)
    assert res.best_validation_score == score(res.formula, data)
    assert res.formula.k == params.k
    for t in res.formula.terms:
        assert not np.any(t.pos & t.neg)
    # best validation score equals the minimum of the per-iteration trace
    assert res.best_validation_score == min(s for _, s in res.validation_score_trace)


def test_planted_recovery_small():
    rng = np.random.default_rng(0)
    hits = 0
    runs = 10
    for i in range(runs):
        k = int(rng.integers(1, 4))
        n = int(rng.integers(5, 11))
        planted = random_formula(k, n, rng)
        data = full_dataset_for(planted)
        res = sls_search(data, data, SlsParams(k=k, max_iteration=5000, seed=1000 + i))
        if res.best_validation_score == 0:
            assert formulas_agree(res.formula, planted, n)
            hits += 1
    assert hits >= runs * 0.9


def test_single_positive_instance():
    data = BitDataset.from_bool_matrix(np.array([[True, False, True]]), np.array([True]))
    res = sls_search(data, data, SlsParams(k=1, max_iteration=200, seed=0))
    assert res.best_validation_score == 0


def brute_force_one_term_min_score(data):
    """Enumerate every 1-term DNF over n variables (3^n) and return the best score."""
    n = data.n
    best = len(data)
    for codes in itertools.product([0, 1, 2], repeat=n):
        term = Term.from_literals(
            n,
            pos=[i for i, c in enumerate(codes) if c == 0],
            neg=[i for i, c in enumerate(codes) if c == 1],
        )
        best = min(best, score(DnfFormula([term], n), data))
    return best


def test_xor_unreachable_with_one_term():
    rows = truth_table(2)
    labels = rows[:, 0] ^ rows[:, 1]
    data = BitDataset.from_bool_matrix(rows, labels)
    oracle_best = brute_force_one_term_min_score(data)
    assert oracle_best == 1
    res = sls_search(data, data, SlsParams(k=1, max_iteration=2000, seed=7))
    assert res.best_validation_score == oracle_best


def test_all_one_class_training_data():
    rows = truth_table(3)
    data = BitDataset.from_bool_matrix(rows, np.ones(len(rows), dtype=bool))
    res = sls_search(data, data, SlsParams(k=2, max_iteration=500, seed=5))
    assert res.best_validation_score == 0


def test_validation_tracking_uses_validation_set():
    # train and validation disagree; the returned candidate must be scored on validation
    rows = truth_table(4)
    train_labels = rows[:, 0]
    val_labels = ~rows[:, 0]
    train = BitDataset.from_bool_matrix(rows, train_labels)
    validation = BitDataset.from_bool_matrix(rows, val_labels)
    res = sls_search(train, validation, SlsParams(k=1, max_iteration=300, seed=11))
    assert res.best_validation_score == score(res.formula, validation)


def test_monotone_best_validation_score():
    rng = np.random.default_rng(8)
    planted = random_formula(3, 7, rng)
    data = full_dataset_for(planted)
    res = sls_search(data, data, SlsParams(k=3, max_iteration=800, seed=21))
    best_so_far = np.inf
    mins = []
    for _, s in res.validation_score_trace:
        best_so_far = min(best_so_far, s)
        mins.append(best_so_far)
    assert all(a >= b for a, b in zip(mins, mins[1:]))


def test_restart_counter_advances():
    # XOR with k=1 cannot reach 0, so a long run must restart
    rows = truth_table(2)
    labels = rows[:, 0] ^ rows[:, 1]
    data = BitDataset.from_bool_matrix(rows, labels)
    res = sls_search(data, data, SlsParams(k=1, max_iteration=500, restart_after=50, seed=13))
    assert res.restarts >= 1


# --- repair / exclusion soundness on the branch helpers ----------------------

def _state_for(formula, data):
    state = _MaskState(formula.k, formula.n, data, data)
    state.load(formula)
    return state


def test_positive_step_remove_all_covers_instance():
    rows = truth_table(4)
    labels = np.ones(len(rows), dtype=bool)
    data = BitDataset.from_bool_matrix(rows, labels)
    rng = np.random.default_rng(0)
    for trial in range(50):
        formula = random_formula(2, 4, np.random.default_rng(trial))
        state = _state_for(formula, data)
        missed = np.flatnonzero((state.cnt_train > 0) != labels)
        if missed.size == 0:
            continue
        idx = int(missed[0])
        # force the remove-all branch (p_g2 = 0)
        params = SlsParams(k=2, max_iteration=1, p_g2=0.0, seed=trial)
        t = _positive_step(state, idx, params, rng)
        assert state.cov_train[t, idx]


def test_negative_step_uncovers_instance():
    rows = truth_table(4)
    labels = np.zeros(len(rows), dtype=bool)
    data = BitDataset.from_bool_matrix(rows, labels)
    rng = np.random.default_rng(0)
    checked = 0
    for trial in range(50):
        formula = random_formula(2, 4, np.random.default_rng(trial))
        state = _state_for(formula, data)
        covered = np.flatnonzero(state.cnt_train > 0)
        if covered.size == 0:
            continue
        idx = int(covered[0])
        params = SlsParams(k=2, max_iteration=1, p_s=1.0, seed=trial)
        t = _negative_step(state, idx, params, rng)
        if t is not None:
            assert not state.cov_train[t, idx]
            checked += 1
    assert checked > 10


def test_greedy_negative_step_uncovers_instance():
    rows = truth_table(5)
    labels = np.zeros(len(rows), dtype=bool)
    data = BitDataset.from_bool_matrix(rows, labels)
    rng = np.random.default_rng(3)
    checked = 0
    for trial in range(50):
        formula = random_formula(2, 5, np.random.default_rng(100 + trial))
        state = _state_for(formula, data)
        covered = np.flatnonzero(state.cnt_train > 0)
        if covered.size == 0:
            continue
        idx = int(covered[-1])
        params = SlsParams(k=2, max_iteration=1, p_s=0.0, batch_size=8, seed=trial)
        t = _negative_step(state, idx, params, rng)
        if t is not None:
            assert not state.cov_train[t, idx]
            checked += 1
    assert checked > 10


# --- score_batchwise ---------------------------------------------------------

@pytest.mark.parametrize("batch_size", [1, 3, 64, 10_000])
def test_score_batchwise_equals_score(batch_size):
    rng = np.random.default_rng(4)
    f = random_formula(3, 12, rng)
    rows = rng.random((257, 12)) < 0.5
    labels = rng.random(257) < 0.5
    data = BitDataset.from_bool_matrix(rows, labels)
    assert score_batchwise(f, data, batch_size) == score(f, data)


def test_sls_contract_errors():
    rows = truth_table(2)
    data = BitDataset.from_bool_matrix(rows, rows[:, 0])
    other = BitDataset.from_bool_matrix(truth_table(3), np.zeros(8, dtype=bool))
    with pytest.raises(ContractError):
        sls_search(data, other, SlsParams(k=1, max_iteration=10))
    with pytest.raises(ContractError):
        SlsParams(k=0, max_iteration=10)
    with pytest.raises(ContractError):
        SlsParams(k=1, max_iteration=10, p_s=1.5)
