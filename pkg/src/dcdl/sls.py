"""Stochastic local search for k-term DNF.

The search iteratively repairs a random candidate formula: a randomly drawn
misclassified training instance decides whether a term is weakened (literal
removal, to cover a positive instance) or strengthened (literal addition,
to exclude a negative one).  The best candidate is tracked by its score on
a separate validation set, and the search restarts from a fresh random
formula after a configurable streak without improvement.

Coverage of every term over both datasets is cached incrementally, so one
iteration costs O(dataset size) regardless of k.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .boolcore import (
    BitDataset,
    DnfFormula,
    Term,
    covers_matrix,
    n_words,
    random_formula,
    score,
    unpack_word_matrix,
)
from .errors import ContractError


@dataclass
class SlsParams:
    k: int
    max_iteration: int
    p_g1: float = 0.5
    p_g2: float = 0.5
    p_s: float = 0.5
    batch_size: int = 64
    restart_after: int = 600
    seed: int = 0

    def __post_init__(self):
        if self.k < 1:
            raise ContractError("k must be >= 1")
        if self.max_iteration < 0:
            raise ContractError("max_iteration must be >= 0")
        for name in ("p_g1", "p_g2", "p_s"):
            p = getattr(self, name)
            if not 0.0 <= p <= 1.0:
                raise ContractError(f"{name} must lie in [0, 1], got {p}")
        if self.batch_size < 1:
            raise ContractError("batch_size must be >= 1")
        if self.restart_after < 1:
            raise ContractError("restart_after must be >= 1")


@dataclass
class SlsResult:
    formula: DnfFormula
    best_validation_score: int
    iterations_used: int
    restarts: int
    train_score_trace: list[tuple[int, int]] | None = None
    validation_score_trace: list[tuple[int, int]] | None = field(default=None)


class _MaskState:
    """Mutable (k, W) literal masks plus cached per-term coverage and per-instance
    cover counts over the training and validation sets."""

    def __init__(self, k: int, n: int, train: BitDataset, validation: BitDataset):
        self.k, self.n = k, n
        self.train, self.validation = train, validation
        W = n_words(n)
        self.pos = np.zeros((k, W), dtype=np.uint64)
        self.neg = np.zeros((k, W), dtype=np.uint64)
        self.cov_train = np.zeros((k, len(train)), dtype=bool)
        self.cov_val = np.zeros((k, len(validation)), dtype=bool)
        self.cnt_train = np.zeros(len(train), dtype=np.int32)
        self.cnt_val = np.zeros(len(validation), dtype=np.int32)

    def load(self, formula: DnfFormula) -> None:
        for i, t in enumerate(formula.terms):
            self.pos[i] = t.pos
            self.neg[i] = t.neg
        for i in range(self.k):
            self.cov_train[i] = covers_matrix(self.pos[i], self.neg[i], self.train.bits)
            self.cov_val[i] = covers_matrix(self.pos[i], self.neg[i], self.validation.bits)
        self.cnt_train = self.cov_train.sum(axis=0, dtype=np.int32)
        self.cnt_val = self.cov_val.sum(axis=0, dtype=np.int32)

    def refresh_term(self, t: int) -> None:
        """Re-derive coverage caches after the masks of term t changed."""
        assert not np.any(self.pos[t] & self.neg[t]), "contradictory literal pair"
        new_tr = covers_matrix(self.pos[t], self.neg[t], self.train.bits)
        new_va = covers_matrix(self.pos[t], self.neg[t], self.validation.bits)
        self.cnt_train += new_tr
        self.cnt_train -= self.cov_train[t]
        self.cnt_val += new_va
        self.cnt_val -= self.cov_val[t]
        self.cov_train[t] = new_tr
        self.cov_val[t] = new_va

    def train_values(self) -> np.ndarray:
        return self.cnt_train > 0

    def validation_score(self) -> int:
        return int(np.count_nonzero((self.cnt_val > 0) != self.validation.labels))

    def snapshot(self) -> DnfFormula:
        return DnfFormula(
            [Term(self.pos[i].copy(), self.neg[i].copy(), self.n) for i in range(self.k)],
            self.n,
        )


def _violated_literal_counts(state: _MaskState, inst_bits: np.ndarray) -> np.ndarray:
    """Per-term count of literals the instance violates."""
    viol_pos = np.bitwise_count(state.pos & ~inst_bits).sum(axis=1)
    viol_neg = np.bitwise_count(state.neg & inst_bits).sum(axis=1)
    return viol_pos + viol_neg


def _term_literal_list(state: _MaskState, t: int) -> list[tuple[int, bool]]:
    term = Term(state.pos[t].copy(), state.neg[t].copy(), state.n)
    return term.literals()


def _positive_step(state: _MaskState, idx: int, params: SlsParams, rng: np.random.Generator) -> int:
    """Weaken a term so it moves toward covering the positive instance idx.

    Returns the index of the mutated term.
    """
    inst_bits = state.train.bits[idx]
    if rng.random() < params.p_g1:
        t = int(rng.integers(state.k))
    else:
        diffs = _violated_literal_counts(state, inst_bits)
        t = int(np.argmin(diffs))  # ties resolve to the lowest term index
    if rng.random() < params.p_g2:
        lits = _term_literal_list(state, t)
        # a misclassified positive instance implies no term is empty
        assert lits, "positive branch reached with an empty term"
        var, positive = lits[int(rng.integers(len(lits)))]
        mask = state.pos[t] if positive else state.neg[t]
        mask[var >> 6] &= ~(np.uint64(1) << np.uint64(var & 63))
    else:
        # drop every literal the instance violates; the term then covers it
        state.pos[t] &= inst_bits
        state.neg[t] &= ~inst_bits
        assert covers_matrix(state.pos[t], state.neg[t], inst_bits[None, :])[0]
    state.refresh_term(t)
    return t


def _excluding_candidates(state: _MaskState, t: int) -> np.ndarray:
    """Variables where term t holds no literal; adding the literal the instance
    violates there (positive if the bit is 0, negative if 1) uncovers it."""
    used = unpack_word_matrix((state.pos[t] | state.neg[t])[None, :], state.n)[0]
    return np.flatnonzero(~used)


def _add_excluding_literal(state: _MaskState, t: int, var: int, inst_bits: np.ndarray) -> None:
    bit_set = bool((inst_bits[var >> 6] >> np.uint64(var & 63)) & np.uint64(1))
    mask = state.neg[t] if bit_set else state.pos[t]
    mask[var >> 6] |= np.uint64(1) << np.uint64(var & 63)


def _greedy_excluding_var(
    state: _MaskState,
    t: int,
    candidates: np.ndarray,
    inst_bits: np.ndarray,
    params: SlsParams,
    rng: np.random.Generator,
) -> int:
    """Pick the candidate variable whose excluding literal minimizes the score
    on a random training batch (sampled with replacement).  Ties resolve to the
    lowest variable index."""
    batch = rng.integers(0, len(state.train), size=params.batch_size)
    bbits = state.train.bits[batch]
    blabels = state.train.labels[batch]
    bvals = unpack_word_matrix(bbits, state.n)
    others = (state.cnt_train[batch] - state.cov_train[t, batch]) > 0
    cov_t = state.cov_train[t, batch]
    inst_vals = unpack_word_matrix(inst_bits[None, :], state.n)[0]
    # literal satisfied on batch: x_v where the instance bit is 0, !x_v where 1
    satisfied = np.where(inst_vals[candidates][None, :], ~bvals[:, candidates], bvals[:, candidates])
    new_vals = others[:, None] | (cov_t[:, None] & satisfied)
    scores = (new_vals != blabels[:, None]).sum(axis=0)
    return int(candidates[int(np.argmin(scores))])


def _negative_step(state: _MaskState, idx: int, params: SlsParams, rng: np.random.Generator) -> int | None:
    """Strengthen one covering term so it no longer covers the negative
    instance idx.

    The term is drawn uniformly among covering terms that still have a
    literal-free variable; a term carrying a literal on every variable cannot
    be corrected without a contradictory pair.  Returns the mutated term
    index, or None when every covering term is saturated (the restart rule
    eventually clears such states).
    """
    inst_bits = state.train.bits[idx]
    covering = np.flatnonzero(state.cov_train[:, idx])
    assert covering.size > 0, "negative branch reached without a covering term"
    open_terms = [int(t) for t in covering
                  if _excluding_candidates(state, int(t)).size > 0]
    if not open_terms:
        return None
    t = open_terms[int(rng.integers(len(open_terms)))]
    candidates = _excluding_candidates(state, t)
    if rng.random() < params.p_s:
        var = int(candidates[int(rng.integers(candidates.size))])
    else:
        var = _greedy_excluding_var(state, t, candidates, inst_bits, params, rng)
    _add_excluding_literal(state, t, var, inst_bits)
    assert not covers_matrix(state.pos[t], state.neg[t], inst_bits[None, :])[0]
    state.refresh_term(t)
    return t


def sls_search(train: BitDataset, validation: BitDataset, params: SlsParams) -> SlsResult:
    """Run the local search and return the candidate with the lowest
    validation score seen during the run.

    Stops when max_iteration is exhausted, the best validation score hits 0,
    or the current formula classifies the whole training set correctly.
    Passing validation=train recovers pure training-score search.
    """
    if len(train) == 0:
        raise ContractError("training set must be non-empty")
    if train.n != validation.n:
        raise ContractError(f"variable count mismatch: train {train.n}, validation {validation.n}")

    rng = np.random.default_rng(params.seed)
    state = _MaskState(params.k, train.n, train, validation)
    state.load(random_formula(params.k, train.n, rng))

    best: DnfFormula = state.snapshot()
    min_score = np.inf
    iteration = 0
    restarts = 0
    no_improve = 0
    train_trace: list[tuple[int, int]] = []
    val_trace: list[tuple[int, int]] = []

    while iteration < params.max_iteration and min_score > 0:
        iteration += 1
        new_score = state.validation_score()
        val_trace.append((iteration, new_score))
        if new_score < min_score:
            min_score = new_score
            best = state.snapshot()
            no_improve = 0
        else:
            no_improve += 1

        misclassified = np.flatnonzero(state.train_values() != train.labels)
        train_trace.append((iteration, int(misclassified.size)))
        if misclassified.size == 0:
            break

        if no_improve >= params.restart_after:
            state.load(random_formula(params.k, train.n, rng))
            restarts += 1
            no_improve = 0
            continue

        idx = int(misclassified[int(rng.integers(misclassified.size))])
        if train.labels[idx]:
            _positive_step(state, idx, params, rng)
        else:
            _negative_step(state, idx, params, rng)

    best_score = score(best, validation)
    assert min_score == np.inf or best_score == int(min_score)
    return SlsResult(
        formula=best,
        best_validation_score=best_score,
        iterations_used=iteration,
        restarts=restarts,
        train_score_trace=train_trace,
        validation_score_trace=val_trace,
    )


def score_batchwise(f: DnfFormula, data: BitDataset, batch_size: int) -> int:
    """Same count as boolcore.score, computed in chunks of batch_size rows."""
    if batch_size < 1:
        raise ContractError("batch_size must be >= 1")
    if f.n != data.n:
        raise ContractError(f"variable count mismatch: {f.n} vs {data.n}")
    total = 0
    for start in range(0, len(data), batch_size):
        chunk = data.bits[start : start + batch_size]
        labels = data.labels[start : start + batch_size]
        vals = np.zeros(chunk.shape[0], dtype=bool)
        for t in f.terms:
            vals |= covers_matrix(t.pos, t.neg, chunk)
        total += int(np.count_nonzero(vals != labels))
    return total
