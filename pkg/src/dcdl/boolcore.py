"""Bit-packed boolean instances, datasets and k-term DNF formulas.

Everything downstream (search, window extraction, rule evaluation) speaks
this representation: booleans packed 64 per machine word, with pad bits
beyond the variable count always zero.  A literal is a variable index plus
a polarity; a term is a pair of (positive, negative) masks; a formula is a
fixed-length list of terms, evaluated as the OR of its term conjunctions.
"""

from __future__ import annotations

import re
from dataclasses import dataclass

import numpy as np

from .errors import ContractError, RuleParseError

WORD_BITS = 64


def n_words(n: int) -> int:
    """Number of 64-bit words needed for n bits."""
    return (n + WORD_BITS - 1) // WORD_BITS


def pack_bools(values) -> np.ndarray:
    """Pack a boolean sequence into a little-endian uint64 word array."""
    arr = np.ascontiguousarray(values, dtype=np.uint8)
    if arr.ndim != 1:
        raise ContractError(f"expected 1-d boolean sequence, got shape {arr.shape}")
    packed = np.packbits(arr, bitorder="little")
    nbytes = n_words(arr.size) * 8
    if packed.size < nbytes:
        packed = np.concatenate([packed, np.zeros(nbytes - packed.size, dtype=np.uint8)])
    return packed.view(np.uint64)


def pack_bool_matrix(matrix) -> np.ndarray:
    """Pack an (N, n) boolean matrix into an (N, W) uint64 matrix, row per instance."""
    arr = np.ascontiguousarray(matrix, dtype=np.uint8)
    if arr.ndim != 2:
        raise ContractError(f"expected 2-d boolean matrix, got shape {arr.shape}")
    packed = np.packbits(arr, axis=1, bitorder="little")
    nbytes = n_words(arr.shape[1]) * 8
    if packed.shape[1] < nbytes:
        pad = np.zeros((arr.shape[0], nbytes - packed.shape[1]), dtype=np.uint8)
        packed = np.concatenate([packed, pad], axis=1)
    return np.ascontiguousarray(packed).view(np.uint64)


def unpack_words(words: np.ndarray, n: int) -> np.ndarray:
    """Inverse of pack_bools: first n bits of a word array as a bool vector."""
    as_bytes = np.ascontiguousarray(words, dtype=np.uint64).view(np.uint8)
    return np.unpackbits(as_bytes, bitorder="little")[:n].astype(bool)


def unpack_word_matrix(words: np.ndarray, n: int) -> np.ndarray:
    """Unpack an (N, W) word matrix into an (N, n) bool matrix."""
    as_bytes = np.ascontiguousarray(words, dtype=np.uint64).view(np.uint8)
    return np.unpackbits(as_bytes, axis=1, bitorder="little")[:, :n].astype(bool)


def popcount(words: np.ndarray) -> int:
    return int(np.bitwise_count(words).sum())


def _pad_mask(n: int) -> np.ndarray:
    """Word mask with ones at the first n bit positions, zeros in the pad."""
    W = n_words(n)
    mask = np.full(W, ~np.uint64(0), dtype=np.uint64)
    rem = n % WORD_BITS
    if rem:
        mask[-1] = (np.uint64(1) << np.uint64(rem)) - np.uint64(1)
    return mask


def set_bit(words: np.ndarray, idx: int) -> None:
    words[idx >> 6] |= np.uint64(1) << np.uint64(idx & 63)


def clear_bit(words: np.ndarray, idx: int) -> None:
    words[idx >> 6] &= ~(np.uint64(1) << np.uint64(idx & 63))


def test_bit(words: np.ndarray, idx: int) -> bool:
    return bool((words[idx >> 6] >> np.uint64(idx & 63)) & np.uint64(1))


@dataclass(frozen=True)
class BitInstance:
    """A single assignment to n boolean variables, bit-packed."""

    bits: np.ndarray
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ContractError("variable count must be positive")
        if self.bits.shape != (n_words(self.n),) or self.bits.dtype != np.uint64:
            raise ContractError("bits must be a uint64 array of n_words(n) words")
        if popcount(self.bits & ~_pad_mask(self.n)):
            raise ContractError("pad bits beyond n must be zero")

    @classmethod
    def from_bools(cls, values) -> "BitInstance":
        values = np.asarray(values, dtype=bool)
        return cls(pack_bools(values), int(values.size))

    def to_bools(self) -> np.ndarray:
        return unpack_words(self.bits, self.n)

    def __getitem__(self, idx: int) -> bool:
        return test_bit(self.bits, idx)


@dataclass
class BitDataset:
    """Packed boolean instances with one binary label each."""

    bits: np.ndarray  # (N, W) uint64
    labels: np.ndarray  # (N,) bool
    n: int

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=bool)
        if self.bits.ndim != 2 or self.bits.dtype != np.uint64:
            raise ContractError("bits must be an (N, W) uint64 matrix")
        if self.bits.shape != (self.labels.size, n_words(self.n)):
            raise ContractError(
                f"shape mismatch: bits {self.bits.shape}, labels {self.labels.size}, n {self.n}"
            )

    @classmethod
    def from_bool_matrix(cls, matrix, labels) -> "BitDataset":
        matrix = np.asarray(matrix, dtype=bool)
        return cls(pack_bool_matrix(matrix), np.asarray(labels, dtype=bool), matrix.shape[1])

    @classmethod
    def from_instances(cls, instances, labels) -> "BitDataset":
        if not instances:
            raise ContractError("empty instance list")
        n = instances[0].n
        if any(inst.n != n for inst in instances):
            raise ContractError("instances disagree on variable count")
        bits = np.stack([inst.bits for inst in instances])
        return cls(bits, np.asarray(labels, dtype=bool), n)

    def instance(self, i: int) -> BitInstance:
        return BitInstance(self.bits[i].copy(), self.n)

    def subset(self, indices) -> "BitDataset":
        idx = np.asarray(indices)
        return BitDataset(self.bits[idx].copy(), self.labels[idx].copy(), self.n)

    def __len__(self) -> int:
        return self.labels.size


@dataclass
class Term:
    """A conjunction of literals: pos-mask variables required true, neg-mask required false."""

    pos: np.ndarray
    neg: np.ndarray
    n: int

    def __post_init__(self):
        W = n_words(self.n)
        if self.pos.shape != (W,) or self.neg.shape != (W,):
            raise ContractError("mask shape does not match variable count")
        if popcount(self.pos & self.neg):
            raise ContractError("contradictory literal pair in term")
        pad = ~_pad_mask(self.n)
        if popcount(self.pos & pad) or popcount(self.neg & pad):
            raise ContractError("pad bits beyond n must be zero")

    @classmethod
    def empty(cls, n: int) -> "Term":
        W = n_words(n)
        return cls(np.zeros(W, dtype=np.uint64), np.zeros(W, dtype=np.uint64), n)

    @classmethod
    def from_literals(cls, n: int, pos=(), neg=()) -> "Term":
        t = cls.empty(n)
        for v in pos:
            set_bit(t.pos, v)
        for v in neg:
            set_bit(t.neg, v)
        return cls(t.pos, t.neg, n)  # re-validate

    def num_literals(self) -> int:
        return popcount(self.pos) + popcount(self.neg)

    def literals(self) -> list[tuple[int, bool]]:
        """(variable, is_positive) pairs, ascending by variable index."""
        pos = np.flatnonzero(unpack_words(self.pos, self.n))
        neg = np.flatnonzero(unpack_words(self.neg, self.n))
        return sorted([(int(v), True) for v in pos] + [(int(v), False) for v in neg])

    def copy(self) -> "Term":
        return Term(self.pos.copy(), self.neg.copy(), self.n)


@dataclass
class DnfFormula:
    """Exactly k terms over n variables, evaluated as the OR of the terms."""

    terms: list[Term]
    n: int

    def __post_init__(self):
        if self.n <= 0:
            raise ContractError("variable count must be positive")
        if not self.terms:
            raise ContractError("a formula needs at least one term")
        if any(t.n != self.n for t in self.terms):
            raise ContractError("terms disagree on variable count")

    @property
    def k(self) -> int:
        return len(self.terms)

    def copy(self) -> "DnfFormula":
        return DnfFormula([t.copy() for t in self.terms], self.n)

    def pos_matrix(self) -> np.ndarray:
        return np.stack([t.pos for t in self.terms])

    def neg_matrix(self) -> np.ndarray:
        return np.stack([t.neg for t in self.terms])


def _check_dims(a_n: int, b_n: int) -> None:
    if a_n != b_n:
        raise ContractError(f"variable count mismatch: {a_n} vs {b_n}")


def eval_term(term: Term, inst: BitInstance) -> bool:
    """True iff every literal of the term is satisfied by the instance."""
    _check_dims(term.n, inst.n)
    if not np.array_equal(inst.bits & term.pos, term.pos):
        return False
    return not np.any(inst.bits & term.neg)


def eval_formula(f: DnfFormula, inst: BitInstance) -> bool:
    """OR over the k term conjunctions."""
    _check_dims(f.n, inst.n)
    return any(eval_term(t, inst) for t in f.terms)


def term_covers(term: Term, bits: np.ndarray) -> np.ndarray:
    """Coverage of a term over an (N, W) packed matrix, as an (N,) bool vector."""
    return ((bits & term.pos) == term.pos).all(axis=1) & ((bits & term.neg) == 0).all(axis=1)


def covers_matrix(pos: np.ndarray, neg: np.ndarray, bits: np.ndarray) -> np.ndarray:
    """Coverage vector for raw (pos, neg) word masks over an (N, W) matrix."""
    return ((bits & pos) == pos).all(axis=1) & ((bits & neg) == 0).all(axis=1)


def eval_formula_batch(f: DnfFormula, bits: np.ndarray) -> np.ndarray:
    """Formula value on every row of an (N, W) packed matrix."""
    out = np.zeros(bits.shape[0], dtype=bool)
    for t in f.terms:
        out |= term_covers(t, bits)
    return out


def score(f: DnfFormula, data: BitDataset) -> int:
    """Number of instances the formula misclassifies."""
    _check_dims(f.n, data.n)
    return int(np.count_nonzero(eval_formula_batch(f, data.bits) != data.labels))


def literal_diff_count(term: Term, inst: BitInstance) -> int:
    """Number of literals of the term the instance violates."""
    _check_dims(term.n, inst.n)
    return popcount(term.pos & ~inst.bits) + popcount(term.neg & inst.bits)


def random_formula(k: int, n: int, rng: np.random.Generator) -> DnfFormula:
    """Draw k random terms; per term each variable is positive, negative or
    absent with probability 1/3 each."""
    if k < 1 or n < 1:
        raise ContractError("need k >= 1 and n >= 1")
    draws = rng.integers(0, 3, size=(k, n))
    pos = pack_bool_matrix(draws == 0)
    neg = pack_bool_matrix(draws == 1)
    return DnfFormula([Term(pos[i], neg[i], n) for i in range(k)], n)


# --- text format ------------------------------------------------------------
#
# formula := term (" | " term)*
# term    := "(" [lit (" & " lit)*] ")"
# lit     := ["!"] "x" <0-based decimal index>
#
# The empty term prints as "()" and is vacuously true.

_LIT_RE = re.compile(r"^(!?)x(\d+)$")


def format_term(term: Term) -> str:
    parts = [("" if positive else "!") + f"x{v}" for v, positive in term.literals()]
    return "(" + " & ".join(parts) + ")"


def format_formula(f: DnfFormula) -> str:
    return " | ".join(format_term(t) for t in f.terms)


def parse_term(text: str, n: int) -> Term:
    text = text.strip()
    if not (text.startswith("(") and text.endswith(")")):
        raise RuleParseError(f"term must be parenthesized: {text!r}")
    body = text[1:-1].strip()
    term = Term.empty(n)
    if not body:
        return term
    for raw in body.split("&"):
        m = _LIT_RE.match(raw.strip())
        if not m:
            raise RuleParseError(f"bad literal {raw.strip()!r} in term {text!r}")
        negated, var = m.group(1) == "!", int(m.group(2))
        if var >= n:
            raise RuleParseError(f"variable x{var} out of range for n={n}")
        if test_bit(term.neg if not negated else term.pos, var):
            raise RuleParseError(f"contradictory literal pair on x{var} in {text!r}")
        set_bit(term.neg if negated else term.pos, var)
    return Term(term.pos, term.neg, n)


def parse_formula(text: str, n: int) -> DnfFormula:
    terms = [parse_term(part, n) for part in text.strip().split("|")]
    return DnfFormula(terms, n)
