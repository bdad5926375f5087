"""Agreement metrics and the corrected resampled t-test.

Similarity is the fraction of positions where two prediction vectors agree;
accuracy is the same count against ground truth.  Paired per-run scores are
compared with a t-test whose variance is inflated by (1/J + n_test/n_train)
to account for overlapping resamples, with J - 1 degrees of freedom.  The
Student-t tail is computed from a continued-fraction regularized incomplete
beta, no statistics dependency needed.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ContractError


def similarity(pred_a, pred_b) -> float:
    """Fraction of positions where the two boolean vectors agree."""
    a = np.asarray(pred_a, dtype=bool)
    b = np.asarray(pred_b, dtype=bool)
    if a.size == 0:
        raise ContractError("empty prediction vectors")
    if a.shape != b.shape:
        raise ContractError(f"length mismatch: {a.shape} vs {b.shape}")
    return float((a == b).mean())


def accuracy(pred, truth) -> float:
    """Similarity against the true labels."""
    return similarity(pred, truth)


@dataclass
class RunScores:
    """One metric value per paired run, plus the sample counts feeding the
    variance correction."""

    values: np.ndarray
    n_train: int
    n_test: int

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 1:
            raise ContractError("scores must form a 1-d vector")
        if self.n_train < 1 or self.n_test < 1:
            raise ContractError("n_train and n_test must be positive")

    def __len__(self) -> int:
        return self.values.size


# --- regularized incomplete beta (continued fraction, Lentz's method) ---------

_BETA_EPS = 1e-14
_BETA_TINY = 1e-300
_BETA_MAX_ITER = 500


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _BETA_TINY:
        d = _BETA_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _BETA_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _BETA_TINY:
            d = _BETA_TINY
        c = 1.0 + aa / c
        if abs(c) < _BETA_TINY:
            c = _BETA_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETA_EPS:
            return h
    raise ArithmeticError(f"incomplete beta failed to converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b), accurate to ~1e-10 over the t-test parameter range."""
    if not 0.0 <= x <= 1.0:
        raise ContractError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_two_sided_p(t: float, df: float) -> float:
    """P(|T| >= |t|) for Student's t with df degrees of freedom."""
    if df <= 0:
        raise ContractError("degrees of freedom must be positive")
    if math.isinf(t):
        return 0.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


def corrected_resampled_ttest(a: RunScores, b: RunScores) -> tuple[float, float]:
    """Paired t statistic with resampling-corrected variance, and its two-sided p.

    t = mean(d) / sqrt((1/J + n_test/n_train) * var(d)), d = a - b, var unbiased.
    Zero variance degenerates to (0, 1) for zero mean and (+-inf, 0) otherwise.
    """
    if len(a) != len(b):
        raise ContractError(f"paired runs required: {len(a)} vs {len(b)}")
    if len(a) < 2:
        raise ContractError("need at least 2 paired runs")
    if (a.n_train, a.n_test) != (b.n_train, b.n_test):
        raise ContractError("paired scores must share n_train / n_test")
    d = a.values - b.values
    j = d.size
    mean = float(d.mean())
    var = float(d.var(ddof=1))
    if var == 0.0:
        if mean == 0.0:
            return 0.0, 1.0
        return math.copysign(math.inf, mean), 0.0
    t = mean / math.sqrt((1.0 / j + a.n_test / a.n_train) * var)
    return t, student_t_two_sided_p(t, j - 1)


# --- report rendering -----------------------------------------------------------

ALPHA = 0.05


def render_pvalue_table(scores: dict[str, RunScores], order: list[str] | None = None,
                        title: str = "") -> str:
    """Pairwise two-sided p-values, significant pairs starred at alpha = 0.05."""
    names = order or sorted(scores)
    width = max(len(n) for n in names) + 2
    lines = []
    if title:
        lines.append(title)
    some = scores[names[0]]
    lines.append(f"corrected resampled t-test, J={len(some)}, "
                 f"n_train={some.n_train}, n_test={some.n_test}, "
                 f"alpha={ALPHA} (* = significant)")
    header = " " * width + "".join(f"{n:>{width}}" for n in names[1:])
    lines.append(header)
    for i, row_name in enumerate(names[:-1]):
        cells = []
        for col_name in names[1:]:
            j = names.index(col_name)
            if j <= i:
                cells.append(f"{'-':>{width}}")
            else:
                _, p = corrected_resampled_ttest(scores[row_name], scores[col_name])
                mark = "*" if p < ALPHA else ""
                cells.append(f"{f'{p:.4f}{mark}':>{width}}")
        lines.append(f"{row_name:<{width}}" + "".join(cells))
    return "\n".join(lines) + "\n"


CSV_HEADER = "run_id,class,seed,method,similarity,accuracy"


def format_csv_row(run_id: str, cls: int, seed: int, method: str,
                   sim: float, acc: float) -> str:
    return f"{run_id},{cls},{seed},{method},{sim:.6f},{acc:.6f}"
