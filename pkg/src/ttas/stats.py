"""Agreement and significance statistics: ICC(2,1), Pearson r, paired t-test.

Student-t tail probabilities go through the regularized incomplete beta
function, evaluated with a modified-Lentz continued fraction.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.optimize import brentq


class DegenerateStatisticError(ValueError):
    pass


@dataclass(frozen=True)
class StatResult:
    statistic: float
    p_value: float
    n: int
    detail: dict = field(default_factory=dict)


_CF_EPS = 1e-16
_CF_TINY = 1e-300
_CF_MAXIT = 500


def _betacf(a: float, b: float, x: float) -> float:
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _CF_TINY:
        d = _CF_TINY
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _CF_TINY:
            d = _CF_TINY
        c = 1.0 + aa / c
        if abs(c) < _CF_TINY:
            c = _CF_TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc_regularized(a: float, b: float, x: float) -> float:
    """I_x(a, b) for a, b > 0 and 0 <= x <= 1."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must lie in [0, 1]")
    if x == 0.0 or x == 1.0:
        return x
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log1p(-x))
    front = math.exp(log_front)
    # the fraction converges fast only on this side of the mode
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    if math.isinf(t):
        return 0.0
    x = df / (df + t * t)
    return min(1.0, max(0.0, betainc_regularized(df / 2.0, 0.5, x)))


def t_cdf(t: float, df: float) -> float:
    half_tail = 0.5 * t_two_sided_p(t, df)
    return 1.0 - half_tail if t >= 0 else half_tail


def t_quantile(prob: float, df: float) -> float:
    if not 0.0 < prob < 1.0:
        raise ValueError("prob must lie in (0, 1)")
    if prob == 0.5:
        return 0.0
    hi = 1.0
    while t_cdf(hi, df) < max(prob, 1.0 - prob):
        hi *= 2.0
    q = brentq(lambda t: t_cdf(t, df) - max(prob, 1.0 - prob), 0.0, hi, xtol=1e-14, rtol=1e-14)
    return q if prob > 0.5 else -q


def mean_ci(values: Sequence[float], level: float = 0.95) -> tuple[float, float, float, float]:
    """(mean, sample sd, ci_low, ci_high) with a t-based interval."""
    x = np.asarray(values, dtype=np.float64)
    n = x.size
    if n == 0:
        raise DegenerateStatisticError("no values")
    m = float(x.mean())
    if n == 1:
        return m, float("nan"), float("nan"), float("nan")
    sd = float(x.std(ddof=1))
    half = t_quantile(0.5 + level / 2.0, n - 1) * sd / math.sqrt(n)
    return m, sd, m - half, m + half


def paired_t_test(a: Sequence[float], b: Sequence[float]) -> StatResult:
    """Two-sided paired Student's t-test on the differences a - b."""
    a_arr, b_arr = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    if a_arr.shape != b_arr.shape or a_arr.ndim != 1:
        raise ValueError("paired samples must be 1-D and of equal length")
    n = a_arr.size
    if n < 2:
        raise ValueError("paired t-test needs n >= 2")
    d = a_arr - b_arr
    mean_d = float(d.mean())
    sd = float(d.std(ddof=1))
    df = n - 1
    if sd == 0.0:
        if mean_d == 0.0:
            raise DegenerateStatisticError("all paired differences are zero")
        return StatResult(math.copysign(math.inf, mean_d), 0.0, n, {"df": df, "mean_diff": mean_d, "sd_diff": 0.0})
    t = mean_d / (sd / math.sqrt(n))
    return StatResult(t, t_two_sided_p(t, df), n, {"df": df, "mean_diff": mean_d, "sd_diff": sd})


def pearson_r(x: Sequence[float], y: Sequence[float]) -> StatResult:
    xa, ya = np.asarray(x, dtype=np.float64), np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape or xa.ndim != 1:
        raise ValueError("x and y must be 1-D and of equal length")
    n = xa.size
    if n < 3:
        raise ValueError("pearson_r needs n >= 3")
    dx, dy = xa - xa.mean(), ya - ya.mean()
    sxx, syy = float(dx @ dx), float(dy @ dy)
    if sxx == 0.0 or syy == 0.0:
        raise DegenerateStatisticError("zero variance input")
    r = max(-1.0, min(1.0, float(dx @ dy) / math.sqrt(sxx * syy)))
    df = n - 2
    if abs(r) == 1.0:
        return StatResult(r, 0.0, n, {"df": df, "t": math.copysign(math.inf, r)})
    t = r * math.sqrt(df / (1.0 - r * r))
    return StatResult(r, t_two_sided_p(t, df), n, {"df": df, "t": t})


def icc(ratings) -> float:
    """ICC(2,1): two-way random effects, absolute agreement, single rater.

    ``ratings`` is an n_subjects x k_raters matrix.
    """
    y = np.asarray(ratings, dtype=np.float64)
    if y.ndim != 2:
        raise ValueError("ratings must be a 2-D matrix")
    n, k = y.shape
    if n < 2 or k < 2:
        raise ValueError("icc needs at least 2 subjects and 2 raters")
    if not np.all(np.isfinite(y)):
        raise ValueError("ratings must be finite")
    grand = y.mean()
    ss_total = float(((y - grand) ** 2).sum())
    if ss_total == 0.0:
        raise DegenerateStatisticError("all ratings are equal; ICC is undefined")
    ss_rows = k * float(((y.mean(axis=1) - grand) ** 2).sum())
    ss_cols = n * float(((y.mean(axis=0) - grand) ** 2).sum())
    # rounding can push the residual a hair below zero
    ss_err = max(ss_total - ss_rows - ss_cols, 0.0)
    ms_rows = ss_rows / (n - 1)
    ms_cols = ss_cols / (k - 1)
    ms_err = ss_err / ((n - 1) * (k - 1))
    denom = ms_rows + (k - 1) * ms_err + k * (ms_cols - ms_err) / n
    if denom == 0.0:
        raise DegenerateStatisticError("ICC denominator vanishes")
    return (ms_rows - ms_err) / denom
