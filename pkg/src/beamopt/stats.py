"""Self-contained significance tests for comparing planning methods.

Implements the regularized incomplete beta function and builds Welch-free
classics on top of it: a pooled two-sample t test and a one-way ANOVA.
Only the upper-tail p-values require the special function; both reduce to

    p = I_x(a, b)

with the usual df substitutions, so one careful implementation covers both.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "betainc",
    "TTestResult",
    "two_sample_t",
    "AnovaResult",
    "one_way_anova",
]

_MAX_ITER = 400
_TINY = 1e-300
_EPS = 1e-16


def _betacf(a: float, b: float, x: float) -> float:
    # Continued fraction for I_x(a, b), evaluated with the modified Lentz
    # method. Converges fast only for x < (a + 1) / (a + b + 2); the caller
    # applies the symmetry I_x(a, b) = 1 - I_{1-x}(b, a) to stay in range.
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _TINY:
        d = _TINY
    d = 1.0 / d
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _TINY:
            d = _TINY
        c = 1.0 + aa / c
        if abs(c) < _TINY:
            c = _TINY
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise RuntimeError(f"betainc continued fraction failed to converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta function I_x(a, b) for a, b > 0."""
    if not (a > 0.0 and b > 0.0):
        raise ValueError(f"betainc requires a > 0 and b > 0, got a={a!r}, b={b!r}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc requires 0 <= x <= 1, got {x!r}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b)
        - math.lgamma(a)
        - math.lgamma(b)
        + a * math.log(x)
        + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def _t_sf(t: float, df: float) -> float:
    # P(T > t) for Student's t with df degrees of freedom.
    if math.isinf(t):
        return 0.0 if t > 0 else 1.0
    tail = 0.5 * betainc(df / 2.0, 0.5, df / (df + t * t))
    return tail if t >= 0.0 else 1.0 - tail


def _f_sf(f: float, df1: float, df2: float) -> float:
    # P(F > f) for the F distribution with (df1, df2) degrees of freedom.
    if math.isinf(f):
        return 0.0
    if f <= 0.0:
        return 1.0
    return betainc(df2 / 2.0, df1 / 2.0, df2 / (df2 + df1 * f))


@dataclass(frozen=True)
class TTestResult:
    """Pooled-variance two-sample t test."""

    t: float
    df: float
    p_two_sided: float
    p_greater: float
    mean_first: float
    mean_second: float
    degenerate: bool = False


def two_sample_t(first, second) -> TTestResult:
    """Pooled two-sample t test; ``p_greater`` is one-sided for mean1 > mean2.

    Needs at least two observations per group. When both groups have zero
    variance the statistic is undefined; the result is flagged degenerate
    with t = +/-inf (or 0 for identical means) and the matching limit
    p-values.
    """
    x = np.asarray(first, dtype=np.float64)
    y = np.asarray(second, dtype=np.float64)
    if x.ndim != 1 or y.ndim != 1:
        raise ValueError("two_sample_t expects 1-D samples")
    n1, n2 = x.size, y.size
    if n1 < 2 or n2 < 2:
        raise ValueError(f"need at least 2 observations per group, got {n1} and {n2}")
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(y))):
        raise ValueError("samples must be finite")
    m1 = float(x.mean())
    m2 = float(y.mean())
    df = float(n1 + n2 - 2)
    ss = float(((x - m1) ** 2).sum() + ((y - m2) ** 2).sum())
    if ss == 0.0:
        if m1 == m2:
            return TTestResult(0.0, df, 1.0, 0.5, m1, m2, degenerate=True)
        t = math.inf if m1 > m2 else -math.inf
        p_greater = _t_sf(t, df)
        return TTestResult(t, df, 0.0, p_greater, m1, m2, degenerate=True)
    pooled = ss / df
    se = math.sqrt(pooled * (1.0 / n1 + 1.0 / n2))
    t = (m1 - m2) / se
    p_greater = _t_sf(t, df)
    p_two = 2.0 * _t_sf(abs(t), df)
    return TTestResult(t, df, min(p_two, 1.0), p_greater, m1, m2)


@dataclass(frozen=True)
class AnovaResult:
    """One-way fixed-effects ANOVA across k independent groups."""

    f: float
    df_between: int
    df_within: int
    p_value: float
    ss_between: float
    ss_within: float
    degenerate: bool = False


def one_way_anova(groups) -> AnovaResult:
    """One-way ANOVA over a sequence of 1-D samples.

    Requires at least two groups and at least one group with two or more
    observations (so df_within >= 1). Zero within-group variance makes F
    infinite (or 0 when the group means also agree); such results carry the
    degenerate flag.
    """
    arrays = [np.asarray(g, dtype=np.float64) for g in groups]
    if len(arrays) < 2:
        raise ValueError(f"ANOVA needs at least 2 groups, got {len(arrays)}")
    for i, arr in enumerate(arrays):
        if arr.ndim != 1 or arr.size == 0:
            raise ValueError(f"group {i} must be a non-empty 1-D sample")
        if not np.all(np.isfinite(arr)):
            raise ValueError(f"group {i} contains non-finite values")
    k = len(arrays)
    n_total = sum(a.size for a in arrays)
    df_between = k - 1
    df_within = n_total - k
    if df_within < 1:
        raise ValueError("ANOVA needs more observations than groups")
    grand = sum(float(a.sum()) for a in arrays) / n_total
    ss_between = sum(a.size * (float(a.mean()) - grand) ** 2 for a in arrays)
    ss_within = sum(float(((a - a.mean()) ** 2).sum()) for a in arrays)
    if ss_within == 0.0:
        if ss_between == 0.0:
            return AnovaResult(0.0, df_between, df_within, 1.0, 0.0, 0.0, degenerate=True)
        return AnovaResult(
            math.inf, df_between, df_within, 0.0, ss_between, 0.0, degenerate=True
        )
    f = (ss_between / df_between) / (ss_within / df_within)
    return AnovaResult(f, df_between, df_within, _f_sf(f, df_between, df_within), ss_between, ss_within)
