"""Welch's unequal-variance t-test with a self-contained t-distribution tail.

The two-sided p-value is ``I_x(df/2, 1/2)`` with ``x = df / (df + t^2)``,
where ``I`` is the regularized incomplete beta function evaluated by its
continued fraction (modified Lentz).
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np

OK = "ok"
DEGENERATE_SIZE = "degenerate:too_few_samples"
DEGENERATE_VARIANCE = "degenerate:zero_variance"

_TINY = 1e-300
_EPS = 1e-16
_MAX_ITER = 10_000


@dataclass(frozen=True)
class WelchResult:
    t: float
    df: float
    p: float
    status: str = OK

    @property
    def ok(self) -> bool:
        return self.status == OK


def _beta_cf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta function."""
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    d = 1.0 / (d if abs(d) > _TINY else _TINY)
    h = d
    for m in range(1, _MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        d = 1.0 / (d if abs(d) > _TINY else _TINY)
        c = 1.0 + aa / c
        c = c if abs(c) > _TINY else _TINY
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _EPS:
            return h
    raise ArithmeticError(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def betainc(a: float, b: float, x: float, y: float | None = None) -> float:
    """Regularized incomplete beta ``I_x(a, b)`` for ``a, b > 0``, ``0 <= x <= 1``.

    ``y`` may carry ``1 - x`` computed without rounding loss by the caller.
    """
    if a <= 0 or b <= 0:
        raise ValueError(f"betainc needs a, b > 0, got {a}, {b}")
    if not 0.0 <= x <= 1.0:
        raise ValueError(f"betainc needs 0 <= x <= 1, got {x}")
    if y is None:
        y = 1.0 - x
    if x == 0.0 or y == 0.0:
        return 0.0 if x == 0.0 else 1.0
    log_front = (math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
                 + a * math.log(x) + b * math.log(y))
    # the fraction converges fast on this side of the mean; use symmetry otherwise
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _beta_cf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _beta_cf(b, a, y) / b


def t_sf_two_sided(t: float, df: float) -> float:
    """``P(|T| >= |t|)`` for Student's t with ``df`` degrees of freedom."""
    if df <= 0:
        raise ValueError(f"df must be positive, got {df}")
    if math.isinf(t):
        return 0.0
    t2 = t * t
    # pass both x and 1 - x so neither side loses digits to cancellation
    return betainc(df / 2.0, 0.5, df / (df + t2), t2 / (df + t2))


def welch_t_test(a: Sequence[float], b: Sequence[float]) -> WelchResult:
    """Welch's two-sample t-test, two-sided.

    Parameters
    ----------
    a, b : sequence of float
        Independent samples, at least two values each.

    Returns
    -------
    WelchResult
        ``t`` is ``(mean(a) - mean(b)) / se``.  When either sample is too
        small or both variances are zero, ``status`` names the problem and
        the numeric fields are NaN.
    """
    xa = np.asarray(a, dtype=np.float64).ravel()
    xb = np.asarray(b, dtype=np.float64).ravel()
    if len(xa) < 2 or len(xb) < 2:
        nan = float("nan")
        return WelchResult(nan, nan, nan, DEGENERATE_SIZE)
    va = xa.var(ddof=1) / len(xa)
    vb = xb.var(ddof=1) / len(xb)
    se2 = va + vb
    if se2 == 0.0:
        nan = float("nan")
        return WelchResult(nan, nan, nan, DEGENERATE_VARIANCE)
    t = float((xa.mean() - xb.mean()) / math.sqrt(se2))
    df = float(se2 * se2 / (va * va / (len(xa) - 1) + vb * vb / (len(xb) - 1)))
    p = min(1.0, max(0.0, t_sf_two_sided(t, df)))
    return WelchResult(t, df, p)
