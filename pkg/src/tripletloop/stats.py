"""Paired t-test over per-pathology metric vectors and report comparison."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .evaluation import MetricsReport

_CF_MAX_ITER = 500
_CF_STOP = 1e-15  # continued-fraction stop; final absolute error well under 1e-12


def _betacf(a: float, b: float, x: float) -> float:
    """Continued fraction for the incomplete beta (modified Lentz)."""
    tiny = 1e-300
    qab, qap, qam = a + b, a + 1.0, a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < tiny:
        d = tiny
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < tiny:
            d = tiny
        c = 1.0 + aa / c
        if abs(c) < tiny:
            c = tiny
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_STOP:
            return h
    raise RuntimeError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def regularized_incomplete_beta(a: float, b: float, x: float) -> float:
    """I_x(a, b) evaluated by continued fraction."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if x <= 0.0:
        return 0.0
    if x >= 1.0:
        return 1.0
    ln_front = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    front = math.exp(ln_front)
    if x < (a + 1.0) / (a + b + 2.0):
        return front * _betacf(a, b, x) / a
    return 1.0 - front * _betacf(b, a, 1.0 - x) / b


def student_t_cdf(t: float, df: int) -> float:
    """CDF of Student's t with ``df`` degrees of freedom."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if t == 0.0:
        return 0.5
    x = df / (df + t * t)
    tail = 0.5 * regularized_incomplete_beta(df / 2.0, 0.5, x)
    return 1.0 - tail if t > 0 else tail


def student_t_two_sided_p(t: float, df: int) -> float:
    """Two-sided p-value: P(|T| >= |t|)."""
    if df < 1:
        raise ValueError("df must be >= 1")
    if not math.isfinite(t):
        return 0.0
    if t == 0.0:
        return 1.0
    return regularized_incomplete_beta(df / 2.0, 0.5, df / (df + t * t))


@dataclass(frozen=True)
class TTestResult:
    t_statistic: float
    degrees_of_freedom: int
    p_value: float
    n_pairs: int
    degenerate: bool = False

    def to_dict(self) -> dict:
        return {
            "t_statistic": self.t_statistic,
            "degrees_of_freedom": self.degrees_of_freedom,
            "p_value": self.p_value,
            "n_pairs": self.n_pairs,
            "degenerate": self.degenerate,
        }


def paired_t_test(a, b) -> TTestResult:
    """Dependent (paired) two-sided t-test on equal-length metric vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError(f"inputs must be 1-D with equal length, got {a.shape} vs {b.shape}")
    n = a.size
    if n < 2:
        raise ValueError("paired t-test needs at least 2 pairs")
    d = a - b
    df = n - 1
    if np.all(d == 0.0):
        return TTestResult(0.0, df, 1.0, n, degenerate=True)
    sd = float(np.std(d, ddof=1))
    mean = float(np.mean(d))
    if sd == 0.0:
        t = math.inf if mean > 0 else -math.inf
        return TTestResult(t, df, 0.0, n, degenerate=True)
    t = mean / (sd / math.sqrt(n))
    return TTestResult(t, df, student_t_two_sided_p(t, df), n)


class MismatchedReportsError(ValueError):
    """Reports cover different pathologies or evaluation splits."""


def _paired_vectors(before: MetricsReport, after: MetricsReport, metric: str):
    values_before, values_after, used, excluded = [], [], [], []
    flag = f"{metric}_undefined"
    for name in before.pathology_names():
        rb, ra = before.row(name), after.row(name)
        if getattr(rb, flag) or getattr(ra, flag):
            excluded.append(name)
            continue
        used.append(name)
        values_before.append(getattr(rb, metric))
        values_after.append(getattr(ra, metric))
    return values_before, values_after, used, excluded


def compare_reports(before: MetricsReport, after: MetricsReport) -> dict:
    """Per-pathology PPV/NPV deltas plus paired t-tests over both vectors.

    Pathologies with an undefined metric in either report are excluded from
    that metric's test (pairwise exclusion, recorded in the document). The
    output dict is deterministic: no timestamps, stable key order when dumped
    with sorted keys.
    """
    if before.pathology_names() != after.pathology_names():
        raise MismatchedReportsError(
            f"pathology sets differ: {before.pathology_names()} vs {after.pathology_names()}"
        )
    split_before = before.provenance.get("split_id")
    split_after = after.provenance.get("split_id")
    if split_before is not None and split_after is not None and split_before != split_after:
        raise MismatchedReportsError(f"split ids differ: {split_before} vs {split_after}")

    deltas = []
    for name in before.pathology_names():
        rb, ra = before.row(name), after.row(name)
        deltas.append(
            {
                "pathology": name,
                "ppv_before": rb.ppv, "ppv_after": ra.ppv, "ppv_delta": ra.ppv - rb.ppv,
                "npv_before": rb.npv, "npv_after": ra.npv, "npv_delta": ra.npv - rb.npv,
                "ppv_excluded": rb.ppv_undefined or ra.ppv_undefined,
                "npv_excluded": rb.npv_undefined or ra.npv_undefined,
            }
        )

    tests = {}
    for metric in ("ppv", "npv"):
        vb, va, used, excluded = _paired_vectors(before, after, metric)
        entry: dict = {"pathologies": used, "excluded": excluded}
        if len(vb) < 2:
            entry["error"] = f"needs >= 2 defined pairs, have {len(vb)}"
            entry["result"] = None
        else:
            entry["result"] = paired_t_test(va, vb).to_dict()
        tests[metric] = entry

    return {
        "before": before.to_dict(include_timestamp=False),
        "after": after.to_dict(include_timestamp=False),
        "deltas": deltas,
        "t_tests": tests,
    }


def render_comparison_table(comparison: dict) -> str:
    """Text table of before/after metrics and deltas."""
    rows = comparison["deltas"]
    width = max(len(r["pathology"]) for r in rows)
    header = (
        f"{'Pathology':<{width}}  {'PPV before':>10} {'PPV after':>10} {'ΔPPV':>8}"
        f"  {'NPV before':>10} {'NPV after':>10} {'ΔNPV':>8}"
    )
    lines = [header]
    for r in rows:
        lines.append(
            f"{r['pathology']:<{width}}  {r['ppv_before']:>10.2f} {r['ppv_after']:>10.2f}"
            f" {r['ppv_delta']:>+8.2f}  {r['npv_before']:>10.2f} {r['npv_after']:>10.2f}"
            f" {r['npv_delta']:>+8.2f}"
        )
    for metric in ("ppv", "npv"):
        entry = comparison["t_tests"][metric]
        if entry.get("result"):
            res = entry["result"]
            lines.append(
                f"paired t-test ({metric.upper()}): t = {res['t_statistic']:.4f}, "
                f"df = {res['degrees_of_freedom']}, p = {res['p_value']:.6f}"
                + (f" (excluded: {', '.join(entry['excluded'])})" if entry["excluded"] else "")
            )
        else:
            lines.append(f"paired t-test ({metric.upper()}): {entry.get('error', 'unavailable')}")
    return "\n".join(lines)
