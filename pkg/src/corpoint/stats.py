"""Run-level statistics: Welch tests, trend fits, and the t tail itself.

The two-sided t p-value comes from our own regularized incomplete beta
(Lentz continued fraction with a log-gamma prefactor); nothing here
depends on scipy.  Group dispersions can be read as standard errors
(the default, which is how mean +/- spread pairs from small run counts
are usually quoted) or as standard deviations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Mapping, Sequence

from .errors import CorpointError

_BETACF_MAX_ITER = 300
_BETACF_EPS = 3e-16
_FPMIN = 1e-300


def _betacf(a: float, b: float, x: float) -> float:
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _BETACF_MAX_ITER + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _BETACF_EPS:
            return h
    raise ArithmeticError(f"incomplete beta did not converge for a={a}, b={b}, x={x}")


def betainc(a: float, b: float, x: float) -> float:
    """Regularized incomplete beta I_x(a, b)."""
    if a <= 0 or b <= 0:
        raise ValueError("a and b must be positive")
    if not 0.0 <= x <= 1.0:
        raise ValueError("x must be in [0, 1]")
    if x == 0.0 or x == 1.0:
        return float(x)
    ln_bt = (
        math.lgamma(a + b) - math.lgamma(a) - math.lgamma(b)
        + a * math.log(x) + b * math.log1p(-x)
    )
    bt = math.exp(ln_bt)
    if x < (a + 1.0) / (a + b + 2.0):
        return bt * _betacf(a, b, x) / a
    return 1.0 - bt * _betacf(b, a, 1.0 - x) / b


def t_two_sided_p(t: float, df: float) -> float:
    """P(|T_df| >= |t|), via I_x(df/2, 1/2) with x = df / (df + t^2)."""
    if df <= 0:
        raise ValueError("df must be positive")
    if t == 0.0:
        return 1.0
    x = df / (df + t * t)
    return betainc(0.5 * df, 0.5, x)


def t_sf(t: float, df: float) -> float:
    """One-sided upper tail P(T_df > t)."""
    p = 0.5 * t_two_sided_p(abs(t), df)
    return p if t >= 0 else 1.0 - p


def t_cdf(t: float, df: float) -> float:
    return 1.0 - t_sf(t, df)


def t_ppf(q: float, df: float) -> float:
    """Inverse CDF by bisection on our own tail; good to ~1e-10."""
    if not 0.0 < q < 1.0:
        raise ValueError("q must be in (0, 1)")
    if q == 0.5:
        return 0.0
    if q < 0.5:
        return -t_ppf(1.0 - q, df)
    lo, hi = 0.0, 1.0
    while t_cdf(hi, df) < q:
        hi *= 2.0
        if hi > 1e12:
            raise ArithmeticError("quantile search diverged")
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if t_cdf(mid, df) < q:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# ---------------------------------------------------------------------------
# two-sample tests


@dataclass(frozen=True)
class TTestResult:
    kind: str  # "welch" | "pooled"
    diff: float
    se: float
    t_stat: float
    df: float
    p_value: float
    degenerate: bool = False  # both dispersions were zero

    def to_dict(self) -> dict:
        return dict(self.__dict__)


def _degenerate_result(kind: str, diff: float, n1: int, n2: int) -> TTestResult:
    # Both groups quoted zero dispersion: the test statistic is undefined,
    # so the p-value is taken to its limit (1 for equal means, 0 otherwise)
    # and the result is flagged rather than raised.
    t = 0.0 if diff == 0.0 else math.copysign(math.inf, diff)
    p = 1.0 if diff == 0.0 else 0.0
    return TTestResult(kind, diff, 0.0, t, float(n1 + n2 - 2), p, degenerate=True)


def _resolve_se(disp: float, n: int, dispersion: str) -> tuple[float, float]:
    """Return (se, sd) for one group given its quoted dispersion."""
    if n < 2:
        raise ValueError("each group needs n >= 2")
    if disp < 0:
        raise ValueError("dispersion must be nonnegative")
    if dispersion == "se":
        return disp, disp * math.sqrt(n)
    if dispersion == "sd":
        return disp / math.sqrt(n), disp
    raise ValueError(f"dispersion must be 'se' or 'sd', got {dispersion!r}")


def welch_from_summary(
    mean1: float, disp1: float, n1: int,
    mean2: float, disp2: float, n2: int,
    *, dispersion: str = "se",
) -> TTestResult:
    """Welch's t-test from group summaries.

    disp1/disp2 are standard errors by default; pass dispersion="sd" for
    standard deviations.  Degrees of freedom follow Welch-Satterthwaite.
    """
    se1, _ = _resolve_se(disp1, n1, dispersion)
    se2, _ = _resolve_se(disp2, n2, dispersion)
    v1, v2 = se1 * se1, se2 * se2
    se = math.sqrt(v1 + v2)
    diff = mean1 - mean2
    if se == 0.0:
        return _degenerate_result("welch", diff, n1, n2)
    t = diff / se
    df = (v1 + v2) ** 2 / (v1 * v1 / (n1 - 1) + v2 * v2 / (n2 - 1))
    return TTestResult("welch", diff, se, t, df, t_two_sided_p(t, df))


def pooled_from_summary(
    mean1: float, disp1: float, n1: int,
    mean2: float, disp2: float, n2: int,
    *, dispersion: str = "se",
) -> TTestResult:
    """Classic equal-variance two-sample t-test from group summaries."""
    _, sd1 = _resolve_se(disp1, n1, dispersion)
    _, sd2 = _resolve_se(disp2, n2, dispersion)
    df = n1 + n2 - 2
    sp2 = ((n1 - 1) * sd1 * sd1 + (n2 - 1) * sd2 * sd2) / df
    se = math.sqrt(sp2 * (1.0 / n1 + 1.0 / n2))
    diff = mean1 - mean2
    if se == 0.0:
        return _degenerate_result("pooled", diff, n1, n2)
    t = diff / se
    return TTestResult("pooled", diff, se, t, float(df), t_two_sided_p(t, df))


def _summary(xs: Sequence[float]) -> tuple[float, float, int]:
    n = len(xs)
    if n < 2:
        raise ValueError("need at least 2 samples per group")
    mean = sum(xs) / n
    var = sum((x - mean) ** 2 for x in xs) / (n - 1)
    return mean, math.sqrt(var), n


def welch_from_samples(xs: Sequence[float], ys: Sequence[float]) -> TTestResult:
    m1, sd1, n1 = _summary(xs)
    m2, sd2, n2 = _summary(ys)
    return welch_from_summary(m1, sd1, n1, m2, sd2, n2, dispersion="sd")


def pooled_from_samples(xs: Sequence[float], ys: Sequence[float]) -> TTestResult:
    m1, sd1, n1 = _summary(xs)
    m2, sd2, n2 = _summary(ys)
    return pooled_from_summary(m1, sd1, n1, m2, sd2, n2, dispersion="sd")


# ---------------------------------------------------------------------------
# gains and trend fits


def gain(before: float, after: float) -> float:
    """Absolute improvement, rounded at 1e-9 so one-decimal inputs give
    one-decimal answers instead of binary dust."""
    return round(after - before, 9)


def relative_gain(before: float, after: float) -> float:
    """Improvement as a percentage of the starting value."""
    if before == 0:
        raise ValueError("relative gain undefined for a zero baseline")
    return (after - before) / before * 100.0


@dataclass(frozen=True)
class TrendFit:
    slope: float
    intercept: float
    slope_se: float
    t_stat: float
    p_value: float
    df: int
    r2: float
    n: int
    x_mean: float
    sxx: float
    resid_sd: float

    def predict(self, x: float) -> float:
        return self.intercept + self.slope * x

    def mean_ci(self, x: float, level: float = 0.95) -> tuple[float, float]:
        """Confidence interval for the mean response at x."""
        if self.df < 1:
            raise ValueError("no residual degrees of freedom for an interval")
        tcrit = t_ppf(0.5 + level / 2.0, self.df)
        half = tcrit * self.resid_sd * math.sqrt(1.0 / self.n + (x - self.x_mean) ** 2 / self.sxx)
        mid = self.predict(x)
        return mid - half, mid + half

    def slope_ci(self, level: float = 0.95) -> tuple[float, float]:
        if self.df < 1:
            raise ValueError("no residual degrees of freedom for an interval")
        tcrit = t_ppf(0.5 + level / 2.0, self.df)
        return self.slope - tcrit * self.slope_se, self.slope + tcrit * self.slope_se

    def to_dict(self) -> dict:
        return {
            "slope": self.slope, "intercept": self.intercept,
            "slope_se": self.slope_se, "t_stat": self.t_stat,
            "p_value": self.p_value, "df": self.df, "r2": self.r2, "n": self.n,
        }


class DegenerateXError(CorpointError):
    code = "DegenerateX"


def fit_trend(xs: Sequence[float], ys: Sequence[float]) -> TrendFit:
    """Ordinary least squares line with slope inference.

    Needs n >= 2 and at least two distinct x values.  With exactly two
    points the line is exact; slope_se, t_stat, p_value, and resid_sd
    come back NaN because there are no residual degrees of freedom, and
    the interval methods refuse to run.
    """
    n = len(xs)
    if n != len(ys):
        raise ValueError("xs and ys must have equal length")
    if n < 2:
        raise ValueError("need at least 2 points to fit a trend")
    x_mean = sum(xs) / n
    y_mean = sum(ys) / n
    sxx = sum((x - x_mean) ** 2 for x in xs)
    if sxx == 0.0:
        raise DegenerateXError("xs are all identical")
    sxy = sum((x - x_mean) * (y - y_mean) for x, y in zip(xs, ys))
    slope = sxy / sxx
    intercept = y_mean - slope * x_mean
    resid = [y - (intercept + slope * x) for x, y in zip(xs, ys)]
    sse = sum(r * r for r in resid)
    sst = sum((y - y_mean) ** 2 for y in ys)
    df = n - 2
    if df == 0:
        resid_sd = slope_se = t_stat = p = math.nan
        r2 = 1.0
    else:
        resid_var = sse / df
        resid_sd = math.sqrt(resid_var)
        slope_se = math.sqrt(resid_var / sxx)
        if slope_se == 0.0:
            t_stat = math.inf if slope != 0 else 0.0
            p = 0.0 if slope != 0 else 1.0
        else:
            t_stat = slope / slope_se
            p = t_two_sided_p(t_stat, df)
        r2 = 1.0 - sse / sst if sst > 0 else 1.0
    return TrendFit(
        slope=slope, intercept=intercept, slope_se=slope_se, t_stat=t_stat,
        p_value=p, df=df, r2=r2, n=n, x_mean=x_mean, sxx=sxx, resid_sd=resid_sd,
    )


def trend_band(fit: TrendFit, grid: Sequence[float], level: float = 0.95):
    """(yhat, lo, hi) lists over a grid, for plotting the mean-response band."""
    yhat, lo, hi = [], [], []
    for x in grid:
        yhat.append(fit.predict(x))
        a, b = fit.mean_ci(x, level)
        lo.append(a)
        hi.append(b)
    return yhat, lo, hi


# ---------------------------------------------------------------------------
# reasoning-fraction sweep summaries


@dataclass(frozen=True)
class AblationSummary:
    benchmark: str
    rows: tuple[tuple[float, float], ...]
    gain_abs: float
    gain_rel_pct: float | None
    trend: TrendFit | None

    def to_dict(self) -> dict:
        return {
            "benchmark": self.benchmark,
            "rows": [{"fraction": f, "accuracy": a} for f, a in self.rows],
            "gain_abs": self.gain_abs,
            "gain_rel_pct": self.gain_rel_pct,
            "trend": self.trend.to_dict() if self.trend is not None else None,
        }


def ablation_report(
    series: Mapping[str, Sequence[tuple[float, float]]],
) -> dict[str, AblationSummary]:
    """Summarize accuracy sweeps over the reasoning-data fraction.

    Each entry maps a benchmark name to (fraction, accuracy) pairs; a
    series needs at least two fractions and must include fraction 0 as
    its baseline.  The gain compares the largest fraction against that
    baseline, and the trend is a least-squares line over the whole
    series (None when the fit cannot run).
    """
    out: dict[str, AblationSummary] = {}
    for name, pairs in series.items():
        rows = sorted((float(f), float(a)) for f, a in pairs)
        if len(rows) < 2:
            raise ValueError(f"{name}: need at least two fractions")
        if rows[0][0] != 0.0:
            raise ValueError(f"{name}: series must include fraction 0")
        baseline = rows[0][1]
        top = rows[-1][1]
        rel = relative_gain(baseline, top) if baseline != 0 else None
        try:
            trend = fit_trend([f for f, _ in rows], [a for _, a in rows])
        except (ValueError, DegenerateXError):
            trend = None
        out[name] = AblationSummary(
            benchmark=name,
            rows=tuple(rows),
            gain_abs=gain(baseline, top),
            gain_rel_pct=rel,
            trend=trend,
        )
    return out


__all__ = [
    "betainc", "t_two_sided_p", "t_sf", "t_cdf", "t_ppf",
    "TTestResult", "welch_from_summary", "pooled_from_summary",
    "welch_from_samples", "pooled_from_samples",
    "gain", "relative_gain", "TrendFit", "DegenerateXError",
    "fit_trend", "trend_band", "AblationSummary", "ablation_report",
]
