"""Point and probabilistic forecast metrics plus the Spearman-distance comparator.

Every metric accepts ``return_flags=True`` to also get a tuple of flag
strings. A metric whose denominator vanishes returns NaN with the
``undefined`` flag; aggregates skip such values.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass

import numpy as np

from .errors import ShapeError

GEOMEAN_FLOOR = 1e-9
DENOM_FLOOR = 1e-12
DEFAULT_WINDOW = 64
UNDEFINED = "undefined"


def _vec(x, name):
    v = np.asarray(x, dtype=np.float64).reshape(-1) if np.ndim(x) <= 1 else np.asarray(x, dtype=np.float64)
    if v.ndim == 2 and v.shape[1] == 1:
        v = v[:, 0]
    if v.ndim != 1:
        raise ShapeError(f"{name} must be univariate")
    return v


def _pair(forecast, actual):
    f, a = _vec(forecast, "forecast"), _vec(actual, "actual")
    if f.shape != a.shape:
        raise ShapeError(f"forecast length {f.shape[0]} != actual length {a.shape[0]}")
    if f.size == 0:
        raise ShapeError("empty series")
    return f, a


def _out(value, flags, return_flags):
    return (float(value), tuple(flags)) if return_flags else float(value)


def seasonal_naive_mae(insample, season: int = 1) -> float:
    y = _vec(insample, "insample")
    if season < 1:
        raise ValueError("season must be >= 1")
    if y.shape[0] <= season:
        raise ShapeError(f"insample length {y.shape[0]} must exceed season {season}")
    return float(np.mean(np.abs(y[season:] - y[:-season])))


def mase(forecast, actual, insample, season: int = 1, return_flags=False):
    """``MAE(forecast, actual) / MAE(seasonal naive over insample at lag season)``."""
    f, a = _pair(forecast, actual)
    denom = seasonal_naive_mae(insample, season)
    if denom < DENOM_FLOOR:
        return _out(math.nan, [UNDEFINED], return_flags)
    return _out(np.mean(np.abs(f - a)) / denom, [], return_flags)


def smape(forecast, actual, return_flags=False):
    """``200 * mean(|f - a| / (|f| + |a|))`` over terms with a nonzero denominator."""
    f, a = _pair(forecast, actual)
    den = np.abs(f) + np.abs(a)
    keep = den > 0
    flags = []
    if not keep.all():
        flags.append("skipped_terms")
    if not keep.any():
        return _out(math.nan, flags + [UNDEFINED], return_flags)
    return _out(200.0 * np.mean(np.abs(f - a)[keep] / den[keep]), flags, return_flags)


def nrmse(forecast, actual, return_flags=False):
    """RMSE normalized by mean |actual|."""
    f, a = _pair(forecast, actual)
    denom = float(np.mean(np.abs(a)))
    if denom < DENOM_FLOOR:
        return _out(math.nan, [UNDEFINED], return_flags)
    return _out(math.sqrt(float(np.mean((f - a) ** 2))) / denom, [], return_flags)


def msis(lower, upper, actual, insample, season: int = 1, alpha: float = 0.05, return_flags=False):
    """Mean scaled interval score of the central ``1 - alpha`` interval."""
    lo, a = _pair(lower, actual)
    hi, _ = _pair(upper, actual)
    if not 0 < alpha < 1:
        raise ValueError("alpha must lie in (0, 1)")
    flags = []
    if np.any(hi < lo):
        flags.append("crossed_interval")
    score = (hi - lo) + (2.0 / alpha) * (lo - a) * (a < lo) + (2.0 / alpha) * (a - hi) * (a > hi)
    denom = seasonal_naive_mae(insample, season)
    if denom < DENOM_FLOOR:
        return _out(math.nan, flags + [UNDEFINED], return_flags)
    return _out(np.mean(score) / denom, flags, return_flags)


def pinball_loss(level: float, quantile, actual) -> np.ndarray:
    """Pointwise quantile loss ``max(tau (y - q), (tau - 1)(y - q))``."""
    e = np.asarray(actual, dtype=np.float64) - np.asarray(quantile, dtype=np.float64)
    return np.maximum(level * e, (level - 1.0) * e)


def crps_from_quantiles(quantiles, levels, actual, return_flags=False):
    """Quantile approximation of CRPS, normalized by mean |actual|.

    ``quantiles`` has shape [n, K] for ``levels`` of length K. The score is
    ``sum_t mean_k 2 pinball(tau_k, q_tk, y_t) / sum_t |y_t|``; when the
    denominator is below 1e-12 the unnormalized mean is returned with the
    ``unnormalized`` flag.
    """
    lv = np.asarray(levels, dtype=np.float64).reshape(-1)
    if lv.size == 0 or np.any(lv <= 0) or np.any(lv >= 1) or np.any(np.diff(lv) <= 0):
        raise ValueError("levels must be strictly increasing in (0, 1)")
    a = _vec(actual, "actual")
    q = np.asarray(quantiles, dtype=np.float64)
    if q.ndim == 1 and lv.size == 1:
        q = q[:, None]
    if q.shape != (a.shape[0], lv.size):
        raise ShapeError(f"quantiles must have shape {(a.shape[0], lv.size)}, got {q.shape}")
    flags = []
    if np.any(np.diff(q, axis=1) < 0):
        flags.append("non_monotone_quantiles")
    loss = 2.0 * pinball_loss(lv[None, :], q, a[:, None])
    total = float(np.mean(loss, axis=1).sum())
    denom = float(np.abs(a).sum())
    if denom < DENOM_FLOOR:
        return _out(total / a.shape[0], flags + ["unnormalized"], return_flags)
    return _out(total / denom, flags, return_flags)


# --- Spearman distance -------------------------------------------------------

def average_ranks(x) -> np.ndarray:
    """1-based ranks with ties given the mean of the ranks they span."""
    v = np.asarray(x, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    ranks = np.empty(v.shape[0])
    i = 0
    n = v.shape[0]
    while i < n:
        j = i
        while j + 1 < n and sorted_v[j + 1] == sorted_v[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    return ranks


def spearman_rho(x, y) -> float:
    """Pearson correlation of average ranks; 0 when either input is constant."""
    rx, ry = average_ranks(x), average_ranks(y)
    dx, dy = rx - rx.mean(), ry - ry.mean()
    sx, sy = float(dx @ dx), float(dy @ dy)
    if sx == 0.0 or sy == 0.0:
        return 0.0
    return float(np.clip((dx @ dy) / math.sqrt(sx * sy), -1.0, 1.0))


def spearman_distance(x, y) -> float:
    """``1 - rho_s(x, y)`` in [0, 2]; 2-D inputs [n, channels] average per channel."""
    xa = np.asarray(x, dtype=np.float64)
    ya = np.asarray(y, dtype=np.float64)
    if xa.shape != ya.shape:
        raise ShapeError(f"shape mismatch {xa.shape} vs {ya.shape}")
    if xa.ndim == 1:
        xa, ya = xa[:, None], ya[:, None]
    if xa.ndim != 2 or xa.shape[0] < 2:
        raise ShapeError("need series of length >= 2")
    return float(np.mean([1.0 - spearman_rho(xa[:, c], ya[:, c]) for c in range(xa.shape[1])]))


# --- aggregation and reports ---------------------------------------------------

def geometric_mean(values) -> float:
    """Geometric mean of the finite values, each floored at 1e-9; NaN if none."""
    v = np.asarray([x for x in values if x is not None and math.isfinite(x)], dtype=np.float64)
    if v.size == 0:
        return math.nan
    return float(np.exp(np.mean(np.log(np.maximum(v, GEOMEAN_FLOOR)))))


def arithmetic_mean(values) -> float:
    v = [x for x in values if x is not None and math.isfinite(x)]
    return float(np.mean(v)) if v else math.nan


@dataclass(frozen=True)
class MetricRecord:
    series: str
    metric: str
    value: float
    flags: tuple = ()


@dataclass
class MetricsReport:
    records: list
    aggregation: str = "geometric"

    def values(self, metric: str) -> list:
        return [r.value for r in self.records if r.metric == metric]

    def aggregate(self, metric: str) -> float:
        vals = self.values(metric)
        return geometric_mean(vals) if self.aggregation == "geometric" else arithmetic_mean(vals)

    def metrics(self) -> list:
        seen = []
        for r in self.records:
            if r.metric not in seen:
                seen.append(r.metric)
        return seen

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["series", "metric", "value", "flags"])
        for r in self.records:
            w.writerow([r.series, r.metric, repr(float(r.value)), ";".join(r.flags)])
        for m in self.metrics():
            w.writerow([f"{self.aggregation}_mean", m, repr(self.aggregate(m)), ""])
        return buf.getvalue()


def evaluate_point(name, forecast, actual, insample, season=1, window=None) -> list:
    """MASE, sMAPE and NRMSE records for one series over the first ``window`` points."""
    f, a = _pair(forecast, actual)
    if window is not None:
        f, a = f[:window], a[:window]
    out = []
    for metric, (val, flags) in (
        ("mase", mase(f, a, insample, season, return_flags=True)),
        ("smape", smape(f, a, return_flags=True)),
        ("nrmse", nrmse(f, a, return_flags=True)),
    ):
        out.append(MetricRecord(name, metric, val, flags))
    return out
