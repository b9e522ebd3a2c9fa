"""Out-of-sample performance metrics of daily wealth paths and paired significance tests."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Mapping, Optional, Sequence, Tuple

import numpy as np
import pandas as pd
import scipy.stats

from ctrlmv.utils.errors import (
    DimensionMismatchError,
    InsufficientDataError,
    InvalidStateError,
    UndefinedMetricError,
)
from ctrlmv.utils.logger import get_logger

logger = get_logger("Metrics")

TRADING_DAYS = 252
MONTH_DAYS = 21
METRIC_COLUMNS = ("return", "volatility", "sharpe", "sortino", "calmar", "mdd", "rt")


@dataclass(frozen=True)
class MetricReport:
    """Metrics of one wealth path; undefined ratios are NaN, ``rt`` None if never recovered."""

    ann_return: float
    ann_vol: float
    sharpe: float
    sortino: float
    calmar: float
    mdd: float
    rt: Optional[int]

    def as_row(self) -> dict:
        row = asdict(self)
        return {
            "return": row["ann_return"],
            "volatility": row["ann_vol"],
            "sharpe": row["sharpe"],
            "sortino": row["sortino"],
            "calmar": row["calmar"],
            "mdd": row["mdd"],
            "rt": row["rt"],
        }


def _wealth(wealth) -> np.ndarray:
    x = np.asarray(wealth, dtype=float).ravel()
    if x.size == 0:
        raise InsufficientDataError("empty wealth series")
    if not np.all(np.isfinite(x)):
        raise InvalidStateError("wealth series contains non-finite values")
    if x[0] <= 0:
        raise InvalidStateError(f"initial wealth must be positive, got {x[0]}")
    return x


def _bankrupt_at(x: np.ndarray) -> Optional[int]:
    hits = np.flatnonzero(x <= 0)
    return int(hits[0]) if hits.size else None


def daily_returns(wealth) -> np.ndarray:
    """Simple daily returns up to (and including) the day wealth reaches zero."""
    x = _wealth(wealth)
    stop = _bankrupt_at(x)
    if stop is not None:
        x = x[: stop + 1]
    return x[1:] / x[:-1] - 1.0


def annualize(wealth) -> Tuple[float, float]:
    """Annualized geometric return and volatility of a daily wealth path.

    A path that hits zero has an annualized return of -100%.
    """
    x = _wealth(wealth)
    if x.size < 2:
        raise InsufficientDataError("need at least 2 wealth points to annualize")
    rets = daily_returns(x)
    vol = float(np.sqrt(TRADING_DAYS) * rets.std(ddof=1)) if rets.size > 1 else 0.0
    if _bankrupt_at(x) is not None:
        return -1.0, vol
    n_days = x.size - 1
    return float((x[-1] / x[0]) ** (TRADING_DAYS / n_days) - 1.0), vol


def sharpe(wealth, r: float = 0.0) -> float:
    ann_return, ann_vol = annualize(wealth)
    if ann_vol <= 0:
        raise UndefinedMetricError("Sharpe ratio undefined: zero volatility")
    return (ann_return - r) / ann_vol


def downside_deviation(wealth) -> float:
    """Annualized root-mean-square of daily shortfalls below the mean daily return."""
    rets = daily_returns(wealth)
    if rets.size == 0:
        return 0.0
    shortfall = np.minimum(rets - rets.mean(), 0.0)
    return float(np.sqrt(TRADING_DAYS * np.mean(shortfall**2)))


def sortino(wealth, r: float = 0.0) -> float:
    ann_return, _ = annualize(wealth)
    downside = downside_deviation(wealth)
    if downside <= 1e-15:
        raise UndefinedMetricError("Sortino ratio undefined: no downside deviation")
    return (ann_return - r) / downside


def max_drawdown(wealth) -> float:
    x = _wealth(wealth)
    peak = np.maximum.accumulate(x)
    return float(np.max((peak - x) / peak))


def recovery_time(wealth) -> Optional[int]:
    """Days from the earliest maximum-drawdown trough back to the preceding peak.

    Returns 0 without a drawdown and None when the peak is never regained.
    """
    x = _wealth(wealth)
    peak = np.maximum.accumulate(x)
    drawdown = (peak - x) / peak
    if np.max(drawdown) <= 0:
        return 0
    trough = int(np.argmax(drawdown))
    recovered = np.flatnonzero(x[trough + 1 :] >= peak[trough])
    if recovered.size == 0:
        return None
    return int(recovered[0]) + 1


def calmar(wealth, r: float = 0.0) -> float:
    ann_return, _ = annualize(wealth)
    mdd = max_drawdown(wealth)
    if mdd <= 0:
        raise UndefinedMetricError("Calmar ratio undefined: no drawdown")
    return (ann_return - r) / mdd


def _or_nan(fn, wealth, r: float) -> float:
    try:
        return float(fn(wealth, r))
    except UndefinedMetricError as e:
        logger.debug(f"{e}")
        return float("nan")


def evaluate(wealth, r: float = 0.0) -> MetricReport:
    ann_return, ann_vol = annualize(wealth)
    return MetricReport(
        ann_return=ann_return,
        ann_vol=ann_vol,
        sharpe=_or_nan(sharpe, wealth, r),
        sortino=_or_nan(sortino, wealth, r),
        calmar=_or_nan(calmar, wealth, r),
        mdd=max_drawdown(wealth),
        rt=recovery_time(wealth),
    )


def summarize_reports(
    reports: Mapping[str, Sequence[MetricReport]], keep_unrecovered: Sequence[str] = ("market",)
) -> pd.DataFrame:
    """Mean and standard deviation of every metric per strategy.

    An unrecovered path takes the highest recovery time among the same strategy's other
    paths. Strategies in ``keep_unrecovered`` (the market index) get no substitute and their
    unrecovered paths are left out of the recovery-time average, as are undefined ratios.
    """
    rows = [
        {"strategy": name, **rep.as_row()} for name, reps in reports.items() for rep in reps
    ]
    if not rows:
        raise InsufficientDataError("no metric reports to summarize")
    frame = pd.DataFrame(rows)
    frame["rt"] = frame["rt"].astype(float)
    substitute = frame.groupby("strategy")["rt"].transform("max")
    fill = ~frame["strategy"].isin(list(keep_unrecovered))
    frame.loc[fill, "rt"] = frame.loc[fill, "rt"].fillna(substitute[fill])

    table = []
    for name in reports:
        block = frame.loc[frame["strategy"] == name, list(METRIC_COLUMNS)]
        mean = block.mean(skipna=True)
        std = block.std(ddof=1, skipna=True) if len(block) > 1 else block.mean() * 0.0
        table.append({"strategy": name, "stat": "mean", **mean.to_dict()})
        table.append({"strategy": name, "stat": "std", **std.to_dict()})
    return pd.DataFrame(table, columns=["strategy", "stat", *METRIC_COLUMNS])


def wilcoxon_paired(a, b) -> float:
    """One-sided signed-rank p-value for the alternative that ``a`` exceeds ``b``.

    Normal approximation with tie correction and no continuity correction, so that
    ``p(a, b) + p(b, a) == 1`` when no difference is zero.
    """
    a = np.asarray(a, dtype=float).ravel()
    b = np.asarray(b, dtype=float).ravel()
    if a.shape != b.shape:
        raise DimensionMismatchError(f"paired samples differ in length: {a.size} vs {b.size}")
    if a.size < 10:
        raise InsufficientDataError(f"signed-rank test needs at least 10 pairs, got {a.size}")
    if np.all(a - b == 0):
        logger.warning("all paired differences are zero; returning p = 0.5")
        return 0.5
    result = scipy.stats.wilcoxon(a, b, alternative="greater", method="approx", correction=False)
    return float(result.pvalue)


def wilcoxon_matrix(sharpe_frame: pd.DataFrame) -> pd.DataFrame:
    """Pairwise p-values; entry (i, j) tests that strategy i's Sharpe exceeds strategy j's."""
    clean = sharpe_frame.dropna(axis=0, how="any")
    names = list(clean.columns)
    out = pd.DataFrame(np.nan, index=names, columns=names)
    for i in names:
        for j in names:
            if i != j:
                out.loc[i, j] = wilcoxon_paired(clean[i].to_numpy(), clean[j].to_numpy())
    return out
