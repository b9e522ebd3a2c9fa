"""Rolling-window backtest engine with monthly rebalancing and replicated subsets."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from ctrlmv.core import metrics
from ctrlmv.core.ctrl_online import OnlineConfig, OnlineLearner, pretrain
from ctrlmv.core.ctrl_train import ConstantSchedule
from ctrlmv.core.panel_store import PanelSampler, month_boundaries, monthly_returns
from ctrlmv.core.strategies import STRATEGY_IDS, StrategyRequest, allocate
from ctrlmv.models.market import ReturnPanel
from ctrlmv.models.params import PolicyParams, ValueParams
from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import (
    CtrlMVError,
    InsufficientDataError,
    InvalidParameterError,
    MissingSideDataError,
    NumericalOverflowError,
    UnknownStrategyError,
)
from ctrlmv.utils.logger import get_logger

logger = get_logger("Backtest")

MARKET = "market"
CTRL = "ctrl"
ALL_STRATEGIES = (MARKET, *STRATEGY_IDS, CTRL)


def _default_online() -> OnlineConfig:
    return OnlineConfig(rebalance_every=metrics.MONTH_DAYS)


@dataclass
class BacktestConfig:
    """Backtest knobs; ``z`` is the annual wealth target, ``r`` the annual risk-free rate."""

    window_months: int = 120
    z: float = 1.15
    r: float = 0.0
    subset_size: Optional[int] = 10
    replications: int = 1
    seed: int = 0
    test_start: Optional[str] = None
    test_end: Optional[str] = None
    strategies: Tuple[str, ...] = ALL_STRATEGIES
    drmv_delta: Optional[float] = None
    online: OnlineConfig = field(default_factory=_default_online)
    pretrain_iterations: int = 20000
    gamma: float = 0.1
    phi3: float = 1.0
    lr: float = 0.005
    lr_w: float = 0.05
    lr_scale: float = 1.0
    init: Optional[Tuple[ValueParams, PolicyParams]] = None

    def __post_init__(self):
        if self.window_months < 2:
            raise InvalidParameterError("window_months must be at least 2")
        if self.replications < 1:
            raise InvalidParameterError("replications must be >= 1")
        unknown = [s for s in self.strategies if s not in ALL_STRATEGIES]
        if unknown:
            raise UnknownStrategyError(f"unknown strategies {unknown}; choose from {ALL_STRATEGIES}")
        self.strategies = tuple(self.strategies)

    @property
    def mu_star(self) -> float:
        """Monthly return target equivalent to the annual target z."""
        return self.z ** (1.0 / 12.0) - 1.0


@dataclass
class BacktestResult:
    """Daily wealth per strategy (first row is the day before the test) and the weights log.

    ``failures`` lists the learner failures of the run as (date, strategy, message).
    """

    wealth: pd.DataFrame
    weights: pd.DataFrame
    tickers: List[str]
    r: float = 0.0
    failures: List[Tuple[pd.Timestamp, str, str]] = field(default_factory=list)

    def reports(self) -> Dict[str, metrics.MetricReport]:
        return {name: metrics.evaluate(self.wealth[name].to_numpy(), self.r) for name in self.wealth}

    def subperiod(self, start=None, end=None) -> Dict[str, metrics.MetricReport]:
        """Metrics over the wealth rows dated within ``[start, end]``."""
        part = self.wealth.loc[start:end]
        if len(part) < 2:
            raise InsufficientDataError(f"sub-period {start}..{end} holds fewer than 2 days")
        return {name: metrics.evaluate(part[name].to_numpy(), self.r) for name in part}


def _validate_side_data(panel: ReturnPanel, strategies: Sequence[str]) -> None:
    needs = {
        MARKET: [("market", panel.market)],
        "lw": [("market", panel.market)],
        "bl": [("market", panel.market), ("caps", panel.caps)],
        "ff": [("factors", panel.ff_factors)],
    }
    for name in strategies:
        missing = [label for label, value in needs.get(name, []) if value is None]
        if missing:
            raise MissingSideDataError(f"strategy {name!r} needs panel {', '.join(missing)} columns")


def _test_months(cfg: BacktestConfig, periods: pd.PeriodIndex) -> List[int]:
    first = cfg.window_months
    if cfg.test_start is not None:
        start = pd.Period(cfg.test_start, freq="M")
        first = int(periods.searchsorted(start))
    last = len(periods)
    if cfg.test_end is not None:
        end = pd.Period(cfg.test_end, freq="M")
        last = int(periods.searchsorted(end, side="right"))
    if first < cfg.window_months:
        raise InsufficientDataError(
            f"test starts at month {first} but the window needs {cfg.window_months} prior months"
        )
    if first >= last:
        raise InsufficientDataError("no test months after the estimation window")
    return list(range(first, last))


def _ctrl_learner(panel: ReturnPanel, cfg: BacktestConfig, first_day: int) -> OnlineLearner:
    online = dataclasses.replace(cfg.online, z=cfg.z, seed=cfg.seed)
    sched = ConstantSchedule(lr=cfg.lr, lr_w=cfg.lr_w, lr_scale=cfg.lr_scale)
    if cfg.init is not None:
        v, p = cfg.init
    else:
        history = ReturnPanel(returns=panel.returns.iloc[:first_day])
        v, p, _ = pretrain(
            PanelSampler(history, r=cfg.r),
            online,
            gamma=cfg.gamma,
            phi3=cfg.phi3,
            iterations=cfg.pretrain_iterations,
            batch_size=online.batch_size,
            multiplier_period=online.multiplier_period,
            lr=cfg.lr,
            lr_w=cfg.lr_w,
            lr_scale=cfg.lr_scale,
        )
    if p.d != panel.d:
        raise InvalidParameterError(f"CTRL parameters are {p.d}-dimensional, panel has {panel.d} assets")
    return OnlineLearner(v, p, online, sched, r=cfg.r)


def run_backtest(
    panel: ReturnPanel, cfg: BacktestConfig, strategies: Optional[Sequence[str]] = None
) -> BacktestResult:
    """Monthly-rebalanced out-of-sample wealth of every strategy on one panel.

    Weights chosen at the first trading day of a month use only the ``window_months``
    calendar months before it. Holdings drift with prices inside the month and a
    strategy whose wealth reaches zero stays at zero. A learner that overflows is recorded in
    ``failures`` and CTRL keeps its drifted holdings from then on.
    """
    strategies = tuple(strategies) if strategies is not None else cfg.strategies
    _validate_side_data(panel, strategies)
    bounds = month_boundaries(panel.dates)
    monthly = monthly_returns(panel.returns)
    test_months = _test_months(cfg, monthly.index)
    first_day = bounds[test_months[0]].start
    logger.info(
        f"Backtest of {len(strategies)} strategies on {panel.d} assets: "
        f"{len(test_months)} months from {panel.dates[first_day].date()}"
    )

    window = monthly.to_numpy()
    market_m = monthly_returns(panel.market.to_frame()).to_numpy()[:, 0] if panel.market is not None else None
    ff_m = monthly_returns(panel.ff_factors).to_numpy() if panel.ff_factors is not None else None
    daily = panel.returns.to_numpy(dtype=float)
    market_d = panel.market.to_numpy(dtype=float) if panel.market is not None else None
    caps = panel.caps.to_numpy(dtype=float) if panel.caps is not None else None

    learner = _ctrl_learner(panel, cfg, first_day) if CTRL in strategies else None
    d = panel.d
    x = {name: 1.0 for name in strategies}
    held: Dict[str, np.ndarray] = {name: np.full(d, 1.0 / d) for name in strategies}
    path = {name: [1.0] for name in strategies}
    log_rows = []
    failures: List[Tuple[pd.Timestamp, str, str]] = []

    for m in test_months:
        lo = m - cfg.window_months
        rebalance_date = panel.dates[bounds[m].start]
        for name in strategies:
            if name == MARKET:
                continue
            if name == CTRL and learner is not None:
                w = learner.target_weights()
            elif name == CTRL:
                w = held[name] / held[name].sum()
            else:
                req = StrategyRequest(
                    strategy=name,
                    window=window[lo:m],
                    mu_star=cfg.mu_star,
                    z=cfg.z,
                    market_returns=None if market_m is None else market_m[lo:m],
                    factors=None if ff_m is None else ff_m[lo:m],
                    cap_weights=None if caps is None else caps[bounds[m].start - 1],
                    delta=cfg.drmv_delta,
                    r=cfg.r,
                    x=1.0,
                    x0=1.0,
                )
                try:
                    w = allocate(req)
                except CtrlMVError as e:
                    logger.warning(
                        f"{name} failed at {rebalance_date.date()}: {e}; keeping previous weights"
                    )
                    w = held[name] / held[name].sum()
            held[name] = np.asarray(w, dtype=float)
            log_rows.extend(
                (rebalance_date, name, ticker, float(wi)) for ticker, wi in zip(panel.tickers, w)
            )

        for day in bounds[m]:
            rets = daily[day]
            for name in strategies:
                if x[name] <= 0:
                    path[name].append(0.0)
                    continue
                if name == MARKET:
                    x[name] *= 1.0 + market_d[day]
                else:
                    gross = float(held[name] @ rets)
                    x[name] *= 1.0 + gross
                    if x[name] > 0:
                        held[name] = held[name] * (1.0 + rets) / (1.0 + gross)
                x[name] = max(x[name], 0.0)
                path[name].append(x[name])
            if learner is not None:
                try:
                    learner.step(np.log1p(rets))
                except NumericalOverflowError as e:
                    logger.warning(
                        f"ctrl learner failed on {panel.dates[day].date()}: {e}; "
                        "holding its drifted weights for the rest of the run"
                    )
                    failures.append((panel.dates[day], CTRL, str(e)))
                    learner = None

    index = panel.dates[first_day - 1 : bounds[test_months[-1]].stop]
    wealth = pd.DataFrame(path, index=index, columns=list(strategies))
    weights = pd.DataFrame(log_rows, columns=["date", "strategy", "ticker", "weight"])
    return BacktestResult(
        wealth=wealth, weights=weights, tickers=panel.tickers, r=cfg.r, failures=failures
    )


def draw_subset(panel: ReturnPanel, cfg: BacktestConfig, replication: int) -> List[str]:
    """Seeded ticker subset of one replication (the whole universe without a subset size)."""
    if cfg.subset_size is None or cfg.subset_size >= panel.d:
        return panel.tickers
    if cfg.subset_size < 1:
        raise InvalidParameterError("subset_size must be positive")
    gen = rngs.stream(cfg.seed, rngs.SUBSET, replication)
    picks = gen.choice(panel.d, size=cfg.subset_size, replace=False)
    return [panel.tickers[i] for i in sorted(picks)]


def _replication(panel: ReturnPanel, cfg: BacktestConfig, replication: int) -> BacktestResult:
    tickers = draw_subset(panel, cfg, replication)
    seed = rngs.spawn_seed(rngs.stream(cfg.seed, rngs.PRETRAIN, replication))
    result = run_backtest(panel.subset(tickers), dataclasses.replace(cfg, seed=seed))
    logger.info(f"Replication {replication + 1}/{cfg.replications} done")
    return result


@dataclass
class ReplicationResult:
    results: List[BacktestResult]

    @property
    def strategies(self) -> List[str]:
        return list(self.results[0].wealth.columns)

    def reports(self) -> Dict[str, List[metrics.MetricReport]]:
        per_run = [res.reports() for res in self.results]
        return {name: [run[name] for run in per_run] for name in self.strategies}

    def summary(self) -> pd.DataFrame:
        return metrics.summarize_reports(self.reports())

    def sharpe_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {name: [rep.sharpe for rep in reps] for name, reps in self.reports().items()}
        )

    def wilcoxon(self) -> Optional[pd.DataFrame]:
        frame = self.sharpe_frame().dropna()
        if len(frame) < 10:
            logger.warning(f"only {len(frame)} complete replications; skipping the Wilcoxon matrix")
            return None
        return metrics.wilcoxon_matrix(frame)

    def failures(self) -> pd.DataFrame:
        """Learner failures of every replication, one row each."""
        rows = [
            (i, date, name, message)
            for i, res in enumerate(self.results)
            for date, name, message in res.failures
        ]
        return pd.DataFrame(rows, columns=["replication", "date", "strategy", "message"])

    def mean_wealth(self) -> pd.DataFrame:
        """Average wealth curve per strategy, indexed by trading day of the test."""
        stacked = np.stack([res.wealth.to_numpy() for res in self.results])
        return pd.DataFrame(stacked.mean(axis=0), columns=self.strategies).rename_axis("day")


def replicate(panel: ReturnPanel, cfg: BacktestConfig, workers: int = 1) -> ReplicationResult:
    """Run ``cfg.replications`` backtests on seeded asset subsets, results in replication order."""
    if cfg.subset_size is not None and cfg.subset_size > panel.d:
        raise InsufficientDataError(f"universe of {panel.d} assets is smaller than subset {cfg.subset_size}")
    indices = range(cfg.replications)
    if workers <= 1:
        results = [_replication(panel, cfg, i) for i in indices]
    else:
        with ProcessPoolExecutor(max_workers=workers) as executor:
            futures = [executor.submit(_replication, panel, cfg, i) for i in indices]
            results = [f.result() for f in futures]
    return ReplicationResult(results=results)
