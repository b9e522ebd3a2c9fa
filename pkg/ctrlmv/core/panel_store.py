"""Return-panel CSV storage, calendar helpers and synthetic panels."""

from __future__ import annotations

from pathlib import Path
from typing import List, Optional, Sequence

import numpy as np
import pandas as pd

from ctrlmv.models.market import CAP_PREFIX, FACTOR_COLUMNS, MarketModel, ReturnPanel
from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import InsufficientDataError, InvalidParameterError, PanelFormatError
from ctrlmv.utils.logger import get_logger

logger = get_logger("PanelStore")

DATE_FORMAT = "%Y-%m-%d"
# first data row of a CSV sits on file line 2
_FIRST_LINE = 2


def load_panel(path) -> ReturnPanel:
    """Read and validate a panel CSV.

    Columns other than ``date``, the factor columns and ``CAP_<ticker>`` columns are traded
    assets. Raises PanelFormatError with the offending file line and column.
    """
    path = Path(path)
    try:
        raw = pd.read_csv(path, dtype=str, keep_default_na=False)
    except (OSError, pd.errors.ParserError, pd.errors.EmptyDataError) as e:
        raise PanelFormatError(f"cannot parse {path}: {e}") from e

    if "date" not in raw.columns:
        raise PanelFormatError(f"{path} has no 'date' column", column="date")
    if raw.empty:
        raise PanelFormatError(f"{path} has no data rows")

    try:
        dates = pd.to_datetime(raw["date"], format="ISO8601")
    except (ValueError, TypeError) as e:
        raise PanelFormatError(f"invalid date in {path}: {e}", column="date") from e
    gaps = np.flatnonzero(np.diff(dates.to_numpy().astype("datetime64[ns]").astype(np.int64)) <= 0)
    if gaps.size:
        raise PanelFormatError(
            "dates must be strictly increasing", row=int(gaps[0]) + 1 + _FIRST_LINE, column="date"
        )

    values = {}
    for col in raw.columns:
        if col == "date":
            continue
        parsed = np.empty(len(raw))
        for i, cell in enumerate(raw[col].str.strip()):
            if cell == "":
                raise PanelFormatError("missing value", row=i + _FIRST_LINE, column=col)
            try:
                parsed[i] = float(cell)
            except ValueError:
                parsed[i] = np.nan
            if not np.isfinite(parsed[i]):
                raise PanelFormatError(f"not a number: {cell!r}", row=i + _FIRST_LINE, column=col)
        values[col] = parsed

    index = pd.DatetimeIndex(dates, name="date")
    frame = pd.DataFrame(values, index=index)
    tickers = [c for c in frame.columns if c not in FACTOR_COLUMNS and not c.startswith(CAP_PREFIX)]
    if not tickers:
        raise PanelFormatError(f"{path} has no asset columns")
    for col in tickers + [c for c in FACTOR_COLUMNS if c in frame]:
        below = np.flatnonzero(frame[col].to_numpy() <= -1.0)
        if below.size:
            raise PanelFormatError(
                "return must exceed -1", row=int(below[0]) + _FIRST_LINE, column=col
            )

    factor_cols = [c for c in FACTOR_COLUMNS if c in frame]
    cap_cols = [c for c in frame.columns if c.startswith(CAP_PREFIX)]
    caps = None
    if cap_cols:
        caps = frame[cap_cols].rename(columns=lambda c: c[len(CAP_PREFIX) :])
    panel = ReturnPanel(
        returns=frame[tickers],
        factors=frame[factor_cols] if factor_cols else None,
        caps=caps,
    )
    logger.info(f"Loaded panel {path}: {len(index)} days x {len(tickers)} assets")
    return panel


def write_panel(panel: ReturnPanel, path) -> Path:
    """Write a panel in the layout read by :func:`load_panel` (shortest round-trip floats)."""
    path = Path(path)
    frame = panel.returns.copy()
    if panel.factors is not None:
        frame = frame.join(panel.factors)
    if panel.caps is not None:
        frame = frame.join(panel.caps.add_prefix(CAP_PREFIX))
    out = pd.DataFrame({"date": frame.index.strftime(DATE_FORMAT)})
    for col in frame.columns:
        out[col] = [repr(float(v)) for v in frame[col].to_numpy(dtype=float)]
    path.parent.mkdir(parents=True, exist_ok=True)
    out.to_csv(path, index=False)
    return path


def month_boundaries(dates) -> List[range]:
    """Contiguous index ranges of the calendar months in ``dates``."""
    index = pd.DatetimeIndex(dates)
    if len(index) == 0:
        raise InsufficientDataError("no dates to partition")
    months = index.to_period("M").to_numpy()
    starts = [0, *(np.flatnonzero(months[1:] != months[:-1]) + 1).tolist()]
    stops = [*starts[1:], len(index)]
    return [range(a, b) for a, b in zip(starts, stops)]


def monthly_returns(returns: pd.DataFrame) -> pd.DataFrame:
    """Compound daily simple returns into calendar-month returns."""
    growth = np.log1p(returns).groupby(returns.index.to_period("M")).sum()
    return np.expm1(growth)


class PanelSampler:
    """Random contiguous windows of a historical panel, as episode log-returns (r = 0)."""

    def __init__(self, panel: ReturnPanel, r: float = 0.0):
        self.panel = panel
        self.r = float(r)
        self._log_returns = panel.log_returns()

    @property
    def d(self) -> int:
        return self._log_returns.shape[1]

    def draw(
        self, n_steps: int, dt: float, rng: np.random.Generator, size: Optional[int] = None
    ) -> np.ndarray:
        available = self._log_returns.shape[0]
        if n_steps > available:
            raise InsufficientDataError(
                f"panel has {available} days, an episode needs {n_steps}"
            )
        n = 1 if size is None else size
        starts = rng.integers(0, available - n_steps + 1, size=n)
        windows = np.stack([self._log_returns[s : s + n_steps] for s in starts])
        return windows[0] if size is None else windows


def random_market(d: int, rng: np.random.Generator, r: float = 0.0) -> MarketModel:
    """One-factor market with drifts in [0.05, 0.25] and volatilities in [0.15, 0.45]."""
    if d < 1:
        raise InvalidParameterError(f"need at least one asset, got {d}")
    mu = rng.uniform(0.05, 0.25, size=d)
    vols = rng.uniform(0.15, 0.45, size=d)
    loading = rng.uniform(0.3, 0.7, size=d)
    corr = np.outer(loading, loading)
    np.fill_diagonal(corr, 1.0)
    return MarketModel.from_vols(mu, vols, corr, r=r)


def generate_synthetic_panel(
    model: MarketModel,
    start: str = "2000-01-03",
    n_days: int = 252 * 15,
    tickers: Optional[Sequence[str]] = None,
    seed: int = 0,
    shift_day: Optional[int] = None,
    shifted_mu: Optional[np.ndarray] = None,
) -> ReturnPanel:
    """Daily GBM panel with market, size and value factor columns and drifting caps.

    From ``shift_day`` on the drift switches to ``shifted_mu``. MKT is the equal-weight
    market return; SMB and HML are spreads between the first and second half, and the even
    and odd positions, of the ticker list.
    """
    d = model.d
    if d < 4:
        raise InvalidParameterError(f"synthetic panels need at least 4 assets, got {d}")
    tickers = list(tickers) if tickers is not None else [f"S{i:03d}" for i in range(d)]
    if len(tickers) != d:
        raise InvalidParameterError(f"{len(tickers)} tickers for a {d}-asset model")
    dt = 1.0 / 252
    gen = rngs.stream(seed, rngs.PANEL)
    logs = model.draw(n_days, dt, gen)
    if shift_day is not None and shifted_mu is not None and 0 <= shift_day < n_days:
        shifted = MarketModel(mu=np.asarray(shifted_mu, dtype=float), sigma=model.sigma, r=model.r)
        logs[shift_day:] = shifted.draw(n_days - shift_day, dt, gen)
    simple = np.expm1(logs)

    dates = pd.bdate_range(start=start, periods=n_days, name="date")
    returns = pd.DataFrame(simple, index=dates, columns=tickers)
    half = d // 2
    mkt = simple.mean(axis=1)
    factors = pd.DataFrame(
        {
            "MKT": mkt,
            "SMB": simple[:, :half].mean(axis=1) - simple[:, half:].mean(axis=1),
            "HML": simple[:, 0::2].mean(axis=1) - simple[:, 1::2].mean(axis=1),
            "MKTRF": mkt - model.r * dt,
        },
        index=dates,
    )
    initial_caps = gen.lognormal(mean=0.0, sigma=1.0, size=d)
    caps = pd.DataFrame(
        initial_caps * np.cumprod(1.0 + simple, axis=0), index=dates, columns=tickers
    )
    logger.debug(f"Generated synthetic panel: {n_days} days x {d} assets (seed {seed})")
    return ReturnPanel(returns=returns, factors=factors, caps=caps)
