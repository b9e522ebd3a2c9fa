"""Experiment recipes behind the command-line subcommands.

Every recipe writes its CSV tables and a ``manifest.json`` into a staging directory that
is renamed to ``<out>/<command>`` once the run has finished.
"""

from __future__ import annotations

import dataclasses
import os
import shutil
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, Iterator, List, Optional, Tuple

import numpy as np
import pandas as pd
from rich.console import Console
from rich.table import Table

from ctrlmv.core import oracles
from ctrlmv.core.ctrl_online import OnlineConfig, load_params, pretrain, save_params
from ctrlmv.core.ctrl_train import (
    Schedule,
    TrainConfig,
    TrainHistory,
    batch_increments,
    train_baseline,
)
from ctrlmv.core.market_sim import simulate_linear_feedback
from ctrlmv.core.metrics import METRIC_COLUMNS
from ctrlmv.core.panel_store import (
    PanelSampler,
    generate_synthetic_panel,
    load_panel,
    random_market,
)
from ctrlmv.models.market import MarketModel, ReturnPanel, SimConfig
from ctrlmv.models.params import PolicyParams, ValueParams
from ctrlmv.services.backtest import CTRL, BacktestConfig, replicate
from ctrlmv.utils import rng as rngs
from ctrlmv.utils.errors import ConfigError, CtrlMVError
from ctrlmv.utils.logger import get_logger
from ctrlmv.utils.manifest import write_manifest
from ctrlmv.utils.settings import get_settings_manager

logger = get_logger("Experiments")

COMMANDS = ("convergence", "regret", "tradeoff", "backtest", "sensitivity", "pretrain")
INIT_CHOICES = ("default", "oracle", "ones")
PERCENTILES = (2.5, 97.5)
TRADEOFF_BATCHES = 10


@dataclass
class ExperimentConfig:
    """Resolved configuration of one command run.

    ``settings`` is a snapshot of every settings category after config-file and flag
    overrides; the scale factors multiply the learning rates, gamma and phi3.
    """

    command: str
    settings: Dict[str, Dict[str, Any]] = field(default_factory=dict)
    seed: int = 0
    episodes: int = 10000
    replications: int = 100
    workers: int = 1
    out: Path = Path("runs")
    init: str = "default"
    init_params: Optional[Path] = None
    panel: Optional[Path] = None
    synthetic: bool = False
    burn_in: int = 200
    lr_scale: float = 1.0
    gamma_scale: float = 1.0
    phi3_scale: float = 1.0

    def __post_init__(self):
        if self.command not in COMMANDS:
            raise ConfigError(f"unknown command {self.command!r}")
        for name in ("lr_scale", "gamma_scale", "phi3_scale"):
            if not getattr(self, name) > 0:
                raise ConfigError(f"{name} must be positive, got {getattr(self, name)}")
        if self.episodes < 1 or self.replications < 1 or self.workers < 1:
            raise ConfigError("episodes, replications and workers must be positive")
        if self.init not in INIT_CHOICES:
            raise ConfigError(f"init must be one of {INIT_CHOICES}, got {self.init!r}")
        self.out = Path(self.out)

    @classmethod
    def from_settings(cls, command: str, **overrides) -> "ExperimentConfig":
        """Build from the settings manager; ``overrides`` are already-parsed flag values."""
        settings = get_settings_manager().get_all()
        exp, training = settings["experiment"], settings["training"]
        values = {
            "seed": exp["seed"],
            "episodes": training["episodes"],
            "replications": exp["replications"],
            "workers": exp["workers"],
            "out": exp["out"],
            "init": training["init"],
            "burn_in": exp["burn_in"],
            "lr_scale": exp["lr_scale"],
            "gamma_scale": exp["gamma_scale"],
            "phi3_scale": exp["phi3_scale"],
        }
        values.update({k: v for k, v in overrides.items() if v is not None})
        return cls(command=command, settings=settings, **values)

    def section(self, name: str) -> Dict[str, Any]:
        return self.settings.get(name, {})

    def to_dict(self) -> Dict[str, Any]:
        data = dataclasses.asdict(self)
        for key in ("out", "init_params", "panel"):
            data[key] = None if data[key] is None else str(data[key])
        return data


@contextmanager
def staging_dir(out: Path, command: str) -> Iterator[Path]:
    """Directory for a run's files, moved to ``out/command`` on success and removed on error."""
    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    staging = out / f".{command}.staging-{os.getpid()}"
    if staging.exists():
        shutil.rmtree(staging)
    staging.mkdir()
    try:
        yield staging
    except BaseException:
        shutil.rmtree(staging, ignore_errors=True)
        raise
    target = out / command
    if target.exists():
        shutil.rmtree(target)
    staging.rename(target)
    logger.info(f"Results written to {target}")


def simulation_model(cfg: ExperimentConfig) -> MarketModel:
    sim = cfg.section("simulation")
    return MarketModel.from_vols(sim["mu"], sim["vols"], sim["corr"], r=sim["r"])


def training_schedule(cfg: ExperimentConfig) -> Schedule:
    tr = cfg.section("training")
    return Schedule(
        alpha=tr["alpha"],
        beta=tr["beta"],
        c_theta1=tr["c_theta1"],
        c_theta2=tr["c_theta2"],
        b_scale=tr["b_scale"],
        c1_scale=tr["c1_scale"],
        c2_scale=tr["c2_scale"],
        cw_scale=tr["cw_scale"],
        lr_scale=cfg.lr_scale,
    )


def train_config(cfg: ExperimentConfig, replication: int) -> TrainConfig:
    sim, tr = cfg.section("simulation"), cfg.section("training")
    return TrainConfig(
        z=tr["z"],
        gamma=tr["gamma"] * cfg.gamma_scale,
        episodes=cfg.episodes,
        dt=sim["dt"],
        multiplier_update_period=tr["multiplier_period"],
        batch_size=tr["batch_size"],
        x0=sim["x0"],
        T=sim["T"],
        seed=rngs.spawn_seed(rngs.stream(cfg.seed, rngs.EPISODE, replication)),
    )


def initial_params(
    cfg: ExperimentConfig, d: int, oracle: Optional[oracles.OracleSet] = None
) -> Tuple[ValueParams, PolicyParams]:
    """Starting critic and actor parameters for ``cfg.init`` (or a saved parameter file)."""
    if cfg.init_params is not None:
        return load_params(cfg.init_params)
    tr, sim = cfg.section("training"), cfg.section("simulation")
    phi3 = tr["phi3"] * cfg.phi3_scale
    gamma = tr["gamma"] * cfg.gamma_scale
    if cfg.init == "oracle":
        if oracle is None:
            raise ConfigError("oracle initialization needs a simulation model")
        v = ValueParams(theta1=0.0, theta2=0.0, theta3=phi3)
        p = PolicyParams(
            phi1=oracle.phi1_star, phi2=oracle.phi2_star, phi3=phi3, w=oracle.w_star,
            gamma=gamma, T=sim["T"],
        )
        return v, p
    if cfg.init == "ones":
        v = ValueParams(theta1=1.0, theta2=1.0, theta3=phi3)
        return v, PolicyParams.initial(d, phi1=1.0, phi2=1.0, w=1.0, phi3=phi3, gamma=gamma, T=sim["T"])
    v = ValueParams(theta1=0.0, theta2=0.0, theta3=phi3)
    return v, PolicyParams.initial(d, phi1=0.0, phi2=1.0, w=1.5, phi3=phi3, gamma=gamma, T=sim["T"])


def _train_replication(
    model: MarketModel, train_cfg: TrainConfig, sched: Schedule, init
) -> TrainHistory:
    return train_baseline(model, train_cfg, sched, init)


def train_runs(
    cfg: ExperimentConfig, model: MarketModel, oracle: oracles.OracleSet
) -> List[TrainHistory]:
    """Independent baseline training runs, returned in replication order."""
    sched = training_schedule(cfg)
    init = initial_params(cfg, model.d, oracle)
    jobs = [(model, train_config(cfg, i), sched, init) for i in range(cfg.replications)]
    logger.info(
        f"{cfg.command}: {cfg.replications} runs x {cfg.episodes} episodes on {cfg.workers} worker(s)"
    )
    if cfg.workers <= 1:
        return [_train_replication(*job) for job in jobs]
    with ProcessPoolExecutor(max_workers=cfg.workers) as executor:
        futures = [executor.submit(_train_replication, *job) for job in jobs]
        return [f.result() for f in futures]


def _band(name: str, samples: np.ndarray) -> Dict[str, np.ndarray]:
    low, high = np.percentile(samples, PERCENTILES, axis=0)
    return {f"{name}_mean": samples.mean(axis=0), f"{name}_p2.5": low, f"{name}_p97.5": high}


def _slope_or_nan(n: np.ndarray, values: np.ndarray, burn_in: int) -> Tuple[float, float]:
    try:
        return oracles.fit_loglog_slope(n, values, burn_in=burn_in)
    except CtrlMVError as e:
        logger.warning(f"slope fit skipped: {e}")
        return float("nan"), float("nan")


def _print_table(title: str, frame: pd.DataFrame, console: Optional[Console] = None) -> None:
    console = console or Console(stderr=True)
    table = Table(title=title)
    for col in frame.columns:
        table.add_column(str(col), justify="left" if frame[col].dtype == object else "right")
    for _, row in frame.iterrows():
        table.add_row(
            *(f"{v:.4f}" if isinstance(v, (float, np.floating)) else str(v) for v in row.to_numpy())
        )
    console.print(table)


def cmd_convergence(cfg: ExperimentConfig) -> Path:
    """Mean squared parameter errors per episode with percentile bands and log-log slopes."""
    model = simulation_model(cfg)
    tr, sim = cfg.section("training"), cfg.section("simulation")
    oracle = oracles.optimal_params(model, tr["gamma"] * cfg.gamma_scale, tr["z"], sim["x0"], sim["T"])
    histories = train_runs(cfg, model, oracle)

    errors = [h.squared_errors(oracle) for h in histories]
    n = np.arange(1, cfg.episodes + 1)
    curves: Dict[str, np.ndarray] = {"n": n}
    slopes = []
    for name in ("mse_phi1", "mse_phi2", "mse_w"):
        samples = np.stack([e[name][1:] for e in errors])
        curves.update(_band(name, samples))
        slope, intercept = _slope_or_nan(n, samples.mean(axis=0), cfg.burn_in)
        final = float(np.median(np.sqrt(samples[:, -1])))
        slopes.append(
            {"parameter": name[4:], "slope": slope, "intercept": intercept, "median_final_error": final}
        )
    slope_frame = pd.DataFrame(slopes)

    with staging_dir(cfg.out, cfg.command) as stage:
        pd.DataFrame(curves).to_csv(stage / "convergence.csv", index=False)
        slope_frame.to_csv(stage / "slopes.csv", index=False)
        histories[0].write_csv(stage / "iterates_run0.csv", oracle)
        write_manifest(
            stage,
            cfg.command,
            cfg.to_dict(),
            results={
                "oracle": {"phi1": oracle.phi1_star, "phi2": oracle.phi2_star, "w": oracle.w_star},
                "slopes": slope_frame.set_index("parameter")["slope"].to_dict(),
            },
        )
    _print_table("Convergence slopes", slope_frame)
    return cfg.out / cfg.command


def cmd_regret(cfg: ExperimentConfig) -> Path:
    """Cumulative Sharpe-ratio regret of the actor iterates and its log-log growth rate."""
    model = simulation_model(cfg)
    tr, sim = cfg.section("training"), cfg.section("simulation")
    oracle = oracles.optimal_params(model, tr["gamma"] * cfg.gamma_scale, tr["z"], sim["x0"], sim["T"])
    histories = train_runs(cfg, model, oracle)

    regret = np.stack(
        [oracles.cumulative_regret(h.phi1[1:], oracle, model, sim["T"]) for h in histories]
    )
    n = np.arange(1, cfg.episodes + 1)
    frame = pd.DataFrame({"n": n, **_band("regret", regret)})
    slope, intercept = _slope_or_nan(n, regret.mean(axis=0), cfg.burn_in)
    summary = pd.DataFrame(
        [{"slope": slope, "intercept": intercept, "burn_in": cfg.burn_in, "sr_star": oracle.sr_star}]
    )

    with staging_dir(cfg.out, cfg.command) as stage:
        frame.to_csv(stage / "regret.csv", index=False)
        summary.to_csv(stage / "slope.csv", index=False)
        write_manifest(stage, cfg.command, cfg.to_dict(), results={"slope": slope})
    _print_table("Regret growth", summary)
    return cfg.out / cfg.command


def tradeoff_curve(
    model: MarketModel,
    oracle: oracles.OracleSet,
    sim: SimConfig,
    norms: np.ndarray,
    episodes: int,
    phi3: float,
    seed: int,
) -> pd.DataFrame:
    """Monte-Carlo total variance of the Z1 increment for phi2 of each Frobenius norm.

    phi2 keeps the direction of the optimal covariance; phi1 and w sit at their optima.
    Standard errors come from batch means over equal slices of the episodes.
    """
    direction = oracle.phi2_star / np.linalg.norm(oracle.phi2_star)
    v = ValueParams(theta1=0.0, theta2=0.0, theta3=phi3)
    rows = []
    for i, norm in enumerate(norms):
        p = PolicyParams(
            phi1=oracle.phi1_star, phi2=norm * direction, phi3=phi3, w=oracle.w_star,
            gamma=oracle.gamma, T=sim.T,
        )
        batch = simulate_linear_feedback(model, sim, p, rngs.stream(seed, rngs.TRADEOFF, i), episodes)
        _, z1, _, _ = batch_increments(batch, v, p, sim.dt, oracle.z)
        total = float(np.sum(z1.var(axis=0, ddof=1)))
        parts = [np.sum(chunk.var(axis=0, ddof=1)) for chunk in np.array_split(z1, TRADEOFF_BATCHES)]
        se = float(np.std(parts, ddof=1) / np.sqrt(TRADEOFF_BATCHES))
        rows.append({"phi2_norm": float(norm), "var_z1": total, "var_z1_se": se})
        logger.debug(f"|phi2|={norm:.4g}: Var(Z1)={total:.4g} (se {se:.2g})")
    return pd.DataFrame(rows)


def variance_dominance(
    model: MarketModel, oracle: oracles.OracleSet, T: float, scales=(0.25, 0.5, 1.0, 2.0, 4.0)
) -> pd.DataFrame:
    """Terminal mean and variance under scaled optimal exploration covariances."""
    rows = []
    for scale in scales:
        mean, var = oracles.terminal_moments_ode(
            model, oracle.phi1_star, oracle.w_star, oracle.x0, T,
            lambda t, s=scale: s * oracle.optimal_cov(t),
        )
        rows.append({"cov_scale": scale, "terminal_mean": mean, "terminal_var": var})
    return pd.DataFrame(rows)


def cmd_tradeoff(cfg: ExperimentConfig) -> Path:
    """Exploration-exploitation sweep of Var(Z1) over a log grid of |phi2|."""
    model = simulation_model(cfg)
    tr, sim, exp = cfg.section("training"), cfg.section("simulation"), cfg.section("experiment")
    gamma = tr["gamma"] * cfg.gamma_scale
    oracle = oracles.optimal_params(model, gamma, tr["z"], sim["x0"], sim["T"])
    norms = np.geomspace(exp["grid_min"], exp["grid_max"], exp["grid_points"])
    sim_cfg = SimConfig(x0=sim["x0"], T=sim["T"], dt=sim["dt"], seed=cfg.seed)
    curve = tradeoff_curve(
        model, oracle, sim_cfg, norms, exp["tradeoff_episodes"], tr["phi3"] * cfg.phi3_scale, cfg.seed
    )
    best = int(curve["var_z1"].idxmin())
    interior = 0 < best < len(curve) - 1
    if not interior:
        logger.warning("variance minimum sits on the edge of the |phi2| grid")
    dominance = variance_dominance(model, oracle, sim["T"])

    with staging_dir(cfg.out, cfg.command) as stage:
        curve.to_csv(stage / "tradeoff.csv", index=False)
        dominance.to_csv(stage / "variance_dominance.csv", index=False)
        write_manifest(
            stage,
            cfg.command,
            cfg.to_dict(),
            results={"argmin_norm": float(curve["phi2_norm"][best]), "interior_minimum": interior},
        )
    _print_table("Var(Z1) by |phi2|", curve)
    return cfg.out / cfg.command


def backtest_panel(cfg: ExperimentConfig) -> Tuple[ReturnPanel, List[Path]]:
    """Panel from ``--panel`` or a generated synthetic panel (with its input list)."""
    if cfg.panel is not None:
        return load_panel(cfg.panel), [Path(cfg.panel)]
    if not cfg.synthetic:
        raise ConfigError("backtests need --panel PATH or --synthetic")
    bt = cfg.section("backtest")
    model = random_market(bt["synthetic_assets"], rngs.stream(cfg.seed, rngs.PANEL, 1), r=bt["r"])
    n_days = 252 * bt["synthetic_years"]
    dates = pd.bdate_range(bt["synthetic_start"], periods=n_days)
    shift_day = None
    if bt["shift_year"] is not None:
        shift_day = int(np.searchsorted(dates.year.to_numpy(), int(bt["shift_year"])))
    panel = generate_synthetic_panel(
        model,
        start=bt["synthetic_start"],
        n_days=n_days,
        seed=cfg.seed,
        shift_day=shift_day,
        shifted_mu=model.mu + bt["shift_drift"],
    )
    return panel, []


def backtest_config(cfg: ExperimentConfig, **changes) -> BacktestConfig:
    bt, online = cfg.section("backtest"), cfg.section("online")
    online_cfg = OnlineConfig(
        rebalance_every=online["rebalance_every"],
        w_prev=online["w_prev"],
        w_curr=online["w_curr"],
        batch_size=online["batch_size"],
        multiplier_period=online["multiplier_period"],
        z=bt["z"],
        dt=online["dt"],
        risky_only=online["risky_only"],
    )
    values = dict(
        window_months=bt["window_months"],
        z=bt["z"],
        r=bt["r"],
        subset_size=bt["subset_size"],
        replications=cfg.replications,
        seed=cfg.seed,
        test_start=bt["test_start"],
        test_end=bt["test_end"],
        strategies=tuple(bt["strategies"]),
        drmv_delta=bt["drmv_delta"],
        online=online_cfg,
        pretrain_iterations=online["pretrain_iterations"],
        gamma=online["gamma"] * cfg.gamma_scale,
        phi3=online["phi3"] * cfg.phi3_scale,
        lr=online["lr"],
        lr_w=online["lr_w"],
        lr_scale=cfg.lr_scale,
        init=load_params(cfg.init_params) if cfg.init_params is not None else None,
    )
    values.update(changes)
    return BacktestConfig(**values)


def cmd_backtest(cfg: ExperimentConfig) -> Path:
    """Replicated out-of-sample comparison of every configured strategy."""
    panel, inputs = backtest_panel(cfg)
    result = replicate(panel, backtest_config(cfg), workers=cfg.workers)
    summary = result.summary()
    wilcoxon = result.wilcoxon()
    failures = result.failures()

    with staging_dir(cfg.out, cfg.command) as stage:
        summary.to_csv(stage / "metrics.csv", index=False)
        result.sharpe_frame().to_csv(stage / "sharpe.csv", index_label="replication")
        result.mean_wealth().to_csv(stage / "wealth.csv")
        result.results[0].weights.to_csv(stage / "weights.csv", index=False)
        if wilcoxon is not None:
            wilcoxon.to_csv(stage / "wilcoxon.csv", index_label="strategy")
        if not failures.empty:
            failures.to_csv(stage / "failures.csv", index=False)
        write_manifest(
            stage,
            cfg.command,
            cfg.to_dict(),
            inputs=inputs,
            results={"tickers_run0": result.results[0].tickers, "failures": len(failures)},
        )
    _print_table("Out-of-sample performance (mean)", summary[summary["stat"] == "mean"])
    return cfg.out / cfg.command


def cmd_sensitivity(cfg: ExperimentConfig) -> Path:
    """CTRL performance when learning rates, gamma or phi3 are scaled by fixed factors."""
    panel, inputs = backtest_panel(cfg)
    exp = cfg.section("experiment")
    grid = [("baseline", 1.0)]
    grid += [("lr", f) for f in exp["lr_factors"]]
    grid += [("gamma", f) for f in exp["gamma_factors"]]
    grid += [("phi3", f) for f in exp["phi3_factors"]]

    rows = []
    for parameter, factor in grid:
        scaled = dataclasses.replace(
            cfg,
            lr_scale=cfg.lr_scale * (factor if parameter == "lr" else 1.0),
            gamma_scale=cfg.gamma_scale * (factor if parameter == "gamma" else 1.0),
            phi3_scale=cfg.phi3_scale * (factor if parameter == "phi3" else 1.0),
        )
        result = replicate(panel, backtest_config(scaled, strategies=(CTRL,)), workers=cfg.workers)
        means = result.summary().set_index("stat").loc["mean"]
        rows.append({"parameter": parameter, "factor": factor, **{c: means[c] for c in METRIC_COLUMNS}})
        logger.info(f"sensitivity {parameter} x{factor}: sharpe {means['sharpe']:.3f}")
    frame = pd.DataFrame(rows, columns=["parameter", "factor", *METRIC_COLUMNS])

    with staging_dir(cfg.out, cfg.command) as stage:
        frame.to_csv(stage / "sensitivity.csv", index=False)
        write_manifest(stage, cfg.command, cfg.to_dict(), inputs=inputs)
    _print_table("Sensitivity of CTRL", frame)
    return cfg.out / cfg.command


def cmd_pretrain(cfg: ExperimentConfig) -> Path:
    """Pre-train CTRL on historical windows (or the simulation model) and save the parameters."""
    online, bt = cfg.section("online"), cfg.section("backtest")
    inputs: List[Path] = []
    if cfg.panel is not None or cfg.synthetic:
        panel, inputs = backtest_panel(cfg)
        if bt["test_start"] is not None:
            panel = ReturnPanel(returns=panel.returns.loc[: pd.Timestamp(bt["test_start"]) - pd.Timedelta(days=1)])
        source = PanelSampler(panel, r=bt["r"])
        z = bt["z"]
    else:
        source = simulation_model(cfg)
        z = cfg.section("training")["z"]
    online_cfg = OnlineConfig(dt=online["dt"], z=z, seed=cfg.seed)
    v, p, history = pretrain(
        source,
        online_cfg,
        gamma=online["gamma"] * cfg.gamma_scale,
        phi3=online["phi3"] * cfg.phi3_scale,
        iterations=cfg.episodes,
        batch_size=online["batch_size"],
        multiplier_period=online["multiplier_period"],
        lr=online["lr"],
        lr_w=online["lr_w"],
        lr_scale=cfg.lr_scale,
    )
    with staging_dir(cfg.out, cfg.command) as stage:
        save_params(stage / "params.json", v, p)
        history.write_csv(stage / "pretrain.csv")
        write_manifest(stage, cfg.command, cfg.to_dict(), inputs=inputs, results={"w": p.w})
    logger.info(f"pre-training done: w={p.w:.4f}")
    return cfg.out / cfg.command


RECIPES = {
    "convergence": cmd_convergence,
    "regret": cmd_regret,
    "tradeoff": cmd_tradeoff,
    "backtest": cmd_backtest,
    "sensitivity": cmd_sensitivity,
    "pretrain": cmd_pretrain,
}
