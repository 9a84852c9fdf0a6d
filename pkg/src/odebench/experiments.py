"""Dataset simulation, replicate orchestration and every reported metric.

Grids are built by integer subdivision of one master grid per regime, so
observation times, discretization points and evaluation points are exact
floating-point members of each other wherever the contracts require it.
Dataset simulation is a pure function of (regime, seed).
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time as _time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, replace

import numpy as np

from .dynamics import OdeModel, get_model
from .integrate import Trajectory, integrate_rk45, solve_peak
from .magi import (
    DiscretizationGrid,
    PosteriorSamples,
    fit_magi,
    forecast_extended_grid,
    forecast_sequential,
    uniform_grid,
)
from .observations import ObservationSet
from .pinn import PinnConfig, TrainedPinn, forward_with_time_derivative, train_pinn

__all__ = [
    "ObservationSet",
    "RegimeSpec",
    "builtin_regimes",
    "get_regime",
    "simulate_dataset",
    "ground_truth",
    "regime_truth_qoi",
    "compute_rmse",
    "QuantitiesOfInterest",
    "quantities_of_interest",
    "mechanistic_fidelity",
    "coverage_report",
    "run_study",
    "run_single",
    "StudyResult",
    "derive_seed",
    "dataset_seed",
    "config_hash",
    "RESULT_COLUMNS",
    "REFERENCE_COVERAGE",
]

RESULT_COLUMNS = (
    "regime", "method", "lambda", "replicate", "seed",
    "component_or_parameter", "metric_name", "value", "flag",
)

# Published frequentist coverage of the 95% credible intervals at full scale
# (100 replicates); reference targets for offline runs, not CI gates.
REFERENCE_COVERAGE = {
    "seir-full": {"beta": 0.90, "gamma": 0.89, "sigma": 0.90},
    "seir-missing-e": {"beta": 0.94, "gamma": 0.91, "sigma": 0.93},
}


@dataclass(frozen=True)
class RegimeSpec:
    """One named experimental setup, grids included."""

    name: str
    model_name: str
    theta_true: tuple[float, ...]
    x0: tuple[float, ...]
    t0: float
    t_obs_end: float
    n_obs: int
    noise_kind: str  # "additive" (fixed sd per component) | "sd-fraction"
    noise_level: float
    observed_mask: tuple[bool, ...]
    n_grid_insample: int
    metric_space: str  # "log" or "raw": the space the components live in
    fourier_prior: bool
    forecast_protocol: str | None = None  # "extended" | "sequential"
    t_end: float | None = None
    n_grid_total: int | None = None
    points_per_step: int | None = None
    eval_index_lo: int | None = None
    eval_index_hi: int | None = None  # inclusive
    peak_component: int | None = None
    replicates: int = 100

    def model(self) -> OdeModel:
        return get_model(self.model_name)

    def master_times(self) -> np.ndarray:
        """The full grid, forecast horizon included when one exists."""
        if self.t_end is not None:
            return uniform_grid(self.t0, self.t_end, self.n_grid_total)
        return uniform_grid(self.t0, self.t_obs_end, self.n_grid_insample)

    def insample_times(self) -> np.ndarray:
        return self.master_times()[: self.n_grid_insample]

    def obs_times(self) -> np.ndarray:
        stride, rem = divmod(self.n_grid_insample - 1, self.n_obs - 1)
        if rem != 0:
            raise ValueError(f"regime {self.name}: observations do not subdivide the grid")
        return self.insample_times()[::stride]

    def obs_stride(self) -> int:
        return (self.n_grid_insample - 1) // (self.n_obs - 1)

    def eval_times(self) -> np.ndarray:
        if self.eval_index_lo is None:
            raise ValueError(f"regime {self.name} has no forecast evaluation grid")
        return self.master_times()[self.eval_index_lo : self.eval_index_hi + 1]


_LOG_MILLI = float(np.log(0.001))

_REGIMES = {}


def _register(spec: RegimeSpec) -> RegimeSpec:
    _REGIMES[spec.name] = spec
    return spec


SEIR_FULL = _register(RegimeSpec(
    name="seir-full",
    model_name="seir-log",
    theta_true=(2.0, 0.2, 0.6),
    x0=(_LOG_MILLI, _LOG_MILLI, _LOG_MILLI),
    t0=0.0, t_obs_end=6.0, n_obs=41,
    noise_kind="additive", noise_level=0.15,
    observed_mask=(True, True, True),
    n_grid_insample=161,
    metric_space="log",
    fourier_prior=False,
    forecast_protocol="extended",
    t_end=12.0, n_grid_total=321,
    eval_index_lo=161, eval_index_hi=320,
    peak_component=1,
))

SEIR_MISSING_E = _register(replace(
    SEIR_FULL, name="seir-missing-e", observed_mask=(False, True, True)))

LORENZ_CHAOTIC = _register(RegimeSpec(
    name="lorenz-chaotic",
    model_name="lorenz",
    theta_true=(8.0 / 3.0, 28.0, 10.0),
    x0=(5.0, 5.0, 5.0),
    t0=0.0, t_obs_end=8.0, n_obs=81,
    noise_kind="sd-fraction", noise_level=0.05,
    observed_mask=(True, True, True),
    n_grid_insample=321,
    metric_space="raw",
    fourier_prior=True,
))

LORENZ_STABLE = _register(replace(
    LORENZ_CHAOTIC, name="lorenz-stable", theta_true=(8.0 / 3.0, 23.0, 10.0)))

LORENZ_FORECAST = _register(RegimeSpec(
    name="lorenz-forecast",
    model_name="lorenz",
    theta_true=(8.0 / 3.0, 28.0, 10.0),
    x0=(5.0, 5.0, 5.0),
    t0=0.0, t_obs_end=2.0, n_obs=41,
    noise_kind="sd-fraction", noise_level=0.0005,
    observed_mask=(True, True, True),
    n_grid_insample=81,
    metric_space="raw",
    fourier_prior=True,
    forecast_protocol="sequential",
    t_end=5.0, n_grid_total=201,
    points_per_step=40,
    eval_index_lo=80, eval_index_hi=200,
))


def builtin_regimes() -> list[RegimeSpec]:
    return [SEIR_FULL, SEIR_MISSING_E, LORENZ_CHAOTIC, LORENZ_STABLE, LORENZ_FORECAST]


def get_regime(name: str, replicates: int | None = None) -> RegimeSpec:
    try:
        spec = _REGIMES[name]
    except KeyError:
        raise KeyError(f"unknown regime {name!r}; available: {sorted(_REGIMES)}") from None
    return spec if replicates is None else replace(spec, replicates=replicates)


# ---------------------------------------------------------------------------
# Seeding and hashing
# ---------------------------------------------------------------------------


def derive_seed(base_seed: int, *tags) -> int:
    """Stable 63-bit seed from a base seed and a mix of int/str tags."""
    ints = [int(base_seed) & 0xFFFFFFFF]
    for tag in tags:
        if isinstance(tag, str):
            ints.append(zlib.crc32(tag.encode()))
        else:
            ints.append(int(tag) & 0xFFFFFFFF)
    seq = np.random.SeedSequence(ints)
    return int(seq.generate_state(1, dtype=np.uint64)[0] >> 1)


def config_hash(payload: dict) -> str:
    text = json.dumps(payload, sort_keys=True, default=str)
    return hashlib.sha256(text.encode()).hexdigest()[:16]


# ---------------------------------------------------------------------------
# Truth and dataset simulation
# ---------------------------------------------------------------------------

_TRUTH_CACHE: dict[tuple, Trajectory] = {}


def _truth_key(regime: RegimeSpec) -> tuple:
    return (regime.model_name, regime.theta_true, regime.x0, regime.t0,
            regime.t_obs_end, regime.t_end, regime.n_grid_insample, regime.n_grid_total)


def ground_truth(regime: RegimeSpec, cache_dir: str | None = None) -> Trajectory:
    """Integrated truth on the regime's master grid, cached per regime."""
    key = _truth_key(regime)
    if key in _TRUTH_CACHE:
        return _TRUTH_CACHE[key]
    path = None
    model = regime.model()
    if cache_dir is not None:
        path = os.path.join(cache_dir, f"truth_{regime.name}.csv")
        if os.path.exists(path):
            traj = Trajectory.from_csv(path, model_name=model.name)
            _TRUTH_CACHE[key] = traj
            return traj
    traj = integrate_rk45(model, np.array(regime.x0), np.array(regime.theta_true),
                          regime.master_times())
    if path is not None:
        os.makedirs(cache_dir, exist_ok=True)
        traj.to_csv(path, component_names=model.component_names)
    _TRUTH_CACHE[key] = traj
    return traj


def simulate_dataset(regime: RegimeSpec, replicate_seed: int) -> ObservationSet:
    """Noisy observations of the shared truth; deterministic per (regime, seed)."""
    truth = ground_truth(regime)
    stride = regime.obs_stride()
    obs_idx = np.arange(0, regime.n_grid_insample, stride)
    times = truth.times[obs_idx]
    clean = truth.values[obs_idx]

    rng = np.random.default_rng(replicate_seed)
    d = clean.shape[1]
    if regime.noise_kind == "additive":
        sds = np.full(d, regime.noise_level)
    elif regime.noise_kind == "sd-fraction":
        sds = regime.noise_level * clean.std(axis=0)
    else:
        raise ValueError(f"unknown noise kind {regime.noise_kind!r}")
    noise = rng.standard_normal(clean.shape) * sds

    values = clean + noise
    for c, observed in enumerate(regime.observed_mask):
        if not observed:
            values[:, c] = np.nan
    return ObservationSet(
        times=times,
        values=values,
        mask=regime.observed_mask,
        noise_spec={
            "kind": regime.noise_kind,
            "level": regime.noise_level,
            "per_component_sd": [float(s) for s in sds],
            "reference": "per-component sd of the true trajectory over the observation window"
            if regime.noise_kind == "sd-fraction" else "absolute sd per component",
        },
        seed=replicate_seed,
    )


_QOI_CACHE: dict[tuple, tuple[float, float, float]] = {}


def regime_truth_qoi(regime: RegimeSpec) -> tuple[float, float, float]:
    """(R0, peak time, peak intensity) of the truth, peak on a 4x finer grid."""
    key = _truth_key(regime)
    if key in _QOI_CACHE:
        return _QOI_CACHE[key]
    r0 = regime.theta_true[0] / regime.theta_true[1]
    master = regime.master_times()
    step = (master[1] - master[0]) / 4.0
    transform = np.exp if regime.metric_space == "log" else None
    pt, pv = solve_peak(regime.model(), np.array(regime.x0), np.array(regime.theta_true),
                        horizon=(master[0], master[-1]), grid_step=step,
                        component=regime.peak_component or 1, value_transform=transform)
    _QOI_CACHE[key] = (r0, pt, pv)
    return _QOI_CACHE[key]


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------


def _rows_at(times: np.ndarray, eval_times: np.ndarray) -> np.ndarray:
    idx = np.searchsorted(times, eval_times)
    ok = (idx < times.size) & (times[np.minimum(idx, times.size - 1)] == eval_times)
    if not np.all(ok):
        raise ValueError("evaluation times must be exact members of the trajectory grid")
    return idx


def compute_rmse(estimate: Trajectory, truth: Trajectory, eval_times: np.ndarray) -> np.ndarray:
    """Per-component RMSE over eval_times (exact grid membership required)."""
    eval_times = np.asarray(eval_times, dtype=float)
    est = estimate.values[_rows_at(estimate.times, eval_times)]
    tru = truth.values[_rows_at(truth.times, eval_times)]
    if est.shape != tru.shape:
        raise ValueError("estimate and truth disagree in dimension")
    return np.sqrt(np.mean((est - tru) ** 2, axis=0))


@dataclass(frozen=True)
class QuantitiesOfInterest:
    r0: float
    peak_time: float
    peak_intensity: float
    peak_at_boundary: bool = False


def quantities_of_interest(
    theta_hat: np.ndarray,
    forecast: Trajectory,
    peak_component: int = 1,
    value_transform=np.exp,
) -> QuantitiesOfInterest:
    """Reproduction number and peak of the estimated infectious curve."""
    r0 = float(theta_hat[0] / theta_hat[1])
    vals = forecast.component(peak_component)
    if value_transform is not None:
        vals = value_transform(vals)
    idx = int(np.argmax(vals))
    return QuantitiesOfInterest(
        r0=r0,
        peak_time=float(forecast.times[idx]),
        peak_intensity=float(vals[idx]),
        peak_at_boundary=idx in (0, vals.size - 1),
    )


def mechanistic_fidelity(
    x_hat: np.ndarray,
    deriv_hat: np.ndarray,
    model: OdeModel,
    theta_hat: np.ndarray,
    times: np.ndarray,
) -> np.ndarray:
    """Per-component RMS residual between estimated derivative and the ODE
    right-hand side evaluated on the estimate (plain Euclidean norm)."""
    resid = deriv_hat - model.rhs(np.asarray(x_hat, dtype=float),
                                  np.asarray(theta_hat, dtype=float), times)
    return np.sqrt(np.mean(resid * resid, axis=0))


def coverage_report(intervals, theta_true) -> np.ndarray:
    """Fraction of replicates whose 95% interval contains each true parameter."""
    intervals = [np.asarray(iv, dtype=float) for iv in intervals]
    if len(intervals) < 2:
        raise ValueError("coverage needs at least 2 replicates")
    theta_true = np.asarray(theta_true, dtype=float)
    hits = np.stack([
        (iv[:, 0] <= theta_true) & (theta_true <= iv[:, 1]) for iv in intervals
    ])
    return hits.mean(axis=0)


# ---------------------------------------------------------------------------
# Single-run driver and the replicate study
# ---------------------------------------------------------------------------


def dataset_seed(base_seed: int, regime: RegimeSpec, replicate: int) -> int:
    """Dataset seeds depend on (base, replicate, regime) only, never the method."""
    return derive_seed(base_seed, replicate, "data", regime.name)


def _method_seed(base_seed: int, regime: RegimeSpec, replicate: int, tag: str) -> int:
    return derive_seed(base_seed, replicate, tag, regime.name)


def _fmt(value: float) -> str:
    return f"{value:.17g}"


def run_single(
    regime: RegimeSpec,
    method: str,
    options: dict,
    replicate: int,
    base_seed: int,
    forecast: bool = False,
    out_dir: str | None = None,
) -> tuple[list[tuple], dict]:
    """Simulate one dataset, run one method, compute all metrics.

    Returns (result rows, run manifest).  Rows follow RESULT_COLUMNS; wall
    time lives only in the manifest so result CSVs stay byte-identical
    across reruns.
    """
    model = regime.model()
    options = dict(options or {})
    lam = float(options.get("lam", 10.0)) if method == "pinn" else None
    data_seed = dataset_seed(base_seed, regime, replicate)
    tag = f"{method}" if lam is None else f"{method}:lam={lam:g}"
    seed = _method_seed(base_seed, regime, replicate, tag)
    dataset = simulate_dataset(regime, data_seed)
    truth = ground_truth(regime)

    chash = config_hash({
        "regime": regime.name, "method": method, "options": options,
        "replicate": replicate, "base_seed": base_seed, "forecast": forecast,
    })

    started = _time.perf_counter()
    flags: list[str] = []
    insample_times = regime.insample_times()

    if method == "magi":
        n_warmup = int(options.get("n_warmup", 3000))
        n_samples = int(options.get("n_samples", 3000))
        init_budget = int(options.get("init_budget", 3000))
        if forecast and regime.forecast_protocol == "extended":
            post = forecast_extended_grid(
                model, regime.master_times(), regime.n_grid_insample, dataset,
                use_fourier_prior=regime.fourier_prior, n_warmup=n_warmup,
                n_samples=n_samples, seed=seed, init_budget=init_budget,
                config_hash=chash)
        elif forecast and regime.forecast_protocol == "sequential":
            post, _stages = forecast_sequential(
                model, regime.master_times(), regime.n_grid_insample,
                regime.points_per_step, dataset,
                use_fourier_prior=regime.fourier_prior, n_warmup=n_warmup,
                n_samples=n_samples, seed=seed, init_budget=init_budget,
                config_hash=chash)
        elif forecast:
            raise ValueError(f"regime {regime.name} defines no forecast protocol")
        else:
            post = fit_magi(
                model, insample_times, dataset,
                use_fourier_prior=regime.fourier_prior, n_warmup=n_warmup,
                n_samples=n_samples, seed=seed, init_budget=init_budget,
                config_hash=chash)
        flags.extend(post.flags)
        est = Trajectory(times=post.grid_times, values=post.x_mean, model_name=model.name)
        theta_hat = post.theta_mean
        n_in = regime.n_grid_insample
        deriv_in = post.x_deriv_mean[:n_in]
        x_in = post.x_mean[:n_in]
        theta_ci = post.theta_ci
        if out_dir is not None:
            prefix = os.path.join(out_dir, f"posterior_{regime.name}_{tag.replace(':', '_')}_rep{replicate}")
            post.save(prefix)
    elif method == "pinn":
        grid_times = regime.master_times() if forecast else insample_times
        grid = DiscretizationGrid.build(grid_times, dataset.times)
        cfg = PinnConfig(
            lam=lam,
            epochs=int(options.get("epochs", 60000)),
            learning_rate=float(options.get("learning_rate", 0.01)),
            n_hidden=int(options.get("n_hidden", 3)),
            t_lo=float(insample_times[0]),
            t_hi=float(insample_times[-1]),
            seed=seed,
        )
        trained: TrainedPinn = train_pinn(cfg, model, dataset, grid)
        flags.extend(trained.flags)
        n_vals, v_vals = forward_with_time_derivative(trained.net, grid_times)
        est = Trajectory(times=grid_times, values=n_vals, model_name=model.name)
        theta_hat = trained.theta_hat
        n_in = regime.n_grid_insample
        x_in, deriv_in = n_vals[:n_in], v_vals[:n_in]
        theta_ci = None
        if out_dir is not None:
            prefix = os.path.join(out_dir, f"network_{regime.name}_{tag.replace(':', '_')}_rep{replicate}")
            trained.net.to_json(prefix + ".json")
            trained.history_to_csv(prefix + "_loss.csv")
    else:
        raise ValueError(f"unknown method {method!r}")

    wall = _time.perf_counter() - started
    flag_text = ";".join(flags)
    rows: list[tuple] = []
    lam_text = "" if lam is None else f"{lam:g}"

    def add(name: str, metric: str, value: float):
        rows.append((regime.name, method, lam_text, replicate, seed,
                     name, metric, _fmt(float(value)), flag_text))

    rmse_in = compute_rmse(est, truth, regime.obs_times())
    for c, comp in enumerate(model.component_names):
        add(comp, "rmse_insample", rmse_in[c])

    for p_i, pname in enumerate(model.param_names):
        add(pname, "abs_error_theta", abs(theta_hat[p_i] - regime.theta_true[p_i]))

    fid = mechanistic_fidelity(x_in, deriv_in, model, theta_hat, insample_times)
    for c, comp in enumerate(model.component_names):
        add(comp, "mech_fidelity", fid[c])

    if theta_ci is not None:
        hit = (theta_ci[:, 0] <= np.asarray(regime.theta_true)) & \
              (np.asarray(regime.theta_true) <= theta_ci[:, 1])
        for p_i, pname in enumerate(model.param_names):
            add(pname, "ci_hit", float(hit[p_i]))

    if forecast:
        eval_times = regime.eval_times()
        rmse_fc = compute_rmse(est, truth, eval_times)
        for c, comp in enumerate(model.component_names):
            add(comp, "rmse_forecast", rmse_fc[c])
        if regime.peak_component is not None:
            r0_true, pt_true, pv_true = regime_truth_qoi(regime)
            transform = np.exp if regime.metric_space == "log" else None
            qoi = quantities_of_interest(theta_hat, est,
                                         peak_component=regime.peak_component,
                                         value_transform=transform)
            add("R0", "abs_error_R0", abs(qoi.r0 - r0_true))
            add("peak_time", "abs_error_peak_time", abs(qoi.peak_time - pt_true))
            add("peak_intensity", "abs_error_peak_intensity",
                abs(qoi.peak_intensity - pv_true))

    manifest = {
        "regime": regime.name, "method": method, "lambda": lam,
        "replicate": replicate, "seed": seed, "data_seed": data_seed,
        "config_hash": chash, "wall_time_s": wall, "flags": flags,
    }
    return rows, manifest


def _safe_run(args) -> tuple[list[tuple], dict]:
    """run_single with failures downgraded to an error row (study continues)."""
    try:
        return run_single(*args)
    except Exception as exc:
        regime, method = args[0], args[1]
        lam = float(args[2].get("lam", 10.0)) if method == "pinn" else None
        lam_text = "" if lam is None else f"{lam:g}"
        rows = [(regime.name, method, lam_text, args[3], -1, "", "error",
                 "nan", f"error:{type(exc).__name__}")]
        return rows, {"config_hash": "", "error": f"{type(exc).__name__}: {exc}"}


@dataclass
class StudyResult:
    rows: list[tuple]
    attempted: int
    failed: int
    skipped: int


def run_study(
    regime: RegimeSpec,
    methods: list[tuple[str, dict]],
    replicates: int,
    base_seed: int = 0,
    parallelism: int = 1,
    out_dir: str | None = None,
    forecast: bool = False,
    save_artifacts: bool = False,
    first_replicate: int = 0,
) -> StudyResult:
    """Run replicates x methods, appending result rows to out_dir/results.csv.

    Resumable: finished (regime, method, lambda, replicate) combinations are
    skipped when their config hash matches the manifest from the earlier
    run.  Individual failures are recorded with an error flag and the study
    continues.
    """
    rows_out: list[tuple] = []
    manifest_path = results_path = None
    manifest: dict[str, dict] = {}
    if out_dir is not None:
        os.makedirs(out_dir, exist_ok=True)
        results_path = os.path.join(out_dir, "results.csv")
        manifest_path = os.path.join(out_dir, "manifest.json")
        if os.path.exists(manifest_path):
            with open(manifest_path) as fh:
                manifest = json.load(fh)

    jobs = []
    skipped = 0
    for replicate in range(first_replicate, first_replicate + replicates):
        for method, options in methods:
            lam = float(options.get("lam", 10.0)) if method == "pinn" else None
            key = f"{regime.name}|{method}|{'' if lam is None else f'{lam:g}'}|{replicate}"
            chash = config_hash({
                "regime": regime.name, "method": method, "options": dict(options or {}),
                "replicate": replicate, "base_seed": base_seed, "forecast": forecast,
            })
            if key in manifest and manifest[key].get("config_hash") == chash:
                skipped += 1
                continue
            jobs.append((key, (regime, method, dict(options or {}), replicate,
                               base_seed, forecast, out_dir if save_artifacts else None)))

    def handle(key, outcome):
        rows, run_manifest = outcome
        rows_out.extend(rows)
        manifest[key] = run_manifest
        if results_path is not None:
            new_file = not os.path.exists(results_path)
            with open(results_path, "a", newline="") as fh:
                writer = csv.writer(fh)
                if new_file:
                    writer.writerow(RESULT_COLUMNS)
                writer.writerows(rows)
            with open(manifest_path, "w") as fh:
                json.dump(manifest, fh, indent=2, sort_keys=True, default=str)

    if parallelism > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=parallelism) as pool:
            outcomes = pool.map(_safe_run, [args for _, args in jobs])
            for (key, args), outcome in zip(jobs, outcomes):
                handle(key, outcome)
    else:
        for key, args in jobs:
            handle(key, _safe_run(args))

    failed = sum(1 for row in rows_out if row[6] == "error")
    return StudyResult(rows=rows_out, attempted=len(jobs), failed=failed, skipped=skipped)
