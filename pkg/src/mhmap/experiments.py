"""Diffusion-field case study: truth simulation, Monte Carlo runs, sweeps, timing.

The ground truth lives on a fine mesh stepped every second; the filters run
on a coarse mesh every ten seconds and believe the wrong sensor noise
variance, so model mismatch is built into every run.
"""

from __future__ import annotations

import dataclasses
import math
import os
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import ConfigError, EmptyInput
from .fast import FastMHMapFilter, LocalFilterBank, LocalModel, weights_from_errors
from .fem import LSHAPE_HEIGHT, LSHAPE_WIDTH, assemble, contains, discretize, interp_matrices, make_lshape_mesh
from .mhe import MHMapFilter, SolverSettings
from .model import ThresholdSensorBank
from .noise import Gaussian

FILTERS = ("standard", "fast")
SWEEP_GRIDS = {
    "window": (1, 5, 10, 15),
    "noise": (0.01, 0.05, 0.1, 0.5, 1.0, 2.0, 5.0),
    "sensors": (5, 10, 20, 40),
}


@dataclass(frozen=True)
class ExperimentConfig:
    truth_h: float = 0.095
    truth_dt: float = 1.0
    est_h: float = 0.34               # used only when est_divisions is empty
    est_divisions: str = "7,5,4,4"    # 97 vertices, 89 unknowns, 152 triangles
    est_dt: float = 10.0
    diffusivity: float = 5e-8
    dirichlet: float = 30.0
    duration: float = 1200.0
    n_sensors: int = 20
    threshold_low: float = 0.05
    threshold_high: float = 29.95
    noise_true: float = 0.1
    noise_assumed: float = 1.0
    horizon: int = 15
    prior_mean: float = 5.0
    prior_variance: float = 10.0       # spread of the random initial guess
    prior_information: float = 10.0
    process_information: float = 10.0
    arrival_weight: float = 1e3
    local_arrival_weight: float = 1e3
    local_process_information: float = 1e2
    taylor_order: int = 0
    truth_process_variance: float = 0.0
    xi: float = 1.0
    calibrate: bool = False
    sampling_points: int = 304
    runs: int = 100
    seed: int = 0
    filter: str = "fast"
    workers: int = 1

    def __post_init__(self):
        positive = ("truth_h", "truth_dt", "est_h", "est_dt", "diffusivity", "duration", "noise_assumed",
                    "prior_information", "process_information", "arrival_weight", "local_arrival_weight",
                    "local_process_information", "sampling_points", "runs", "n_sensors", "workers")
        for key in positive:
            if not getattr(self, key) > 0:
                raise ConfigError(f"{key} must be positive, got {getattr(self, key)}", key)
        for key in ("noise_true", "truth_process_variance", "prior_variance", "xi"):
            if getattr(self, key) < 0:
                raise ConfigError(f"{key} must be non-negative", key)
        if self.horizon < 0:
            raise ConfigError("horizon must be non-negative", "horizon")
        if self.taylor_order not in (0, 1):
            raise ConfigError("taylor_order must be 0 or 1", "taylor_order")
        if self.filter not in FILTERS + ("both",):
            raise ConfigError(f"filter must be standard, fast or both, got {self.filter!r}", "filter")
        if not self.threshold_low < self.threshold_high:
            raise ConfigError("threshold_low must be below threshold_high", "threshold_low")
        if self.est_divisions:
            self.divisions      # parse check
        ratio = self.est_dt / self.truth_dt
        if abs(ratio - round(ratio)) > 1e-9:
            raise ConfigError("est_dt must be an integer multiple of truth_dt", "est_dt")
        if self.n_ticks <= self.horizon:
            raise ConfigError("duration too short for the window", "duration")

    @property
    def decimation(self) -> int:
        return int(round(self.est_dt / self.truth_dt))

    @property
    def divisions(self):
        """Estimator mesh segment counts, or None to size the mesh by ``est_h``."""
        if not self.est_divisions:
            return None
        try:
            out = tuple(int(v) for v in self.est_divisions.split(","))
        except ValueError:
            out = ()
        if len(out) != 4 or min(out) < 1:
            raise ConfigError(f"est_divisions needs four positive integers, got {self.est_divisions!r}",
                              "est_divisions")
        return out

    @property
    def n_ticks(self) -> int:
        return int(round(self.duration / self.est_dt))

    @property
    def filters(self) -> tuple:
        return FILTERS if self.filter == "both" else (self.filter,)

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_text(self) -> str:
        return "".join(f"{f.name} = {_fmt(getattr(self, f.name))}\n" for f in dataclasses.fields(self))

    @classmethod
    def from_text(cls, text: str, base: "ExperimentConfig | None" = None) -> "ExperimentConfig":
        return (base or cls()).replace(**parse_overrides(text))

    @classmethod
    def from_file(cls, path, base=None) -> "ExperimentConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)


def _fmt(value):
    if isinstance(value, bool):
        return "true" if value else "false"
    return repr(value) if isinstance(value, float) else str(value)


_TYPES = {f.name: f.type for f in dataclasses.fields(ExperimentConfig)}


def _convert(key, raw):
    kind = _TYPES[key]
    try:
        if kind == "bool":
            low = raw.lower()
            if low not in ("true", "false", "1", "0", "yes", "no"):
                raise ValueError(raw)
            return low in ("true", "1", "yes")
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value {raw!r} for {key}", key) from None


def parse_overrides(text: str) -> dict:
    """``key = value`` lines (``#`` comments) into typed config fields."""
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}: expected key = value", line)
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in _TYPES:
            raise ConfigError(f"unknown config key {key!r}", key)
        out[key] = _convert(key, raw)
    return out


# --------------------------------------------------------------------------
# static setup, shared by every run with the same physics


@dataclass
class SamplingGrid:
    points: np.ndarray
    truth_C: object
    truth_D: object
    est_C: object
    est_D: object

    @property
    def size(self) -> int:
        return self.points.shape[0]


def sampling_points(mesh, target: int) -> np.ndarray:
    """Lattice over the bounding box clipped to the domain, count closest to ``target``."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    h0 = math.sqrt(mesh.area / target)
    best = None
    for h in h0 * np.linspace(0.8, 1.25, 91):
        xs = np.arange(lo[0] + h / 2, hi[0], h)
        ys = np.arange(lo[1] + h / 2, hi[1], h)
        P = np.array(np.meshgrid(xs, ys)).reshape(2, -1).T
        P = P[_strictly_inside(mesh, P, 1e-9)]
        if best is None or abs(P.shape[0] - target) < abs(best.shape[0] - target):
            best = P
    return best


def _strictly_inside(mesh, P, margin):
    ok = contains(mesh, P)
    for dx, dy in ((margin, 0), (-margin, 0), (0, margin), (0, -margin)):
        ok &= contains(mesh, P + np.array([dx, dy]))
    return ok


@dataclass
class Setup:
    config: ExperimentConfig
    truth_mesh: object
    truth_model: object
    est_mesh: object
    est_model: object
    A: np.ndarray
    B: np.ndarray
    u: np.ndarray
    gamma_truth: np.ndarray
    gamma_est: np.ndarray
    grid: SamplingGrid
    truth_states: np.ndarray | None   # (n_ticks, n_truth) when deterministic


_PHYSICS = ("truth_h", "truth_dt", "est_h", "est_divisions", "est_dt", "diffusivity", "dirichlet", "duration", "sampling_points",
            "truth_process_variance")


def _physics_key(config):
    return tuple(getattr(config, k) for k in _PHYSICS)


@lru_cache(maxsize=8)
def _setup_cached(key) -> Setup:
    config = ExperimentConfig().replace(**dict(zip(_PHYSICS, key)))
    tm = make_lshape_mesh(config.truth_h)
    em = make_lshape_mesh(config.est_h, divisions=config.divisions)
    tmodel = discretize(assemble(tm, config.diffusivity, config.dirichlet), config.truth_dt)
    emodel = discretize(assemble(em, config.diffusivity, config.dirichlet), config.est_dt)
    pts = sampling_points(em, config.sampling_points)
    grid = SamplingGrid(pts, *interp_matrices(tm, pts), *interp_matrices(em, pts))
    setup = Setup(config, tm, tmodel, em, emodel, emodel.transition_matrix(), emodel.input_matrix(),
                  emodel.input, tmodel.assembled.gamma, emodel.assembled.gamma, grid, None)
    if config.truth_process_variance == 0:
        setup.truth_states = simulate_truth(setup, config, None)
    return setup


def build_setup(config: ExperimentConfig) -> Setup:
    return _setup_cached(_physics_key(config))


def simulate_truth(setup: Setup, config: ExperimentConfig, rng) -> np.ndarray:
    """Truth states at every estimator tick, (n_ticks, n_truth); starts from zero."""
    model = setup.truth_model
    x = np.zeros(model.n)
    q = math.sqrt(config.truth_process_variance)
    out = np.empty((config.n_ticks, model.n))
    for j in range(config.n_ticks):
        for _ in range(config.decimation):
            x = model.step(x)
            if q > 0:
                x = x + q * rng.standard_normal(model.n)
        out[j] = x
    return out


def place_sensors(mesh, count: int, rng) -> np.ndarray:
    """Uniform positions over the domain by rejection from the bounding box."""
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    out = np.empty((0, 2))
    while out.shape[0] < count:
        P = lo + (hi - lo) * rng.uniform(size=(2 * count, 2))
        out = np.vstack([out, P[contains(mesh, P)]])
    return out[:count]


# --------------------------------------------------------------------------
# single run


@dataclass
class RunMetrics:
    filter: str
    steps: np.ndarray            # estimator step k of each row
    error_norms: np.ndarray      # |e_k| over the sampling grid, estimate x_{k-N|k}
    opt_times: np.ndarray        # optimization seconds per step
    total_times: np.ndarray      # whole per-step seconds (measure, filter, error)
    pseudo_errors: np.ndarray | None = None   # step-1 estimate minus truth at sensors, fast only

    @property
    def average_rmse(self) -> float:
        return float(np.mean(self.error_norms))

    @property
    def opt_time(self) -> float:
        return float(np.sum(self.opt_times))

    @property
    def total_time(self) -> float:
        return float(np.sum(self.total_times))

    def same_as(self, other: "RunMetrics") -> bool:
        return all(np.array_equal(getattr(self, f), getattr(other, f)) for f in ("steps", "error_norms"))


@dataclass
class RunData:
    """Everything random about one run."""
    sensors: np.ndarray
    thresholds: np.ndarray
    prior_mean: np.ndarray
    truth: np.ndarray            # (n_ticks, n_truth)
    truth_sensor: np.ndarray     # (n_ticks, l) true concentration at the sensors
    bits: np.ndarray             # (n_ticks, l)


def run_seed(master: int, run: int) -> np.random.Generator:
    return np.random.default_rng([int(master), int(run)])


def draw_run(config: ExperimentConfig, setup: Setup, run: int) -> RunData:
    rng = run_seed(config.seed, run)
    sensors = place_sensors(setup.est_mesh, config.n_sensors, rng)
    tau = rng.uniform(config.threshold_low, config.threshold_high, config.n_sensors)
    x0 = config.prior_mean + math.sqrt(config.prior_variance) * rng.standard_normal(setup.est_model.n)
    noise = rng.standard_normal((config.n_ticks, config.n_sensors))
    truth = setup.truth_states if setup.truth_states is not None else simulate_truth(setup, config, rng)
    Ct, Dt = interp_matrices(setup.truth_mesh, sensors)
    c = (Ct @ truth.T).T + Dt @ setup.gamma_truth
    z = c + math.sqrt(config.noise_true) * noise
    return RunData(sensors, tau, x0, truth, c, (z >= tau).astype(np.int8))


def _field_errors(setup, truth_state, est_state):
    g = setup.grid
    true_vals = g.truth_C @ truth_state + g.truth_D @ setup.gamma_truth
    est_vals = g.est_C @ est_state + g.est_D @ setup.gamma_est
    return float(np.linalg.norm(est_vals - true_vals))


def make_filter(name, config: ExperimentConfig, setup: Setup, data: RunData, xi=None, settings=None):
    C, D = interp_matrices(setup.est_mesh, data.sensors)
    offsets = D @ setup.gamma_est
    n = setup.est_model.n
    if name == "standard":
        system = setup.est_model.linear_system(data.prior_mean, config.prior_information,
                                               config.process_information)
        bank = ThresholdSensorBank(C.toarray(), data.thresholds - offsets, Gaussian(max(config.noise_true, 1e-300)),
                                   Gaussian(config.noise_assumed))
        return MHMapFilter(system, bank, config.horizon, config.arrival_weight * np.eye(n), settings)
    local_model = LocalModel(config.taylor_order, config.est_dt, config.local_process_information,
                             config.local_arrival_weight)
    prior = local_model.initial_state(C @ data.prior_mean + offsets)
    local = LocalFilterBank(local_model, data.thresholds, Gaussian(config.noise_assumed), prior, config.horizon,
                            settings)
    return FastMHMapFilter(local, setup.A, setup.B, setup.u, C.toarray(), offsets, data.prior_mean,
                           config.prior_information, config.arrival_weight, config.process_information,
                           config.xi if xi is None else xi)


def run_filter(name, config: ExperimentConfig, setup: Setup, data: RunData, xi=None) -> RunMetrics:
    filt = make_filter(name, config, setup, data, xi)
    N = config.horizon
    steps, errs, opt, tot, pseudo = [], [], [], [], []
    for k in range(config.n_ticks):
        t0 = time.perf_counter()
        y = data.bits[k]
        if name == "standard":
            sol = filt.advance(y, setup.u)
            t_opt = sol.stats.wall_time
        else:
            sol = filt.advance(y)
            t_opt = filt.timing["step1"] + filt.timing["step2"]
            pseudo.append(filt.pseudo.values[-1] - data.truth_sensor[k])
        if k >= N:
            errs.append(_field_errors(setup, data.truth[k - N], sol.first))
            steps.append(k)
        t1 = time.perf_counter()
        if k >= N:
            opt.append(t_opt)
            tot.append(t1 - t0)
    return RunMetrics(name, np.array(steps), np.array(errs), np.array(opt), np.array(tot),
                      np.array(pseudo) if pseudo else None)


def run_scenario(config: ExperimentConfig, run: int = 0, filters: Sequence[str] | None = None,
                 xi=None) -> dict:
    """One Monte Carlo realisation; ``{filter name: RunMetrics}``."""
    setup = build_setup(config)
    data = draw_run(config, setup, run)
    return {name: run_filter(name, config, setup, data, xi) for name in (filters or config.filters)}


# --------------------------------------------------------------------------
# Monte Carlo


@dataclass
class MonteCarloResult:
    config: ExperimentConfig
    runs: dict                   # filter -> list of RunMetrics, run order

    def errors(self, name) -> np.ndarray:
        return np.array([r.error_norms for r in self.runs[name]])

    def steps(self, name) -> np.ndarray:
        return self.runs[name][0].steps

    def rmse(self, name) -> np.ndarray:
        return rmse(self.errors(name))

    def std(self, name) -> np.ndarray:
        return np.std(self.errors(name), axis=0)

    def average_rmse(self, name) -> float:
        return float(np.mean(self.rmse(name)))


def _run_batch(args):
    config, runs, filters, xi = args
    return [run_scenario(config, r, filters, xi) for r in runs]


def monte_carlo(config: ExperimentConfig, runs: int | None = None, filters=None, xi=None,
                workers: int | None = None) -> MonteCarloResult:
    """Independent runs with per-run seeds; results are ordered by run index
    so any worker count gives the same numbers."""
    runs = config.runs if runs is None else runs
    if runs < 1:
        raise EmptyInput("need at least one run")
    filters = tuple(filters or config.filters)
    if xi is None and config.calibrate and "fast" in filters:
        xi = calibrate_weights(config)
    workers = config.workers if workers is None else workers
    if workers <= 1:
        results = _run_batch((config, range(runs), filters, xi))
    else:
        chunks = [list(range(runs))[i::workers] for i in range(workers)]
        with ProcessPoolExecutor(max_workers=workers) as pool:
            parts = list(pool.map(_run_batch, [(config, c, filters, xi) for c in chunks]))
        results = [None] * runs
        for chunk, part in zip(chunks, parts):
            for r, res in zip(chunk, part):
                results[r] = res
    return MonteCarloResult(config, {f: [res[f] for res in results] for f in filters})


@lru_cache(maxsize=64)
def calibrate_weights(config: ExperimentConfig, runs: int = 5) -> float:
    """Pooled inverse variance of step-1 errors over pilot runs (seeds disjoint from the study)."""
    pilot = config.replace(seed=config.seed + 1_000_003, calibrate=False, workers=1)
    errs = []
    setup = build_setup(pilot)
    for r in range(runs):
        m = run_filter("fast", pilot, setup, draw_run(pilot, setup, r))
        errs.append(m.pseudo_errors.ravel())
    return float(weights_from_errors(np.concatenate(errs))[0])


def rmse(errors) -> np.ndarray:
    """RMSE(k) over runs from error norms shaped (L, K)."""
    E = np.asarray(errors, dtype=float)
    if E.size == 0:
        raise EmptyInput("no runs")
    if E.ndim == 1:
        E = E[None, :]
    return np.sqrt(np.mean(E * E, axis=0))


def nrmse(rmse_variant, rmse_reference) -> np.ndarray:
    """Ratio of RMSE curves on their common (final) steps."""
    a = np.asarray(rmse_variant, dtype=float)
    b = np.asarray(rmse_reference, dtype=float)
    if a.size == 0 or b.size == 0:
        raise EmptyInput("empty RMSE curve")
    m = min(a.size, b.size)
    return a[-m:] / b[-m:]


# --------------------------------------------------------------------------
# sweeps and timing


@dataclass
class SweepRow:
    axis: str
    value: float
    filter: str
    average_rmse: float
    std: float
    nrmse: float = math.nan


def sweep(config: ExperimentConfig, axis: str, values=None, runs=None, filters=None) -> list:
    """One Monte Carlo batch per grid value, all with the same run seeds."""
    if axis not in SWEEP_GRIDS:
        raise ConfigError(f"unknown sweep axis {axis!r}", "axis")
    values = SWEEP_GRIDS[axis] if values is None else values
    filters = tuple(filters or config.filters)
    key = {"window": "horizon", "noise": "noise_true", "sensors": "n_sensors"}[axis]
    results = []
    for v in values:
        cfg = config.replace(**{key: type(getattr(config, key))(v)})
        results.append(monte_carlo(cfg, runs, filters))
    rows = []
    for name in filters:
        ref = None
        if axis == "window":
            ref_idx = int(np.argmax(values))
            ref = results[ref_idx].rmse(name)
        for v, res in zip(values, results):
            r = res.rmse(name)
            per_run = np.mean(res.errors(name), axis=1)
            rows.append(SweepRow(axis, float(v), name, float(np.mean(r)), float(np.std(per_run)),
                                 float(np.mean(nrmse(r, ref))) if ref is not None else math.nan))
    return rows


@dataclass
class BenchRow:
    filter: str
    optimization_s: float
    total_s: float
    per_step_optimization_s: float
    per_step_total_s: float

    @property
    def fraction(self) -> float:
        return self.optimization_s / self.total_s if self.total_s > 0 else math.nan


def bench(config: ExperimentConfig, runs: int = 5) -> list:
    """Median per-run wall-clock times of both filters on the same data."""
    runs = max(int(runs), 5)
    setup = build_setup(config)
    rows = []
    per = {name: [] for name in FILTERS}
    for r in range(runs):
        data = draw_run(config, setup, r)
        for name in FILTERS:
            per[name].append(run_filter(name, config, setup, data))
    for name in FILTERS:
        opt = float(np.median([m.opt_time for m in per[name]]))
        tot = float(np.median([m.total_time for m in per[name]]))
        steps = per[name][0].steps.size
        rows.append(BenchRow(name, opt, tot, opt / steps, tot / steps))
    return rows


# --------------------------------------------------------------------------
# output files


def write_rmse_csv(path, result: MonteCarloResult, name: str) -> None:
    steps = result.steps(name)
    r, s = result.rmse(name), result.std(name)
    dt = result.config.est_dt
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("step,time_s,rmse,std\n")
        for k, a, b in zip(steps, r, s):
            fh.write(f"{int(k)},{(k + 1) * dt:.6g},{a:.12e},{b:.12e}\n")


def write_sweep_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("axis,value,filter,average_rmse,std,nrmse\n")
        for r in rows:
            fh.write(f"{r.axis},{r.value!r},{r.filter},{r.average_rmse:.12e},{r.std:.12e},{r.nrmse:.12e}\n")


def write_bench_csv(path, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write("filter,optimization_s,total_s,per_step_optimization_s,per_step_total_s,optimization_fraction\n")
        for r in rows:
            fh.write(f"{r.filter},{r.optimization_s:.6e},{r.total_s:.6e},{r.per_step_optimization_s:.6e},"
                     f"{r.per_step_total_s:.6e},{r.fraction:.4f}\n")


def write_manifest(path, config: ExperimentConfig, command: str, extra: dict | None = None) -> None:
    lines = [f"command = {command}", "# resolved configuration", config.to_text().rstrip("\n"),
             "# assumptions",
             f"standard_arrival_weight = {config.arrival_weight!r} * I  (reuses the step-1 arrival magnitude)",
             f"standard_process_information = {config.process_information!r} * I",
             "run_seed = numpy default_rng([seed, run_index])"]
    for k, v in (extra or {}).items():
        lines.append(f"{k} = {v}")
    Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")
