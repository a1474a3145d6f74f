"""Two-stage fast MH-MAP field filter.

Step 1 runs one small MH-MAP problem per sensor on a local Taylor model of
the concentration at that sensor and turns the bits into real-valued
concentration estimates.  Step 2 fuses those pseudo-measurements over the
finite-element model with a quadratic moving-horizon cost whose minimiser is
a single block-tridiagonal linear solve.

The per-sensor problems are solved together by a batched Newton iteration.
Every sensor keeps its own step size and stopping test and all arithmetic is
per sensor, so a batch returns bit-for-bit what solving each sensor alone
returns.
"""

from __future__ import annotations

import dataclasses
import math
import time
from concurrent.futures import Executor
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import LinAlgError, solveh_banded

from .blocktri import BlockTridiagCholesky, to_dense
from .errors import DimensionError, InfeasibleStart
from .mhe import SolverSettings, SolverStats, WindowProblem, WindowSolution, interior_point
from .model import LinearSystem, ThresholdSensorBank
from .noise import NoiseModel

_EPS = np.finfo(float).eps


def _mat(value, d):
    value = np.asarray(value, dtype=float)
    return value * np.eye(d) if value.ndim == 0 else value.reshape(d, d)


@dataclass(frozen=True, eq=False)
class LocalModel:
    """Truncated-Taylor model of the concentration at one sensor.

    ``order = 0`` is the nearly-constant model (transition 1), ``order = 1``
    the nearly-constant-derivative model ``[[1, dt], [0, 1]]``.
    """

    order: int = 0
    dt: float = 10.0
    process_information: object = 1e2
    arrival_weight: object = 1e3

    def __post_init__(self):
        if self.order not in (0, 1):
            raise ValueError("only Taylor orders 0 and 1 are supported")
        d = self.order + 1
        object.__setattr__(self, "process_information", _mat(self.process_information, d))
        object.__setattr__(self, "arrival_weight", _mat(self.arrival_weight, d))

    @property
    def dim(self) -> int:
        return self.order + 1

    @property
    def transition(self) -> np.ndarray:
        if self.order == 0:
            return np.ones((1, 1))
        return np.array([[1.0, self.dt], [0.0, 1.0]])

    @property
    def output(self) -> np.ndarray:
        C = np.zeros((1, self.dim))
        C[0, 0] = 1.0
        return C

    def system(self, prior_mean=None, prior_information=None) -> LinearSystem:
        """The local model as a generic :class:`LinearSystem`."""
        d = self.dim
        x0 = np.zeros(d) if prior_mean is None else prior_mean
        P = self.arrival_weight if prior_information is None else prior_information
        return LinearSystem(self.transition, np.zeros((d, 1)), x0, P, self.process_information)

    def initial_state(self, concentration):
        """Local prior: the given concentration with zero derivatives, (l, d)."""
        c = np.atleast_1d(np.asarray(concentration, dtype=float))
        out = np.zeros((c.size, self.dim))
        out[:, 0] = c
        return out


@dataclass
class LocalBatchSolution:
    estimates: np.ndarray        # (l, T, d)
    costs: np.ndarray            # (l,)
    iterations: np.ndarray       # (l,)
    gradient_norms: np.ndarray   # (l,)
    backtracks: np.ndarray       # (l,)
    converged: np.ndarray        # (l,)
    wall_time: float = 0.0
    start: int = 0
    structure: object = field(default=None, repr=False)   # reusable Newton structure

    @property
    def size(self) -> int:
        return self.estimates.shape[0]

    def window(self, i: int) -> WindowSolution:
        stats = SolverStats(int(self.iterations[i]), float(self.gradient_norms[i]), int(self.backtracks[i]),
                            self.wall_time, bool(self.converged[i]))
        return WindowSolution(self.estimates[i], float(self.costs[i]), stats, self.start)


def _concat(parts, start):
    return LocalBatchSolution(*(np.concatenate([getattr(p, f) for p in parts]) for f in
                                ("estimates", "costs", "iterations", "gradient_norms", "backtracks", "converged")),
                              wall_time=sum(p.wall_time for p in parts), start=start)


class _ChainStructure:
    """Data-independent part of the local Newton systems for one window length."""

    def __init__(self, model: LocalModel, T: int, Psi, l: int):
        A, G = model.transition, model.process_information
        d = model.dim
        base = np.empty((T, d, d))
        base[:] = 2.0 * G
        base[0] = 2.0 * Psi
        if T > 1:
            base[:-1] += 2.0 * A.T @ G @ A
        self.T, self.l, self.Psi = T, l, Psi
        self.H0 = to_dense(base, np.broadcast_to(-2.0 * G @ A, (max(T - 1, 0), d, d)))
        self.zidx = np.arange(T) * d
        # upper banded storage of one chain, ab[u + i - j, j] = H0[i, j]
        u = 2 * d - 1
        band = np.zeros((u + 1, T * d))
        for k in range(u + 1):
            band[u - k, k:] = np.diagonal(self.H0, k)
        self.band0, self.u = band, u
        self.tiled = np.tile(band, (1, l))
        self.zall = (np.arange(l)[:, None] * (T * d) + self.zidx).ravel()


class _LocalBatch:
    """Vectorised cost, gradient and Newton step for l independent local windows."""

    def __init__(self, model: LocalModel, predictions, measurements, thresholds, noise, weight=None, bank=None,
                 structure=None):
        self.model = model
        self.pred = np.asarray(predictions, dtype=float).reshape(-1, model.dim)
        l = self.pred.shape[0]
        Y = np.asarray(measurements).reshape(-1, l)
        self.T = Y.shape[0]
        self.Y = np.ascontiguousarray(Y.T.astype(np.int8))                  # (l, T)
        self.tau = np.asarray(thresholds, dtype=float).reshape(l)
        self.bank = bank if bank is not None else _local_bank(self.tau, noise)
        groups = self.bank._groups
        self._single = groups[0][0] if len(groups) == 1 else None
        Psi = model.arrival_weight if weight is None else _mat(weight, model.dim)
        if (structure is None or structure.l != l or structure.T != self.T
                or not np.array_equal(structure.Psi, Psi)):
            structure = _ChainStructure(model, self.T, Psi, l)
        self.structure = structure
        self.Psi, self.A, self.G = structure.Psi, model.transition, model.process_information
        self.H0, self.band0, self.u = structure.H0, structure.band0, structure.u
        self.zidx, self.zall = structure.zidx, structure.zall
        self.bounded = self.bank.bounded
        if self.bounded:
            lo, hi = self.bank.limits(self.Y.T)
            self.lo, self.hi = np.ascontiguousarray(lo.T), np.ascontiguousarray(hi.T)

    def z(self, X):
        return self.tau[:, None] - X[:, :, 0]

    def feasible(self, X):
        if not self.bounded:
            return np.ones(X.shape[0], dtype=bool)
        Z = self.z(X)
        return np.all((Z > self.lo) & (Z < self.hi), axis=1)

    def _terms(self, Z, derivatives):
        if self._single is not None:
            return self._single.terms(Z, self.Y, derivatives)
        # the bank groups sensors along the last axis
        out = self.bank.terms(np.ascontiguousarray(Z.T), self.Y.T, derivatives)
        if derivatives:
            return tuple(np.ascontiguousarray(a.T) for a in out)
        return np.ascontiguousarray(out.T)

    def _quadratic(self, X):
        e0 = X[:, 0] - self.pred
        R = X[:, 1:] - X[:, :-1] @ self.A.T
        GR = R @ self.G
        quad = np.sum((e0 @ self.Psi) * e0, axis=1) + np.sum((GR * R).reshape(X.shape[0], -1), axis=1)
        return quad, e0, GR

    def cost(self, X, mask=None, fallback=None):
        """Per-sensor cost; entries outside ``mask`` or infeasible are inf.

        Rejected sensors are evaluated at ``fallback`` (a feasible point) so
        that bounded-noise terms never see an out-of-support argument.
        """
        ok = self.feasible(X)
        if mask is not None:
            ok &= mask
        if fallback is not None and not ok.all():
            X = np.where(ok[:, None, None], X, fallback)
        quad = self._quadratic(X)[0]
        out = quad + np.sum(self._terms(self.z(X), False), axis=1)
        out[~ok] = np.inf
        return out

    def derivatives(self, X):
        quad, e0, GR = self._quadratic(X)
        val, d1, d2 = self._terms(self.z(X), True)
        g = np.zeros_like(X)
        g[:, 0] += 2.0 * e0 @ self.Psi
        g[:, 1:] += 2.0 * GR
        g[:, :-1] -= 2.0 * GR @ self.A
        g[:, :, 0] -= d1
        return quad + np.sum(val, axis=1), g, d2

    def hessians(self, d2):
        H = np.repeat(self.H0[None], d2.shape[0], axis=0)
        H[:, self.zidx, self.zidx] += d2
        return H

    def newton_direction(self, g, d2):
        """Newton steps of every sensor from one banded Cholesky solve.

        The chains do not couple, so the factor entries between sensors are
        exact zeros and each sensor's step is bitwise what it would be alone.
        """
        l, T, d = g.shape
        ab = self.structure.tiled.copy()
        ab[self.u, self.zall] += d2.ravel()
        if ab.shape[1] == 1:            # one scalar unknown; scipy's tridiagonal path rejects it
            return (-g.ravel() / ab[self.u]).reshape(l, T, d)
        try:
            x = solveh_banded(ab, -g.ravel(), check_finite=False)
        except LinAlgError:
            x = np.linalg.solve(self.hessians(d2), -g.reshape(l, T * d, 1))
        return x.reshape(l, T, d)

    def step_limit(self, X, D, frac):
        l = X.shape[0]
        if not self.bounded:
            return np.ones(l)
        Z = self.z(X)
        dZ = -D[:, :, 0]
        with np.errstate(divide="ignore", invalid="ignore"):
            a_lo = np.where(np.isfinite(self.lo) & (dZ < 0), (Z - self.lo) / -dZ, np.inf)
            a_hi = np.where(np.isfinite(self.hi) & (dZ > 0), (self.hi - Z) / dZ, np.inf)
        return np.minimum(1.0, frac * np.minimum(a_lo.min(axis=1), a_hi.min(axis=1)))


def _local_bank(tau, noise):
    return ThresholdSensorBank(np.zeros((np.size(tau), 1)), tau, noise)


def solve_local_batch(model: LocalModel, predictions, measurements, thresholds, noise,
                      warm_start=None, settings: SolverSettings | None = None, weight=None,
                      bank: ThresholdSensorBank | None = None, structure=None) -> LocalBatchSolution:
    """Minimise every sensor's local window cost.

    ``measurements`` is (T, l): one bit per sensor per window step.
    ``predictions`` (l, d) are the arrival-cost centres, weighted by
    ``weight`` (defaults to the model's arrival weight).  ``bank`` may carry
    a prebuilt sensor bank for ``thresholds``/``noise``.
    """
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    batch = _LocalBatch(model, predictions, measurements, thresholds, noise, weight, bank, structure)
    l, T, d = batch.pred.shape[0], batch.T, model.dim
    if warm_start is None:
        X = np.repeat(batch.pred[:, None, :], T, axis=1)
        for t in range(1, T):
            X[:, t] = X[:, t - 1] @ batch.A.T
    else:
        X = np.array(warm_start, dtype=float).reshape(l, T, d)
    bad = ~batch.feasible(X)
    for i in np.flatnonzero(bad):
        X[i] = _local_interior(batch, i, X[i])

    iters = np.zeros(l, dtype=np.int64)
    backs = np.zeros(l, dtype=np.int64)
    stalled = np.zeros(l, dtype=bool)
    cost, g, d2 = batch.derivatives(X)
    while True:
        gnorm = np.sqrt(np.sum((g * g).reshape(l, -1), axis=1))
        converged = gnorm <= settings.gradient_tolerance
        active = ~converged & ~stalled & (iters < settings.max_iterations)
        if not active.any():
            break
        iters[active] += 1
        D = batch.newton_direction(g, d2)
        D[~active] = 0.0
        slope = np.sum((g * D).reshape(l, -1), axis=1)
        fix = active & ~(slope < 0.0)
        D[fix] = -g[fix]
        slope[fix] = -gnorm[fix] ** 2
        alpha = batch.step_limit(X, D, settings.fraction_to_boundary)
        slack = 8.0 * _EPS * (1.0 + np.abs(cost))
        searching = active.copy()
        X_new, cost_new, g_new, d2_new = X.copy(), cost.copy(), g.copy(), d2.copy()
        while searching.any():
            Xn = X + alpha[:, None, None] * D
            ok = searching & batch.feasible(Xn)
            Xn = np.where(ok[:, None, None], Xn, X)
            # derivatives come along with the value: the first trial is usually accepted
            fn, gn, d2n = batch.derivatives(Xn)
            ok &= fn <= cost + settings.armijo * alpha * slope + slack
            X_new[ok], cost_new[ok], g_new[ok], d2_new[ok] = Xn[ok], fn[ok], gn[ok], d2n[ok]
            searching &= ~ok
            alpha = np.where(searching, alpha * settings.backtrack, alpha)
            backs += searching
            dead = searching & (alpha <= 1e-14)
            stalled |= dead
            searching &= ~dead
        X, cost, g, d2 = X_new, cost_new, g_new, d2_new
    out = LocalBatchSolution(X, cost, iters, gnorm, backs, converged, time.perf_counter() - t0)
    out.structure = batch.structure
    return out


def _local_interior(batch: _LocalBatch, i, X):
    model = batch.model
    system = model.system(batch.pred[i], batch.Psi)
    bank = ThresholdSensorBank(model.output, batch.tau[i:i + 1], batch.bank.assumed_noise[i])
    problem = WindowProblem(system, bank, batch.pred[i], batch.Psi, batch.Y[i][:, None])
    try:
        return interior_point(problem, X)
    except InfeasibleStart:
        raise InfeasibleStart(f"local window of sensor {i} has an empty feasible set") from None


# --------------------------------------------------------------------------
# step 1 state


class LocalFilterBank:
    """The ``l`` independent step-1 filters, advanced together."""

    def __init__(self, model: LocalModel, thresholds, noise, prior, horizon: int,
                 settings: SolverSettings | None = None):
        self.model = model
        self.thresholds = np.asarray(thresholds, dtype=float).reshape(-1)
        l = self.thresholds.size
        self.noise = tuple(noise) if not isinstance(noise, NoiseModel) else (noise,) * l
        self.prior = np.asarray(prior, dtype=float).reshape(l, model.dim)
        self.horizon = int(horizon)
        self.settings = settings or SolverSettings()
        self.bank = _local_bank(self.thresholds, self.noise)
        self._structures: dict = {}
        self.k = -1
        self._y: list = []
        self.solution: LocalBatchSolution | None = None

    @property
    def size(self) -> int:
        return self.thresholds.size

    def advance(self, y, executor: Executor | None = None) -> LocalBatchSolution:
        y = np.asarray(y).reshape(self.size)
        self._y.append(y)
        self.k += 1
        k, N = self.k, self.horizon
        start = max(0, k - N)
        self._y = self._y[-(k - start + 1):]
        prev = self.solution
        if k < N or prev is None:
            pred = self.prior
        elif start - prev.start < prev.estimates.shape[1]:
            pred = prev.estimates[:, start - prev.start]
        else:
            pred = prev.estimates[:, -1] @ self.model.transition.T
        warm = None
        if prev is not None:
            kept = prev.estimates[:, start - prev.start:]
            nxt = kept[:, -1:] @ self.model.transition.T if kept.shape[1] else None
            if nxt is not None and kept.shape[1] + 1 == k - start + 1:
                warm = np.concatenate([kept, nxt], axis=1)
        Y = np.array(self._y)
        if executor is None:
            sol = solve_local_batch(self.model, pred, Y, self.thresholds, self.noise, warm, self.settings,
                                    bank=self.bank, structure=self._structures.get(Y.shape[0]))
        else:
            futures = [executor.submit(solve_local_batch, self.model, pred[i:i + 1], Y[:, i:i + 1],
                                       self.thresholds[i:i + 1], self.noise[i],
                                       None if warm is None else warm[i:i + 1], self.settings)
                       for i in range(self.size)]
            sol = _concat([f.result() for f in futures], start)
        sol.start = start
        self.solution = sol
        if sol.structure is not None:
            self._structures[Y.shape[0]] = sol.structure
        return sol


def solve_local(i: int, bank: LocalFilterBank, y_window, prediction=None, warm_start=None) -> WindowSolution:
    """Solve sensor ``i``'s local window on its own (``y_window`` has one bit per step)."""
    pred = bank.prior[i] if prediction is None else prediction
    sol = solve_local_batch(bank.model, np.reshape(pred, (1, -1)), np.reshape(y_window, (-1, 1)),
                            bank.thresholds[i:i + 1], bank.noise[i],
                            None if warm_start is None else np.reshape(warm_start, (1, -1, bank.model.dim)),
                            bank.settings)
    return sol.window(0)


@dataclass
class PseudoMeasurementSet:
    values: np.ndarray    # (T, l) concentration estimates, oldest first
    weights: np.ndarray   # (l,)
    start: int = 0


def extract_pseudo(local: LocalBatchSolution, weights=None) -> PseudoMeasurementSet:
    """Concentration component of every local estimate."""
    vals = np.ascontiguousarray(local.estimates[:, :, 0].T)
    l = vals.shape[1]
    w = np.ones(l) if weights is None else np.broadcast_to(np.asarray(weights, dtype=float), (l,)).copy()
    return PseudoMeasurementSet(vals, w, local.start)


def weights_from_errors(errors, lower: float = 1e-3, upper: float = 1e6) -> np.ndarray:
    """Inverse empirical variance per sensor of pseudo-measurement errors (samples, l)."""
    errors = np.asarray(errors, dtype=float)
    if errors.ndim == 1:
        errors = errors[:, None]
    var = np.var(errors, axis=0)
    with np.errstate(divide="ignore"):
        w = np.where(var > 0, 1.0 / var, upper)
    return np.clip(w, lower, upper)


# --------------------------------------------------------------------------
# step 2


@dataclass
class FieldFusionProblem:
    """Quadratic window cost over the field.

        |x_0 - xbar|^2_Psi + sum |x_{t+1} - A x_t - B u|^2_G
        + sum_t sum_i Xi_i (sigma_ti - C_i x_t - offset_i)^2
    """

    A: np.ndarray
    B: np.ndarray
    u: np.ndarray
    C: np.ndarray              # (l, n)
    offsets: np.ndarray        # (l,) the D_i gamma terms
    arrival_weight: np.ndarray
    process_information: np.ndarray
    prediction: np.ndarray
    pseudo: PseudoMeasurementSet

    @property
    def T(self) -> int:
        return self.pseudo.values.shape[0]

    def drift(self):
        return self.B @ self.u

    def normal_blocks(self):
        A, G, C = self.A, self.process_information, self.C
        T, n = self.T, A.shape[0]
        diag = np.empty((T, n, n))
        diag[:] = 2.0 * G + 2.0 * (C.T * self.pseudo.weights) @ C
        diag[0] += 2.0 * self.arrival_weight - 2.0 * G
        if T > 1:
            diag[:-1] += 2.0 * A.T @ G @ A
        lower = np.broadcast_to(-2.0 * G @ A, (T - 1, n, n)).copy()
        return diag, lower

    def rhs(self):
        A, G, C = self.A, self.process_information, self.C
        c = self.drift()
        b = 2.0 * ((self.pseudo.values - self.offsets) * self.pseudo.weights) @ C
        b[0] += 2.0 * self.arrival_weight @ self.prediction
        if self.T > 1:
            b[1:] += 2.0 * G @ c
            b[:-1] -= 2.0 * A.T @ (G @ c)
        return b

    def cost(self, X):
        X = np.asarray(X, dtype=float).reshape(self.T, -1)
        e0 = X[0] - self.prediction
        R = X[1:] - X[:-1] @ self.A.T - self.drift()
        E = self.pseudo.values - X @ self.C.T - self.offsets
        return float(e0 @ self.arrival_weight @ e0 + np.sum((R @ self.process_information) * R)
                     + np.sum(E * E * self.pseudo.weights))

    def gradient(self, X):
        X = np.asarray(X, dtype=float).reshape(self.T, -1)
        e0 = X[0] - self.prediction
        GR = (X[1:] - X[:-1] @ self.A.T - self.drift()) @ self.process_information
        E = self.pseudo.values - X @ self.C.T - self.offsets
        g = -2.0 * (E * self.pseudo.weights) @ self.C
        g[0] += 2.0 * self.arrival_weight @ e0
        g[1:] += 2.0 * GR
        g[:-1] -= 2.0 * GR @ self.A
        return g


def solve_fusion(problem: FieldFusionProblem, factor: BlockTridiagCholesky | None = None,
                 check: bool = True) -> WindowSolution:
    """Exact minimiser of the fusion cost (one SPD block-tridiagonal solve).

    ``check`` also records the gradient norm at the solution.
    """
    t0 = time.perf_counter()
    if factor is None:
        factor = BlockTridiagCholesky(*problem.normal_blocks())
    X = factor.solve(problem.rhs())
    stats = SolverStats(iterations=0, converged=True, wall_time=time.perf_counter() - t0)
    if check:
        stats.final_gradient_norm = float(np.linalg.norm(problem.gradient(X)))
    return WindowSolution(X, problem.cost(X), stats, problem.pseudo.start)


class FusionOperator:
    """Window minimiser as an affine map of the arrival centre and pseudo-measurements.

    The normal matrix of a fusion window depends only on its length and the
    weights, so ``X = F [xbar; sigma] + x_c`` with ``F`` computed once by
    solving against every input direction.
    """

    def __init__(self, problem: FieldFusionProblem):
        T, n = problem.T, problem.A.shape[0]
        l = problem.C.shape[0]
        factor = BlockTridiagCholesky(*problem.normal_blocks())
        E = np.zeros((T, n, n + T * l))
        E[0, :, :n] = 2.0 * problem.arrival_weight
        CtXi = 2.0 * problem.C.T * problem.pseudo.weights
        for t in range(T):
            E[t, :, n + t * l:n + (t + 1) * l] = CtXi
        self.F = factor.solve(E).reshape(T * n, -1)
        zero = dataclasses.replace(problem, prediction=np.zeros(n),
                                   pseudo=PseudoMeasurementSet(np.zeros((T, l)), problem.pseudo.weights))
        self.offset = factor.solve(zero.rhs()).ravel()
        self.T, self.n = T, n

    def inputs(self, prediction, values) -> np.ndarray:
        return np.concatenate([np.asarray(prediction, float).ravel(), np.asarray(values, float).ravel()])

    def state(self, v, t: int) -> np.ndarray:
        """Window state ``t`` only."""
        rows = slice(t * self.n, (t + 1) * self.n)
        return self.F[rows] @ v + self.offset[rows]

    def apply(self, prediction, values) -> np.ndarray:
        v = self.inputs(prediction, values)
        return (self.F @ v + self.offset).reshape(self.T, self.n)


class FusedWindow:
    """Fusion result whose states are evaluated on demand.

    The recursion needs only the oldest state and its successor, so the
    whole window is formed only when :attr:`estimates` is read.
    """

    def __init__(self, operator: FusionOperator, v, start: int):
        self._op, self._v = operator, v
        self._rows: dict = {}
        self._X = None
        self.start = start
        self.cost_value = math.nan
        self.stats = SolverStats(converged=True)

    def state(self, t: int) -> np.ndarray:
        t = range(self._op.T)[t]
        if self._X is not None:
            return self._X[t]
        if t not in self._rows:
            self._rows[t] = self._op.state(self._v, t)
        return self._rows[t]

    @property
    def estimates(self) -> np.ndarray:
        if self._X is None:
            self._X = (self._op.F @ self._v + self._op.offset).reshape(self._op.T, self._op.n)
        return self._X

    @property
    def first(self):
        return self.state(0)

    @property
    def last(self):
        return self.state(-1)

    def __len__(self):
        return self._op.T


class FastMHMapFilter:
    """Step 1 for every sensor, then the field fusion, once per time step.

    The fusion normal matrix depends only on the window length and weights,
    so the window minimiser is cached as an affine map and each step costs a
    single matrix-vector product.  The fused solution skips the cost value
    (``nan``); ``self.problem.cost`` evaluates it on demand.
    """

    def __init__(self, local: LocalFilterBank, A, B, u, C, offsets, prior_mean, prior_information,
                 arrival_weight, process_information, weights=None):
        self.local = local
        n = np.asarray(A).shape[0]
        self.A, self.B = np.asarray(A, float), np.asarray(B, float)
        self.u = np.asarray(u, float).reshape(-1)
        self.C = np.asarray(C, float).reshape(local.size, n)
        self.offsets = np.broadcast_to(np.asarray(offsets, float), (local.size,)).copy()
        self.prior_mean = np.broadcast_to(np.asarray(prior_mean, float), (n,)).copy()
        self.prior_information = _mat(prior_information, n)
        self.arrival_weight = _mat(arrival_weight, n)
        self.process_information = _mat(process_information, n)
        self.weights = np.ones(local.size) if weights is None else np.broadcast_to(
            np.asarray(weights, float), (local.size,)).copy()
        if np.any(self.weights < 0):
            raise DimensionError("fusion weights must be non-negative")
        self.horizon = local.horizon
        self.solution: FusedWindow | None = None
        self.timing = {"step1": 0.0, "step2": 0.0}
        # offline: one operator per startup window length plus the steady one
        t0 = time.perf_counter()
        self._operators = {("prior", T): FusionOperator(self._template(T, self.prior_information))
                           for T in range(1, self.horizon + 2)}
        self._operators[("arrival", self.horizon + 1)] = FusionOperator(
            self._template(self.horizon + 1, self.arrival_weight))
        self.setup_time = time.perf_counter() - t0

    def _template(self, T, weight):
        l, n = self.C.shape
        return FieldFusionProblem(self.A, self.B, self.u, self.C, self.offsets, weight, self.process_information,
                                  np.zeros(n), PseudoMeasurementSet(np.zeros((T, l)), self.weights))

    def advance(self, y, executor: Executor | None = None) -> FusedWindow:
        t0 = time.perf_counter()
        local = self.local.advance(y, executor)
        t1 = time.perf_counter()
        pseudo = extract_pseudo(local, self.weights)
        k, N = self.local.k, self.horizon
        prev = self.solution
        if k < N or prev is None:
            pred, weight, key = self.prior_mean, self.prior_information, ("prior", pseudo.values.shape[0])
        else:
            start = pseudo.start
            if start - prev.start < len(prev):
                pred = prev.state(start - prev.start)
            else:
                pred = self.A @ prev.last + self.B @ self.u
            weight, key = self.arrival_weight, ("arrival", pseudo.values.shape[0])
        problem = FieldFusionProblem(self.A, self.B, self.u, self.C, self.offsets, weight,
                                     self.process_information, pred, pseudo)
        op = self._operators[key]
        sol = FusedWindow(op, op.inputs(pred, pseudo.values), pseudo.start)
        # the reported estimate and the next arrival centre
        for t in range(min(2, len(sol))):
            sol.state(t)
        t2 = time.perf_counter()
        self.timing = {"step1": t1 - t0, "step2": t2 - t1}
        self.solution = sol
        self.pseudo = pseudo
        self.problem = problem
        return sol
