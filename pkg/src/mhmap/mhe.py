"""Moving-horizon MAP estimation from threshold measurements.

For a window of ``T = N + 1`` states the cost is

    J(X) = |x_0 - xbar|^2_Psi
           + sum_t |x_{t+1} - A x_t - B u_t|^2_G
           + sum_t sum_i l_i(y_ti, tau_i - C_i x_t)

with ``l = -ln F`` for ``y = 0`` and ``l = -ln(1 - F)`` for ``y = 1``.  For
log-concave noise the cost is convex on the open polyhedron where every
logarithm is finite, and it is minimised here by damped Newton steps whose
block-tridiagonal Hessian is factored in O(T n^3).
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linprog

from .blocktri import BlockTridiagCholesky, to_dense
from .errors import DimensionError, DomainError, InfeasibleStart, SingularSystem
from .model import LinearSystem, ThresholdSensorBank

_EPS = np.finfo(float).eps


@dataclass
class SolverSettings:
    gradient_tolerance: float = 1e-8
    max_iterations: int = 100
    armijo: float = 1e-4
    backtrack: float = 0.5
    fraction_to_boundary: float = 0.99
    regularization: float = 1e-10

    def __post_init__(self):
        if not 0.0 < self.backtrack < 1.0:
            raise ValueError("backtrack must lie in (0, 1)")
        for name in ("gradient_tolerance", "max_iterations", "armijo", "fraction_to_boundary", "regularization"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive")


@dataclass
class SolverStats:
    iterations: int = 0
    final_gradient_norm: float = math.inf
    line_search_backtracks: int = 0
    wall_time: float = 0.0
    converged: bool = False
    cost_history: list = field(default_factory=list)


@dataclass
class WindowSolution:
    estimates: np.ndarray          # (N+1, n), oldest state first
    cost_value: float
    stats: SolverStats
    start: int = 0                 # time index of estimates[0]

    @property
    def first(self):
        """Estimate of the oldest state in the window, ``x_{k-N|k}``."""
        return self.estimates[0]

    @property
    def last(self):
        return self.estimates[-1]


class WindowProblem:
    """One sliding-window instance.

    ``measurements`` holds one bit vector per state in the window (T rows),
    ``inputs`` one input per transition (T-1 rows).
    """

    def __init__(self, system: LinearSystem, bank: ThresholdSensorBank, prediction, arrival_weight,
                 measurements, inputs=None):
        self.system = system
        self.bank = bank
        n = system.n
        if bank.size and bank.n != n:
            raise DimensionError(f"sensor rows have length {bank.n}, state has {n}")
        self.prediction = np.asarray(prediction, dtype=float).reshape(-1)
        if self.prediction.shape != (n,):
            raise DimensionError("prediction has the wrong length")
        Psi = np.atleast_2d(np.asarray(arrival_weight, dtype=float))
        if Psi.shape != (n, n):
            raise DimensionError("arrival_weight must be n x n")
        self.arrival_weight = 0.5 * (Psi + Psi.T)
        Y = np.asarray(measurements)
        if Y.ndim == 1:
            Y = Y.reshape(-1, bank.size)
        if Y.shape[1] != bank.size:
            raise DimensionError(f"measurement rows must have {bank.size} bits")
        self.measurements = Y.astype(np.int8)
        T = Y.shape[0]
        if T < 1:
            raise DimensionError("window needs at least one measurement")
        if inputs is None:
            U = np.zeros((T - 1, system.m))
        else:
            U = np.asarray(inputs, dtype=float).reshape(-1, system.m)
        if U.shape[0] != T - 1:
            raise DimensionError(f"window of {T} states needs {T - 1} inputs, got {U.shape[0]}")
        self.inputs = U
        self.drift = U @ system.B.T          # B u_t, (T-1, n)
        self._lo, self._hi = bank.limits(self.measurements)

    @property
    def horizon(self) -> int:
        return self.measurements.shape[0] - 1

    @property
    def T(self) -> int:
        return self.measurements.shape[0]

    def rollout(self, x0=None):
        """Noise-free trajectory from ``x0`` (default: the prediction)."""
        X = np.empty((self.T, self.system.n))
        X[0] = self.prediction if x0 is None else x0
        A = self.system.A
        for t in range(self.T - 1):
            X[t + 1] = A @ X[t] + self.drift[t]
        return X

    def residuals(self, X):
        """Arrival error, dynamics residuals and sensor arguments ``tau - Cx``."""
        X = self._shape(X)
        e0 = X[0] - self.prediction
        R = X[1:] - X[:-1] @ self.system.A.T - self.drift
        Z = self.bank.thresholds - X @ self.bank.C.T
        return e0, R, Z

    def feasible(self, X) -> bool:
        if not self.bank.bounded:
            return True
        Z = self.bank.thresholds - self._shape(X) @ self.bank.C.T
        return bool(np.all((Z > self._lo) & (Z < self._hi)))

    def _shape(self, X):
        X = np.asarray(X, dtype=float)
        if X.shape == (self.T * self.system.n,):
            X = X.reshape(self.T, self.system.n)
        if X.shape != (self.T, self.system.n):
            raise DimensionError(f"expected trajectory of shape {(self.T, self.system.n)}, got {X.shape}")
        return X


def full_information_problem(system: LinearSystem, bank: ThresholdSensorBank, measurements, inputs=None):
    """The MAP problem over all data since time 0, as a window with ``Psi = P``."""
    return WindowProblem(system, bank, system.prior_mean, system.prior_information, measurements, inputs)


# --------------------------------------------------------------------------
# cost and derivatives


def _evaluate(problem: WindowProblem, X, order: int):
    e0, R, Z = problem.residuals(X)
    if problem.bank.bounded and not np.all((Z > problem._lo) & (Z < problem._hi)):
        raise DomainError("trajectory lies outside the feasible polyhedron")
    Psi = problem.arrival_weight
    G = problem.system.process_information
    GR = R @ G
    out = problem.bank.terms(Z, problem.measurements, derivatives=order > 0)
    lik = out[0] if order > 0 else out
    cost = float(e0 @ Psi @ e0 + np.sum(GR * R) + np.sum(lik))
    if order == 0:
        return cost
    _, d1, d2 = out
    g = np.zeros_like(np.asarray(problem._shape(X)))
    g[0] += 2.0 * Psi @ e0
    g[1:] += 2.0 * GR
    g[:-1] -= 2.0 * GR @ problem.system.A
    g -= d1 @ problem.bank.C
    if order == 1:
        return cost, g
    return cost, g, d2


def mh_cost(problem: WindowProblem, X) -> float:
    return _evaluate(problem, X, 0)


def mh_gradient(problem: WindowProblem, X) -> np.ndarray:
    """Gradient with respect to the trajectory, shaped like ``X`` as (T, n)."""
    return _evaluate(problem, X, 1)[1]


def _constant_blocks(problem: WindowProblem):
    cache = getattr(problem, "_blocks", None)
    if cache is not None:
        return cache
    A = problem.system.A
    G = problem.system.process_information
    T, n = problem.T, problem.system.n
    AtGA = A.T @ G @ A
    diag = np.empty((T, n, n))
    diag[:] = 2.0 * G
    diag[0] = 2.0 * problem.arrival_weight
    if T > 1:
        diag[:-1] += 2.0 * AtGA
    lower = np.broadcast_to(-2.0 * G @ A, (T - 1, n, n)).copy()
    problem._blocks = (diag, lower)
    return problem._blocks


def hessian_blocks(problem: WindowProblem, X, d2=None):
    """Diagonal (T, n, n) and sub-diagonal (T-1, n, n) Hessian blocks."""
    if d2 is None:
        d2 = _evaluate(problem, X, 2)[2]
    diag, lower = _constant_blocks(problem)
    C = problem.bank.C
    diag = diag + (C.T[None, :, :] * d2[:, None, :]) @ C
    return diag, lower


def mh_hessian(problem: WindowProblem, X) -> np.ndarray:
    """Dense (T n x T n) Hessian; intended for small problems and checks."""
    return to_dense(*hessian_blocks(problem, X))


# --------------------------------------------------------------------------
# solver


def _step_limit(problem: WindowProblem, X, D, frac):
    """Largest step ``<= 1`` keeping every log argument strictly inside its support."""
    if not problem.bank.bounded:
        return 1.0
    Z = problem.bank.thresholds - X @ problem.bank.C.T
    dZ = -(D @ problem.bank.C.T)
    alpha = math.inf
    with np.errstate(divide="ignore", invalid="ignore"):
        lo_hit = np.isfinite(problem._lo) & (dZ < 0)
        if lo_hit.any():
            alpha = min(alpha, float(np.min((Z[lo_hit] - problem._lo[lo_hit]) / -dZ[lo_hit])))
        hi_hit = np.isfinite(problem._hi) & (dZ > 0)
        if hi_hit.any():
            alpha = min(alpha, float(np.min((problem._hi[hi_hit] - Z[hi_hit]) / dZ[hi_hit])))
    return min(1.0, frac * alpha)


def interior_point(problem: WindowProblem, X0=None, margin_cap: float = 1.0):
    """Strictly feasible trajectory near ``X0`` (maximal-slack LP, then pulled back toward ``X0``)."""
    X0 = problem.rollout() if X0 is None else problem._shape(X0)
    if problem.feasible(X0):
        return X0
    T, n = X0.shape
    C, tau = problem.bank.C, problem.bank.thresholds
    rows, rhs = [], []
    for t in range(T):
        for i in range(problem.bank.size):
            lo, hi = problem._lo[t, i], problem._hi[t, i]
            if np.isfinite(lo):       # tau - C x - lo >= s
                r = np.zeros(T * n + 1)
                r[t * n:(t + 1) * n] = C[i]
                r[-1] = 1.0
                rows.append(r)
                rhs.append(tau[i] - lo)
            if np.isfinite(hi):       # hi - tau + C x >= s
                r = np.zeros(T * n + 1)
                r[t * n:(t + 1) * n] = -C[i]
                r[-1] = 1.0
                rows.append(r)
                rhs.append(hi - tau[i])
    flat = X0.reshape(-1)
    box = 1e3 * (1.0 + np.abs(flat))
    bounds = [(v - b, v + b) for v, b in zip(flat, box)] + [(None, margin_cap)]
    c = np.zeros(T * n + 1)
    c[-1] = -1.0
    res = linprog(c, A_ub=np.array(rows), b_ub=np.array(rhs), bounds=bounds, method="highs")
    if res.status != 0 or res.x[-1] <= 0.0:
        raise InfeasibleStart("the feasible polyhedron of this window is empty")
    Xc = res.x[:-1].reshape(T, n)
    theta = 1.0
    for _ in range(60):
        cand = Xc + theta * (X0 - Xc)
        Z = tau - cand @ C.T
        slack = np.minimum(Z - problem._lo, problem._hi - Z)
        if np.all(slack >= 0.5 * res.x[-1] * (1.0 - theta) + 1e-300) and problem.feasible(cand):
            return cand
        theta *= 0.5
    return Xc


def solve_window(problem: WindowProblem, settings: SolverSettings | None = None, warm_start=None) -> WindowSolution:
    """Minimise the window cost by damped Newton with Armijo backtracking."""
    settings = settings or SolverSettings()
    t0 = time.perf_counter()
    X = problem.rollout() if warm_start is None else problem._shape(warm_start).copy()
    if not problem.feasible(X):
        X = interior_point(problem, X)
    stats = SolverStats()
    T, n = X.shape
    eye = np.eye(n)
    cost, g, d2 = _evaluate(problem, X, 2)
    stats.cost_history.append(cost)
    best = (cost, X)
    while True:
        gnorm = float(np.linalg.norm(g))
        stats.final_gradient_norm = gnorm
        if gnorm <= settings.gradient_tolerance:
            stats.converged = True
            break
        if stats.iterations >= settings.max_iterations:
            break
        stats.iterations += 1
        diag, lower = hessian_blocks(problem, X, d2)
        shift = settings.regularization
        while True:
            try:
                factor = BlockTridiagCholesky(diag + shift * eye, lower)
                break
            except SingularSystem:
                shift = max(10.0 * shift, 1e-8 * (1.0 + float(np.abs(diag).max())))
                if shift > 1e12:
                    raise
        D = -factor.solve(g)
        slope = float(np.sum(g * D))
        if not slope < 0.0:
            D, slope = -g, -gnorm**2
        alpha = _step_limit(problem, X, D, settings.fraction_to_boundary)
        slack = 8.0 * _EPS * (1.0 + abs(cost))   # cost is only known to roundoff
        accepted = False
        while alpha > 1e-14:
            Xn = X + alpha * D
            if problem.feasible(Xn):
                new_cost = _evaluate(problem, Xn, 0)
                if new_cost <= cost + settings.armijo * alpha * slope + slack:
                    accepted = True
                    break
            alpha *= settings.backtrack
            stats.line_search_backtracks += 1
        if not accepted:
            break                                 # no further progress possible
        X = Xn
        cost, g, d2 = _evaluate(problem, X, 2)
        stats.cost_history.append(cost)
        if cost <= best[0]:
            best = (cost, X)
    if not stats.converged:
        cost, X = best
        stats.final_gradient_norm = float(np.linalg.norm(_evaluate(problem, X, 1)[1]))
    stats.wall_time = time.perf_counter() - t0
    return WindowSolution(X, cost, stats)


# --------------------------------------------------------------------------
# recursive filter


class MHMapFilter:
    """Sliding-window MAP filter.

    Until ``N + 1`` measurements are available the growing full-information
    problem (prior weight ``P`` around the prior mean) is solved.  Afterwards
    the window start is penalised around the previous estimate of that same
    state, ``xbar_{k-N} = xhat_{k-N|k-1}``, with weight ``arrival_weight``.
    """

    def __init__(self, system: LinearSystem, bank: ThresholdSensorBank, horizon: int,
                 arrival_weight=None, settings: SolverSettings | None = None):
        if horizon < 0:
            raise ValueError("horizon must be non-negative")
        self.system = system
        self.bank = bank
        self.horizon = int(horizon)
        self.arrival_weight = 1e3 * np.eye(system.n) if arrival_weight is None else np.asarray(arrival_weight, float)
        self.settings = settings or SolverSettings()
        self.k = -1
        self._y: list = []
        self._u: list = []
        self.solution: WindowSolution | None = None
        self.prediction = system.prior_mean.copy()

    def advance(self, y, u=None) -> WindowSolution:
        """Consume the bits for a new time step.

        ``u`` is the input applied over the transition into this step and is
        ignored for the very first call.
        """
        y = np.asarray(y).reshape(self.bank.size)
        if self.k >= 0:
            u = np.zeros(self.system.m) if u is None else np.asarray(u, dtype=float).reshape(self.system.m)
            self._u.append(u)
        self._y.append(y)
        self.k += 1
        k, N = self.k, self.horizon
        if k < N:
            start = 0
            prediction, weight = self.system.prior_mean, self.system.prior_information
        else:
            start = k - N
            prev = self.solution
            weight = self.arrival_weight
            if prev is None:
                prediction, weight = self.system.prior_mean, self.system.prior_information
            elif start - prev.start < prev.estimates.shape[0]:
                prediction = prev.estimates[start - prev.start]
            else:
                # N = 0: the state is not in the previous window, propagate one step
                prediction = self.system.A @ prev.last + self.system.B @ self._u[-1]
        # keep only what the current window needs
        keep = k - start + 1
        self._y = self._y[-keep:]
        self._u = self._u[-(keep - 1):] if keep > 1 else []
        self.prediction = np.array(prediction, dtype=float)
        problem = WindowProblem(self.system, self.bank, self.prediction, weight,
                                np.array(self._y), np.array(self._u).reshape(-1, self.system.m))
        warm = self._warm_start(start, problem)
        sol = solve_window(problem, self.settings, warm)
        sol.start = start
        self.solution = sol
        return sol

    def _warm_start(self, start, problem):
        prev = self.solution
        if prev is None:
            return None
        kept = prev.estimates[start - prev.start:]
        nxt = self.system.A @ kept[-1] + problem.drift[-1] if problem.T > 1 else None
        X = np.vstack([kept, nxt[None, :]]) if nxt is not None else kept[-problem.T:]
        if X.shape[0] != problem.T:
            return None
        return X
