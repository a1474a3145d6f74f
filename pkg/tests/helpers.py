"""Random problem generators shared by the test modules."""

import numpy as np

from mhmap.mhe import WindowProblem
from mhmap.model import LinearSystem, ThresholdSensorBank
from mhmap.noise import Exponential, Gaussian, Laplace, Logistic, Uniform

NOISE_KINDS = ("gaussian", "logistic", "laplace", "uniform", "exponential")


def make_noise(kind, rng):
    if kind == "gaussian":
        return Gaussian(rng.uniform(0.2, 2.0))
    if kind == "logistic":
        return Logistic(rng.uniform(0.3, 1.5))
    if kind == "laplace":
        return Laplace(rng.uniform(0.3, 1.5))
    if kind == "uniform":
        w = rng.uniform(1.0, 3.0)
        return Uniform(-w, w)
    return Exponential(rng.uniform(0.5, 2.0))


def random_system(rng, n, m=1):
    A = rng.normal(scale=0.4, size=(n, n)) + 0.6 * np.eye(n)
    B = rng.normal(size=(n, m))
    L = rng.normal(size=(n, n))
    G = L @ L.T + n * np.eye(n)
    return LinearSystem(A, B, rng.normal(size=n), np.eye(n), G)


def random_problem(rng, n, N, l, kind="gaussian"):
    """Window problem whose rollout is strictly feasible for bounded noise."""
    system = random_system(rng, n)
    C = rng.normal(size=(l, n))
    noise = make_noise(kind, rng)
    T = N + 1
    U = rng.normal(size=(T - 1, 1))
    Y = rng.integers(0, 2, size=(T, l))
    L = rng.normal(size=(n, n))
    Psi = L @ L.T + np.eye(n)
    xbar = rng.normal(size=n)
    # thresholds placed so the noise-free rollout lies inside the support
    probe = WindowProblem(system, ThresholdSensorBank(C, np.zeros(l), noise), xbar, Psi, Y, U)
    X = probe.rollout()
    CX = X @ C.T
    if kind in ("uniform", "exponential"):
        a = noise.support("cdf").lower
        b = noise.support("survival").upper
        tau = np.empty(l)
        for i in range(l):
            zero, one = Y[:, i] == 0, Y[:, i] == 1
            lb = CX[zero, i].max() + a if zero.any() else -np.inf
            ub = CX[one, i].min() + b if one.any() and np.isfinite(b) else np.inf
            if not lb < ub:
                Y[:, i] = 0
                lb, ub = CX[:, i].max() + a, np.inf
            if np.isfinite(lb) and np.isfinite(ub):
                tau[i] = 0.5 * (lb + ub)
            elif np.isfinite(lb):
                tau[i] = lb + rng.uniform(0.2, 1.0)
            elif np.isfinite(ub):
                tau[i] = ub - rng.uniform(0.2, 1.0)
            else:
                tau[i] = CX[:, i].mean()
    else:
        tau = CX.mean(axis=0) + rng.normal(size=l)
    bank = ThresholdSensorBank(C, tau, noise)
    return WindowProblem(system, bank, xbar, Psi, Y, U)


def random_feasible_points(problem, rng, count, scale=0.3):
    """Perturbations of the rollout that stay inside the feasible set."""
    X0 = problem.rollout()
    out = []
    while len(out) < count:
        X = X0 + scale * rng.normal(size=X0.shape)
        if problem.feasible(X):
            out.append(X)
        else:
            scale *= 0.9
    return out


def strip_mesh(cols=5, rows=3, dirichlet_row=True):
    """Structured strip mesh; with ``rows=3`` it has 10 free vertices above a Dirichlet row."""
    from mhmap.fem import DIRICHLET, NEUMANN, FemMesh

    xs, ys = np.arange(cols, dtype=float), np.arange(rows, dtype=float)
    V = np.array([(x, y) for y in ys for x in xs])
    idx = np.arange(V.shape[0]).reshape(rows, cols)
    T = []
    for j in range(rows - 1):
        for i in range(cols - 1):
            a, b, c, d = idx[j, i], idx[j, i + 1], idx[j + 1, i + 1], idx[j + 1, i]
            T += [(a, b, c), (a, c, d)]
    markers = np.full(V.shape[0], NEUMANN)
    if dirichlet_row:
        markers[V[:, 1] == 0] = DIRICHLET
    return FemMesh.from_unordered(V, np.array(T), markers)
