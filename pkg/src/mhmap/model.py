"""Linear state-space model observed by a bank of threshold sensors.

    x[k+1] = A x[k] + B u[k] + w[k],      w ~ N(0, G^-1)
    z[k]   = C x[k] + v[k]
    y[k]   = 1 if z[k] >= tau else 0
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .errors import DimensionError, InvalidParameter
from .noise import Gaussian, NoiseModel


def _sym(M, name):
    M = np.atleast_2d(np.asarray(M, dtype=float))
    if M.shape[0] != M.shape[1]:
        raise DimensionError(f"{name} must be square, got {M.shape}")
    if not np.allclose(M, M.T, rtol=1e-10, atol=1e-12):
        raise InvalidParameter(f"{name} must be symmetric")
    return 0.5 * (M + M.T)


@dataclass(frozen=True, eq=False)
class LinearSystem:
    """Linear Gauss-Markov dynamics.

    ``prior_information`` (P) and ``process_information`` (G) are inverse
    covariances, matching the weights of the MAP cost.  ``process_covariance``
    defaults to ``inv(G)``; pass a zero matrix to simulate noise-free.
    """

    A: np.ndarray
    B: np.ndarray
    prior_mean: np.ndarray
    prior_information: np.ndarray
    process_information: np.ndarray
    process_covariance: np.ndarray | None = None
    noise_factor: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        A = np.atleast_2d(np.asarray(self.A, dtype=float))
        n = A.shape[0]
        if A.shape != (n, n):
            raise DimensionError(f"A must be square, got {A.shape}")
        B = np.asarray(self.B, dtype=float)
        if B.ndim == 1:
            B = B.reshape(n, -1)
        if B.ndim != 2 or B.shape[0] != n:
            raise DimensionError(f"B must have {n} rows, got {B.shape}")
        x0 = np.asarray(self.prior_mean, dtype=float).reshape(-1)
        if x0.shape != (n,):
            raise DimensionError(f"prior_mean must have length {n}")
        P = _sym(self.prior_information, "prior_information")
        G = _sym(self.process_information, "process_information")
        if P.shape != (n, n) or G.shape != (n, n):
            raise DimensionError("prior/process information must be n x n")
        if np.linalg.eigvalsh(P).min() < -1e-10 * max(1.0, np.abs(P).max()):
            raise InvalidParameter("prior_information must be positive semidefinite")
        try:
            np.linalg.cholesky(G)
        except np.linalg.LinAlgError:
            raise InvalidParameter("process_information must be positive definite") from None
        if self.process_covariance is None:
            Q = np.linalg.inv(G)
        else:
            Q = _sym(self.process_covariance, "process_covariance")
            if Q.shape != (n, n):
                raise DimensionError("process_covariance must be n x n")
        # symmetric square root handles the PSD (incl. zero) case
        evals, evecs = np.linalg.eigh(0.5 * (Q + Q.T))
        factor = (evecs * np.sqrt(np.clip(evals, 0.0, None))) @ evecs.T
        for name, value in (("A", A), ("B", B), ("prior_mean", x0), ("prior_information", P),
                            ("process_information", G), ("process_covariance", Q),
                            ("noise_factor", factor)):
            value.setflags(write=False)
            object.__setattr__(self, name, value)

    @property
    def n(self) -> int:
        return self.A.shape[0]

    @property
    def m(self) -> int:
        return self.B.shape[1]

    @classmethod
    def scalar(cls, a=1.0, b=0.0, prior_mean=0.0, prior_information=1.0, process_information=1.0, **kw):
        return cls(np.array([[a]]), np.array([[b]]), np.array([prior_mean]), np.array([[prior_information]]),
                   np.array([[process_information]]), **kw)


class ThresholdSensorBank:
    """Rows ``C`` (l x n), thresholds ``tau`` and per-sensor noise models.

    ``noise`` is the ground-truth model used by :func:`measure`;
    ``assumed_noise`` is what the estimator believes (defaults to ``noise``).
    Either may be a single model shared by all sensors or one per sensor.
    """

    def __init__(self, C, thresholds, noise: NoiseModel | Sequence[NoiseModel] = Gaussian(1.0),
                 assumed_noise: NoiseModel | Sequence[NoiseModel] | None = None):
        C = np.asarray(C, dtype=float)
        if C.ndim == 1:
            C = C.reshape(1, -1) if C.size else C.reshape(0, 0)
        tau = np.asarray(thresholds, dtype=float).reshape(-1)
        if C.shape[0] != tau.shape[0]:
            raise DimensionError(f"{C.shape[0]} rows but {tau.shape[0]} thresholds")
        self.C = C
        self.thresholds = tau
        self.noise = self._expand(noise)
        self.assumed_noise = self.noise if assumed_noise is None else self._expand(assumed_noise)
        self._groups = self._group(self.assumed_noise)
        self.C.setflags(write=False)
        self.thresholds.setflags(write=False)

    def _expand(self, noise):
        if isinstance(noise, NoiseModel):
            return (noise,) * self.size
        noise = tuple(noise)
        if len(noise) != self.size:
            raise DimensionError(f"expected {self.size} noise models, got {len(noise)}")
        return noise

    @staticmethod
    def _group(models):
        groups = {}
        for i, model in enumerate(models):
            groups.setdefault(model, []).append(i)
        return [(model, np.array(idx)) for model, idx in groups.items()]

    @property
    def size(self) -> int:
        return self.thresholds.shape[0]

    @property
    def n(self) -> int:
        return self.C.shape[1]

    @property
    def bounded(self) -> bool:
        return any(model.bounded for model, _ in self._groups)

    def terms(self, Z, Y, derivatives=True):
        """Evaluate the assumed-noise log terms on a (T, l) array of ``tau - Cx``."""
        Z = np.asarray(Z, dtype=float)
        Y = np.asarray(Y)
        if len(self._groups) == 1:
            return self._groups[0][0].terms(Z, Y, derivatives)
        val = np.empty_like(Z)
        if derivatives:
            d1, d2 = np.empty_like(Z), np.empty_like(Z)
        for model, idx in self._groups:
            out = model.terms(Z[..., idx], Y[..., idx], derivatives)
            if derivatives:
                val[..., idx], d1[..., idx], d2[..., idx] = out
            else:
                val[..., idx] = out
        return (val, d1, d2) if derivatives else val

    def feasible(self, Z, Y):
        Z = np.asarray(Z, dtype=float)
        ok = np.ones(Z.shape, dtype=bool)
        for model, idx in self._groups:
            ok[..., idx] = model.feasible(Z[..., idx], np.asarray(Y)[..., idx])
        return ok

    def limits(self, Y):
        """Per-entry open bounds ``(lo, hi)`` on ``tau - Cx`` implied by bits ``Y``."""
        Y = np.asarray(Y).astype(bool)
        lo = np.full(Y.shape, -np.inf)
        hi = np.full(Y.shape, np.inf)
        for model, idx in self._groups:
            a = model.support("cdf").lower
            b = model.support("survival").upper
            yi = Y[..., idx]
            lo[..., idx] = np.where(yi, -np.inf, a)
            hi[..., idx] = np.where(yi, b, np.inf)
        return lo, hi


def _vec(x, n, name):
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.shape != (n,):
        raise DimensionError(f"{name} must have length {n}, got {x.shape}")
    return x


def step(system: LinearSystem, x, u=None, rng: np.random.Generator | None = None):
    """One transition ``A x + B u + w``; noise-free when ``rng`` is None."""
    x = _vec(x, system.n, "x")
    out = system.A @ x
    if u is not None:
        out = out + system.B @ _vec(u, system.m, "u")
    if rng is not None:
        out = out + system.noise_factor @ rng.standard_normal(system.n)
    return out


def measure(bank: ThresholdSensorBank, x, rng: np.random.Generator | None = None):
    """Return ``(y, z)``.  Ties ``z == tau`` produce ``y = 1``."""
    x = _vec(x, bank.n, "x")
    z = bank.C @ x
    if rng is not None:
        v = np.empty(bank.size)
        for i, model in enumerate(bank.noise):
            v[i] = model.sample(rng)
        z = z + v
    y = (z >= bank.thresholds).astype(np.int8)
    return y, z


def log_likelihood_term(bank: ThresholdSensorBank, i: int, y_bit: int, x) -> float:
    """``ln p(y_i | x)`` under the estimator-assumed noise model of sensor ``i``."""
    x = _vec(x, bank.n, "x")
    z = bank.thresholds[i] - bank.C[i] @ x
    model = bank.assumed_noise[i]
    return -float(model.neg_log_survival(z) if y_bit else model.neg_log_cdf(z))


@dataclass
class Trajectory:
    states: np.ndarray   # (K+1, n)
    inputs: np.ndarray   # (K, m)
    times: np.ndarray    # (K+1,)


def simulate(system: LinearSystem, x0, inputs, rng=None, dt: float = 1.0) -> Trajectory:
    """Roll the dynamics forward from ``x0`` through every row of ``inputs``."""
    inputs = np.asarray(inputs, dtype=float).reshape(-1, system.m)
    states = np.empty((inputs.shape[0] + 1, system.n))
    states[0] = _vec(x0, system.n, "x0")
    for k, u in enumerate(inputs):
        states[k + 1] = step(system, states[k], u, rng)
    return Trajectory(states, inputs, dt * np.arange(states.shape[0]))


def measure_trajectory(bank: ThresholdSensorBank, states, rng=None):
    """Binary records ``(Y, Z)`` for every row of ``states``."""
    out = [measure(bank, x, rng) for x in np.atleast_2d(states)]
    return np.array([o[0] for o in out]), np.array([o[1] for o in out])
