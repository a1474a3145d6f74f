"""Scalar log-concave measurement-noise models.

Every model exposes the CDF ``F`` together with the two log-likelihood
terms used by the estimators,

    neg_log_cdf(z)      = -ln F(z)
    neg_log_survival(z) = -ln(1 - F(z))

and their first and second derivatives.  All methods are vectorised over
numpy arrays.  Both terms are convex for log-concave densities, which is
what makes the moving-horizon cost convex.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np
from scipy import special

from .errors import DomainError, InvalidParameter

_LN2 = math.log(2.0)
_SQRT2 = math.sqrt(2.0)
_SQRT_2_OVER_PI = math.sqrt(2.0 / math.pi)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


class SupportInterval(NamedTuple):
    """Open interval ``(lower, upper)`` on which a log term is finite."""

    lower: float
    upper: float

    def contains(self, z) -> np.ndarray:
        z = np.asarray(z, dtype=float)
        return (z > self.lower) & (z < self.upper)


class NoiseModel:
    """Base class.  Subclasses implement the six ``_``-prefixed kernels."""

    def cdf(self, z):
        return self._cdf(np.asarray(z, dtype=float))

    def neg_log_cdf(self, z):
        z = self._check(z, "cdf")
        return self._nlc(z)

    def neg_log_survival(self, z):
        z = self._check(z, "survival")
        return self._nls(z)

    def d_neg_log_cdf(self, z):
        """Return ``(first, second)`` derivatives of ``-ln F``."""
        z = self._check(z, "cdf")
        return self._dnlc(z)

    def d_neg_log_survival(self, z):
        """Return ``(first, second)`` derivatives of ``-ln(1 - F)``."""
        z = self._check(z, "survival")
        return self._dnls(z)

    def support(self, which: str = "cdf") -> SupportInterval:
        if which not in ("cdf", "survival"):
            raise ValueError(f"which must be 'cdf' or 'survival', got {which!r}")
        return self._support(which)

    @property
    def bounded(self) -> bool:
        """True when some log term has a finite edge to its support."""
        c, s = self._support("cdf"), self._support("survival")
        return bool(np.isfinite(c.lower) or np.isfinite(s.upper))

    def sample(self, rng: np.random.Generator, size=None):
        raise NotImplementedError

    @property
    def std(self) -> float:
        raise NotImplementedError

    def terms(self, z, y, derivatives: bool = True):
        """Negative log-likelihood of binary outcomes ``y`` at ``z = tau - Cx``.

        ``y == 0`` selects ``-ln F(z)`` and ``y == 1`` selects
        ``-ln(1 - F(z))``.  Returns ``value`` or ``(value, d1, d2)`` where the
        derivatives are taken with respect to ``z``.
        """
        z = np.asarray(z, dtype=float)
        one = np.asarray(y).astype(bool)
        one = np.broadcast_to(one, z.shape)
        self._check_mixed(z, one)
        val = np.empty_like(z)
        zero = ~one
        val[zero] = self._nlc(z[zero])
        val[one] = self._nls(z[one])
        if not derivatives:
            return val
        d1 = np.empty_like(z)
        d2 = np.empty_like(z)
        d1[zero], d2[zero] = self._dnlc(z[zero])
        d1[one], d2[one] = self._dnls(z[one])
        return val, d1, d2

    def feasible(self, z, y) -> np.ndarray:
        """Elementwise mask of ``z`` values inside the support selected by ``y``."""
        z = np.asarray(z, dtype=float)
        one = np.broadcast_to(np.asarray(y).astype(bool), z.shape)
        lo = self._support("cdf").lower
        hi = self._support("survival").upper
        return np.where(one, z < hi, z > lo)

    def _check(self, z, which):
        z = np.asarray(z, dtype=float)
        sup = self._support(which)
        if (np.isfinite(sup.lower) or np.isfinite(sup.upper)) and not np.all(sup.contains(z)):
            raise DomainError(f"{type(self).__name__}: argument outside {which} support {tuple(sup)}")
        return z

    def _check_mixed(self, z, one):
        if self.bounded and not np.all(self.feasible(z, one)):
            raise DomainError(f"{type(self).__name__}: argument outside the likelihood support")


def _pos(value, name):
    value = float(value)
    if not (value > 0.0 and math.isfinite(value)):
        raise InvalidParameter(f"{name} must be positive and finite, got {value}")
    return value


# --------------------------------------------------------------------------
# Gaussian


def _nlcdf_std_normal(x):
    # -ln Phi(x).  Left tail through erfcx, so no underflow for large |x|.
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    neg = x < 0
    t = -x[neg] / _SQRT2
    out[neg] = _LN2 - np.log(special.erfcx(t)) + t * t
    xp = x[~neg]
    out[~neg] = -np.log1p(-0.5 * special.erfc(xp / _SQRT2))
    return out


def _mills(x):
    """phi(x) / Phi(x), stable on both tails."""
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    neg = x < 0
    out[neg] = _SQRT_2_OVER_PI / special.erfcx(-x[neg] / _SQRT2)
    xp = x[~neg]
    out[~neg] = _INV_SQRT_2PI * np.exp(-0.5 * xp * xp) / (1.0 - 0.5 * special.erfc(xp / _SQRT2))
    return out


@dataclass(frozen=True)
class Gaussian(NoiseModel):
    """Zero-mean normal noise with the given variance."""

    variance: float = 1.0

    def __post_init__(self):
        _pos(self.variance, "variance")

    @property
    def std(self):
        return math.sqrt(self.variance)

    def _cdf(self, z):
        return special.ndtr(z / self.std)

    def _nlc(self, z):
        return _nlcdf_std_normal(z / self.std)

    def _nls(self, z):
        return _nlcdf_std_normal(-z / self.std)

    def _dnlc(self, z):
        s = self.std
        x = z / s
        m = _mills(x)
        return -m / s, m * (m + x) / (s * s)

    def _dnls(self, z):
        d1, d2 = self._dnlc(-z)
        return -d1, d2

    def _support(self, which):
        return SupportInterval(-math.inf, math.inf)

    def sample(self, rng, size=None):
        return rng.normal(0.0, self.std, size)

    def terms(self, z, y, derivatives: bool = True):
        # same values as the generic path, but one pass without masking:
        # flip the sign for y = 1 so every entry is a -ln Phi(w) term
        s = self.std
        one = np.broadcast_to(np.asarray(y).astype(bool), np.shape(z))
        x = np.asarray(z, dtype=float) / s
        w = np.where(one, -x, x)
        t = np.maximum(-w, 0.0) / _SQRT2
        e = special.erfcx(t)
        c = 0.5 * special.erfc(np.maximum(w, 0.0) / _SQRT2)
        neg = w < 0
        val = np.where(neg, _LN2 - np.log(e) + t * t, -np.log1p(-c))
        if not derivatives:
            return val
        m = np.where(neg, _SQRT_2_OVER_PI / e, _INV_SQRT_2PI * np.exp(-0.5 * w * w) / (1.0 - c))
        d1 = np.where(one, m, -m) / s
        d2 = m * (m + w) / (s * s)
        return val, d1, d2


# --------------------------------------------------------------------------
# Logistic


@dataclass(frozen=True)
class Logistic(NoiseModel):
    scale: float = 1.0

    def __post_init__(self):
        _pos(self.scale, "scale")

    @property
    def std(self):
        return self.scale * math.pi / math.sqrt(3.0)

    def _cdf(self, z):
        return special.expit(z / self.scale)

    def _nlc(self, z):
        return np.logaddexp(0.0, -z / self.scale)

    def _nls(self, z):
        return np.logaddexp(0.0, z / self.scale)

    def _dnlc(self, z):
        s = self.scale
        x = z / s
        return -special.expit(-x) / s, special.expit(x) * special.expit(-x) / (s * s)

    def _dnls(self, z):
        s = self.scale
        x = z / s
        return special.expit(x) / s, special.expit(x) * special.expit(-x) / (s * s)

    def _support(self, which):
        return SupportInterval(-math.inf, math.inf)

    def sample(self, rng, size=None):
        return rng.logistic(0.0, self.scale, size)


# --------------------------------------------------------------------------
# Laplace


@dataclass(frozen=True)
class Laplace(NoiseModel):
    scale: float = 1.0

    def __post_init__(self):
        _pos(self.scale, "scale")

    @property
    def std(self):
        return self.scale * math.sqrt(2.0)

    def _cdf(self, z):
        x = z / self.scale
        return np.where(x < 0, 0.5 * np.exp(np.minimum(x, 0.0)), 1.0 - 0.5 * np.exp(-np.maximum(x, 0.0)))

    def _nlc(self, z):
        x = np.asarray(z / self.scale, dtype=float)
        return np.where(x < 0, _LN2 - x, -np.log1p(-0.5 * np.exp(-np.maximum(x, 0.0))))

    def _nls(self, z):
        return self._nlc(-z)

    def _dnlc(self, z):
        b = self.scale
        x = np.asarray(z / b, dtype=float)
        g = 0.5 * np.exp(-np.maximum(x, 0.0))
        d1 = np.where(x < 0, -1.0 / b, -(g / (1.0 - g)) / b)
        d2 = np.where(x < 0, 0.0, g / (b * b * (1.0 - g) ** 2))
        return d1, d2

    def _dnls(self, z):
        d1, d2 = self._dnlc(-z)
        return -d1, d2

    def _support(self, which):
        return SupportInterval(-math.inf, math.inf)

    def sample(self, rng, size=None):
        return rng.laplace(0.0, self.scale, size)


# --------------------------------------------------------------------------
# Uniform


@dataclass(frozen=True)
class Uniform(NoiseModel):
    lower: float = -1.0
    upper: float = 1.0

    def __post_init__(self):
        if not (math.isfinite(self.lower) and math.isfinite(self.upper) and self.lower < self.upper):
            raise InvalidParameter(f"need finite lower < upper, got ({self.lower}, {self.upper})")

    @property
    def width(self):
        return self.upper - self.lower

    @property
    def std(self):
        return self.width / math.sqrt(12.0)

    def _cdf(self, z):
        return np.clip((z - self.lower) / self.width, 0.0, 1.0)

    def _nlc(self, z):
        inside = z < self.upper
        return np.where(inside, -np.log(np.where(inside, z - self.lower, self.width) / self.width), 0.0)

    def _nls(self, z):
        inside = z > self.lower
        return np.where(inside, -np.log(np.where(inside, self.upper - z, self.width) / self.width), 0.0)

    def _dnlc(self, z):
        inside = z < self.upper
        d = np.where(inside, z - self.lower, 1.0)
        return np.where(inside, -1.0 / d, 0.0), np.where(inside, 1.0 / (d * d), 0.0)

    def _dnls(self, z):
        inside = z > self.lower
        d = np.where(inside, self.upper - z, 1.0)
        return np.where(inside, 1.0 / d, 0.0), np.where(inside, 1.0 / (d * d), 0.0)

    def _support(self, which):
        if which == "cdf":
            return SupportInterval(self.lower, math.inf)
        return SupportInterval(-math.inf, self.upper)

    def sample(self, rng, size=None):
        return rng.uniform(self.lower, self.upper, size)


# --------------------------------------------------------------------------
# Exponential


@dataclass(frozen=True)
class Exponential(NoiseModel):
    """Exponential noise on ``[0, inf)`` with the given rate."""

    rate: float = 1.0

    def __post_init__(self):
        _pos(self.rate, "rate")

    @property
    def std(self):
        return 1.0 / self.rate

    def _cdf(self, z):
        return np.where(z > 0, -np.expm1(-self.rate * np.maximum(z, 0.0)), 0.0)

    def _nlc(self, z):
        return -np.log(-np.expm1(-self.rate * z))

    def _nls(self, z):
        return self.rate * np.maximum(z, 0.0)

    def _dnlc(self, z):
        lz = self.rate * np.asarray(z, dtype=float)
        e = np.expm1(lz)
        d1 = -self.rate / e
        # lam^2 e^{lz} / (e^{lz} - 1)^2, written to avoid overflow of e^{lz}
        d2 = self.rate**2 * np.exp(-lz) / (-np.expm1(-lz)) ** 2
        return d1, d2

    def _dnls(self, z):
        z = np.asarray(z, dtype=float)
        return np.where(z > 0, self.rate, 0.0), np.zeros_like(z)

    def _support(self, which):
        if which == "cdf":
            return SupportInterval(0.0, math.inf)
        return SupportInterval(-math.inf, math.inf)

    def sample(self, rng, size=None):
        return rng.exponential(1.0 / self.rate, size)
