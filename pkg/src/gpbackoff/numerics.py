"""Dense linear algebra, beta-distribution special functions, random streams
and low-discrepancy points used throughout the package."""

from __future__ import annotations

import math
import warnings

import numpy as np
import scipy.linalg
from scipy.stats import qmc

from .errors import (
    ConvergenceFailure,
    DimensionUnsupported,
    DomainError,
    EmptySample,
    NotPositiveDefinite,
)

JITTER_BASE = 1e-10
JITTER_ESCALATIONS = 3
SYMMETRY_RTOL = 1e-10
MAX_SOBOL_DIM = 8


# ---------------------------------------------------------------------------
# random streams
# ---------------------------------------------------------------------------

class RngStream:
    """Reproducible random stream keyed by ``(seed, stream_id)``.

    Backed by the counter-based Philox generator: the two 64-bit words of the
    Philox key are the seed and the stream id, so distinct stream ids give
    independent streams and equal keys give bitwise-identical draws.
    """

    __slots__ = ("seed", "stream_id", "_gen")

    def __init__(self, seed: int, stream_id: int = 0):
        seed = int(seed)
        stream_id = int(stream_id)
        if not (0 <= seed < 2**64 and 0 <= stream_id < 2**64):
            raise DomainError("seed and stream_id must be unsigned 64-bit integers")
        self.seed = seed
        self.stream_id = stream_id
        self._gen = np.random.Generator(np.random.Philox(key=seed | (stream_id << 64)))

    def __repr__(self):
        return f"RngStream(seed={self.seed}, stream_id={self.stream_id})"

    def derive(self, stream_id: int) -> "RngStream":
        """Fresh stream with the same seed and a different stream id."""
        return RngStream(self.seed, stream_id)

    def standard_normal(self, size=None):
        return self._gen.standard_normal(size)

    def uniform(self, low=0.0, high=1.0, size=None):
        return self._gen.uniform(low, high, size)

    def integers(self, low, high=None, size=None):
        return self._gen.integers(low, high, size)

    def binomial(self, n, p, size=None):
        return self._gen.binomial(n, p, size)


# ---------------------------------------------------------------------------
# linear algebra
# ---------------------------------------------------------------------------

def _check_symmetric(A):
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise DomainError(f"expected a square matrix, got shape {A.shape}")
    scale = max(np.max(np.abs(A)), 1e-300)
    if np.max(np.abs(A - A.T)) > SYMMETRY_RTOL * scale:
        raise DomainError("matrix is not symmetric")
    return A


def cholesky(A, jitter: bool = True, return_jitter: bool = False):
    """Lower Cholesky factor of a symmetric positive definite matrix.

    When the plain factorization fails and ``jitter`` is set, a diagonal
    jitter of ``1e-10 * mean(diag(A))`` is added and escalated by a factor
    of ten up to three times before giving up.

    Raises
    ------
    NotPositiveDefinite
        If no jitter level yields a factorization.
    """
    A = _check_symmetric(A)
    n = A.shape[0]
    if n == 0:
        L = np.zeros((0, 0))
        return (L, 0.0) if return_jitter else L
    levels = [0.0]
    if jitter:
        base = JITTER_BASE * max(float(np.mean(np.diag(A))), 1e-300)
        levels += [base * 10.0**k for k in range(JITTER_ESCALATIONS + 1)]
    for added in levels:
        try:
            L = np.linalg.cholesky(A + added * np.eye(n) if added else A)
        except np.linalg.LinAlgError:
            continue
        if np.all(np.isfinite(L)) and np.all(np.diag(L) > 0.0):
            return (L, added) if return_jitter else L
    raise NotPositiveDefinite(f"{n}x{n} matrix is not positive definite (after jitter)")


def solve_psd(A, B, jitter: bool = True):
    """Solve ``A X = B`` for symmetric positive definite ``A``."""
    L = cholesky(A, jitter=jitter)
    return scipy.linalg.cho_solve((L, True), np.asarray(B, dtype=float))


# ---------------------------------------------------------------------------
# beta distribution
# ---------------------------------------------------------------------------

_FPMIN = 1e-300
_CF_EPS = 1e-16
_CF_MAXIT = 20000


def _betacf(a, b, x):
    # continued fraction for I_x(a, b), modified Lentz
    qab = a + b
    qap = a + 1.0
    qam = a - 1.0
    c = 1.0
    d = 1.0 - qab * x / qap
    if abs(d) < _FPMIN:
        d = _FPMIN
    d = 1.0 / d
    h = d
    for m in range(1, _CF_MAXIT + 1):
        m2 = 2 * m
        aa = m * (b - m) * x / ((qam + m2) * (a + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        h *= d * c
        aa = -(a + m) * (qab + m) * x / ((a + m2) * (qap + m2))
        d = 1.0 + aa * d
        if abs(d) < _FPMIN:
            d = _FPMIN
        c = 1.0 + aa / c
        if abs(c) < _FPMIN:
            c = _FPMIN
        d = 1.0 / d
        delta = d * c
        h *= delta
        if abs(delta - 1.0) < _CF_EPS:
            return h
    raise ConvergenceFailure(f"incomplete beta continued fraction did not converge (a={a}, b={b}, x={x})")


def _log_beta(a, b):
    return math.lgamma(a) + math.lgamma(b) - math.lgamma(a + b)


def reg_inc_beta(x: float, a: float, b: float) -> float:
    """Regularized incomplete beta function ``I_x(a, b)``.

    This is the CDF of a Beta(a, b) random variable evaluated at ``x``.
    """
    x, a, b = float(x), float(a), float(b)
    if not (a > 0.0 and b > 0.0) or not math.isfinite(a) or not math.isfinite(b):
        raise DomainError(f"shape parameters must be positive and finite, got a={a}, b={b}")
    if not (0.0 <= x <= 1.0):
        raise DomainError(f"x must lie in [0, 1], got {x}")
    if x == 0.0:
        return 0.0
    if x == 1.0:
        return 1.0
    log_front = a * math.log(x) + b * math.log1p(-x) - _log_beta(a, b)
    if x < (a + 1.0) / (a + b + 2.0):
        return math.exp(log_front) * _betacf(a, b, x) / a
    return 1.0 - math.exp(log_front) * _betacf(b, a, 1.0 - x) / b


def _beta_pdf(x, a, b):
    if x <= 0.0 or x >= 1.0:
        return 0.0
    return math.exp((a - 1.0) * math.log(x) + (b - 1.0) * math.log1p(-x) - _log_beta(a, b))


def betainv(P: float, A: float, B: float, maxiter: int = 200) -> float:
    """Inverse of :func:`reg_inc_beta` in ``x``: the ``P`` quantile of Beta(A, B).

    Newton iteration on the CDF, safeguarded by a bracketing interval that
    falls back to bisection whenever a Newton step leaves the bracket.
    """
    P, A, B = float(P), float(A), float(B)
    if not (0.0 < P < 1.0):
        raise DomainError(f"P must lie in (0, 1), got {P}")
    if not (A > 0.0 and B > 0.0):
        raise DomainError(f"shape parameters must be positive, got A={A}, B={B}")
    if A == 1.0 and B == 1.0:
        return P
    lo, hi = 0.0, 1.0
    x = A / (A + B)
    for _ in range(maxiter):
        f = reg_inc_beta(x, A, B) - P
        if f == 0.0 or abs(f) <= 1e-15:
            return x
        if f < 0.0:
            lo = x
        else:
            hi = x
        pdf = _beta_pdf(x, A, B)
        x_new = x - f / pdf if pdf > 0.0 and math.isfinite(pdf) else -1.0
        if not (lo < x_new < hi):
            x_new = 0.5 * (lo + hi)
        if x_new == x or hi - lo <= 4.0 * np.finfo(float).eps * max(x, np.finfo(float).tiny):
            return x_new
        x = x_new
    raise ConvergenceFailure(f"betainv did not converge in {maxiter} iterations (P={P}, A={A}, B={B})")


# ---------------------------------------------------------------------------
# sampling
# ---------------------------------------------------------------------------

def sobol(n: int, d: int, lower, upper) -> np.ndarray:
    """First ``n`` points of an unscrambled Sobol sequence scaled to a box.

    The all-zeros first point of the sequence is skipped.
    """
    if d < 1 or d > MAX_SOBOL_DIM:
        raise DimensionUnsupported(f"Sobol dimension must be in 1..{MAX_SOBOL_DIM}, got {d}")
    lower = np.asarray(lower, dtype=float).reshape(-1)
    upper = np.asarray(upper, dtype=float).reshape(-1)
    if lower.shape != (d,) or upper.shape != (d,):
        raise DomainError("bounds must have length d")
    if np.any(lower >= upper):
        raise DomainError("lower bounds must be strictly below upper bounds")
    if n < 0:
        raise DomainError("n must be nonnegative")
    with warnings.catch_warnings():
        # balance-property warning for non power-of-two n is irrelevant here
        warnings.simplefilter("ignore", UserWarning)
        unit = qmc.Sobol(d, scramble=False).random(n + 1)[1:]
    return lower + unit * (upper - lower)


def sample_gaussian(mean, cov, rng: RngStream) -> np.ndarray:
    """One draw from ``N(mean, cov)``.

    ``cov`` is either a vector of variances (diagonal covariance) or a full
    matrix. Exactly ``len(mean)`` standard normals are consumed from ``rng``
    in both cases, so zero-variance components stay aligned with the stream.
    """
    mean = np.asarray(mean, dtype=float).reshape(-1)
    cov = np.asarray(cov, dtype=float)
    eps = rng.standard_normal(mean.shape[0])
    if cov.ndim == 1:
        if cov.shape != mean.shape:
            raise DomainError("diagonal covariance length must match the mean")
        if np.any(cov < 0.0):
            raise DomainError("variances must be nonnegative")
        return mean + np.sqrt(cov) * eps
    if cov.shape != (mean.shape[0], mean.shape[0]):
        raise DomainError("covariance shape must match the mean")
    L = cholesky(cov, jitter=False)
    return mean + L @ eps


def ecdf_quantile(samples, p: float) -> float:
    """Lower empirical quantile: smallest sample ``v`` with ``ecdf(v) >= p``."""
    values = np.sort(np.asarray(samples, dtype=float).reshape(-1))
    if values.size == 0:
        raise EmptySample("ecdf_quantile needs at least one sample")
    if not (0.0 < p <= 1.0):
        raise DomainError(f"p must lie in (0, 1], got {p}")
    # guard against p*S landing a hair above an integer
    k = int(math.ceil(p * values.size - 1e-9))
    return float(values[max(k, 1) - 1])
