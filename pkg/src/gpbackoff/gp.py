"""Single-output Gaussian-process regression with a squared-exponential kernel.

The model keeps the explicit inverse of the training covariance so that new
observations (noisy or noiseless) can be absorbed with a bordered-matrix
inverse update instead of a refactorization.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from functools import cached_property

import numpy as np
import scipy.linalg
from scipy.optimize import minimize

from .errors import AllRestartsFailed, DimensionMismatch, NotPositiveDefinite, SingularUpdate
from .numerics import RngStream, cholesky

LOG_BOUNDS = (-7.0, 7.0)
VARIANCE_CLAMP_TOL = 1e-9
SCHUR_FLOOR = 1e-12


@dataclass(frozen=True, eq=False)
class Hyperparameters:
    """SE-kernel hyperparameters stored in log-space."""

    log_zeta: float
    log_lambda: np.ndarray
    log_sigma_nu: float

    def __post_init__(self):
        lam = np.array(self.log_lambda, dtype=float).reshape(-1)
        lam.setflags(write=False)
        object.__setattr__(self, "log_lambda", lam)
        object.__setattr__(self, "log_zeta", float(self.log_zeta))
        object.__setattr__(self, "log_sigma_nu", float(self.log_sigma_nu))

    def __eq__(self, other):
        if not isinstance(other, Hyperparameters):
            return NotImplemented
        return np.array_equal(self.to_vector(), other.to_vector())

    def __hash__(self):
        return hash(self.to_vector().tobytes())

    @property
    def zeta(self) -> float:
        return math.exp(self.log_zeta)

    @property
    def lengthscales(self) -> np.ndarray:
        return np.exp(self.log_lambda)

    @property
    def sigma_nu(self) -> float:
        return math.exp(self.log_sigma_nu)

    @property
    def n_z(self) -> int:
        return self.log_lambda.shape[0]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([[self.log_zeta], self.log_lambda, [self.log_sigma_nu]])

    @classmethod
    def from_vector(cls, v) -> "Hyperparameters":
        v = np.asarray(v, dtype=float)
        return cls(v[0], v[1:-1], v[-1])

    @classmethod
    def from_natural(cls, zeta, lengthscales, sigma_nu) -> "Hyperparameters":
        return cls(math.log(zeta), np.log(np.asarray(lengthscales, dtype=float)), math.log(sigma_nu))

    def to_dict(self) -> dict:
        return {
            "log_zeta": self.log_zeta,
            "log_lambda": self.log_lambda.tolist(),
            "log_sigma_nu": self.log_sigma_nu,
        }

    @classmethod
    def from_dict(cls, d) -> "Hyperparameters":
        return cls(d["log_zeta"], d["log_lambda"], d["log_sigma_nu"])


def se_kernel(z, z_prime, psi: Hyperparameters) -> float:
    """``zeta^2 exp(-0.5 (z - z')^T diag(lambda)^-2 (z - z'))``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    z_prime = np.asarray(z_prime, dtype=float).reshape(-1)
    if z.shape != z_prime.shape or z.shape[0] != psi.n_z:
        raise DimensionMismatch(f"kernel inputs of shapes {z.shape}, {z_prime.shape} vs n_z={psi.n_z}")
    r = (z - z_prime) / psi.lengthscales
    return psi.zeta**2 * math.exp(-0.5 * float(r @ r))


def kernel_matrix(Z1, Z2, psi: Hyperparameters) -> np.ndarray:
    """Cross-covariance matrix ``K[i, j] = k(Z1[i], Z2[j])``."""
    Z1 = np.atleast_2d(np.asarray(Z1, dtype=float))
    Z2 = np.atleast_2d(np.asarray(Z2, dtype=float))
    if Z1.shape[1] != psi.n_z or Z2.shape[1] != psi.n_z:
        raise DimensionMismatch(f"input dimension must be {psi.n_z}")
    # explicit differences avoid the cancellation of the expanded square
    D = (Z1[:, None, :] - Z2[None, :, :]) / psi.lengthscales
    sq = np.einsum("ijk,ijk->ij", D, D)
    return psi.zeta**2 * np.exp(-0.5 * sq)


def training_covariance(Z, psi: Hyperparameters, noise_flags=None) -> np.ndarray:
    """``Sigma_Y``: kernel Gram matrix plus ``sigma_nu^2`` on flagged rows."""
    K = kernel_matrix(Z, Z, psi)
    flags = np.ones(K.shape[0], dtype=bool) if noise_flags is None else np.asarray(noise_flags, dtype=bool)
    K[np.diag_indices_from(K)] = psi.zeta**2 + np.where(flags, psi.sigma_nu**2, 0.0)
    return K


@dataclass(frozen=True, eq=False)
class GPModel:
    """Conditioned single-output GP, immutable after construction.

    Besides the explicit inverse ``inv_cov`` the lower Cholesky factor
    ``chol`` of ``Sigma_Y`` is carried along. It is extended by a bordered
    update on every conditioning and supplies numerically stable Schur
    complements and posterior variances once noiseless points make
    ``Sigma_Y`` badly conditioned.
    """

    Z: np.ndarray
    Y: np.ndarray
    psi: Hyperparameters
    inv_cov: np.ndarray
    alpha: np.ndarray
    noise_flags: np.ndarray
    chol: np.ndarray

    def __post_init__(self):
        for name in ("Z", "Y", "inv_cov", "alpha", "noise_flags", "chol"):
            getattr(self, name).setflags(write=False)

    @classmethod
    def build(cls, Z, Y, psi: Hyperparameters, noise_flags=None) -> "GPModel":
        """Batch construction: factorize ``Sigma_Y`` and form its inverse."""
        Z = np.array(np.atleast_2d(Z), dtype=float)
        Y = np.array(Y, dtype=float).reshape(-1)
        if Z.shape[0] != Y.shape[0]:
            raise DimensionMismatch("Z and Y row counts differ")
        if Z.shape[1] != psi.n_z:
            raise DimensionMismatch(f"Z has {Z.shape[1]} columns, hyperparameters expect {psi.n_z}")
        flags = np.ones(Z.shape[0], dtype=bool) if noise_flags is None else np.array(noise_flags, dtype=bool)
        S = training_covariance(Z, psi, flags)
        L = cholesky(S)
        inv_cov = scipy.linalg.cho_solve((L, True), np.eye(Z.shape[0]))
        inv_cov = 0.5 * (inv_cov + inv_cov.T)
        alpha = scipy.linalg.cho_solve((L, True), Y)
        return cls(Z, Y, psi, inv_cov, alpha, flags, L)

    @property
    def n(self) -> int:
        return self.Y.shape[0]

    @cached_property
    def beta(self) -> np.ndarray:
        """Whitened targets ``L^-1 Y``; the posterior mean is ``(L^-1 k)^T beta``.

        Unlike ``alpha`` this vector stays bounded when noiseless points make
        ``Sigma_Y`` nearly singular, so interpolation at conditioned inputs
        keeps its accuracy.
        """
        b = scipy.linalg.solve_triangular(self.chol, self.Y, lower=True, check_finite=False)
        b.setflags(write=False)
        return b

    def to_dict(self) -> dict:
        return {
            "Z": self.Z.tolist(),
            "Y": self.Y.tolist(),
            "psi": self.psi.to_dict(),
            "noise_flags": self.noise_flags.astype(bool).tolist(),
        }

    @classmethod
    def from_dict(cls, d) -> "GPModel":
        return cls.build(d["Z"], d["Y"], Hyperparameters.from_dict(d["psi"]), d["noise_flags"])


def neg_log_marginal_likelihood(psi: Hyperparameters, Z, Y) -> float:
    """``0.5 log det Sigma_Y + 0.5 Y^T Sigma_Y^-1 Y`` (constant term dropped)."""
    Y = np.asarray(Y, dtype=float).reshape(-1)
    S = training_covariance(Z, psi)
    L = cholesky(S)
    w = scipy.linalg.solve_triangular(L, Y, lower=True)
    return float(np.sum(np.log(np.diag(L))) + 0.5 * w @ w)


# ---------------------------------------------------------------------------
# hyperparameter fitting
# ---------------------------------------------------------------------------

@dataclass
class RestartRecord:
    start: np.ndarray
    final: np.ndarray
    nll: float
    n_iter: int
    hit_cap: bool


@dataclass
class FitReport:
    restarts: list = field(default_factory=list)
    best_index: int = -1
    nll: float = math.inf
    grad_inf_norm: float = math.nan
    hit_cap: bool = False
    heuristic_nll: float = math.inf


def _heuristic_start(Z, Y) -> np.ndarray:
    span = np.ptp(Z, axis=0)
    span = np.where(span > 0.0, span, 1.0)
    sd = float(np.std(Y))
    sd = sd if sd > 0.0 else 1.0
    v = np.concatenate([[math.log(sd)], np.log(span), [math.log(0.1 * sd)]])
    return np.clip(v, *LOG_BOUNDS)


class _NLLObjective:
    """Log-space objective with the pairwise squared differences cached.

    Evaluates the same quantity as :func:`neg_log_marginal_likelihood` but
    avoids rebuilding the distance tensor on every simplex step.
    """

    def __init__(self, Z, Y):
        self.Z = Z
        self.Y = Y
        self.D2 = -0.5 * (Z[:, None, :] - Z[None, :, :]) ** 2
        self.eye = np.eye(Z.shape[0])

    def __call__(self, v):
        v = np.asarray(v, dtype=float)
        S = math.exp(2.0 * v[0]) * np.exp(self.D2 @ np.exp(-2.0 * v[1:-1]))
        S += math.exp(2.0 * v[-1]) * self.eye
        try:
            L = np.linalg.cholesky(S)
        except np.linalg.LinAlgError:
            try:
                L = cholesky(S)
            except NotPositiveDefinite:
                return 1e10
        w = scipy.linalg.solve_triangular(L, self.Y, lower=True, check_finite=False)
        val = float(np.sum(np.log(np.diag(L))) + 0.5 * w @ w)
        return val if math.isfinite(val) else 1e10


def _objective(v, Z, Y):
    return _NLLObjective(Z, Y)(v)


def projected_fd_gradient(v, Z, Y, h=1e-5) -> np.ndarray:
    """Central finite-difference gradient, zeroing components pushing out of the box."""
    v = np.asarray(v, dtype=float)
    g = np.zeros_like(v)
    lo, hi = LOG_BOUNDS
    for i in range(v.size):
        e = np.zeros_like(v)
        e[i] = h
        up = np.minimum(v + e, hi)
        dn = np.maximum(v - e, lo)
        g[i] = (_objective(up, Z, Y) - _objective(dn, Z, Y)) / (up[i] - dn[i])
        if (v[i] >= hi - 1e-9 and g[i] < 0.0) or (v[i] <= lo + 1e-9 and g[i] > 0.0):
            g[i] = 0.0
    return g


def fit_hyperparameters_with_report(Z, Y, restarts: int, rng: RngStream, maxiter: int = 4000):
    """Maximum-likelihood hyperparameters and a record of every restart.

    Each restart runs a bounded Nelder-Mead simplex in log-space. The first
    start is the data heuristic (length-scales at the input span, magnitude
    at the target standard deviation, noise at a tenth of it); later starts
    perturb it with unit log-normal noise. Converged simplices are restarted
    from their own optimum until they stop improving, which guards against
    the premature collapse Nelder-Mead is known for. The best restart is
    finally polished with tight simplex tolerances.
    """
    Z = np.atleast_2d(np.asarray(Z, dtype=float))
    Y = np.asarray(Y, dtype=float).reshape(-1)
    if restarts < 1:
        raise ValueError("restarts must be >= 1")
    base = _heuristic_start(Z, Y)
    objective = _NLLObjective(Z, Y)
    report = FitReport(heuristic_nll=objective(base))
    bounds = [LOG_BOUNDS] * base.size
    opts = {"maxiter": maxiter, "xatol": 1e-5, "fatol": 1e-8, "adaptive": True}
    for r in range(restarts):
        start = base if r == 0 else np.clip(base + rng.standard_normal(base.size), *LOG_BOUNDS)
        x, nll, nit, hit_cap = start, objective(start), 0, False
        for _ in range(4):
            res = minimize(objective, x, method="Nelder-Mead", bounds=bounds, options=opts)
            nit += int(res.nit)
            hit_cap = res.nit >= maxiter
            improved = res.fun < nll - 1e-12
            if res.fun <= nll:
                x, nll = np.asarray(res.x), float(res.fun)
            if not improved or hit_cap:
                break
        report.restarts.append(RestartRecord(start, x, nll, nit, hit_cap))
    finite = [i for i, rec in enumerate(report.restarts) if rec.nll < 1e10]
    if not finite:
        raise AllRestartsFailed("every hyperparameter restart diverged")
    best = min(finite, key=lambda i: report.restarts[i].nll)
    rec = report.restarts[best]
    # tight polish of the winner only; the restarts use loose tolerances
    polish = minimize(objective, rec.final, method="Nelder-Mead", bounds=bounds,
                      options={"maxiter": maxiter, "xatol": 1e-8, "fatol": 1e-11, "adaptive": True})
    final, nll = rec.final, rec.nll
    if polish.fun <= nll:
        final, nll = np.asarray(polish.x), float(polish.fun)
    report.best_index = best
    report.nll = nll
    report.hit_cap = rec.hit_cap or polish.nit >= maxiter
    report.grad_inf_norm = float(np.max(np.abs(projected_fd_gradient(final, Z, Y))))
    return Hyperparameters.from_vector(final), report


def fit_hyperparameters(Z, Y, restarts: int, rng: RngStream) -> Hyperparameters:
    """Maximum-likelihood hyperparameters (see :func:`fit_hyperparameters_with_report`)."""
    return fit_hyperparameters_with_report(Z, Y, restarts, rng)[0]


# ---------------------------------------------------------------------------
# prediction and recursive conditioning
# ---------------------------------------------------------------------------

def posterior(gp: GPModel, z):
    """Posterior mean and latent variance of ``f(z)``."""
    z = np.asarray(z, dtype=float).reshape(-1)
    if z.shape[0] != gp.psi.n_z:
        raise DimensionMismatch(f"query has dimension {z.shape[0]}, model expects {gp.psi.n_z}")
    k = kernel_matrix(z[None, :], gp.Z, gp.psi)[0]
    zeta2 = gp.psi.zeta**2
    w = scipy.linalg.solve_triangular(gp.chol, k, lower=True, check_finite=False)
    mean = float(w @ gp.beta)
    var = zeta2 - float(w @ w)
    return mean, min(max(var, 0.0), zeta2)


def posterior_batch(gp: GPModel, Zq):
    """Vectorized :func:`posterior` over the rows of ``Zq``."""
    Zq = np.atleast_2d(np.asarray(Zq, dtype=float))
    K = kernel_matrix(Zq, gp.Z, gp.psi)
    zeta2 = gp.psi.zeta**2
    W = scipy.linalg.solve_triangular(gp.chol, K.T, lower=True, check_finite=False)
    mean = W.T @ gp.beta
    var = zeta2 - np.einsum("ij,ij->j", W, W)
    return mean, np.clip(var, 0.0, zeta2)


def block_inverse_update(inv_cov, k_new, kappa: float) -> np.ndarray:
    """Inverse of ``[[S, k], [k^T, kappa]]`` given ``S^-1``.

    Raises
    ------
    SingularUpdate
        When the Schur complement ``kappa - k^T S^-1 k`` is at most 1e-12.
    """
    inv_cov = np.asarray(inv_cov, dtype=float)
    k_new = np.asarray(k_new, dtype=float).reshape(-1)
    n = k_new.shape[0]
    if inv_cov.shape != (n, n):
        raise DimensionMismatch("inverse covariance and border vector disagree")
    v = inv_cov @ k_new
    return _bordered_inverse(inv_cov, v, float(kappa) - float(k_new @ v))


def _bordered_inverse(inv_cov, v, schur: float) -> np.ndarray:
    # v = S^-1 k and schur = kappa - k^T v
    if not schur > SCHUR_FLOOR:
        raise SingularUpdate(f"Schur complement {schur:.3e} is not positive")
    n = v.shape[0]
    out = np.empty((n + 1, n + 1))
    out[:n, :n] = inv_cov + np.outer(v, v) / schur
    out[:n, n] = -v / schur
    out[n, :n] = out[:n, n]
    out[n, n] = 1.0 / schur
    return out


def condition(gp: GPModel, z_new, y_new: float, noiseless: bool) -> GPModel:
    """Absorb one observation; hyperparameters are left untouched."""
    z_new = np.asarray(z_new, dtype=float).reshape(-1)
    if z_new.shape[0] != gp.psi.n_z:
        raise DimensionMismatch(f"new input has dimension {z_new.shape[0]}, model expects {gp.psi.n_z}")
    k_new = kernel_matrix(z_new[None, :], gp.Z, gp.psi)[0]
    kappa = gp.psi.zeta**2 + (0.0 if noiseless else gp.psi.sigma_nu**2)
    # v and the Schur complement come from the Cholesky factor; the explicit
    # inverse alone loses them to cancellation when Sigma_Y is ill-conditioned
    l = scipy.linalg.solve_triangular(gp.chol, k_new, lower=True, check_finite=False)
    schur = kappa - float(l @ l)
    v = scipy.linalg.solve_triangular(gp.chol, l, lower=True, trans="T", check_finite=False)
    inv_cov = _bordered_inverse(gp.inv_cov, v, schur)
    n = gp.n
    L = np.zeros((n + 1, n + 1))
    L[:n, :n] = gp.chol
    L[n, :n] = l
    L[n, n] = math.sqrt(schur)
    Y = np.append(gp.Y, float(y_new))
    return GPModel(
        np.vstack([gp.Z, z_new]),
        Y,
        gp.psi,
        inv_cov,
        scipy.linalg.cho_solve((L, True), Y, check_finite=False),
        np.append(gp.noise_flags, not noiseless),
        L,
    )
