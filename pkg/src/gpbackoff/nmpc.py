"""Shrinking-horizon NMPC on the GP mean with back-off tightened constraints.

The optimal control problem is transcribed by single shooting over the
remaining controls. State constraints are handled by an augmented-Lagrangian
outer loop; each inner problem is a bound-constrained quasi-Newton solve
(L-BFGS-B) in box-scaled control units, fed with exact gradients obtained by
forward sensitivity propagation through the GP mean.
"""

from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import solve_triangular
from scipy.optimize import minimize

from . import gp as gpc
from ._kernels import rollout_mean as _rollout_mean_kernel
from ._kernels import ocp_terms
from .errors import NonFinite, PolicyFailure, SingularUpdate, SolverDiverged
from .statespace import GPStateSpace, condition_all, predict_normalized

log = logging.getLogger(__name__)


@dataclass(frozen=True, eq=False)
class AffineConstraintSet:
    """Constraints ``g_j(x) = C[j] @ x - d[j] <= 0``.

    Rows flagged ``terminal_only`` are evaluated at the final time only and
    are identically zero before it.
    """

    C: np.ndarray
    d: np.ndarray
    terminal_only: tuple
    scales: np.ndarray
    names: tuple = ()

    def __post_init__(self):
        object.__setattr__(self, "C", np.atleast_2d(np.asarray(self.C, dtype=float)))
        object.__setattr__(self, "d", np.asarray(self.d, dtype=float).reshape(-1))
        object.__setattr__(self, "scales", np.asarray(self.scales, dtype=float).reshape(-1))
        object.__setattr__(self, "terminal_only", tuple(bool(v) for v in self.terminal_only))

    @property
    def n_g(self) -> int:
        return self.C.shape[0]

    def active(self, tau: int, T: int) -> np.ndarray:
        return np.array([(not term) or tau == T for term in self.terminal_only])

    def evaluate(self, states, T: int | None = None) -> np.ndarray:
        """``g_j^(t)`` for every row of ``states``, shape ``(len(states), n_g)``."""
        X = np.atleast_2d(np.asarray(states, dtype=float))
        T = X.shape[0] - 1 if T is None else T
        g = X @ self.C.T - self.d
        for tau in range(X.shape[0]):
            g[tau, ~self.active(tau, T)] = 0.0
        return g


CASE_STUDY_CONSTRAINTS = AffineConstraintSet(
    C=[[0.0, 1.0, 0.0], [-0.011, 0.0, 1.0], [0.0, 1.0, 0.0]],
    d=[800.0, 0.0, 150.0],
    terminal_only=(False, False, True),
    scales=[800.0, 0.011 * 20.0, 150.0],
    names=("nitrate_max", "product_ratio", "nitrate_terminal"),
)


@dataclass(frozen=True)
class SolverOptions:
    rho0: float = 10.0
    rho_growth: float = 5.0
    tol: float = 1e-6
    max_outer: int = 12
    max_inner: int = 200
    inner_ftol: float = 1e-10
    inner_gtol: float = 1e-6


@dataclass(frozen=True, eq=False)
class OCPSpec:
    """Horizon, costs, control box and constraint set of the optimal control problem.

    ``eta[k]`` weights the trace of the normalized predictive covariance of
    the ``(k+1)``-step-ahead prediction; missing entries are zero.
    ``terminal_weight`` defines the linear terminal cost ``w @ x_T``.
    """

    T: int = 12
    R: tuple = (3.125e-8, 3.125e-6)
    eta: tuple = ()
    u_lower: tuple = (120.0, 0.0)
    u_upper: tuple = (400.0, 40.0)
    terminal_weight: tuple = (0.0, 0.0, -1.0)
    constraints: AffineConstraintSet = CASE_STUDY_CONSTRAINTS
    solver: SolverOptions = SolverOptions()

    def __post_init__(self):
        if any(r < 0.0 for r in self.R):
            raise ValueError("R must have nonnegative diagonal entries")
        if any(lo >= hi for lo, hi in zip(self.u_lower, self.u_upper)):
            raise ValueError("control lower bounds must be below upper bounds")

    @property
    def n_u(self) -> int:
        return len(self.u_lower)

    def eta_at(self, offset: int) -> float:
        return float(self.eta[offset]) if offset < len(self.eta) else 0.0


@dataclass
class Rollout:
    states: np.ndarray  # (H+1, n_x), row 0 is the measured state
    var_traces: np.ndarray  # (H,), trace of normalized predictive covariance at z_k


def rollout_mean(gpss: GPStateSpace, x_t, U, t: int | None = None) -> Rollout:
    """Deterministic GP-mean rollout from ``x_t`` under controls ``U``."""
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    U = np.atleast_2d(np.asarray(U, dtype=float))
    zs, ys = gpss.z_scaler, gpss.y_scaler
    Zn, W, A = gpss.mean_params
    X = _rollout_mean_kernel(x_t, U, zs.mean, zs.std, ys.mean, ys.std, Zn, W, A)
    if not np.all(np.isfinite(X)):
        raise NonFinite("GP mean rollout diverged")
    so = float(np.sum(gpss.sigma_omega_normalized))
    traces = np.array([float(np.sum(predict_normalized(gpss, X[k], U[k])[1])) + so for k in range(U.shape[0])])
    return Rollout(X, traces)


def ocp_objective(rollout: Rollout, U, prev_u, spec: OCPSpec) -> float:
    """Control-move penalty, variance penalty and terminal cost."""
    U = np.atleast_2d(np.asarray(U, dtype=float))
    R = np.asarray(spec.R, dtype=float)
    dU = np.diff(U, axis=0)
    val = float(np.sum(dU * dU * R))
    if prev_u is not None:
        d0 = U[0] - np.asarray(prev_u, dtype=float)
        val += float(np.sum(d0 * d0 * R))
    for k in range(U.shape[0]):
        eta = spec.eta_at(k)
        if eta:
            val += eta * float(rollout.var_traces[k])
    return val + float(np.asarray(spec.terminal_weight) @ rollout.states[-1])


# ---------------------------------------------------------------------------
# the optimal control problem
# ---------------------------------------------------------------------------

class _Problem:
    """Objective and tightened constraints as functions of box-scaled controls."""

    def __init__(self, gpss: GPStateSpace, spec: OCPSpec, x_t, t: int, backoffs, prev_u):
        self.gpss = gpss
        self.spec = spec
        self.x_t = np.asarray(x_t, dtype=float).reshape(-1)
        self.t = t
        self.H = spec.T - t
        self.nu = spec.n_u
        self.lo = np.asarray(spec.u_lower, dtype=float)
        self.span = np.asarray(spec.u_upper, dtype=float) - self.lo
        self.R = np.asarray(spec.R, dtype=float)
        self.prev_u = None if prev_u is None else np.asarray(prev_u, dtype=float)
        self.w_term = np.asarray(spec.terminal_weight, dtype=float)
        self._has_prev = self.prev_u is not None
        self._prev = self.prev_u if self._has_prev else np.zeros(self.nu)
        cs = spec.constraints
        b = np.zeros((spec.T + 1, cs.n_g)) if backoffs is None else np.asarray(backoffs, dtype=float)
        rows = []
        for k in range(1, self.H + 1):
            tau = t + k
            for j in np.flatnonzero(cs.active(tau, spec.T)):
                rows.append((k, j, b[tau, j]))
        self.c_step = np.array([r[0] for r in rows], dtype=int)
        self.c_j = np.array([r[1] for r in rows], dtype=int)
        self.c_off = np.array([(-cs.d[r[1]] + r[2]) / cs.scales[r[1]] for r in rows])
        self.c_row = np.ascontiguousarray(cs.C[self.c_j] / cs.scales[self.c_j][:, None]) if rows else np.zeros((0, gpss.n_x))
        self.eta = np.array([spec.eta_at(k) for k in range(self.H)])
        zs, ys = gpss.z_scaler, gpss.y_scaler
        self._args = (zs.mean, zs.std, ys.mean, ys.std) + tuple(gpss.mean_params)

    def controls(self, s):
        return self.lo + self.span * np.asarray(s).reshape(self.H, self.nu)

    def _variance_penalty(self, X, U, S):
        # sum_k eta_k * tr(normalized latent covariance at z_k) and its gradient in U
        val = 0.0
        grad = np.zeros(self.H * self.nu)
        nx = self.gpss.n_x
        zs = self.gpss.z_scaler
        for k in np.flatnonzero(self.eta):
            zn = zs.transform(np.concatenate([X[k], U[k]]))
            dz = np.zeros((zn.size, self.H * self.nu))
            dz[:nx] = S[k]
            dz[nx:, k * self.nu:(k + 1) * self.nu] = np.eye(self.nu)
            dz /= zs.std[:, None]
            for g in self.gpss.gps:
                kv = gpc.kernel_matrix(zn[None, :], g.Z, g.psi)[0]
                w = solve_triangular(g.chol, kv, lower=True, check_finite=False)
                Mk = solve_triangular(g.chol, w, lower=True, trans="T", check_finite=False)
                var = g.psi.zeta**2 - float(w @ w)
                dk = kv[:, None] * (-(zn[None, :] - g.Z) / g.psi.lengthscales**2)
                val += self.eta[k] * var
                grad += self.eta[k] * (-2.0 * (Mk @ dk)) @ dz
            val += self.eta[k] * float(np.sum(self.gpss.sigma_omega_normalized))
        return val, grad

    def evaluate(self, s):
        """Objective, gradient, scaled constraint values and Jacobian (w.r.t. ``s``)."""
        f, g, c, Jc, U, X, S = ocp_terms(
            self.x_t, np.asarray(s, dtype=float), self.lo, self.span, self.R, self._prev, self._has_prev,
            self.w_term, self.c_step, self.c_row, self.c_off, *self._args)
        if self.eta.any():
            vp, vg = self._variance_penalty(X, U, S)
            f += vp
            g = g + vg * np.tile(self.span, self.H)
        return f, g, c, Jc, U, X


@dataclass
class OCPResult:
    U: np.ndarray
    s: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    outer_iterations: int
    converged: bool
    max_iterations_hit: bool
    states: np.ndarray
    merit_history: list = field(default_factory=list)
    wall_time: float = 0.0


def solve_ocp(gpss: GPStateSpace, spec: OCPSpec, x_t, t: int, backoffs=None, prev_u=None, warm_start=None) -> OCPResult:
    """Solve the tightened OCP at time ``t`` from the measured state ``x_t``.

    ``warm_start`` is a box-scaled control sequence (values in [0, 1]) for the
    remaining horizon. Returns the best feasible iterate seen (lowest
    objective), or the least infeasible one when none is feasible.
    """
    t0 = time.perf_counter()
    if not (0 <= t < spec.T):
        raise ValueError(f"t must lie in [0, {spec.T}), got {t}")
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    if not np.all(np.isfinite(x_t)):
        raise SolverDiverged("non-finite initial state")
    prob = _Problem(gpss, spec, x_t, t, backoffs, prev_u)
    opt = spec.solver
    m = prob.H * prob.nu
    s = np.full(m, 0.5) if warm_start is None else np.clip(np.asarray(warm_start, dtype=float).reshape(-1), 0.0, 1.0)
    if s.size != m:
        raise ValueError(f"warm start has {s.size} entries, expected {m}")
    lam = np.zeros(prob.c_off.size)
    rho = opt.rho0

    def merit(sv):
        f, gf, c, Jc, _, _ = prob.evaluate(sv)
        shifted = np.maximum(0.0, lam + rho * c)
        val = f + float(np.sum(shifted**2 - lam**2)) / (2.0 * rho)
        if not math.isfinite(val):
            raise SolverDiverged("non-finite augmented Lagrangian")
        return val, gf + shifted @ Jc

    best = None
    history = []
    iterations = 0
    cap_hit = False
    prev_viol = math.inf
    converged = False
    outer = 0
    for outer in range(1, opt.max_outer + 1):
        start_val = merit(s)[0]
        res = minimize(merit, s, jac=True, method="L-BFGS-B", bounds=[(0.0, 1.0)] * m,
                       options={"maxiter": opt.max_inner, "ftol": opt.inner_ftol, "gtol": opt.inner_gtol})
        iterations += int(res.nit)
        cap_hit = cap_hit or res.nit >= opt.max_inner
        s_new = np.clip(res.x, 0.0, 1.0)
        end_val = merit(s_new)[0]
        if end_val > start_val:
            # L-BFGS-B may terminate on a worse point after a failed line search
            s_new, end_val = s, start_val
        history.append((start_val, end_val))
        s = s_new
        f, _, c, _, U, X = prob.evaluate(s)
        if not math.isfinite(f):
            raise SolverDiverged("non-finite objective")
        viol = float(max(0.0, c.max())) if c.size else 0.0
        cand = (viol <= opt.tol, f, viol)
        if best is None or _better(cand, best[0]):
            best = (cand, s.copy(), U, X)
        if viol <= opt.tol:
            converged = True
            break
        lam = np.maximum(0.0, lam + rho * c)
        if viol > 0.25 * prev_viol:
            rho *= opt.rho_growth
        prev_viol = viol
    (feasible, f, viol), s_best, U_best, X_best = best
    if not converged:
        log.debug("OCP at t=%d stopped with violation %.3e", t, viol)
    return OCPResult(U_best, s_best, f, viol, iterations, outer, converged, cap_hit or not converged,
                     X_best, history, time.perf_counter() - t0)


def _better(a, b):
    # a, b = (feasible, objective, violation)
    if a[0] and b[0]:
        return a[1] < b[1]
    if a[0] != b[0]:
        return a[0]
    return a[2] < b[2]


# ---------------------------------------------------------------------------
# feedback policy
# ---------------------------------------------------------------------------

@dataclass
class PolicyState:
    """Mutable per-episode controller state."""

    gpss: GPStateSpace
    spec: OCPSpec
    backoffs: np.ndarray
    learning: bool = False
    prev_u: np.ndarray | None = None
    prev_x: np.ndarray | None = None
    warm: np.ndarray | None = None
    initial_guess: np.ndarray | None = None
    diagnostics: list = field(default_factory=list)


def make_policy_state(gpss, spec: OCPSpec, backoffs=None, learning=False, state_dependent=False,
                      eta0: float = 15.0, initial_guess=None) -> PolicyState:
    """Policy state for one of the four variants (learning x state-dependent)."""
    if state_dependent and not spec.eta:
        spec = OCPSpec(spec.T, spec.R, (eta0,), spec.u_lower, spec.u_upper, spec.terminal_weight,
                       spec.constraints, spec.solver)
    elif not state_dependent and spec.eta:
        spec = OCPSpec(spec.T, spec.R, (), spec.u_lower, spec.u_upper, spec.terminal_weight,
                       spec.constraints, spec.solver)
    if backoffs is None:
        backoffs = np.zeros((spec.T + 1, spec.constraints.n_g))
    return PolicyState(gpss, spec, np.asarray(backoffs, dtype=float), learning,
                       initial_guess=None if initial_guess is None else np.asarray(initial_guess, dtype=float))


def policy_kappa(state: PolicyState, x_t, t: int):
    """Apply the receding-horizon law: solve the OCP and return its first control.

    With learning enabled the model is first conditioned (as a noisy
    observation) on the previous state/control pair and the current state.
    """
    x_t = np.asarray(x_t, dtype=float).reshape(-1)
    spec = state.spec
    if state.learning and t > 0 and state.prev_x is not None:
        try:
            state.gpss = condition_all(state.gpss, (state.prev_x, state.prev_u), x_t, noiseless=False)
        except SingularUpdate as exc:
            raise PolicyFailure(f"online update failed: {exc}", t) from exc
    warm = state.warm
    if warm is None and t == 0 and state.initial_guess is not None:
        warm = state.initial_guess
    if warm is not None and warm.size != (spec.T - t) * spec.n_u:
        warm = None
    try:
        res = solve_ocp(state.gpss, spec, x_t, t, state.backoffs, state.prev_u, warm)
    except (SolverDiverged, NonFinite, FloatingPointError) as exc:
        raise PolicyFailure(str(exc), t) from exc
    u = np.clip(res.U[0], spec.u_lower, spec.u_upper)
    state.diagnostics.append({
        "t": t,
        "iterations": res.iterations,
        "objective": res.objective,
        "max_violation": res.max_violation,
        "wall_time": res.wall_time,
    })
    # shift the scaled solution for the next call
    if res.s.size > spec.n_u:
        state.warm = np.concatenate([res.s[spec.n_u:], res.s[-spec.n_u:]])
    else:
        state.warm = None
    state.prev_u = u
    state.prev_x = x_t
    return u, state


class Controller:
    """Callable ``(x, t) -> u`` around a :class:`PolicyState`."""

    def __init__(self, state: PolicyState):
        self.state = state

    def __call__(self, x, t):
        u, self.state = policy_kappa(self.state, x, t)
        return u


def write_diagnostics_csv(path, diagnostics):
    cols = ["t", "iterations", "objective", "max_violation", "wall_time"]
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=cols)
        w.writeheader()
        for row in diagnostics:
            w.writerow({c: row[c] for c in cols})
