"""Offline constraint tightening from Monte Carlo closed-loop samples.

The back-offs are built in two stages. A first batch of samples without
tightening gives per-constraint empirical quantiles, from which an initial
back-off table ``b_tilde`` is formed. A scalar factor ``gamma`` is then
bisected until the Clopper-Pearson lower confidence bound on the joint
satisfaction probability meets ``1 - epsilon``.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from typing import Callable

import numpy as np

from .errors import DomainError, EmptySample, NonFinite, PolicyFailure, SingularUpdate
from .numerics import RngStream, betainv, ecdf_quantile

log = logging.getLogger(__name__)


# ---------------------------------------------------------------------------
# statistics
# ---------------------------------------------------------------------------

def joint_satisfaction_stat(traj_constraints) -> float:
    """Largest constraint value over all times and constraints.

    The trajectory satisfies every constraint iff the result is ``<= 0``.
    """
    G = np.asarray(traj_constraints, dtype=float)
    if G.size == 0:
        raise EmptySample("no constraint values")
    if not np.all(np.isfinite(G)):
        raise DomainError("constraint values must be finite")
    return float(G.max())


def ecdf_joint(stats) -> float:
    """Fraction of samples with a nonpositive joint statistic."""
    s = np.asarray(stats, dtype=float).reshape(-1)
    if s.size == 0:
        raise EmptySample("ecdf_joint needs at least one sample")
    return float(np.count_nonzero(s <= 0.0)) / s.size


def clopper_lower(beta_hat: float, S: int, alpha: float) -> float:
    """One-sided Clopper-Pearson lower bound ``betainv(alpha, S b, S - S b + 1)``.

    The endpoints use closed forms: zero successes give 0 and ``S`` successes
    give ``alpha ** (1 / S)``.
    """
    if S < 1:
        raise DomainError("S must be positive")
    if not (0.0 < alpha < 1.0):
        raise DomainError("alpha must lie in (0, 1)")
    if not (0.0 <= beta_hat <= 1.0):
        raise DomainError("beta_hat must lie in [0, 1]")
    k = beta_hat * S
    if abs(k - round(k)) > 1e-9:
        raise DomainError(f"S * beta_hat = {k} is not a count")
    k = int(round(k))
    if k == 0:
        return 0.0
    if k == S:
        return alpha ** (1.0 / S)
    return betainv(alpha, k, S - k + 1)


def initial_backoffs(samples, nominal, delta: float) -> np.ndarray:
    """``b_tilde[t, j] = quantile_{1-delta}(g samples) - g(nominal)``, floored at 0.

    ``samples`` has shape ``(S, T+1, n_g)`` and ``nominal`` ``(T+1, n_g)``.
    The first row (measured initial state) is always zero.
    """
    G = np.asarray(samples, dtype=float)
    nom = np.asarray(nominal, dtype=float)
    if G.ndim != 3 or G.shape[1:] != nom.shape:
        raise DomainError("samples must be (S, T+1, n_g) matching the nominal table")
    if not (0.0 < delta < 1.0):
        raise DomainError("delta must lie in (0, 1)")
    bt = np.zeros_like(nom)
    for t in range(1, nom.shape[0]):
        for j in range(nom.shape[1]):
            bt[t, j] = ecdf_quantile(G[:, t, j], 1.0 - delta) - nom[t, j]
    return np.maximum(bt, 0.0)


# ---------------------------------------------------------------------------
# back-off table and report
# ---------------------------------------------------------------------------

@dataclass
class BackoffTable:
    b_tilde: np.ndarray
    gamma: float = 0.0

    def __post_init__(self):
        self.b_tilde = np.asarray(self.b_tilde, dtype=float)
        if self.gamma < 0.0:
            raise DomainError("gamma must be nonnegative")

    @property
    def b(self) -> np.ndarray:
        return self.gamma * self.b_tilde

    @classmethod
    def zeros(cls, T: int, n_g: int) -> "BackoffTable":
        return cls(np.zeros((T + 1, n_g)), 0.0)

    def scaled(self, gamma: float) -> "BackoffTable":
        return BackoffTable(self.b_tilde.copy(), float(gamma))

    def write(self, csv_path, json_path=None, header: dict | None = None):
        """CSV rows ``t, j, b, b_tilde`` (``j`` is 1-based) plus an optional JSON header."""
        b = self.b
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t", "j", "b", "b_tilde"])
            for t in range(b.shape[0]):
                for j in range(b.shape[1]):
                    w.writerow([t, j + 1, repr(float(b[t, j])), repr(float(self.b_tilde[t, j]))])
        if json_path is not None:
            doc = {"gamma": self.gamma}
            doc.update(header or {})
            with open(json_path, "w") as fh:
                json.dump(doc, fh, indent=2, sort_keys=True)

    @classmethod
    def read(cls, csv_path, json_path=None) -> "BackoffTable":
        rows = []
        with open(csv_path, newline="") as fh:
            for row in csv.DictReader(fh):
                rows.append((int(row["t"]), int(row["j"]) - 1, float(row["b"]), float(row["b_tilde"])))
        T = max(r[0] for r in rows)
        n_g = max(r[1] for r in rows) + 1
        bt = np.zeros((T + 1, n_g))
        b = np.zeros((T + 1, n_g))
        for t, j, bv, btv in rows:
            bt[t, j] = btv
            b[t, j] = bv
        if json_path is not None:
            with open(json_path) as fh:
                gamma = float(json.load(fh)["gamma"])
        else:
            nz = bt > 0.0
            gamma = float(np.median(b[nz] / bt[nz])) if nz.any() else 0.0
        return cls(bt, gamma)


@dataclass
class IterationRecord:
    iteration: int
    gamma: float
    beta_hat: float
    beta_lb: float
    h: float
    a_gamma: float
    b_gamma: float
    n_replaced: int
    wall_time: float
    stat_mean: float
    stat_max: float


@dataclass
class BackoffRunReport:
    table: BackoffTable
    records: list = field(default_factory=list)
    converged: bool = False
    no_sign_change: bool = False
    beta_hat: float = math.nan
    beta_lb: float = math.nan
    final_h: float = math.nan
    config: dict = field(default_factory=dict)
    samples: list = field(default_factory=list)

    def header(self) -> dict:
        doc = dict(self.config)
        doc.update({"beta_hat": self.beta_hat, "beta_lb": self.beta_lb, "converged": self.converged,
                    "no_sign_change": self.no_sign_change, "final_h": self.final_h})
        return doc

    def to_dict(self) -> dict:
        doc = self.header()
        doc["gamma"] = self.table.gamma
        doc["b_tilde"] = self.table.b_tilde.tolist()
        doc["iterations"] = [asdict(r) for r in self.records]
        return doc


@dataclass(frozen=True)
class ChanceConfig:
    """Chance-constraint and bisection settings.

    ``gamma_upper`` is the initial upper end of the bisection bracket. With
    ``fresh_samples`` every iteration draws new random streams; otherwise
    each sample index keeps its stream across iterations.
    """

    epsilon: float = 0.1
    alpha: float = 0.01
    delta: float = 0.1
    S: int = 1000
    n_b: int = 16
    gamma_upper: float = 4.0
    fresh_samples: bool = False
    failure_budget: float = 0.05

    def __post_init__(self):
        for name in ("epsilon", "alpha", "delta"):
            v = getattr(self, name)
            if not (0.0 < v < 1.0):
                raise DomainError(f"{name} must lie in (0, 1)")
        if self.S < 1 or self.n_b < 0:
            raise DomainError("S must be positive and n_b nonnegative")
        if self.gamma_upper <= 0.0:
            raise DomainError("gamma_upper must be positive")

    def to_dict(self):
        return asdict(self)


def sample_stream_id(sample: int, iteration: int = 0, attempt: int = 0, fresh: bool = False) -> int:
    """Stream id for one Monte Carlo sample.

    Frozen mode ignores ``iteration`` so the same sample index sees the same
    randomness in every bisection step.
    """
    key = iteration + 1 if fresh else 0
    return (key << 40) | (attempt << 32) | sample


# a simulator maps (back-off matrix, iteration) to constraint samples (S, T+1, n_g)
# and the number of replaced samples
Simulator = Callable[[np.ndarray, int], "tuple[np.ndarray, int]"]


def run_backoff_iterations(simulate: Simulator, nominal: Callable[[np.ndarray], np.ndarray],
                           config: ChanceConfig, keep_samples: bool = False,
                           progress: Callable | None = None) -> BackoffRunReport:
    """Bisection on the back-off factor.

    Iteration 0 runs without back-offs, builds ``b_tilde`` and evaluates
    ``h(0)``. Each of the following ``n_b`` iterations evaluates the bracket
    midpoint and keeps the half whose endpoints disagree in sign (``h >= 0``
    counts as positive). The returned table uses the smallest evaluated
    ``gamma`` with ``h >= 0``; without one, the last evaluated ``gamma``.
    """
    target = 1.0 - config.epsilon
    t0 = time.perf_counter()
    G, n_rep = simulate(None, 0)
    nom = np.asarray(nominal(None), dtype=float)
    b_tilde = initial_backoffs(G, nom, config.delta)
    b_tilde[0] = 0.0
    report = BackoffRunReport(BackoffTable(b_tilde, 0.0), config=config.to_dict())

    def evaluate(G, it, gamma, n_rep, a, b, t_start):
        stats = np.array([joint_satisfaction_stat(g) for g in G])
        bh = ecdf_joint(stats)
        lb = clopper_lower(bh, len(stats), config.alpha)
        rec = IterationRecord(it, gamma, bh, lb, lb - target, a, b, n_rep, time.perf_counter() - t_start,
                              float(stats.mean()), float(stats.max()))
        report.records.append(rec)
        if keep_samples:
            report.samples.append(G)
        if progress is not None:
            progress(rec)
        log.info("iteration %d: gamma=%.5g beta_hat=%.4f beta_lb=%.4f", it, gamma, bh, lb)
        return rec

    a_g, b_g = 0.0, config.gamma_upper
    rec = evaluate(G, 0, 0.0, n_rep, a_g, b_g, t0)
    h_a = rec.h
    if h_a >= 0.0:
        report.no_sign_change = True
        report.beta_hat, report.beta_lb, report.final_h = rec.beta_hat, rec.beta_lb, rec.h
        return report
    for it in range(1, config.n_b + 1):
        t_it = time.perf_counter()
        c_g = 0.5 * (a_g + b_g)
        G, n_rep = simulate(c_g * b_tilde, it)
        rec = evaluate(G, it, c_g, n_rep, a_g, b_g, t_it)
        if (rec.h >= 0.0) == (h_a >= 0.0):
            a_g, h_a = c_g, rec.h
        else:
            b_g = c_g
        rec.a_gamma, rec.b_gamma = a_g, b_g
    feasible = [r for r in report.records[1:] if r.h >= 0.0]
    infeasible = [r for r in report.records if r.h < 0.0]
    chosen = min(feasible, key=lambda r: r.gamma) if feasible else report.records[-1]
    report.table = BackoffTable(b_tilde, chosen.gamma)
    report.converged = bool(feasible and infeasible)
    report.beta_hat, report.beta_lb, report.final_h = chosen.beta_hat, chosen.beta_lb, chosen.h
    return report


# ---------------------------------------------------------------------------
# GP closed-loop sampler for the case study
# ---------------------------------------------------------------------------

@dataclass
class GPSampler:
    """Closed-loop samples of the GP plant distribution under the back-off NMPC.

    Every sample gets its own policy state built from the unconditioned model,
    so learning variants restart from the original data in each sample.
    Samples whose policy fails are redrawn from a replacement stream, up to
    ``failure_budget * S`` replacements per call.
    """

    gpss: object
    spec: object
    x0_mean: np.ndarray
    x0_cov: np.ndarray
    seed: int
    S: int
    learning: bool = False
    state_dependent: bool = False
    eta0: float = 15.0
    fresh_samples: bool = False
    failure_budget: float = 0.05
    workers: int = 1
    warm_start: bool = True

    def _initial_guess(self, backoffs):
        from .nmpc import make_policy_state, solve_ocp

        st = make_policy_state(self.gpss, self.spec, backoffs, self.learning, self.state_dependent, self.eta0)
        return solve_ocp(self.gpss, st.spec, self.x0_mean, 0, st.backoffs).s

    def nominal(self, backoffs=None) -> np.ndarray:
        """Constraint values along the nominal (mean) closed-loop trajectory."""
        from .nmpc import Controller, make_policy_state
        from .statespace import nominal_trajectory

        guess = self._initial_guess(backoffs) if self.warm_start else None
        st = make_policy_state(self.gpss, self.spec, backoffs, self.learning, self.state_dependent, self.eta0, guess)
        tr = nominal_trajectory(self.gpss, Controller(st), self.x0_mean, self.spec.T)
        return self.spec.constraints.evaluate(tr.states, self.spec.T)

    def __call__(self, backoffs, iteration: int):
        guess = self._initial_guess(backoffs) if self.warm_start else None
        jobs = [(self, backoffs, guess, s, iteration) for s in range(self.S)]
        if self.workers > 1:
            with ProcessPoolExecutor(self.workers) as ex:
                results = list(ex.map(_sample_with_retries, jobs, chunksize=max(1, self.S // (4 * self.workers))))
        else:
            results = [_sample_with_retries(j) for j in jobs]
        replaced = sum(r[1] for r in results)
        budget = math.floor(self.failure_budget * self.S)
        if replaced > budget:
            raise PolicyFailure(f"{replaced} failed samples exceed the replacement budget of {budget}")
        return np.array([r[0] for r in results]), replaced

    def trajectories(self, backoffs, iteration: int = 0):
        """Full trajectories (not only constraint values) for reporting."""
        guess = self._initial_guess(backoffs) if self.warm_start else None
        return [_sample_with_retries((self, backoffs, guess, s, iteration), full=True)[0] for s in range(self.S)]


def _sample_with_retries(job, full=False):
    from .nmpc import Controller, make_policy_state
    from .statespace import sample_trajectory

    sampler, backoffs, guess, s, iteration = job
    attempt = 0
    while True:
        rng = RngStream(sampler.seed, sample_stream_id(s, iteration, attempt, sampler.fresh_samples))
        st = make_policy_state(sampler.gpss, sampler.spec, backoffs, sampler.learning, sampler.state_dependent,
                               sampler.eta0, guess)
        try:
            tr = sample_trajectory(sampler.gpss, Controller(st), sampler.x0_mean, sampler.x0_cov, sampler.spec.T, rng)
        except (PolicyFailure, SingularUpdate, NonFinite) as exc:
            attempt += 1
            log.warning("sample %d attempt %d failed: %s", s, attempt, exc)
            if attempt > 255:
                raise
            continue
        if full:
            return tr, attempt
        return sampler.spec.constraints.evaluate(tr.states, sampler.spec.T), attempt
