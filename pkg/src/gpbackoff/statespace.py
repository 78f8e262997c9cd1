"""Multi-output GP state-space model and exact closed-loop trajectory sampling.

One independent GP per state dimension maps the joint input ``z = (x, u)``
to the next state. Inputs and targets are normalized internally; every public
function takes and returns physical units.
"""

from __future__ import annotations

import csv
import hashlib
from dataclasses import dataclass
from functools import cached_property
from typing import Callable, Sequence

import numpy as np

from . import gp as gpc
from .errors import AllRestartsFailed, DimensionMismatch
from .numerics import RngStream, sample_gaussian

Policy = Callable[[np.ndarray, int], np.ndarray]


@dataclass(frozen=True, eq=False)
class Scaler:
    mean: np.ndarray
    std: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "mean", np.array(self.mean, dtype=float).reshape(-1))
        object.__setattr__(self, "std", np.array(self.std, dtype=float).reshape(-1))
        self.mean.setflags(write=False)
        self.std.setflags(write=False)

    @classmethod
    def fit(cls, data) -> "Scaler":
        data = np.atleast_2d(np.asarray(data, dtype=float))
        std = data.std(axis=0)
        return cls(data.mean(axis=0), np.where(std > 0.0, std, 1.0))

    def transform(self, v):
        return (np.asarray(v, dtype=float) - self.mean) / self.std

    def inverse(self, v):
        return np.asarray(v, dtype=float) * self.std + self.mean

    def to_dict(self):
        return {"mean": self.mean.tolist(), "std": self.std.tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(d["mean"], d["std"])


@dataclass(frozen=True, eq=False)
class GPStateSpace:
    """Independent per-state GPs sharing one normalized input matrix."""

    gps: tuple
    sigma_omega: np.ndarray
    z_scaler: Scaler
    y_scaler: Scaler

    def __post_init__(self):
        object.__setattr__(self, "gps", tuple(self.gps))
        so = np.array(self.sigma_omega, dtype=float)
        so = np.diag(so) if so.ndim == 2 else so.reshape(-1)
        so.setflags(write=False)
        object.__setattr__(self, "sigma_omega", so)
        n = {g.n for g in self.gps}
        if len(n) != 1:
            raise DimensionMismatch("all output GPs must share the same training inputs")
        if so.shape[0] != len(self.gps):
            raise DimensionMismatch("disturbance covariance must have one entry per state")

    @property
    def n_x(self) -> int:
        return len(self.gps)

    @property
    def n_z(self) -> int:
        return self.gps[0].psi.n_z

    @property
    def n_u(self) -> int:
        return self.n_z - self.n_x

    @property
    def n_data(self) -> int:
        return self.gps[0].n

    @cached_property
    def mean_params(self):
        """Arrays for the compiled mean rollout.

        Returns ``(Zn, W, A)``: the shared normalized inputs ``(N, n_z)``,
        inverse squared length-scales ``(n_x, n_z)`` and kernel-weighted
        coefficients ``zeta^2 * alpha`` of shape ``(n_x, N)``.
        """
        Zn = np.ascontiguousarray(self.gps[0].Z)
        W = np.array([1.0 / g.psi.lengthscales**2 for g in self.gps])
        A = np.array([g.psi.zeta**2 * g.alpha for g in self.gps])
        return Zn, W, A

    @property
    def sigma_omega_normalized(self) -> np.ndarray:
        return self.sigma_omega / self.y_scaler.std**2

    def digest(self) -> str:
        """Content hash of everything that defines the model."""
        h = hashlib.sha256()
        for g in self.gps:
            for arr in (g.Z, g.Y, g.psi.to_vector(), g.inv_cov, g.noise_flags):
                h.update(np.ascontiguousarray(arr).tobytes())
        for arr in (self.sigma_omega, self.z_scaler.mean, self.z_scaler.std, self.y_scaler.mean, self.y_scaler.std):
            h.update(arr.tobytes())
        return h.hexdigest()

    def to_dict(self) -> dict:
        return {
            "sigma_omega": self.sigma_omega.tolist(),
            "z_scaler": self.z_scaler.to_dict(),
            "y_scaler": self.y_scaler.to_dict(),
            "gps": [g.to_dict() for g in self.gps],
        }

    @classmethod
    def from_dict(cls, d) -> "GPStateSpace":
        return cls(
            [gpc.GPModel.from_dict(g) for g in d["gps"]],
            d["sigma_omega"],
            Scaler.from_dict(d["z_scaler"]),
            Scaler.from_dict(d["y_scaler"]),
        )


@dataclass
class Trajectory:
    states: np.ndarray
    controls: np.ndarray
    sample_id: int = 0

    @property
    def T(self) -> int:
        return self.controls.shape[0]


def fit_state_space(Z_raw, Y_raw, sigma_omega, restarts: int, rng: RngStream, return_reports: bool = False):
    """Normalize the data and fit one GP per output column."""
    Z_raw = np.atleast_2d(np.asarray(Z_raw, dtype=float))
    Y_raw = np.atleast_2d(np.asarray(Y_raw, dtype=float))
    if Z_raw.shape[0] != Y_raw.shape[0]:
        raise DimensionMismatch("Z and Y must have the same number of rows")
    z_scaler = Scaler.fit(Z_raw)
    y_scaler = Scaler.fit(Y_raw)
    Zn = z_scaler.transform(Z_raw)
    Yn = y_scaler.transform(Y_raw)
    gps, reports = [], []
    for i in range(Y_raw.shape[1]):
        try:
            psi, rep = gpc.fit_hyperparameters_with_report(Zn, Yn[:, i], restarts, rng)
        except AllRestartsFailed as exc:
            raise AllRestartsFailed(f"output {i}: {exc}", output_index=i) from exc
        gps.append(gpc.GPModel.build(Zn, Yn[:, i], psi))
        reports.append(rep)
    model = GPStateSpace(gps, sigma_omega, z_scaler, y_scaler)
    return (model, reports) if return_reports else model


def _joint_input(gpss: GPStateSpace, x, u) -> np.ndarray:
    x = np.asarray(x, dtype=float).reshape(-1)
    u = np.asarray(u, dtype=float).reshape(-1)
    if x.shape[0] != gpss.n_x or u.shape[0] != gpss.n_u:
        raise DimensionMismatch(f"expected x of length {gpss.n_x} and u of length {gpss.n_u}")
    return gpss.z_scaler.transform(np.concatenate([x, u]))


def predict_normalized(gpss: GPStateSpace, x, u):
    """Normalized mean and latent (disturbance-free) variance per output."""
    zn = _joint_input(gpss, x, u)
    out = np.array([gpc.posterior(g, zn) for g in gpss.gps])
    return out[:, 0], out[:, 1]


def predict(gpss: GPStateSpace, x, u):
    """Physical-unit predictive mean and variance diagonal (disturbance included)."""
    mean_n, var_n = predict_normalized(gpss, x, u)
    std = gpss.y_scaler.std
    return gpss.y_scaler.inverse(mean_n), var_n * std**2 + gpss.sigma_omega


def condition_all(gpss: GPStateSpace, z_new, x_next, noiseless: bool) -> GPStateSpace:
    """Condition every output GP on ``(x, u) -> x_next``; scalers stay fixed."""
    x, u = z_new
    zn = _joint_input(gpss, x, u)
    yn = gpss.y_scaler.transform(np.asarray(x_next, dtype=float).reshape(-1))
    gps = [gpc.condition(g, zn, yn[i], noiseless) for i, g in enumerate(gpss.gps)]
    return GPStateSpace(gps, gpss.sigma_omega, gpss.z_scaler, gpss.y_scaler)


def sample_trajectory(
    gpss: GPStateSpace,
    policy: Policy,
    x0_mean,
    x0_cov,
    T: int,
    rng: RngStream,
    force_mean: bool = False,
    return_model: bool = False,
):
    """One exact closed-loop realization of the GP plant distribution.

    After each draw the working copy of the model is conditioned on the drawn
    state as a noiseless observation, so the sampled function stays
    deterministic at every visited input. ``gpss`` itself is never modified.
    With ``force_mean`` every draw is replaced by its mean (the random stream
    is still consumed so both modes stay aligned).
    """
    x0_mean = np.asarray(x0_mean, dtype=float).reshape(-1)
    chi = sample_gaussian(x0_mean, x0_cov, rng)
    if force_mean:
        chi = x0_mean.copy()
    states = [chi]
    controls = []
    work = gpss
    for t in range(1, T + 1):
        u = np.asarray(policy(chi, t - 1), dtype=float).reshape(-1)
        mean, var = predict(work, chi, u)
        eps = rng.standard_normal(gpss.n_x)
        chi_next = mean if force_mean else mean + np.sqrt(var) * eps
        work = condition_all(work, (chi, u), chi_next, noiseless=True)
        controls.append(u)
        states.append(chi_next)
        chi = chi_next
    traj = Trajectory(np.array(states), np.array(controls), sample_id=rng.stream_id)
    return (traj, work) if return_model else traj


def nominal_trajectory(gpss: GPStateSpace, policy: Policy, x0_mean, T: int, condition_on_means: bool = False):
    """Rollout with every random quantity replaced by its mean.

    ``condition_on_means`` additionally conditions the model on each mean
    prediction, which must not change the result.
    """
    chi = np.asarray(x0_mean, dtype=float).reshape(-1).copy()
    states, controls = [chi], []
    work = gpss
    for t in range(1, T + 1):
        u = np.asarray(policy(chi, t - 1), dtype=float).reshape(-1)
        mean, _ = predict(work, chi, u)
        if condition_on_means:
            work = condition_all(work, (chi, u), mean, noiseless=True)
        controls.append(u)
        states.append(mean)
        chi = mean
    return Trajectory(np.array(states), np.array(controls), sample_id=-1)


def write_trajectories_csv(path, trajectories: Sequence[Trajectory]):
    """CSV with columns ``sample_id, t, x_1..x_nx, u_1..u_nu`` (controls blank at t=T)."""
    trajectories = list(trajectories)
    n_x = trajectories[0].states.shape[1] if trajectories else 0
    n_u = trajectories[0].controls.shape[1] if trajectories else 0
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["sample_id", "t"] + [f"x_{i + 1}" for i in range(n_x)] + [f"u_{i + 1}" for i in range(n_u)])
        for tr in trajectories:
            for t in range(tr.states.shape[0]):
                u = [repr(float(v)) for v in tr.controls[t]] if t < tr.T else [""] * n_u
                w.writerow([tr.sample_id, t] + [repr(float(v)) for v in tr.states[t]] + u)


def read_trajectories_csv(path) -> list:
    rows = {}
    with open(path, newline="") as fh:
        r = csv.DictReader(fh)
        xs = [c for c in r.fieldnames if c.startswith("x_")]
        us = [c for c in r.fieldnames if c.startswith("u_")]
        for row in r:
            sid = int(row["sample_id"])
            rows.setdefault(sid, []).append(row)
    out = []
    for sid, rs in rows.items():
        rs.sort(key=lambda row: int(row["t"]))
        states = np.array([[float(row[c]) for c in xs] for row in rs])
        controls = np.array([[float(row[c]) for c in us] for row in rs if row[us[0]] != ""])
        out.append(Trajectory(states, controls, sid))
    return out
