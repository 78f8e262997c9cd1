"""Semi-batch photobioreactor used as the "real" plant.

States are biomass ``C_X`` (g/L), nitrate ``C_N`` (mg/L) and phycocyanin
``C_qc`` (mg/L); controls are light intensity ``I`` (umol/m^2/s) and nitrate
inflow ``F_N`` (mg/L/h).
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np

from .errors import NonFinite
from .numerics import RngStream, sample_gaussian, sobol

DT = 20.0
SUBSTEPS = 400
STATE_LIMIT = 1e9

TYPE1_LOWER = np.array([0.0, 50.0, 0.0, 120.0, 0.0])
TYPE1_UPPER = np.array([20.0, 800.0, 0.18, 400.0, 40.0])
U_LOWER = np.array([120.0, 0.0])
U_UPPER = np.array([400.0, 40.0])


@dataclass(frozen=True)
class BioreactorParams:
    u_m: float = 0.0572
    u_d: float = 0.0
    K_N: float = 393.1
    Y_NX: float = 504.5
    k_m: float = 0.00016
    k_d: float = 0.281
    k_s: float = 178.9
    k_i: float = 447.1
    k_sq: float = 23.51
    k_iq: float = 800.0
    K_Np: float = 16.89

    def __post_init__(self):
        for k, v in asdict(self).items():
            if v < 0.0:
                raise ValueError(f"parameter {k} must be nonnegative")


@dataclass(frozen=True)
class NoiseSpec:
    sigma_nu_diag: tuple = (4e-4, 0.1, 1e-8)
    sigma_omega_diag: tuple = (4e-4, 0.1, 1e-8)
    x0_mean: tuple = (1.0, 150.0, 0.0)
    x0_cov_diag: tuple = (1e-3, 22.5, 0.0)

    @classmethod
    def zero(cls, x0_mean=(1.0, 150.0, 0.0)) -> "NoiseSpec":
        return cls((0.0, 0.0, 0.0), (0.0, 0.0, 0.0), tuple(x0_mean), (0.0, 0.0, 0.0))

    def to_dict(self):
        return {k: list(v) for k, v in asdict(self).items()}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: tuple(v) for k, v in d.items()})


DEFAULT_PARAMS = BioreactorParams()


def _rhs(cx, cn, cq, I, FN, p):
    cx = max(cx, 0.0)
    cn = max(cn, 0.0)
    cq = max(cq, 0.0)
    light_x = I / (I + p.k_s + I * I / p.k_i)
    light_q = I / (I + p.k_sq + I * I / p.k_iq)
    growth = p.u_m * light_x * cx * cn / (cn + p.K_N)
    return (
        growth - p.u_d * cx,
        -p.Y_NX * growth + FN,
        p.k_m * light_q * cx - p.k_d * cq / (cn + p.K_Np),
    )


def rhs(x, u, p: BioreactorParams = DEFAULT_PARAMS) -> np.ndarray:
    """Time derivative of the state; negative concentrations are clamped to 0 first."""
    return np.array(_rhs(float(x[0]), float(x[1]), float(x[2]), float(u[0]), float(u[1]), p))


def step(x, u, dt: float = DT, p: BioreactorParams = DEFAULT_PARAMS, substeps: int = SUBSTEPS) -> np.ndarray:
    """Integrate one sampling interval with fixed-step classical RK4."""
    if dt <= 0.0 or substeps < 1:
        raise ValueError("dt must be positive and substeps >= 1")
    h = dt / substeps
    a, b, c = float(x[0]), float(x[1]), float(x[2])
    I, FN = float(u[0]), float(u[1])
    for _ in range(substeps):
        k1 = _rhs(a, b, c, I, FN, p)
        k2 = _rhs(a + 0.5 * h * k1[0], b + 0.5 * h * k1[1], c + 0.5 * h * k1[2], I, FN, p)
        k3 = _rhs(a + 0.5 * h * k2[0], b + 0.5 * h * k2[1], c + 0.5 * h * k2[2], I, FN, p)
        k4 = _rhs(a + h * k3[0], b + h * k3[1], c + h * k3[2], I, FN, p)
        a += h / 6.0 * (k1[0] + 2.0 * k2[0] + 2.0 * k3[0] + k4[0])
        b += h / 6.0 * (k1[1] + 2.0 * k2[1] + 2.0 * k3[1] + k4[1])
        c += h / 6.0 * (k1[2] + 2.0 * k2[2] + 2.0 * k3[2] + k4[2])
    out = np.array([a, b, c])
    if not np.all(np.isfinite(out)) or np.any(np.abs(out) > STATE_LIMIT):
        raise NonFinite(f"integration left the admissible state range: {out}")
    return np.maximum(out, 0.0)


def plant_transition(x, u, rng: RngStream, noise: NoiseSpec = NoiseSpec(), dt: float = DT,
                     p: BioreactorParams = DEFAULT_PARAMS, substeps: int = SUBSTEPS) -> np.ndarray:
    """``step`` plus additive disturbance, clamped at zero."""
    nxt = step(x, u, dt, p, substeps)
    return np.maximum(sample_gaussian(nxt, np.asarray(noise.sigma_omega_diag), rng), 0.0)


def measure(x_next, rng: RngStream, noise: NoiseSpec = NoiseSpec()) -> np.ndarray:
    """Additive Gaussian measurement noise, no clamping."""
    return sample_gaussian(np.asarray(x_next, dtype=float), np.asarray(noise.sigma_nu_diag), rng)


def constraint_values(states, T: int | None = None) -> np.ndarray:
    """Case-study constraints ``g_j^(t)`` for a state sequence, shape ``(T+1, 3)``.

    Columns: nitrate ceiling (800 mg/L), product-to-biomass ratio (11 mg/g)
    and the terminal nitrate target (150 mg/L), the latter identically zero
    before the final time.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    T = X.shape[0] - 1 if T is None else T
    g = np.zeros((X.shape[0], 3))
    g[:, 0] = X[:, 1] - 800.0
    g[:, 1] = X[:, 2] - 0.011 * X[:, 0]
    if X.shape[0] > T:
        g[T, 2] = X[T, 1] - 150.0
    return g


# ---------------------------------------------------------------------------
# datasets
# ---------------------------------------------------------------------------

@dataclass
class Dataset:
    Z: np.ndarray
    Y: np.ndarray
    meta: dict = field(default_factory=dict)


def generate_dataset_type1(N: int, rng: RngStream, noise: NoiseSpec = NoiseSpec(),
                           p: BioreactorParams = DEFAULT_PARAMS) -> Dataset:
    """Sobol design over the whole ``(x, u)`` box with noisy one-step outputs."""
    if N < 1:
        raise ValueError("N must be positive")
    Z = sobol(N, 5, TYPE1_LOWER, TYPE1_UPPER)
    Y = np.array([measure(step(z[:3], z[3:], DT, p), rng, noise) for z in Z])
    meta = {"type": 1, "N": N, "seed": rng.seed, "stream_id": rng.stream_id, "noise": noise.to_dict()}
    return Dataset(Z, Y, meta)


def generate_dataset_type2(N: int, T: int, rng: RngStream, noise: NoiseSpec = NoiseSpec(),
                           p: BioreactorParams = DEFAULT_PARAMS) -> Dataset:
    """Open-loop plant trajectories driven by Sobol control sequences.

    ``ceil(N / T)`` trajectories start from draws of the initial-condition
    distribution; rows are ``(x_t, u_t) -> measured x_{t+1}`` and the last
    trajectory is truncated so exactly ``N`` rows remain.
    """
    if N < T:
        raise ValueError("type-2 datasets need N >= T")
    n_traj = math.ceil(N / T)
    U = sobol(n_traj * T, 2, U_LOWER, U_UPPER)
    Z, Y = [], []
    for k in range(n_traj):
        x = sample_gaussian(np.asarray(noise.x0_mean), np.asarray(noise.x0_cov_diag), rng)
        x = np.maximum(x, 0.0)
        for t in range(T):
            u = U[k * T + t]
            x_next = plant_transition(x, u, rng, noise, DT, p)
            Z.append(np.concatenate([x, u]))
            Y.append(measure(x_next, rng, noise))
            x = x_next
    meta = {"type": 2, "N": N, "T": T, "n_trajectories": n_traj, "seed": rng.seed,
            "stream_id": rng.stream_id, "noise": noise.to_dict()}
    return Dataset(np.array(Z)[:N], np.array(Y)[:N], meta)


def write_dataset(csv_path, dataset: Dataset, meta_path=None):
    """Dataset CSV (``z_1..z_5, y_1..y_3``) plus a JSON sidecar."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"z_{i + 1}" for i in range(dataset.Z.shape[1])] + [f"y_{i + 1}" for i in range(dataset.Y.shape[1])])
        for z, y in zip(dataset.Z, dataset.Y):
            w.writerow([repr(float(v)) for v in np.concatenate([z, y])])
    if meta_path is not None:
        with open(meta_path, "w") as fh:
            json.dump(dataset.meta, fh, indent=2, sort_keys=True)


def read_dataset(csv_path, meta_path=None) -> Dataset:
    with open(csv_path, newline="") as fh:
        r = csv.reader(fh)
        header = next(r)
        data = np.array([[float(v) for v in row] for row in r])
    nz = sum(h.startswith("z_") for h in header)
    meta = {}
    if meta_path is not None:
        with open(meta_path) as fh:
            meta = json.load(fh)
    return Dataset(data[:, :nz], data[:, nz:], meta)
