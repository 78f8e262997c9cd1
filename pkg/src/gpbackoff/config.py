"""Experiment configuration with desk-scale and full-scale profiles."""

from __future__ import annotations

import copy
import json

from .backoff import ChanceConfig
from .bioreactor import NoiseSpec
from .nmpc import OCPSpec, SolverOptions

DEFAULTS = {
    "dataset": {"type": 1, "N": 60, "seed": 0, "T": 12},
    "gp": {"restarts": 5},
    "noise": NoiseSpec().to_dict(),
    "ocp": {
        "T": 12,
        "R": [3.125e-8, 3.125e-6],
        "u_lower": [120.0, 0.0],
        "u_upper": [400.0, 40.0],
        "eta0": 15.0,
        "solver": {"rho0": 10.0, "rho_growth": 5.0, "tol": 1e-6, "max_outer": 12, "max_inner": 200},
    },
    "chance": {"epsilon": 0.1, "alpha": 0.01, "delta": 0.1, "S": 1000, "n_b": 16,
               "gamma_upper": 4.0, "fresh_samples": False, "failure_budget": 0.05},
    "variant": {"learning": False, "state_dependent": False},
    "eval": {"n_closed_loop_runs": 50, "nominal_comparison": True},
    "seed": 0,
    "workers": 1,
    "output_dir": "out",
}

PROFILES = {
    "paper": {},
    "desk": {"chance": {"S": 200, "n_b": 8}, "eval": {"n_closed_loop_runs": 50}},
}


def _merge(base: dict, over: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in over.items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = _merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


class ExperimentConfig:
    """Nested dictionary of settings with typed accessors.

    Unknown top-level keys are rejected so typos in a config file surface
    immediately.
    """

    def __init__(self, data: dict | None = None, profile: str = "paper"):
        if profile not in PROFILES:
            raise ValueError(f"unknown profile {profile!r}")
        data = data or {}
        unknown = set(data) - set(DEFAULTS)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        self.profile = profile
        self.data = _merge(_merge(DEFAULTS, PROFILES[profile]), data)

    @classmethod
    def load(cls, path=None, profile: str = "paper", overrides: dict | None = None) -> "ExperimentConfig":
        data = {}
        if path is not None:
            with open(path) as fh:
                data = json.load(fh)
        if overrides:
            data = _merge(data, overrides)
        return cls(data, profile)

    def to_dict(self) -> dict:
        return copy.deepcopy(self.data)

    def dump(self, path):
        with open(path, "w") as fh:
            json.dump(self.data, fh, indent=2, sort_keys=True)

    def with_overrides(self, overrides: dict) -> "ExperimentConfig":
        cfg = ExperimentConfig.__new__(ExperimentConfig)
        cfg.profile = self.profile
        cfg.data = _merge(self.data, overrides)
        return cfg

    def __getitem__(self, key):
        return self.data[key]

    @property
    def noise(self) -> NoiseSpec:
        return NoiseSpec.from_dict(self.data["noise"])

    @property
    def chance(self) -> ChanceConfig:
        return ChanceConfig(**self.data["chance"])

    def ocp_spec(self) -> OCPSpec:
        o = self.data["ocp"]
        solver = SolverOptions(**o["solver"])
        eta = (float(o["eta0"]),) if self.data["variant"]["state_dependent"] else ()
        return OCPSpec(T=int(o["T"]), R=tuple(o["R"]), eta=eta, u_lower=tuple(o["u_lower"]),
                       u_upper=tuple(o["u_upper"]), solver=solver)
