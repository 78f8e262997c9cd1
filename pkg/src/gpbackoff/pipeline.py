"""End-to-end experiment stages: data, model, back-offs, closed-loop evaluation.

Every stage reads and writes plain files so it can be rerun on its own.
Random streams are derived from the configured seed with fixed stream ids,
which makes all outputs (apart from timing files) reproducible byte for byte.
"""

from __future__ import annotations

import csv
import json
import logging
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass

import numpy as np

from . import bioreactor as br
from .backoff import (BackoffRunReport, BackoffTable, GPSampler, ecdf_joint, joint_satisfaction_stat,
                      run_backoff_iterations)
from .config import ExperimentConfig
from .errors import NonFinite, PolicyFailure
from .nmpc import Controller, make_policy_state, solve_ocp
from .numerics import RngStream, sample_gaussian
from .statespace import GPStateSpace, fit_state_space

log = logging.getLogger(__name__)

STREAM_DATASET = 1 << 60
STREAM_FIT = (1 << 60) + 1
STREAM_EVAL = 1 << 61

VARIANTS = {
    "gp50": {"dataset": {"type": 1, "N": 50}, "variant": {"learning": False, "state_dependent": False}},
    "gp60": {"dataset": {"type": 1, "N": 60}, "variant": {"learning": False, "state_dependent": False}},
    "gp100": {"dataset": {"type": 1, "N": 100}, "variant": {"learning": False, "state_dependent": False}},
    "gp50-learning": {"dataset": {"type": 1, "N": 50}, "variant": {"learning": True, "state_dependent": False}},
    "gp50-sd": {"dataset": {"type": 2, "N": 50}, "variant": {"learning": False, "state_dependent": True}},
    "gp50-nsd": {"dataset": {"type": 2, "N": 50}, "variant": {"learning": False, "state_dependent": False}},
}

SUMMARY_COLUMNS = ["variant", "beta_hat", "beta_lb", "mean_backoff_g1g3", "mean_backoff_g2",
                   "violation_fraction", "mean_objective", "std_objective"]


def _path(cfg: ExperimentConfig, name: str) -> str:
    os.makedirs(cfg["output_dir"], exist_ok=True)
    return os.path.join(cfg["output_dir"], name)


# ---------------------------------------------------------------------------
# dataset and model
# ---------------------------------------------------------------------------

def generate(cfg: ExperimentConfig) -> br.Dataset:
    d = cfg["dataset"]
    rng = RngStream(int(d["seed"]), STREAM_DATASET)
    if int(d["type"]) == 1:
        return br.generate_dataset_type1(int(d["N"]), rng, cfg.noise)
    if int(d["type"]) == 2:
        return br.generate_dataset_type2(int(d["N"]), int(d["T"]), rng, cfg.noise)
    raise ValueError(f"dataset type must be 1 or 2, got {d['type']}")


def cmd_generate(cfg: ExperimentConfig):
    ds = generate(cfg)
    csv_path, meta_path = _path(cfg, "dataset.csv"), _path(cfg, "dataset.json")
    br.write_dataset(csv_path, ds, meta_path)
    return csv_path, meta_path


def fit(cfg: ExperimentConfig, dataset: br.Dataset):
    rng = RngStream(int(cfg["seed"]), STREAM_FIT)
    return fit_state_space(dataset.Z, dataset.Y, cfg.noise.sigma_omega_diag, int(cfg["gp"]["restarts"]), rng,
                           return_reports=True)


def save_model(path, gpss: GPStateSpace):
    with open(path, "w") as fh:
        json.dump(gpss.to_dict(), fh)


def load_model(path) -> GPStateSpace:
    with open(path) as fh:
        return GPStateSpace.from_dict(json.load(fh))


def cmd_fit(cfg: ExperimentConfig, dataset_path=None, echo=print):
    dataset_path = dataset_path or _path(cfg, "dataset.csv")
    ds = br.read_dataset(dataset_path)
    gpss, reports = fit(cfg, ds)
    path = _path(cfg, "model.json")
    save_model(path, gpss)
    for i, (g, rep) in enumerate(zip(gpss.gps, reports)):
        echo(f"output {i + 1}: zeta={g.psi.zeta:.6g} lambda={np.array2string(g.psi.lengthscales, precision=4)} "
             f"sigma_nu={g.psi.sigma_nu:.6g} nll={rep.nll:.6f}")
    return path


# ---------------------------------------------------------------------------
# back-offs
# ---------------------------------------------------------------------------

def make_sampler(cfg: ExperimentConfig, gpss: GPStateSpace) -> GPSampler:
    noise = cfg.noise
    ch = cfg.chance
    return GPSampler(
        gpss, cfg.ocp_spec(), np.asarray(noise.x0_mean, dtype=float), np.asarray(noise.x0_cov_diag, dtype=float),
        seed=int(cfg["seed"]), S=ch.S, learning=bool(cfg["variant"]["learning"]),
        state_dependent=bool(cfg["variant"]["state_dependent"]), eta0=float(cfg["ocp"]["eta0"]),
        fresh_samples=ch.fresh_samples, failure_budget=ch.failure_budget, workers=int(cfg["workers"]))


def compute_backoffs(cfg: ExperimentConfig, gpss: GPStateSpace, progress=None) -> BackoffRunReport:
    sampler = make_sampler(cfg, gpss)
    return run_backoff_iterations(sampler, sampler.nominal, cfg.chance, keep_samples=True, progress=progress)


def mean_backoffs(table: BackoffTable, T: int):
    """Time-averaged back-offs: pooled ``g1`` path and ``g3`` terminal entries, and ``g2``."""
    b = table.b
    g13 = np.concatenate([b[1:, 0], [b[T, 2]]])
    return float(g13.mean()), float(b[1:, 1].mean())


def write_backoff_outputs(cfg: ExperimentConfig, report: BackoffRunReport):
    T = cfg.ocp_spec().T
    report.table.write(_path(cfg, "backoff.csv"), _path(cfg, "backoff.json"), report.header())
    doc = report.to_dict()
    for rec in doc["iterations"]:
        rec.pop("wall_time")
    with open(_path(cfg, "backoff_report.json"), "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
    with open(_path(cfg, "backoff_iterations.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "gamma", "beta_hat", "beta_lb", "h", "a_gamma", "b_gamma", "n_replaced",
                    "stat_mean", "stat_max"])
        for r in report.records:
            w.writerow([r.iteration, r.gamma, r.beta_hat, r.beta_lb, r.h, r.a_gamma, r.b_gamma, r.n_replaced,
                        r.stat_mean, r.stat_max])
    with open(_path(cfg, "backoff_samples.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "sample", "joint_stat", "max_g1", "max_g2", "g3_T"])
        for r, G in zip(report.records, report.samples):
            for s, g in enumerate(G):
                w.writerow([r.iteration, s, joint_satisfaction_stat(g), g[:, 0].max(), g[:, 1].max(), g[T, 2]])
    with open(_path(cfg, "backoff_timings.csv"), "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["iteration", "wall_time"])
        for r in report.records:
            w.writerow([r.iteration, r.wall_time])


def cmd_backoff(cfg: ExperimentConfig, model_path=None, echo=print) -> BackoffRunReport:
    gpss = load_model(model_path or _path(cfg, "model.json"))
    report = compute_backoffs(cfg, gpss, progress=lambda r: echo(
        f"iteration {r.iteration}: gamma={r.gamma:.6g} beta_hat={r.beta_hat:.4f} beta_lb={r.beta_lb:.4f}"))
    write_backoff_outputs(cfg, report)
    if report.no_sign_change:
        echo("no sign change: the controller already meets the chance constraint without back-offs")
    return report


# ---------------------------------------------------------------------------
# closed-loop evaluation on the plant
# ---------------------------------------------------------------------------

@dataclass
class Episode:
    run_id: int
    states: np.ndarray | None
    controls: np.ndarray | None
    constraints: np.ndarray | None
    objective: float
    failed: bool
    diagnostics: list


def closed_loop_objective(states, controls, R) -> float:
    """``C_qc,T`` minus the accumulated control-move penalty (larger is better)."""
    dU = np.diff(np.asarray(controls), axis=0)
    return float(states[-1, 2] - np.sum(dU * dU * np.asarray(R)))


def run_episode(gpss, spec, backoffs, learning, state_dependent, eta0, noise: br.NoiseSpec, seed: int,
                run_id: int, initial_guess=None) -> Episode:
    """One closed-loop batch on the simulated plant with full state feedback."""
    rng = RngStream(seed, STREAM_EVAL + run_id)
    st = make_policy_state(gpss, spec, backoffs, learning, state_dependent, eta0, initial_guess)
    x0 = sample_gaussian(np.asarray(noise.x0_mean, dtype=float), np.asarray(noise.x0_cov_diag, dtype=float), rng)
    x = np.maximum(x0, 0.0)
    states, controls = [x], []
    try:
        for t in range(spec.T):
            u = Controller(st)(x, t)
            x = br.plant_transition(x, u, rng, noise)
            controls.append(u)
            states.append(x)
    except (PolicyFailure, NonFinite) as exc:
        log.warning("episode %d failed: %s", run_id, exc)
        return Episode(run_id, None, None, None, math.nan, True, st.diagnostics)
    X, U = np.array(states), np.array(controls)
    return Episode(run_id, X, U, spec.constraints.evaluate(X, spec.T), closed_loop_objective(X, U, spec.R), False,
                   st.diagnostics)


def _episode_job(args):
    return run_episode(*args)


def evaluate_policy(cfg: ExperimentConfig, gpss: GPStateSpace, backoffs) -> list:
    spec = cfg.ocp_spec()
    v = cfg["variant"]
    eta0 = float(cfg["ocp"]["eta0"])
    st = make_policy_state(gpss, spec, backoffs, v["learning"], v["state_dependent"], eta0)
    noise = cfg.noise
    guess = solve_ocp(gpss, st.spec, np.asarray(noise.x0_mean, dtype=float), 0, st.backoffs).s
    jobs = [(gpss, spec, backoffs, v["learning"], v["state_dependent"], eta0, noise, int(cfg["seed"]), r, guess)
            for r in range(int(cfg["eval"]["n_closed_loop_runs"]))]
    if int(cfg["workers"]) > 1:
        with ProcessPoolExecutor(int(cfg["workers"])) as ex:
            return list(ex.map(_episode_job, jobs))
    return [_episode_job(j) for j in jobs]


def violation_fraction(episodes) -> float:
    ok = [e for e in episodes if not e.failed]
    if not ok:
        return math.nan
    return 1.0 - ecdf_joint([joint_satisfaction_stat(e.constraints) for e in ok])


def write_episodes(path, episodes):
    ok = [e for e in episodes if not e.failed]
    n_x = ok[0].states.shape[1] if ok else 3
    n_u = ok[0].controls.shape[1] if ok else 2
    n_g = ok[0].constraints.shape[1] if ok else 3
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["run_id", "t"] + [f"x_{i + 1}" for i in range(n_x)] + [f"u_{i + 1}" for i in range(n_u)]
                   + [f"g_{j + 1}" for j in range(n_g)])
        for e in ok:
            for t in range(e.states.shape[0]):
                u = [repr(float(v)) for v in e.controls[t]] if t < e.controls.shape[0] else [""] * n_u
                w.writerow([e.run_id, t] + [repr(float(v)) for v in e.states[t]] + u
                           + [repr(float(v)) for v in e.constraints[t]])


def write_diagnostics(path, labelled):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["controller", "run_id", "t", "iterations", "objective", "max_violation", "wall_time"])
        for label, episodes in labelled:
            for e in episodes:
                for d in e.diagnostics:
                    w.writerow([label, e.run_id, d["t"], d["iterations"], d["objective"], d["max_violation"],
                                d["wall_time"]])


def summary_row(name, episodes, table: BackoffTable, T, beta_hat=math.nan, beta_lb=math.nan) -> dict:
    objs = np.array([e.objective for e in episodes if not e.failed])
    g13, g2 = mean_backoffs(table, T)
    return {
        "variant": name, "beta_hat": beta_hat, "beta_lb": beta_lb, "mean_backoff_g1g3": g13,
        "mean_backoff_g2": g2, "violation_fraction": violation_fraction(episodes),
        "mean_objective": float(objs.mean()) if objs.size else math.nan,
        "std_objective": float(objs.std(ddof=1)) if objs.size > 1 else math.nan,
    }


def write_summary(path, rows):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=SUMMARY_COLUMNS)
        w.writeheader()
        for r in rows:
            w.writerow({k: (repr(float(v)) if isinstance(v, float) else v) for k, v in r.items()})


def cmd_evaluate(cfg: ExperimentConfig, model_path=None, backoff_path=None, name: str = "gp", echo=print):
    gpss = load_model(model_path or _path(cfg, "model.json"))
    backoff_csv = backoff_path or _path(cfg, "backoff.csv")
    header_path = os.path.splitext(backoff_csv)[0] + ".json"
    header = {}
    if os.path.exists(header_path):
        with open(header_path) as fh:
            header = json.load(fh)
    table = BackoffTable.read(backoff_csv, header_path if header else None)
    T = cfg.ocp_spec().T
    episodes = evaluate_policy(cfg, gpss, table.b)
    write_episodes(_path(cfg, "trajectories.csv"), episodes)
    rows = [summary_row(name, episodes, table, T, header.get("beta_hat", math.nan), header.get("beta_lb", math.nan))]
    labelled = [("backoff", episodes)]
    if cfg["eval"]["nominal_comparison"]:
        zero = BackoffTable.zeros(T, table.b_tilde.shape[1])
        nominal = evaluate_policy(cfg, gpss, zero.b)
        write_episodes(_path(cfg, "trajectories_nominal.csv"), nominal)
        rows.append(summary_row(f"{name}-nominal", nominal, zero, T))
        labelled.append(("nominal", nominal))
    write_summary(_path(cfg, "summary.csv"), rows)
    write_diagnostics(_path(cfg, "solve_diagnostics.csv"), labelled)
    for r in rows:
        echo(f"{r['variant']}: violation_fraction={r['violation_fraction']:.3f} "
             f"mean_objective={r['mean_objective']:.5f}")
    return rows


# ---------------------------------------------------------------------------
# full pipeline for the named case-study variants
# ---------------------------------------------------------------------------

def variant_config(cfg: ExperimentConfig, variant: str) -> ExperimentConfig:
    if variant not in VARIANTS:
        raise ValueError(f"unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
    out = cfg.with_overrides(VARIANTS[variant])
    return out.with_overrides({"output_dir": os.path.join(cfg["output_dir"], variant)})


def cmd_reproduce(cfg: ExperimentConfig, variant: str, echo=print):
    vcfg = variant_config(cfg, variant)
    vcfg.dump(_path(vcfg, "config.json"))
    cmd_generate(vcfg)
    cmd_fit(vcfg, echo=echo)
    report = cmd_backoff(vcfg, echo=echo)
    rows = cmd_evaluate(vcfg, name=variant, echo=echo)
    update_comparison(os.path.join(cfg["output_dir"], "comparison.csv"), variant, report, vcfg.ocp_spec().T)
    return report, rows


COMPARISON_COLUMNS = ["variant", "mean_backoff_g1g3", "mean_backoff_g2", "beta_lb", "beta_hat", "converged",
                      "no_sign_change"]


def update_comparison(path, variant, report: BackoffRunReport, T: int):
    """Insert or replace one variant row of the cross-variant comparison table."""
    rows = {}
    if os.path.exists(path):
        with open(path, newline="") as fh:
            rows = {r["variant"]: r for r in csv.DictReader(fh)}
    g13, g2 = mean_backoffs(report.table, T)
    rows[variant] = {"variant": variant, "mean_backoff_g1g3": repr(g13), "mean_backoff_g2": repr(g2),
                     "beta_lb": repr(report.beta_lb), "beta_hat": repr(report.beta_hat),
                     "converged": report.converged, "no_sign_change": report.no_sign_change}
    os.makedirs(os.path.dirname(path) or ".", exist_ok=True)
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, fieldnames=COMPARISON_COLUMNS)
        w.writeheader()
        for key in sorted(rows):
            w.writerow(rows[key])

