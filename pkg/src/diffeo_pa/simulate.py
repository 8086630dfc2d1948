"""Synthetic cohorts with a known deformation law and outcome model.

Baseline curves are sums of Gaussian bumps on the 6:00-24:00 grid.  Each
later visit is the previous visit's true curve pushed through a geodesic
flow whose initial momenta are

    mean drift (period specific) + loading * planted mode + smooth noise

expressed in the scaled coordinates the pipeline works in.  Momenta are
specified through the displacement they produce and divided by the kernel
row sums, so amplitudes below read as approximate displacements.
"""

from __future__ import annotations

import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import pandas as pd

from diffeo_pa.errors import ValidationError
from diffeo_pa.geodesics import KernelConfig, control_indices, kernel_matrix, shoot
from diffeo_pa.io import MINUTE_COLUMNS, write_json
from diffeo_pa.prep import N_MINUTES, VISITS, WINDOW_START, minute_grid, minutes_to_unit

HEALTH_LEVELS = ("excellent", "good", "fair")


@dataclass(frozen=True)
class SimConfig:
    n_participants: int = 500
    n_visits: int = 3
    seed: int = 20240611
    days_per_visit: int = 7
    # baseline bump model, clock minutes and counts/min
    n_bumps: tuple[int, int] = (2, 4)
    bump_amplitude: tuple[float, float] = (400.0, 1200.0)
    bump_location: tuple[float, float] = (450.0, 1320.0)
    bump_width: tuple[float, float] = (40.0, 150.0)
    base_level: tuple[float, float] = (50.0, 250.0)
    # observation model
    day_level_sd: float = 0.1
    obs_noise_sd: float = 150.0
    # deformation law, scaled units; index = period
    drift_x: tuple[float, ...] = (0.04, 0.015)
    drift_y: tuple[float, ...] = (-0.06, -0.02)
    drift_turn_minute: float = 620.0
    drift_y_minute: float = 1200.0
    mode_minute: float = 780.0
    mode_width: float = 0.25
    mode_sd: float = 0.1
    noise_bumps: int = 4
    noise_width: float = 0.15
    noise_sd: float = 0.012
    noise_scale_sd: float = 0.5
    # outcome law; energy enters standardised within the cohort
    pf_intercept: float = 40.0
    beta_pc1: float = 4.0
    beta_energy: float = -2.0
    beta_energy_period: float = 4.0
    beta_period: float = -1.0
    beta_baseline_pf: float = 0.5
    beta_age: float = -0.2
    tau: float = 5.0
    sigma: float = 6.0
    # missingness
    wear_gap_rate: float = 0.25
    gap_length: tuple[int, int] = (30, 420)
    visit_missing_rate: float = 0.03
    outcome_missing_rate: float = 0.03
    kernel: KernelConfig = field(default_factory=KernelConfig)

    def __post_init__(self):
        if self.n_participants < 1:
            raise ValidationError("n_participants must be at least 1")
        if self.n_visits not in (2, 3):
            raise ValidationError("n_visits must be 2 or 3")
        if self.days_per_visit < 1:
            raise ValidationError("days_per_visit must be at least 1")
        lo, hi = self.n_bumps
        if lo < 1 or hi < lo:
            raise ValidationError(f"n_bumps range {self.n_bumps} must satisfy 1 <= lo <= hi")
        for name in ("bump_amplitude", "bump_location", "bump_width", "base_level", "gap_length"):
            a, b = getattr(self, name)
            if b < a:
                raise ValidationError(f"{name} range is reversed")
        if self.bump_width[0] <= 0 or self.bump_amplitude[0] <= 0:
            raise ValidationError("bump widths and amplitudes must be positive")
        for name in ("wear_gap_rate", "visit_missing_rate", "outcome_missing_rate"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ValidationError(f"{name} must lie in [0, 1]")
        n_periods = self.n_visits - 1
        if len(self.drift_x) < n_periods or len(self.drift_y) < n_periods:
            raise ValidationError("drift_x and drift_y need one entry per period")
        for name in ("obs_noise_sd", "day_level_sd", "mode_sd", "noise_sd", "tau", "sigma", "noise_scale_sd"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be non-negative")

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        d = dict(d)
        if "kernel" in d and isinstance(d["kernel"], dict):
            d["kernel"] = KernelConfig(**d["kernel"])
        for k, v in d.items():
            if isinstance(v, list):
                d[k] = tuple(v)
        unknown = set(d) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValidationError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class Cohort:
    minutes: pd.DataFrame
    outcomes: pd.DataFrame
    covariates: pd.DataFrame
    truth: dict
    planted_momenta: dict = field(default_factory=dict)

    def write(self, out_dir) -> dict[str, Path]:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        paths = {
            "minutes": out / "minutes.csv",
            "outcomes": out / "outcomes.csv",
            "covariates": out / "covariates.csv",
            "truth": out / "truth.json",
        }
        self.minutes[MINUTE_COLUMNS].to_csv(paths["minutes"], index=False)
        self.outcomes.to_csv(paths["outcomes"], index=False, float_format="%.10g")
        self.covariates.to_csv(paths["covariates"], index=False, float_format="%.10g")
        write_json(paths["truth"], self.truth)
        return paths


def _bumps(t, amp, loc, width):
    return (amp[:, None] * np.exp(-0.5 * ((t[None, :] - loc[:, None]) / width[:, None]) ** 2)).sum(axis=0)


def baseline_curve(rng: np.random.Generator, sim: SimConfig) -> np.ndarray:
    """True baseline profile in counts/min on the window grid."""
    k = int(rng.integers(sim.n_bumps[0], sim.n_bumps[1] + 1))
    amp = rng.uniform(*sim.bump_amplitude, size=k)
    loc = rng.uniform(*sim.bump_location, size=k)
    width = rng.uniform(*sim.bump_width, size=k)
    clock = minute_grid() + WINDOW_START - 1
    return rng.uniform(*sim.base_level) + _bumps(clock, amp, loc, width)


def _unit(minute_of_day: float) -> float:
    return float(minutes_to_unit(minute_of_day - WINDOW_START + 1))


def planted_mode(u: np.ndarray, sim: SimConfig) -> np.ndarray:
    """Displacement profile of the planted mode: an upward midday lift."""
    v = np.zeros((len(u), 2))
    v[:, 1] = np.exp(-0.5 * ((u - _unit(sim.mode_minute)) / sim.mode_width) ** 2)
    return v


def mean_drift(u: np.ndarray, period: int, sim: SimConfig) -> np.ndarray:
    """Forward shift before the turn minute, backward after; an evening drop."""
    v = np.empty((len(u), 2))
    v[:, 0] = sim.drift_x[period] * np.tanh((_unit(sim.drift_turn_minute) - u) / 0.2)
    v[:, 1] = sim.drift_y[period] * np.exp(-0.5 * ((u - _unit(sim.drift_y_minute)) / 0.2) ** 2)
    return v


def _to_momenta(q: np.ndarray, v: np.ndarray, sigma: float) -> np.ndarray:
    return v / kernel_matrix(q, q, sigma).sum(axis=1)[:, None]


def _deform(values: np.ndarray, p: np.ndarray, idx: np.ndarray, kernel: KernelConfig) -> np.ndarray:
    u = minutes_to_unit(minute_grid())
    pts = np.column_stack([u, values])
    x = shoot(pts[idx], p, kernel, passive=pts).x[-1]
    order = np.argsort(x[:, 0], kind="stable")
    return np.interp(u, x[order, 0], x[order, 1])


def _observe(rng, curve_counts, sim: SimConfig, visit: str, pid: str) -> pd.DataFrame:
    D = sim.days_per_visit
    level = np.exp(sim.day_level_sd * rng.standard_normal(D))[:, None]
    vm = np.maximum(curve_counts[None, :] * level + sim.obs_noise_sd * rng.standard_normal((D, N_MINUTES)), 0.0)
    wear = np.ones((D, N_MINUTES), dtype=np.int8)
    for d in np.flatnonzero(rng.random(D) < sim.wear_gap_rate):
        length = int(rng.integers(sim.gap_length[0], sim.gap_length[1] + 1))
        start = int(rng.integers(0, max(N_MINUTES - length, 0) + 1))
        wear[d, start : start + length] = 0
    vm *= wear
    direction = np.abs(rng.standard_normal((D, N_MINUTES, 3))) + 0.2
    direction /= np.linalg.norm(direction, axis=2, keepdims=True)
    axes = np.rint(vm[..., None] * direction).astype(np.int64)
    n = D * N_MINUTES
    return pd.DataFrame(
        {
            "participant_id": pid,
            "visit": visit,
            "day": np.repeat(np.arange(1, D + 1), N_MINUTES),
            "minute": np.tile(np.arange(WINDOW_START, WINDOW_START + N_MINUTES), D),
            "va": axes[..., 0].reshape(n),
            "ha": axes[..., 1].reshape(n),
            "ppa": axes[..., 2].reshape(n),
            "wear": wear.reshape(n),
        }
    )


def _participant_pid(i: int) -> str:
    return f"P{i + 1:04d}"


def _simulate_curves(args):
    """Stage 1 per participant: baseline draw plus everything random that precedes scaling."""
    seed_seq, sim = args
    rng = np.random.default_rng(seed_seq)
    base = baseline_curve(rng, sim)
    n_periods = sim.n_visits - 1
    loadings = rng.standard_normal(n_periods) * sim.mode_sd
    noise_scale = float(np.exp(sim.noise_scale_sd * rng.standard_normal()))
    u = minutes_to_unit(minute_grid())
    noise = []
    for _ in range(n_periods):
        c = rng.uniform(-1.0, 1.0, size=sim.noise_bumps)
        a = rng.standard_normal((sim.noise_bumps, 2)) * sim.noise_sd * noise_scale
        g = np.exp(-0.5 * ((u[:, None] - c[None, :]) / sim.noise_width) ** 2)
        noise.append(g @ a)
    return rng, base, loadings, noise_scale, noise


def _simulate_followups(args):
    """Stage 2 per participant: shoot follow-ups in scaled coordinates, then observe."""
    i, rng, base, loadings, noise, mean, sd, sim = args
    pid = _participant_pid(i)
    kernel = sim.kernel
    idx = control_indices(N_MINUTES, kernel.control_stride)
    u = minutes_to_unit(minute_grid())
    scaled = [(base - mean) / (4.0 * sd)]
    energies, momenta = [], []
    for eta in range(sim.n_visits - 1):
        q = np.column_stack([u, scaled[-1]])[idx]
        v = mean_drift(u, eta, sim) + loadings[eta] * planted_mode(u, sim) + noise[eta]
        # the observation window is fixed, so temporal shifts fade out at its edges
        v[:, 0] *= 1.0 - u**6
        p = _to_momenta(q, v[idx], kernel.sigma_v)
        momenta.append(p)
        energies.append(float(np.sum(p**2)))
        scaled.append(_deform(scaled[-1], p, idx, kernel))
    frames = []
    present = []
    for visit, y in zip(VISITS[: sim.n_visits], scaled):
        if rng.random() < sim.visit_missing_rate:
            continue
        present.append(visit)
        frames.append(_observe(rng, mean + 4.0 * sd * y, sim, visit, pid))
    age = float(rng.normal(80.0, 6.0))
    bmi = float(rng.normal(27.0, 4.0))
    health = HEALTH_LEVELS[int(rng.integers(len(HEALTH_LEVELS)))]
    baseline_pf = float(np.clip(rng.normal(60.0, 15.0), 0.0, 100.0))
    u_i = sim.tau * rng.standard_normal()
    eps = sim.sigma * rng.standard_normal(sim.n_visits - 1)
    miss = rng.random(sim.n_visits - 1) < sim.outcome_missing_rate
    return {
        "pid": pid,
        "frames": frames,
        "present": present,
        "energies": energies,
        "momenta": momenta,
        "age": age,
        "bmi": bmi,
        "health": health,
        "baseline_pf": baseline_pf,
        "u": u_i,
        "eps": eps,
        "outcome_missing": miss,
    }


def _map(fn, items, workers: int):
    if workers <= 1:
        return [fn(it) for it in items]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items, chunksize=max(1, len(items) // (4 * workers))))


def simulate_cohort(sim: SimConfig | None = None, *, workers: int = 1) -> Cohort:
    """Draw a cohort; every participant uses its own spawned random stream.

    The scaled coordinates used for shooting come from the grand mean and SD
    of the true baseline curves, so they are a fixed function of the seed.
    """
    sim = sim or SimConfig()
    seqs = np.random.SeedSequence(sim.seed).spawn(sim.n_participants)
    stage1 = [_simulate_curves((s, sim)) for s in seqs]
    base = np.array([s[1] for s in stage1])
    mean, sd = float(base.mean()), float(base.std(ddof=1)) if base.size > 1 else 1.0
    if not sd > 0:
        raise ValidationError("baseline curves have zero spread")
    jobs = [(i, s[0], s[1], s[2], s[4], mean, sd, sim) for i, s in enumerate(stage1)]
    results = _map(_simulate_followups, jobs, workers)

    n_periods = sim.n_visits - 1
    energies = np.array([r["energies"] for r in results])
    z = (energies - energies.mean()) / energies.std(ddof=1) if energies.size > 1 else energies * 0
    loadings = np.array([s[2] for s in stage1])
    rows, cov_rows = [], []
    for i, r in enumerate(results):
        cov_rows.append(
            {
                "participant_id": r["pid"],
                "baseline_pf": r["baseline_pf"],
                "age": r["age"],
                "bmi": r["bmi"],
                "health": r["health"],
            }
        )
        for eta in range(n_periods):
            later = VISITS[eta + 1]
            if later not in r["present"] or r["outcome_missing"][eta]:
                continue
            pf = (
                sim.pf_intercept
                + sim.beta_pc1 * loadings[i, eta] / max(sim.mode_sd, 1e-12)
                + sim.beta_energy * z[i, eta]
                + sim.beta_energy_period * z[i, eta] * eta
                + sim.beta_period * eta
                + sim.beta_baseline_pf * r["baseline_pf"]
                + sim.beta_age * (r["age"] - 80.0)
                + r["u"]
                + r["eps"][eta]
            )
            rows.append({"participant_id": r["pid"], "period": eta, "pf": float(np.clip(pf, 0.0, 100.0))})
    minutes = pd.concat([f for r in results for f in r["frames"]], ignore_index=True)
    truth = {
        "config": sim.to_dict(),
        "scaling": {"grand_mean": mean, "sd": sd},
        "energy_standardisation": {"mean": float(energies.mean()), "sd": float(energies.std(ddof=1)) if energies.size > 1 else 0.0},
        "participants": [
            {
                "participant_id": r["pid"],
                "loadings": loadings[i].tolist(),
                "energies": r["energies"],
                "visits": r["present"],
            }
            for i, r in enumerate(results)
        ],
        "coefficients": {
            "pc1_per_sd": sim.beta_pc1,
            "energy_per_sd": sim.beta_energy,
            "energy_x_period_per_sd": sim.beta_energy_period,
            "period": sim.beta_period,
            "baseline_pf": sim.beta_baseline_pf,
            "age": sim.beta_age,
        },
    }
    return Cohort(
        minutes=minutes,
        outcomes=pd.DataFrame(rows, columns=["participant_id", "period", "pf"]),
        covariates=pd.DataFrame(cov_rows),
        truth=json.loads(json.dumps(truth, default=float)),
        planted_momenta={(r["pid"], eta): p for r in results for eta, p in enumerate(r["momenta"])},
    )
