"""Cohort simulator: two latent ODE groups observed through noisy items.

Each individual belongs to one of two groups with its own linear system
for the 2-D latent trajectory, started at a shared initial value. Visits
happen at time 0 plus a random number of follow-ups at uniform random
times. Items 1..p/2 track the first latent component, the rest the
second, each perturbed by a variable-specific and an individual-specific
Gaussian error (both drawn per individual visit). Baseline covariates
consist of the individual's true dynamics parameters observed with noise
(cycled across the informative slots) plus pure-noise variables.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, field

import numpy as np

from . import pipeline
from .errors import InvalidArgumentError, NotFoundError
from .odecore import ODEParams, solve_ivp
from .pipeline import Dataset, Individual, format_float

GROUP1_MATRIX = ((-0.2, 0.1), (-0.1, 0.1))
GROUP2_MATRIX = ((-0.2, -0.1), (0.1, -0.2))


@dataclass
class GroupSystem:
    """One group's latent dynamics: du/dt = a u + c, shared across members."""

    a: tuple  # (2, 2) nested tuples
    c: tuple = (0.0, 0.0)

    def params(self) -> ODEParams:
        return ODEParams(np.asarray(self.a, dtype=float), np.asarray(self.c, dtype=float))


@dataclass
class SimConfig:
    n_individuals: int = 100
    n_items: int = 10
    n_baseline: int = 50
    n_informative: int = 10
    followup_min: int = 1
    followup_max: int = 8
    time_min: float = 1.5
    time_max: float = 10.0
    sigma_ind: float = 0.5
    sigma_var: float = 0.1
    sigma_info: float = 0.1
    sigma_noise: float = 0.1
    initial_value: tuple = (3.0, 1.0)
    groups: list[GroupSystem] = field(
        default_factory=lambda: [GroupSystem(GROUP1_MATRIX), GroupSystem(GROUP2_MATRIX)]
    )
    seed: int = 0

    def validate(self) -> None:
        if min(self.n_individuals, self.n_items, self.n_baseline) < 1:
            raise InvalidArgumentError("n_individuals, n_items and n_baseline must be >= 1")
        if not 0 <= self.n_informative <= self.n_baseline:
            raise InvalidArgumentError("n_informative must lie in [0, n_baseline]")
        if self.followup_min < 1 or self.followup_max < self.followup_min:
            raise InvalidArgumentError("follow-up count range is empty or below 1")
        if not self.time_min < self.time_max:
            raise InvalidArgumentError("follow-up time range is empty")
        if self.time_min <= 0:
            raise InvalidArgumentError("follow-up times must be after the baseline visit at 0")
        for name in ("sigma_ind", "sigma_var", "sigma_info", "sigma_noise"):
            if getattr(self, name) < 0:
                raise InvalidArgumentError(f"{name} must be nonnegative")
        if len(self.groups) != 2:
            raise InvalidArgumentError("exactly two group systems are required")
        for g in self.groups:
            if np.asarray(g.a, dtype=float).shape != (2, 2) or len(g.c) != 2:
                raise InvalidArgumentError("group systems must be 2-dimensional")


def _param_blocks(config: SimConfig) -> tuple[bool, bool]:
    """Which parameter blocks (A entries, drift entries) carry information."""
    a_used = any(np.any(np.asarray(g.a) != 0.0) for g in config.groups)
    c_used = any(np.any(np.asarray(g.c) != 0.0) for g in config.groups)
    if not a_used and not c_used:
        a_used = True  # degenerate all-zero systems: fall back to A entries
    return a_used, c_used


def _informative_vector(config: SimConfig) -> list[list[float]]:
    """Per-group true-parameter vector the informative baselines cycle over.

    Includes the A entries (row-major) whenever any group has nonzero A,
    and the drift entries whenever any group has nonzero drift, so the
    informative variables always carry the parameters that actually vary.
    """
    a_used, c_used = _param_blocks(config)
    vecs = []
    for g in config.groups:
        vec = []
        if a_used:
            vec += list(np.asarray(g.a, dtype=float).reshape(-1))
        if c_used:
            vec += list(np.asarray(g.c, dtype=float).reshape(-1))
        vecs.append(vec)
    return vecs


@dataclass
class SimulatedCohort:
    dataset: Dataset
    group_of: dict[str, int]  # id -> group index (0-based)
    params_of: dict[str, ODEParams]
    config: SimConfig

    @property
    def individuals(self) -> list[Individual]:
        return self.dataset.individuals


def simulate_cohort(config: SimConfig) -> SimulatedCohort:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n, p, q = config.n_individuals, config.n_items, config.n_baseline
    half_items = (p + 1) // 2
    width = max(3, len(str(n)))
    group_params = [g.params() for g in config.groups]
    info_vecs = _informative_vector(config)
    z0 = np.asarray(config.initial_value, dtype=float)

    individuals, group_of, params_of = [], {}, {}
    n_first = (n + 1) // 2  # groups differ by at most one member
    for i in range(n):
        g = 0 if i < n_first else 1
        ind_id = f"ind-{i + 1:0{width}d}"
        t_count = int(rng.integers(config.followup_min, config.followup_max + 1))
        followups = np.sort(rng.uniform(config.time_min, config.time_max, size=t_count))
        times = np.concatenate([[0.0], followups])
        truth = np.stack([solve_ivp(group_params[g], z0, 0.0, float(t)) for t in times], axis=1)
        tracked = np.where(np.arange(p) < half_items, 0, 1)
        base_signal = truth[tracked, :]  # (p, T+1)
        delta = rng.normal(0.0, config.sigma_var, size=(p, times.size))
        eps = rng.normal(0.0, config.sigma_ind, size=(p, times.size))
        items = base_signal + delta + eps

        vec = info_vecs[g]
        informative = np.array(
            [vec[s % len(vec)] + rng.normal(0.0, config.sigma_info) for s in range(config.n_informative)]
        )
        noise = rng.normal(0.0, config.sigma_noise, size=q - config.n_informative)
        baseline = np.concatenate([informative, noise])

        individuals.append(Individual(ind_id, times, items, baseline))
        group_of[ind_id] = g
        params_of[ind_id] = group_params[g]
    return SimulatedCohort(Dataset(individuals), group_of, params_of, config)


def true_latent(cohort: SimulatedCohort, individual_id: str, t: float) -> np.ndarray:
    """Exact latent state of an individual's group system at time t."""
    if individual_id not in cohort.params_of:
        raise NotFoundError(f"unknown individual id {individual_id!r}")
    z0 = np.asarray(cohort.config.initial_value, dtype=float)
    return solve_ivp(cohort.params_of[individual_id], z0, 0.0, t)


def ground_truth_header(config: SimConfig) -> list[str]:
    a_used, c_used = _param_blocks(config)
    cols = ["id", "group"]
    if a_used:
        cols += ["a11", "a12", "a21", "a22"]
    if c_used:
        cols += ["c1", "c2"]
    return cols


def write_cohort(cohort: SimulatedCohort, time_series_path, baseline_path, truth_path) -> None:
    """Write the observation CSVs plus the ground-truth sidecar."""
    pipeline.save_dataset(cohort.dataset, time_series_path, baseline_path)
    header = ground_truth_header(cohort.config)
    info_vecs = _informative_vector(cohort.config)
    with open(truth_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for ind in cohort.individuals:
            g = cohort.group_of[ind.id]
            w.writerow([ind.id, g + 1] + [format_float(v) for v in info_vecs[g]])
