"""Closed-form linear-ODE machinery and the weighted trajectory estimator.

Trajectories follow du/dt = A u + c with constant coefficients. Each
observed visit supplies an initial value, giving one solution per start;
an inverse-variance weighted combination of the per-start solutions at a
query time estimates the underlying trajectory. Variances come either
from a known observation-noise level pushed through the dynamics
(closed form) or from the sample variance of solutions started between
a start and the query time, falling back to equal weights when that set
is too small to define a variance.

All functions are pure; parallel evaluation across individuals or query
times is safe.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import linalg
from .errors import InvalidArgumentError

# sample variances are floored here before inversion so coinciding
# solutions cannot produce infinite weights
VARIANCE_FLOOR = 1e-8


@dataclass
class ODEParams:
    """Coefficients of one individual's latent dynamics: rates and drift."""

    a: np.ndarray  # (d, d), per unit time
    c: np.ndarray  # (d,), per unit time

    def __post_init__(self):
        self.a = linalg.as_square_matrix(self.a)
        self.c = linalg.as_vector(self.c, dim=self.a.shape[0])

    @property
    def dim(self) -> int:
        return self.a.shape[0]

    @property
    def a_is_zero(self) -> bool:
        """True when A is treated as the zero matrix (linear-drift branch)."""
        return linalg.is_effectively_zero(self.a)


def solve_ivp(params: ODEParams, z0, t0: float, t: float) -> np.ndarray:
    """Analytical solution at time t of the IVP started at (t0, z0).

    Only forward solving is supported. For nonzero A the closed form
    exp(A(t-t0))(A^-1 c + z0) - A^-1 c is used; a singular nonzero A
    raises SingularMatrixError. For A treated as zero the solution is
    the drift line c*(t-t0) + z0.
    """
    z0 = linalg.as_vector(z0, dim=params.dim)
    if t < t0:
        raise InvalidArgumentError(f"backward solving not supported (t={t} < t0={t0})")
    if t == t0:
        return z0.copy()
    if params.a_is_zero:
        return params.c * (t - t0) + z0
    a_inv_c = linalg.mat_inv(params.a) @ params.c
    return linalg.mat_exp(params.a, t - t0) @ (a_inv_c + z0) - a_inv_c


def rk4_reference(params: ODEParams, z0, t0: float, t: float, step: float) -> np.ndarray:
    """Classical fixed-step RK4 integration of du/dt = A u + c (test oracle)."""
    z0 = linalg.as_vector(z0, dim=params.dim)
    if step <= 0:
        raise InvalidArgumentError("step must be positive")
    if t < t0:
        raise InvalidArgumentError(f"backward solving not supported (t={t} < t0={t0})")
    a, c = params.a, params.c

    def f(u):
        return a @ u + c

    u = z0.copy()
    remaining = t - t0
    n_full = int(remaining / step)
    for _ in range(n_full):
        k1 = f(u)
        k2 = f(u + 0.5 * step * k1)
        k3 = f(u + 0.5 * step * k2)
        k4 = f(u + step * k3)
        u = u + (step / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    h = remaining - n_full * step
    if h > 1e-12 * max(1.0, abs(remaining)):
        k1 = f(u)
        k2 = f(u + 0.5 * h * k1)
        k3 = f(u + 0.5 * h * k2)
        k4 = f(u + h * k3)
        u = u + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
    return u


def propagate_variance(params: ODEParams, dt: float, sigma2) -> np.ndarray:
    """Diagonal of exp(A dt) diag(sigma2) exp(A dt)^T.

    The full congruence form is used, which reduces to exp(2 A dt) sigma2
    in the scalar/diagonal case.
    """
    sigma2 = linalg.as_vector(sigma2, dim=params.dim)
    if np.any(sigma2 < 0):
        raise InvalidArgumentError("sigma2 must be nonnegative")
    if dt < 0:
        raise InvalidArgumentError("dt must be nonnegative")
    if dt == 0 or params.a_is_zero:
        return sigma2.copy()
    e = linalg.mat_exp(params.a, dt)
    return (e * e) @ sigma2


def sample_variance_weights(solutions_at_t) -> np.ndarray | None:
    """Per-dimension unbiased sample variance of solutions, floored.

    Returns None (the uniform-weight marker) when fewer than two
    solutions are available, in which case the caller assigns equal
    weights.
    """
    sols = list(solutions_at_t)
    if len(sols) < 2:
        return None
    arr = np.stack([linalg.as_vector(s) for s in sols], axis=0)
    return np.maximum(arr.var(axis=0, ddof=1), VARIANCE_FLOOR)


@dataclass
class StartedSolution:
    """One per-visit initial condition for the latent ODE."""

    index: int
    t: float
    value: np.ndarray  # (d,)
    a_inv_c: np.ndarray | None = None  # cached when A is nonzero

    def __post_init__(self):
        self.value = linalg.as_vector(self.value)


def make_starts(params: ODEParams, times, values) -> list[StartedSolution]:
    """Bundle observed (time, value) pairs into starts, caching A^-1 c."""
    times = list(times)
    a_inv_c = None
    if not params.a_is_zero:
        a_inv_c = linalg.mat_inv(params.a) @ params.c
    return [
        StartedSolution(k, float(t), np.asarray(v, dtype=float), a_inv_c)
        for k, (t, v) in enumerate(zip(times, np.asarray(values, dtype=float).T))
    ]


def solve_from_start(params: ODEParams, start: StartedSolution, t: float) -> np.ndarray:
    """solve_ivp from a start, reusing its cached A^-1 c."""
    if t < start.t:
        raise InvalidArgumentError(f"backward solving not supported (t={t} < t_k={start.t})")
    if t == start.t:
        return start.value.copy()
    if params.a_is_zero:
        return params.c * (t - start.t) + start.value
    a_inv_c = start.a_inv_c
    if a_inv_c is None:
        a_inv_c = linalg.mat_inv(params.a) @ params.c
    return linalg.mat_exp(params.a, t - start.t) @ (a_inv_c + start.value) - a_inv_c


def combine_solutions(
    solutions: np.ndarray, variances: np.ndarray | None
) -> tuple[np.ndarray, np.ndarray]:
    """Inverse-variance weighted combination; equal weights when variances is None.

    solutions and variances are (n_starts, d); returns (estimate (d,),
    weights (n_starts, d)) with weights normalized to sum to 1 per
    dimension.
    """
    n = solutions.shape[0]
    if variances is None:
        weights = np.full_like(solutions, 1.0 / n)
    else:
        inv = 1.0 / np.maximum(variances, VARIANCE_FLOOR)
        weights = inv / inv.sum(axis=0)
    return (weights * solutions).sum(axis=0), weights


@dataclass
class TrajectoryPoint:
    """Weighted estimate at one query time with its ingredients."""

    time: float
    estimate: np.ndarray  # (d,)
    start_indices: tuple[int, ...]
    solutions: np.ndarray  # (n_starts, d)
    variances: np.ndarray | None  # (n_starts, d); None when weights are uniform
    weights: np.ndarray  # (n_starts, d), sums to 1 per dimension


@dataclass
class SmoothedTrajectory:
    """Weighted-ensemble latent trajectory over a set of query times."""

    times: list[float]
    points: list[TrajectoryPoint] = field(default_factory=list)

    @property
    def estimates(self) -> np.ndarray:
        """(d, n_times) matrix of estimates."""
        return np.stack([p.estimate for p in self.points], axis=1)


def weighted_estimate(
    starts: list[StartedSolution],
    params: ODEParams,
    t: float,
    variance_mode: str = "sample",
    sigma2=None,
) -> TrajectoryPoint:
    """Inverse-variance weighted estimate of the trajectory at time t.

    Only starts with t_k <= t are eligible (no peeking at later
    observations). In "closed_form" mode, variances are the known noise
    level sigma2 propagated through the dynamics. In "sample" mode, the
    variance of start k is the sample variance of the solutions started
    strictly between t_k and t; if any eligible start has fewer than two
    such intermediate solutions, all eligible starts get equal weights.
    """
    if variance_mode not in ("sample", "closed_form"):
        raise InvalidArgumentError(f"unknown variance_mode {variance_mode!r}")
    eligible = [s for s in starts if s.t <= t]
    if not eligible:
        raise InvalidArgumentError(f"no start at or before query time {t}")
    solution_by_index = {s.index: solve_from_start(params, s, t) for s in eligible}
    solutions = np.stack([solution_by_index[s.index] for s in eligible], axis=0)

    variances: np.ndarray | None
    if variance_mode == "closed_form":
        if sigma2 is None:
            raise InvalidArgumentError("closed_form mode requires sigma2")
        variances = np.stack(
            [np.maximum(propagate_variance(params, t - s.t, sigma2), VARIANCE_FLOOR) for s in eligible],
            axis=0,
        )
    else:
        per_start = []
        for s in eligible:
            inter = [j.index for j in starts if s.t < j.t < t]
            per_start.append(sample_variance_weights([solution_by_index[i] for i in inter]))
        variances = np.stack(per_start, axis=0) if all(v is not None for v in per_start) else None

    estimate, weights = combine_solutions(solutions, variances)
    return TrajectoryPoint(
        time=float(t),
        estimate=estimate,
        start_indices=tuple(s.index for s in eligible),
        solutions=solutions,
        variances=variances,
        weights=weights,
    )
