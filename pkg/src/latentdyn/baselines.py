"""Comparator methods: polynomial least squares and continuous-time AR(1).

All fits operate per latent dimension on an encoded series (values as a
(d, n) matrix over n visit times). Per-individual fits are independent
and may run in parallel.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .errors import InvalidArgumentError, UnderdeterminedFitError

RIDGE_DAMPING = 1e-6

# decay-rate search grid for the AR(1) conditional least squares fit
_THETA_GRID = np.concatenate([[0.0], np.geomspace(1e-3, 10.0, 40)])
_GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


@dataclass
class RegressionFit:
    """Per-dimension polynomial-in-time least squares fit."""

    coeffs: np.ndarray  # (d, degree+1), ascending powers of t
    degree: int
    window_times: np.ndarray  # visit times the fit used

    def predict(self, t: float) -> np.ndarray:
        powers = np.array([t**j for j in range(self.degree + 1)])
        return self.coeffs @ powers


def fit_ols(times, values, degree: int = 1) -> RegressionFit:
    """Least-squares polynomial fit of each dimension against time."""
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if degree not in (1, 2):
        raise InvalidArgumentError("degree must be 1 or 2")
    if np.unique(times).size < degree + 1:
        raise UnderdeterminedFitError(
            f"need at least {degree + 1} distinct time points, got {np.unique(times).size}"
        )
    design = np.vander(times, degree + 1, increasing=True)
    coeffs, *_ = np.linalg.lstsq(design, values.T, rcond=None)
    return RegressionFit(coeffs.T, degree, times.copy())


def predict_regression(
    fit: RegressionFit, t_current: float, z_current, t_query: float, shifted: bool
) -> np.ndarray:
    """Extrapolate a fit; shifted mode anchors it at the current value."""
    if shifted:
        return fit.predict(t_query) - fit.predict(t_current) + np.asarray(z_current, dtype=float)
    return fit.predict(t_query)


def constant_fit(values) -> RegressionFit:
    """Degree-1 fit with zero slope through the mean (carry-forward fallback).

    Used where fewer than two past visits exist, in which case a global
    regression can only carry the current value forward.
    """
    values = np.atleast_2d(np.asarray(values, dtype=float))
    coeffs = np.stack([values.mean(axis=1), np.zeros(values.shape[0])], axis=1)
    return RegressionFit(coeffs, 1, np.zeros(0))


@dataclass
class BaselineSlopePredictor:
    """Stage-2 model: per-dimension linear map from baseline covariates to slopes."""

    intercept: np.ndarray  # (d,)
    coef: np.ndarray  # (d, q)
    baseline_mean: np.ndarray  # (q,)

    def predict_slope(self, baseline) -> np.ndarray:
        x = np.asarray(baseline, dtype=float) - self.baseline_mean
        return self.intercept + self.coef @ x


def fit_baseline_informed_slopes(encoded_series, baselines) -> BaselineSlopePredictor:
    """Two-stage slope model.

    Stage 1 fits a degree-1 least squares line to every individual's full
    encoded series and keeps the slopes. Stage 2 regresses those slopes
    on the (centered) baseline covariates per latent dimension, with a
    small ridge damping against rank deficiency. Identical baselines
    therefore predict the mean slope exactly.
    """
    slopes, rows = [], []
    for (times, values), baseline in zip(encoded_series, baselines):
        fit = fit_ols(times, values, degree=1)
        slopes.append(fit.coeffs[:, 1])
        rows.append(np.asarray(baseline, dtype=float))
    if not rows:
        raise UnderdeterminedFitError("no individuals to fit slopes on")
    y = np.stack(slopes, axis=0)  # (n, d)
    x = np.stack(rows, axis=0)  # (n, q)
    x_mean = x.mean(axis=0)
    xc = x - x_mean
    gram = xc.T @ xc + RIDGE_DAMPING * np.eye(x.shape[1])
    coef = np.linalg.solve(gram, xc.T @ (y - y.mean(axis=0)))  # (q, d)
    return BaselineSlopePredictor(intercept=y.mean(axis=0), coef=coef.T, baseline_mean=x_mean)


def predict_baseline_informed(
    predictor: BaselineSlopePredictor, baseline, t_current: float, z_current, t_query: float
) -> np.ndarray:
    """Predicted slope applied from the current encoded value."""
    slope = predictor.predict_slope(baseline)
    return np.asarray(z_current, dtype=float) + slope * (t_query - t_current)


@dataclass
class CAR1Fit:
    """Continuous-time AR(1) per latent dimension: decay toward a long-run mean."""

    mean: np.ndarray  # (d,)
    theta: np.ndarray  # (d,), decay rate per unit time, >= 0
    innovation_scale: np.ndarray  # (d,)
    converged: np.ndarray  # (d,) bool


def _car1_objective(theta: float, t: np.ndarray, z: np.ndarray) -> tuple[float, float]:
    """Conditional least squares for one dimension at fixed theta.

    Returns (sum of squared one-step errors, optimal long-run mean).
    """
    dt = np.diff(t)
    phi = np.exp(-theta * dt)
    resid_base = z[1:] - phi * z[:-1]
    one_minus = 1.0 - phi
    denom = float(np.sum(one_minus**2))
    m = float(np.sum(one_minus * resid_base) / denom) if denom > 1e-300 else float(z.mean())
    err = resid_base - m * one_minus
    return float(np.sum(err**2)), m


def fit_car1(times, values) -> CAR1Fit:
    """Grid search over the decay rate plus golden-section refinement."""
    times = np.asarray(times, dtype=float)
    values = np.atleast_2d(np.asarray(values, dtype=float))
    if times.size < 3:
        raise UnderdeterminedFitError(f"need at least 3 visits, got {times.size}")
    d = values.shape[0]
    mean = np.zeros(d)
    theta = np.zeros(d)
    scale = np.zeros(d)
    converged = np.zeros(d, dtype=bool)
    for dim in range(d):
        z = values[dim]
        grid_scores = [_car1_objective(th, times, z)[0] for th in _THETA_GRID]
        best = int(np.argmin(grid_scores))
        lo = _THETA_GRID[max(best - 1, 0)]
        hi = _THETA_GRID[min(best + 1, _THETA_GRID.size - 1)]
        a, b = lo, hi
        fa_x, fb_x = a + (1 - _GOLDEN) * (b - a), a + _GOLDEN * (b - a)
        fa, _ = _car1_objective(fa_x, times, z)
        fb, _ = _car1_objective(fb_x, times, z)
        for _ in range(70):
            if fa <= fb:
                b, fb_x, fb = fb_x, fa_x, fa
                fa_x = a + (1 - _GOLDEN) * (b - a)
                fa, _ = _car1_objective(fa_x, times, z)
            else:
                a, fa_x, fa = fa_x, fb_x, fb
                fb_x = a + _GOLDEN * (b - a)
                fb, _ = _car1_objective(fb_x, times, z)
        th = fa_x if fa <= fb else fb_x
        score, m = _car1_objective(th, times, z)
        ok = score <= grid_scores[best] + 1e-12 * max(1.0, grid_scores[best])
        if not ok:  # keep the best grid point but flag the failure
            th = _THETA_GRID[best]
            score, m = _car1_objective(th, times, z)
        theta[dim] = th
        mean[dim] = m
        scale[dim] = np.sqrt(score / max(times.size - 1, 1))
        converged[dim] = bool(ok and np.isfinite(score))
    return CAR1Fit(mean, theta, scale, converged)


def predict_car1(fit: CAR1Fit, z_current, dt: float) -> np.ndarray:
    """m + e^{-theta dt} (z_current - m), elementwise per dimension."""
    z = np.asarray(z_current, dtype=float)
    return fit.mean + np.exp(-fit.theta * dt) * (z - fit.mean)


def write_fits_csv(path, named_fits) -> None:
    """Export fits as rows of (id, dimension, coefficients..., converged)."""
    from .pipeline import format_float

    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "dimension", "kind", "c0", "c1", "c2", "converged"])
        for ind_id, fit in named_fits:
            if isinstance(fit, RegressionFit):
                for dim in range(fit.coeffs.shape[0]):
                    cs = list(fit.coeffs[dim]) + [0.0] * (3 - fit.coeffs.shape[1])
                    w.writerow([ind_id, dim, f"ols{fit.degree}"] + [format_float(c) for c in cs] + ["true"])
            elif isinstance(fit, CAR1Fit):
                for dim in range(fit.mean.size):
                    w.writerow(
                        [ind_id, dim, "car1"]
                        + [format_float(v) for v in (fit.mean[dim], fit.theta[dim], fit.innovation_scale[dim])]
                        + [str(bool(fit.converged[dim])).lower()]
                    )
            else:
                raise InvalidArgumentError(f"cannot export fit of type {type(fit).__name__}")
