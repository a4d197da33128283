"""Next-visit prediction protocol, error metrics and the replicate study.

Every method predicts the latent state at visit k+1 from information
available through visit k; latent errors are measured against the
trained encoder's mean at visit k+1, item errors against the observed
items after decoding the latent prediction. Comparators that need a
global fit (baseline-informed slopes, AR(1)) are fitted once per
dataset; their predictions still read only the current encoded value,
so records respect the information cutoff given the fitted artifacts.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import baselines, model as model_mod, nnet, seeds
from .datagen import SimConfig, simulate_cohort
from .errors import (
    EmptyInputError,
    InvalidArgumentError,
    TrainingDivergedError,
    UnderdeterminedFitError,
)
from .model import JointModel, ModelConfig
from .pipeline import Dataset, format_float

METHODS = (
    "ode",
    "oracle",
    "reg_shift",
    "reg_noshift",
    "reg_quad_shift",
    "reg_quad_noshift",
    "reg_baseline",
    "ar1",
)

DEFAULT_METHODS = ("ode", "reg_baseline", "reg_shift")
DEFAULT_REFERENCE = "reg_shift"


@dataclass
class PredictionRecord:
    individual_id: str
    anchor_index: int  # prediction uses visits 0..anchor_index
    target_time: float  # always the time of visit anchor_index + 1
    method: str
    latent_pred: np.ndarray
    item_pred: np.ndarray
    latent_obs: np.ndarray  # encoded mean at the target visit
    items_obs: np.ndarray  # observed items at the target visit
    latent_sd: np.ndarray  # encoder standard deviation at the target visit


@dataclass
class Comparators:
    """Globally fitted comparator artifacts for one (model, dataset) pair."""

    slope_predictor: baselines.BaselineSlopePredictor | None = None
    car1_fits: dict[str, baselines.CAR1Fit] = field(default_factory=dict)
    car1_excluded_ids: list[str] = field(default_factory=list)


def fit_comparators(model: JointModel, dataset: Dataset, methods) -> Comparators:
    """Fit the global comparators the requested methods need."""
    comp = Comparators()
    encodings = {ind.id: model_mod.encode(model, ind) for ind in dataset.individuals}
    if "reg_baseline" in methods:
        series, covars = [], []
        for ind in dataset.individuals:
            enc = encodings[ind.id]
            if np.unique(enc.times).size >= 2:
                series.append((enc.times, enc.means))
                covars.append(ind.baseline)
        comp.slope_predictor = baselines.fit_baseline_informed_slopes(series, covars)
    if "ar1" in methods:
        for ind in dataset.individuals:
            enc = encodings[ind.id]
            try:
                fit = baselines.fit_car1(enc.times, enc.means)
            except UnderdeterminedFitError:
                comp.car1_excluded_ids.append(ind.id)
                continue
            if np.all(fit.converged):
                comp.car1_fits[ind.id] = fit
            else:
                comp.car1_excluded_ids.append(ind.id)
    return comp


def _regression_prediction(times, means, k, t_next, degree, shifted):
    """Per-anchor causal regression refit; falls back toward carry-forward
    when too few past visits exist to identify the polynomial."""
    past_t, past_z = times[: k + 1], means[:, : k + 1]
    n_distinct = np.unique(past_t).size
    use_degree = min(degree, n_distinct - 1)
    if use_degree < 1:
        fit = baselines.constant_fit(past_z)
    else:
        fit = baselines.fit_ols(past_t, past_z, degree=use_degree)
    return baselines.predict_regression(fit, float(times[k]), means[:, k], t_next, shifted)


def next_visit_predictions(
    model: JointModel,
    dataset: Dataset,
    methods=DEFAULT_METHODS,
    comparators: Comparators | None = None,
) -> tuple[list[PredictionRecord], dict[str, int]]:
    """One record per method per (individual, visit k -> k+1) pair.

    Returns (records, per-method count of excluded prediction slots).
    """
    unknown = [m for m in methods if m not in METHODS]
    if unknown:
        raise InvalidArgumentError(f"unknown methods {unknown}; choose from {METHODS}")
    needs_fit = {"reg_baseline", "ar1"}
    if comparators is None:
        comparators = fit_comparators(model, dataset, [m for m in methods if m in needs_fit])
    if "reg_baseline" in methods and comparators.slope_predictor is None:
        raise InvalidArgumentError("reg_baseline requested but comparators carry no slope predictor")

    records: list[PredictionRecord] = []
    excluded = {m: 0 for m in methods}
    for ind in dataset.individuals:
        if ind.n_visits < 2:
            continue
        enc = model_mod.encode(model, ind)
        for k in range(ind.n_visits - 1):
            t_next = float(ind.times[k + 1])
            obs_latent = enc.means[:, k + 1]
            obs_sd = enc.stds[:, k + 1]
            obs_items = ind.items[:, k + 1]
            z_k = enc.means[:, k]
            for method in methods:
                if method == "ode":
                    latent, items = model_mod.predict_next(model, ind, k, t_next)
                    records.append(
                        PredictionRecord(ind.id, k, t_next, method, latent, items, obs_latent, obs_items, obs_sd)
                    )
                    continue
                if method == "oracle":
                    latent = obs_latent.copy()
                elif method == "reg_shift":
                    latent = _regression_prediction(ind.times, enc.means, k, t_next, 1, True)
                elif method == "reg_noshift":
                    latent = _regression_prediction(ind.times, enc.means, k, t_next, 1, False)
                elif method == "reg_quad_shift":
                    latent = _regression_prediction(ind.times, enc.means, k, t_next, 2, True)
                elif method == "reg_quad_noshift":
                    latent = _regression_prediction(ind.times, enc.means, k, t_next, 2, False)
                elif method == "reg_baseline":
                    latent = baselines.predict_baseline_informed(
                        comparators.slope_predictor, ind.baseline, float(ind.times[k]), z_k, t_next
                    )
                elif method == "ar1":
                    fit = comparators.car1_fits.get(ind.id)
                    if fit is None:
                        excluded[method] += 1
                        continue
                    latent = baselines.predict_car1(fit, z_k, t_next - float(ind.times[k]))
                items = nnet.mlp_apply(model.decoder, latent[:, None])[:, 0]
                records.append(
                    PredictionRecord(ind.id, k, t_next, method, latent, items, obs_latent, obs_items, obs_sd)
                )
    return records, excluded


def mse(records: list[PredictionRecord], space: str = "latent") -> float:
    """Mean over records of the squared Euclidean error in the chosen space."""
    if not records:
        raise EmptyInputError("mse over zero records")
    if space == "latent":
        errs = [np.sum((r.latent_pred - r.latent_obs) ** 2) for r in records]
    elif space == "reconstructed":
        errs = [np.sum((r.item_pred - r.items_obs) ** 2) for r in records]
    else:
        raise InvalidArgumentError(f"unknown space {space!r}")
    return float(np.mean(errs))


def relative_improvement(candidate_mse: float, reference_mse: float) -> float:
    """Percent error reduction of the candidate relative to the reference."""
    if reference_mse <= 0:
        raise InvalidArgumentError("reference_mse must be positive")
    return 100.0 * (reference_mse - candidate_mse) / reference_mse


@dataclass
class MethodMetrics:
    mse_latent: float
    mse_reconstructed: float
    n_records: int
    n_excluded: int = 0


@dataclass
class MetricsReport:
    methods: dict[str, MethodMetrics]
    reference: str
    improvements: dict[str, list[float]]  # per replicate, latent space, vs reference
    replicate_count: int = 1
    failed_replicates: list[int] = field(default_factory=list)

    def improvement_summary(self, method: str) -> dict:
        values = self.improvements.get(method, [])
        if not values:
            return {"mean": float("nan"), "min": float("nan"), "max": float("nan")}
        return {
            "mean": float(np.mean(values)),
            "min": float(np.min(values)),
            "max": float(np.max(values)),
        }

    def to_dict(self) -> dict:
        return {
            "reference": self.reference,
            "replicate_count": self.replicate_count,
            "failed_replicates": list(self.failed_replicates),
            "methods": {
                name: {
                    "mse_latent": m.mse_latent,
                    "mse_reconstructed": m.mse_reconstructed,
                    "n_records": m.n_records,
                    "n_excluded": m.n_excluded,
                }
                for name, m in self.methods.items()
            },
            "improvements": {k: list(v) for k, v in self.improvements.items()},
            "improvement_summary": {
                k: self.improvement_summary(k) for k in self.improvements
            },
        }

    def to_json(self) -> str:
        return json.dumps(_round_floats(self.to_dict()), indent=2)


def _round_floats(obj):
    """Round every float to the fixed 9-significant-digit output format."""
    if isinstance(obj, float):
        return float(format_float(obj))
    if isinstance(obj, dict):
        return {k: _round_floats(v) for k, v in obj.items()}
    if isinstance(obj, list):
        return [_round_floats(v) for v in obj]
    return obj


def evaluate_dataset(
    model: JointModel,
    dataset: Dataset,
    methods=DEFAULT_METHODS,
    reference: str = DEFAULT_REFERENCE,
) -> tuple[MetricsReport, list[PredictionRecord]]:
    """Fit comparators, run the prediction protocol, aggregate metrics."""
    records, excluded = next_visit_predictions(model, dataset, methods)
    by_method = {m: [r for r in records if r.method == m] for m in methods}
    metrics = {}
    for m in methods:
        recs = by_method[m]
        metrics[m] = MethodMetrics(
            mse_latent=mse(recs, "latent") if recs else float("nan"),
            mse_reconstructed=mse(recs, "reconstructed") if recs else float("nan"),
            n_records=len(recs),
            n_excluded=excluded.get(m, 0),
        )
    improvements = {}
    if reference in metrics and metrics[reference].n_records:
        ref_mse = metrics[reference].mse_latent
        for m in methods:
            if m != reference and metrics[m].n_records:
                improvements[m] = [relative_improvement(metrics[m].mse_latent, ref_mse)]
    return MetricsReport(metrics, reference, improvements), records


def replicate_study(
    sim_config: SimConfig,
    n_replicates: int = 20,
    model_config: ModelConfig | None = None,
    root_seed: int = 0,
    methods=DEFAULT_METHODS,
    reference: str = DEFAULT_REFERENCE,
) -> MetricsReport:
    """Repeated simulate/train/evaluate runs with fresh seeds per replicate.

    Both the cohort and the network initialization are resampled every
    replicate. Replicates whose training diverges are recorded as failed
    and skipped in the aggregates.
    """
    if n_replicates < 1:
        raise InvalidArgumentError("n_replicates must be >= 1")
    model_config = model_config or ModelConfig(param_mode="homogeneous")
    per_method: dict[str, list[MethodMetrics]] = {m: [] for m in methods}
    improvements: dict[str, list[float]] = {m: [] for m in methods if m != reference}
    failed: list[int] = []
    for r in range(n_replicates):
        sim_seed = int(seeds.seed_sequence(root_seed, seeds.REPLICATE, r, seeds.SIMULATION).generate_state(1)[0])
        net_seed = int(seeds.seed_sequence(root_seed, seeds.REPLICATE, r, seeds.MODEL_INIT).generate_state(1)[0])
        cohort = simulate_cohort(replace(sim_config, seed=sim_seed))
        dataset = cohort.dataset
        config = replace(model_config, seed=net_seed)
        jm = JointModel.create(config, dataset.n_items, dataset.n_baseline)
        try:
            jm, _ = model_mod.train(jm, dataset)
        except TrainingDivergedError:
            failed.append(r)
            continue
        report, _ = evaluate_dataset(jm, dataset, methods, reference)
        for m in methods:
            per_method[m].append(report.methods[m])
        for m, vals in report.improvements.items():
            improvements[m].extend(vals)
    aggregated = {
        m: MethodMetrics(
            mse_latent=float(np.mean([x.mse_latent for x in per_method[m]])) if per_method[m] else float("nan"),
            mse_reconstructed=float(np.mean([x.mse_reconstructed for x in per_method[m]])) if per_method[m] else float("nan"),
            n_records=int(np.sum([x.n_records for x in per_method[m]])) if per_method[m] else 0,
            n_excluded=int(np.sum([x.n_excluded for x in per_method[m]])) if per_method[m] else 0,
        )
        for m in methods
    }
    return MetricsReport(
        aggregated,
        reference,
        improvements,
        replicate_count=n_replicates,
        failed_replicates=failed,
    )


# --- output writers ---


def write_metrics_csv(report: MetricsReport, path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(
            ["method", "mse_latent", "mse_reconstructed", "n_records", "n_excluded",
             "improvement_mean", "improvement_min", "improvement_max"]
        )
        for name, m in report.methods.items():
            summary = report.improvement_summary(name) if name in report.improvements else None
            w.writerow(
                [name, format_float(m.mse_latent), format_float(m.mse_reconstructed),
                 m.n_records, m.n_excluded]
                + (
                    [format_float(summary["mean"]), format_float(summary["min"]), format_float(summary["max"])]
                    if summary
                    else ["", "", ""]
                )
            )


def write_predictions_csv(records: list[PredictionRecord], path, methods=None) -> None:
    """Plot-ready pivot: one row per (individual, target time)."""
    if methods is None:
        methods = sorted({r.method for r in records})
    slots: dict[tuple[str, int], dict] = {}
    d = records[0].latent_pred.size if records else 0
    for r in records:
        slot = slots.setdefault(
            (r.individual_id, r.anchor_index),
            {"time": r.target_time, "obs": r.latent_obs, "sd": r.latent_sd, "preds": {}},
        )
        slot["preds"][r.method] = r.latent_pred
    header = ["id", "time"]
    header += [f"observed_z{i + 1}" for i in range(d)]
    header += [f"sd_z{i + 1}" for i in range(d)]
    for m in methods:
        header += [f"{m}_z{i + 1}" for i in range(d)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for (ind_id, _anchor), slot in slots.items():
            row = [ind_id, format_float(slot["time"])]
            row += [format_float(v) for v in slot["obs"]]
            row += [format_float(v) for v in slot["sd"]]
            for m in methods:
                pred = slot["preds"].get(m)
                row += [format_float(v) for v in pred] if pred is not None else [""] * d
            w.writerow(row)
