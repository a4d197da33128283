"""Dataset ingestion and preprocessing.

File formats:
  time-series CSV: header ``id,time,item_1,...,item_p``
  baseline CSV:    header ``id,base_1,...,base_q``
both UTF-8 with ``.`` as decimal separator. Every individual needs rows
in both files; visit times are months since the shared baseline visit,
which must be at time 0.

Preprocessing follows a fixed filter order: minimum visit count, low
sum-score variance, outlier-visit removal, then a re-check of the
minimum visit count (outlier removal can shrink an individual below the
threshold). Filters never mutate their input dataset.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from .errors import (
    DegenerateItemError,
    EmptyDatasetError,
    InvalidArgumentError,
    SchemaError,
)

LOGIT_EPS = 0.01

# when an individual's sum-score differences have zero IQR, use this
# absolute difference as the outlier threshold instead
OUTLIER_IQR_FLOOR = 2.0


@dataclass
class Individual:
    """One subject: visit times, per-visit item matrix, baseline covariates."""

    id: str
    times: np.ndarray  # (T+1,), strictly increasing, first == 0
    items: np.ndarray  # (p, T+1)
    baseline: np.ndarray  # (q,)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        self.items = np.asarray(self.items, dtype=float)
        self.baseline = np.asarray(self.baseline, dtype=float)
        if self.times.ndim != 1 or self.times.size < 1:
            raise InvalidArgumentError(f"{self.id}: need at least one visit")
        if self.times[0] != 0.0:
            raise InvalidArgumentError(f"{self.id}: first visit must be at time 0")
        if np.any(np.diff(self.times) <= 0):
            raise InvalidArgumentError(f"{self.id}: visit times must be strictly increasing")
        if self.items.shape != (self.items.shape[0], self.times.size):
            raise InvalidArgumentError(f"{self.id}: item matrix does not match visit count")
        for name, arr in (("times", self.times), ("items", self.items), ("baseline", self.baseline)):
            if not np.isfinite(arr).all():
                raise InvalidArgumentError(f"{self.id}: non-finite values in {name}")

    @property
    def n_visits(self) -> int:
        return int(self.times.size)

    def sum_scores(self) -> np.ndarray:
        """Per-visit total across items."""
        return self.items.sum(axis=0)


@dataclass
class Dataset:
    individuals: list[Individual]
    # shared per-item (min, max) used by the rescale+logit transform
    item_ranges: list[tuple[float, float]] | None = None
    transform: dict | None = None

    @property
    def n_items(self) -> int:
        return int(self.individuals[0].items.shape[0]) if self.individuals else 0

    @property
    def n_baseline(self) -> int:
        return int(self.individuals[0].baseline.size) if self.individuals else 0

    def ids(self) -> list[str]:
        return [ind.id for ind in self.individuals]


@dataclass
class FilterReport:
    filter_name: str
    input_count: int
    removed: int
    retained: int
    visits_removed: int = 0
    thresholds: dict = field(default_factory=dict)
    removed_ids: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "filter": self.filter_name,
            "input_count": self.input_count,
            "removed": self.removed,
            "retained": self.retained,
            "visits_removed": self.visits_removed,
            "thresholds": self.thresholds,
            "removed_ids": list(self.removed_ids),
        }


def reports_to_json(reports: list[FilterReport]) -> str:
    return json.dumps([r.to_dict() for r in reports], indent=2)


# --- ingestion ---


def _parse_float(text: str, row: int, column: str, path: str) -> float:
    try:
        return float(text)
    except (TypeError, ValueError):
        raise SchemaError(f"{path}: non-numeric value {text!r} at row {row}, column {column!r}") from None


def load_dataset(time_series_path, baseline_path) -> Dataset:
    """Assemble individuals from the two CSV files, validating the schema."""
    ts_path, base_path = str(time_series_path), str(baseline_path)
    with open(ts_path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise EmptyDatasetError(f"{ts_path}: file is empty")
    header = rows[0]
    if len(header) < 3 or header[0] != "id" or header[1] != "time":
        raise SchemaError(f"{ts_path}: expected header starting 'id,time,item_...', got {header[:3]}")
    item_cols = header[2:]
    visits: dict[str, dict[float, np.ndarray]] = {}
    order: list[str] = []
    for r, row in enumerate(rows[1:], start=2):
        if not row:
            continue
        if len(row) != len(header):
            raise SchemaError(f"{ts_path}: row {r} has {len(row)} fields, expected {len(header)}")
        ind_id = row[0]
        t = _parse_float(row[1], r, "time", ts_path)
        values = np.array([_parse_float(v, r, c, ts_path) for v, c in zip(row[2:], item_cols)])
        if ind_id not in visits:
            visits[ind_id] = {}
            order.append(ind_id)
        if t in visits[ind_id]:
            raise SchemaError(f"{ts_path}: duplicate (id, time) row for id {ind_id!r} at time {t}")
        visits[ind_id][t] = values
    if not visits:
        raise EmptyDatasetError(f"{ts_path}: no data rows")

    with open(base_path, newline="", encoding="utf-8") as fh:
        brows = list(csv.reader(fh))
    if not brows:
        raise EmptyDatasetError(f"{base_path}: file is empty")
    bheader = brows[0]
    if not bheader or bheader[0] != "id":
        raise SchemaError(f"{base_path}: expected header starting 'id,base_...'")
    base_cols = bheader[1:]
    baselines: dict[str, np.ndarray] = {}
    for r, row in enumerate(brows[1:], start=2):
        if not row:
            continue
        if len(row) != len(bheader):
            raise SchemaError(f"{base_path}: row {r} has {len(row)} fields, expected {len(bheader)}")
        if row[0] in baselines:
            raise SchemaError(f"{base_path}: duplicate baseline row for id {row[0]!r}")
        baselines[row[0]] = np.array(
            [_parse_float(v, r, c, base_path) for v, c in zip(row[1:], base_cols)]
        )

    missing_base = [i for i in order if i not in baselines]
    if missing_base:
        raise SchemaError(f"{base_path}: no baseline row for ids {missing_base[:5]}")
    missing_ts = [i for i in baselines if i not in visits]
    if missing_ts:
        raise SchemaError(f"{ts_path}: no time-series rows for ids {missing_ts[:5]}")

    individuals = []
    for ind_id in order:
        times = np.array(sorted(visits[ind_id]))
        items = np.stack([visits[ind_id][t] for t in times], axis=1)
        try:
            individuals.append(Individual(ind_id, times, items, baselines[ind_id]))
        except InvalidArgumentError as exc:
            raise SchemaError(str(exc)) from None
    return Dataset(individuals)


def format_float(x: float) -> str:
    """Fixed 9-significant-digit formatting used for every numeric output."""
    return f"{float(x):.9g}"


def save_dataset(dataset: Dataset, time_series_path, baseline_path) -> None:
    p = dataset.n_items
    q = dataset.n_baseline
    with open(time_series_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id", "time"] + [f"item_{j + 1}" for j in range(p)])
        for ind in dataset.individuals:
            for k, t in enumerate(ind.times):
                w.writerow([ind.id, format_float(t)] + [format_float(v) for v in ind.items[:, k]])
    with open(baseline_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["id"] + [f"base_{j + 1}" for j in range(q)])
        for ind in dataset.individuals:
            w.writerow([ind.id] + [format_float(v) for v in ind.baseline])


# --- filters ---


def filter_min_visits(dataset: Dataset, min_visits: int = 2) -> tuple[Dataset, FilterReport]:
    """Drop individuals with fewer than ``min_visits`` visits."""
    kept, removed = [], []
    for ind in dataset.individuals:
        (kept if ind.n_visits >= min_visits else removed).append(ind)
    report = FilterReport(
        "min_visits",
        input_count=len(dataset.individuals),
        removed=len(removed),
        retained=len(kept),
        thresholds={"min_visits": min_visits},
        removed_ids=[i.id for i in removed],
    )
    return replace(dataset, individuals=kept), report


def filter_low_variance(dataset: Dataset, threshold: float = 1.0) -> tuple[Dataset, FilterReport]:
    """Drop individuals whose sum-score sample variance is below threshold.

    Individuals with a single visit count as zero-variance.
    """
    kept, removed = [], []
    for ind in dataset.individuals:
        scores = ind.sum_scores()
        var = float(scores.var(ddof=1)) if scores.size >= 2 else 0.0
        (kept if var >= threshold else removed).append(ind)
    report = FilterReport(
        "low_variance",
        input_count=len(dataset.individuals),
        removed=len(removed),
        retained=len(kept),
        thresholds={"variance": threshold},
        removed_ids=[i.id for i in removed],
    )
    return replace(dataset, individuals=kept), report


def remove_outlier_visits(dataset: Dataset) -> tuple[Dataset, FilterReport]:
    """Drop visits whose sum-score jump from the previous visit is an outlier.

    Per individual, a visit is an outlier when its absolute sum-score
    difference to the previous visit exceeds twice the interquartile
    range of that individual's adjacent differences. One pass, left to
    right, with differences computed on the original series; the
    baseline visit is never removed. A zero IQR falls back to an
    absolute threshold of OUTLIER_IQR_FLOOR sum-score points.
    """
    kept = []
    visits_removed = 0
    for ind in dataset.individuals:
        if ind.n_visits < 2:
            kept.append(ind)
            continue
        scores = ind.sum_scores()
        diffs = np.diff(scores)
        q1, q3 = np.percentile(diffs, [25, 75])
        threshold = 2.0 * (q3 - q1)
        if threshold <= 0.0:
            threshold = OUTLIER_IQR_FLOOR
        keep_idx = [0] + [k for k in range(1, ind.n_visits) if abs(diffs[k - 1]) <= threshold]
        visits_removed += ind.n_visits - len(keep_idx)
        if len(keep_idx) == ind.n_visits:
            kept.append(ind)
        else:
            kept.append(
                Individual(ind.id, ind.times[keep_idx], ind.items[:, keep_idx], ind.baseline)
            )
    report = FilterReport(
        "outlier_visits",
        input_count=len(dataset.individuals),
        removed=0,
        retained=len(kept),
        visits_removed=visits_removed,
        thresholds={"iqr_multiplier": 2.0, "zero_iqr_floor": OUTLIER_IQR_FLOOR},
    )
    return replace(dataset, individuals=kept), report


def preprocess(
    dataset: Dataset, min_visits: int = 2, variance_threshold: float = 1.0
) -> tuple[Dataset, list[FilterReport]]:
    """Apply the full filter chain in its fixed order."""
    reports = []
    dataset, rep = filter_min_visits(dataset, min_visits)
    reports.append(rep)
    dataset, rep = filter_low_variance(dataset, variance_threshold)
    reports.append(rep)
    dataset, rep = remove_outlier_visits(dataset)
    reports.append(rep)
    dataset, rep = filter_min_visits(dataset, min_visits)
    rep.filter_name = "min_visits_recheck"
    reports.append(rep)
    return dataset, reports


# --- item transform ---


def _observed_ranges(dataset: Dataset) -> list[tuple[float, float]]:
    lo = np.full(dataset.n_items, np.inf)
    hi = np.full(dataset.n_items, -np.inf)
    for ind in dataset.individuals:
        lo = np.minimum(lo, ind.items.min(axis=1))
        hi = np.maximum(hi, ind.items.max(axis=1))
    return [(float(a), float(b)) for a, b in zip(lo, hi)]


def transform_items(dataset: Dataset, mode: str = "rescale_logit") -> Dataset:
    """Map items to (eps, 1-eps) per item range and apply the logit.

    ``mode="none"`` returns the dataset unchanged (fresh object). The
    item midpoint maps to 0; the inverse transform is exact to 1e-10.
    """
    if mode == "none":
        return replace(dataset)
    if mode != "rescale_logit":
        raise InvalidArgumentError(f"unknown transform mode {mode!r}")
    ranges = dataset.item_ranges or _observed_ranges(dataset)
    degenerate = [j for j, (lo, hi) in enumerate(ranges) if hi <= lo]
    if degenerate:
        raise DegenerateItemError(
            f"items with max == min cannot be rescaled: {[f'item_{j + 1}' for j in degenerate]}"
        )
    lo = np.array([r[0] for r in ranges])[:, None]
    hi = np.array([r[1] for r in ranges])[:, None]
    individuals = []
    for ind in dataset.individuals:
        u = LOGIT_EPS + (1.0 - 2.0 * LOGIT_EPS) * (ind.items - lo) / (hi - lo)
        u = np.clip(u, 1e-9, 1.0 - 1e-9)  # guard against out-of-range metadata
        individuals.append(Individual(ind.id, ind.times, np.log(u / (1.0 - u)), ind.baseline))
    return Dataset(
        individuals,
        item_ranges=ranges,
        transform={"mode": "rescale_logit", "eps": LOGIT_EPS, "ranges": ranges},
    )


def inverse_transform_items(dataset: Dataset) -> Dataset:
    """Undo ``transform_items`` using the stored transform info."""
    if not dataset.transform or dataset.transform.get("mode") != "rescale_logit":
        raise InvalidArgumentError("dataset carries no rescale_logit transform")
    eps = dataset.transform["eps"]
    ranges = dataset.transform["ranges"]
    lo = np.array([r[0] for r in ranges])[:, None]
    hi = np.array([r[1] for r in ranges])[:, None]
    individuals = []
    for ind in dataset.individuals:
        u = 1.0 / (1.0 + np.exp(-ind.items))
        x = lo + (hi - lo) * (u - eps) / (1.0 - 2.0 * eps)
        individuals.append(Individual(ind.id, ind.times, x, ind.baseline))
    return Dataset(individuals, item_ranges=ranges)


def inverse_transform_values(values: np.ndarray, transform: dict) -> np.ndarray:
    """Inverse transform applied to raw item columns (e.g. decoder output)."""
    ranges = transform["ranges"]
    eps = transform["eps"]
    lo = np.array([r[0] for r in ranges]).reshape(-1, *([1] * (values.ndim - 1)))
    hi = np.array([r[1] for r in ranges]).reshape(-1, *([1] * (values.ndim - 1)))
    u = 1.0 / (1.0 + np.exp(-values))
    return lo + (hi - lo) * (u - eps) / (1.0 - 2.0 * eps)
