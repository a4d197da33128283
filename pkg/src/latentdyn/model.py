"""Joint model: encoder, decoder, baseline network and latent ODE smoothing.

The encoder maps each visit's items to a latent posterior mean and
standard deviation. A baseline network maps study-entry covariates to
individual ODE parameters. The latent trajectory estimate at each visit
combines the ODE solutions restarted from every earlier visit's encoded
mean; the reconstruction and KL terms of the loss use that smoothed mean
in place of the raw encoded one, plus a consistency penalty between the
two and a regularizer comparing the spread of the solutions with the
spread of the encoded values.

Training is single-threaded with one gradient step per individual.
Inference on a trained model is read-only and thread-safe.
"""

from __future__ import annotations

import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from . import autodiff as ad
from . import nnet, odecore, seeds
from .errors import InvalidArgumentError, NonFiniteError, TrainingDivergedError
from .nnet import MLP, OptimizerState
from .odecore import ODEParams, SmoothedTrajectory
from .pipeline import Individual

log = logging.getLogger(__name__)

PARAM_MODES = ("full", "homogeneous", "constant")

# series length / scaling threshold for the in-graph matrix exponential;
# matches linalg.mat_exp to ~1e-13 so graph and numeric paths agree
_SERIES_TERMS = 14
_SCALING_THRESHOLD = 0.5

# offset added inside the variance-regularizer logs to keep them finite
VAR_REG_OFFSET = 0.1


@dataclass
class ModelConfig:
    latent_dim: int = 2
    encoder_hidden: int = 16
    decoder_hidden: int = 16
    baseline_hidden: int = 32
    param_mode: str = "full"  # which ODE parameter blocks the baseline net emits
    tanh_scale: float = 1.0  # ODE parameters are squashed to [-scale, scale]
    alpha: float = 1.0  # consistency weight
    beta: float = 1.0  # variance-regularizer weight
    learning_rate: float = 1e-3
    epochs: int = 100
    seed: int = 0

    def validate(self) -> None:
        if self.latent_dim < 1:
            raise InvalidArgumentError("latent_dim must be >= 1")
        if self.param_mode not in PARAM_MODES:
            raise InvalidArgumentError(f"param_mode must be one of {PARAM_MODES}")
        if self.tanh_scale <= 0:
            raise InvalidArgumentError("tanh_scale must be positive")
        if self.epochs < 0:
            raise InvalidArgumentError("epochs must be nonnegative")


def n_ode_params(mode: str, d: int) -> int:
    if mode == "full":
        return d * d + d
    if mode == "homogeneous":
        return d * d
    if mode == "constant":
        return d
    raise InvalidArgumentError(f"unknown param_mode {mode!r}")


@dataclass
class LatentEncoding:
    """Per-visit posterior means and standard deviations."""

    means: np.ndarray  # (d, T+1)
    stds: np.ndarray  # (d, T+1), strictly positive
    times: np.ndarray  # (T+1,)


@dataclass
class LossBreakdown:
    kl: float
    recon_nll: float
    consistency: float  # already alpha-weighted
    variance_reg: float  # already beta-weighted
    total: float

    def as_dict(self) -> dict:
        return asdict(self)


@dataclass
class JointModel:
    config: ModelConfig
    encoder: MLP
    decoder: MLP
    baseline_net: MLP

    @classmethod
    def create(cls, config: ModelConfig, n_items: int, n_baseline: int) -> "JointModel":
        config.validate()
        d = config.latent_dim
        encoder = nnet.init_mlp(
            [n_items, config.encoder_hidden, 2 * d], seeds.seed_sequence(config.seed, seeds.ENCODER)
        )
        decoder = nnet.init_mlp(
            [d, config.decoder_hidden, n_items], seeds.seed_sequence(config.seed, seeds.DECODER)
        )
        baseline_net = nnet.init_mlp(
            [n_baseline, config.baseline_hidden, n_ode_params(config.param_mode, d)],
            seeds.seed_sequence(config.seed, seeds.BASELINE_NET),
        )
        return cls(config, encoder, decoder, baseline_net)

    @property
    def latent_dim(self) -> int:
        return self.config.latent_dim

    def parameters(self) -> dict[str, np.ndarray]:
        out = {}
        out.update(nnet.mlp_params(self.encoder, "encoder"))
        out.update(nnet.mlp_params(self.decoder, "decoder"))
        out.update(nnet.mlp_params(self.baseline_net, "baseline"))
        return out

    def set_parameters(self, params: dict[str, np.ndarray]) -> None:
        nnet.set_mlp_params(self.encoder, "encoder", params)
        nnet.set_mlp_params(self.decoder, "decoder", params)
        nnet.set_mlp_params(self.baseline_net, "baseline", params)


# --- inference-path operations (plain numpy) ---


def encode(model: JointModel, individual: Individual) -> LatentEncoding:
    """Column-wise encoding of an individual's item matrix."""
    out = nnet.mlp_apply(model.encoder, individual.items)
    d = model.latent_dim
    means = out[:d, :]
    log_std = np.clip(out[d:, :], nnet.LOG_STD_MIN, nnet.LOG_STD_MAX)
    return LatentEncoding(means, np.exp(log_std), individual.times.copy())


def baseline_to_params(model: JointModel, baseline) -> ODEParams:
    """Map baseline covariates to squashed individual ODE parameters."""
    baseline = np.asarray(baseline, dtype=float)
    raw = nnet.mlp_apply(model.baseline_net, baseline[:, None])[:, 0]
    squashed = model.config.tanh_scale * np.tanh(raw)
    d = model.latent_dim
    mode = model.config.param_mode
    if mode == "full":
        return ODEParams(squashed[: d * d].reshape(d, d), squashed[d * d :])
    if mode == "homogeneous":
        return ODEParams(squashed.reshape(d, d), np.zeros(d))
    return ODEParams(np.zeros((d, d)), squashed)


def smooth_posterior(
    encoding: LatentEncoding, params: ODEParams, query_times
) -> SmoothedTrajectory:
    """Weighted-ensemble trajectory over query times inside the visit window."""
    t0, t_last = float(encoding.times[0]), float(encoding.times[-1])
    query = [float(t) for t in query_times]
    for t in query:
        if t < t0 or t > t_last:
            raise InvalidArgumentError(
                f"query time {t} outside the observed window [{t0}, {t_last}]"
            )
    starts = odecore.make_starts(params, encoding.times, encoding.means)
    traj = SmoothedTrajectory(times=query)
    for t in query:
        traj.points.append(odecore.weighted_estimate(starts, params, t, variance_mode="sample"))
    return traj


def kl_diag_gauss(mu, sigma) -> float:
    """KL divergence of N(mu, diag(sigma^2)) from the standard normal prior."""
    mu = np.asarray(mu, dtype=float)
    sigma = np.asarray(sigma, dtype=float)
    if np.any(sigma <= 0):
        raise InvalidArgumentError("sigma must be strictly positive")
    return float(0.5 * np.sum(mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)))


def predict_next(
    model: JointModel, individual: Individual, upto_visit: int, t_query: float
) -> tuple[np.ndarray, np.ndarray]:
    """Latent and reconstructed-item prediction using visits 0..upto_visit only."""
    k = int(upto_visit)
    if not 0 <= k < individual.n_visits:
        raise InvalidArgumentError(f"visit index {k} out of range")
    t_k = float(individual.times[k])
    if t_query <= t_k:
        raise InvalidArgumentError(f"t_query must be after visit {k} at t={t_k}")
    past = Individual(
        individual.id,
        individual.times[: k + 1],
        individual.items[:, : k + 1],
        individual.baseline,
    )
    encoding = encode(model, past)
    params = baseline_to_params(model, individual.baseline)
    starts = odecore.make_starts(params, encoding.times, encoding.means)
    point = odecore.weighted_estimate(starts, params, t_query, variance_mode="sample")
    items = nnet.mlp_apply(model.decoder, point.estimate[:, None])[:, 0]
    return point.estimate, items


# --- loss graph construction ---


def _scaled_exp_series(m: ad.Node, with_integral: bool) -> tuple[ad.Node, ad.Node | None]:
    """exp(M) (and the phi-function integral series when needed) by Horner."""
    d = m.value.shape[0]
    eye = np.eye(d)
    e_acc = ad.constant(eye)
    for k in range(_SERIES_TERMS, 0, -1):
        e_acc = ad.add(ad.multiply(ad.matmul(m, e_acc), 1.0 / k), eye)
    psi_acc = None
    if with_integral:
        psi_acc = ad.constant(eye)
        for k in range(_SERIES_TERMS, 0, -1):
            psi_acc = ad.add(ad.multiply(ad.matmul(m, psi_acc), 1.0 / (k + 1)), eye)
    return e_acc, psi_acc


def _graph_transition(
    a: ad.Node | None, c: ad.Node | None, dt: float
) -> tuple[ad.Node | None, ad.Node | None]:
    """One time-step map as graph nodes: z -> exp(A dt) z + drift.

    The drift term is (integral_0^dt exp(A s) ds) c, which equals the
    exp(A dt) A^-1 c - A^-1 c of the closed-form solution wherever the
    inverse exists and extends it continuously to singular A, so no
    matrix inverse appears in the graph. The amount of
    scaling-and-squaring is fixed at build time from the numeric value
    of A, which is valid because each training step rebuilds the graph.

    Returns (exp(A dt) node or None when A is absent, drift node or None).
    """
    if a is None:  # constant dynamics: pure drift
        return None, (ad.multiply(c, dt) if c is not None else None)
    norm = float(np.max(np.sum(np.abs(a.value), axis=1))) * abs(dt)
    squarings = max(0, math.ceil(math.log2(norm / _SCALING_THRESHOLD))) if norm > _SCALING_THRESHOLD else 0
    base_dt = dt / (2.0**squarings)
    m = ad.multiply(a, base_dt)
    e, psi = _scaled_exp_series(m, with_integral=c is not None)
    if c is None:
        for _ in range(squarings):
            e = ad.matmul(e, e)
        return e, None
    eye = np.eye(a.value.shape[0])
    # integral over the scaled step: psi_int = integral_0^base_dt exp(A s) ds
    psi_int = ad.multiply(psi, base_dt)
    for _ in range(squarings):
        # integral over a doubled interval: (I + exp(A h)) integral_0^h
        psi_int = ad.matmul(ad.add(e, eye), psi_int)
        e = ad.matmul(e, e)
    return e, ad.matmul(psi_int, c)


def _apply_transition(e: ad.Node | None, drift: ad.Node | None, z: ad.Node) -> ad.Node:
    out = z if e is None else ad.matmul(e, z)
    if drift is not None:
        out = ad.add(out, drift)  # drift is (d, 1); broadcasts over columns
    return out


def _graph_solution(
    a: ad.Node | None, c: ad.Node | None, z0: ad.Node, dt: float
) -> ad.Node:
    """ODE solution at offset dt as graph nodes (see _graph_transition)."""
    if dt == 0.0:
        return z0
    return _apply_transition(*_graph_transition(a, c, dt), z0)


def _graph_ode_params(
    model: JointModel, nodes: dict[str, ad.Node] | None, baseline: np.ndarray
) -> tuple[ad.Node | None, ad.Node | None]:
    """Baseline network output assembled into (A, c) nodes per param_mode."""
    d = model.latent_dim
    raw = nnet.mlp_forward(model.baseline_net, baseline[:, None], nodes, "baseline")
    squashed = ad.multiply(ad.tanh(raw), model.config.tanh_scale)  # (n_params, 1)
    mode = model.config.param_mode
    if mode == "constant":
        return None, squashed
    a_flat = squashed[0 : d * d, :] if mode == "full" else squashed
    # column j of A is every d-th entry of the row-major flat vector
    a = ad.concat([a_flat[j::d, :] for j in range(d)], axis=1)
    c = squashed[d * d :, :] if mode == "full" else None
    return a, c


def _column_mean_matrix(n: int) -> np.ndarray:
    return np.full((n, 1), 1.0 / n)


def _graph_sample_variance(values: ad.Node) -> ad.Node:
    """Per-dimension unbiased sample variance of a (d, n) node, n >= 2."""
    n = values.value.shape[1]
    mean = ad.matmul(values, _column_mean_matrix(n))  # (d, 1)
    centered = ad.add(values, ad.multiply(mean, -1.0))
    return ad.multiply(ad.matmul(ad.square(centered), np.ones((n, 1))), 1.0 / (n - 1))


def _build_loss(
    model: JointModel,
    individual: Individual,
    eps: np.ndarray,
    param_nodes: dict[str, ad.Node] | None,
) -> tuple[ad.Node, LossBreakdown]:
    """Assemble the full per-individual loss graph.

    The smoothing weights are uniform over the causal starts: with
    query times at the observed visits, the most recent eligible start
    never has two solutions started strictly between it and the query
    time, so the sample-variance weighting always degenerates to equal
    weights (see odecore.weighted_estimate).
    """
    cfg = model.config
    d = model.latent_dim
    x = individual.items
    times = individual.times
    n_visits = individual.n_visits
    if eps.shape != (d, n_visits):
        raise InvalidArgumentError(f"eps must have shape ({d}, {n_visits})")

    enc_out = nnet.mlp_forward(model.encoder, x, param_nodes, "encoder")
    mu = enc_out[0:d, :]
    log_std = nnet.clip_node(enc_out[d : 2 * d, :], nnet.LOG_STD_MIN, nnet.LOG_STD_MAX)
    sigma = ad.exp(log_std)

    a_node, c_node = _graph_ode_params(model, param_nodes, individual.baseline)

    # causal smoothing at each observed time, equal weights per the note
    # above; solutions of all active starts advance one gap at a time
    # (exp(A(s+u)) = exp(As) exp(Au)), so each gap's series is built once
    mu_tilde_cols, solution_sets = [], []
    active = mu[:, 0:1]  # (d, m+1): start solutions evaluated at the current visit
    for m in range(n_visits):
        if m > 0:
            e, drift = _graph_transition(a_node, c_node, float(times[m] - times[m - 1]))
            active = ad.concat([_apply_transition(e, drift, active), mu[:, m : m + 1]], axis=1)
        solution_sets.append(active)
        mu_tilde_cols.append(ad.matmul(active, _column_mean_matrix(m + 1)))
    mu_tilde = ad.concat(mu_tilde_cols, axis=1) if n_visits > 1 else mu_tilde_cols[0]

    # KL of N(mu_tilde, sigma^2) from the standard normal prior
    kl = ad.multiply(
        ad.add(
            ad.add(ad.asum(ad.square(mu_tilde)), ad.asum(ad.exp(ad.multiply(log_std, 2.0)))),
            ad.add(ad.multiply(ad.asum(log_std), -2.0), -float(d * n_visits)),
        ),
        0.5,
    )

    # reconstruction from one reparameterized sample per visit
    z = ad.add(mu_tilde, ad.multiply(sigma, eps))
    x_hat = nnet.mlp_forward(model.decoder, z, param_nodes, "decoder")
    recon = ad.multiply(ad.asum(ad.square(ad.add(x_hat, -x))), 0.5)

    consistency = ad.asum(ad.square(ad.add(mu, ad.multiply(mu_tilde, -1.0))))

    # spread of the per-start solutions vs spread of the encoded means
    if n_visits >= 2:
        enc_var = _graph_sample_variance(mu)
        log_enc = ad.asum(ad.log(ad.add(enc_var, VAR_REG_OFFSET)))
    else:
        log_enc = ad.constant(d * np.log(VAR_REG_OFFSET))
    var_terms = []
    for stacked in solution_sets:
        if stacked.value.shape[1] >= 2:
            sol_var = _graph_sample_variance(stacked)
            var_terms.append(ad.add(ad.asum(ad.log(ad.add(sol_var, VAR_REG_OFFSET))), ad.multiply(log_enc, -1.0)))
        else:
            var_terms.append(ad.add(ad.constant(d * np.log(VAR_REG_OFFSET)), ad.multiply(log_enc, -1.0)))
    variance_reg = var_terms[0]
    for term in var_terms[1:]:
        variance_reg = ad.add(variance_reg, term)

    total = ad.add(
        ad.add(kl, recon),
        ad.add(ad.multiply(consistency, cfg.alpha), ad.multiply(variance_reg, cfg.beta)),
    )
    breakdown = LossBreakdown(
        kl=float(kl.value),
        recon_nll=float(recon.value),
        consistency=float(cfg.alpha * consistency.value),
        variance_reg=float(cfg.beta * variance_reg.value),
        total=float(total.value),
    )
    return total, breakdown


def loss(
    model: JointModel,
    individual: Individual,
    eps: np.ndarray | None = None,
    rng: np.random.Generator | None = None,
) -> LossBreakdown:
    """Loss components for one individual.

    ``eps`` fixes the reparameterization draw; with ``rng`` it is
    sampled; with neither the mean path (eps = 0) is evaluated.
    """
    d = model.latent_dim
    if eps is None:
        eps = (
            rng.standard_normal((d, individual.n_visits))
            if rng is not None
            else np.zeros((d, individual.n_visits))
        )
    _, breakdown = _build_loss(model, individual, np.asarray(eps, dtype=float), None)
    return breakdown


def loss_gradient(
    model: JointModel, individual: Individual, eps: np.ndarray
) -> tuple[LossBreakdown, dict[str, np.ndarray]]:
    """Loss and its gradient with respect to every network parameter."""
    params = model.parameters()
    nodes = {name: ad.parameter(name, value) for name, value in params.items()}
    root, breakdown = _build_loss(model, individual, np.asarray(eps, dtype=float), nodes)
    return breakdown, ad.gradient(root, nodes)


# --- training ---


@dataclass
class TrainResult:
    epochs: list[dict] = field(default_factory=list)

    def trace_rows(self) -> list[dict]:
        return self.epochs


def train(
    model: JointModel, dataset, epochs: int | None = None, seed: int | None = None
) -> tuple[JointModel, TrainResult]:
    """Joint gradient training, one optimizer step per individual.

    Individuals are visited in a freshly shuffled order each epoch; all
    randomness derives from the run seed, so the per-epoch loss trace is
    reproducible. Steps whose loss or gradient is non-finite are skipped
    and counted; more than 10% skipped steps in one epoch aborts with
    TrainingDivergedError.
    """
    individuals = list(dataset.individuals)
    if not individuals:
        raise InvalidArgumentError("dataset is empty")
    if any(ind.n_visits < 1 for ind in individuals):
        raise InvalidArgumentError("every individual needs at least one visit")
    n_epochs = model.config.epochs if epochs is None else int(epochs)
    root_seed = model.config.seed if seed is None else int(seed)
    rng = seeds.derive_rng(root_seed, seeds.TRAINING)
    opt = OptimizerState(lr=model.config.learning_rate)
    params = model.parameters()
    d = model.latent_dim
    result = TrainResult()
    for epoch in range(n_epochs):
        order = rng.permutation(len(individuals))
        sums = {"kl": 0.0, "recon_nll": 0.0, "consistency": 0.0, "variance_reg": 0.0, "total": 0.0}
        used = 0
        skipped = 0
        for idx in order:
            ind = individuals[idx]
            eps = rng.standard_normal((d, ind.n_visits))
            try:
                nodes = {name: ad.parameter(name, value) for name, value in params.items()}
                root, breakdown = _build_loss(model, ind, eps, nodes)
                grads = ad.gradient(root, nodes)
                params, opt = nnet.optimizer_step(params, grads, opt)
            except NonFiniteError as exc:
                skipped += 1
                log.warning("skipping individual %s in epoch %d: %s", ind.id, epoch, exc)
                continue
            model.set_parameters(params)
            used += 1
            for key in sums:
                sums[key] += getattr(breakdown, key if key != "total" else "total")
        if skipped > 0.1 * len(individuals):
            raise TrainingDivergedError(
                f"{skipped}/{len(individuals)} steps skipped in epoch {epoch}"
            )
        row = {"epoch": epoch, "skipped": skipped}
        row.update({f"mean_{k}": (sums[k] / used if used else float("nan")) for k in sums})
        result.epochs.append(row)
    return model, result


# --- checkpointing ---


def save_checkpoint(model: JointModel, path, optimizer: OptimizerState | None = None) -> None:
    """Single-JSON checkpoint; floats round-trip bit-exactly."""
    payload = {
        "format": "latentdyn-checkpoint-v1",
        "config": asdict(model.config),
        "encoder": nnet.mlp_to_dict(model.encoder),
        "decoder": nnet.mlp_to_dict(model.decoder),
        "baseline_net": nnet.mlp_to_dict(model.baseline_net),
        "optimizer": (optimizer or OptimizerState(lr=model.config.learning_rate)).hyperparams(),
        "seed": model.config.seed,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2)


def load_checkpoint(path) -> JointModel:
    with open(path, encoding="utf-8") as fh:
        payload = json.load(fh)
    if payload.get("format") != "latentdyn-checkpoint-v1":
        raise InvalidArgumentError(f"{path}: not a model checkpoint")
    config = ModelConfig(**payload["config"])
    return JointModel(
        config,
        nnet.mlp_from_dict(payload["encoder"]),
        nnet.mlp_from_dict(payload["decoder"]),
        nnet.mlp_from_dict(payload["baseline_net"]),
    )
