import numpy as np
import pytest

from latentdyn import autodiff as ad
from latentdyn import datagen, model as M, nnet, odecore
from latentdyn.datagen import SimConfig
from latentdyn.errors import InvalidArgumentError
from latentdyn.model import JointModel, ModelConfig
from latentdyn.pipeline import Individual


def taylor_exp(a, terms=80):
    m = np.asarray(a, dtype=float)
    term = np.eye(m.shape[0])
    acc = term.copy()
    for k in range(1, terms + 1):
        term = term @ m / k
        acc = acc + term
    return acc


def tiny_individual(rng, p=3, q=2, n_visits=2):
    times = np.concatenate([[0.0], np.sort(rng.uniform(1.0, 8.0, size=n_visits - 1))])
    return Individual("t1", times, rng.normal(size=(p, n_visits)), rng.normal(size=q))


def tiny_model(p=3, q=2, mode="full", hidden=4, seed=0, **cfg_kw):
    cfg = ModelConfig(
        latent_dim=2,
        encoder_hidden=hidden,
        decoder_hidden=hidden,
        baseline_hidden=hidden,
        param_mode=mode,
        seed=seed,
        **cfg_kw,
    )
    return JointModel.create(cfg, p, q)


# --- encode ---


def test_zero_weight_encoder_gives_zero_means():
    model = tiny_model()
    for w in model.encoder.weights:
        w[:] = 0.0
    rng = np.random.default_rng(0)
    enc = M.encode(model, tiny_individual(rng))
    np.testing.assert_array_equal(enc.means, 0.0)
    np.testing.assert_allclose(enc.stds, 1.0)  # zero log-std


def test_encode_is_column_wise():
    model = tiny_model(seed=3)
    rng = np.random.default_rng(1)
    ind = tiny_individual(rng, n_visits=4)
    enc = M.encode(model, ind)
    perm = np.array([2, 0, 3, 1])
    permuted_out = nnet.mlp_apply(model.encoder, ind.items[:, perm])
    d = model.latent_dim
    np.testing.assert_allclose(permuted_out[:d, :], enc.means[:, perm], rtol=1e-12)


def test_encode_matches_hand_computation():
    model = tiny_model(p=2, hidden=2)
    w0 = np.array([[0.5, -1.0], [2.0, 0.25]])
    b0 = np.array([[0.1], [-0.2]])
    w1 = np.vstack([np.eye(2), np.zeros((2, 2))])  # means = hidden, log-std = 0
    b1 = np.zeros((4, 1))
    model.encoder = nnet.MLP([2, 2, 4], [w0, w1], [b0, b1], ["tanh", "identity"])
    ind = Individual("h", np.array([0.0, 1.0]), np.array([[1.0, 0.5], [-1.0, 0.25]]), np.zeros(2))
    enc = M.encode(model, ind)
    want00 = np.tanh(0.5 * 1.0 + (-1.0) * (-1.0) + 0.1)
    assert abs(enc.means[0, 0] - want00) <= 1e-12
    np.testing.assert_allclose(enc.stds, 1.0)


def test_encode_rejects_wrong_item_count():
    model = tiny_model(p=3)
    bad = Individual("b", np.array([0.0]), np.ones((5, 1)), np.zeros(2))
    with pytest.raises(InvalidArgumentError):
        M.encode(model, bad)


# --- baseline_to_params ---


def test_zero_weight_baseline_net_gives_zero_dynamics():
    model = tiny_model(mode="full")
    for w in model.baseline_net.weights:
        w[:] = 0.0
    params = M.baseline_to_params(model, np.array([3.0, -1.0]))
    np.testing.assert_array_equal(params.a, 0.0)
    np.testing.assert_array_equal(params.c, 0.0)
    assert params.a_is_zero
    # constant latent trajectories follow
    sol = odecore.solve_ivp(params, np.array([0.7, -0.3]), 0.0, 9.0)
    np.testing.assert_array_equal(sol, [0.7, -0.3])


def test_ode_param_count_full_mode():
    model = tiny_model(mode="full")
    assert model.baseline_net.out_dim == 6  # d^2 + d for d = 2
    assert M.n_ode_params("homogeneous", 2) == 4
    assert M.n_ode_params("constant", 2) == 2


def test_baseline_params_match_hand_computation():
    model = tiny_model(q=2, mode="full", hidden=2)
    w0 = np.array([[1.0, 0.0], [0.0, 1.0]])
    b0 = np.zeros((2, 1))
    w1 = np.arange(12.0).reshape(6, 2) / 10.0
    b1 = np.full((6, 1), 0.05)
    model.baseline_net = nnet.MLP([2, 2, 6], [w0, w1], [b0, b1], ["tanh", "identity"])
    baseline = np.array([0.4, -0.8])
    h = np.tanh(baseline)
    raw = w1 @ h + 0.05
    want = np.tanh(raw)  # tanh_scale = 1
    params = M.baseline_to_params(model, baseline)
    np.testing.assert_allclose(params.a.reshape(-1), want[:4], rtol=1e-12)
    np.testing.assert_allclose(params.c, want[4:], rtol=1e-12)


def test_tanh_scale_bounds_parameters():
    model = tiny_model(mode="homogeneous", tanh_scale=0.5)
    model.baseline_net.biases[-1][:] = 100.0  # saturate
    params = M.baseline_to_params(model, np.zeros(2))
    np.testing.assert_allclose(params.a, 0.5)


# --- smooth_posterior ---


def test_single_visit_smoothing_returns_encoded_value():
    enc = M.LatentEncoding(np.array([[1.7], [-0.4]]), np.ones((2, 1)), np.array([0.0]))
    params = odecore.ODEParams(np.zeros((2, 2)), np.zeros(2))
    traj = M.smooth_posterior(enc, params, [0.0])
    np.testing.assert_array_equal(traj.estimates[:, 0], [1.7, -0.4])


def test_constant_dynamics_smoothing_averages_carried_values():
    means = np.array([[1.0, 2.0, 6.0], [0.0, 3.0, 3.0]])
    enc = M.LatentEncoding(means, np.ones((2, 3)), np.array([0.0, 1.0, 2.0]))
    params = odecore.ODEParams(np.zeros((2, 2)), np.zeros(2))
    traj = M.smooth_posterior(enc, params, [0.0, 1.0, 2.0])
    np.testing.assert_allclose(traj.estimates[:, 0], [1.0, 0.0])
    np.testing.assert_allclose(traj.estimates[:, 1], [1.5, 1.5])
    np.testing.assert_allclose(traj.estimates[:, 2], [3.0, 2.0])


def eq5_reimplementation(times, means, a, c, query_times):
    """Independent oracle: explicit loop over starts with explicit weights."""
    times = np.asarray(times, dtype=float)

    def sol(k, t):
        dt = t - times[k]
        if np.max(np.abs(a)) < 1e-10:
            return c * dt + means[:, k]
        a_inv_c = np.linalg.solve(a, c)
        return taylor_exp(a * dt) @ (a_inv_c + means[:, k]) - a_inv_c

    out = []
    for t in query_times:
        eligible = [k for k in range(times.size) if times[k] <= t]
        variances = []
        for k in eligible:
            inter = [j for j in range(times.size) if times[k] < times[j] < t]
            if len(inter) >= 2:
                sols = np.stack([sol(j, t) for j in inter])
                variances.append(np.maximum(sols.var(axis=0, ddof=1), 1e-8))
            else:
                variances.append(None)
        sols = np.stack([sol(k, t) for k in eligible])
        if all(v is not None for v in variances):
            w = 1.0 / np.stack(variances)
            w = w / w.sum(axis=0)
            out.append((w * sols).sum(axis=0))
        else:
            out.append(sols.mean(axis=0))
    return np.stack(out, axis=1)


def test_smoothing_matches_independent_eq_reimplementation():
    rng = np.random.default_rng(4)
    a = np.array([[-0.2, 0.1], [-0.1, 0.1]])
    c = np.array([0.3, -0.2])
    times = np.array([0.0, 2.0, 5.0])
    means = rng.normal(size=(2, 3))
    enc = M.LatentEncoding(means, np.ones((2, 3)), times)
    params = odecore.ODEParams(a, c)
    query = [0.0, 1.0, 2.0, 3.5, 5.0]
    traj = M.smooth_posterior(enc, params, query)
    want = eq5_reimplementation(times, means, a, c, query)
    assert np.max(np.abs(traj.estimates - want)) <= 1e-10


def test_smoothing_rejects_queries_outside_window():
    enc = M.LatentEncoding(np.zeros((2, 2)), np.ones((2, 2)), np.array([0.0, 3.0]))
    params = odecore.ODEParams(np.zeros((2, 2)), np.zeros(2))
    with pytest.raises(InvalidArgumentError):
        M.smooth_posterior(enc, params, [4.0])


# --- graph pieces agree with the numeric path ---


def test_graph_solution_matches_numeric_solver():
    rng = np.random.default_rng(10)
    worst = 0.0
    for _ in range(100):
        d = int(rng.integers(1, 4))
        a = rng.normal(scale=0.6, size=(d, d))
        c = rng.normal(size=d) if rng.random() < 0.7 else np.zeros(d)
        z0 = rng.normal(size=d)
        dt = float(rng.uniform(0.0, 12.0))
        params = odecore.ODEParams(a, c)
        try:
            want = odecore.solve_ivp(params, z0, 0.0, dt)
        except Exception:
            continue
        a_node = None if params.a_is_zero else ad.constant(a)
        c_node = ad.constant(c[:, None]) if np.any(c != 0) else None
        got = M._graph_solution(a_node, c_node, ad.constant(z0[:, None]), dt).value[:, 0]
        worst = max(worst, np.max(np.abs(got - want)) / max(1.0, np.max(np.abs(want))))
    assert worst <= 1e-11, worst


# --- kl_diag_gauss ---


def test_kl_zero_at_prior():
    assert M.kl_diag_gauss(np.zeros(3), np.ones(3)) == 0.0


def test_kl_formula_values():
    assert abs(M.kl_diag_gauss([1.0], [1.0]) - 0.5) <= 1e-12
    want = 0.5 * (np.e**2 - 3.0)
    assert abs(M.kl_diag_gauss([0.0], [np.e]) - want) <= 1e-9
    assert abs(want - 2.19453) <= 1e-5


def test_kl_nonnegative_and_zero_iff_prior():
    rng = np.random.default_rng(6)
    for _ in range(50):
        mu = rng.normal(size=3)
        sigma = rng.uniform(0.2, 3.0, size=3)
        val = M.kl_diag_gauss(mu, sigma)
        assert val >= 0.0
        if val == 0.0:
            np.testing.assert_array_equal(mu, 0.0)
            np.testing.assert_array_equal(sigma, 1.0)
    with pytest.raises(InvalidArgumentError):
        M.kl_diag_gauss([0.0], [0.0])


# --- loss ---


def test_loss_components_sum_to_total():
    rng = np.random.default_rng(7)
    model = tiny_model(seed=2)
    ind = tiny_individual(rng, n_visits=3)
    lb = M.loss(model, ind, rng=np.random.default_rng(1))
    assert abs(lb.total - (lb.kl + lb.recon_nll + lb.consistency + lb.variance_reg)) <= 1e-12
    assert lb.kl >= 0.0


def test_loss_with_zero_weights_reduces_to_elbo_single_visit():
    # a single visit forces the smoothed mean to equal the encoded mean
    rng = np.random.default_rng(8)
    model = tiny_model(seed=5, alpha=0.0, beta=0.0)
    ind = tiny_individual(rng, n_visits=1)
    eps = rng.standard_normal((2, 1))
    lb = M.loss(model, ind, eps=eps)
    enc = M.encode(model, ind)
    # independent negative-ELBO implementation
    kl = 0.5 * np.sum(enc.means**2 + enc.stds**2 - 1.0 - 2.0 * np.log(enc.stds))
    z = enc.means + enc.stds * eps
    x_hat = nnet.mlp_apply(model.decoder, z)
    recon = 0.5 * np.sum((ind.items - x_hat) ** 2)
    assert abs(lb.total - (kl + recon)) <= 1e-10
    assert lb.consistency == 0.0 and lb.variance_reg == 0.0


def test_consistency_zero_when_dynamics_zero_single_visit():
    rng = np.random.default_rng(9)
    model = tiny_model(seed=6, alpha=3.0)
    ind = tiny_individual(rng, n_visits=1)
    lb = M.loss(model, ind, eps=np.zeros((2, 1)))
    assert lb.consistency == 0.0


def scalar_loss_recomputation(model, ind, eps):
    """Independent oracle: plain numpy recomputation of the documented loss."""
    cfg = model.config
    d = cfg.latent_dim
    out = nnet.mlp_apply(model.encoder, ind.items)
    mu = out[:d]
    ls = np.clip(out[d:], nnet.LOG_STD_MIN, nnet.LOG_STD_MAX)
    sigma = np.exp(ls)
    raw = nnet.mlp_apply(model.baseline_net, ind.baseline[:, None])[:, 0]
    sq = cfg.tanh_scale * np.tanh(raw)
    a, c = sq[: d * d].reshape(d, d), sq[d * d :]

    def sol(k, t):
        dt = t - ind.times[k]
        if dt == 0.0:
            return mu[:, k]
        a_inv_c = np.linalg.solve(a, c)
        return taylor_exp(a * dt) @ (a_inv_c + mu[:, k]) - a_inv_c

    n = ind.n_visits
    sol_sets = [np.stack([sol(k, ind.times[m]) for k in range(m + 1)], axis=1) for m in range(n)]
    mu_tilde = np.stack([s.mean(axis=1) for s in sol_sets], axis=1)
    kl = 0.5 * np.sum(mu_tilde**2 + sigma**2 - 1.0 - 2.0 * ls)
    z = mu_tilde + sigma * eps
    recon = 0.5 * np.sum((ind.items - nnet.mlp_apply(model.decoder, z)) ** 2)
    cons = np.sum((mu - mu_tilde) ** 2)
    log_enc = np.sum(np.log((mu.var(axis=1, ddof=1) if n >= 2 else np.zeros(d)) + 0.1))
    var_reg = 0.0
    for s in sol_sets:
        sol_var = s.var(axis=1, ddof=1) if s.shape[1] >= 2 else np.zeros(d)
        var_reg += np.sum(np.log(sol_var + 0.1)) - log_enc
    return kl + recon + cfg.alpha * cons + cfg.beta * var_reg


def test_loss_matches_independent_scalar_recomputation():
    rng = np.random.default_rng(11)
    model = tiny_model(seed=12, alpha=0.7, beta=0.4, mode="full")
    ind = tiny_individual(rng, n_visits=2)
    eps = rng.standard_normal((2, 2))
    lb = M.loss(model, ind, eps=eps)
    want = scalar_loss_recomputation(model, ind, eps)
    assert abs(lb.total - want) <= 1e-10


# --- gradient fidelity (finite differences over every weight group) ---


def test_full_loss_gradient_matches_finite_differences():
    rng = np.random.default_rng(13)
    model = tiny_model(seed=14, alpha=0.8, beta=0.5, mode="full", hidden=4)
    ind = tiny_individual(rng, n_visits=2)
    eps = rng.standard_normal((2, 2))
    _, grads = M.loss_gradient(model, ind, eps)
    params = model.parameters()

    def loss_at(name, flat_index, delta):
        perturbed = {k: v.copy() for k, v in params.items()}
        perturbed[name].reshape(-1)[flat_index] += delta
        probe = tiny_model(seed=14, alpha=0.8, beta=0.5, mode="full", hidden=4)
        probe.set_parameters(perturbed)
        return M.loss(probe, ind, eps=eps).total

    step = 1e-5
    checked = 0
    for name, g in grads.items():
        flat = g.reshape(-1)
        for i in range(flat.size):
            fd = (loss_at(name, i, step) - loss_at(name, i, -step)) / (2 * step)
            denom = max(abs(flat[i]), abs(fd), 1e-6)
            assert abs(flat[i] - fd) / denom <= 1e-4, (name, i, flat[i], fd)
            checked += 1
    groups = {n.split(".")[0] for n in grads}
    assert groups == {"encoder", "decoder", "baseline"}
    assert checked > 50


# --- predict_next ---


def trained_toy_setup():
    rng = np.random.default_rng(15)
    model = tiny_model(seed=16, mode="homogeneous")
    ind = tiny_individual(rng, n_visits=4)
    return model, ind


def test_predict_single_start_limit_equals_encoded_value():
    model, ind = trained_toy_setup()
    enc = M.encode(model, ind)
    latent, _ = M.predict_next(model, ind, 0, float(ind.times[0]) + 1e-9)
    np.testing.assert_allclose(latent, enc.means[:, 0], atol=1e-8)


def test_predict_with_zero_dynamics_is_carry_forward_mean():
    model, ind = trained_toy_setup()
    for w in model.baseline_net.weights:
        w[:] = 0.0
    for b in model.baseline_net.biases:
        b[:] = 0.0
    enc = M.encode(model, ind)
    latent, items = M.predict_next(model, ind, 2, 9.0)
    np.testing.assert_allclose(latent, enc.means[:, :3].mean(axis=1), rtol=1e-12)
    want_items = nnet.mlp_apply(model.decoder, latent[:, None])[:, 0]
    np.testing.assert_array_equal(items, want_items)


def test_predict_never_reads_future_visits():
    model, ind = trained_toy_setup()
    latent, items = M.predict_next(model, ind, 1, 6.5)
    mutated = Individual(ind.id, ind.times, ind.items.copy(), ind.baseline)
    mutated.items[:, 2:] += 100.0
    latent2, items2 = M.predict_next(model, mutated, 1, 6.5)
    np.testing.assert_array_equal(latent, latent2)
    np.testing.assert_array_equal(items, items2)


def test_predict_rejects_non_future_query():
    model, ind = trained_toy_setup()
    with pytest.raises(InvalidArgumentError):
        M.predict_next(model, ind, 1, float(ind.times[1]))


# --- training loop ---


def small_cohort(n=12, seed=20):
    return datagen.simulate_cohort(SimConfig(n_individuals=n, seed=seed)).dataset


def test_zero_epochs_leaves_model_unchanged():
    ds = small_cohort()
    model = M.JointModel.create(
        ModelConfig(param_mode="homogeneous", epochs=0, seed=1), ds.n_items, ds.n_baseline
    )
    before = {k: v.copy() for k, v in model.parameters().items()}
    model, result = M.train(model, ds)
    assert result.epochs == []
    for k, v in model.parameters().items():
        np.testing.assert_array_equal(v, before[k])


def test_training_trace_deterministic_given_seed():
    ds = small_cohort()

    def run():
        model = M.JointModel.create(
            ModelConfig(param_mode="homogeneous", epochs=3, seed=7), ds.n_items, ds.n_baseline
        )
        _, result = M.train(model, ds)
        return result.epochs

    a, b = run(), run()
    assert a == b


def test_training_reduces_loss_on_default_simulation():
    ds = datagen.simulate_cohort(SimConfig(seed=41)).dataset
    model = M.JointModel.create(
        ModelConfig(param_mode="homogeneous", epochs=20, seed=42), ds.n_items, ds.n_baseline
    )
    model, result = M.train(model, ds)
    assert result.epochs[-1]["mean_total"] < result.epochs[0]["mean_total"]
    assert all(row["skipped"] == 0 for row in result.epochs)


# --- checkpoint ---


def test_checkpoint_round_trip_bit_exact(tmp_path):
    ds = small_cohort(n=5)
    model = M.JointModel.create(
        ModelConfig(param_mode="full", epochs=1, seed=9), ds.n_items, ds.n_baseline
    )
    model, _ = M.train(model, ds)
    path = tmp_path / "model.json"
    M.save_checkpoint(model, path)
    back = M.load_checkpoint(path)
    assert back.config == model.config
    for (ka, va), (kb, vb) in zip(sorted(model.parameters().items()), sorted(back.parameters().items())):
        assert ka == kb
        np.testing.assert_array_equal(va, vb)
