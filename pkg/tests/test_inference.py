"""Energy gradients, the variational mask posterior, and both training loops."""

import numpy as np
import pytest
from scipy.stats import norm

from dagsampler import inference, nets, scm
from dagsampler.errors import ConfigError, DataError, NumericError
from dagsampler.graphs import is_acyclic
from dagsampler.inference import (
    GibbsResult,
    MaskSample,
    Particle,
    ParticleBuffer,
    PriorConfig,
    TrainingConfig,
    bernoulli_kl,
    concrete_mask_sample,
    elbo,
    gibbs_train,
    grad_U,
    joint_grad_U,
    joint_surrogate_energy,
    joint_train,
    load_particles,
    log_prior,
    make_vi,
    mask_prior_prob,
    posterior_expectation,
    posterior_graph_samples,
    save_particles,
    soft_surrogate_energy,
    vi_init,
    vi_logits,
    vi_logits_grad,
    vi_sample_W,
)
from dagsampler.potentials import RelaxationConstants


# --------------------------------------------------------------- configuration


def test_config_round_trip(tmp_path):
    cfg = TrainingConfig(lambda_s=300.0, scale_p=0.1, epochs=7, model="linear", seed=11)
    path = tmp_path / "cfg.json"
    from dagsampler.fileio import atomic_write_json

    atomic_write_json(path, cfg.to_dict())
    again = TrainingConfig.from_json(path)
    assert again == cfg


def test_config_rejects_unknown_keys():
    with pytest.raises(ConfigError, match="unknown config keys"):
        TrainingConfig.from_dict({"lambda": 5.0})


def test_config_rejects_bad_values():
    with pytest.raises(ConfigError):
        TrainingConfig(model="quadratic")
    with pytest.raises(ConfigError):
        TrainingConfig(chains=0)
    with pytest.raises(ConfigError):
        TrainingConfig(alpha=0.0)
    with pytest.raises(ConfigError):
        TrainingConfig(lr=-1.0)


def test_config_partial_dict_uses_defaults():
    cfg = TrainingConfig.from_dict({"lambda_s": 700.0, "sparse_init": True})
    assert cfg.lambda_s == 700.0
    assert cfg.sparse_init is True
    assert cfg.chains == 10


# ----------------------------------------------------------------------- prior


def test_log_prior_matches_density_sums():
    p = np.array([1.0, -1.0])
    W = np.array([[0, 1], [1, 0]])
    theta = np.array([0.5])
    prior = PriorConfig(alpha=0.5, lambda_s=2.0)
    expected = (
        norm.logpdf(theta, 0, 1).sum()
        + norm.logpdf(p, 0, np.sqrt(0.5)).sum()
        + norm.logpdf(np.asarray(W, float).ravel(), 0, 1).sum()
        - 2.0 * 1.0  # one realized edge
    )
    assert log_prior(W, p, theta, prior) == pytest.approx(expected, rel=1e-12)


def test_mask_prior_prob():
    assert mask_prior_prob() == pytest.approx(1.0 / (1.0 + np.exp(0.5)), rel=1e-12)


# ------------------------------------------------------------ variational mask


def test_bernoulli_kl_zero_at_reference():
    logits = np.full((3, 3), inference.MASK_PRIOR_LOGIT)
    value, grad = bernoulli_kl(logits)
    assert value == pytest.approx(0.0, abs=1e-12)
    assert np.abs(grad).max() < 1e-12


def test_bernoulli_kl_positive_and_fd_grad():
    rng = np.random.default_rng(0)
    logits = rng.normal(size=(3, 3))
    value, grad = bernoulli_kl(logits)
    assert value > 0
    eps = 1e-6
    for i in range(3):
        for j in range(3):
            e = np.zeros((3, 3))
            e[i, j] = eps
            fd = (bernoulli_kl(logits + e)[0] - bernoulli_kl(logits - e)[0]) / (2 * eps)
            assert grad[i, j] == pytest.approx(fd, abs=1e-6)
    assert np.abs(np.diag(grad)).max() == 0.0


def test_vi_logits_shape_and_sparse_shift():
    vi = make_vi(4)
    phi = vi_init(vi, np.random.default_rng(0))
    p = np.array([0.3, -1.2, 0.8, 2.0])
    base, _ = vi_logits(vi, phi, p, sparse_init=False)
    shifted, _ = vi_logits(vi, phi, p, sparse_init=True)
    assert base.shape == (4, 4)
    np.testing.assert_allclose(shifted, base - 1.0, rtol=0, atol=1e-15)


def test_vi_logits_grad_fd():
    vi = make_vi(3, hidden=16)
    rng = np.random.default_rng(1)
    phi = vi_init(vi, rng)
    p = np.array([0.5, -0.2, 1.4])
    dlogits = rng.normal(size=(3, 3))

    def scalar(ph):
        lg, _ = vi_logits(vi, ph, p)
        return float((dlogits * lg).sum())

    _, cache = vi_logits(vi, phi, p)
    grad = vi_logits_grad(vi, cache, dlogits)
    eps = 1e-6
    idx = rng.choice(len(phi), size=40, replace=False)
    for i in idx:
        e = np.zeros_like(phi)
        e[i] = eps
        fd = (scalar(phi + e) - scalar(phi - e)) / (2 * eps)
        assert grad[i] == pytest.approx(fd, abs=2e-5)


def test_concrete_mask_sample_structure():
    rng = np.random.default_rng(2)
    logits = rng.normal(size=(4, 4))
    ms = concrete_mask_sample(logits, rng, gumbel_t=0.2)
    assert np.diag(ms.soft).max() == 0.0
    assert np.diag(ms.hard).max() == 0.0
    assert set(np.unique(ms.hard)) <= {0.0, 1.0}
    np.testing.assert_array_equal(ms.hard, (ms.soft > 0.5).astype(float))


def test_hard_mask_matches_bernoulli_law():
    # thresholding the relaxation at 1/2 recovers the exact Bernoulli
    # probability regardless of temperature
    rng = np.random.default_rng(3)
    logits = np.full((2, 2), 0.7)
    hits = 0
    n = 20_000
    for _ in range(n):
        ms = concrete_mask_sample(logits, rng, gumbel_t=0.73)
        hits += ms.hard[0, 1]
    freq = hits / n
    assert freq == pytest.approx(1.0 / (1.0 + np.exp(-0.7)), abs=0.01)


# ------------------------------------------------------------ energy gradients


def fd_check(f, x0, grad, coords, eps, tol):
    worst = 0.0
    for i in coords:
        e = np.zeros_like(x0)
        e.flat[i] = eps
        fd = (f(x0 + e) - f(x0 - e)) / (2 * eps)
        denom = max(1.0, abs(fd))
        worst = max(worst, abs(fd - grad.flat[i]) / denom)
    return worst


@pytest.mark.parametrize("kind", ["linear", "mlp"])
def test_soft_surrogate_energy_fd(kind):
    rng = np.random.default_rng(4)
    d = 4 if kind == "linear" else 3
    arch = scm.NetworkArchitecture(hidden_size=8, embedding_size=8)
    model = scm.make_model(kind, d, arch)
    X = rng.normal(size=(40, d))
    p = rng.normal(size=d) * 2.0
    theta = model.init_params(rng, scale=0.3)
    w = rng.uniform(0.1, 0.9, size=(d, d))
    np.fill_diagonal(w, 0.0)
    prior = PriorConfig(alpha=0.2, lambda_s=3.0)
    consts = RelaxationConstants(d=d, t=0.2, tol=0.0, max_iters=30)

    _, gp, gth, gw = soft_surrogate_energy(p, theta, w, X, 80, model, prior, consts)

    def at_p(q):
        return soft_surrogate_energy(q, theta, w, X, 80, model, prior, consts)[0]

    def at_theta(q):
        return soft_surrogate_energy(p, q, w, X, 80, model, prior, consts)[0]

    def at_w(q):
        return soft_surrogate_energy(p, theta, q, X, 80, model, prior, consts)[0]

    assert fd_check(at_p, p, gp, range(d), 1e-5, 0) < 1e-4
    idx = rng.choice(model.n_params, size=min(40, model.n_params), replace=False)
    assert fd_check(at_theta, theta, gth, idx, 1e-5, 0) < 1e-4
    off = [i * d + j for i in range(d) for j in range(d) if i != j]
    assert fd_check(at_w, w, gw, off, 1e-5, 0) < 1e-4


def test_grad_U_theta_exact_and_p_matches_surrogate():
    rng = np.random.default_rng(5)
    d = 4
    model = scm.make_model("linear", d)
    X = rng.normal(size=(60, d))
    p = rng.normal(size=d)
    theta = model.init_params(rng, scale=0.5)
    W = (rng.uniform(size=(d, d)) < 0.6).astype(float)
    np.fill_diagonal(W, 0.0)
    prior = PriorConfig(alpha=0.1, lambda_s=2.0)
    consts = RelaxationConstants(d=d)

    gp, gth, info = grad_U(p, theta, W, X, 120, model, prior, consts)

    from dagsampler.potentials import order_matrix, relaxed_permutation, sort_permutation

    G_hard = W * order_matrix(sort_permutation(p), consts.L)
    ll, dtheta_ll, _ = scm.log_likelihood_grads(model, X, G_hard, theta)
    np.testing.assert_allclose(gth, theta - 2.0 * dtheta_ll, rtol=0, atol=1e-12)
    assert info["loglik"] == pytest.approx(ll)

    # the potential gradient is the surrogate's, evaluated at the binary mask
    _, gp_soft, _, _ = soft_surrogate_energy(p, theta, W, X, 120, model, prior, consts)
    np.testing.assert_allclose(gp, gp_soft, rtol=0, atol=1e-12)


def test_grad_U_accepts_mask_sample():
    rng = np.random.default_rng(6)
    d = 3
    model = scm.make_model("linear", d)
    X = rng.normal(size=(30, d))
    p = rng.normal(size=d)
    theta = model.init_params(rng, scale=0.5)
    logits = rng.normal(size=(d, d))
    ms = concrete_mask_sample(logits, rng, gumbel_t=0.2)
    gp, gth, info = grad_U(p, theta, ms, X, 30, model, PriorConfig(), RelaxationConstants(d=d))
    assert gp.shape == (d,)
    assert gth.shape == (model.n_params,)
    assert np.isfinite(info["energy"])


# ------------------------------------------------------------------------ elbo


def chain_truth_linear(d=3, weight=1.5, noise=0.3):
    G = np.zeros((d, d), dtype=np.int64)
    weights = np.zeros((d, d))
    for i in range(d - 1):
        G[i, i + 1] = 1
        weights[i, i + 1] = weight
    return scm.GroundTruth(kind="linear", G=G, noise_var=np.full(d, noise), weights=weights)


def test_elbo_learns_chain_edges():
    # with potentials fixed at the true ordering and the true mechanism, the
    # mask posterior should concentrate on the chain's edges
    rng = np.random.default_rng(7)
    truth = chain_truth_linear()
    X = scm.ancestral_sample(truth, 400, rng)
    d = 3
    model = scm.make_model("linear", d)
    theta = np.concatenate([truth.weights.ravel(), np.log(truth.noise_var)])
    p = np.array([1.0, 0.0, -1.0])  # edge i->j needs p_i > p_j
    prior = PriorConfig(alpha=1.0, lambda_s=1.0)
    consts = RelaxationConstants(d=d)
    vi = make_vi(d)
    phi = vi_init(vi, rng)
    adam = nets.Adam(vi.n_params, lr=3e-3)
    values = []
    for _ in range(400):
        val, gphi = elbo(vi, phi, p, theta, X, len(X), model, prior, consts, rng, mc_samples=4)
        phi = adam.ascend(phi, gphi)
        values.append(val)
    assert np.mean(values[-50:]) > np.mean(values[:50])
    logits, _ = vi_logits(vi, phi, p)
    q = 1.0 / (1.0 + np.exp(-logits))
    assert q[0, 1] > 0.8
    assert q[1, 2] > 0.8
    assert q[0, 2] < 0.6  # no direct edge; x0 is screened off by x1


# -------------------------------------------------------------- particle store


def test_particle_schedule():
    burn, stride = ParticleBuffer.schedule(700)
    assert (burn, stride) == (350, 35)
    stored = [s for s in range(1, 701) if ParticleBuffer.should_store(s, 700)]
    assert len(stored) == 10
    assert stored[0] == 385 and stored[-1] == 700


def test_particle_schedule_tiny():
    stored = [s for s in range(1, 4) if ParticleBuffer.should_store(s, 3)]
    assert stored  # at least one snapshot even for very short runs


def test_particle_buffer_ring():
    buf = ParticleBuffer(capacity=3)
    for k in range(5):
        buf.append(Particle(chain=0, step=k, p=np.array([float(k)]), theta=np.zeros(1)))
    assert len(buf) == 3
    assert [pt.step for pt in buf] == [2, 3, 4]


def test_particles_round_trip(tmp_path):
    cfg = TrainingConfig(model="linear", chains=2)
    buf = ParticleBuffer(capacity=10)
    rng = np.random.default_rng(8)
    for k in range(4):
        buf.append(
            Particle(
                chain=k % 2,
                step=10 + k,
                p=rng.normal(size=3),
                theta=rng.normal(size=12),
                w_tilde=rng.normal(size=(3, 3)) if k % 2 else None,
            )
        )
    phi = rng.normal(size=17)
    path = tmp_path / "particles.json"
    save_particles(path, buf, cfg, phi=phi)
    buf2, cfg2, phi2 = load_particles(path)
    assert cfg2 == cfg
    np.testing.assert_allclose(phi2, phi)
    assert len(buf2) == 4
    for a, b in zip(buf, buf2):
        assert (a.chain, a.step) == (b.chain, b.step)
        np.testing.assert_allclose(a.p, b.p)
        np.testing.assert_allclose(a.theta, b.theta)
        if a.w_tilde is None:
            assert b.w_tilde is None
        else:
            np.testing.assert_allclose(a.w_tilde, b.w_tilde)


def test_load_particles_malformed(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text('{"chains": 2, "particles": [{"chain": 0}], "config": {}}')
    with pytest.raises(DataError, match="malformed"):
        load_particles(path)


# --------------------------------------------------------------- gibbs training


def small_gibbs_config(**kw):
    base = dict(
        model="linear",
        chains=2,
        epochs=6,
        batch=60,
        lr=1e-3,
        lambda_s=1.0,
        alpha=0.1,
        scale_p=0.01,
        scale_theta=0.01,
        particles=100,
        seed=0,
    )
    base.update(kw)
    return TrainingConfig(**base)


def test_gibbs_train_smoke():
    rng = np.random.default_rng(9)
    truth = chain_truth_linear()
    X = scm.ancestral_sample(truth, 120, rng)
    result = gibbs_train(X, small_gibbs_config())
    # 6 epochs x 2 iters = 12 steps, burn 6, stride 1: 6 snapshots per chain
    assert result.diagnostics["total_steps"] == 12
    assert len(result.buffer) == 12
    assert np.isfinite(result.phi).all()
    assert np.isfinite(result.diagnostics["energy_trace"]).all()
    for pt in result.buffer:
        assert np.isfinite(pt.p).all() and np.isfinite(pt.theta).all()
    samples = posterior_graph_samples(result, np.random.default_rng(0), draws_per_particle=2)
    assert len(samples) == 24
    for G, theta in samples:
        assert is_acyclic(G)
        assert theta.shape == (result.model.n_params,)


def test_gibbs_train_threads_match_serial():
    rng = np.random.default_rng(10)
    truth = chain_truth_linear()
    X = scm.ancestral_sample(truth, 120, rng)
    serial = gibbs_train(X, small_gibbs_config(threads=1))
    threaded = gibbs_train(X, small_gibbs_config(threads=2))
    np.testing.assert_array_equal(serial.phi, threaded.phi)
    assert len(serial.buffer) == len(threaded.buffer)
    for a, b in zip(serial.buffer, threaded.buffer):
        np.testing.assert_array_equal(a.p, b.p)
        np.testing.assert_array_equal(a.theta, b.theta)


def test_gibbs_train_rejects_bad_data():
    with pytest.raises(DataError):
        gibbs_train(np.zeros(5), small_gibbs_config())


# ---------------------------------------------------------------- joint variant


def test_joint_surrogate_energy_fd():
    rng = np.random.default_rng(11)
    d = 3
    model = scm.make_model("linear", d)
    X = rng.normal(size=(40, d))
    p = rng.normal(size=d)
    theta = model.init_params(rng, scale=0.4)
    wt = rng.normal(size=(d, d))
    noises = []
    for _ in range(3):
        u = rng.uniform(size=(d, d))
        noises.append(np.log(u) - np.log1p(-u))
    prior = PriorConfig(alpha=0.3, lambda_s=2.0)
    consts = RelaxationConstants(d=d, tol=0.0, max_iters=30)

    _, gp, gth, gwt = joint_surrogate_energy(p, theta, wt, noises, X, 40, model, prior, consts)

    def at_p(q):
        return joint_surrogate_energy(q, theta, wt, noises, X, 40, model, prior, consts)[0]

    def at_theta(q):
        return joint_surrogate_energy(p, q, wt, noises, X, 40, model, prior, consts)[0]

    def at_wt(q):
        return joint_surrogate_energy(p, theta, q, noises, X, 40, model, prior, consts)[0]

    assert fd_check(at_p, p, gp, range(d), 1e-5, 0) < 1e-3
    idx = rng.choice(model.n_params, size=10, replace=False)
    assert fd_check(at_theta, theta, gth, idx, 1e-5, 0) < 1e-3
    off = [i * d + j for i in range(d) for j in range(d) if i != j]
    assert fd_check(at_wt, wt, gwt, off, 1e-5, 0) < 1e-3


def test_joint_grad_U_shapes():
    rng = np.random.default_rng(12)
    d = 3
    model = scm.make_model("linear", d)
    X = rng.normal(size=(30, d))
    p = rng.normal(size=d)
    theta = model.init_params(rng, scale=0.4)
    wt = rng.normal(size=(d, d))
    gp, gth, gwt, info = joint_grad_U(
        p, theta, wt, X, 30, model, PriorConfig(), RelaxationConstants(d=d), rng, mc_samples=4
    )
    assert gp.shape == (d,)
    assert gth.shape == (model.n_params,)
    assert gwt.shape == (d, d)
    assert np.isfinite(info["energy"])


def test_joint_train_and_expectation():
    rng = np.random.default_rng(13)
    truth = chain_truth_linear()
    X = scm.ancestral_sample(truth, 120, rng)
    cfg = small_gibbs_config(mc_samples=3)
    result = joint_train(X, cfg)
    assert len(result.buffer) == 12
    for pt in result.buffer:
        assert pt.w_tilde is not None and pt.w_tilde.shape == (3, 3)

    value = posterior_expectation(
        result.buffer,
        lambda G, theta: 1.0,
        X,
        result.model,
        np.random.default_rng(0),
        mc_samples=8,
        lambda_s=cfg.lambda_s,
    )
    assert value == 1.0  # self-normalized weights make constants exact

    edges = posterior_expectation(
        result.buffer,
        lambda G, theta: float(G.sum()),
        X,
        result.model,
        np.random.default_rng(0),
        mc_samples=8,
        lambda_s=cfg.lambda_s,
    )
    assert 0.0 <= edges <= 6.0

    from dagsampler.inference import joint_graph_samples

    draws = joint_graph_samples(result, X, np.random.default_rng(1), mc_samples=8)
    assert len(draws) == len(result.buffer)
    for G, _theta in draws:
        assert is_acyclic(G)


def test_posterior_expectation_guards():
    with pytest.raises(DataError):
        posterior_expectation([], lambda G, t: 1.0, np.zeros((2, 2)), None, np.random.default_rng(0))
    gibbs_pt = Particle(chain=0, step=1, p=np.array([0.1, -0.2]), theta=np.zeros(6))
    model = scm.make_model("linear", 2)
    with pytest.raises(DataError, match="joint-mode"):
        posterior_expectation(
            [gibbs_pt], lambda G, t: 1.0, np.zeros((2, 2)), model, np.random.default_rng(0)
        )


def test_posterior_expectation_degenerate_weights():
    model = scm.make_model("linear", 2)
    theta = np.zeros(6)
    theta[:4] = 1e200  # forces infinite residuals, zero posterior mass
    pt = Particle(
        chain=0, step=1, p=np.array([1.0, -1.0]), theta=theta, w_tilde=np.full((2, 2), 50.0)
    )
    X = np.ones((4, 2))
    with np.errstate(all="ignore"):
        with pytest.raises(NumericError, match="degenerate"):
            posterior_expectation(
                [pt], lambda G, t: 1.0, X, model, np.random.default_rng(0), mc_samples=4
            )
