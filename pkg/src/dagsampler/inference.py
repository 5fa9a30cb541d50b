"""Posterior inference over (mask, potentials, model parameters).

Two training modes share the energy machinery:

* gibbs: alternate one sampler step on (p, theta) for every chain with one
  ascent step on a variational network that models the conditional edge-mask
  posterior as independent Bernoullis.
* joint: absorb the mask into the sampled state through continuous logits;
  the energy is the log of a self-normalized Monte Carlo estimate of the
  mask-marginal likelihood, and posterior expectations are computed with the
  matching ratio estimator.

Gradient conventions: theta gradients are exact at the realized (hard)
graph; potential gradients flow through the transport-plan relaxation and
the soft-masked likelihood (straight-through, recomputed every call); mask
gradients flow through the binary-concrete relaxation.
"""

from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, fields
from pathlib import Path

import numpy as np

from . import nets, scm
from .errors import ConfigError, DataError, NumericError
from .fileio import atomic_write_json, read_json
from .potentials import (
    RelaxationConstants,
    order_matrix,
    order_matrix_vjp,
    plan_input_grad_to_p,
    relaxed_permutation,
    tau,
)
from .sampler import SamplerHyper, SamplerState, sgmcmc_step

log = logging.getLogger(__name__)

LOG_2PI = float(np.log(2.0 * np.pi))

# binary masks weighted by the standard-normal density at {0, 1} normalize to
# an independent Bernoulli with this logit
MASK_PRIOR_LOGIT = -0.5


def mask_prior_prob() -> float:
    return float(1.0 / (1.0 + np.exp(-MASK_PRIOR_LOGIT)))


@dataclass(frozen=True)
class PriorConfig:
    """Variance of the potential prior and the sparsity penalty weight."""

    alpha: float = 0.01
    lambda_s: float = 50.0

    def __post_init__(self):
        if self.alpha <= 0:
            raise ConfigError("alpha must be positive")
        if self.lambda_s < 0:
            raise ConfigError("lambda_s must be nonnegative")


def log_prior(W: np.ndarray, p: np.ndarray, theta: np.ndarray, prior: PriorConfig) -> float:
    """Unnormalized joint prior: normal weights on theta, p (variance alpha),
    and binary mask entries, times the sparsity factor on the realized graph."""
    G = tau(W, p)
    n_theta = theta.size
    d = p.size
    val = -0.5 * n_theta * LOG_2PI - 0.5 * float(theta @ theta)
    val += -0.5 * d * (LOG_2PI + np.log(prior.alpha)) - 0.5 * float(p @ p) / prior.alpha
    val += -0.5 * d * d * LOG_2PI - 0.5 * float(np.sum(np.asarray(W, dtype=np.float64) ** 2))
    val -= prior.lambda_s * float(G.sum())
    return val


# ---------------------------------------------------------------------------
# training configuration


@dataclass
class TrainingConfig:
    """Flat key-value training configuration (JSON-mirrored)."""

    lambda_s: float = 50.0
    scale_p: float = 0.01
    scale_theta: float = 0.01
    alpha: float = 0.01
    sparse_init: bool = False
    chains: int = 10
    lr: float = 3e-4
    batch: int = 512
    epochs: int = 700
    sinkhorn_t: float = 0.2
    sinkhorn_tol: float = 1e-3
    sinkhorn_max_iters: int = 3000
    gumbel_t: float = 0.2
    seed: int = 0
    model: str = "mlp"
    mc_samples: int = 1
    eval_mc_samples: int = 16
    particles: int = 100
    phi_lr: float = 1e-3
    phi_hidden: int = 48
    beta1: float = 0.9
    beta2: float = 0.99
    hidden_size: int = 0  # 0: derive max(4d, 64) from the data
    embedding_size: int = 0
    hidden_layers: int = 1
    threads: int = 1

    def __post_init__(self):
        if self.model not in ("linear", "mlp"):
            raise ConfigError(f"unknown model kind {self.model!r}")
        for name in ("chains", "batch", "epochs", "mc_samples", "particles", "threads"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be at least 1")
        if self.lr <= 0 or self.gumbel_t <= 0 or self.sinkhorn_t <= 0:
            raise ConfigError("lr, gumbel_t, sinkhorn_t must be positive")
        PriorConfig(self.alpha, self.lambda_s)  # reuse its range checks

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, obj: dict) -> "TrainingConfig":
        known = {f.name for f in fields(cls)}
        unknown = set(obj) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        try:
            return cls(**obj)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc

    @classmethod
    def from_json(cls, path: str | Path) -> "TrainingConfig":
        obj = read_json(path)
        if not isinstance(obj, dict):
            raise ConfigError(f"{path}: config must be a JSON object")
        return cls.from_dict(obj)

    def architecture(self, d: int) -> scm.NetworkArchitecture:
        width = max(4 * d, 64)
        return scm.NetworkArchitecture(
            hidden_size=self.hidden_size or width,
            embedding_size=self.embedding_size or width,
            hidden_layers=self.hidden_layers,
        )

    def relaxation(self, d: int) -> RelaxationConstants:
        return RelaxationConstants(
            d=d, t=self.sinkhorn_t, tol=self.sinkhorn_tol, max_iters=self.sinkhorn_max_iters
        )

    def prior(self) -> PriorConfig:
        return PriorConfig(alpha=self.alpha, lambda_s=self.lambda_s)


# ---------------------------------------------------------------------------
# variational edge posterior


@dataclass(frozen=True)
class ViSpec:
    """Architecture of the conditional mask network: standardized potentials
    in, one logit per ordered node pair out."""

    d: int
    net: nets.MlpSpec

    @property
    def n_params(self) -> int:
        return nets.param_count(self.net)


def make_vi(d: int, hidden: int = 48) -> ViSpec:
    return ViSpec(d=d, net=nets.MlpSpec((d, hidden, hidden, d * d), layer_norm=True, residual=True))


def vi_init(vi: ViSpec, rng: np.random.Generator) -> np.ndarray:
    return nets.init_glorot(vi.net, rng)


def _standardize(p: np.ndarray) -> np.ndarray:
    return (p - p.mean()) / np.sqrt(p.var() + 1e-5)


def vi_logits(vi: ViSpec, phi: np.ndarray, p: np.ndarray, sparse_init: bool = False):
    """Mask logits for the current potentials, plus the backward cache."""
    out, cache = nets.forward(vi.net, phi, _standardize(p)[None, :])
    logits = out.reshape(vi.d, vi.d)
    if sparse_init:
        logits = logits - 1.0
    return logits, cache


def vi_logits_grad(vi: ViSpec, cache: dict, dlogits: np.ndarray) -> np.ndarray:
    dflat, _ = nets.backward(vi.net, cache, dlogits.reshape(1, vi.d * vi.d))
    return dflat


@dataclass
class MaskSample:
    """One draw from the conditional mask posterior.

    `hard` is the binary mask (thresholded relaxation, exact Bernoulli law);
    `soft` is the concrete relaxation carrying the gradient path.
    """

    hard: np.ndarray
    soft: np.ndarray
    logits: np.ndarray

    @property
    def mask(self) -> np.ndarray:
        return self.hard if self.hard is not None else self.soft


def concrete_mask_sample(
    logits: np.ndarray, rng: np.random.Generator, gumbel_t: float, hard: bool = True
) -> MaskSample:
    d = logits.shape[0]
    u = rng.uniform(size=(d, d))
    noise = np.log(u) - np.log1p(-u)  # logistic
    soft = 1.0 / (1.0 + np.exp(-(logits + noise) / gumbel_t))
    np.fill_diagonal(soft, 0.0)
    hard_mask = (soft > 0.5).astype(np.float64) if hard else None
    return MaskSample(hard=hard_mask, soft=soft, logits=logits)


def vi_sample_W(
    vi: ViSpec,
    phi: np.ndarray,
    p: np.ndarray,
    rng: np.random.Generator,
    gumbel_t: float = 0.2,
    hard: bool = True,
    sparse_init: bool = False,
) -> MaskSample:
    logits, _ = vi_logits(vi, phi, p, sparse_init)
    return concrete_mask_sample(logits, rng, gumbel_t, hard)


def bernoulli_kl(logits: np.ndarray, ref_logit: float = MASK_PRIOR_LOGIT):
    """Off-diagonal KL(q || ref) plus its gradient in the logits."""
    d = logits.shape[0]
    off = ~np.eye(d, dtype=bool)
    q = 1.0 / (1.0 + np.exp(-logits))
    q0 = 1.0 / (1.0 + np.exp(-ref_logit))
    with np.errstate(divide="ignore", invalid="ignore"):
        terms = q * (np.log(q) - np.log(q0)) + (1 - q) * (np.log1p(-q) - np.log1p(-q0))
    terms = np.where(np.isfinite(terms), terms, 0.0)
    value = float(terms[off].sum())
    grad = q * (1 - q) * (logits - ref_logit)
    grad[~off] = 0.0
    return value, grad


# ---------------------------------------------------------------------------
# energy gradients


def _gaussian_logpdf_sum(x: np.ndarray, var: float) -> float:
    return float(-0.5 * x.size * (LOG_2PI + np.log(var)) - 0.5 * np.sum(x * x) / var)


def grad_U(
    p: np.ndarray,
    theta: np.ndarray,
    mask: MaskSample | np.ndarray,
    X: np.ndarray,
    n_total: int,
    model,
    prior: PriorConfig,
    consts: RelaxationConstants,
    relax=None,
):
    """Minibatch energy gradients for the potentials and model parameters.

    The theta gradient is exact at the realized graph; the p gradient routes
    through the transport plan and the soft-masked likelihood plus the soft
    sparsity term.  Returns (grad_p, grad_theta, info).
    """
    if isinstance(mask, MaskSample):
        w_hard, w_soft = mask.hard, mask.soft
    else:
        w_hard = np.asarray(mask, dtype=np.float64)
        w_soft = w_hard
    scale = n_total / len(X)
    plan, sigma = relax if relax is not None else relaxed_permutation(p, consts)
    if not plan.converged:
        # benign near ties: the plan is soft there and the unrolled gradient
        # is still exact for the iterations that ran
        log.debug("transport plan hit the iteration cap (%d)", plan.iterations_used)
    P_hard = order_matrix(sigma, consts.L)
    G_hard = w_hard * P_hard
    ll_hard, dtheta_ll, _ = scm.log_likelihood_grads(model, X, G_hard, theta)
    grad_theta = theta - scale * dtheta_ll

    P_soft = order_matrix(plan.S, consts.L)
    G_soft = w_soft * P_soft
    _, _, dmask_soft = scm.log_likelihood_grads(model, X, G_soft, theta)
    dG = scale * dmask_soft - 2.0 * prior.lambda_s * G_soft
    dS = order_matrix_vjp(plan.S, consts.L, dG * w_soft)
    grad_p = p / prior.alpha - plan_input_grad_to_p(plan.vjp(dS), consts)

    energy = (
        -scale * ll_hard
        + 0.5 * float(theta @ theta)
        + 0.5 * float(p @ p) / prior.alpha
        + prior.lambda_s * float(G_hard.sum())
    )
    info = {"loglik": ll_hard, "energy": energy, "plan": plan, "sigma": sigma}
    return grad_p, grad_theta, info


def soft_surrogate_energy(
    p: np.ndarray,
    theta: np.ndarray,
    w_soft: np.ndarray,
    X: np.ndarray,
    n_total: int,
    model,
    prior: PriorConfig,
    consts: RelaxationConstants,
):
    """Fully relaxed energy (soft plan and soft mask everywhere) with its
    analytic gradients; smooth in every argument, so finite differences apply.

    Returns (energy, grad_p, grad_theta, grad_mask).
    """
    scale = n_total / len(X)
    plan, _ = relaxed_permutation(p, consts)
    P_soft = order_matrix(plan.S, consts.L)
    G_soft = w_soft * P_soft
    ll, dtheta_ll, dmask_ll = scm.log_likelihood_grads(model, X, G_soft, theta)
    energy = (
        -scale * ll
        + 0.5 * float(theta @ theta)
        + 0.5 * float(p @ p) / prior.alpha
        + prior.lambda_s * float(np.sum(G_soft * G_soft))
    )
    grad_theta = theta - scale * dtheta_ll
    dG = -scale * dmask_ll + 2.0 * prior.lambda_s * G_soft
    grad_mask = dG * P_soft
    dS = order_matrix_vjp(plan.S, consts.L, dG * w_soft)
    grad_p = p / prior.alpha + plan_input_grad_to_p(plan.vjp(dS), consts)
    return energy, grad_p, grad_theta, grad_mask


def elbo(
    vi: ViSpec,
    phi: np.ndarray,
    p: np.ndarray,
    theta: np.ndarray,
    X: np.ndarray,
    n_total: int,
    model,
    prior: PriorConfig,
    consts: RelaxationConstants,
    rng: np.random.Generator,
    mc_samples: int = 1,
    gumbel_t: float = 0.2,
    sparse_init: bool = False,
    relax=None,
):
    """Evidence lower bound at (p, theta) and its gradient in phi.

    The expectation term is a Monte Carlo average over concrete mask draws;
    the likelihood path is straight-through (hard forward), the sparsity path
    uses the soft adjacency, and the Bernoulli KL is analytic.
    """
    scale = n_total / len(X)
    logits, cache = vi_logits(vi, phi, p, sparse_init)
    plan, sigma = relax if relax is not None else relaxed_permutation(p, consts)
    P_hard = order_matrix(sigma, consts.L)
    P_soft = order_matrix(plan.S, consts.L)
    value_sum = 0.0
    dlogits = np.zeros_like(logits)
    for _ in range(mc_samples):
        ms = concrete_mask_sample(logits, rng, gumbel_t, hard=True)
        G_k = ms.hard * P_hard
        ll_k, _, gmask_k = scm.log_likelihood_grads(model, X, G_k, theta)
        value_sum += scale * ll_k - prior.lambda_s * float(G_k.sum())
        dw = scale * gmask_k * P_hard - 2.0 * prior.lambda_s * (ms.soft * P_soft) * P_soft
        dlogits += dw * ms.soft * (1.0 - ms.soft) / gumbel_t
    kl, dkl = bernoulli_kl(logits)
    value = (
        value_sum / mc_samples
        + _gaussian_logpdf_sum(p, prior.alpha)
        + _gaussian_logpdf_sum(theta, 1.0)
        - kl
    )
    dlogits = dlogits / mc_samples - dkl
    grad_phi = vi_logits_grad(vi, cache, dlogits)
    return value, grad_phi


# ---------------------------------------------------------------------------
# particle storage


@dataclass
class Particle:
    chain: int
    step: int
    p: np.ndarray
    theta: np.ndarray
    w_tilde: np.ndarray | None = None


class ParticleBuffer:
    """Ring buffer of posterior snapshots."""

    def __init__(self, capacity: int = 100):
        if capacity < 1:
            raise ConfigError("particle capacity must be positive")
        self.capacity = capacity
        self.items: list[Particle] = []

    def append(self, particle: Particle) -> None:
        self.items.append(particle)
        if len(self.items) > self.capacity:
            del self.items[0]

    def __len__(self) -> int:
        return len(self.items)

    def __iter__(self):
        return iter(self.items)

    @staticmethod
    def schedule(total_steps: int) -> tuple[int, int]:
        """(burn_in, stride): store after half the run, ten snapshots/chain."""
        burn = total_steps // 2
        stride = max(1, math.ceil((total_steps - burn) / 10))
        return burn, stride

    @classmethod
    def should_store(cls, step: int, total_steps: int) -> bool:
        burn, stride = cls.schedule(total_steps)
        return step > burn and (step - burn) % stride == 0


def save_particles(
    path: str | Path,
    buffer: ParticleBuffer,
    config: TrainingConfig,
    phi: np.ndarray | None = None,
) -> None:
    particles = []
    for pt in buffer:
        entry = {
            "chain": int(pt.chain),
            "step": int(pt.step),
            "p": pt.p.tolist(),
            "theta": {"flat": pt.theta.tolist()},
        }
        if pt.w_tilde is not None:
            entry["w_tilde"] = pt.w_tilde.tolist()
        particles.append(entry)
    obj = {
        "chains": int(config.chains),
        "particles": particles,
        "phi": None if phi is None else {"hidden": config.phi_hidden, "flat": phi.tolist()},
        "config": config.to_dict(),
    }
    atomic_write_json(path, obj)


def load_particles(path: str | Path):
    """Returns (buffer, config, phi_or_None)."""
    obj = read_json(path)
    try:
        config = TrainingConfig.from_dict(obj["config"])
        buffer = ParticleBuffer(capacity=max(len(obj["particles"]), config.particles))
        for entry in obj["particles"]:
            buffer.append(
                Particle(
                    chain=int(entry["chain"]),
                    step=int(entry["step"]),
                    p=np.asarray(entry["p"], dtype=np.float64),
                    theta=np.asarray(entry["theta"]["flat"], dtype=np.float64),
                    w_tilde=None
                    if entry.get("w_tilde") is None
                    else np.asarray(entry["w_tilde"], dtype=np.float64),
                )
            )
        phi = None if obj.get("phi") is None else np.asarray(obj["phi"]["flat"], dtype=np.float64)
    except (KeyError, TypeError) as exc:
        raise DataError(f"{path}: malformed particle file: {exc}") from exc
    return buffer, config, phi


# ---------------------------------------------------------------------------
# gibbs training loop


@dataclass
class GibbsResult:
    buffer: ParticleBuffer
    phi: np.ndarray
    vi: ViSpec
    config: TrainingConfig
    model: object
    diagnostics: dict


def _chain_init(model, d: int, alpha: float, rng: np.random.Generator) -> SamplerState:
    p0 = rng.normal(size=d) * np.sqrt(alpha)
    theta0 = model.init_params(rng)
    return SamplerState(position=np.concatenate([p0, theta0]))


def gibbs_train(X: np.ndarray, config: TrainingConfig) -> GibbsResult:
    """Alternate sampler steps on (p, theta) with variational mask updates."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"training data must be a matrix, got {X.shape}")
    n, d = X.shape
    model = scm.make_model(config.model, d, config.architecture(d))
    prior = config.prior()
    consts = config.relaxation(d)
    vi = make_vi(d, config.phi_hidden)

    ss = np.random.SeedSequence(config.seed)
    seeds = ss.spawn(config.chains + 2)
    chain_rngs = [np.random.default_rng(s) for s in seeds[: config.chains]]
    data_rng = np.random.default_rng(seeds[config.chains])
    phi_rng = np.random.default_rng(seeds[config.chains + 1])

    states = [_chain_init(model, d, config.alpha, chain_rngs[c]) for c in range(config.chains)]
    s_vec = np.concatenate(
        [np.full(d, config.scale_p), np.full(model.n_params, config.scale_theta)]
    )
    hyper = SamplerHyper(l=config.lr, beta1=config.beta1, beta2=config.beta2, s=s_vec)
    phi = vi_init(vi, phi_rng)
    adam = nets.Adam(vi.n_params, lr=config.phi_lr)
    buffer = ParticleBuffer(capacity=config.particles)

    iters_per_epoch = max(1, math.ceil(n / config.batch))
    total_steps = config.epochs * iters_per_epoch
    nan_events = 0
    energy_trace: list[float] = []
    elbo_trace: list[float] = []

    def chain_work(c: int, batch: np.ndarray):
        rng = chain_rngs[c]
        state = states[c]
        p = state.position[:d]
        theta = state.position[d:]
        relax = relaxed_permutation(p, consts)
        ms = vi_sample_W(
            vi, phi, p, rng, gumbel_t=config.gumbel_t, sparse_init=config.sparse_init
        )
        gp, gth, info = grad_U(
            p, theta, ms, batch, n, model, prior, consts, relax=relax
        )
        sgmcmc_step(state, np.concatenate([gp, gth]), hyper, rng)
        diverged = not np.isfinite(state.position).all()
        if diverged:
            log.warning("chain %d diverged at step %d; reinitialized from the prior", c, state.step_count)
            states[c] = _chain_init(model, d, config.alpha, rng)
            state = states[c]
        p = state.position[:d]
        theta = state.position[d:]
        elbo_val, gphi = elbo(
            vi,
            phi,
            p,
            theta,
            batch,
            n,
            model,
            prior,
            consts,
            rng,
            mc_samples=config.mc_samples,
            gumbel_t=config.gumbel_t,
            sparse_init=config.sparse_init,
        )
        return info["energy"], elbo_val, gphi, diverged

    executor = (
        ThreadPoolExecutor(max_workers=config.threads) if config.threads > 1 else None
    )
    try:
        step = 0
        for _epoch in range(config.epochs):
            order = data_rng.permutation(n)
            for b in range(iters_per_epoch):
                batch = X[order[b * config.batch : (b + 1) * config.batch]]
                if len(batch) == 0:
                    batch = X
                step += 1
                if executor is not None:
                    results = list(executor.map(chain_work, range(config.chains), [batch] * config.chains))
                else:
                    results = [chain_work(c, batch) for c in range(config.chains)]
                gphi_mean = np.mean([r[2] for r in results], axis=0)
                phi = adam.ascend(phi, gphi_mean)
                energy_trace.append(float(np.mean([r[0] for r in results])))
                elbo_trace.append(float(np.mean([r[1] for r in results])))
                nan_events += sum(r[3] for r in results)
                if ParticleBuffer.should_store(step, total_steps):
                    for c, state in enumerate(states):
                        buffer.append(
                            Particle(
                                chain=c,
                                step=step,
                                p=state.position[:d].copy(),
                                theta=state.position[d:].copy(),
                            )
                        )
    finally:
        if executor is not None:
            executor.shutdown()

    diagnostics = {
        "energy_trace": energy_trace,
        "elbo_trace": elbo_trace,
        "nan_events": nan_events,
        "total_steps": total_steps,
    }
    return GibbsResult(buffer=buffer, phi=phi, vi=vi, config=config, model=model, diagnostics=diagnostics)


def posterior_graph_samples(
    result: GibbsResult, rng: np.random.Generator, draws_per_particle: int = 1
):
    """Realize (graph, theta) samples from stored particles by drawing masks
    from the variational conditional."""
    out = []
    for pt in result.buffer:
        logits, _ = vi_logits(result.vi, result.phi, pt.p, result.config.sparse_init)
        probs = 1.0 / (1.0 + np.exp(-logits))
        np.fill_diagonal(probs, 0.0)
        for _ in range(draws_per_particle):
            W = (rng.uniform(size=probs.shape) < probs).astype(np.int64)
            out.append((tau(W, pt.p), pt.theta))
    return out


# ---------------------------------------------------------------------------
# joint variant: continuous mask logits inside the sampled state


def _joint_terms(
    p: np.ndarray,
    theta: np.ndarray,
    w_tilde: np.ndarray,
    noises: list[np.ndarray],
    X: np.ndarray,
    n_total: int,
    model,
    prior: PriorConfig,
    consts: RelaxationConstants,
    gumbel_t: float,
    soft_forward: bool,
):
    """Shared machinery for the joint energy: per-sample log terms and the
    gradient pieces, with either straight-through (training) or fully soft
    (finite-difference surrogate) forwards."""
    scale = n_total / len(X)
    plan, sigma = relaxed_permutation(p, consts)
    P_hard = order_matrix(sigma, consts.L)
    P_soft = order_matrix(plan.S, consts.L)
    terms = []
    for noise in noises:
        soft = 1.0 / (1.0 + np.exp(-(w_tilde + noise) / gumbel_t))
        np.fill_diagonal(soft, 0.0)
        if soft_forward:
            G_fwd = soft * P_soft
        else:
            G_fwd = (soft > 0.5).astype(np.float64) * P_hard
        ll, dth, gmask = scm.log_likelihood_grads(model, X, G_fwd, theta)
        if soft_forward:
            sparsity = float(np.sum(G_fwd * G_fwd))
        else:
            sparsity = float(G_fwd.sum())
        logw = scale * ll - prior.lambda_s * sparsity
        terms.append({"logw": logw, "dth": dth, "gmask": gmask, "soft": soft, "G_fwd": G_fwd})
    logws = np.array([t["logw"] for t in terms])
    m = logws.max()
    if not np.isfinite(m):
        raise NumericError("all joint Monte Carlo terms underflowed")
    omega = np.exp(logws - m)
    omega /= omega.sum()
    return plan, P_hard, P_soft, terms, logws, omega, scale


def joint_grad_U(
    p: np.ndarray,
    theta: np.ndarray,
    w_tilde: np.ndarray,
    X: np.ndarray,
    n_total: int,
    model,
    prior: PriorConfig,
    consts: RelaxationConstants,
    rng: np.random.Generator,
    mc_samples: int = 4,
    gumbel_t: float = 0.2,
):
    """Gradients of the joint energy: priors plus the gradient of the log of
    a self-normalized Monte Carlo estimate of the mask-marginal likelihood.

    Returns (grad_p, grad_theta, grad_w_tilde, info).
    """
    d = p.size
    noises = []
    for _ in range(mc_samples):
        u = rng.uniform(size=(d, d))
        noises.append(np.log(u) - np.log1p(-u))
    plan, P_hard, P_soft, terms, logws, omega, scale = _joint_terms(
        p, theta, w_tilde, noises, X, n_total, model, prior, consts, gumbel_t, soft_forward=False
    )
    grad_theta = theta.copy()
    dC_soft = np.zeros((d, d))
    grad_wt = w_tilde.copy()
    for w_k, t_k in zip(omega, terms):
        grad_theta -= w_k * scale * t_k["dth"]
        soft = t_k["soft"]
        G_soft = soft * P_soft
        # p path: soft surrogate per sample
        _, _, gmask_soft = scm.log_likelihood_grads(model, X, G_soft, theta)
        dG = scale * gmask_soft - 2.0 * prior.lambda_s * G_soft
        dC_soft += w_k * dG * soft
        # logits path: straight-through likelihood, soft sparsity
        dw = scale * t_k["gmask"] * P_hard - 2.0 * prior.lambda_s * G_soft * P_soft
        grad_wt -= w_k * dw * soft * (1.0 - soft) / gumbel_t
    dS = order_matrix_vjp(plan.S, consts.L, dC_soft)
    grad_p = p / prior.alpha - plan_input_grad_to_p(plan.vjp(dS), consts)
    log_marg = float(logws.max() + np.log(np.mean(np.exp(logws - logws.max()))))
    energy = (
        -log_marg
        + 0.5 * float(theta @ theta)
        + 0.5 * float(p @ p) / prior.alpha
        + 0.5 * float(np.sum(w_tilde * w_tilde))
    )
    info = {"energy": energy, "log_marginal_estimate": log_marg}
    return grad_p, grad_theta, grad_wt, info


def joint_surrogate_energy(
    p: np.ndarray,
    theta: np.ndarray,
    w_tilde: np.ndarray,
    noises: list[np.ndarray],
    X: np.ndarray,
    n_total: int,
    model,
    prior: PriorConfig,
    consts: RelaxationConstants,
    gumbel_t: float = 0.2,
):
    """Fully relaxed joint energy under fixed concrete noises; smooth in all
    arguments.  Returns (energy, grad_p, grad_theta, grad_w_tilde)."""
    d = p.size
    plan, P_hard, P_soft, terms, logws, omega, scale = _joint_terms(
        p, theta, w_tilde, noises, X, n_total, model, prior, consts, gumbel_t, soft_forward=True
    )
    grad_theta = theta.copy()
    dC = np.zeros((d, d))
    grad_wt = w_tilde.copy()
    for w_k, t_k in zip(omega, terms):
        grad_theta -= w_k * scale * t_k["dth"]
        soft = t_k["soft"]
        G_soft = t_k["G_fwd"]
        dG = scale * t_k["gmask"] - 2.0 * prior.lambda_s * G_soft
        dC += w_k * dG * soft
        dw = dG * P_soft
        grad_wt -= w_k * dw * soft * (1.0 - soft) / gumbel_t
    dS = order_matrix_vjp(plan.S, consts.L, dC)
    grad_p = p / prior.alpha - plan_input_grad_to_p(plan.vjp(dS), consts)
    log_marg = float(logws.max() + np.log(np.mean(np.exp(logws - logws.max()))))
    energy = (
        -log_marg
        + 0.5 * float(theta @ theta)
        + 0.5 * float(p @ p) / prior.alpha
        + 0.5 * float(np.sum(w_tilde * w_tilde))
    )
    return energy, grad_p, grad_theta, grad_wt


@dataclass
class JointResult:
    buffer: ParticleBuffer
    config: TrainingConfig
    model: object
    diagnostics: dict


def joint_train(X: np.ndarray, config: TrainingConfig) -> JointResult:
    """Sample (p, theta, mask logits) jointly with the marginalized energy."""
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise DataError(f"training data must be a matrix, got {X.shape}")
    n, d = X.shape
    model = scm.make_model(config.model, d, config.architecture(d))
    prior = config.prior()
    consts = config.relaxation(d)

    ss = np.random.SeedSequence(config.seed)
    seeds = ss.spawn(config.chains + 1)
    chain_rngs = [np.random.default_rng(s) for s in seeds[: config.chains]]
    data_rng = np.random.default_rng(seeds[config.chains])

    def init_state(rng):
        p0 = rng.normal(size=d) * np.sqrt(config.alpha)
        theta0 = model.init_params(rng)
        wt0 = rng.normal(size=d * d)
        return SamplerState(position=np.concatenate([p0, theta0, wt0]))

    states = [init_state(r) for r in chain_rngs]
    s_vec = np.concatenate(
        [
            np.full(d, config.scale_p),
            np.full(model.n_params, config.scale_theta),
            np.full(d * d, config.scale_theta),
        ]
    )
    hyper = SamplerHyper(l=config.lr, beta1=config.beta1, beta2=config.beta2, s=s_vec)
    buffer = ParticleBuffer(capacity=config.particles)

    iters_per_epoch = max(1, math.ceil(n / config.batch))
    total_steps = config.epochs * iters_per_epoch
    nan_events = 0
    energy_trace: list[float] = []

    step = 0
    mc = max(2, config.mc_samples)  # the ratio estimator needs spread
    for _epoch in range(config.epochs):
        order = data_rng.permutation(n)
        for b in range(iters_per_epoch):
            batch = X[order[b * config.batch : (b + 1) * config.batch]]
            if len(batch) == 0:
                batch = X
            step += 1
            energies = []
            for c in range(config.chains):
                rng = chain_rngs[c]
                state = states[c]
                p = state.position[:d]
                theta = state.position[d : d + model.n_params]
                wt = state.position[d + model.n_params :].reshape(d, d)
                gp, gth, gwt, info = joint_grad_U(
                    p,
                    theta,
                    wt,
                    batch,
                    n,
                    model,
                    prior,
                    consts,
                    rng,
                    mc_samples=mc,
                    gumbel_t=config.gumbel_t,
                )
                sgmcmc_step(state, np.concatenate([gp, gth, gwt.ravel()]), hyper, rng)
                if not np.isfinite(state.position).all():
                    nan_events += 1
                    log.warning(
                        "joint chain %d diverged at step %d; reinitialized from the prior", c, step
                    )
                    states[c] = init_state(rng)
                energies.append(info["energy"])
            energy_trace.append(float(np.mean(energies)))
            if ParticleBuffer.should_store(step, total_steps):
                for c, state in enumerate(states):
                    buffer.append(
                        Particle(
                            chain=c,
                            step=step,
                            p=state.position[:d].copy(),
                            theta=state.position[d : d + model.n_params].copy(),
                            w_tilde=state.position[d + model.n_params :].reshape(d, d).copy(),
                        )
                    )

    diagnostics = {
        "energy_trace": energy_trace,
        "nan_events": nan_events,
        "total_steps": total_steps,
    }
    return JointResult(buffer=buffer, config=config, model=model, diagnostics=diagnostics)


def posterior_expectation(
    particles,
    f,
    X: np.ndarray,
    model,
    rng: np.random.Generator,
    mc_samples: int = 16,
    lambda_s: float = 0.0,
):
    """Self-normalized estimate of a posterior functional from joint-mode
    particles: per particle, masks drawn from the logits are reweighted by
    the full-data likelihood (times the sparsity factor), and f(G, theta) is
    averaged under those weights; the outer average is over particles.
    """
    particles = list(particles)
    if not particles:
        raise DataError("posterior_expectation needs at least one particle")
    values = []
    for pt in particles:
        if pt.w_tilde is None:
            raise DataError("particle lacks mask logits; posterior_expectation needs joint-mode particles")
        probs = 1.0 / (1.0 + np.exp(-pt.w_tilde))
        np.fill_diagonal(probs, 0.0)
        logw = np.empty(mc_samples)
        fs = np.empty(mc_samples)
        for k in range(mc_samples):
            W = (rng.uniform(size=probs.shape) < probs).astype(np.int64)
            G = tau(W, pt.p)
            logw[k] = scm.log_likelihood(model, X, G, pt.theta) - lambda_s * float(G.sum())
            fs[k] = f(G, pt.theta)
        m = logw.max()
        if not np.isfinite(m):
            raise NumericError("degenerate weights: every mask draw has zero posterior mass")
        e = np.exp(logw - m)
        values.append(float((e * fs).sum() / e.sum()))
    return float(np.mean(values))


def joint_graph_samples(result: JointResult, X: np.ndarray, rng: np.random.Generator, mc_samples: int = 16):
    """Realize one (graph, theta) pair per stored particle by resampling a
    mask draw with the self-normalized weights."""
    out = []
    for pt in result.buffer:
        probs = 1.0 / (1.0 + np.exp(-pt.w_tilde))
        np.fill_diagonal(probs, 0.0)
        logw = np.empty(mc_samples)
        Gs = []
        for k in range(mc_samples):
            W = (rng.uniform(size=probs.shape) < probs).astype(np.int64)
            G = tau(W, pt.p)
            logw[k] = scm.log_likelihood(result.model, X, G, pt.theta) - result.config.lambda_s * float(G.sum())
            Gs.append(G)
        m = logw.max()
        if not np.isfinite(m):
            raise NumericError("degenerate weights: every mask draw has zero posterior mass")
        e = np.exp(logw - m)
        pick = rng.choice(mc_samples, p=e / e.sum())
        out.append((Gs[pick], pt.theta))
    return out
