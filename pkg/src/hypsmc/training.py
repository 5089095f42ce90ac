"""Variational training of embeddings, proposal covariance and rate matrix.

The objective is E[log Z_hat]. Gradients are pathwise: a run of the
sampler is recorded (discrete choices as index arrays, Gaussian draws as
eps arrays) and replayed as a pure differentiable function of the
parameters under jax, with the recorded choices held fixed. This is the
common-random-number convention: no score terms for pair choices,
resampling ancestors or nested-sampler selections.

Phase 1 of training places every parent deterministically at the
closest-to-origin geodesic point (no Wrapped Normal draw, no density or
Jacobian terms), which makes per-topology computations reusable; phase 2
restores the full stochastic proposal.
"""

import hashlib
import time
from dataclasses import dataclass, field, replace

import numpy as np
import jax

jax.config.update("jax_enable_x64", True)

import jax.numpy as jnp

from . import evolution as evo
from .csmc import (NumericAbort, SamplerModel, _forward_csmc, leaf_log_z0,
                   propose_math)
from .embedding import EmbedConfig, embed
from .geometry import clamp_to_disk
from .ncsmc import _forward_ncsmc, _lookahead_math


# -- parameters --------------------------------------------------------------

@dataclass(frozen=True)
class TrainableParams:
    embeddings: np.ndarray        # (N, 2)
    cov_raw: np.ndarray           # (2,) softplus pre-activations of Sigma diagonal
    stat_logits: np.ndarray       # (A,)
    hold_raw: np.ndarray          # (A,)
    lambda_bl: float = 10.0       # fixed, not trained

    def as_dict(self):
        return {"embeddings": self.embeddings, "cov_raw": self.cov_raw,
                "stat_logits": self.stat_logits, "hold_raw": self.hold_raw}

    @staticmethod
    def init(embeddings, alphabet_size=4, sigma=0.2, lambda_bl=10.0):
        raw = float(np.log(np.expm1(sigma)))
        hold = float(np.log(np.expm1(1.0)))
        return TrainableParams(np.asarray(embeddings, float),
                               np.array([raw, raw]),
                               np.zeros(alphabet_size),
                               np.full(alphabet_size, hold),
                               lambda_bl)


def _softplus(x, xp=np):
    return xp.logaddexp(x, 0.0)


def build_model_arrays(p, xp=np):
    """(chol, Q, stationary) from the unconstrained parameters."""
    sigma = _softplus(xp.asarray(p["cov_raw"]), xp=xp)
    chol = xp.diag(sigma)
    s, h = evo.rate_matrix_factors(xp.asarray(p["stat_logits"]),
                                   xp.asarray(p["hold_raw"]), xp=xp)
    Q = evo.assemble_q(s, h, xp=xp)
    return chol, Q, s


def rate_matrix_of(params: TrainableParams) -> evo.RateMatrix:
    s, h = evo.rate_matrix_factors(params.stat_logits, params.hold_raw)
    return evo.RateMatrix(s, h, evo.assemble_q(s, h))


# -- ELBO estimate (plain numpy forward pass) --------------------------------

def run_forward(params: TrainableParams, alignment, K, seed, mode="csmc", *,
                M=2, deterministic=False, memo=None, build_states=False):
    chol, Q, s = build_model_arrays(params.as_dict())
    model = SamplerModel(Q, s, params.lambda_bl, chol)
    log_partials = evo.leaf_log_partials(alignment)
    emb = clamp_to_disk(params.embeddings)
    if mode == "csmc":
        return _forward_csmc(emb, log_partials, model, K, seed,
                             deterministic=deterministic, memo=memo,
                             build_states=build_states)
    return _forward_ncsmc(emb, log_partials, model, K, M, seed,
                          build_states=build_states)


def elbo_estimate(params: TrainableParams, alignment, K, seed, mode="csmc", *,
                  M=2, deterministic=False, n_seeds=1):
    """Mean absolute log marginal estimate over n_seeds independent runs."""
    vals = [run_forward(params, alignment, K, seed + i, mode,
                        M=M, deterministic=deterministic).log_marginal
            for i in range(n_seeds)]
    return float(np.mean(vals))


# -- differentiable replay ---------------------------------------------------

def _logsumexp_j(x, axis=-1):
    m = jnp.max(x, axis=axis, keepdims=True)
    m = jnp.where(jnp.isfinite(m), m, 0.0)
    return jnp.log(jnp.sum(jnp.exp(x - m), axis=axis)) + jnp.squeeze(m, axis)


def _record_pytree(record):
    """Stacked jax-friendly view of a RunRecord (lists of arrays per rank)."""
    anc = [a if a is not None else None for a in record.ancestors]
    if record.mode == "csmc":
        return (tuple(anc), tuple(record.left_ids), tuple(record.right_ids),
                tuple(record.eps))
    return (tuple(anc), tuple(record.cand_left), tuple(record.cand_right),
            tuple(record.eps), tuple(record.chosen))


def _replay_csmc(p, rec, log_partials, lambda_bl, deterministic):
    ancestors, left_ids, right_ids, eps = rec
    N, S, A = log_partials.shape
    K = eps[0].shape[0]
    chol, Q, s = build_model_arrays(p, xp=jnp)
    model = SamplerModel(Q, s, lambda_bl, chol)
    emb = clamp_to_disk(p["embeddings"], xp=jnp)

    pos = jnp.zeros((K, 2 * N - 1, 2)).at[:, :N].set(emb[None])
    logL = jnp.full((K, 2 * N - 1, S, A), -jnp.inf).at[:, :N].set(log_partials[None])
    leaf_tll = evo.root_log_likelihood(log_partials, s, xp=jnp)
    tree_ll = jnp.zeros((K, 2 * N - 1)).at[:, :N].set(leaf_tll[None])
    kidx = jnp.arange(K)

    total = leaf_log_z0(emb, log_partials, model, xp=jnp)
    for r in range(1, N):
        rho = N - r + 1
        n_pairs = rho * (rho - 1) // 2
        if ancestors[r - 1] is not None:
            a = ancestors[r - 1]
            pos, logL, tree_ll = pos[a], logL[a], tree_ll[a]
        l_ids, r_ids = left_ids[r - 1], right_ids[r - 1]
        out = propose_math(pos[kidx, l_ids], pos[kidx, r_ids],
                           logL[kidx, l_ids], logL[kidx, r_ids],
                           tree_ll[kidx, l_ids], tree_ll[kidx, r_ids],
                           eps[r - 1], model, deterministic, xp=jnp)
        v_dot, _, _, logL_new, tll_new, logw = out
        logw = logw + jnp.log(n_pairs)
        new_id = N - 1 + r
        pos = pos.at[:, new_id].set(v_dot)
        logL = logL.at[:, new_id].set(logL_new)
        tree_ll = tree_ll.at[:, new_id].set(tll_new)
        total = total + _logsumexp_j(logw) - jnp.log(K)
    return total


def _replay_ncsmc(p, rec, log_partials, lambda_bl, M):
    ancestors, cand_left, cand_right, eps, chosen = rec
    N, S, A = log_partials.shape
    K = eps[0].shape[0]
    chol, Q, s = build_model_arrays(p, xp=jnp)
    model = SamplerModel(Q, s, lambda_bl, chol)
    emb = clamp_to_disk(p["embeddings"], xp=jnp)

    pos = jnp.zeros((K, 2 * N - 1, 2)).at[:, :N].set(emb[None])
    logL = jnp.full((K, 2 * N - 1, S, A), -jnp.inf).at[:, :N].set(log_partials[None])
    leaf_tll = evo.root_log_likelihood(log_partials, s, xp=jnp)
    tree_ll = jnp.zeros((K, 2 * N - 1)).at[:, :N].set(leaf_tll[None])
    kidx = jnp.arange(K)

    total = leaf_log_z0(emb, log_partials, model, xp=jnp)
    for r in range(1, N):
        rho = N - r + 1
        n_pairs = rho * (rho - 1) // 2
        if ancestors[r - 1] is not None:
            a = ancestors[r - 1]
            pos, logL, tree_ll = pos[a], logL[a], tree_ll[a]
        cl, cr = cand_left[r - 1], cand_right[r - 1]
        out = _lookahead_math(pos, logL, tree_ll, cl, cr, eps[r - 1],
                              n_pairs, M, model, xp=jnp)
        v_dot, _, _, logL_new, tll_new, pots = out
        flat = pots.reshape(K, n_pairs * M)
        logw = _logsumexp_j(flat) - jnp.log(n_pairs * M)
        ch = chosen[r - 1]
        j_star, m_star = ch // M, ch % M
        new_id = N - 1 + r
        pos = pos.at[:, new_id].set(v_dot[kidx, j_star, m_star])
        logL = logL.at[:, new_id].set(logL_new[kidx, j_star, m_star])
        tree_ll = tree_ll.at[:, new_id].set(tll_new[kidx, j_star, m_star])
        total = total + _logsumexp_j(logw) - jnp.log(K)
    return total


_compiled = {}


def _replay_grad_fn(mode, deterministic, shape_sig, lambda_bl, M):
    key = (mode, deterministic, shape_sig, lambda_bl, M)
    if key not in _compiled:
        if mode == "csmc":
            def f(p, rec, log_partials):
                return _replay_csmc(p, rec, log_partials, lambda_bl,
                                    deterministic)
        else:
            def f(p, rec, log_partials):
                return _replay_ncsmc(p, rec, log_partials, lambda_bl, M)
        _compiled[key] = jax.jit(jax.value_and_grad(f))
    return _compiled[key]


def gradient(params: TrainableParams, alignment, K, seed, mode="csmc", *,
             M=2, deterministic=False, memo=None):
    """Pathwise gradient of the single-seed ELBO estimate.

    Returns (value, grads dict). The value is the replayed log marginal and
    matches elbo_estimate for the same seed to numerical round-off.
    """
    system = run_forward(params, alignment, K, seed, mode, M=M,
                         deterministic=deterministic, memo=memo,
                         build_states=False)
    log_partials = evo.leaf_log_partials(alignment)
    sig = (alignment.n_taxa, K, alignment.n_sites, log_partials.shape[-1])
    fn = _replay_grad_fn(mode, deterministic, sig, params.lambda_bl, M)
    value, grads = fn(params.as_dict(), _record_pytree(system.record),
                      log_partials)
    bad = [k for k, g in grads.items() if not np.all(np.isfinite(g))]
    if bad:
        raise NumericAbort(f"non-finite gradient in {bad}")
    return float(value), {k: np.asarray(v) for k, v in grads.items()}


# -- training loop -----------------------------------------------------------

@dataclass(frozen=True)
class TrainConfig:
    steps: int = 400
    phase1_steps: int = 200
    K: int = 8
    M: int = 2
    mode: str = "csmc"
    step_size: float = 5e-3
    decay: float = 0.999
    grad_clip: float = 50.0
    seed: int = 0
    lambda_bl: float = 10.0
    memoize: bool = True
    embed: EmbedConfig = field(default_factory=EmbedConfig)


@dataclass
class TrainingTrace:
    steps: list = field(default_factory=list)   # (step, phase, log_Z, grad_norm, hash, secs)

    def append(self, step, phase, log_z, grad_norm, params_hash, secs):
        if self.steps and step <= self.steps[-1][0]:
            raise ValueError("step indices must increase")
        self.steps.append((step, phase, log_z, grad_norm, params_hash, secs))


def params_hash(params: TrainableParams) -> str:
    h = hashlib.sha256()
    for k in ("embeddings", "cov_raw", "stat_logits", "hold_raw"):
        h.update(np.ascontiguousarray(getattr(params, k)).tobytes())
    return h.hexdigest()[:16]


def train(alignment, config: TrainConfig = TrainConfig(), *,
          init_params: TrainableParams = None):
    """Two-phase gradient ascent on the ELBO. Returns (params, trace)."""
    if init_params is None:
        emb = embed(alignment, config.embed)
        init_params = TrainableParams.init(emb.points,
                                           len(alignment.alphabet),
                                           lambda_bl=config.lambda_bl)
    params = init_params
    trace = TrainingTrace()
    lr = config.step_size
    initial_value = None
    bad_streak = 0

    for step in range(config.steps):
        phase = 1 if step < config.phase1_steps else 2
        memo = {} if (config.memoize and phase == 1) else None
        t0 = time.perf_counter()
        value, grads = gradient(params, alignment, config.K,
                                config.seed + step, config.mode,
                                M=config.M, deterministic=(phase == 1),
                                memo=memo)
        if initial_value is None:
            initial_value = value
        bad_streak = bad_streak + 1 if value < initial_value - 50.0 else 0
        if bad_streak >= 100:
            raise NumericAbort("ELBO diverged for 100 consecutive steps")
        gnorm = float(np.sqrt(sum(float(np.sum(g * g))
                                  for g in grads.values())))
        # clip by global norm; near the disk boundary single gradients can
        # be many orders of magnitude above the useful signal
        scale = lr * min(1.0, config.grad_clip / max(gnorm, 1e-30))
        updated = {k: getattr(params, k) + scale * grads[k]
                   for k in grads}
        updated["embeddings"] = clamp_to_disk(updated["embeddings"])
        params = replace(params, **updated)
        lr *= config.decay
        trace.append(step, phase, value, gnorm, params_hash(params),
                     time.perf_counter() - t0)
    return params, trace


def topology_memo_key(state: evo.PartialState):
    """Canonical child-order-invariant key for a forest's topology."""
    return tuple(sorted(root.topo_key for root in state.roots))
