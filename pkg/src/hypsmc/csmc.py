"""Combinatorial SMC over coalescent events with hyperbolic parent proposals.

Each rank resamples ancestors, picks a uniform root pair per particle,
proposes a parent embedding from a Wrapped Normal centered on the point of
the pair's geodesic closest to the origin, and weights the particle with
the target increment, the proposal densities and the branch-length
change-of-variables determinant.

The per-rank math is vectorized over particles and parametrized over the
array backend so the gradient engine can replay a recorded run under jax.
"""

from dataclasses import dataclass, field
from itertools import combinations

import numpy as np

from . import evolution as evo
from .geometry import (closest_point_on_geodesic, hyp_distance,
                       hyp_distance_grad)
from .streams import particle_stream
from .wrapped_normal import WrappedNormalParams, wn_log_density, wn_sample_from_eps


class NumericAbort(RuntimeError):
    """Raised when the particle system degenerates (all weights zero/non-finite)."""


_JAC_FLOOR = 1e-12


def branch_jacobian_log_det(v_dot, child_l, child_r, xp=np):
    """log |det| of the 2x2 map from the parent point to the two branch lengths.

    Rows are Euclidean gradients of hyp_distance(child, .) at the parent;
    |det| is clamped below at 1e-12 before the log (the determinant vanishes
    when the parent lies on the children's geodesic).
    """
    g_l = hyp_distance_grad(v_dot, child_l, xp=xp)
    g_r = hyp_distance_grad(v_dot, child_r, xp=xp)
    det = g_l[..., 0] * g_r[..., 1] - g_l[..., 1] * g_r[..., 0]
    return xp.log(xp.maximum(xp.abs(det), _JAC_FLOOR))


@dataclass
class SamplerModel:
    """Array bundle consumed by the rank math (numpy or jax arrays)."""
    Q: object
    stationary: object
    lambda_bl: float
    chol: object                 # (2,2) Cholesky factor of the proposal covariance
    decoder: object = None       # optional DecoderParams for per-node rate matrices

    @staticmethod
    def build(rate: evo.RateMatrix, prior: evo.BranchPrior,
              wn_cov=None, decoder=None):
        cov = np.eye(2) * 0.04 if wn_cov is None else np.asarray(wn_cov, float)
        return SamplerModel(rate.Q, rate.stationary, prior.lambda_bl,
                            np.linalg.cholesky(cov), decoder)


def _stationary_at(v, model, xp):
    """(Q, site-broadcastable stationary) for a merge at parent points v."""
    if model.decoder is None:
        return model.Q, model.stationary
    s, h = evo.decode_rate_factors(v, model.decoder, xp=xp)
    return evo.assemble_q(s, h, xp=xp), s[..., None, :]


def leaf_log_z0(embeddings, log_partials, model, xp=np):
    """Rank-0 forest target: summed leaf marginal log likelihoods."""
    if model.decoder is None:
        stat = model.stationary
    else:
        s, _ = evo.decode_rate_factors(embeddings, model.decoder, xp=xp)
        stat = s[..., None, :]
    return xp.sum(evo.root_log_likelihood(log_partials, stat, xp=xp))


def propose_math(vL, vR, logL_L, logL_R, tll_L, tll_R, eps, model,
                 deterministic, xp=np):
    """Shared proposal arithmetic for one coalescence (batched).

    Returns (parent point, beta_l, beta_r, merged log partials, merged tree
    log likelihood, log weight without the pair-count term).
    """
    v_p = closest_point_on_geodesic(vL, vR, xp=xp)
    if deterministic:
        v_dot = v_p
    else:
        v_dot, _ = wn_sample_from_eps(v_p, model.chol, eps, xp=xp)
    beta_l = hyp_distance(vL, v_dot, xp=xp)
    beta_r = hyp_distance(vR, v_dot, xp=xp)
    Q, stat = _stationary_at(v_dot, model, xp)
    P_l = evo.transition_matrix(Q, beta_l, xp=xp)
    P_r = evo.transition_matrix(Q, beta_r, xp=xp)
    logL_new = evo.merge_log_partials(logL_L, logL_R, P_l, P_r, xp=xp)
    tll_new = evo.root_log_likelihood(logL_new, stat, xp=xp)
    logw = (tll_new - tll_L - tll_R
            + evo.branch_log_prior(beta_l, model.lambda_bl, xp=xp)
            + evo.branch_log_prior(beta_r, model.lambda_bl, xp=xp))
    if not deterministic:
        logw = logw - wn_log_density(v_dot, v_p, chol=model.chol, xp=xp)
        logw = logw + branch_jacobian_log_det(v_dot, vL, vR, xp=xp)
    return v_dot, beta_l, beta_r, logL_new, tll_new, logw


def resample_indices(log_weights, uniforms, xp=np):
    """Multinomial ancestors by inverse CDF, one uniform per particle."""
    m = np.max(log_weights)
    if not np.isfinite(m):
        raise NumericAbort("all particle weights are zero at resampling")
    w = np.exp(log_weights - m)
    cdf = np.cumsum(w)
    cdf /= cdf[-1]
    return np.minimum(np.searchsorted(cdf, uniforms, side="right"),
                      len(log_weights) - 1)


def _logmeanexp(logw):
    m = np.max(logw)
    if not np.isfinite(m):
        raise NumericAbort("all particle weights vanished in a rank")
    return float(m + np.log(np.mean(np.exp(logw - m))))


def _ess(logw):
    m = np.max(logw)
    w = np.exp(logw - m)
    return float(w.sum() ** 2 / np.sum(w * w))


@dataclass
class RunRecord:
    """Everything needed to replay a run deterministically (discrete choices
    as concrete index arrays, continuous draws as standard-normal arrays)."""
    mode: str
    n_taxa: int
    K: int
    deterministic: bool
    ancestors: list = field(default_factory=list)     # per rank, (K,) or None
    left_ids: list = field(default_factory=list)      # per rank, (K,)
    right_ids: list = field(default_factory=list)     # per rank, (K,)
    eps: list = field(default_factory=list)           # per rank, (K,2)
    cand_left: list = field(default_factory=list)     # ncsmc: per rank, (K,C)
    cand_right: list = field(default_factory=list)    # ncsmc: per rank, (K,C)
    chosen: list = field(default_factory=list)        # ncsmc: per rank, (K,) flat j*M+m


@dataclass
class ParticleSystem:
    states: tuple                 # K final PartialStates (may be empty if not built)
    log_weights: np.ndarray       # final-rank log weights
    ancestor_indices: list
    log_Z_terms: list             # per-rank log mean weight
    ess: list
    record: RunRecord
    log_Z0: float                 # rank-0 forest target (leaf marginals)

    @property
    def log_Z(self):
        return float(sum(self.log_Z_terms))

    @property
    def log_marginal(self):
        """Absolute marginal-likelihood estimate (adds the rank-0 target)."""
        return self.log_Z0 + self.log_Z


class _Bookkeeper:
    """Per-particle python-side topology state (ids, keys, clades)."""

    def __init__(self, K, n_taxa, embeddings, log_partials, leaf_tll,
                 build_states):
        self.build_states = build_states
        self.n_taxa = n_taxa
        self.keys = [{i: ("L", i) for i in range(n_taxa)} for _ in range(K)]
        if build_states:
            self.clades = [
                {i: evo.Clade(i, None, embeddings[i], log_partials[i],
                              float(leaf_tll[i]), 0.0, ("L", i))
                 for i in range(n_taxa)}
                for _ in range(K)]
        else:
            self.clades = None

    def gather(self, ancestors):
        self.keys = [dict(self.keys[a]) for a in ancestors]
        if self.clades is not None:
            self.clades = [dict(self.clades[a]) for a in ancestors]

    def merge(self, k, new_id, l_id, r_id, v_dot, beta_l, beta_r,
              logL_row, tll, lambda_bl):
        key = ("I", tuple(sorted([self.keys[k][l_id], self.keys[k][r_id]])))
        self.keys[k][new_id] = key
        if self.clades is not None:
            left = self.clades[k][l_id]
            right = self.clades[k][r_id]
            prior = (left.branch_logprior + right.branch_logprior
                     + float(evo.branch_log_prior(beta_l, lambda_bl))
                     + float(evo.branch_log_prior(beta_r, lambda_bl)))
            self.clades[k][new_id] = evo.Clade(
                None, ((left, float(beta_l)), (right, float(beta_r))),
                np.array(v_dot), logL_row, float(tll), prior, key)
        return key


def run_csmc(alignment, embeddings, rate, prior, K, seed, *,
             wn_cov=None, deterministic=False, decoder=None, memo=None,
             build_states=True):
    """Full H-CSMC run; deterministic given the seed.

    Returns (ParticleSystem, log_Z) with log_Z the product-of-mean-weights
    estimate (relative to the rank-0 target; use .log_marginal for the
    absolute value).
    """
    model = SamplerModel.build(rate, prior, wn_cov=wn_cov, decoder=decoder)
    embeddings = np.asarray(embeddings, float)
    log_partials = evo.leaf_log_partials(alignment)
    system = _forward_csmc(embeddings, log_partials, model, K, seed,
                           deterministic=deterministic, memo=memo,
                           build_states=build_states)
    return system, system.log_Z


def _forward_csmc(embeddings, log_partials, model, K, seed, *,
                  deterministic=False, memo=None, build_states=True):
    N, S, A = log_partials.shape
    n_nodes = 2 * N - 1
    xp = np

    pos = np.zeros((K, n_nodes, 2))
    pos[:, :N] = embeddings
    logL = np.full((K, n_nodes, S, A), -np.inf)
    logL[:, :N] = log_partials
    tree_ll = np.zeros((K, n_nodes))
    if model.decoder is None:
        leaf_tll = evo.root_log_likelihood(log_partials, model.stationary)
    else:
        s, _ = evo.decode_rate_factors(embeddings, model.decoder)
        leaf_tll = evo.root_log_likelihood(log_partials, s[:, None, :])
    tree_ll[:, :N] = leaf_tll
    roots = np.tile(np.arange(N), (K, 1))

    book = _Bookkeeper(K, N, embeddings, log_partials, leaf_tll, build_states)
    record = RunRecord("csmc", N, K, deterministic)
    log_Z_terms, ess_trace, anc_trace = [], [], []
    logw = None
    kidx = np.arange(K)

    for r in range(1, N):
        rho = N - r + 1
        pairs = list(combinations(range(rho), 2))
        C = len(pairs)

        u_res = np.empty(K)
        u_pair = np.empty(K)
        eps = np.zeros((K, 2))
        for k in range(K):
            g = particle_stream(seed, r, k)
            if r >= 2:
                u_res[k] = g.random()
            if C > 1:
                u_pair[k] = g.random()
            if not deterministic:
                eps[k] = g.standard_normal(2)

        if r >= 2:
            ancestors = resample_indices(logw, u_res)
            pos, logL, tree_ll, roots = (pos[ancestors], logL[ancestors],
                                         tree_ll[ancestors], roots[ancestors])
            book.gather(ancestors)
            anc_trace.append(ancestors)
            record.ancestors.append(ancestors)
        else:
            record.ancestors.append(None)

        if C > 1:
            pick = np.minimum((u_pair * C).astype(np.int64), C - 1)
        else:
            pick = np.zeros(K, dtype=np.int64)
        slots = np.array(pairs, dtype=np.int64)[pick]        # (K, 2)
        l_ids = roots[kidx, slots[:, 0]]
        r_ids = roots[kidx, slots[:, 1]]

        new_id = N - 1 + r
        out = _csmc_rank_math(pos, logL, tree_ll, l_ids, r_ids, eps, C,
                              model, deterministic, xp, book, memo)
        v_dot, beta_l, beta_r, logL_new, tll_new, logw = out

        pos[:, new_id] = v_dot
        logL[:, new_id] = logL_new
        tree_ll[:, new_id] = tll_new
        roots[kidx, slots[:, 0]] = new_id
        roots[kidx, slots[:, 1]] = roots[:, rho - 1]

        for k in range(K):
            book.merge(k, new_id, int(l_ids[k]), int(r_ids[k]), v_dot[k],
                       beta_l[k], beta_r[k], logL[k, new_id],
                       tll_new[k], model.lambda_bl)

        record.left_ids.append(l_ids)
        record.right_ids.append(r_ids)
        record.eps.append(eps)
        log_Z_terms.append(_logmeanexp(logw))
        ess_trace.append(_ess(logw))

    states = ()
    if build_states:
        states = tuple(evo.PartialState((book.clades[k][2 * N - 2],), N)
                       for k in range(K))
    log_z0 = float(leaf_log_z0(embeddings, log_partials, model))
    return ParticleSystem(states, logw, anc_trace, log_Z_terms, ess_trace,
                          record, log_z0)


def _csmc_rank_math(pos, logL, tree_ll, l_ids, r_ids, eps, n_pairs, model,
                    deterministic, xp, book=None, memo=None):
    """One rank of proposal math for all particles, with optional phase-1
    memoization keyed by the ordered child-topology pair."""
    kidx = np.arange(pos.shape[0])
    vL, vR = pos[kidx, l_ids], pos[kidx, r_ids]
    logL_L, logL_R = logL[kidx, l_ids], logL[kidx, r_ids]
    tll_L, tll_R = tree_ll[kidx, l_ids], tree_ll[kidx, r_ids]

    if memo is not None and deterministic and book is not None:
        return _memoized_rank(vL, vR, logL_L, logL_R, tll_L, tll_R, model,
                              n_pairs, book, l_ids, r_ids, memo)

    v_dot, beta_l, beta_r, logL_new, tll_new, logw = propose_math(
        vL, vR, logL_L, logL_R, tll_L, tll_R, eps, model, deterministic, xp=xp)
    return v_dot, beta_l, beta_r, logL_new, tll_new, logw + np.log(n_pairs)


def _memoized_rank(vL, vR, logL_L, logL_R, tll_L, tll_R, model, n_pairs,
                   book, l_ids, r_ids, memo):
    K = vL.shape[0]
    keys = [(book.keys[k][int(l_ids[k])], book.keys[k][int(r_ids[k])])
            for k in range(K)]
    fresh = []
    seen = {}
    for k, key in enumerate(keys):
        if key not in memo and key not in seen:
            seen[key] = None
            fresh.append(k)
    if fresh:
        idx = np.array(fresh)
        out = propose_math(vL[idx], vR[idx], logL_L[idx], logL_R[idx],
                           tll_L[idx], tll_R[idx], None, model, True, xp=np)
        for j, k in enumerate(fresh):
            memo[keys[k]] = tuple(np.array(o[j]) for o in out)
    parts = [memo[key] for key in keys]
    v_dot = np.stack([p[0] for p in parts])
    beta_l = np.array([p[1] for p in parts])
    beta_r = np.array([p[2] for p in parts])
    logL_new = np.stack([p[3] for p in parts])
    tll_new = np.array([p[4] for p in parts])
    logw = np.array([p[5] for p in parts]) + np.log(n_pairs)
    return v_dot, beta_l, beta_r, logL_new, tll_new, logw


# -- object-level operations -------------------------------------------------

@dataclass(frozen=True)
class ProposalRecord:
    pair: tuple                  # root indices (i, j) within the state
    parent: np.ndarray           # (2,) sampled parent point
    tangent_draw: np.ndarray     # raw standard-normal-driven tangent draw
    beta_l: float
    beta_r: float
    log_q_topology: float
    log_q_embed: float
    log_jacobian: float


def propose_coalescence(state: evo.PartialState, wn: WrappedNormalParams,
                        rng, *, rate: evo.RateMatrix,
                        prior: evo.BranchPrior):
    """Single-particle proposal following the sampler pipeline.

    The Wrapped Normal template supplies the covariance; its mean field is
    ignored (the mean is always the closest-to-origin geodesic point).
    """
    rho = len(state.roots)
    if rho < 2:
        raise ValueError("need at least two roots to coalesce")
    pairs = list(combinations(range(rho), 2))
    if len(pairs) > 1:
        pick = pairs[min(int(rng.random() * len(pairs)), len(pairs) - 1)]
    else:
        pick = pairs[0]
    left, right = state.roots[pick[0]], state.roots[pick[1]]
    eps = rng.standard_normal(2)
    model = SamplerModel(rate.Q, rate.stationary, prior.lambda_bl,
                         np.linalg.cholesky(wn.cov))
    v_p = closest_point_on_geodesic(left.embedding, right.embedding)
    v_dot, raw = wn_sample_from_eps(v_p, model.chol, eps)
    beta_l = float(hyp_distance(left.embedding, v_dot))
    beta_r = float(hyp_distance(right.embedding, v_dot))
    merged = evo.merge_clades(left, right, beta_l, beta_r, v_dot,
                              rate.Q, rate.stationary, prior.lambda_bl)
    roots = tuple(c for i, c in enumerate(state.roots) if i not in pick)
    new_state = evo.PartialState(roots + (merged,), state.n_taxa)
    rec = ProposalRecord(
        pick, np.array(v_dot), raw, beta_l, beta_r,
        -float(np.log(len(pairs))),
        float(wn_log_density(v_dot, v_p, chol=model.chol)),
        float(branch_jacobian_log_det(v_dot, left.embedding, right.embedding)))
    return new_state, rec


def weight_update(old_state, new_state, record: ProposalRecord, rate, prior):
    """log w from the forest-target increment and the proposal corrections."""
    delta = (evo.forest_log_target(new_state, rate.Q, prior)
             - evo.forest_log_target(old_state, rate.Q, prior))
    return (delta - record.log_q_topology - record.log_q_embed
            + record.log_jacobian)
