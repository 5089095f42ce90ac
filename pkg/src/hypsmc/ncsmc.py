"""Nested combinatorial SMC: exhaustive one-step lookahead over root pairs.

At each rank every particle scores all C(live,2) pairs with M Wrapped
Normal parent draws each, selects one candidate with probability
proportional to its potential, and takes the mean potential as its
weight. Potentials use the same weight formula as the plain sampler
(including the uniform pair probability) so both samplers target the same
quantity and the M=1, single-pair case degenerates to CSMC exactly.
"""

from dataclasses import dataclass
from itertools import combinations

import numpy as np

from . import evolution as evo
from .csmc import (NumericAbort, ParticleSystem, RunRecord, SamplerModel,
                   _Bookkeeper, _ess, _logmeanexp, leaf_log_z0, propose_math,
                   resample_indices)
from .streams import particle_stream
from .wrapped_normal import WrappedNormalParams


@dataclass(frozen=True)
class LookaheadGrid:
    """Candidate proposals for one particle at one rank."""
    pair_slots: np.ndarray        # (C, 2) root indices
    parents: np.ndarray           # (C, M, 2)
    betas: np.ndarray             # (C, M, 2)
    log_potentials: np.ndarray    # (C, M)


def _lookahead_math(pos, logL, tree_ll, cand_l, cand_r, eps, n_pairs, M,
                    model, xp=np):
    """Potentials for all (pair, draw) candidates of all particles.

    cand_l/cand_r are (K, C) node-id arrays; eps is (K, C, M, 2). Returns
    (parents (K,C,M,2), beta_l, beta_r, logL_new (K,C,M,S,A),
    tll_new, log_potentials (K,C,M)).
    """
    K = pos.shape[0]
    kidx = np.arange(K)[:, None]
    vL = pos[kidx, cand_l][:, :, None, :]          # (K, C, 1, 2)
    vR = pos[kidx, cand_r][:, :, None, :]
    logL_L = logL[kidx, cand_l][:, :, None, :, :]  # (K, C, 1, S, A)
    logL_R = logL[kidx, cand_r][:, :, None, :, :]
    tll_L = tree_ll[kidx, cand_l][:, :, None]
    tll_R = tree_ll[kidx, cand_r][:, :, None]
    vL = xp.broadcast_to(vL, eps.shape)
    vR = xp.broadcast_to(vR, eps.shape)
    out = propose_math(vL, vR, logL_L, logL_R, tll_L, tll_R, eps, model,
                       False, xp=xp)
    v_dot, beta_l, beta_r, logL_new, tll_new, logw = out
    return v_dot, beta_l, beta_r, logL_new, tll_new, logw + xp.log(n_pairs)


def run_ncsmc(alignment, embeddings, rate, prior, K, M, seed, *,
              wn_cov=None, decoder=None, build_states=True):
    """Full H-NCSMC run; deterministic given the seed."""
    model = SamplerModel.build(rate, prior, wn_cov=wn_cov, decoder=decoder)
    embeddings = np.asarray(embeddings, float)
    log_partials = evo.leaf_log_partials(alignment)
    system = _forward_ncsmc(embeddings, log_partials, model, K, M, seed,
                            build_states=build_states)
    return system, system.log_Z


def _forward_ncsmc(embeddings, log_partials, model, K, M, seed, *,
                   build_states=True):
    N, S, A = log_partials.shape
    n_nodes = 2 * N - 1

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
    record = RunRecord("ncsmc", N, K, False)
    record.M = M
    log_Z_terms, ess_trace, anc_trace = [], [], []
    logw = None
    kidx = np.arange(K)

    for r in range(1, N):
        rho = N - r + 1
        pairs = np.array(list(combinations(range(rho), 2)), dtype=np.int64)
        C = len(pairs)

        u_res = np.empty(K)
        u_sel = np.empty(K)
        eps = np.empty((K, C, M, 2))
        for k in range(K):
            g = particle_stream(seed, r, k)
            if r >= 2:
                u_res[k] = g.random()
            eps[k] = g.standard_normal((C, M, 2))
            if C * M > 1:
                u_sel[k] = g.random()

        if r >= 2:
            ancestors = resample_indices(logw, u_res)
            pos, logL, tree_ll, roots = (pos[ancestors], logL[ancestors],
                                         tree_ll[ancestors], roots[ancestors])
            book.gather(ancestors)
            anc_trace.append(ancestors)
            record.ancestors.append(ancestors)
        else:
            record.ancestors.append(None)

        cand_l = roots[kidx[:, None], pairs[None, :, 0]]   # (K, C)
        cand_r = roots[kidx[:, None], pairs[None, :, 1]]

        out = _lookahead_math(pos, logL, tree_ll, cand_l, cand_r, eps, C, M,
                              model)
        v_dot, beta_l, beta_r, logL_new, tll_new, pots = out

        flat = pots.reshape(K, C * M)
        m = np.max(flat, axis=1)
        if not np.all(np.isfinite(m)):
            raise NumericAbort("a particle has no finite lookahead potential")
        p = np.exp(flat - m[:, None])
        cdf = np.cumsum(p, axis=1)
        cdf /= cdf[:, -1:]
        if C * M > 1:
            chosen = np.minimum(
                (cdf < u_sel[:, None]).sum(axis=1), C * M - 1)
        else:
            chosen = np.zeros(K, dtype=np.int64)
        j_star, m_star = chosen // M, chosen % M

        logw = (m + np.log(np.mean(p, axis=1)))   # log((1/(MC)) sum potentials)

        new_id = N - 1 + r
        sel_pair = pairs[j_star]                  # (K, 2)
        l_ids = cand_l[kidx, j_star]
        r_ids = cand_r[kidx, j_star]
        pos[:, new_id] = v_dot[kidx, j_star, m_star]
        logL[:, new_id] = logL_new[kidx, j_star, m_star]
        tree_ll[:, new_id] = tll_new[kidx, j_star, m_star]
        roots[kidx, sel_pair[:, 0]] = new_id
        roots[kidx, sel_pair[:, 1]] = roots[:, rho - 1]

        bl = beta_l[kidx, j_star, m_star]
        br = beta_r[kidx, j_star, m_star]
        for k in range(K):
            book.merge(k, new_id, int(l_ids[k]), int(r_ids[k]),
                       pos[k, new_id], bl[k], br[k], logL[k, new_id],
                       tree_ll[k, new_id], model.lambda_bl)

        record.cand_left.append(cand_l)
        record.cand_right.append(cand_r)
        record.eps.append(eps)
        record.chosen.append(chosen)
        record.left_ids.append(l_ids)
        record.right_ids.append(r_ids)
        log_Z_terms.append(_logmeanexp(logw))
        ess_trace.append(_ess(logw))

    states = ()
    if build_states:
        states = tuple(evo.PartialState((book.clades[k][2 * N - 2],), N)
                       for k in range(K))
    log_z0 = float(leaf_log_z0(embeddings, log_partials, model))
    return ParticleSystem(states, logw, anc_trace, log_Z_terms, ess_trace,
                          record, log_z0)


# -- object-level operations -------------------------------------------------

def build_lookahead(state: evo.PartialState, wn: WrappedNormalParams,
                    rate: evo.RateMatrix, prior: evo.BranchPrior, M, rng):
    """Candidate grid for one particle: all pairs x M parent draws."""
    rho = len(state.roots)
    if rho < 2:
        raise ValueError("need at least two live roots")
    pairs = np.array(list(combinations(range(rho), 2)), dtype=np.int64)
    C = len(pairs)
    eps = rng.standard_normal((C, M, 2))
    model = SamplerModel(rate.Q, rate.stationary, prior.lambda_bl,
                         np.linalg.cholesky(wn.cov))
    emb = np.stack([c.embedding for c in state.roots])
    logLs = np.stack([c.log_partials for c in state.roots])
    tlls = np.array([c.tree_loglik for c in state.roots])
    vL = np.broadcast_to(emb[pairs[:, 0]][:, None, :], (C, M, 2))
    vR = np.broadcast_to(emb[pairs[:, 1]][:, None, :], (C, M, 2))
    out = propose_math(vL, vR, logLs[pairs[:, 0]][:, None],
                       logLs[pairs[:, 1]][:, None],
                       tlls[pairs[:, 0]][:, None], tlls[pairs[:, 1]][:, None],
                       eps, model, False)
    v_dot, beta_l, beta_r, _, _, logw = out
    betas = np.stack([beta_l, beta_r], axis=-1)
    return LookaheadGrid(pairs, v_dot, betas, logw + np.log(C))


def select_and_extend(grid: LookaheadGrid, state: evo.PartialState, rng, *,
                      rate, prior):
    """Draw a candidate proportional to its potential; weight is the mean."""
    pots = grid.log_potentials
    C, M = pots.shape
    m = pots.max()
    if not np.isfinite(m):
        raise NumericAbort("all lookahead potentials are -inf")
    p = np.exp(pots.reshape(-1) - m)
    cdf = np.cumsum(p)
    cdf /= cdf[-1]
    flat = min(int(np.searchsorted(cdf, rng.random(), side="right")), C * M - 1) \
        if C * M > 1 else 0
    j, i = flat // M, flat % M
    pick = tuple(grid.pair_slots[j])
    left, right = state.roots[pick[0]], state.roots[pick[1]]
    merged = evo.merge_clades(left, right, grid.betas[j, i, 0],
                              grid.betas[j, i, 1], grid.parents[j, i],
                              rate.Q, rate.stationary, prior.lambda_bl)
    roots = tuple(c for idx, c in enumerate(state.roots) if idx not in pick)
    new_state = evo.PartialState(roots + (merged,), state.n_taxa)
    logw = float(m + np.log(p.mean()))
    return new_state, logw
