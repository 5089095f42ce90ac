"""Substitution model, pruning likelihood and the forest target density.

The rate matrix is factored into per-state holding times h and stationary
probabilities s: Q_ij = s_j / h_i off the diagonal, with the diagonal set
so rows sum to zero and the holding times normalized to mean 1.

Likelihood bookkeeping is carried in log space throughout; a leaf partial
is 0/-inf over the alphabet, with gaps and ambiguity codes treated as
fully missing (all zeros).
"""

from dataclasses import dataclass, field

import numpy as np

DNA_ALPHABET = "ACGT"
MISSING_CHARS = set("-?N")


# -- alignment ---------------------------------------------------------------

@dataclass(frozen=True)
class Alignment:
    taxa: tuple
    codes: np.ndarray           # (N, S) int, -1 for missing
    alphabet: str = DNA_ALPHABET

    def __post_init__(self):
        codes = np.asarray(self.codes, dtype=np.int64)
        if codes.ndim != 2 or codes.shape[0] < 2 or codes.shape[1] < 1:
            raise ValueError("alignment must be N>=2 by S>=1")
        object.__setattr__(self, "taxa", tuple(self.taxa))
        object.__setattr__(self, "codes", codes)

    @property
    def n_taxa(self):
        return self.codes.shape[0]

    @property
    def n_sites(self):
        return self.codes.shape[1]

    @staticmethod
    def from_sequences(taxa, sequences, alphabet=DNA_ALPHABET):
        lengths = {len(s) for s in sequences}
        if len(lengths) != 1:
            ragged = [t for t, s in zip(taxa, sequences)
                      if len(s) != len(sequences[0])]
            raise ValueError(f"ragged alignment, offending taxa: {ragged}")
        index = {ch: i for i, ch in enumerate(alphabet)}
        codes = np.empty((len(taxa), len(sequences[0])), dtype=np.int64)
        for i, seq in enumerate(sequences):
            for j, ch in enumerate(seq.upper()):
                if ch in index:
                    codes[i, j] = index[ch]
                elif ch in MISSING_CHARS:
                    codes[i, j] = -1
                else:
                    raise ValueError(f"unknown character {ch!r} in taxon {taxa[i]}")
        return Alignment(tuple(taxa), codes, alphabet)


def leaf_log_partials(alignment: Alignment) -> np.ndarray:
    """(N, S, A) log partial-likelihood vectors; missing sites are all-ones."""
    n, s = alignment.codes.shape
    a = len(alignment.alphabet)
    out = np.full((n, s, a), -np.inf)
    miss = alignment.codes < 0
    idx = np.where(miss, 0, alignment.codes)
    out[np.arange(n)[:, None], np.arange(s)[None, :], idx] = 0.0
    out[miss] = 0.0
    return out


# -- rate matrix -------------------------------------------------------------

@dataclass(frozen=True)
class RateMatrix:
    stationary: np.ndarray      # (A,) probabilities
    holding: np.ndarray         # (A,) positive, mean 1
    Q: np.ndarray               # (A, A), rows sum to 0

    @staticmethod
    def from_factors(stationary, holding):
        s = np.asarray(stationary, dtype=float)
        h = np.asarray(holding, dtype=float)
        s = s / s.sum()
        h = h / h.mean()
        return RateMatrix(s, h, np.asarray(assemble_q(s, h)))


def assemble_q(stationary, holding, xp=np):
    """Q_ij = s_j / h_i off-diagonal, diagonal set to negative row sums."""
    off = stationary[None, :] / holding[:, None]
    rowsum = xp.sum(off, axis=-1) - stationary / holding
    a = stationary.shape[-1]
    eye = xp.eye(a)
    return off * (1.0 - eye) - eye * rowsum[:, None]


def rate_matrix_factors(stat_logits, hold_raw, xp=np):
    """Map unconstrained parameters to (stationary, holding) factors."""
    z = stat_logits - xp.max(stat_logits)
    e = xp.exp(z)
    s = e / xp.sum(e)
    h = xp.logaddexp(hold_raw, 0.0)  # softplus
    h = h / xp.mean(h)
    return s, h


def jc_rate_matrix(a=4) -> RateMatrix:
    return RateMatrix.from_factors(np.full(a, 1.0 / a), np.ones(a))


_EXPM_SQUARINGS = 8
_EXPM_ORDER = 14


def transition_matrix(Q, beta, xp=np):
    """P(beta) = expm(beta Q) by fixed scaling-and-squaring.

    beta may carry leading batch dimensions; Q may too. A Taylor expansion
    of fixed order on the 2^-8-scaled generator keeps the computation
    branch-free (the same arithmetic under numpy and jax), exact to well
    below 1e-12 for every beta * ||Q|| up to a few hundred; each extra
    squaring would double the accumulated roundoff, which is why the
    scaling depth is kept low.
    """
    beta = xp.asarray(beta, dtype=xp.float64)
    M = beta[..., None, None] * Q * (2.0 ** -_EXPM_SQUARINGS)
    a = M.shape[-1]
    eye = xp.eye(a)
    P = eye + M / _EXPM_ORDER
    for k in range(_EXPM_ORDER - 1, 0, -1):
        P = eye + xp.einsum("...ij,...jk->...ik", M, P) / k
    for _ in range(_EXPM_SQUARINGS):
        P = xp.einsum("...ij,...jk->...ik", P, P)
    return P


# -- pruning -----------------------------------------------------------------

def log_matvec(P, logv, xp=np):
    """log(P @ exp(logv)) along the last axis, max-shifted per site."""
    m = xp.max(logv, axis=-1, keepdims=True)
    m = xp.where(xp.isfinite(m), m, 0.0)
    prod = xp.einsum("...ab,...b->...a", P, xp.exp(logv - m))
    return xp.log(xp.maximum(prod, 1e-300)) + m


def merge_log_partials(logL_left, logL_right, P_left, P_right, xp=np):
    """Pruning recursion: combine two child partials through their branches.

    P_* are (..., A, A) transition matrices; partials are (..., S, A). The
    matrices broadcast over the site axis.
    """
    left = log_matvec(P_left[..., None, :, :], logL_left, xp=xp)
    right = log_matvec(P_right[..., None, :, :], logL_right, xp=xp)
    return left + right


def root_log_likelihood(log_partials, stationary, xp=np):
    """Total log likelihood of a (sub)tree from its root partials."""
    site = _logsumexp(xp.log(stationary) + log_partials, xp)
    return xp.sum(site, axis=-1)


def _logsumexp(x, xp):
    m = xp.max(x, axis=-1, keepdims=True)
    m = xp.where(xp.isfinite(m), m, 0.0)
    return (xp.log(xp.sum(xp.exp(x - m), axis=-1)) + m[..., 0])


# -- trees and partial states ------------------------------------------------

@dataclass(frozen=True)
class Clade:
    """Immutable rooted subtree with cached likelihood state at its root."""
    taxon: int | None                      # leaf index, or None for internal
    children: tuple | None                 # ((Clade, beta_left), (Clade, beta_right))
    embedding: np.ndarray                  # (2,) disk point of the root
    log_partials: np.ndarray               # (S, A)
    tree_loglik: float                     # root-summed total log likelihood
    branch_logprior: float                 # sum of branch log priors in the subtree
    topo_key: tuple = field(default=None)

    def taxa(self):
        if self.taxon is not None:
            return frozenset([self.taxon])
        out = frozenset()
        for child, _ in self.children:
            out |= child.taxa()
        return out


def leaf_clade(taxon, embedding, log_partials, stationary) -> Clade:
    return Clade(taxon, None, np.asarray(embedding, float), log_partials,
                 float(root_log_likelihood(log_partials, stationary)), 0.0,
                 ("L", int(taxon)))


def merge_clades(left: Clade, right: Clade, beta_l, beta_r, embedding,
                 Q, stationary, lambda_bl) -> Clade:
    P_l = transition_matrix(Q, beta_l)
    P_r = transition_matrix(Q, beta_r)
    logL = merge_log_partials(left.log_partials, right.log_partials, P_l, P_r)
    total = float(root_log_likelihood(logL, stationary))
    prior = (left.branch_logprior + right.branch_logprior
             + branch_log_prior(beta_l, lambda_bl)
             + branch_log_prior(beta_r, lambda_bl))
    key = ("I", tuple(sorted([left.topo_key, right.topo_key])))
    return Clade(None, ((left, float(beta_l)), (right, float(beta_r))),
                 np.asarray(embedding, float), logL, total, float(prior), key)


def branch_log_prior(beta, lambda_bl, xp=np):
    """Exponential branch-length prior log density."""
    return xp.log(lambda_bl) - lambda_bl * beta


@dataclass(frozen=True)
class BranchPrior:
    lambda_bl: float = 10.0

    def __post_init__(self):
        if self.lambda_bl <= 0:
            raise ValueError("lambda_bl must be positive")


@dataclass(frozen=True)
class PartialState:
    """A forest of rooted subtrees covering all taxa (rank r has N-r roots)."""
    roots: tuple            # tuple of Clades
    n_taxa: int

    @property
    def rank(self):
        return self.n_taxa - len(self.roots)


def initial_state(embeddings, log_partials, stationary, n_taxa) -> PartialState:
    roots = tuple(leaf_clade(i, embeddings[i], log_partials[i], stationary)
                  for i in range(n_taxa))
    return PartialState(roots, n_taxa)


def forest_log_target(state: PartialState, Q, prior: BranchPrior) -> float:
    """Natural forest extension: per-tree likelihoods plus branch priors.

    The uniform topology-prior constant is omitted here and identically in
    every oracle this is compared against.
    """
    del Q  # cached per-clade values already encode the rate matrix
    return float(sum(c.tree_loglik + c.branch_logprior for c in state.roots))


def felsenstein_log_likelihood(clade: Clade, stationary):
    """Per-site log likelihoods and total for a rooted (sub)tree."""
    site = _logsumexp(np.log(stationary) + clade.log_partials, np)
    return site, float(site.sum())


# -- embedding-decoded rate matrix ------------------------------------------

@dataclass(frozen=True)
class DecoderParams:
    weight: np.ndarray          # (2A, 3)
    bias: np.ndarray            # (2A,)


def decode_features(p, xp=np):
    """phi(p) = (|p|, p1/|p|, p2/|p|); all zeros at |p| < 1e-9."""
    n2 = xp.sum(p * p, axis=-1, keepdims=True)
    small = n2 < 1e-18
    n = xp.sqrt(xp.where(small, 1.0, n2))
    feats = xp.concatenate([n, p / n], axis=-1)
    return xp.where(small, xp.zeros_like(feats), feats)


def decode_rate_factors(embedding, params: DecoderParams, xp=np):
    phi = decode_features(xp.asarray(embedding, dtype=xp.float64), xp=xp)
    raw = xp.einsum("ij,...j->...i", params.weight, phi) + params.bias
    a = params.bias.shape[0] // 2
    logits, hold_raw = raw[..., :a], raw[..., a:]
    z = logits - xp.max(logits, axis=-1, keepdims=True)
    e = xp.exp(z)
    s = e / xp.sum(e, axis=-1, keepdims=True)
    h = xp.logaddexp(hold_raw, 0.0)
    h = h / xp.mean(h, axis=-1, keepdims=True)
    return s, h


def decode_rate_matrix(embedding, params: DecoderParams) -> RateMatrix:
    s, h = decode_rate_factors(np.asarray(embedding, float), params)
    return RateMatrix(s, h, assemble_q(s, h))
