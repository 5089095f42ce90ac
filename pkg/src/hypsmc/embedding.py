"""Stress-minimizing sequence embedding into the disk.

Pairwise normalized Hamming distances (times a configurable scale) are the
targets; points move by Riemannian gradient descent: the Euclidean stress
gradient is rescaled by the inverse metric factor (1-|z|^2)^2/4 and applied
through the exponential map, with a backtracking line search.
"""

from dataclasses import dataclass, field

import numpy as np

from .evolution import Alignment
from .geometry import clamp_to_disk, exp_map, hyp_distance, hyp_distance_grad


@dataclass(frozen=True)
class EmbeddingSet:
    points: np.ndarray            # (N, 2)
    loss_history: tuple

    def __post_init__(self):
        object.__setattr__(self, "points", clamp_to_disk(np.asarray(self.points, float)))
        object.__setattr__(self, "loss_history", tuple(float(x) for x in self.loss_history))


@dataclass(frozen=True)
class EmbedConfig:
    scale: float = 4.0            # hyperbolic length per unit Hamming distance
    normalized: bool = True       # proportion (True) or raw count (False)
    init_radius: float = 0.2
    step_size: float = 0.1
    max_iters: int = 1000
    rel_tol: float = 1e-6
    seed: int = 0


def hamming_matrix(alignment: Alignment, normalized=True) -> np.ndarray:
    codes = alignment.codes
    # pairwise mismatch counts; missing-vs-anything counts as a mismatch
    # only when both sites are observed and differ
    obs = codes >= 0
    diff = (codes[:, None, :] != codes[None, :, :]) & obs[:, None, :] & obs[None, :, :]
    counts = diff.sum(axis=-1).astype(float)
    if normalized:
        counts /= alignment.n_sites
    return counts


def stress_loss(points, target, xp=np):
    """Sum over unordered pairs of squared distance mismatch."""
    d = hyp_distance(points[..., :, None, :], points[..., None, :, :], xp=xp)
    resid = d - target
    n = target.shape[-1]
    mask = xp.triu(xp.ones((n, n)), k=1)
    return xp.sum(mask * resid * resid, axis=(-2, -1))


def stress_gradient(points, target):
    """Euclidean gradient of stress_loss w.r.t. every point."""
    d = hyp_distance(points[:, None, :], points[None, :, :])
    resid = d - target
    np.fill_diagonal(resid, 0.0)
    # grad of d(z_i, z_j) w.r.t. z_i, summed over j (each pair appears once
    # in the loss but contributes to both endpoints)
    g = hyp_distance_grad(points[:, None, :], points[None, :, :])
    g = np.where(np.eye(len(points), dtype=bool)[:, :, None], 0.0, g)
    return 2.0 * np.sum(resid[:, :, None] * g, axis=1)


def embed(alignment: Alignment, config: EmbedConfig = EmbedConfig()) -> EmbeddingSet:
    target = hamming_matrix(alignment, normalized=config.normalized) * config.scale
    return embed_distances(target, config)


def embed_distances(target, config: EmbedConfig = EmbedConfig()) -> EmbeddingSet:
    n = target.shape[0]
    rng = np.random.default_rng(config.seed)
    radius = config.init_radius * np.sqrt(rng.random(n))
    angle = 2.0 * np.pi * rng.random(n)
    points = np.stack([radius * np.cos(angle), radius * np.sin(angle)], axis=-1)

    step = config.step_size
    loss = float(stress_loss(points, target))
    history = [loss]
    best = (loss, points)
    for _ in range(config.max_iters):
        egrad = stress_gradient(points, target)
        factor = (1.0 - np.sum(points * points, axis=-1, keepdims=True)) ** 2 / 4.0
        rgrad = factor * egrad
        while True:
            trial = clamp_to_disk(exp_map(points, -step * rgrad))
            trial_loss = float(stress_loss(trial, target))
            if trial_loss <= loss or step < 1e-12:
                break
            step *= 0.5
        prev = loss
        points, loss = trial, trial_loss
        history.append(loss)
        if loss < best[0]:
            best = (loss, points)
        if prev - loss < config.rel_tol * max(abs(prev), 1e-12):
            break
        step *= 1.05  # cautious growth after an accepted step
    return EmbeddingSet(best[1], history)
