"""Wrapped Normal distribution on the Poincare disk.

A draw is produced by sampling N(0, Sigma) in the tangent plane at the
origin, parallel-transporting to the mean point and pushing through the
exponential map. The log density inverts that chain and subtracts the log
determinant of the projection map, which factors into an exp-map part and
a transport part.

Densities are taken with respect to the Euclidean area element of the
disk: the projection determinants below are Cartesian Jacobians, which is
also what the branch-length change of variables in the samplers requires.
"""

from dataclasses import dataclass, field

import numpy as np

from .geometry import exp_map, log_map, mobius_add, _tanh_ratio, _atanh_ratio

_LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class WrappedNormalParams:
    mean: np.ndarray            # (2,) disk point
    cov: np.ndarray             # (2, 2) SPD tangent covariance at the origin
    chol: np.ndarray = field(init=False)

    def __post_init__(self):
        cov = np.asarray(self.cov, dtype=float)
        if not np.allclose(cov, cov.T):
            raise ValueError("covariance must be symmetric")
        object.__setattr__(self, "mean", np.asarray(self.mean, dtype=float))
        object.__setattr__(self, "cov", cov)
        object.__setattr__(self, "chol", np.linalg.cholesky(cov))


def exp_map_log_det(mean, tangent, xp=np):
    """log |det| of the Cartesian Jacobian of exp_mean at a tangent vector.

    exp_x(t) = mobius_add(x, g(t)) with g(t) = tanh(c n) t/n, c = 1-|x|^2,
    n = |t|. det Dg = (tanh(cn)/n) * c sech^2(cn) (tangential and radial
    stretches), and the Mobius translation is conformal with
    det = (1-|x|^2)^2 / |1 + conj(x) w|^4 at w = g(t).
    """
    c = 1.0 - xp.sum(mean * mean, axis=-1)
    n2 = xp.sum(tangent * tangent, axis=-1)
    ratio = _tanh_ratio(c[..., None], n2[..., None], xp)[..., 0]
    w = ratio[..., None] * tangent
    n = xp.sqrt(xp.maximum(n2, 0.0))
    log_dg = xp.log(ratio) + xp.log(c) - 2.0 * xp.log(xp.cosh(c * n))
    re = 1.0 + xp.sum(mean * w, axis=-1)
    im = mean[..., 0] * w[..., 1] - mean[..., 1] * w[..., 0]
    log_dmob = 2.0 * xp.log(c) - 2.0 * xp.log(re * re + im * im)
    return log_dg + log_dmob


def projection_log_det_parts(mean, raw_tangent, xp=np):
    """(log_det_exp, log_det_pt) of the projection v -> exp(PT(v)) at mean.

    raw_tangent is the pre-transport draw at the origin; transport scales a
    2-vector by (1-|mean|^2), hence log_det_pt = 2 log(1-|mean|^2).
    """
    c = 1.0 - xp.sum(mean * mean, axis=-1)
    log_det_pt = 2.0 * xp.log(c)
    transported = c[..., None] * raw_tangent
    return exp_map_log_det(mean, transported, xp=xp), log_det_pt


@dataclass(frozen=True)
class ProjectionJacobian:
    log_det_exp: float
    log_det_pt: float

    @property
    def log_det(self):
        return self.log_det_exp + self.log_det_pt


def projection_log_det(mean, tangent, xp=np) -> ProjectionJacobian:
    e, p = projection_log_det_parts(np.asarray(mean, float), np.asarray(tangent, float), xp=xp)
    return ProjectionJacobian(float(e), float(p))


def wn_sample_from_eps(mean, chol, eps, xp=np):
    """Deterministic sampling path: standard-normal eps -> (point, raw tangent)."""
    v = xp.einsum("ij,...j->...i", chol, eps)
    c = 1.0 - xp.sum(mean * mean, axis=-1, keepdims=True)
    return exp_map(mean, c * v, xp=xp), v


def wn_sample(params: WrappedNormalParams, rng):
    eps = rng.standard_normal(2)
    point, v = wn_sample_from_eps(params.mean, params.chol, eps)
    return point, v


def recover_tangent(point, mean, xp=np):
    """Invert the sampling chain: disk point -> raw tangent draw at the origin.

    Two factors of (1 - |mean|^2) come off: one inverts the scaling inside
    the exponential map, the other inverts the transport from the origin.
    """
    u = mobius_add(-mean, point, xp=xp)
    n2 = xp.sum(u * u, axis=-1, keepdims=True)
    tangent_at_mean = _atanh_ratio(n2, xp) * u
    c = 1.0 - xp.sum(mean * mean, axis=-1, keepdims=True)
    return tangent_at_mean / (c * c)


def wn_log_density(point, mean, cov=None, chol=None, xp=np):
    """Log density of the Wrapped Normal w.r.t. Euclidean area on the disk."""
    if chol is None:
        chol = np.linalg.cholesky(np.asarray(cov, float))
    v = recover_tangent(point, mean, xp=xp)
    # 2x2 Gaussian log density through the Cholesky factor
    a, b, d = chol[0, 0], chol[1, 0], chol[1, 1]
    y0 = v[..., 0] / a
    y1 = (v[..., 1] - b * y0) / d
    log_gauss = -_LOG_2PI - xp.log(a * d) - 0.5 * (y0 * y0 + y1 * y1)
    log_det_exp, log_det_pt = projection_log_det_parts(mean, v, xp=xp)
    return log_gauss - log_det_exp - log_det_pt


def wn_log_density_params(point, params: WrappedNormalParams):
    return float(wn_log_density(np.asarray(point, float), params.mean, chol=params.chol))
