"""Poincare disk kernel.

All kernel functions operate on arrays whose last axis has length 2 and
accept an ``xp`` argument so the same code runs under numpy (plain
evaluation) or jax.numpy (differentiable replay). Points live strictly
inside the unit disk; constructors clamp at 1 - 1e-9.

Complex-plane constructions (geodesic circles, Mobius maps) are written
out in real coordinates so both backends handle them identically.
"""

import math
from dataclasses import dataclass

import numpy as np

BOUNDARY_EPS = 1e-9
_COINCIDENT_SQ = 1e-24  # squared separation below which first-order distance is used


def clamp_to_disk(z, xp=np):
    """Project points with norm >= 1 - 1e-9 radially back inside the disk."""
    norm = xp.sqrt(xp.maximum(xp.sum(z * z, axis=-1, keepdims=True), 1e-300))
    limit = 1.0 - BOUNDARY_EPS
    scale = xp.where(norm > limit, limit / norm, 1.0)
    return z * scale


def conformal_factor(z, xp=np):
    """lambda_z = 2 / (1 - |z|^2)."""
    return 2.0 / (1.0 - xp.sum(z * z, axis=-1))


def hyp_distance(a, b, xp=np):
    """Hyperbolic distance arcosh(1 + 2|a-b|^2 / ((1-|a|^2)(1-|b|^2))).

    Near-coincident pairs fall back to the first-order metric length
    |a-b| * lambda_a to avoid arcosh cancellation.
    """
    diff = a - b
    d2 = xp.sum(diff * diff, axis=-1)
    va = 1.0 - xp.sum(a * a, axis=-1)
    vb = 1.0 - xp.sum(b * b, axis=-1)
    small = d2 < _COINCIDENT_SQ
    d2_safe = xp.where(small, 1.0, d2)
    arg = 1.0 + 2.0 * d2_safe / (va * vb)
    dist_main = xp.arccosh(arg)
    # first-order branch; tiny floor keeps the sqrt gradient finite off-branch
    dist_small = xp.sqrt(xp.where(small, d2, 1.0) + 1e-300) * (2.0 / va)
    dist = xp.where(small, dist_small, dist_main)
    return xp.where(d2 == 0.0, 0.0, dist)


def hyp_distance_grad(v, child, xp=np):
    """Euclidean gradient of hyp_distance(child, .) evaluated at v.

    With f = 1 + 2|v-child|^2 / ((1-|child|^2)(1-|v|^2)):
      df/dv = (4 / (vc * vv)) * ((v - child) + |v-child|^2 * v / vv)
      dd/dv = df/dv / sqrt(f^2 - 1)
    """
    diff = v - child
    d2 = xp.sum(diff * diff, axis=-1, keepdims=True)
    vc = 1.0 - xp.sum(child * child, axis=-1, keepdims=True)
    vv = 1.0 - xp.sum(v * v, axis=-1, keepdims=True)
    f = 1.0 + 2.0 * d2 / (vc * vv)
    df = (4.0 / (vc * vv)) * (diff + d2 * v / vv)
    denom = xp.sqrt(xp.maximum(f * f - 1.0, 1e-300))
    return df / denom


def mobius_add(a, b, xp=np):
    """Mobius addition a (+) b for curvature -1."""
    ab = xp.sum(a * b, axis=-1, keepdims=True)
    na2 = xp.sum(a * a, axis=-1, keepdims=True)
    nb2 = xp.sum(b * b, axis=-1, keepdims=True)
    num = (1.0 + 2.0 * ab + nb2) * a + (1.0 - na2) * b
    den = 1.0 + 2.0 * ab + na2 * nb2
    return num / den


def parallel_transport_from_origin(v, y, xp=np):
    """Transport a tangent vector at the origin to the tangent plane at y."""
    return (1.0 - xp.sum(y * y, axis=-1, keepdims=True)) * v


def _tanh_ratio(c, n2, xp):
    # tanh(c*n)/n with the n -> 0 limit c; n2 = n^2
    small = n2 < 1e-24
    n = xp.sqrt(xp.where(small, 1.0, n2))
    main = xp.tanh(c * n) / n
    series = c * (1.0 - (c * c) * n2 / 3.0)
    return xp.where(small, series, main)


def exp_map(x, v, xp=np):
    """exp_x(v) = x (+) tanh((1-|x|^2)|v|) * v/|v|; exp_x(0) = x."""
    c = 1.0 - xp.sum(x * x, axis=-1, keepdims=True)
    n2 = xp.sum(v * v, axis=-1, keepdims=True)
    w = _tanh_ratio(c, n2, xp) * v
    return mobius_add(x, w, xp=xp)


def _atanh_ratio(n2, xp):
    # artanh(n)/n with the n -> 0 limit 1; n2 = n^2
    small = n2 < 1e-24
    n = xp.sqrt(xp.where(small, 1.0, n2))
    main = xp.arctanh(xp.minimum(n, 1.0 - 1e-15)) / n
    series = 1.0 + n2 / 3.0
    return xp.where(small, series, main)


def log_map(x, y, xp=np):
    """Inverse of exp_map at x: u = (-x) (+) y, v = artanh(|u|) u/|u| / (1-|x|^2)."""
    u = mobius_add(-x, y, xp=xp)
    n2 = xp.sum(u * u, axis=-1, keepdims=True)
    c = 1.0 - xp.sum(x * x, axis=-1, keepdims=True)
    return _atanh_ratio(n2, xp) * u / c


# -- complex helpers on (..., 2) real arrays ---------------------------------

def _cmul(a, b, xp):
    re = a[..., 0] * b[..., 0] - a[..., 1] * b[..., 1]
    im = a[..., 0] * b[..., 1] + a[..., 1] * b[..., 0]
    return xp.stack([re, im], axis=-1)


def _cdiv(a, b, xp):
    den = b[..., 0] ** 2 + b[..., 1] ** 2
    re = (a[..., 0] * b[..., 0] + a[..., 1] * b[..., 1]) / den
    im = (a[..., 1] * b[..., 0] - a[..., 0] * b[..., 1]) / den
    return xp.stack([re, im], axis=-1)


def geodesic_circle(p, q, xp=np):
    """Center and radius of the circle through p, q orthogonal to the unit circle.

    Returns (center, radius, collinear_mask). Where the mask is set the pair
    is collinear with the origin (geodesic is a diameter) and center/radius
    are placeholder values that must not be used.

    Construction: invert p through the unit circle to get a third incident
    point, then use the complex cross-ratio map sending (z1, z2, z3) to
    (0, 1, w); the circle center is (z2-z1)(w - |w|^2)/(w - conj(w)) + z1.
    """
    cross = p[..., 0] * q[..., 1] - p[..., 1] * q[..., 0]
    np_norm = xp.sqrt(xp.sum(p * p, axis=-1) * xp.sum(q * q, axis=-1))
    collinear = xp.abs(cross) < 1e-12 * xp.maximum(np_norm, 1e-12)

    p2 = xp.maximum(xp.sum(p * p, axis=-1, keepdims=True), 1e-12)
    z3 = p / p2  # circular inverse of p
    dz = q - p
    w = _cdiv(z3 - p, dz, xp)
    w2 = xp.sum(w * w, axis=-1)
    num = xp.stack([w[..., 0] - w2, w[..., 1]], axis=-1)
    # w - conj(w) = 2i Im(w); guard the collinear singularity
    im_w = xp.where(collinear, 1.0, w[..., 1])
    denom = xp.stack([xp.zeros_like(im_w), 2.0 * im_w], axis=-1)
    center = _cmul(dz, _cdiv(num, denom, xp), xp) + p
    radius = xp.sqrt(xp.sum((p - center) ** 2, axis=-1))
    return center, radius, collinear


def closest_point_on_geodesic(p, q, xp=np):
    """Point of the geodesic arc between p and q closest to the origin.

    Hyperbolic distance to the origin is monotone in Euclidean norm, so the
    minimizer of the Euclidean norm over the arc is returned. Closed form:
    for a circular arc the circle point nearest the origin is c(1 - r/|c|),
    clamped to the sub-arc; for a diameter the origin is projected onto the
    chord and clamped to the segment.
    """
    center, radius, collinear = geodesic_circle(p, q, xp=xp)

    # circle branch
    cn = xp.sqrt(xp.maximum(xp.sum(center * center, axis=-1, keepdims=True), 1e-300))
    cand = center * (1.0 - radius[..., None] / cn)
    u0 = -center / cn  # direction from the center toward the nearest point
    def _angle(vec):
        s = u0[..., 0] * vec[..., 1] - u0[..., 1] * vec[..., 0]
        c = xp.sum(u0 * vec, axis=-1)
        return xp.arctan2(s, c)
    phi_p = _angle(p - center)
    phi_q = _angle(q - center)
    between = phi_p * phi_q <= 0.0
    endpoint = xp.where((xp.abs(phi_p) <= xp.abs(phi_q))[..., None], p, q)
    on_circle = xp.where(between[..., None], cand, endpoint)

    # diameter branch: origin projected onto the segment p-q
    dz = q - p
    len2 = xp.maximum(xp.sum(dz * dz, axis=-1, keepdims=True), 1e-300)
    t = xp.clip(xp.sum(-p * dz, axis=-1, keepdims=True) / len2, 0.0, 1.0)
    on_diam = p + t * dz

    return xp.where(collinear[..., None], on_diam, on_circle)


def hyperbolic_circle_to_euclidean(c, r, xp=np):
    """Euclidean (center, radius) rendering of the hyperbolic circle (c, r).

    Along the ray through c the circle meets the line at the roots of
    A x^2 + B x + C = 0 with u = cosh(r) - 1, v = 1 - |c|^2, A = 2 + u v,
    B = -4|c|, C = 2|c|^2 - u v; the Euclidean center is the root midpoint
    rotated back to c's direction and the radius is the half-gap.
    """
    c = xp.asarray(c, dtype=xp.float64)
    cn2 = xp.sum(c * c, axis=-1)
    cn = xp.sqrt(xp.maximum(cn2, 1e-300))
    u = xp.cosh(r) - 1.0
    v = 1.0 - cn2
    A = 2.0 + u * v
    B = -4.0 * cn
    C = 2.0 * cn2 - u * v
    disc = xp.sqrt(xp.maximum(B * B - 4.0 * A * C, 0.0))
    x_l = (-B - disc) / (2.0 * A)
    x_r = (-B + disc) / (2.0 * A)
    mid = 0.5 * (x_l + x_r)
    r_e = 0.5 * (x_r - x_l)
    direction = xp.where((cn2 > 1e-24)[..., None], c / cn[..., None],
                         xp.stack([xp.ones_like(cn), xp.zeros_like(cn)], axis=-1))
    return direction * mid[..., None], r_e


# -- object-level API --------------------------------------------------------

@dataclass(frozen=True)
class DiskPoint:
    x: float
    y: float

    def __post_init__(self):
        n = math.hypot(self.x, self.y)
        limit = 1.0 - BOUNDARY_EPS
        if n > limit:
            s = limit / n
            object.__setattr__(self, "x", self.x * s)
            object.__setattr__(self, "y", self.y * s)

    @property
    def xy(self):
        return np.array([self.x, self.y])

    @staticmethod
    def of(arr):
        return DiskPoint(float(arr[0]), float(arr[1]))


@dataclass(frozen=True)
class GeodesicArc:
    p: DiskPoint
    q: DiskPoint
    kind: str                      # "diameter" | "circle"
    center: np.ndarray | None = None
    radius: float | None = None


@dataclass(frozen=True)
class HyperbolicCircle:
    center: DiskPoint
    radius: float  # hyperbolic units


def geodesic_between(p: DiskPoint, q: DiskPoint) -> GeodesicArc:
    center, radius, collinear = geodesic_circle(p.xy, q.xy)
    if bool(collinear):
        return GeodesicArc(p, q, "diameter")
    return GeodesicArc(p, q, "circle", center=np.asarray(center), radius=float(radius))


def closest_point_to_origin(arc: GeodesicArc) -> DiskPoint:
    return DiskPoint.of(closest_point_on_geodesic(arc.p.xy, arc.q.xy))


def circle_intersections(c1: HyperbolicCircle, c2: HyperbolicCircle):
    """Intersection points of two hyperbolic circles (0, 1 or 2 DiskPoints).

    Both circles are rendered as Euclidean circles and intersected; every
    point of a hyperbolic circle lies inside the disk, so no clipping is
    needed beyond the tangency/disjointness classification.
    """
    e1, r1 = hyperbolic_circle_to_euclidean(c1.center.xy, c1.radius)
    e2, r2 = hyperbolic_circle_to_euclidean(c2.center.xy, c2.radius)
    e1, e2 = np.asarray(e1), np.asarray(e2)
    d = float(np.linalg.norm(e2 - e1))
    r1, r2 = float(r1), float(r2)
    if d < 1e-15:
        return []
    if d > r1 + r2 + 1e-12 or d < abs(r1 - r2) - 1e-12:
        return []
    a = (d * d + r1 * r1 - r2 * r2) / (2.0 * d)
    h2 = r1 * r1 - a * a
    axis = (e2 - e1) / d
    base = e1 + a * axis
    if h2 < 1e-24:
        return [DiskPoint.of(base)]
    h = math.sqrt(h2)
    perp = np.array([-axis[1], axis[0]])
    return [DiskPoint.of(base + h * perp), DiskPoint.of(base - h * perp)]


def delta_hyperbolicity_check(points) -> float:
    """Worst four-point-condition defect over all 4-subsets.

    For each quadruple the three pairwise-distance sums are formed; delta is
    half the gap between the two largest. Exact tree metrics give 0.
    """
    from itertools import combinations

    pts = np.array([p.xy if isinstance(p, DiskPoint) else np.asarray(p) for p in points])
    n = len(pts)
    if n < 4:
        raise ValueError("need at least 4 points")
    dist = hyp_distance(pts[:, None, :], pts[None, :, :])
    worst = 0.0
    for i, j, k, l in combinations(range(n), 4):
        sums = sorted([dist[i, j] + dist[k, l],
                       dist[i, k] + dist[j, l],
                       dist[i, l] + dist[j, k]])
        worst = max(worst, 0.5 * (sums[2] - sums[1]))
    return worst
