"""Disk geometry: metric axioms, maps, geodesics, circles."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hypsmc.geometry import (DiskPoint, GeodesicArc, HyperbolicCircle,
                             circle_intersections, clamp_to_disk,
                             closest_point_on_geodesic, closest_point_to_origin,
                             conformal_factor, delta_hyperbolicity_check,
                             exp_map, geodesic_between, geodesic_circle,
                             hyp_distance, hyp_distance_grad,
                             hyperbolic_circle_to_euclidean, log_map,
                             mobius_add, parallel_transport_from_origin)


def disk_points(rng, n, radius=0.95):
    r = radius * np.sqrt(rng.random(n))
    t = 2.0 * np.pi * rng.random(n)
    return np.stack([r * np.cos(t), r * np.sin(t)], axis=-1)


disk_coord = st.floats(-0.69, 0.69, allow_nan=False)


# -- distance ----------------------------------------------------------------

def test_distance_identity_at_origin():
    assert hyp_distance(np.zeros(2), np.zeros(2)) == 0.0


def test_distance_from_origin_closed_form():
    # d(0, z) = 2 artanh(|z|); at |z| = 0.5 that's ln 3
    got = hyp_distance(np.zeros(2), np.array([0.5, 0.0]))
    assert abs(got - np.log(3.0)) < 1e-12
    for r in [0.1, 0.3, 0.7, 0.9, 0.99]:
        p = np.array([r * np.cos(1.1), r * np.sin(1.1)])
        assert abs(hyp_distance(np.zeros(2), p) - 2.0 * np.arctanh(r)) < 1e-12


def test_distance_metric_axioms_bulk():
    rng = np.random.default_rng(0)
    a, b, c = (disk_points(rng, 10_000) for _ in range(3))
    dab = hyp_distance(a, b)
    dba = hyp_distance(b, a)
    dac = hyp_distance(a, c)
    dcb = hyp_distance(c, b)
    assert np.all(dab >= 0.0)
    assert np.max(np.abs(dab - dba)) < 1e-9
    assert np.all(dab <= dac + dcb + 1e-9)          # triangle inequality
    assert np.max(hyp_distance(a, a)) == 0.0


def test_distance_diametric_circle_points():
    # both points lie at the same hyperbolic radius from c = (0.8038, 0)
    c = np.array([0.8038, 0.0])
    left = hyp_distance(c, np.array([0.988, 0.0]))
    right = hyp_distance(c, np.array([-0.3214, 0.0]))
    assert abs(left - right) < 1e-2                 # published coords, 4 digits


def test_distance_matches_metric_integral():
    # numerically integrate ds = 2 |dz| / (1 - |z|^2) along a diameter
    xs = np.linspace(0.0, 0.5, 20001)
    integ = np.trapezoid(2.0 / (1.0 - xs ** 2), xs)
    assert abs(integ - hyp_distance(np.zeros(2), np.array([0.5, 0.0]))) < 1e-9


def test_distance_gradient_matches_fd():
    rng = np.random.default_rng(1)
    h = 1e-7
    for _ in range(50):
        child = rng.uniform(-0.7, 0.7, 2)
        v = rng.uniform(-0.7, 0.7, 2)
        if np.linalg.norm(v - child) < 1e-3:
            continue
        g = hyp_distance_grad(v, child)
        for i in range(2):
            vp, vm = v.copy(), v.copy()
            vp[i] += h
            vm[i] -= h
            fd = (hyp_distance(child, vp) - hyp_distance(child, vm)) / (2 * h)
            assert abs(g[i] - fd) < 1e-6


# -- clamp, conformal factor, Mobius -----------------------------------------

def test_clamp_to_disk():
    z = np.array([[2.0, 0.0], [0.0, -3.0], [0.1, 0.1]])
    out = clamp_to_disk(z)
    norms = np.linalg.norm(out, axis=-1)
    assert np.all(norms <= 1.0 - 1e-9 + 1e-15)
    assert np.allclose(out[2], z[2])                # interior untouched


def test_conformal_factor_origin():
    assert conformal_factor(np.zeros(2)) == 2.0


def test_mobius_identity_and_inverse():
    rng = np.random.default_rng(2)
    a = disk_points(rng, 200, 0.9)
    assert np.allclose(mobius_add(np.zeros(2), a), a)
    assert np.allclose(mobius_add(a, np.zeros((1, 2))), a)
    # left cancellation: (-a) + (a + b) = b
    b = disk_points(rng, 200, 0.9)
    assert np.max(np.abs(mobius_add(-a, mobius_add(a, b)) - b)) < 1e-10


def test_mobius_is_isometry():
    rng = np.random.default_rng(3)
    a = disk_points(rng, 100, 0.8)
    b = disk_points(rng, 100, 0.8)
    t = disk_points(rng, 100, 0.8)
    d0 = hyp_distance(a, b)
    d1 = hyp_distance(mobius_add(t, a), mobius_add(t, b))
    # translation by a common point preserves distance... only for the
    # gyro-translation acting on both arguments the same way
    assert np.max(np.abs(d0 - d1)) < 1e-8


# -- exp / log maps ----------------------------------------------------------

def test_exp_log_round_trip():
    rng = np.random.default_rng(4)
    x = disk_points(rng, 5000, 0.9)
    v = rng.standard_normal((5000, 2)) * 0.5
    y = exp_map(x, v)
    back = log_map(x, y)
    assert np.max(np.abs(back - v)) < 1e-9
    again = exp_map(x, back)
    assert np.max(np.abs(again - y)) < 1e-12


def test_log_exp_round_trip_points():
    rng = np.random.default_rng(5)
    x = disk_points(rng, 5000, 0.9)
    y = disk_points(rng, 5000, 0.9)
    v = log_map(x, y)
    assert np.max(np.abs(exp_map(x, v) - y)) < 1e-9


def test_exp_map_zero_tangent():
    rng = np.random.default_rng(6)
    x = disk_points(rng, 100)
    assert np.allclose(exp_map(x, np.zeros_like(x)), x)


def test_transport_preserves_metric_norm():
    rng = np.random.default_rng(7)
    y = disk_points(rng, 2000, 0.95)
    v = rng.standard_normal((2000, 2))
    moved = parallel_transport_from_origin(v, y)
    norm_origin = conformal_factor(np.zeros(2)) * np.linalg.norm(v, axis=-1)
    norm_there = conformal_factor(y) * np.linalg.norm(moved, axis=-1)
    assert np.max(np.abs(norm_origin - norm_there)) < 1e-12


# -- geodesics ---------------------------------------------------------------

def test_geodesic_circle_published_case():
    center, radius, collinear = geodesic_circle(np.array([0.0, 0.75]),
                                                np.array([0.5, 0.5]))
    assert not bool(collinear)
    assert np.max(np.abs(center - np.array([0.4583, 1.0417]))) < 1e-3
    assert abs(radius - 0.5433) < 1e-3


def test_geodesic_circle_orthogonality():
    rng = np.random.default_rng(8)
    p = disk_points(rng, 5000, 0.95)
    q = disk_points(rng, 5000, 0.95)
    center, radius, collinear = geodesic_circle(p, q)
    # near-collinear pairs have huge centers where |c|^2 - r^2 cancels
    # catastrophically; those pairs take the diameter branch downstream
    keep = ~collinear & (radius < 1e3)
    gap = np.sum(center * center, axis=-1) - radius ** 2
    assert np.max(np.abs(gap[keep] - 1.0)) < 1e-9
    rel = np.abs(gap[~collinear] - 1.0) / np.maximum(radius[~collinear] ** 2, 1.0)
    assert np.max(rel) < 1e-9


def test_geodesic_circle_passes_through_endpoints():
    rng = np.random.default_rng(9)
    p = disk_points(rng, 1000, 0.9)
    q = disk_points(rng, 1000, 0.9)
    center, radius, collinear = geodesic_circle(p, q)
    keep = ~collinear
    for pt in (p, q):
        r = np.linalg.norm(pt - center, axis=-1)
        assert np.max(np.abs(r[keep] - radius[keep])) < 1e-8


def test_geodesic_between_collinear_is_diameter():
    arc = geodesic_between(DiskPoint(0.3, 0.0), DiskPoint(-0.2, 0.0))
    assert arc.kind == "diameter"
    arc2 = geodesic_between(DiskPoint(0.0, 0.75), DiskPoint(0.5, 0.5))
    assert arc2.kind == "circle"


def test_closest_point_dense_scan_oracle():
    # exhaustively scan hyperbolic-distance-to-origin along each arc
    rng = np.random.default_rng(10)
    origin = np.zeros(2)
    for _ in range(200):
        p = rng.uniform(-0.8, 0.8, 2)
        q = rng.uniform(-0.8, 0.8, 2)
        if np.linalg.norm(p - q) < 1e-3:
            continue
        got = closest_point_on_geodesic(p, q)
        ts = np.linspace(0.0, 1.0, 4001)[:, None]
        center, radius, collinear = geodesic_circle(p, q)
        if bool(collinear):
            pts = p + ts * (q - p)
        else:
            a0 = np.arctan2(p[1] - center[1], p[0] - center[0])
            a1 = np.arctan2(q[1] - center[1], q[0] - center[0])
            sweep = (a1 - a0 + np.pi) % (2.0 * np.pi) - np.pi
            ang = a0 + ts * sweep
            pts = center + radius * np.stack([np.cos(ang[:, 0]),
                                              np.sin(ang[:, 0])], axis=-1)
        pts = pts[np.linalg.norm(pts, axis=-1) < 1.0 - 1e-9]
        best = pts[np.argmin(hyp_distance(origin, pts))]
        assert hyp_distance(origin, got) <= hyp_distance(origin, best) + 1e-6


def test_closest_point_lies_on_geodesic():
    rng = np.random.default_rng(11)
    p = disk_points(rng, 2000, 0.85)
    q = disk_points(rng, 2000, 0.85)
    got = closest_point_on_geodesic(p, q)
    center, radius, collinear = geodesic_circle(p, q)
    keep = ~collinear
    r = np.linalg.norm(got - center, axis=-1)
    assert np.max(np.abs(r[keep] - radius[keep])) < 1e-8


def test_closest_point_object_api():
    arc = geodesic_between(DiskPoint(0.0, 0.75), DiskPoint(0.5, 0.5))
    pt = closest_point_to_origin(arc)
    assert np.hypot(pt.x, pt.y) < min(0.75, np.hypot(0.5, 0.5))


# -- hyperbolic circles ------------------------------------------------------

def test_circle_to_euclidean_origin_case():
    for r in [0.2, 1.0, 2.5]:
        c, re = hyperbolic_circle_to_euclidean(np.zeros(2), r)
        assert np.allclose(c, 0.0, atol=1e-12)
        assert abs(re - np.tanh(r / 2.0)) < 1e-12


def test_circle_to_euclidean_published_case():
    # center (0.8038, 0) with radius chosen so the diametric points are
    # x_l = -0.3214 and x_r = 0.988
    c = np.array([0.8038, 0.0])
    r = 0.5 * (hyp_distance(c, np.array([0.988, 0.0]))
               + hyp_distance(c, np.array([-0.3214, 0.0])))
    ec, er = hyperbolic_circle_to_euclidean(c, r)
    assert np.max(np.abs(ec - np.array([0.3333, 0.0]))) < 1e-3
    assert abs(er - 0.6547) < 1e-3


def test_circle_to_euclidean_defining_property():
    rng = np.random.default_rng(12)
    for _ in range(100):
        c = rng.uniform(-0.7, 0.7, 2)
        r = rng.uniform(0.05, 2.0)
        ec, er = hyperbolic_circle_to_euclidean(c, r)
        ang = np.linspace(0.0, 2.0 * np.pi, 32, endpoint=False)
        pts = np.asarray(ec) + float(er) * np.stack([np.cos(ang), np.sin(ang)],
                                                    axis=-1)
        d = hyp_distance(c, pts)
        assert np.max(np.abs(d - r)) < 1e-8


def test_circle_intersections_cases():
    a = HyperbolicCircle(DiskPoint(0.2, 0.0), 1.0)
    b = HyperbolicCircle(DiskPoint(-0.2, 0.0), 1.0)
    pts = circle_intersections(a, b)
    assert len(pts) == 2
    for p in pts:
        assert abs(hyp_distance(np.array([0.2, 0.0]), p.xy) - 1.0) < 1e-8
        assert abs(hyp_distance(np.array([-0.2, 0.0]), p.xy) - 1.0) < 1e-8
    far = HyperbolicCircle(DiskPoint(-0.5, 0.0), 0.1)
    assert circle_intersections(HyperbolicCircle(DiskPoint(0.5, 0.0), 0.1),
                                far) == []


def test_circle_intersections_wedge_boundary():
    # |r1 - r2| < d(c1, c2) < r1 + r2 <=> exactly two intersections
    rng = np.random.default_rng(13)
    for _ in range(200):
        c1 = rng.uniform(-0.5, 0.5, 2)
        c2 = rng.uniform(-0.5, 0.5, 2)
        d = float(hyp_distance(c1, c2))
        if d < 1e-2:
            continue
        r1 = rng.uniform(0.05, 1.5)
        r2 = rng.uniform(0.05, 1.5)
        pts = circle_intersections(HyperbolicCircle(DiskPoint.of(c1), r1),
                                   HyperbolicCircle(DiskPoint.of(c2), r2))
        inside = abs(r1 - r2) + 1e-6 < d < r1 + r2 - 1e-6
        if inside:
            assert len(pts) == 2
        elif d > r1 + r2 + 1e-6 or d < abs(r1 - r2) - 1e-6:
            assert len(pts) == 0


def test_delta_hyperbolicity():
    rng = np.random.default_rng(14)
    pts = disk_points(rng, 8, 0.9)
    delta = delta_hyperbolicity_check(pts)
    assert delta >= 0.0
    # hyperbolic plane four-point condition: delta <= log 3 universally... a
    # loose sanity bound is enough here
    assert delta < 2.0
    with pytest.raises(ValueError):
        delta_hyperbolicity_check(pts[:3])


# -- hypothesis properties ---------------------------------------------------

@settings(deadline=None, max_examples=200)
@given(disk_coord, disk_coord, disk_coord, disk_coord)
def test_property_symmetry(ax, ay, bx, by):
    a = np.array([ax, ay])
    b = np.array([bx, by])
    assert abs(hyp_distance(a, b) - hyp_distance(b, a)) < 1e-9


@settings(deadline=None, max_examples=200)
@given(disk_coord, disk_coord, st.floats(-1.5, 1.5), st.floats(-1.5, 1.5))
def test_property_exp_log(ax, ay, vx, vy):
    x = np.array([ax, ay])
    v = np.array([vx, vy])
    y = exp_map(x, v)
    assert np.linalg.norm(y) < 1.0
    assert np.max(np.abs(log_map(x, y) - v)) < 1e-7


@settings(deadline=None, max_examples=100)
@given(disk_coord, disk_coord, disk_coord, disk_coord)
def test_property_closest_point_no_farther_than_endpoints(px, py, qx, qy):
    p = np.array([px, py])
    q = np.array([qx, qy])
    if np.linalg.norm(p - q) < 1e-3:
        return
    got = closest_point_on_geodesic(p, q)
    o = np.zeros(2)
    assert hyp_distance(o, got) <= min(hyp_distance(o, p),
                                       hyp_distance(o, q)) + 1e-9
