"""Geometry: intersections, membership, sampling layout, overlap census."""

import numpy as np
import pytest

from labelfield.errors import ConfigError
from labelfield.primitives import (
    Primitive,
    RayInterval,
    SKY_INDEX,
    _allocate,
    build_ray_bundle,
    draw_samples,
    primitive_overlap_stats,
    ray_intervals,
    sample_along_ray,
    scene_t_max,
)


def unit_cube(center=(0, 0, 0), he=(0.5, 0.5, 0.5), class_id=0, instance_id=-1, rotation=None):
    kw = {} if rotation is None else {"rotation": rotation}
    return Primitive(
        kind="cuboid", class_id=class_id, center=np.array(center, float),
        half_extents=np.array(he, float), instance_id=instance_id, **kw,
    )


def rot_y(deg):
    a = np.deg2rad(deg)
    c, s = np.cos(a), np.sin(a)
    return np.array([[c, 0, s], [0, 1, 0], [-s, 0, c]])


# ---------------------------------------------------------------------------
# Single-primitive intersection oracles (hand-computed)


def test_cube_interval_from_axis_ray():
    cube = unit_cube()
    iv = cube.ray_interval((-2, 0, 0), (1, 0, 0))
    np.testing.assert_allclose(iv, (1.5, 2.5), atol=1e-12)


def test_sphere_interval():
    sph = Primitive(kind="ellipsoid", class_id=0, center=np.zeros(3), semi_axes=np.ones(3))
    iv = sph.ray_interval((0, 0, -3), (0, 0, 1))
    np.testing.assert_allclose(iv, (2.0, 4.0), atol=1e-12)


def test_ellipsoid_interval_along_major_axis():
    ell = Primitive(kind="ellipsoid", class_id=0, center=np.zeros(3), semi_axes=np.array([1.0, 2.0, 3.0]))
    iv = ell.ray_interval((-5, 0, 0), (1, 0, 0))
    np.testing.assert_allclose(iv, (4.0, 6.0), atol=1e-12)


def test_extruded_triangle_interval():
    # footprint (0,0),(2,0),(0,2); hypotenuse is x + z = 2; at z = 0.5 the ray
    # from x = -1 enters at t = 1 and exits at x = 1.5, so t = 2.5
    tri = Primitive(
        kind="polygon", class_id=0, center=np.zeros(3),
        footprint=np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), y_range=(0.0, 1.0),
    )
    iv = tri.ray_interval((-1.0, 0.5, 0.5), (1.0, 0.0, 0.0))
    np.testing.assert_allclose(iv, (1.0, 2.5), atol=1e-12)


def test_ray_from_inside_clips_to_zero():
    iv = unit_cube().ray_interval((0, 0, 0), (0, 0, 1))
    np.testing.assert_allclose(iv, (0.0, 0.5), atol=1e-12)


def test_miss_and_tangent_return_none():
    cube = unit_cube()
    assert cube.ray_interval((-2, 5, 0), (1, 0, 0)) is None
    assert cube.ray_interval((2, 0, 0), (1, 0, 0)) is None  # behind the origin
    sph = Primitive(kind="ellipsoid", class_id=0, center=np.zeros(3), semi_axes=np.ones(3))
    assert sph.ray_interval((-3, 1.0, 0), (1, 0, 0)) is None  # grazing


def test_point_membership():
    cube = unit_cube()
    assert cube.contains(np.array([[0.4, 0.0, 0.0]]))[0]
    assert not cube.contains(np.array([[0.6, 0.0, 0.0]]))[0]
    ell = Primitive(kind="ellipsoid", class_id=0, center=np.zeros(3), semi_axes=np.array([1.0, 2.0, 3.0]))
    assert ell.contains(np.array([[0.0, 1.9, 0.0]]))[0]
    assert not ell.contains(np.array([[1.1, 0.0, 0.0]]))[0]
    tri = Primitive(
        kind="polygon", class_id=0, center=np.zeros(3),
        footprint=np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), y_range=(0.0, 1.0),
    )
    assert tri.contains(np.array([[0.5, 0.5, 0.5]]))[0]
    assert not tri.contains(np.array([[1.5, 0.5, 1.5]]))[0]  # beyond hypotenuse
    assert not tri.contains(np.array([[0.5, 1.5, 0.5]]))[0]  # above extrusion


def test_clockwise_footprint_normalized():
    ccw = Primitive(
        kind="polygon", class_id=0, center=np.zeros(3),
        footprint=np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), y_range=(0.0, 1.0),
    )
    cw = Primitive(
        kind="polygon", class_id=0, center=np.zeros(3),
        footprint=np.array([[0.0, 2.0], [2.0, 0.0], [0.0, 0.0]]), y_range=(0.0, 1.0),
    )
    pts = np.random.default_rng(0).uniform(-1, 3, size=(200, 3))
    np.testing.assert_array_equal(ccw.contains(pts), cw.contains(pts))


def test_rigid_invariance_of_membership_and_intervals():
    rng = np.random.default_rng(1)
    prims = [
        unit_cube(center=(1, 2, 3), he=(0.5, 1.0, 2.0), rotation=rot_y(30)),
        Primitive(kind="ellipsoid", class_id=0, center=np.array([0.0, 1.0, 4.0]),
                  semi_axes=np.array([0.5, 1.5, 1.0]), rotation=rot_y(-20)),
        Primitive(kind="polygon", class_id=0, center=np.array([2.0, 0.0, 1.0]),
                  footprint=np.array([[0.0, 0.0], [2.0, 0.0], [2.5, 1.5], [0.0, 2.0]]),
                  y_range=(-1.0, 2.0), rotation=rot_y(45)),
    ]
    rot = rot_y(77.7) @ np.array([[1, 0, 0], [0, 0, -1], [0, 1, 0]], float)
    shift = np.array([3.0, -2.0, 5.0])
    for p in prims:
        q = p.transformed(rot, shift)
        pts = rng.uniform(-3, 6, size=(300, 3))
        np.testing.assert_array_equal(p.contains(pts), q.contains(pts @ rot.T + shift))
        for _ in range(20):
            o = rng.uniform(-5, 5, size=3)
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            iv_a = p.ray_interval(o, d)
            iv_b = q.ray_interval(rot @ o + shift, rot @ d)
            if iv_a is None:
                assert iv_b is None
            else:
                np.testing.assert_allclose(iv_a, iv_b, atol=1e-9)


def test_validation_errors():
    with pytest.raises(ConfigError):
        unit_cube(he=(0.0, 1.0, 1.0))
    with pytest.raises(ConfigError):
        Primitive(kind="ellipsoid", class_id=0, center=np.zeros(3), semi_axes=np.array([1.0, -1.0, 1.0]))
    with pytest.raises(ConfigError):
        Primitive(kind="polygon", class_id=0, center=np.zeros(3),
                  footprint=np.array([[0.0, 0.0], [2.0, 0.0], [0.5, 0.5], [0.0, 2.0]]),
                  y_range=(0.0, 1.0))  # reflex vertex
    with pytest.raises(ConfigError):
        Primitive(kind="polygon", class_id=0, center=np.zeros(3),
                  footprint=np.array([[0.0, 0.0], [2.0, 0.0], [0.0, 2.0]]), y_range=(1.0, 1.0))
    with pytest.raises(ConfigError):
        unit_cube(rotation=np.eye(3) * 2.0)
    with pytest.raises(ConfigError):
        Primitive(kind="torus", class_id=0, center=np.zeros(3))


# ---------------------------------------------------------------------------
# Per-ray interval lists


def test_intervals_sorted_and_sky_appended():
    prims = [unit_cube(center=(0, 0, 10)), unit_cube(center=(0, 0, 5))]
    ivs = ray_intervals((0, 0, 0), (0, 0, 1), prims)
    assert [iv.prim for iv in ivs] == [1, 0, SKY_INDEX]
    np.testing.assert_allclose((ivs[0].t_near, ivs[0].t_far), (4.5, 5.5), atol=1e-12)
    np.testing.assert_allclose((ivs[1].t_near, ivs[1].t_far), (9.5, 10.5), atol=1e-12)
    # t_max is the farthest corner distance over the whole scene
    t_max = np.sqrt(0.25 + 0.25 + 10.5**2)
    np.testing.assert_allclose(ivs[2].t_near, t_max, atol=1e-12)
    np.testing.assert_allclose(ivs[2].t_far, 1.25 * t_max, atol=1e-12)
    assert scene_t_max(prims, np.zeros(3)) == pytest.approx(t_max)


def test_max_keep_truncates_and_suppresses_sky():
    prims = [unit_cube(center=(0, 0, 2 * k + 2)) for k in range(12)]
    ivs = ray_intervals((0, 0, 0), (0, 0, 1), prims, max_keep=10)
    assert len(ivs) == 10
    assert all(iv.prim != SKY_INDEX for iv in ivs)
    assert [iv.prim for iv in ivs] == list(range(10))


def test_empty_scene_has_only_sky():
    ivs = ray_intervals((0, 0, 0), (0, 0, 1), [], sky_span=2.0)
    assert len(ivs) == 1 and ivs[0].prim == SKY_INDEX
    np.testing.assert_allclose((ivs[0].t_near, ivs[0].t_far), (0.0, 2.0), atol=1e-12)


# ---------------------------------------------------------------------------
# Allocation and stratified placement


def test_allocation_worked_cases():
    np.testing.assert_array_equal(_allocate([1.0, 3.0], 4), [1, 3])
    np.testing.assert_array_equal(_allocate([1.0, 0.01], 5), [4, 1])
    np.testing.assert_array_equal(_allocate([10.0, 0.01, 0.01, 0.01], 4), [1, 1, 1, 1])
    np.testing.assert_array_equal(_allocate([1.0, 1.0, 1.0], 5), [2, 2, 1])
    # budget below interval count: longest intervals win
    np.testing.assert_array_equal(_allocate([1.0, 5.0, 3.0], 2), [0, 1, 1])


def test_midpoint_samples_of_unit_interval():
    # single interval (1, 2) with 4 samples: stratified midpoints, width 0.25
    prim = unit_cube(center=(0, 0, 1.5))
    _, batch = sample_along_ray((0, 0, 0), (0, 0, 1), [prim], 4, 0)
    real = ~batch.pad[0]
    np.testing.assert_allclose(batch.t[0][real], [1.125, 1.375, 1.625, 1.875], atol=1e-12)
    np.testing.assert_allclose(batch.delta[0][real], [0.25, 0.25, 0.25, 0.25], atol=1e-12)


def test_proportional_placement_two_intervals():
    prims = [unit_cube(center=(0, 0, 1.5)), unit_cube(center=(0, 0, 4), he=(1.5, 1.5, 1.5))]
    _, batch = sample_along_ray((0, 0, 0), (0, 0, 1), prims, 4, 0)
    real = ~batch.pad[0]
    np.testing.assert_allclose(batch.t[0][real], [1.5, 3.0, 4.0, 5.0], atol=1e-12)
    # delta bridges the gap between intervals, last keeps its stratum width
    np.testing.assert_allclose(batch.delta[0][real], [1.5, 1.0, 1.0, 1.0], atol=1e-12)


def test_sky_samples_and_final_delta():
    prim = unit_cube(center=(0, 0, 1.5))
    bundle, batch = sample_along_ray((0, 0, 0), (0, 0, 1), [prim], 2, 2, sky_span=1.0)
    t_max = scene_t_max([prim], np.zeros(3))
    real = ~batch.pad[0]
    np.testing.assert_allclose(
        batch.t[0][real], [1.25, 1.75, t_max + 0.25, t_max + 0.75], atol=1e-12
    )
    assert batch.delta[0][real][-1] == pytest.approx(0.5)  # sky_span / n_sky
    np.testing.assert_array_equal(batch.is_sky[0][real], [False, False, True, True])


def test_membership_matches_point_containment():
    rng = np.random.default_rng(2)
    prims = [
        unit_cube(center=(0, 0, 3), he=(1.0, 1.0, 1.0), class_id=1),
        unit_cube(center=(0, 0, 3.8), he=(0.8, 0.8, 0.8), class_id=2, rotation=rot_y(25)),
        Primitive(kind="ellipsoid", class_id=3, center=np.array([0.2, 0.0, 5.0]),
                  semi_axes=np.array([1.2, 0.7, 0.9])),
    ]
    origins = np.zeros((40, 3))
    dirs = rng.normal(size=(40, 3))
    dirs[:, 2] = np.abs(dirs[:, 2]) + 1.0
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    bundle = build_ray_bundle(origins, dirs, prims, 16, 2)
    batch = draw_samples(bundle, rng.random(bundle.base.shape))
    for r in range(40):
        for s in range(bundle.n_samples):
            if batch.pad[r, s]:
                assert not batch.member[r, s].any()
                continue
            pos = batch.positions[r, s][None]
            for k in range(bundle.itv_valid.shape[1]):
                if not bundle.itv_valid[r, k] or bundle.itv_is_sky[r, k]:
                    continue
                edge_gap = min(abs(batch.t[r, s] - bundle.itv_lo[r, k]),
                               abs(batch.t[r, s] - bundle.itv_hi[r, k]))
                if edge_gap < 1e-7:
                    continue
                inside = prims[bundle.itv_prim[r, k]].contains(pos)[0]
                assert batch.member[r, s, k] == inside


def test_overlapping_intervals_set_both_bits():
    prims = [
        unit_cube(center=(0, 0, 2.0), class_id=0),
        unit_cube(center=(0, 0, 2.5), class_id=1),
    ]
    _, batch = sample_along_ray((0, 0, 0), (0, 0, 1), prims, 8, 0)
    overlap = (batch.t[0] > 2.0) & (batch.t[0] < 2.5) & ~batch.pad[0]
    assert overlap.any()
    assert (batch.member[0][overlap].sum(axis=1) == 2).all()


def test_samples_sorted_jitter_stays_in_stratum():
    rng = np.random.default_rng(3)
    prims = [unit_cube(center=(0, 0, 3), he=(1.0, 1.0, 1.0)),
             unit_cube(center=(0, 0, 6), he=(2.0, 1.0, 2.0))]
    bundle = build_ray_bundle(np.zeros((8, 3)), np.tile([0, 0, 1.0], (8, 1)), prims, 12, 3)
    u = rng.random(bundle.base.shape)
    batch = draw_samples(bundle, u)
    t = batch.t
    real = ~batch.pad
    for r in range(8):
        tr = t[r][real[r]]
        assert (np.diff(tr) >= 0).all()
        assert (batch.delta[r][real[r]] >= 0).all()
    # identical seed reproduces bitwise
    batch2 = draw_samples(bundle, np.random.default_rng(3).random(bundle.base.shape))
    np.testing.assert_array_equal(batch.t, batch2.t)


# ---------------------------------------------------------------------------
# Overlap census


def test_identical_cubes_overlap_volume():
    prims = [unit_cube(class_id=0), unit_cube(class_id=1)]
    rep = primitive_overlap_stats(prims, mc_samples=5000)
    assert len(rep.pairs) == 1
    assert rep.pairs[0].volume == pytest.approx(1.0, abs=1e-9)
    assert rep.counts_by_kind["stuff-stuff"] == 1
    assert rep.counts_by_volume_bin["0-1"] == 0 and rep.counts_by_volume_bin["1-5"] == 1


def test_half_overlapping_cubes():
    prims = [unit_cube(class_id=0), unit_cube(center=(0.5, 0, 0), class_id=1)]
    rep = primitive_overlap_stats(prims, mc_samples=5000)
    assert rep.pairs[0].volume == pytest.approx(0.5, abs=1e-9)


def test_sphere_in_cube_volume_within_mc_error():
    prims = [
        unit_cube(class_id=0),
        Primitive(kind="ellipsoid", class_id=1, center=np.zeros(3),
                  semi_axes=np.full(3, 0.5), instance_id=0),
    ]
    n = 40000
    rep = primitive_overlap_stats(prims, mc_samples=n, rng=np.random.default_rng(4))
    true = np.pi / 6.0
    sigma = np.sqrt(true * (1 - true) / n)  # box volume is 1
    assert abs(rep.pairs[0].volume - true) < 3 * sigma + 1e-9
    assert rep.pairs[0].kind == "stuff-thing"


def test_disjoint_primitives_report_no_pairs():
    prims = [unit_cube(), unit_cube(center=(5, 0, 0))]
    rep = primitive_overlap_stats(prims, mc_samples=1000)
    assert rep.pairs == [] and rep.n_primitives == 2
    assert rep.as_dict()["n_intersecting_pairs"] == 0


def test_thing_thing_classification():
    prims = [unit_cube(class_id=2, instance_id=0), unit_cube(center=(0.2, 0, 0), class_id=2, instance_id=1)]
    rep = primitive_overlap_stats(prims, mc_samples=500)
    assert rep.counts_by_kind["thing-thing"] == 1


def test_ray_interval_dataclass_fields():
    iv = RayInterval(3, 1.0, 2.0)
    assert (iv.prim, iv.t_near, iv.t_far) == (3, 1.0, 2.0)
