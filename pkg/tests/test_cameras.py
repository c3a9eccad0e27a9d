"""Camera ray generation and appearance-code interpolation."""

import numpy as np
import pytest

from labelfield.cameras import (
    Camera,
    appearance_alpha,
    camera_rays,
    image_grid,
    look_at,
    panorama_column_for_direction,
    pixel_rays,
    ray_for_pixel,
)
from labelfield.errors import ConfigError


def pinhole(pos=(0, 0, 0), target=(0, 0, 10), w=64, h=64, f=50.0):
    return Camera(
        kind="pinhole", width=w, height=h, fx=f, fy=f,
        cx=(w - 1) / 2 + 0.5, cy=(h - 1) / 2 + 0.5,
        pose_r=look_at(pos, target), pose_t=np.array(pos, float),
    )


def test_pinhole_center_pixel_is_optical_axis():
    cam = pinhole()
    o, d = ray_for_pixel(cam, cam.cx, cam.cy)
    np.testing.assert_allclose(o, [0, 0, 0], atol=1e-12)
    np.testing.assert_allclose(d, [0, 0, 1], atol=1e-12)


def test_pinhole_off_center_direction_hand_computed():
    cam = pinhole()
    _, d = ray_for_pixel(cam, cam.cx + 10.0, cam.cy)
    expect = np.array([0.2, 0.0, 1.0])
    expect /= np.linalg.norm(expect)
    np.testing.assert_allclose(d, expect, atol=1e-12)


def test_pinhole_pixel_above_center_looks_up():
    cam = pinhole()
    _, d = ray_for_pixel(cam, cam.cx, cam.cy - 10.0)
    assert d[1] > 0  # image v decreases upward, world y is up


def test_pinhole_unproject_round_trip():
    cam = pinhole()
    p = np.array([2.0, 1.0, 8.0])
    # project by hand: camera y axis points down
    u = cam.cx + cam.fx * (2.0 / 8.0)
    v = cam.cy + cam.fy * (-1.0 / 8.0)
    o, d = ray_for_pixel(cam, u, v)
    np.testing.assert_allclose(o + np.linalg.norm(p) * d, p, atol=1e-9)


def test_ray_directions_unit_norm():
    cam = pinhole(w=16, h=12)
    _, d, valid = camera_rays(cam)
    assert valid.all()
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)


def fisheye(max_theta=np.pi / 2, f=20.0, pose_r=None):
    return Camera(
        kind="fisheye", width=64, height=64, focal=f, cx=31.5, cy=31.5,
        max_theta=max_theta,
        pose_r=np.eye(3) if pose_r is None else pose_r, pose_t=np.zeros(3),
    )


def test_fisheye_center_and_45_degrees():
    cam = fisheye()
    _, d = ray_for_pixel(cam, cam.cx, cam.cy)
    np.testing.assert_allclose(d, [0, 0, 1], atol=1e-12)
    _, d = ray_for_pixel(cam, cam.cx + cam.focal * np.pi / 4, cam.cy)
    np.testing.assert_allclose(d, [np.sqrt(0.5), 0, np.sqrt(0.5)], atol=1e-12)


def test_fisheye_invalid_outside_image_circle():
    cam = fisheye()
    assert ray_for_pixel(cam, cam.cx + cam.focal * (np.pi / 2 + 0.05), cam.cy) is None
    o, d, valid = pixel_rays(cam, [cam.cx, cam.cx + cam.focal * 2.0], [cam.cy, cam.cy])
    np.testing.assert_array_equal(valid, [True, False])


def test_fisheye_beyond_180_degree_fov():
    cam = fisheye(max_theta=np.deg2rad(100), f=10.0)
    theta = np.deg2rad(95)
    _, d = ray_for_pixel(cam, cam.cx + cam.focal * theta, cam.cy)
    assert d[2] < 0  # looking behind the image plane
    np.testing.assert_allclose(np.linalg.norm(d), 1.0, atol=1e-12)


def test_fisheye_rotational_equivariance():
    rng = np.random.default_rng(0)
    a = rng.uniform(0, 2 * np.pi)
    rot = np.array(
        [[np.cos(a), 0, np.sin(a)], [0, 1, 0], [-np.sin(a), 0, np.cos(a)]]
    )
    cam1 = fisheye()
    cam2 = fisheye(pose_r=rot)
    us = rng.uniform(5, 58, size=20)
    vs = rng.uniform(5, 58, size=20)
    _, d1, v1 = pixel_rays(cam1, us, vs)
    _, d2, v2 = pixel_rays(cam2, us, vs)
    np.testing.assert_array_equal(v1, v2)
    np.testing.assert_allclose(d2[v1], d1[v1] @ rot.T, atol=1e-12)


def panorama(w=64, h=32):
    return Camera(kind="panorama", width=w, height=h, pose_r=np.eye(3), pose_t=np.zeros(3))


def test_panorama_center_pixel_near_forward():
    cam = panorama()
    _, d = ray_for_pixel(cam, cam.width // 2 - 1, cam.height // 2 - 1)
    tol = np.pi / cam.width + np.pi / (2 * cam.height)  # half a pixel per axis
    assert np.arccos(np.clip(d @ np.array([0, 0, 1.0]), -1, 1)) <= tol + 1e-12


def test_panorama_top_row_looks_up():
    cam = panorama()
    _, d = ray_for_pixel(cam, 10, 0)
    assert d[1] > 0.99


def test_panorama_wraps_continuously_at_seam():
    cam = panorama()
    v = cam.height // 2
    _, d0 = ray_for_pixel(cam, 0, v)
    _, dlast = ray_for_pixel(cam, cam.width - 1, v)
    gap = np.arccos(np.clip(d0 @ dlast, -1, 1))
    # one pixel of azimuth at this row's latitude
    phi = np.pi / 2 - np.pi * (v + 0.5) / cam.height
    expect = np.arccos(np.sin(phi) ** 2 + np.cos(phi) ** 2 * np.cos(2 * np.pi / cam.width))
    np.testing.assert_allclose(gap, expect, atol=1e-9)


def test_panorama_column_lookup():
    cam = panorama()
    assert panorama_column_for_direction(cam, np.array([1.0, 0, 0])) == 48
    assert panorama_column_for_direction(cam, np.array([-1.0, 0, 0])) == 16
    _, d = ray_for_pixel(cam, 48, cam.height // 2 - 1)
    assert d[0] > 0.9


def test_panorama_row_major_grid_covers_sphere():
    cam = panorama(w=32, h=16)
    _, d, valid = camera_rays(cam)
    assert valid.all() and d.shape == (32 * 16, 3)
    np.testing.assert_allclose(np.linalg.norm(d, axis=1), 1.0, atol=1e-12)
    # mean direction of a uniform-in-angle grid stays near zero in x
    assert abs(d[:, 0].mean()) < 1e-9


def test_mask_invalidates_pixels():
    mask = np.ones((12, 16), bool)
    mask[3, 4] = False
    cam = Camera(
        kind="pinhole", width=16, height=12, fx=10, fy=10, cx=8, cy=6,
        pose_r=look_at((0, 0, 0), (0, 0, 1)), pose_t=np.zeros(3), mask=mask,
    )
    assert ray_for_pixel(cam, 4.5, 3.5) is None
    assert ray_for_pixel(cam, 5.5, 3.5) is not None


def test_camera_validation_errors():
    with pytest.raises(ConfigError):
        pinhole(f=0.0)
    with pytest.raises(ConfigError):
        Camera(kind="fisheye", width=8, height=8, focal=5, max_theta=4.0,
               pose_r=np.eye(3), pose_t=np.zeros(3))
    with pytest.raises(ConfigError):
        Camera(kind="pinhole", width=8, height=8, fx=5, fy=5,
               pose_r=np.eye(3) * 1.5, pose_t=np.zeros(3))
    with pytest.raises(ConfigError):
        Camera(kind="pinhole", width=8, height=8, fx=5, fy=5,
               pose_r=np.eye(3), pose_t=np.zeros(3), mask=np.ones((4, 4), bool))
    with pytest.raises(ConfigError):
        look_at((0, 0, 0), (0, 0, 0))
    with pytest.raises(ConfigError):
        look_at((0, 0, 0), (0, 5, 0))  # up parallel to view


def test_camera_dict_round_trip():
    cam = pinhole(pos=(1, 2, 3), target=(4, 5, 6))
    cam.role = "persp_left"
    cam.frame_index = 7
    cam.name = "f7_left"
    d = cam.as_dict()
    back = Camera.from_dict(d)
    np.testing.assert_allclose(back.pose_r, cam.pose_r, atol=1e-15)
    np.testing.assert_allclose(back.pose_t, cam.pose_t, atol=1e-15)
    assert back.fx == cam.fx and back.frame_index == 7 and back.role == "persp_left"


def test_image_grid_pixel_centers():
    cam = pinhole(w=4, h=2)
    us, vs = image_grid(cam)
    assert us[0] == 0.5 and vs[0] == 0.5 and us[-1] == 3.5 and vs[-1] == 1.5
    pano = panorama(w=4, h=2)
    us, vs = image_grid(pano)
    assert us[0] == 0.0 and us[-1] == 3.0  # half-pixel shift lives in the formula


# ---------------------------------------------------------------------------
# Appearance interpolation


def test_appearance_alpha_endpoints_exact():
    d_l = np.array([0.0, 0.0, 1.0])
    d_r = np.array([1.0, 0.0, 0.0])
    assert appearance_alpha(d_l, d_l, d_r)[0] == 1.0
    assert appearance_alpha(d_r, d_l, d_r)[0] == 0.0


def test_appearance_alpha_angle_ratio():
    # 30 degrees from left, 60 from right: alpha = 60 / 90 = 2/3
    d_l = np.array([0.0, 0.0, 1.0])
    d_r = np.array([1.0, 0.0, 0.0])
    d = np.array([np.sin(np.pi / 6), 0.0, np.cos(np.pi / 6)])
    np.testing.assert_allclose(appearance_alpha(d, d_l, d_r)[0], 2.0 / 3.0, atol=1e-12)


def test_appearance_alpha_symmetry_and_degenerate():
    d_l = np.array([0.0, 0.0, 1.0])
    d_r = np.array([1.0, 0.0, 0.0])
    mid = d_l + d_r
    np.testing.assert_allclose(appearance_alpha(mid, d_l, d_r)[0], 0.5, atol=1e-12)
    np.testing.assert_allclose(appearance_alpha(d_l, d_l, d_l)[0], 0.5, atol=1e-12)


def test_appearance_alpha_vectorized_range():
    rng = np.random.default_rng(5)
    d = rng.normal(size=(100, 3))
    a = appearance_alpha(d, [0, 0, 1.0], [1.0, 0, 0])
    assert a.shape == (100,)
    assert ((a >= 0) & (a <= 1)).all()
