"""Camera models and per-pixel ray generation.

World frame: x right, y up, z forward.  Camera frame: x right, y down,
z forward, so the camera-to-world matrix of a level camera in a y-up world
has determinant -1; poses are validated as orthonormal, not proper.

Depth everywhere means Euclidean distance along the unit ray direction,
not a z coordinate.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ConfigError

ROLES = ("persp_left", "persp_right", "fisheye_left", "fisheye_right", "aux")


@dataclass
class Camera:
    """One view: projection model, pose, and an appearance-code slot.

    kind "pinhole" uses fx/fy/cx/cy; "fisheye" is the equidistant model
    r = focal * theta with field of view up to 2*max_theta; "panorama" is a
    full equirectangular grid.  `mask`, when set, marks pixels that produce
    rays.
    """

    kind: str
    width: int
    height: int
    pose_r: np.ndarray
    pose_t: np.ndarray
    fx: float = 0.0
    fy: float = 0.0
    cx: float = 0.0
    cy: float = 0.0
    focal: float = 0.0
    max_theta: float = np.pi / 2
    frame_index: int = 0
    role: str = "aux"
    name: str = ""
    mask: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        self.pose_r = np.asarray(self.pose_r, dtype=np.float64)
        self.pose_t = np.asarray(self.pose_t, dtype=np.float64)
        if self.pose_r.shape != (3, 3) or not np.allclose(
            self.pose_r @ self.pose_r.T, np.eye(3), atol=1e-8
        ):
            raise ConfigError("camera pose_r must be orthonormal")
        if self.pose_t.shape != (3,):
            raise ConfigError("camera pose_t must be a 3-vector")
        if self.width < 1 or self.height < 1:
            raise ConfigError("camera needs positive width and height")
        if self.kind == "pinhole":
            if self.fx <= 0 or self.fy <= 0:
                raise ConfigError("pinhole camera needs positive fx and fy")
        elif self.kind == "fisheye":
            if self.focal <= 0:
                raise ConfigError("fisheye camera needs a positive focal")
            if not 0 < self.max_theta <= np.pi:
                raise ConfigError("fisheye max_theta must be in (0, pi]")
        elif self.kind != "panorama":
            raise ConfigError(f"unknown camera kind {self.kind!r}")
        if self.role not in ROLES:
            raise ConfigError(f"unknown camera role {self.role!r}")
        if self.mask is not None:
            self.mask = np.asarray(self.mask, dtype=bool)
            if self.mask.shape != (self.height, self.width):
                raise ConfigError("camera mask shape must be (height, width)")

    @property
    def optical_axis(self):
        return self.pose_r @ np.array([0.0, 0.0, 1.0])

    def as_dict(self):
        d = {
            "kind": self.kind,
            "width": self.width,
            "height": self.height,
            "pose_r": self.pose_r.tolist(),
            "pose_t": self.pose_t.tolist(),
            "frame_index": self.frame_index,
            "role": self.role,
            "name": self.name,
        }
        if self.kind == "pinhole":
            d.update(fx=self.fx, fy=self.fy, cx=self.cx, cy=self.cy)
        elif self.kind == "fisheye":
            d.update(focal=self.focal, cx=self.cx, cy=self.cy, max_theta=self.max_theta)
        return d

    @classmethod
    def from_dict(cls, d, mask=None):
        keys = ("kind", "width", "height", "fx", "fy", "cx", "cy", "focal",
                "max_theta", "frame_index", "role", "name")
        kw = {k: d[k] for k in keys if k in d}
        return cls(pose_r=np.array(d["pose_r"]), pose_t=np.array(d["pose_t"]), mask=mask, **kw)


def look_at(position, target, up=(0.0, 1.0, 0.0)):
    """Camera-to-world basis with x right, y down, z toward the target."""
    position = np.asarray(position, np.float64)
    fwd = np.asarray(target, np.float64) - position
    n = np.linalg.norm(fwd)
    if n < 1e-12:
        raise ConfigError("look_at target coincides with position")
    z = fwd / n
    upv = np.asarray(up, np.float64)
    x = np.cross(upv, z)
    nx = np.linalg.norm(x)
    if nx < 1e-12:
        raise ConfigError("look_at up vector is parallel to the view direction")
    x /= nx
    y = np.cross(x, z)
    return np.stack([x, y, z], axis=1)


def pixel_rays(camera, us, vs):
    """World rays through float pixel coordinates.

    Returns (origins (N,3), directions (N,3), valid (N,)).  Directions are
    unit length; invalid pixels (outside the fisheye image circle or masked
    off) keep a placeholder +z direction.
    """
    us = np.atleast_1d(np.asarray(us, np.float64))
    vs = np.atleast_1d(np.asarray(vs, np.float64))
    n = us.shape[0]
    valid = np.ones(n, dtype=bool)
    if camera.kind == "pinhole":
        x = (us - camera.cx) / camera.fx
        y = (vs - camera.cy) / camera.fy
        d_cam = np.stack([x, y, np.ones(n)], axis=1)
        d_cam /= np.linalg.norm(d_cam, axis=1, keepdims=True)
    elif camera.kind == "fisheye":
        dx = us - camera.cx
        dy = vs - camera.cy
        r = np.hypot(dx, dy)
        theta = r / camera.focal
        valid &= theta <= camera.max_theta + 1e-12
        psi = np.arctan2(dy, dx)
        st = np.sin(theta)
        d_cam = np.stack([st * np.cos(psi), st * np.sin(psi), np.cos(theta)], axis=1)
        d_cam[~valid] = (0.0, 0.0, 1.0)
    else:
        lam = 2.0 * np.pi * (us + 0.5) / camera.width - np.pi
        phi = np.pi / 2.0 - np.pi * (vs + 0.5) / camera.height
        cp = np.cos(phi)
        d_cam = np.stack([cp * np.sin(lam), np.sin(phi), cp * np.cos(lam)], axis=1)
    if camera.mask is not None:
        ui = np.clip(np.floor(us).astype(int), 0, camera.width - 1)
        vi = np.clip(np.floor(vs).astype(int), 0, camera.height - 1)
        valid &= camera.mask[vi, ui]
    d = d_cam @ camera.pose_r.T
    o = np.broadcast_to(camera.pose_t, (n, 3)).copy()
    return o, d, valid


def ray_for_pixel(camera, u, v):
    """Single-pixel convenience wrapper; None when the pixel has no ray."""
    o, d, valid = pixel_rays(camera, [float(u)], [float(v)])
    if not valid[0]:
        return None
    return o[0], d[0]


def image_grid(camera):
    """Row-major pixel-center coordinates of the full image.

    Pinhole and fisheye rays go through pixel centers (u + 0.5); the
    panorama formula already bakes the half-pixel shift in, so it gets
    integer coordinates.
    """
    vs, us = np.mgrid[0 : camera.height, 0 : camera.width]
    us = us.reshape(-1).astype(np.float64)
    vs = vs.reshape(-1).astype(np.float64)
    if camera.kind != "panorama":
        us += 0.5
        vs += 0.5
    return us, vs


def camera_rays(camera):
    """Rays for every pixel, row-major: (origins, directions, valid)."""
    us, vs = image_grid(camera)
    return pixel_rays(camera, us, vs)


def panorama_column_for_direction(camera, d):
    """Nearest panorama pixel column whose azimuth matches direction d."""
    d_cam = camera.pose_r.T @ np.asarray(d, np.float64)
    lam = np.arctan2(d_cam[0], d_cam[2])
    u = (lam + np.pi) * camera.width / (2.0 * np.pi) - 0.5
    return int(np.round(u)) % camera.width


def appearance_alpha(d, d_left, d_right):
    """Blend factor for per-ray appearance codes, by inverse angular distance.

    alpha weights the LEFT code: alpha = ang(d, d_right) / (ang(d, d_left)
    + ang(d, d_right)), so alpha = 1 exactly on the left axis and 0 on the
    right.  A degenerate zero denominator falls back to 0.5.
    """
    d = np.atleast_2d(np.asarray(d, np.float64))
    d = d / np.linalg.norm(d, axis=1, keepdims=True)

    def ang(axis):
        a = np.asarray(axis, np.float64)
        a = a / np.linalg.norm(a)
        return np.arccos(np.clip(d @ a, -1.0, 1.0))

    a_l = ang(d_left)
    a_r = ang(d_right)
    denom = a_l + a_r
    alpha = np.where(denom > 1e-12, a_r / np.where(denom > 1e-12, denom, 1.0), 0.5)
    return alpha
