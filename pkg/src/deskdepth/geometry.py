"""Pinhole camera model, rigid transforms, and differentiable view synthesis.

Conventions used throughout the package:
  * pixel (u, v) = (column, row); the pixel center of column 0 is u = 0
  * camera looks down +z; a backprojected point is depth * ((u-cx)/fx, (v-cy)/fy, 1)
  * poses are camera-to-world; the warp consumes a 4x4 target-camera to
    source-camera transform
  * normalized sampling coordinates follow the grid sampler: -1 is the center
    of the first pixel, +1 the center of the last
"""

import json
import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor, constant

Z_MIN = 1e-3  # points closer than this to the camera plane cannot be projected
_SMALL_ANGLE_SQ = 1e-12  # below this squared angle the rotation series kicks in


@dataclass
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if self.width < 2 or self.height < 2:
            raise ValueError("image must be at least 2x2")

    def to_json(self):
        return {"fx": self.fx, "fy": self.fy, "cx": self.cx, "cy": self.cy,
                "width": self.width, "height": self.height}

    @classmethod
    def from_json(cls, obj):
        return cls(fx=float(obj["fx"]), fy=float(obj["fy"]), cx=float(obj["cx"]),
                   cy=float(obj["cy"]), width=int(obj["width"]), height=int(obj["height"]))


@dataclass
class Pose:
    """Rigid transform as a rotation vector (angle < pi) plus translation."""
    axis_angle: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        self.axis_angle = np.asarray(self.axis_angle, dtype=np.float64)
        self.translation = np.asarray(self.translation, dtype=np.float64)
        if self.axis_angle.shape != (3,) or self.translation.shape != (3,):
            raise ValueError("axis_angle and translation must be 3-vectors")
        if float(np.linalg.norm(self.axis_angle)) >= math.pi:
            raise ValueError("rotation angle must stay below pi")

    def to_json(self):
        return {"axis_angle": [float(v) for v in self.axis_angle],
                "translation": [float(v) for v in self.translation]}

    @classmethod
    def from_json(cls, obj):
        return cls(np.array(obj["axis_angle"], dtype=np.float64),
                   np.array(obj["translation"], dtype=np.float64))

    def matrix(self):
        return pose_matrix_np(np.concatenate([self.axis_angle, self.translation]))


def _rotation_coeffs_np(theta_sq):
    if theta_sq < _SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0
        b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
    else:
        theta = theta_sq ** 0.5
        a = math.sin(theta) / theta
        b = (1.0 - math.cos(theta)) / theta_sq
    return a, b


def pose_matrix_np(params):
    """Plain-array twin of pose_to_matrix; mirrors its operation order exactly."""
    params = np.asarray(params, dtype=np.float64)
    w, t = params[:3], params[3:]
    theta_sq = float(w[0] * w[0] + w[1] * w[1] + w[2] * w[2])
    a, b = _rotation_coeffs_np(theta_sq)
    k = np.array([[0.0, -w[2], w[1]],
                  [w[2], 0.0, -w[0]],
                  [-w[1], w[0], 0.0]])
    r = np.eye(3) + a * k + b * (k @ k)
    m = np.eye(4)
    m[:3, :3] = r
    m[:3, 3] = t
    return m


def pose_to_matrix(params):
    """Differentiable 6-vector (rotation vector, translation) -> 4x4 transform.

    Built entirely from taped ops so gradients flow back into the parameters.
    The rotation uses R = I + a*K + b*K^2 with a = sin(t)/t, b = (1-cos(t))/t^2,
    replaced by their even series below the small-angle threshold so the tiny
    rotations a freshly initialized network emits stay differentiable.
    """
    if not isinstance(params, Tensor):
        params = constant(params)
    if params.shape != (6,):
        raise T.ShapeMismatch(f"pose parameters must have shape (6,), got {params.shape}")
    w = T.slice_axis(params, 0, 0, 3)
    trans = T.slice_axis(params, 0, 3, 6)
    wx = T.slice_axis(w, 0, 0, 1)
    wy = T.slice_axis(w, 0, 1, 2)
    wz = T.slice_axis(w, 0, 2, 3)
    theta_sq = T.reduce_sum(wx * wx + wy * wy + wz * wz)

    if theta_sq.item() < _SMALL_ANGLE_SQ:
        a = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0
        b = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
    else:
        theta = T.pow_scalar(theta_sq, 0.5)
        a = T.sin(theta) / theta
        b = (1.0 - T.cos(theta)) / theta_sq

    zero = constant(np.zeros(1))
    row0 = T.reshape(T.concat([zero, -wz, wy], axis=0), (1, 3))
    row1 = T.reshape(T.concat([wz, zero, -wx], axis=0), (1, 3))
    row2 = T.reshape(T.concat([-wy, wx, zero], axis=0), (1, 3))
    k = T.concat([row0, row1, row2], axis=0)
    r = constant(np.eye(3)) + a * k + b * T.matmul(k, k)

    top = T.concat([r, T.reshape(trans, (3, 1))], axis=1)
    bottom = constant(np.array([[0.0, 0.0, 0.0, 1.0]]))
    return T.concat([top, bottom], axis=0)


def matrix_to_pose(m):
    """Rotation-vector log map of a 4x4 rigid transform (plain arrays)."""
    m = np.asarray(m, dtype=np.float64)
    r = m[:3, :3]
    t = m[:3, 3].copy()
    cos_theta = np.clip((np.trace(r) - 1.0) / 2.0, -1.0, 1.0)
    theta = math.acos(cos_theta)
    if theta >= math.pi - 1e-6:
        raise ValueError("rotation too close to pi for a unique rotation vector")
    skew = np.array([r[2, 1] - r[1, 2], r[0, 2] - r[2, 0], r[1, 0] - r[0, 1]])
    if theta < 1e-7:
        w = 0.5 * skew
    else:
        w = theta / (2.0 * math.sin(theta)) * skew
    return Pose(w, t)


def invert_matrix(m):
    """Closed-form inverse of a rigid 4x4 transform."""
    m = np.asarray(m, dtype=np.float64)
    r, t = m[:3, :3], m[:3, 3]
    out = np.eye(4)
    out[:3, :3] = r.T
    out[:3, 3] = -r.T @ t
    return out


_DIR_CACHE = {}


def camera_rays(intr):
    """Constant [3,H,W] grid of ray directions ((u-cx)/fx, (v-cy)/fy, 1)."""
    key = (intr.fx, intr.fy, intr.cx, intr.cy, intr.width, intr.height)
    if key not in _DIR_CACHE:
        vs, us = np.meshgrid(np.arange(intr.height, dtype=np.float64),
                             np.arange(intr.width, dtype=np.float64), indexing="ij")
        dirs = np.stack([(us - intr.cx) / intr.fx,
                         (vs - intr.cy) / intr.fy,
                         np.ones_like(us)])
        _DIR_CACHE[key] = dirs
    return _DIR_CACHE[key]


def backproject(depth, intr):
    """Depth map [H,W] -> camera-frame points [3,H,W].

    The z row of the result is the depth map itself, bit for bit."""
    if not isinstance(depth, Tensor):
        depth = constant(depth)
    if depth.shape != (intr.height, intr.width):
        raise T.ShapeMismatch(
            f"depth shape {depth.shape} does not match {intr.height}x{intr.width}")
    dirs = constant(camera_rays(intr))
    return dirs * T.reshape(depth, (1, intr.height, intr.width))


def transform_points(points, matrix):
    """Apply a 4x4 rigid transform to points [3,H,W]."""
    if not isinstance(points, Tensor):
        points = constant(points)
    if not isinstance(matrix, Tensor):
        matrix = constant(matrix)
    if points.data.ndim != 3 or points.shape[0] != 3:
        raise T.ShapeMismatch(f"points must be [3,H,W], got {points.shape}")
    if matrix.shape != (4, 4):
        raise T.ShapeMismatch(f"transform must be 4x4, got {matrix.shape}")
    _, h, w = points.shape
    top = T.slice_axis(matrix, 0, 0, 3)
    r = T.slice_axis(top, 1, 0, 3)
    t = T.slice_axis(top, 1, 3, 4)
    flat = T.reshape(points, (3, h * w))
    moved = T.matmul(r, flat) + t
    return T.reshape(moved, (3, h, w))


def project(points, intr):
    """Camera-frame points [3,H,W] -> (normalized grid [2,H,W], z [1,H,W]).

    Depths are clamped to Z_MIN before the divide so points at or behind the
    camera produce finite coordinates; the unclamped z comes back so callers
    can mask them out as data rather than an error."""
    if not isinstance(points, Tensor):
        points = constant(points)
    x = T.slice_axis(points, 0, 0, 1)
    y = T.slice_axis(points, 0, 1, 2)
    z = T.slice_axis(points, 0, 2, 3)
    z_safe = T.clamp(z, lo=Z_MIN)
    u = intr.fx * (x / z_safe) + intr.cx
    v = intr.fy * (y / z_safe) + intr.cy
    gx = u * (2.0 / (intr.width - 1)) - 1.0
    gy = v * (2.0 / (intr.height - 1)) - 1.0
    return T.concat([gx, gy], axis=0), z


def synthesize_view(src_image, depth, t_target_to_src, intr):
    """Warp a source image into the target frame via target depth.

    Every target pixel is backprojected with its depth, moved into the source
    camera, projected, and bilinearly sampled from the source image. Returns
    (warped [C,H,W], valid [H,W]) where valid is a constant 0/1 mask marking
    pixels whose sample both landed inside the source image and sat in front
    of the source camera. Differentiable w.r.t. the source image, the depth
    map, and the transform.
    """
    if not isinstance(src_image, Tensor):
        src_image = constant(src_image)
    if src_image.data.ndim != 3:
        raise T.ShapeMismatch(f"source image must be [C,H,W], got {src_image.shape}")
    if src_image.shape[1] != intr.height or src_image.shape[2] != intr.width:
        raise T.ShapeMismatch(
            f"source image {src_image.shape} does not match camera "
            f"{intr.height}x{intr.width}")
    points = backproject(depth, intr)
    moved = transform_points(points, t_target_to_src)
    grid, z = project(moved, intr)
    warped, in_view = T.grid_sample_bilinear(src_image, grid)
    in_front = (z.data[0] > Z_MIN).astype(np.float64)
    valid = Tensor(in_view.data * in_front)
    return warped, valid


def relative_transform(pose_target, pose_src):
    """Target-camera to source-camera transform from camera-to-world poses."""
    return invert_matrix(pose_src.matrix()) @ pose_target.matrix()


def save_intrinsics(path, intr):
    with open(path, "w") as f:
        json.dump(intr.to_json(), f, indent=2)


def load_intrinsics(path):
    with open(path) as f:
        return CameraIntrinsics.from_json(json.load(f))
