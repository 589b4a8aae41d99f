import json
import math

import numpy as np
import pytest

from deskdepth import geometry as G
from deskdepth import tensor as T
from deskdepth.tensor import Tape, constant


def small_camera(w=10, h=8, f=12.0):
    return G.CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2, cy=(h - 1) / 2,
                              width=w, height=h)


def random_pose_params(rng, rot_scale=0.5, trans_scale=0.5):
    w = rng.normal(size=3)
    w = w / np.linalg.norm(w) * rng.uniform(0.01, rot_scale)
    return np.concatenate([w, rng.normal(scale=trans_scale, size=3)])


# ---------------------------------------------------------------------------
# rotation construction

def test_rotation_matches_scipy():
    scipy_rot = pytest.importorskip("scipy.spatial.transform")
    rng = np.random.default_rng(0)
    for _ in range(50):
        p = random_pose_params(rng, rot_scale=3.0)
        m = G.pose_to_matrix(constant(p)).data
        expect = scipy_rot.Rotation.from_rotvec(p[:3]).as_matrix()
        assert np.allclose(m[:3, :3], expect, atol=1e-12)
        assert np.allclose(m[:3, 3], p[3:], atol=0)
        assert np.array_equal(m[3], [0.0, 0.0, 0.0, 1.0])


def test_rotation_is_orthonormal():
    rng = np.random.default_rng(1)
    for _ in range(50):
        p = random_pose_params(rng, rot_scale=3.0)
        r = G.pose_to_matrix(constant(p)).data[:3, :3]
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert abs(np.linalg.det(r) - 1.0) < 1e-12


def test_numpy_twin_is_bit_identical():
    rng = np.random.default_rng(2)
    for _ in range(50):
        p = random_pose_params(rng, rot_scale=3.0)
        assert np.array_equal(G.pose_to_matrix(constant(p)).data, G.pose_matrix_np(p))
    # both sides of the small-angle branch
    for scale in (0.0, 1e-9, 1e-7, 1e-5):
        p = np.array([scale, 0.0, 0.0, 0.1, 0.2, 0.3])
        assert np.array_equal(G.pose_to_matrix(constant(p)).data, G.pose_matrix_np(p))


def test_small_angle_series_matches_high_precision():
    mpmath = pytest.importorskip("mpmath")
    mpmath.mp.dps = 50
    for theta_sq in (1e-16, 1e-13, 0.99e-12):
        a, b = G._rotation_coeffs_np(theta_sq)
        t = mpmath.sqrt(mpmath.mpf(theta_sq))
        a_true = float(mpmath.sin(t) / t)
        b_true = float((1 - mpmath.cos(t)) / (t * t))
        assert abs(a - a_true) < 1e-16
        assert abs(b - b_true) < 1e-16
    assert np.array_equal(G.pose_matrix_np(np.zeros(6)), np.eye(4))


def test_branch_switch_has_no_matrix_jump():
    # the exact-formula b loses digits to cancellation near the threshold, but
    # b scales entries of size theta^2, so the matrix itself stays smooth
    axis = np.array([0.36, -0.48, 0.8])
    theta_sq = 1.0000001e-12
    theta = math.sqrt(theta_sq)
    a_ex, b_ex = G._rotation_coeffs_np(theta_sq)  # exact branch
    a_se = 1.0 - theta_sq / 6.0 + theta_sq * theta_sq / 120.0
    b_se = 0.5 - theta_sq / 24.0 + theta_sq * theta_sq / 720.0
    k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]]) * theta
    r_ex = np.eye(3) + a_ex * k + b_ex * (k @ k)
    r_se = np.eye(3) + a_se * k + b_se * (k @ k)
    assert np.abs(r_ex - r_se).max() < 1e-15


def test_pose_matrix_gradient_fd():
    rng = np.random.default_rng(3)
    for p0 in (random_pose_params(rng), np.zeros(6), np.array([0, 0, 0, 0.1, 0, 0.2])):
        proj = rng.normal(size=(4, 4))
        tape = Tape()
        leaf = tape.leaf(p0)
        tape.backward(T.reduce_sum(G.pose_to_matrix(leaf) * constant(proj)))
        grad = tape.grad(leaf)
        h = 1e-6
        for i in range(6):
            bump = p0.copy()
            bump[i] += h
            hi = float((G.pose_matrix_np(bump) * proj).sum())
            bump[i] -= 2 * h
            lo = float((G.pose_matrix_np(bump) * proj).sum())
            num = (hi - lo) / (2 * h)
            assert abs(grad[i] - num) <= 1e-6 + 1e-4 * abs(num)


def test_matrix_pose_round_trip():
    rng = np.random.default_rng(4)
    for _ in range(100):
        w = rng.normal(size=3)
        w = w / np.linalg.norm(w) * rng.uniform(1e-9, 3.1)
        t = rng.normal(size=3)
        pose = G.Pose(w, t)
        back = G.matrix_to_pose(pose.matrix())
        assert np.allclose(back.axis_angle, w, atol=1e-9)
        assert np.allclose(back.translation, t, atol=0)


def test_invert_matrix():
    rng = np.random.default_rng(5)
    for _ in range(20):
        m = G.pose_matrix_np(random_pose_params(rng, rot_scale=3.0))
        assert np.allclose(G.invert_matrix(m) @ m, np.eye(4), atol=1e-12)
        assert np.allclose(m @ G.invert_matrix(m), np.eye(4), atol=1e-12)


def test_pose_validation():
    with pytest.raises(ValueError):
        G.Pose(np.array([math.pi, 0.0, 0.0]), np.zeros(3))
    with pytest.raises(ValueError):
        G.Pose(np.zeros(2), np.zeros(3))
    G.Pose(np.array([3.1, 0.0, 0.0]), np.zeros(3))  # just under pi is fine


def test_pose_and_intrinsics_json_round_trip(tmp_path):
    pose = G.Pose(np.array([0.1, -0.2, 0.05]), np.array([1.0, 2.0, 3.0]))
    back = G.Pose.from_json(json.loads(json.dumps(pose.to_json())))
    assert np.array_equal(back.axis_angle, pose.axis_angle)
    assert np.array_equal(back.translation, pose.translation)
    assert set(pose.to_json()) == {"axis_angle", "translation"}

    intr = small_camera()
    p = tmp_path / "intr.json"
    G.save_intrinsics(p, intr)
    assert G.load_intrinsics(p) == intr
    assert set(intr.to_json()) == {"fx", "fy", "cx", "cy", "width", "height"}


def test_intrinsics_validation():
    with pytest.raises(ValueError):
        G.CameraIntrinsics(fx=-1.0, fy=1.0, cx=0.0, cy=0.0, width=4, height=4)
    with pytest.raises(ValueError):
        G.CameraIntrinsics(fx=1.0, fy=1.0, cx=0.0, cy=0.0, width=1, height=4)


# ---------------------------------------------------------------------------
# projection round trips

def test_backproject_z_row_is_depth_bit_exact():
    intr = small_camera()
    rng = np.random.default_rng(6)
    depth = rng.uniform(1.0, 5.0, size=(intr.height, intr.width))
    pts = G.backproject(constant(depth), intr).data
    assert np.array_equal(pts[2], depth)


def test_backproject_loop_oracle():
    intr = small_camera()
    rng = np.random.default_rng(7)
    depth = rng.uniform(1.0, 5.0, size=(intr.height, intr.width))
    pts = G.backproject(constant(depth), intr).data
    for v in (0, 3, 7):
        for u in (0, 4, 9):
            d = depth[v, u]
            assert abs(pts[0, v, u] - d * (u - intr.cx) / intr.fx) < 1e-15
            assert abs(pts[1, v, u] - d * (v - intr.cy) / intr.fy) < 1e-15


def test_project_backproject_identity_grid():
    intr = small_camera()
    rng = np.random.default_rng(8)
    depth = rng.uniform(0.5, 8.0, size=(intr.height, intr.width))
    grid, z = G.project(G.backproject(constant(depth), intr), intr)
    ys, xs = np.meshgrid(np.arange(intr.height), np.arange(intr.width), indexing="ij")
    expect = np.stack([2 * xs / (intr.width - 1) - 1.0, 2 * ys / (intr.height - 1) - 1.0])
    assert np.allclose(grid.data, expect, atol=1e-12)
    assert np.array_equal(z.data[0], depth)


def test_project_clamps_shallow_depth():
    intr = small_camera()
    pts = np.zeros((3, intr.height, intr.width))
    pts[2] = -1.0  # behind the camera
    grid, z = G.project(constant(pts), intr)
    assert np.all(np.isfinite(grid.data))
    assert np.all(z.data == -1.0)  # z itself comes back unclamped


def test_transform_points_matches_direct():
    intr = small_camera()
    rng = np.random.default_rng(9)
    depth = rng.uniform(1.0, 5.0, size=(intr.height, intr.width))
    m = G.pose_matrix_np(random_pose_params(rng))
    pts = G.backproject(constant(depth), intr)
    moved = G.transform_points(pts, constant(m)).data
    flat = pts.data.reshape(3, -1)
    expect = (m[:3, :3] @ flat + m[:3, 3:4]).reshape(3, intr.height, intr.width)
    assert np.allclose(moved, expect, atol=1e-12)


# ---------------------------------------------------------------------------
# view synthesis

def test_identity_warp_reproduces_image_bit_exact():
    intr = small_camera()
    rng = np.random.default_rng(10)
    img = rng.uniform(size=(3, intr.height, intr.width))
    depth = rng.uniform(1.0, 5.0, size=(intr.height, intr.width))
    warped, valid = G.synthesize_view(constant(img), constant(depth),
                                      constant(np.eye(4)), intr)
    assert np.array_equal(warped.data, img)
    assert np.array_equal(valid.data, np.ones((intr.height, intr.width)))


def test_fronto_parallel_shift_oracle():
    # plane at constant depth, pure x translation: every valid pixel samples
    # the source at u + fx*tx/d
    intr = small_camera(w=24, h=8, f=20.0)
    d, tx = 2.0, 0.13
    shift = intr.fx * tx / d
    ys, xs = np.meshgrid(np.arange(intr.height, dtype=float),
                         np.arange(intr.width, dtype=float), indexing="ij")
    img = (0.25 + 0.5 * xs / intr.width + 0.25 * ys / intr.height)[None]
    depth = np.full((intr.height, intr.width), d)
    m = np.eye(4)
    m[0, 3] = tx
    warped, valid = G.synthesize_view(constant(img), constant(depth), constant(m), intr)
    expect = 0.25 + 0.5 * (xs + shift) / intr.width + 0.25 * ys / intr.height
    mask = valid.data == 1.0
    assert mask.sum() > 0.5 * mask.size
    assert np.abs(warped.data[0][mask] - expect[mask]).max() < 1e-9
    # pixels whose source sample would fall past the right edge are invalid
    assert not mask[:, -1].any()


def test_behind_camera_pixels_marked_invalid():
    intr = small_camera()
    img = np.ones((1, intr.height, intr.width))
    depth = np.full((intr.height, intr.width), 0.5)
    m = np.eye(4)
    m[2, 3] = -0.6  # pushes every point behind the source camera
    _, valid = G.synthesize_view(constant(img), constant(depth), constant(m), intr)
    assert np.all(valid.data == 0.0)


def _fd_safe_weights(rng, img, depth, params, intr):
    """Projection weights restricted to pixels far from sampling kinks."""
    grid, z = G.project(G.transform_points(G.backproject(constant(depth), intr),
                                           constant(G.pose_matrix_np(params))), intr)
    px = (grid.data[0] + 1) * 0.5 * (intr.width - 1)
    py = (grid.data[1] + 1) * 0.5 * (intr.height - 1)
    fx_ok = (np.abs(px - np.round(px)) > 0.1) & (px > 0.5) & (px < intr.width - 1.5)
    fy_ok = (np.abs(py - np.round(py)) > 0.1) & (py > 0.5) & (py < intr.height - 1.5)
    safe = fx_ok & fy_ok & (z.data[0] > G.Z_MIN + 0.1)
    assert safe.sum() > 10
    return rng.normal(size=img.shape) * safe


def test_synthesize_view_gradient_fd_depth_and_pose():
    intr = small_camera()
    rng = np.random.default_rng(11)
    img = rng.uniform(size=(2, intr.height, intr.width))
    depth = rng.uniform(1.5, 3.0, size=(intr.height, intr.width))
    params = np.array([0.02, -0.015, 0.01, 0.08, -0.05, 0.03])
    weights = _fd_safe_weights(rng, img, depth, params, intr)

    tape = Tape()
    depth_leaf = tape.leaf(depth)
    pose_leaf = tape.leaf(params)
    warped, _ = G.synthesize_view(constant(img), depth_leaf,
                                  G.pose_to_matrix(pose_leaf), intr)
    tape.backward(T.reduce_sum(warped * constant(weights)))
    gd, gp = tape.grad(depth_leaf), tape.grad(pose_leaf)

    def scalar(d, p):
        w, _ = G.synthesize_view(constant(img), constant(d),
                                 constant(G.pose_matrix_np(p)), intr)
        return float((w.data * weights).sum())

    h = 1e-6
    for i in range(6):
        bump = params.copy()
        bump[i] += h
        hi = scalar(depth, bump)
        bump[i] -= 2 * h
        lo = scalar(depth, bump)
        num = (hi - lo) / (2 * h)
        assert abs(gp[i] - num) <= 1e-6 + 1e-4 * abs(num)

    idx = rng.choice(depth.size, size=12, replace=False)
    for i in idx:
        bump = depth.copy().reshape(-1)
        bump[i] += h
        hi = scalar(bump.reshape(depth.shape), params)
        bump[i] -= 2 * h
        lo = scalar(bump.reshape(depth.shape), params)
        num = (hi - lo) / (2 * h)
        assert abs(gd.reshape(-1)[i] - num) <= 1e-6 + 1e-4 * abs(num)


def test_relative_transform_composition():
    rng = np.random.default_rng(12)
    pa = G.Pose(*np.split(random_pose_params(rng), 2))
    pb = G.Pose(*np.split(random_pose_params(rng), 2))
    m = G.relative_transform(pa, pb)
    # a point expressed in camera-a coordinates lands in camera-b coordinates
    x_world = pa.matrix() @ np.array([0.3, -0.2, 2.0, 1.0])
    x_b = G.invert_matrix(pb.matrix()) @ x_world
    assert np.allclose(m @ np.array([0.3, -0.2, 2.0, 1.0]), x_b, atol=1e-12)
