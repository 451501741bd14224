import math

import numpy as np
import pytest

from necksim import geometry as geo


DEG = math.pi / 180.0


def test_rot6_decode_identity_fixed_point():
    mat = geo.rot6_decode([1, 0, 0, 0, 1, 0])
    np.testing.assert_allclose(mat, np.eye(3), atol=1e-12)


def test_rot6_decode_scale_removed():
    mat = geo.rot6_decode([2, 0, 0, 0, 3, 0])
    np.testing.assert_allclose(mat, np.eye(3), atol=1e-12)


def test_rot6_encode_identity():
    np.testing.assert_allclose(geo.rot6_encode(np.eye(3)), [1, 0, 0, 0, 1, 0], atol=0)


def test_rot6_encode_yaw90_reads_off_columns():
    mat = geo.rot_z(math.pi / 2)
    enc = geo.rot6_encode(mat)
    np.testing.assert_allclose(enc, np.concatenate([mat[:, 0], mat[:, 1]]), atol=0)


def test_rot6_roundtrip_1000_random_rotations():
    rng = np.random.default_rng(0)
    for _ in range(1000):
        mat = geo.random_rotation(rng)
        back = geo.rot6_decode(geo.rot6_encode(mat))
        assert np.max(np.abs(back - mat)) < 1e-9


def test_rot6_decode_output_is_rotation():
    rng = np.random.default_rng(1)
    for _ in range(200):
        v = rng.normal(size=6)
        mat = geo.rot6_decode(v)
        assert geo.is_rotation_matrix(mat, tol=1e-9)


def test_rot6_scale_invariance():
    rng = np.random.default_rng(2)
    for _ in range(100):
        v = rng.normal(size=6)
        s1, s2 = rng.uniform(0.1, 10.0, size=2)
        scaled = np.concatenate([s1 * v[:3], s2 * v[3:]])
        np.testing.assert_allclose(geo.rot6_decode(scaled), geo.rot6_decode(v), atol=1e-9)


def test_rot6_degenerate_inputs_raise():
    with pytest.raises(geo.DegenerateInput):
        geo.rot6_decode([0, 0, 0, 0, 1, 0])
    with pytest.raises(geo.DegenerateInput):
        geo.rot6_decode([1, 0, 0, 2, 0, 0])  # parallel hints


def test_make_intrinsics_paper_scale():
    K = geo.make_intrinsics(1280, 720, 108 * DEG, 57 * DEG)
    # oracle: fx = 1280/(2 tan 54deg), fy = 720/(2 tan 28.5deg)
    assert K.fx == pytest.approx(464.987218, abs=1e-4)
    assert K.fy == pytest.approx(663.037519, abs=1e-4)
    assert (K.cx, K.cy) == (640.0, 360.0)


def test_make_intrinsics_unit_tan():
    K = geo.make_intrinsics(2, 2, math.pi / 2, math.pi / 2)
    assert K.fx == pytest.approx(1.0, abs=1e-12)
    assert K.fy == pytest.approx(1.0, abs=1e-12)


def test_make_intrinsics_desk_scale():
    K = geo.make_intrinsics(256, 144, 108 * DEG, 57 * DEG)
    assert K.fx == pytest.approx(92.997444, abs=1e-4)


def test_make_intrinsics_rejects_bad_fov():
    with pytest.raises(geo.InvalidFov):
        geo.make_intrinsics(100, 100, math.pi, 1.0)
    with pytest.raises(geo.InvalidFov):
        geo.make_intrinsics(100, 100, 1.0, 0.0)
    with pytest.raises(geo.InvalidFov):
        geo.make_intrinsics(0, 100, 1.0, 1.0)


@pytest.fixture
def K():
    return geo.make_intrinsics(1280, 720, 108 * DEG, 57 * DEG)


@pytest.fixture
def level_pose():
    return geo.neck_to_camera_pose(geo.NeckPose(0.0, 0.0), [0.0, 0.0, 0.0])


def test_project_optical_axis(K, level_pose):
    # camera looks along +y world; a point 1 m ahead lands on the center
    pix = geo.project_point(K, level_pose, [0.0, 1.0, 0.0])
    assert pix == pytest.approx((K.cx, K.cy), abs=1e-9)


def test_project_hfov_boundary_hits_border(K, level_pose):
    d = 2.5
    x = math.tan(K.hfov / 2) * d
    pix = geo.project_point(K, level_pose, [x, d, 0.0])
    assert pix[0] == pytest.approx(K.width, abs=1e-6)
    pix = geo.project_point(K, level_pose, [-x, d, 0.0])
    assert pix[0] == pytest.approx(0.0, abs=1e-6)


def test_project_vfov_boundary_hits_border(K, level_pose):
    d = 1.7
    z = math.tan(K.vfov / 2) * d
    # image y grows downward; a point below the axis (world -z) maps to y=H
    pix = geo.project_point(K, level_pose, [0.0, d, -z])
    assert pix[1] == pytest.approx(K.height, abs=1e-6)
    pix = geo.project_point(K, level_pose, [0.0, d, z])
    assert pix[1] == pytest.approx(0.0, abs=1e-6)


def test_project_behind_camera(K, level_pose):
    assert geo.project_point(K, level_pose, [0.0, -1.0, 0.0]) is None


def test_neck_pose_limits():
    geo.NeckPose(1.2, -1.2)
    with pytest.raises(geo.LimitExceeded):
        geo.NeckPose(1.3, 0.0)
    with pytest.raises(geo.LimitExceeded):
        geo.NeckPose(0.0, 0.1)  # pitch up not allowed
    with pytest.raises(geo.LimitExceeded):
        geo.NeckPose(0.0, -1.3)


def test_neck_zero_is_base_orientation():
    pose = geo.neck_to_camera_pose(geo.NeckPose(0, 0), [0, 0, 0])
    np.testing.assert_allclose(pose.orientation, geo.BASE_ORIENTATION, atol=1e-12)


def test_neck_yaw_mirror_symmetry():
    left = geo.neck_to_camera_pose(geo.NeckPose(-1.2, 0), [0, 0, 0]).orientation
    right = geo.neck_to_camera_pose(geo.NeckPose(1.2, 0), [0, 0, 0]).orientation
    # mirror about the x=0 plane: forward axes reflect, M R M with M=diag(-1,1,1)
    mirror = np.diag([-1.0, 1.0, 1.0])
    fwd_l = left[:, 2]
    fwd_r = right[:, 2]
    np.testing.assert_allclose(mirror @ fwd_l, fwd_r, atol=1e-12)


def test_neck_compound_matches_hand_product():
    yaw, pitch = 0.3, -0.2
    pose = geo.neck_to_camera_pose(geo.NeckPose(yaw, pitch), [0, 0, 0])
    cy, sy = math.cos(-yaw), math.sin(-yaw)
    cp, sp = math.cos(pitch), math.sin(pitch)
    rz = np.array([[cy, -sy, 0], [sy, cy, 0], [0, 0, 1]])
    rx = np.array([[1, 0, 0], [0, cp, -sp], [0, sp, cp]])
    expected = rz @ rx @ geo.BASE_ORIENTATION
    np.testing.assert_allclose(pose.orientation, expected, atol=1e-12)
    assert geo.is_rotation_matrix(pose.orientation)


def test_sphere_on_axis_in_view(K, level_pose):
    assert geo.sphere_view_status(K, level_pose, [0, 1.0, 0], 0.05) == geo.IN_VIEW


def test_sphere_beyond_half_angle_outside(K, level_pose):
    d = 1.0
    r = 0.05
    ang = K.hfov / 2 + math.asin(r / d) + 0.02
    center = [d * math.sin(ang), d * math.cos(ang), 0.0]
    assert geo.sphere_view_status(K, level_pose, center, r) == geo.OUTSIDE


def test_sphere_straddling_right_plane_partial(K, level_pose):
    # center exactly on the right frustum plane: X = tan(hfov/2) * Z
    d = 1.0
    center = [math.tan(K.hfov / 2) * d, d, 0.0]
    assert geo.sphere_view_status(K, level_pose, center, 0.05) == geo.PARTIAL


def test_sphere_behind_outside(K, level_pose):
    assert geo.sphere_view_status(K, level_pose, [0, -2.0, 0], 0.05) == geo.OUTSIDE


def test_decoupled_plane_paper_size():
    K = geo.make_intrinsics(1280, 720, 108 * DEG, 57 * DEG)
    plane = geo.decoupled_plane(geo.BASE_ORIENTATION, [0, 0, 0], 1.0, K)
    assert plane.half_width == pytest.approx(1.3763819, abs=1e-6)
    assert plane.half_height == pytest.approx(0.5429557, abs=1e-6)
    np.testing.assert_allclose(plane.center, [0, 1.0, 0], atol=1e-12)


def test_decoupled_plane_scales_with_distance(K):
    p1 = geo.decoupled_plane(np.eye(3), [0, 0, 0], 1.0, K)
    p2 = geo.decoupled_plane(np.eye(3), [0, 0, 0], 2.0, K)
    np.testing.assert_allclose(p2.center, [0, 0, 2.0], atol=1e-12)
    assert p2.half_width == pytest.approx(2 * p1.half_width)
    assert p2.half_height == pytest.approx(2 * p1.half_height)


def test_plane_ignores_head_orientation(K):
    # the decoupling: same camera orientation -> identical plane, no head input
    cam = geo.neck_to_camera_pose(geo.NeckPose(0.4, -0.3), [0, 0, 1.0]).orientation
    a = geo.decoupled_plane(cam, [0, 0, 1.0], 1.0, K)
    b = geo.decoupled_plane(cam, [0, 0, 1.0], 1.0, K)
    np.testing.assert_array_equal(a.center, b.center)
    np.testing.assert_array_equal(a.orientation, b.orientation)


def test_plane_eye_position_recovered(K):
    cam = geo.neck_to_camera_pose(geo.NeckPose(-0.7, -0.9), [0.3, -0.2, 0.5]).orientation
    plane = geo.decoupled_plane(cam, [0.3, -0.2, 0.5], 1.0, K)
    np.testing.assert_allclose(plane.eye_position(), [0.3, -0.2, 0.5], atol=1e-12)


def test_plane_corners_aligned_head_fills_display(K):
    cam = geo.neck_to_camera_pose(geo.NeckPose(0.5, -0.4), [0, 0, 1.0])
    plane = geo.decoupled_plane(cam.orientation, [0, 0, 1.0], 1.0, K)
    corners = geo.plane_corners_in_head_view(plane, cam.orientation, K)
    expected = np.array([[0, 0], [K.width, 0], [K.width, K.height], [0, K.height]], dtype=float)
    np.testing.assert_allclose(corners, expected, atol=1e-9)


def test_plane_corners_head_yaw_right_shifts_left(K):
    cam = geo.neck_to_camera_pose(geo.NeckPose(0.0, 0.0), [0, 0, 1.0])
    plane = geo.decoupled_plane(cam.orientation, [0, 0, 1.0], 1.0, K)
    aligned = geo.plane_corners_in_head_view(plane, cam.orientation, K)
    head = geo.neck_to_camera_pose(geo.NeckPose(0.2, 0.0), [0, 0, 1.0]).orientation
    yawed = geo.plane_corners_in_head_view(plane, head, K)
    assert np.all(yawed[:, 0] < aligned[:, 0])


def test_plane_corners_behind_raises(K):
    cam = geo.neck_to_camera_pose(geo.NeckPose(0.0, 0.0), [0, 0, 1.0])
    plane = geo.decoupled_plane(cam.orientation, [0, 0, 1.0], 1.0, K)
    flipped = geo.rot_z(math.pi) @ cam.orientation
    with pytest.raises(geo.PartiallyBehind):
        geo.plane_corners_in_head_view(plane, flipped, K)


def test_rotate_towards_clamps_and_reaches():
    rng = np.random.default_rng(3)
    cur = geo.random_rotation(rng)
    tgt = geo.random_rotation(rng)
    stepped = geo.rotate_towards(cur, tgt, 0.1)
    rel = cur.T @ stepped
    assert geo.rotation_angle(rel) <= 0.1 + 1e-9
    # iterating converges to the target
    m = cur
    for _ in range(100):
        m = geo.rotate_towards(m, tgt, 0.1)
    np.testing.assert_allclose(m, tgt, atol=1e-9)
