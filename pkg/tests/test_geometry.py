import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.linalg import expm

from evcm.core import CameraIntrinsics, DepthMap, PoseStep
from evcm.geometry import (
    depth_pose_to_flows,
    geometry_consistency_loss,
    invert_pose,
    reproject,
    rodrigues,
    rodrigues_jacobian,
    skew,
    total_loss,
)

K = CameraIntrinsics(20.0, 20.0, 7.5, 5.5)


def random_omega(rng, max_angle=3.0):
    axis = rng.normal(size=3)
    return axis / np.linalg.norm(axis) * rng.uniform(0, max_angle)


# --- rodrigues ----------------------------------------------------------------------


def test_rodrigues_identity_and_quarter_turn():
    assert np.array_equal(rodrigues(np.zeros(3)), np.eye(3))
    rot = rodrigues([0.0, 0.0, np.pi / 2])
    assert rot @ np.array([1.0, 0.0, 0.0]) == pytest.approx([0.0, 1.0, 0.0], abs=1e-15)


def test_rodrigues_matches_matrix_exponential():
    rng = np.random.default_rng(0)
    for _ in range(200):
        omega = random_omega(rng)
        assert np.max(np.abs(rodrigues(omega) - expm(skew(omega)))) < 1e-10


def test_rodrigues_small_angle_branch_continuous():
    omega = np.array([3e-9, -2e-9, 1e-9])
    assert np.max(np.abs(rodrigues(omega) - expm(skew(omega)))) < 1e-15


@settings(max_examples=100, deadline=None)
@given(st.lists(st.floats(-1.8, 1.8), min_size=3, max_size=3))
def test_rodrigues_is_a_rotation(omega):
    rot = rodrigues(omega)
    assert np.max(np.abs(rot.T @ rot - np.eye(3))) < 1e-12
    assert abs(np.linalg.det(rot) - 1.0) < 1e-12


def test_rodrigues_jacobian_matches_differences():
    rng = np.random.default_rng(1)
    for omega in [random_omega(rng) for _ in range(5)] + [np.zeros(3)]:
        jac = rodrigues_jacobian(omega)
        for j in range(3):
            e = np.zeros(3)
            e[j] = 1e-6
            fd = (rodrigues(omega + e) - rodrigues(omega - e)) / 2e-6
            assert np.max(np.abs(jac[j] - fd)) < 1e-8


# --- reprojection ---------------------------------------------------------------------


def test_identity_pose_keeps_pixel_and_depth():
    x, y, z, ok = reproject(3.0, 4.0, 2.5, PoseStep(np.zeros(3), np.zeros(3)), K)
    assert (x, y, z, ok) == (3.0, 4.0, 2.5, True)


def test_x_translation_shift():
    k = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    x, y, _, _ = reproject(10.0, 7.0, 2.0, PoseStep(np.zeros(3), [0.1, 0.0, 0.0]), k)
    assert x - 10.0 == pytest.approx(5.0, abs=1e-12)
    assert y == pytest.approx(7.0, abs=1e-12)


def test_forward_motion_fixes_principal_point():
    x, y, z, _ = reproject(K.cx, K.cy, 3.0, PoseStep(np.zeros(3), [0.0, 0.0, -0.5]), K)
    assert (x, y) == pytest.approx((K.cx, K.cy), abs=1e-12)
    assert z == pytest.approx(2.5)


def test_behind_camera_flagged():
    *_, ok = reproject(K.cx, K.cy, 1.0, PoseStep(np.zeros(3), [0.0, 0.0, -2.0]), K)
    assert not ok


def test_round_trip_through_inverse_pose():
    rng = np.random.default_rng(2)
    worst = 0.0
    for _ in range(200):
        pose = PoseStep(random_omega(rng, 0.3), rng.normal(0, 0.2, 3))
        x, y = rng.uniform(0, 15, 50), rng.uniform(0, 11, 50)
        d = rng.uniform(1.0, 5.0, 50)
        x1, y1, z1, ok = reproject(x, y, d, pose, K)
        x2, y2, _, ok2 = reproject(x1, y1, z1, invert_pose(pose), K)
        sel = ok & ok2
        worst = max(worst, np.max(np.abs(x2 - x)[sel]), np.max(np.abs(y2 - y)[sel]))
    assert worst < 1e-9


# --- flows ------------------------------------------------------------------------


def test_identity_poses_give_zero_flow():
    poses = [PoseStep(np.zeros(3), np.zeros(3))] * 3
    flows = depth_pose_to_flows(DepthMap(np.full((12, 16), 2.0)), poses, K, [0, 10, 20, 30])
    assert not flows.u.any()


def test_translation_flow_is_uniform():
    k = CameraIntrinsics(100.0, 100.0, 0.0, 0.0)
    flows = depth_pose_to_flows(DepthMap(np.full((4, 5), 2.0)), [PoseStep(np.zeros(3), [0.1, 0, 0])],
                                k, [0, 10_000])
    assert np.allclose(flows.u[..., 0] * 0.01, 5.0, atol=1e-12, rtol=0)
    assert np.allclose(flows.u[..., 1], 0.0, atol=1e-12)


def test_half_depth_doubles_translational_flow():
    rng = np.random.default_rng(3)
    depth = rng.uniform(1, 3, (12, 16))
    pose = [PoseStep(np.zeros(3), [0.05, -0.02, 0.0])]
    far = depth_pose_to_flows(DepthMap(depth), pose, K, [0, 5000]).u
    near = depth_pose_to_flows(DepthMap(depth / 2), pose, K, [0, 5000]).u
    assert np.max(np.abs(near - 2 * far)) < 1e-9


def test_pure_rotation_flow_ignores_depth():
    rng = np.random.default_rng(4)
    pose = [PoseStep([0.01, -0.02, 0.005], np.zeros(3))]
    a = depth_pose_to_flows(DepthMap(rng.uniform(1, 3, (12, 16))), pose, K, [0, 5000]).u
    b = depth_pose_to_flows(DepthMap(rng.uniform(1, 3, (12, 16))), pose, K, [0, 5000]).u
    assert np.max(np.abs(a - b)) < 1e-9


def test_scaled_depth_and_translation_give_identical_flow():
    rng = np.random.default_rng(5)
    for _ in range(20):
        depth = rng.uniform(0.5, 4, (12, 16))
        poses = [PoseStep(rng.normal(0, 0.02, 3), rng.normal(0, 0.05, 3)) for _ in range(2)]
        s = rng.uniform(0.1, 10)
        scaled_poses = [PoseStep(p.omega, s * np.asarray(p.t)) for p in poses]
        a = depth_pose_to_flows(DepthMap(depth), poses, K, [0, 5000, 10_000]).u
        b = depth_pose_to_flows(DepthMap(s * depth), scaled_poses, K, [0, 5000, 10_000]).u
        assert np.max(np.abs(a - b)) < 1e-12 * max(1.0, np.max(np.abs(a)))


def test_invalid_reprojection_gives_zero_flow_and_mask():
    pose = [PoseStep(np.zeros(3), [0.0, 0.0, -2.0])]
    depth = np.full((12, 16), 3.0)
    depth[:, :8] = 1.0
    flows, mask = depth_pose_to_flows(DepthMap(depth), pose, K, [0, 1000], return_mask=True)
    assert not mask[0, :, :8].any() and mask[0, :, 8:].all()
    assert not flows.u[0, :, :8].any()


# --- consistency loss -----------------------------------------------------------------


def brute_force_geo_loss(d0, d1, pose, k):
    """Per-pixel loop: project, z-min by target pixel, bilinear sample d1."""
    h, w = d0.shape
    winners = {}
    for y in range(h):
        for x in range(w):
            px, py, z, ok = reproject(float(x), float(y), d0[y, x], pose, k)
            if not ok or not (-1e-9 <= px <= w - 1 + 1e-9 and -1e-9 <= py <= h - 1 + 1e-9):
                continue
            px, py = min(max(px, 0.0), w - 1.0), min(max(py, 0.0), h - 1.0)
            key = (int(np.rint(py)), int(np.rint(px)))
            if key not in winners or z < winners[key][0]:
                winners[key] = (float(z), float(px), float(py))
    terms = []
    for z, px, py in winners.values():
        x0, y0 = min(int(np.floor(px)), w - 2), min(int(np.floor(py)), h - 2)
        fx, fy = px - x0, py - y0
        interp = ((1 - fx) * (1 - fy) * d1[y0, x0] + fx * (1 - fy) * d1[y0, x0 + 1]
                  + (1 - fx) * fy * d1[y0 + 1, x0] + fx * fy * d1[y0 + 1, x0 + 1])
        terms.append(abs(z - interp) / (z + interp))
    return float(np.mean(terms)) if terms else 0.0


def smooth_depth(rng, h=12, w=16):
    ys, xs = np.mgrid[0:h, 0:w]
    return 2.0 + 0.3 * np.sin(xs / rng.uniform(2, 5)) + 0.2 * np.cos(ys / rng.uniform(2, 5))


def test_geo_loss_zero_for_identity():
    d = DepthMap(np.full((12, 16), 1.7))
    loss = geometry_consistency_loss(d, d, PoseStep(np.zeros(3), np.zeros(3)), K)
    assert loss.value == 0.0
    assert loss.terms.valid.all()


def test_geo_loss_one_third_for_doubled_depth():
    loss = geometry_consistency_loss(DepthMap(np.full((12, 16), 2.0)), DepthMap(np.full((12, 16), 1.0)),
                                     PoseStep(np.zeros(3), np.zeros(3)), K)
    assert loss.value == pytest.approx(1 / 3, abs=1e-15)


def test_geo_loss_matches_brute_force():
    rng = np.random.default_rng(6)
    for _ in range(10):
        d0, d1 = smooth_depth(rng), smooth_depth(rng)
        pose = PoseStep(rng.normal(0, 0.02, 3), rng.normal(0, 0.1, 3))
        got = geometry_consistency_loss(DepthMap(d0), DepthMap(d1), pose, K).value
        assert abs(got - brute_force_geo_loss(d0, d1, pose, K)) < 1e-10


def test_geo_loss_empty_when_nothing_visible():
    d = DepthMap(np.full((12, 16), 1.0))
    loss = geometry_consistency_loss(d, d, PoseStep(np.zeros(3), [50.0, 0.0, 0.0]), K)
    assert loss.value == 0.0 and loss.terms.empty


def plane_depth(normal, offset, k, h, w):
    """Depth of the plane ``normal . X = offset`` along every pixel ray."""
    ys, xs = np.mgrid[0:h, 0:w]
    rays = np.stack([(xs - k.cx) / k.fx, (ys - k.cy) / k.fy, np.ones((h, w))], axis=-1)
    return offset / (rays @ normal)


def test_geo_loss_symmetric_under_inverse_pose():
    k = CameraIntrinsics(30.0, 30.0, 15.5, 11.5)
    pose = PoseStep([0.0, 0.01, 0.0], [0.02, 0.0, 0.01])
    normal, offset = np.array([0.1, 0.05, 1.0]), 2.0
    rot, t = rodrigues(pose.omega), np.asarray(pose.t)
    # the same slanted plane expressed in the second camera frame
    d0 = plane_depth(normal, offset, k, 24, 32)
    d1 = plane_depth(rot @ normal, offset + (rot @ normal) @ t, k, 24, 32)
    forward = geometry_consistency_loss(DepthMap(d0), DepthMap(d1), pose, k).value
    backward = geometry_consistency_loss(DepthMap(d1), DepthMap(d0), invert_pose(pose), k).value
    assert forward < 1e-3 and backward < 1e-3
    assert abs(forward - backward) < 1e-3


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 10_000))
def test_geo_loss_bounded(seed):
    rng = np.random.default_rng(seed)
    d0 = DepthMap(rng.uniform(0.1, 10, (8, 10)))
    d1 = DepthMap(rng.uniform(0.1, 10, (8, 10)))
    pose = PoseStep(rng.normal(0, 0.05, 3), rng.normal(0, 0.2, 3))
    value = geometry_consistency_loss(d0, d1, pose, K).value
    assert 0.0 <= value < 1.0


def test_geo_loss_gradients_match_differences():
    rng = np.random.default_rng(7)
    d0, d1 = smooth_depth(rng, 8, 10), smooth_depth(rng, 8, 10)
    k = CameraIntrinsics(12.0, 12.0, 4.5, 3.5)
    vec = np.array([0.01, -0.02, 0.005, 0.05, 0.02, 0.03])

    def value(a, b, v):
        return geometry_consistency_loss(DepthMap(a), DepthMap(b), PoseStep.from_vector(v), k).value

    g = geometry_consistency_loss(DepthMap(d0), DepthMap(d1), PoseStep.from_vector(vec), k, need_grad=True)
    h = 1e-7
    for j in range(6):
        e = np.zeros(6)
        e[j] = h
        assert (value(d0, d1, vec + e) - value(d0, d1, vec - e)) / (2 * h) == pytest.approx(g.d_pose[j], abs=1e-6)
    for (r, c) in [(3, 4), (5, 2), (1, 7)]:
        e = np.zeros_like(d0)
        e[r, c] = h
        assert (value(d0 + e, d1, vec) - value(d0 - e, d1, vec)) / (2 * h) == pytest.approx(g.d_d0[r, c], abs=1e-6)
        assert (value(d0, d1 + e, vec) - value(d0, d1 - e, vec)) / (2 * h) == pytest.approx(g.d_d1[r, c], abs=1e-6)


def test_total_loss():
    assert total_loss(1.0, 0.0, 0.05) == 1.0
    assert total_loss(0.2, 0.4, 0.05) == pytest.approx(0.22, abs=1e-15)
    assert total_loss(0.2, 0.4) == total_loss(0.2, 0.4, 0.05)
