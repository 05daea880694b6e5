import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from evcm.core import CameraIntrinsics, FlowSequence, PoseStep, read_events, write_events
from evcm.synth import Plane, SceneSpec, generate, ground_truth_flows, translation_scene
from evcm.warp import WarpWindow, loss_and_grad


def loss(events, flows):
    return loss_and_grad(WarpWindow(events, flows), "padded", False)[0]


def test_static_camera_events_stay_on_one_pixel():
    spec = translation_scene(32, 24, velocity=(0, 0, 0), density=0.02, bins=2, seed=1)
    events, _, flows = generate(spec)
    assert np.abs(flows.u).max() < 1e-9
    assert len(events) > 0
    # every feature fires at one pixel, so there are at most as many pixels as features
    n_features = round(0.02 * 32 * 24)
    assert len(set(zip(events.x.tolist(), events.y.tolist()))) <= n_features


def test_x_translation_gives_uniform_flow_and_sharper_loss():
    spec = translation_scene(32, 24, focal=30.0, velocity=(2.0, 0, 0), bins=4, seed=2)
    events, _, flows = generate(spec)
    expected = -2.0 * 30.0 / 1.0  # px/s, points move opposite to the camera
    # the default plane is grown to stay under the whole frame for the whole window
    assert np.allclose(flows.u[..., 0], expected, rtol=1e-12)
    assert np.allclose(flows.u[..., 1], 0.0, atol=1e-12)
    zero = FlowSequence.zeros(4, 24, 32, flows.edges[0], flows.edges[-1])
    assert loss(events, flows) < loss(events, zero)


def test_two_planes_flow_ratio():
    planes = [Plane(1.0, (0, 0, 16, 24), 0.1), Plane(4.0, (16, 0, 32, 24), 0.1)]
    spec = translation_scene(32, 24, velocity=(1.0, 0, 0), planes=planes, bins=1)
    _, depth, flows = generate(spec)
    near, far = flows.u[0, :, :16, 0], flows.u[0, :, 16:, 0]
    assert np.allclose(near / far, 4.0, rtol=1e-12)
    assert np.allclose(depth.d[:, :16], 1.0) and np.allclose(depth.d[:, 16:], 4.0)


def test_events_satisfy_slice_invariants():
    spec = translation_scene(32, 24, velocity=(3.0, -1.0, 0.2), bins=3, seed=4)
    events, _, _ = generate(spec)
    assert np.all(np.diff(events.t) >= 0)
    assert events.x.min() >= 0 and events.x.max() < 32
    assert events.y.min() >= 0 and events.y.max() < 24
    assert set(np.unique(events.p)) <= {-1, 1}
    assert events.t.min() >= events.t_start and events.t.max() < events.t_end


def test_alternating_polarity_per_feature():
    spec = translation_scene(16, 16, velocity=(0, 0, 0), density=1 / 256, bins=1, event_rate=500, seed=5)
    events, _, _ = generate(spec)
    assert len(events) > 2
    assert np.all(events.p[1:] == -events.p[:-1])


def test_features_leaving_frame_stop():
    plane = [Plane(1.0, (0, 0, 16, 16), 0.15)]
    spec = translation_scene(16, 16, focal=16.0, velocity=(20.0, 0, 0), planes=plane, bins=2, bin_us=10_000, seed=6)
    events, _, flows = generate(spec)
    assert not flows.u[1, :, -3:].any()  # nothing left to move there
    # the scene slides 6.4 px left per bin; late events only come from the right part
    late = events.t >= 10_000
    assert events.x[late].max() < 16 - 3


def test_deterministic_under_seed(tmp_path):
    spec = translation_scene(32, 24, velocity=(1.0, 0.5, 0), bins=3, seed=9)
    a, _, _ = generate(spec)
    b, _, _ = generate(spec)
    write_events(a, tmp_path / "a.evt1")
    write_events(b, tmp_path / "b.evt1")
    assert (tmp_path / "a.evt1").read_bytes() == (tmp_path / "b.evt1").read_bytes()
    c, _, _ = generate(translation_scene(32, 24, velocity=(1.0, 0.5, 0), bins=3, seed=10))
    assert not (len(a) == len(c) and np.array_equal(a.t, c.t))


def test_rotation_flow_matches_finite_displacement():
    k = CameraIntrinsics(30.0, 30.0, 15.5, 11.5)
    pose = PoseStep([0.0, 0.02, 0.0], [0.0, 0.0, 0.0])
    spec = SceneSpec(32, 24, k, [Plane(2.0, (-20, -20, 52, 44), 0.1)], [pose], 10_000)
    flows = ground_truth_flows(spec)
    # rotating about +y carries points toward +x: about fx * wy / dt near the centre
    assert flows.u[0, 11, 15, 0] == pytest.approx(30.0 * 0.02 / 0.01, rel=1e-3)


def test_scene_json_round_trip(tmp_path):
    spec = translation_scene(32, 24, velocity=(1.0, 0, 0), bins=2)
    spec.save(tmp_path / "s.json")
    back = SceneSpec.load(tmp_path / "s.json")
    assert back.to_dict() == spec.to_dict()
    cfg = json.loads((tmp_path / "s.json").read_text())
    cfg["unexpected"] = 1
    with pytest.raises(ValueError):
        SceneSpec.from_dict(cfg)


def test_single_pose_shorthand():
    cfg = {"width": 16, "height": 12, "intrinsics": {"fx": 10, "fy": 10, "cx": 7.5, "cy": 5.5},
           "planes": [{"depth": 1.0, "region": [0, 0, 16, 12], "density": 0.1}],
           "pose": [0, 0, 0, 0.01, 0, 0], "bins": 3, "duration_us": 30_000}
    spec = SceneSpec.from_dict(cfg)
    assert spec.bins == 3 and len(spec.poses) == 3


@pytest.mark.parametrize("bad", [
    dict(depth=0.0), dict(density=0.0), dict(region=(4, 0, 4, 8)),
])
def test_invalid_planes(bad):
    args = dict(depth=1.0, region=(0, 0, 8, 8), density=0.1) | bad
    with pytest.raises(ValueError):
        Plane(**args)


def test_invalid_specs():
    k = CameraIntrinsics(10.0, 10.0, 3.5, 3.5)
    plane = [Plane(1.0, (0, 0, 8, 8), 0.1)]
    pose = [PoseStep(np.zeros(3), np.zeros(3))]
    with pytest.raises(ValueError):
        SceneSpec(8, 8, k, plane, pose, 0)
    with pytest.raises(ValueError):
        SceneSpec(8, 8, k, plane, pose * 3, 10_000)  # 10000 us does not split into 3 bins
    with pytest.raises(ValueError):
        SceneSpec(8, 8, k, [], pose, 10_000)


def test_no_feature_in_frame_gives_empty_stream(tmp_path):
    k = CameraIntrinsics(10.0, 10.0, 3.5, 3.5)
    spec = SceneSpec(8, 8, k, [Plane(1.0, (0, 0, 8, 8), 0.1)], [PoseStep(np.zeros(3), [5.0, 0, 0])], 10_000)
    events, _, _ = generate(spec)
    write_events(events, tmp_path / "e.evt1")
    assert len(read_events(tmp_path / "e.evt1")) == len(events)


@settings(max_examples=15, deadline=None)
@given(seed=st.integers(0, 10_000), speed=st.floats(10.0, 200.0, exclude_min=True),
       angle=st.floats(0, 2 * np.pi))
def test_ground_truth_flow_beats_zero_flow(seed, speed, angle):
    # default window: 10 bins of 10 ms
    velocity = speed / 30.0 * np.array([np.cos(angle), np.sin(angle), 0.0])
    spec = translation_scene(32, 24, focal=30.0, velocity=velocity, bins=10, bin_us=10_000,
                             event_rate=500, density=0.1, seed=seed)
    events, _, flows = generate(spec)
    zero = FlowSequence.zeros(10, 24, 32, flows.edges[0], flows.edges[-1])
    assert loss(events, flows) < loss(events, zero)
