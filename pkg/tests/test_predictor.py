import math

import numpy as np
import pytest

from evcm.core import CameraIntrinsics, PoseStep
from evcm.gradcheck import check_predictor_gradient, random_predictor_instance
from evcm.predictor import DirectPredictor, softplus, softplus_grad, upsample_matrix


def test_zero_params_decode_to_ln2():
    pred = DirectPredictor.create(16, 24, bins=2)
    depth, poses = pred.decode()
    assert depth.shape == (16, 24)
    assert np.allclose(depth.d, math.log(2.0), rtol=0, atol=1e-15)
    assert len(poses) == 2 and all(isinstance(p, PoseStep) for p in poses)


def test_large_negative_params_stay_positive():
    pred = DirectPredictor(np.full((2, 3), -800.0), np.zeros((1, 6)), 16, 24)
    d = pred.depth_array()
    assert np.all(d > 0) and np.all(np.isfinite(d))


def test_factor_one_is_elementwise_softplus():
    rng = np.random.default_rng(0)
    params = rng.normal(0, 3, (5, 7))
    pred = DirectPredictor(params, np.zeros((1, 6)), 5, 7)
    scalar = np.vectorize(lambda p: math.log1p(math.exp(p)) if p < 30 else p + math.log1p(math.exp(-p)))
    assert np.max(np.abs(pred.depth_array() - scalar(params))) < 1e-14


def test_parameter_count():
    pred = DirectPredictor.create(48, 64, bins=10)
    assert pred.depth_params.shape == (6, 8)
    assert pred.n_params == 6 * 8 + 6 * 10


def test_softplus_grad_matches_differences():
    p = np.linspace(-40, 40, 81)
    fd = (softplus(p + 1e-6) - softplus(p - 1e-6)) / 2e-6
    assert np.max(np.abs(softplus_grad(p) - fd)) < 1e-8


def test_upsample_rows_sum_to_one():
    for n_out, n_in in [(48, 6), (10, 1), (7, 7), (5, 3)]:
        m = upsample_matrix(n_out, n_in)
        assert np.allclose(m.sum(axis=1), 1.0)
    assert np.array_equal(upsample_matrix(7, 7), np.eye(7))


def test_rejects_non_finite_parameters():
    with pytest.raises(ValueError):
        DirectPredictor(np.array([[np.nan]]), np.zeros((1, 6)), 4, 4)
    with pytest.raises(ValueError):
        DirectPredictor(np.zeros(4), np.zeros((1, 6)), 4, 4)


def test_rotation_frozen():
    pred = DirectPredictor(np.zeros((2, 2)), np.ones((2, 6)), 8, 8, rotation=False)
    assert not pred.pose_params[:, :3].any()
    k = CameraIntrinsics(10.0, 10.0, 3.5, 3.5)
    g = np.ones((2, 8, 8, 2))
    _, d_pose = pred.accumulate_gradients(g, k, [0, 1000, 2000])
    assert not d_pose[:, :3].any()


def test_zero_flow_gradient_gives_zero_parameter_gradient():
    pred = DirectPredictor.create(8, 8, 2, factor=4)
    pred.pose_params[:, 3] = 0.01
    k = CameraIntrinsics(10.0, 10.0, 3.5, 3.5)
    d_depth, d_pose = pred.accumulate_gradients(np.zeros((2, 8, 8, 2)), k, [0, 1000, 2000])
    assert not d_depth.any() and not d_pose.any()


def test_translation_only_flat_depth_gradient_uniform_inside():
    # a uniform dL/du under x-translation pulls every depth cell the same way
    pred = DirectPredictor.create(32, 32, 1, factor=1)
    pred.pose_params[0, 3] = 0.01
    k = CameraIntrinsics(20.0, 20.0, 15.5, 15.5)
    g = np.zeros((1, 32, 32, 2))
    g[..., 0] = 1.0
    d_depth, _ = pred.accumulate_gradients(g, k, [0, 1000])
    assert np.allclose(d_depth, d_depth[0, 0], rtol=1e-12)


def test_tiny_instance_gradient():
    rng = np.random.default_rng(11)
    pred, events, k = random_predictor_instance(rng, 8, 8, bins=2, factor=4, n_events=30)
    assert check_predictor_gradient(pred, events, k) < 1e-3


@pytest.mark.parametrize("seed", range(50))
def test_composed_gradient_matches_finite_differences(seed):
    pred, events, k = random_predictor_instance(np.random.default_rng(seed))
    assert check_predictor_gradient(pred, events, k, lambda_geo=0.05) < 1e-3


def test_checkpoint_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    pred = DirectPredictor(rng.normal(size=(3, 4)), rng.normal(size=(2, 6)), 24, 32, rotation=True)
    pred.save(tmp_path / "ckpt")
    back = DirectPredictor.load(tmp_path / "ckpt")
    assert np.array_equal(back.pose_params, pred.pose_params)
    assert np.array_equal(back.depth_params, pred.depth_params.astype(np.float32).astype(np.float64))
    assert (back.height, back.width, back.rotation) == (24, 32, True)
