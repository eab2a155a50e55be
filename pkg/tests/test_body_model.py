"""Toy articulated body: tree, kinematics, sampling and rendering."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from numpy.testing import assert_allclose, assert_array_equal

from truncpose.body_model import (
    NUM_BETAS,
    NUM_JOINTS,
    NUM_KEYPOINTS,
    axis_angle_to_rotmat,
    default_body_model,
    forward_kinematics,
    keypoints_from_joints,
    limb_colours,
    project_numpy,
    render_stick_figure,
    sample_pose,
    validate_tree,
)
from truncpose.layers import ConfigError
from truncpose.tensor import Tensor

from _gradcheck import gradcheck, uniform

BODY = default_body_model()
REST = np.broadcast_to(np.eye(3), (1, NUM_JOINTS, 3, 3)).copy()


def _rest_oracle(offsets):
    """Rest joints by walking parents: position = parent position + offset."""
    pos = np.zeros((NUM_JOINTS, 3))
    for j in range(1, NUM_JOINTS):
        pos[j] = pos[BODY.parents[j]] + offsets[j]
    return pos


class TestTree:
    def test_default_tree_is_valid(self):
        validate_tree(BODY.parents)

    @pytest.mark.parametrize("parents", [
        (1,) + tuple(range(23)),
        (0, 0, 5) + tuple(range(2, 23))[:21],
        (0,) * 23,
    ])
    def test_bad_trees(self, parents):
        with pytest.raises(ConfigError):
            validate_tree(parents)

    def test_keypoint_map_injective(self):
        assert len(BODY.keypoint_map) == NUM_KEYPOINTS == len(set(BODY.keypoint_map))

    def test_bones_positive_over_beta_range(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            lengths = BODY.bone_lengths(rng.uniform(-3, 3, NUM_BETAS))
            assert (lengths[1:] > 0).all()


class TestForwardKinematics:
    def test_rest_pose_walks_offsets(self):
        j = forward_kinematics(REST, np.zeros((1, NUM_BETAS)))
        assert_allclose(j[0], _rest_oracle(BODY.rest_offsets), atol=1e-15)

    def test_root_rotation_is_rigid(self):
        R = axis_angle_to_rotmat(np.array([0.3, -1.1, 0.7]))
        rot = REST.copy()
        rot[0, 0] = R
        beta = np.random.default_rng(1).uniform(-2, 2, (1, NUM_BETAS))
        assert_allclose(forward_kinematics(rot, beta)[0], forward_kinematics(REST, beta)[0] @ R.T, atol=1e-12)

    def test_beta_is_linear_in_offsets(self):
        beta = np.zeros((1, NUM_BETAS))
        beta[0, 2] = 1.5
        want = _rest_oracle(BODY.rest_offsets + 1.5 * BODY.shape_basis[:, :, 2])
        assert_allclose(forward_kinematics(REST, beta)[0], want, atol=1e-14)

    @given(st.integers(0, 2**31))
    @settings(max_examples=25, deadline=None)
    def test_bone_lengths_preserved(self, seed):
        p = sample_pose(seed)
        j = forward_kinematics(p.rotmats, p.beta)[0]
        lengths = [np.linalg.norm(j[k] - j[BODY.parents[k]]) for k in range(1, NUM_JOINTS)]
        assert_allclose(lengths, BODY.bone_lengths(p.beta[0])[1:], rtol=1e-12)

    def test_tensor_path_matches_numpy(self):
        p = sample_pose(3)
        t = forward_kinematics(Tensor(p.rotmats), Tensor(p.beta)).data
        assert_allclose(t, forward_kinematics(p.rotmats, p.beta), atol=1e-14)

    def test_wrong_shapes(self):
        from truncpose.tensor import ShapeError
        with pytest.raises(ShapeError):
            forward_kinematics(Tensor(REST), Tensor(np.zeros((1, 3))))

    @pytest.mark.parametrize("seed", [0, 1, 2])
    def test_gradcheck(self, seed):
        rng = np.random.default_rng(seed)
        rot = axis_angle_to_rotmat(uniform(rng, 1, NUM_JOINTS, 3))
        assert gradcheck(forward_kinematics, [rot, uniform(rng, 1, NUM_BETAS)], rng, max_coords=20) < 1e-4


class TestSampling:
    def test_deterministic(self):
        a, b = sample_pose([4, 2]), sample_pose([4, 2])
        for name in ("rotmats", "beta", "cam", "alpha6d"):
            assert_array_equal(getattr(a, name), getattr(b, name))

    def test_seeds_differ(self):
        assert not np.array_equal(sample_pose(0).beta, sample_pose(1).beta)

    def test_audit_1000(self):
        for i in range(1000):
            p = sample_pose([11, i])
            j = forward_kinematics(p.rotmats, p.beta)
            assert np.isfinite(j).all()
            assert (j[0].max(axis=0) - j[0].min(axis=0)).max() <= 2.0
            assert abs(np.abs(p.beta).max()) <= BODY.beta_range
            s, tx, ty = p.cam[0]
            assert BODY.cam_scale[0] <= s <= BODY.cam_scale[1]
            assert BODY.cam_tx[0] <= tx <= BODY.cam_tx[1] and BODY.cam_ty[0] <= ty <= BODY.cam_ty[1]
            assert_allclose(np.swapaxes(p.rotmats, -1, -2) @ p.rotmats, np.broadcast_to(np.eye(3), p.rotmats.shape),
                            atol=1e-12)

    def test_zero_limits_give_rest_pose(self):
        p = sample_pose(5, limits=np.zeros((NUM_JOINTS, 3)))
        assert_allclose(p.rotmats, REST, atol=1e-15)


class TestProjection:
    def test_keypoints_pick_mapped_joints(self):
        j = np.arange(NUM_JOINTS * 3, dtype=float).reshape(NUM_JOINTS, 3)
        assert_array_equal(keypoints_from_joints(j)[:, 0], [3 * k for k in BODY.keypoint_map])

    def test_project_worked_example(self):
        # f = 0.32 * 48 = 15.36; u = 24 + 15.36 * 2 * (0.5 + 0.25), v = 32 + 15.36 * 2 * (-1 + 0)
        uv = project_numpy(np.array([[[0.5, -1.0, 7.0]]]), np.array([[2.0, 0.25, 0.0]]), (64, 48))
        assert_allclose(uv, [[[24 + 23.04, 32 - 30.72]]])


class TestRender:
    def test_blank_is_background(self):
        img = render_stick_figure(np.zeros((0, 3)), (40, 36), seed=3, noise=0.1)
        want = 0.1 * np.random.default_rng(3).random((3, 40, 36))
        assert_array_equal(img, want)

    def test_invisible_keypoints_draw_nothing(self):
        kp = np.zeros((NUM_KEYPOINTS, 3))
        kp[:, :2] = 20.0
        assert_array_equal(render_stick_figure(kp, (48, 48), seed=1),
                           render_stick_figure(np.zeros((0, 3)), (48, 48), seed=1))

    def test_bit_identical_repeat(self):
        rec = _projected(7, (64, 48))
        assert_array_equal(render_stick_figure(rec, (64, 48), seed=2), render_stick_figure(rec, (64, 48), seed=2))

    def test_range_and_shape(self):
        img = render_stick_figure(_projected(8, (64, 48)), (64, 48))
        assert img.shape == (3, 64, 48)
        assert img.min() >= 0.0 and img.max() <= 1.0

    def test_occlusion_changes_pixels(self):
        kp = _projected(9, (64, 64))
        full = render_stick_figure(kp, (64, 64), seed=0)
        cut = render_stick_figure(kp, (64, 64), seed=0, occluded_limbs=range(len(BODY.limbs)))
        assert np.abs(full - cut).max() > 0.5

    @pytest.mark.parametrize("hw", [(31, 64), (64, 16)])
    def test_small_canvas(self, hw):
        with pytest.raises(ConfigError):
            render_stick_figure(np.zeros((0, 3)), hw)

    def test_limb_colours_distinct(self):
        c = limb_colours(len(BODY.limbs))
        dist = np.linalg.norm(c[:, None] - c[None], axis=-1) + np.eye(len(c))
        assert dist.min() > 0.1


def _projected(seed, hw):
    p = sample_pose(seed)
    uv = keypoints_from_joints(project_numpy(forward_kinematics(p.rotmats, p.beta), p.cam, hw))[0]
    return np.concatenate([uv, np.ones((NUM_KEYPOINTS, 1))], axis=1)
