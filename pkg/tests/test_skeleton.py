import numpy as np
import pytest

from gsavatar.gaussians import ShapeError
from gsavatar.mathutil import euler_xyz_to_matrix, rotation_about_axis
from gsavatar.skeleton import (
    BoneTransforms,
    PoseFrame,
    Rig,
    SingularBlendError,
    bone_transforms,
    bone_transforms_backward,
    lbs_point,
    lbs_rotation,
    warp_view_dir,
)


def chain_rig(n, spacing=0.5):
    return Rig(
        parents=np.arange(-1, n - 1),
        rest_positions=np.stack([np.arange(n) * spacing, np.zeros(n), np.zeros(n)], axis=1),
    )


def zero_pose(n, t=0.0):
    return PoseFrame(t=t, euler=np.zeros((n, 3)), translation=np.zeros(3))


def random_rig(rng, n):
    parents = [-1] + [int(rng.integers(0, i)) for i in range(1, n)]
    return Rig(parents=np.array(parents), rest_positions=rng.uniform(-1, 1, (n, 3)))


def transforms_from_linear(mats, trans=None):
    n = len(mats)
    B = np.zeros((n, 4, 4))
    B[:, 3, 3] = 1.0
    for i, m in enumerate(mats):
        B[i, :3, :3] = m
        if trans is not None:
            B[i, :3, 3] = trans[i]
    return BoneTransforms(B)


class TestRig:
    def test_two_roots_rejected(self):
        with pytest.raises(ValueError):
            Rig(parents=np.array([-1, -1]), rest_positions=np.zeros((2, 3)))

    def test_cycle_rejected(self):
        with pytest.raises(ValueError):
            Rig(parents=np.array([-1, 2, 1]), rest_positions=np.zeros((3, 3)))

    def test_out_of_order_parents_ok(self):
        rig = Rig(parents=np.array([1, -1]), rest_positions=np.array([[1.0, 0, 0], [0.0, 0, 0]]))
        assert list(rig.order) == [1, 0]


class TestBoneTransforms:
    def test_rest_pose_identity(self):
        rig = chain_rig(4)
        B = bone_transforms(rig, zero_pose(4))
        assert np.allclose(B.B, np.tile(np.eye(4), (4, 1, 1)))

    def test_global_translation(self):
        rig = chain_rig(3)
        pose = PoseFrame(t=0.0, euler=np.zeros((3, 3)), translation=np.array([0.0, 0.0, 1.0]))
        B = bone_transforms(rig, pose)
        assert np.allclose(B.linear, np.tile(np.eye(3), (3, 1, 1)))
        assert np.allclose(B.translation, [[0, 0, 1]] * 3)

    def test_two_joint_chain_derived(self):
        # hand-composed forward kinematics: root at origin, child at (1,0,0),
        # root rotated 90 degrees about z moves the child's bone so that the
        # point (1,0,0) lands at (0,1,0)
        rig = Rig(parents=np.array([-1, 0]), rest_positions=np.array([[0.0, 0, 0], [1.0, 0, 0]]))
        pose = PoseFrame(t=0.0, euler=np.array([[0, 0, np.pi / 2], [0, 0, 0]]), translation=np.zeros(3))
        B = bone_transforms(rig, pose)
        moved = B.linear[1] @ np.array([1.0, 0, 0]) + B.translation[1]
        assert np.allclose(moved, [0.0, 1.0, 0.0], atol=1e-12)

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            bone_transforms(chain_rig(3), zero_pose(2))

    def test_rotation_about_joint_position(self):
        # a joint away from the origin rotates points about itself
        rig = Rig(parents=np.array([-1]), rest_positions=np.array([[1.0, 1.0, 0.0]]))
        pose = PoseFrame(t=0.0, euler=np.array([[0, 0, np.pi]]), translation=np.zeros(3))
        B = bone_transforms(rig, pose)
        moved = B.linear[0] @ np.array([2.0, 1.0, 0.0]) + B.translation[0]
        assert np.allclose(moved, [0.0, 1.0, 0.0], atol=1e-12)


class TestLBSPoint:
    def test_identity(self):
        B = transforms_from_linear([np.eye(3)] * 3)
        x = np.array([0.3, -0.2, 0.9])
        assert np.allclose(lbs_point(x, np.array([0.2, 0.5, 0.3]), B), x)

    def test_one_hot_translation(self):
        B = transforms_from_linear([np.eye(3)] * 2, [[0, 0, 0], [1.0, 2.0, 3.0]])
        x = np.array([0.1, 0.2, 0.3])
        out = lbs_point(x, np.array([0.0, 1.0]), B)
        assert np.allclose(out, x + [1, 2, 3])

    def test_two_bone_linearity(self):
        B = transforms_from_linear([np.eye(3)] * 2, [[1.0, 0, 0], [0, 1.0, 0]])
        x = np.array([0.5, 0.5, 0.5])
        out = lbs_point(x, np.array([0.5, 0.5]), B)
        assert np.allclose(out, x + [0.5, 0.5, 0.0])

    def test_affine_in_point(self):
        rng = np.random.default_rng(0)
        rig = random_rig(rng, 4)
        pose = PoseFrame(t=0.0, euler=rng.uniform(-1, 1, (4, 3)), translation=rng.uniform(-1, 1, 3))
        B = bone_transforms(rig, pose)
        w = rng.dirichlet(np.ones(4))
        for _ in range(20):
            x, y = rng.normal(size=3), rng.normal(size=3)
            a = rng.uniform(-2, 3)
            b = 1.0 - a
            lhs = lbs_point(a * x + b * y, w, B)
            rhs = a * lbs_point(x, w, B) + b * lbs_point(y, w, B)
            assert np.allclose(lhs, rhs, atol=1e-10)

    def test_rest_pose_round_trip_exact(self):
        rng = np.random.default_rng(1)
        for seed in range(5):
            n = int(rng.integers(2, 8))
            rig = random_rig(rng, n)
            B = bone_transforms(rig, zero_pose(n))
            pts = rng.normal(size=(50, 3))
            w = rng.dirichlet(np.ones(n), 50)
            out = lbs_point(pts, w, B)
            assert np.array_equal(out, pts) or np.allclose(out, pts, atol=0, rtol=0)

    def test_rigid_motion_equivariance(self):
        rng = np.random.default_rng(2)
        rig = random_rig(rng, 5)
        pose = PoseFrame(t=0.0, euler=rng.uniform(-1, 1, (5, 3)), translation=rng.uniform(-1, 1, 3))
        B = bone_transforms(rig, pose)
        G_rot = euler_xyz_to_matrix(rng.uniform(-1, 1, 3))
        G_t = rng.uniform(-1, 1, 3)
        composed = transforms_from_linear(
            [G_rot @ B.linear[i] for i in range(5)],
            [G_rot @ B.translation[i] + G_t for i in range(5)],
        )
        w = rng.dirichlet(np.ones(5))
        x = rng.normal(size=3)
        assert np.allclose(
            lbs_point(x, w, composed), G_rot @ lbs_point(x, w, B) + G_t, atol=1e-12
        )

    def test_weight_length_mismatch(self):
        B = transforms_from_linear([np.eye(3)] * 2)
        with pytest.raises(ShapeError):
            lbs_point(np.zeros(3), np.array([1.0, 0.0, 0.0]), B)


class TestLBSRotation:
    def test_identity(self):
        B = transforms_from_linear([np.eye(3)] * 2)
        R = rotation_about_axis("x", 0.3)
        assert np.allclose(lbs_rotation(R, np.array([0.5, 0.5]), B), R)

    def test_one_hot(self):
        Q = rotation_about_axis("y", 1.1)
        B = transforms_from_linear([np.eye(3), Q])
        R = rotation_about_axis("z", 0.4)
        assert np.allclose(lbs_rotation(R, np.array([0.0, 1.0]), B), Q @ R)

    def test_blend_half_half_derived(self):
        # independent matrix arithmetic: blended map is the elementwise
        # average of the two rotated matrices
        Q1 = rotation_about_axis("x", 0.7)
        Q2 = rotation_about_axis("z", -0.4)
        R = rotation_about_axis("y", 0.2)
        expected = 0.5 * (Q1 @ R) + 0.5 * (Q2 @ R)
        B = transforms_from_linear([Q1, Q2])
        out = lbs_rotation(R, np.array([0.5, 0.5]), B)
        assert np.allclose(out, expected, atol=1e-12)


class TestWarpViewDir:
    def test_identity(self):
        B = transforms_from_linear([np.eye(3)] * 2)
        d = np.array([0.0, 0.6, 0.8])
        assert np.allclose(warp_view_dir(d, np.array([0.3, 0.7]), B), d)

    def test_one_hot_inverse_by_hand(self):
        Q = rotation_about_axis("z", np.pi / 2)
        B = transforms_from_linear([Q])
        out = warp_view_dir(np.array([0.0, 1.0, 0.0]), np.array([1.0]), B)
        assert np.allclose(out, [1.0, 0.0, 0.0], atol=1e-12)

    def test_opposing_rotations_singular(self):
        Q1 = rotation_about_axis("z", np.pi)
        B = transforms_from_linear([Q1, np.eye(3)])
        # 0.5 * (Rz(pi) + I) = diag(0, 0, 1): singular
        with pytest.raises(SingularBlendError):
            warp_view_dir(np.array([1.0, 0.0, 0.0]), np.array([0.5, 0.5]), B)

    def test_one_hot_matches_exact_inverse(self):
        rng = np.random.default_rng(3)
        for _ in range(20):
            Q = euler_xyz_to_matrix(rng.uniform(-np.pi, np.pi, 3))
            B = transforms_from_linear([Q, np.eye(3)])
            d = rng.normal(size=3)
            d /= np.linalg.norm(d)
            out = warp_view_dir(d, np.array([1.0, 0.0]), B)
            assert np.allclose(out, Q.T @ d, atol=1e-9)


class TestFKBackward:
    def test_rest_position_gradients_fd(self):
        rng = np.random.default_rng(4)
        eps = 1e-6
        for seed in range(6):
            n = int(rng.integers(2, 7))
            rig = random_rig(rng, n)
            pose = PoseFrame(
                t=0.0, euler=rng.uniform(-0.8, 0.8, (n, 3)), translation=rng.uniform(-0.3, 0.3, 3)
            )
            g_lin = rng.normal(size=(n, 3, 3))
            g_tr = rng.normal(size=(n, 3))
            gJ = bone_transforms_backward(rig, pose, g_lin, g_tr)

            def objective(J):
                B = bone_transforms(rig.with_rest_positions(J), pose)
                return np.sum(B.linear * g_lin) + np.sum(B.translation * g_tr)

            J0 = rig.rest_positions
            for j in range(n):
                for k in range(3):
                    Jp = J0.copy(); Jp[j, k] += eps
                    Jm = J0.copy(); Jm[j, k] -= eps
                    fd = (objective(Jp) - objective(Jm)) / (2 * eps)
                    assert gJ[j, k] == pytest.approx(fd, abs=1e-6)
