"""Skeleton, forward kinematics, and linear blend skinning.

A rig is a single-rooted joint tree with rest positions in canonical space
and identity rest orientations.  A pose supplies per-joint intrinsic-XYZ
Euler rotations (joint 0 doubles as the global rotation) plus a global
translation.  Bone transforms map canonical space to posed space and are
blended per primitive by skinning weights; orientations reuse the blended
linear map raw, and viewing directions are warped back to canonical space
through its inverse.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .gaussians import ShapeError
from .mathutil import euler_xyz_to_matrix


class SingularBlendError(ValueError):
    """Blended linear map is not invertible; caller falls back to d_t."""


@dataclass(frozen=True)
class Rig:
    """Joint tree: parent indices (root = -1), rest positions, labels."""

    parents: np.ndarray
    rest_positions: np.ndarray
    names: tuple = ()
    euler_order: str = "xyz"

    def __post_init__(self):
        parents = np.asarray(self.parents, dtype=np.int64)
        rest = np.asarray(self.rest_positions, dtype=np.float64)
        n = parents.shape[0]
        if rest.shape != (n, 3):
            raise ShapeError(f"rest_positions must be ({n},3), got {rest.shape}")
        if n < 1:
            raise ValueError("rig needs at least one joint")
        roots = np.flatnonzero(parents < 0)
        if roots.size != 1:
            raise ValueError(f"rig must have exactly one root, found {roots.size}")
        if self.euler_order != "xyz":
            raise ValueError("only intrinsic xyz euler order is supported")
        # reject cycles / forward references by finding a topological order
        order = _topological_order(parents)
        names = tuple(self.names) if self.names else tuple(f"joint_{i}" for i in range(n))
        if len(names) != n:
            raise ShapeError("names length must match joint count")
        object.__setattr__(self, "parents", parents)
        object.__setattr__(self, "rest_positions", rest)
        object.__setattr__(self, "names", names)
        object.__setattr__(self, "_order", order)

    @property
    def n_joints(self) -> int:
        return self.parents.shape[0]

    @property
    def order(self) -> np.ndarray:
        """Topological order, root first."""
        return self._order

    def with_rest_positions(self, rest_positions: np.ndarray) -> "Rig":
        """Same hierarchy with updated joint positions (skeleton optimization)."""
        return Rig(self.parents, rest_positions, self.names, self.euler_order)


def _topological_order(parents: np.ndarray) -> np.ndarray:
    n = parents.shape[0]
    order = []
    placed = np.zeros(n, dtype=bool)
    remaining = list(range(n))
    while remaining:
        progressed = False
        rest = []
        for i in remaining:
            p = parents[i]
            if p < 0 or placed[p]:
                order.append(i)
                placed[i] = True
                progressed = True
            else:
                rest.append(i)
        if not progressed:
            raise ValueError("joint hierarchy contains a cycle")
        remaining = rest
    return np.asarray(order, dtype=np.int64)


@dataclass(frozen=True)
class PoseFrame:
    """One timestamped pose: per-joint Euler rotations + global translation."""

    t: float
    euler: np.ndarray  # (n_b, 3) radians
    translation: np.ndarray  # (3,) meters

    def __post_init__(self):
        euler = np.asarray(self.euler, dtype=np.float64)
        trans = np.asarray(self.translation, dtype=np.float64)
        if euler.ndim != 2 or euler.shape[1] != 3:
            raise ShapeError(f"euler must be (n_b,3), got {euler.shape}")
        if trans.shape != (3,):
            raise ShapeError("translation must be a 3-vector")
        if not np.isfinite(self.t):
            raise ValueError("timestamp must be finite")
        object.__setattr__(self, "euler", euler)
        object.__setattr__(self, "translation", trans)

    @property
    def n_joints(self) -> int:
        return self.euler.shape[0]


@dataclass(frozen=True)
class BoneTransforms:
    """Per-joint rigid canonical-to-posed transforms (n_b, 4, 4)."""

    B: np.ndarray

    def __post_init__(self):
        B = np.asarray(self.B)
        if B.ndim != 3 or B.shape[1:] != (4, 4):
            raise ShapeError(f"B must be (n_b,4,4), got {B.shape}")
        object.__setattr__(self, "B", B)

    @property
    def n_joints(self) -> int:
        return self.B.shape[0]

    @property
    def linear(self) -> np.ndarray:
        return self.B[:, :3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.B[:, :3, 3]


def bone_transforms(rig: Rig, pose: PoseFrame) -> BoneTransforms:
    """Forward kinematics: world transforms composed root-to-leaf, times the
    inverse rest transform, then the global translation."""
    if pose.n_joints != rig.n_joints:
        raise ShapeError(
            f"pose has {pose.n_joints} joints, rig has {rig.n_joints}"
        )
    lin, trans = _fk_forward(rig, pose)[:2]
    n = rig.n_joints
    B = np.zeros((n, 4, 4), dtype=np.float64)
    B[:, :3, :3] = lin
    B[:, :3, 3] = trans
    B[:, 3, 3] = 1.0
    return BoneTransforms(B)


def _fk_forward(rig: Rig, pose: PoseFrame):
    """Returns (B_lin, B_t, A_rot, D, R_local, offsets).

    The translation part is accumulated as the joint displacement
    D_i = posed_joint_i - rest_joint_i, so a zero pose yields exact
    identities (no drift from re-associated float sums along the chain).
    """
    n = rig.n_joints
    J = rig.rest_positions
    eye = np.eye(3)
    R_local = euler_xyz_to_matrix(pose.euler)
    A_rot = np.zeros((n, 3, 3))
    D = np.zeros((n, 3))
    offsets = np.zeros((n, 3))
    for i in rig.order:
        p = rig.parents[i]
        if p < 0:
            offsets[i] = J[i]
            A_rot[i] = R_local[i]
            D[i] = 0.0
        else:
            offsets[i] = J[i] - J[p]
            A_rot[i] = A_rot[p] @ R_local[i]
            D[i] = (A_rot[p] - eye) @ offsets[i] + D[p]
    B_lin = A_rot
    # B_t = T + posed_joint - A_rot @ rest_joint, written drift-free
    B_t = (
        pose.translation[np.newaxis, :]
        + D
        + np.einsum("nij,nj->ni", eye[np.newaxis] - A_rot, J)
    )
    return B_lin, B_t, A_rot, D, R_local, offsets


def bone_transforms_backward(
    rig: Rig, pose: PoseFrame, g_lin: np.ndarray, g_trans: np.ndarray
) -> np.ndarray:
    """Gradient of the bone transforms w.r.t. the rest joint positions J.

    ``g_lin`` (n_b,3,3) and ``g_trans`` (n_b,3) are the upstream gradients on
    the linear parts and translations of B.
    """
    n = rig.n_joints
    J = rig.rest_positions
    eye = np.eye(3)
    _, _, A_rot, _, R_local, offsets = _fk_forward(rig, pose)

    gA_rot = np.array(g_lin, dtype=np.float64, copy=True)
    gD = np.array(g_trans, dtype=np.float64, copy=True)
    gJ = np.zeros((n, 3))
    # B_t = T + D_i + (I - A_rot_i) @ J_i
    gA_rot -= np.einsum("ni,nj->nij", g_trans, J)
    gJ += np.einsum("nji,nj->ni", eye[np.newaxis] - A_rot, g_trans)

    for i in rig.order[::-1]:
        p = rig.parents[i]
        if p >= 0:
            # D_i = (A_rot_p - I) @ o_i + D_p
            gA_rot[p] += gA_rot[i] @ R_local[i].T
            gA_rot[p] += np.outer(gD[i], offsets[i])
            g_o = (A_rot[p] - eye).T @ gD[i]
            gD[p] += gD[i]
            gJ[i] += g_o
            gJ[p] -= g_o
    return gJ


def _check_weights(w: np.ndarray, n_joints: int):
    w = np.asarray(w)
    if w.shape[-1] != n_joints:
        raise ShapeError(f"weight vector has {w.shape[-1]} entries for {n_joints} joints")
    return w


def lbs_point(x_c: np.ndarray, w: np.ndarray, B: BoneTransforms) -> np.ndarray:
    """Sum_i w_i * (B_i applied to x_c); accepts (3,) or (N,3) inputs.

    Blended in delta form (x + sum w_i (B_i - I) x + sum w_i t_i) so identity
    bone transforms reproduce the input bitwise."""
    w = _check_weights(w, B.n_joints)
    x = np.asarray(x_c)
    lin_delta = np.einsum("...b,bij->...ij", w, B.linear - np.eye(3))
    tr = np.einsum("...b,bi->...i", w, B.translation)
    return x + np.einsum("...ij,...j->...i", lin_delta, x) + tr


def blend_linear(w: np.ndarray, B: BoneTransforms) -> np.ndarray:
    """Blended linear map M = sum_i w_i * linear(B_i), delta form."""
    w = _check_weights(w, B.n_joints)
    return np.eye(3, dtype=B.linear.dtype) + np.einsum(
        "...b,bij->...ij", w, B.linear - np.eye(3)
    )


def lbs_rotation(R_c: np.ndarray, w: np.ndarray, B: BoneTransforms) -> np.ndarray:
    """(sum_i w_i linear(B_i)) @ R_c, returned raw (not re-orthonormalized)."""
    R = np.asarray(R_c)
    if R.shape[-2:] != (3, 3):
        raise ShapeError("R_c must be (...,3,3)")
    return blend_linear(w, B) @ R


def warp_view_dir(d_t: np.ndarray, w: np.ndarray, B: BoneTransforms) -> np.ndarray:
    """Canonical view direction: normalize(M^-1 d_t); raises on singular M."""
    M = blend_linear(w, B)
    d = np.asarray(d_t, dtype=np.float64)
    if M.ndim == 2:
        if abs(np.linalg.det(M)) <= 1e-9:
            raise SingularBlendError("blended linear map is singular")
        y = np.linalg.solve(M, d)
        return y / np.linalg.norm(y)
    dets = np.abs(np.linalg.det(M))
    if np.any(dets <= 1e-9):
        raise SingularBlendError("blended linear map is singular")
    y = np.linalg.solve(M, d[..., np.newaxis])[..., 0]
    return y / np.linalg.norm(y, axis=-1, keepdims=True)


def lbs_backward(
    w: np.ndarray,
    M: np.ndarray,
    x0p: np.ndarray,
    g_xt: np.ndarray,
    g_M: np.ndarray,
) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Reverse LBS blending for a batch of primitives.

    Forward: x_t = M @ x0p + tvec with M = w @ B_lin, tvec = w @ B_t.
    Inputs are upstream gradients on x_t and (separately accumulated) on M.
    Returns (g_x0p, g_Blin, g_Bt) where the bone gradients are summed over
    the batch.
    """
    # the x_t path adds g_xt outer x0p to dL/dM
    gM_total = g_M + np.einsum("ni,nj->nij", g_xt, x0p)
    g_Blin = np.einsum("nb,nij->bij", w, gM_total)
    g_Bt = np.einsum("nb,ni->bi", w, g_xt)
    g_x0p = np.einsum("nji,nj->ni", M, g_xt)
    return g_x0p, g_Blin, g_Bt
