"""Small rotation / quaternion helpers used across the pipeline.

Quaternions are stored (w, x, y, z) and may be unnormalized; conversion to a
matrix normalizes first and the backward pass accounts for that.  All
functions accept a single item or a leading batch dimension.
"""

from __future__ import annotations

import numpy as np


def quat_normalize(q: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    if np.any(n == 0):
        raise ValueError("zero-norm quaternion")
    return q / n


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit-normalizes ``q`` and returns the (..., 3, 3) rotation matrix."""
    r = quat_normalize(np.asarray(q, dtype=q.dtype if hasattr(q, "dtype") else float))
    w, x, y, z = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    R = np.empty(r.shape[:-1] + (3, 3), dtype=r.dtype)
    R[..., 0, 0] = 1 - 2 * (y * y + z * z)
    R[..., 0, 1] = 2 * (x * y - w * z)
    R[..., 0, 2] = 2 * (x * z + w * y)
    R[..., 1, 0] = 2 * (x * y + w * z)
    R[..., 1, 1] = 1 - 2 * (x * x + z * z)
    R[..., 1, 2] = 2 * (y * z - w * x)
    R[..., 2, 0] = 2 * (x * z - w * y)
    R[..., 2, 1] = 2 * (y * z + w * x)
    R[..., 2, 2] = 1 - 2 * (x * x + y * y)
    return R


def quat_to_rotmat_backward(q: np.ndarray, dR: np.ndarray) -> np.ndarray:
    """Gradient of ``quat_to_rotmat`` w.r.t. the raw (unnormalized) quaternion."""
    q = np.asarray(q)
    n = np.linalg.norm(q, axis=-1, keepdims=True)
    r = q / n
    w, x, y, z = r[..., 0], r[..., 1], r[..., 2], r[..., 3]
    zero = np.zeros_like(w)

    # dR/d(component) for the normalized quaternion, each (..., 3, 3)
    def m(rows):
        return 2.0 * np.stack(
            [np.stack(row, axis=-1) for row in rows], axis=-2
        )

    dRdw = m([[zero, -z, y], [z, zero, -x], [-y, x, zero]])
    dRdx = m([[zero, y, z], [y, -2 * x, -w], [z, w, -2 * x]])
    dRdy = m([[-2 * y, x, w], [x, zero, z], [-w, z, -2 * y]])
    dRdz = m([[-2 * z, -w, x], [w, -2 * z, y], [x, y, zero]])

    g_unit = np.stack(
        [np.sum(d * dR, axis=(-2, -1)) for d in (dRdw, dRdx, dRdy, dRdz)], axis=-1
    )
    # through the normalization: d(q/|q|)/dq = (I - r r^T) / |q|
    g = (g_unit - r * np.sum(g_unit * r, axis=-1, keepdims=True)) / n
    return g


def euler_xyz_to_matrix(angles: np.ndarray) -> np.ndarray:
    """Intrinsic XYZ Euler rotation: R = Rx(a) @ Ry(b) @ Rz(c)."""
    angles = np.asarray(angles)
    a, b, c = angles[..., 0], angles[..., 1], angles[..., 2]
    ca, sa = np.cos(a), np.sin(a)
    cb, sb = np.cos(b), np.sin(b)
    cc, sc = np.cos(c), np.sin(c)
    R = np.empty(angles.shape[:-1] + (3, 3), dtype=angles.dtype)
    R[..., 0, 0] = cb * cc
    R[..., 0, 1] = -cb * sc
    R[..., 0, 2] = sb
    R[..., 1, 0] = ca * sc + sa * sb * cc
    R[..., 1, 1] = ca * cc - sa * sb * sc
    R[..., 1, 2] = -sa * cb
    R[..., 2, 0] = sa * sc - ca * sb * cc
    R[..., 2, 1] = sa * cc + ca * sb * sc
    R[..., 2, 2] = ca * cb
    return R


def rotation_about_axis(axis: str, angle: float, dtype=np.float64) -> np.ndarray:
    """Elementary rotation matrix, handy for tests and scene scripting."""
    c, s = np.cos(angle), np.sin(angle)
    if axis == "x":
        R = [[1, 0, 0], [0, c, -s], [0, s, c]]
    elif axis == "y":
        R = [[c, 0, s], [0, 1, 0], [-s, 0, c]]
    elif axis == "z":
        R = [[c, -s, 0], [s, c, 0], [0, 0, 1]]
    else:
        raise ValueError(f"axis must be x, y or z, got {axis!r}")
    return np.asarray(R, dtype=dtype)


def is_rotation_matrix(R: np.ndarray, tol: float = 1e-6) -> bool:
    R = np.asarray(R)
    if R.shape[-2:] != (3, 3):
        return False
    eye = np.eye(3, dtype=R.dtype)
    ortho = np.max(np.abs(np.swapaxes(R, -1, -2) @ R - eye)) <= tol
    det = np.all(np.abs(np.linalg.det(R) - 1.0) <= tol)
    return bool(ortho and det)


def look_at(eye, target, up=(0.0, 1.0, 0.0)) -> np.ndarray:
    """World-to-camera rigid transform with the camera looking down +z."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    fwd = target - eye
    fwd = fwd / np.linalg.norm(fwd)
    upv = np.asarray(up, dtype=np.float64)
    right = np.cross(fwd, upv)
    nr = np.linalg.norm(right)
    if nr < 1e-12:
        raise ValueError("up vector parallel to view direction")
    right /= nr
    down = np.cross(fwd, right)  # +y in camera space points down the image
    W = np.eye(4)
    W[0, :3] = right
    W[1, :3] = down
    W[2, :3] = fwd
    W[:3, 3] = -W[:3, :3] @ eye
    return W


def sigmoid(x):
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def inv_sigmoid(y):
    return np.log(y) - np.log1p(-y)
