"""Gaussian primitive types and pointwise evaluations.

Covariance construction, opacity falloff, real spherical-harmonics color,
and ambient-occlusion modulation.  Scalar types validate on construction and
are immutable; the batched cloud container stores the same data
struct-of-arrays for the renderer and optimizer.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mathutil import is_rotation_matrix, quat_to_rotmat


class InvalidParameterError(ValueError):
    pass


class DegenerateCovarianceError(ValueError):
    pass


class ShapeError(ValueError):
    pass


# Real SH basis normalization constants (degrees 0..3), the convention used
# throughout view-dependent splatting.
SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (
    1.0925484305920792,
    -1.0925484305920792,
    0.31539156525252005,
    -1.0925484305920792,
    0.5462742152960396,
)
SH_C3 = (
    -0.5900435899266435,
    2.890611442640554,
    -0.4570457994644658,
    0.3731763325901154,
    -0.4570457994644658,
    1.445305721320277,
    -0.5900435899266435,
)


@dataclass(frozen=True)
class SHBasis:
    """Real spherical harmonics up to ``degree`` (0..3)."""

    degree: int = 3

    def __post_init__(self):
        if not 0 <= self.degree <= 3:
            raise InvalidParameterError(f"SH degree must be 0..3, got {self.degree}")

    @property
    def n_coeffs(self) -> int:
        return (self.degree + 1) ** 2

    def evaluate(self, dirs: np.ndarray) -> np.ndarray:
        return sh_basis(dirs, self.degree)


def sh_basis(dirs: np.ndarray, degree: int) -> np.ndarray:
    """Basis values Y_k(d) for unit directions, shape (..., (degree+1)^2)."""
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    out = np.empty(d.shape[:-1] + ((degree + 1) ** 2,), dtype=d.dtype)
    out[..., 0] = SH_C0
    if degree >= 1:
        out[..., 1] = -SH_C1 * y
        out[..., 2] = SH_C1 * z
        out[..., 3] = -SH_C1 * x
    if degree >= 2:
        xx, yy, zz = x * x, y * y, z * z
        xy, yz, xz = x * y, y * z, x * z
        out[..., 4] = SH_C2[0] * xy
        out[..., 5] = SH_C2[1] * yz
        out[..., 6] = SH_C2[2] * (2.0 * zz - xx - yy)
        out[..., 7] = SH_C2[3] * xz
        out[..., 8] = SH_C2[4] * (xx - yy)
    if degree >= 3:
        out[..., 9] = SH_C3[0] * y * (3.0 * xx - yy)
        out[..., 10] = SH_C3[1] * xy * z
        out[..., 11] = SH_C3[2] * y * (4.0 * zz - xx - yy)
        out[..., 12] = SH_C3[3] * z * (2.0 * zz - 3.0 * xx - 3.0 * yy)
        out[..., 13] = SH_C3[4] * x * (4.0 * zz - xx - yy)
        out[..., 14] = SH_C3[5] * z * (xx - yy)
        out[..., 15] = SH_C3[6] * x * (xx - 3.0 * yy)
    return out


def sh_basis_grad(dirs: np.ndarray, degree: int) -> np.ndarray:
    """dY_k/dd for unit directions, shape (..., (degree+1)^2, 3).

    The derivative is of the raw polynomial basis; the chain through any
    direction normalization is the caller's job.
    """
    d = np.asarray(dirs)
    x, y, z = d[..., 0], d[..., 1], d[..., 2]
    zero = np.zeros_like(x)
    n = (degree + 1) ** 2
    g = np.zeros(d.shape[:-1] + (n, 3), dtype=d.dtype)
    if degree >= 1:
        g[..., 1, 1] = -SH_C1
        g[..., 2, 2] = SH_C1
        g[..., 3, 0] = -SH_C1
    if degree >= 2:
        g[..., 4, 0] = SH_C2[0] * y
        g[..., 4, 1] = SH_C2[0] * x
        g[..., 5, 1] = SH_C2[1] * z
        g[..., 5, 2] = SH_C2[1] * y
        g[..., 6, 0] = SH_C2[2] * (-2.0 * x)
        g[..., 6, 1] = SH_C2[2] * (-2.0 * y)
        g[..., 6, 2] = SH_C2[2] * (4.0 * z)
        g[..., 7, 0] = SH_C2[3] * z
        g[..., 7, 2] = SH_C2[3] * x
        g[..., 8, 0] = SH_C2[4] * (2.0 * x)
        g[..., 8, 1] = SH_C2[4] * (-2.0 * y)
    if degree >= 3:
        xx, yy, zz = x * x, y * y, z * z
        g[..., 9, 0] = SH_C3[0] * 6.0 * x * y
        g[..., 9, 1] = SH_C3[0] * (3.0 * xx - 3.0 * yy)
        g[..., 9, 2] = zero
        g[..., 10, 0] = SH_C3[1] * y * z
        g[..., 10, 1] = SH_C3[1] * x * z
        g[..., 10, 2] = SH_C3[1] * x * y
        g[..., 11, 0] = SH_C3[2] * (-2.0 * x * y)
        g[..., 11, 1] = SH_C3[2] * (4.0 * zz - xx - 3.0 * yy)
        g[..., 11, 2] = SH_C3[2] * (8.0 * y * z)
        g[..., 12, 0] = SH_C3[3] * (-6.0 * x * z)
        g[..., 12, 1] = SH_C3[3] * (-6.0 * y * z)
        g[..., 12, 2] = SH_C3[3] * (6.0 * zz - 3.0 * xx - 3.0 * yy)
        g[..., 13, 0] = SH_C3[4] * (4.0 * zz - 3.0 * xx - yy)
        g[..., 13, 1] = SH_C3[4] * (-2.0 * x * y)
        g[..., 13, 2] = SH_C3[4] * (8.0 * x * z)
        g[..., 14, 0] = SH_C3[5] * (2.0 * x * z)
        g[..., 14, 1] = SH_C3[5] * (-2.0 * y * z)
        g[..., 14, 2] = SH_C3[5] * (xx - yy)
        g[..., 15, 0] = SH_C3[6] * (3.0 * xx - 3.0 * yy)
        g[..., 15, 1] = SH_C3[6] * (-6.0 * x * y)
        g[..., 15, 2] = zero
    return g


@dataclass(frozen=True)
class GaussianPrimitive:
    """One canonical-space Gaussian: center, orientation, scale, opacity, SH."""

    x0: np.ndarray
    R: np.ndarray
    S: np.ndarray
    alpha0: float
    sh: np.ndarray  # (3, n_coeffs)

    def __post_init__(self):
        x0 = np.asarray(self.x0, dtype=np.float64)
        R = np.asarray(self.R, dtype=np.float64)
        S = np.asarray(self.S, dtype=np.float64)
        sh = np.asarray(self.sh, dtype=np.float64)
        if x0.shape != (3,) or S.shape != (3,):
            raise ShapeError("x0 and S must be 3-vectors")
        if np.any(S <= 0):
            raise InvalidParameterError(f"scales must be strictly positive, got {S}")
        if not 0.0 <= self.alpha0 <= 1.0:
            raise InvalidParameterError(f"alpha0 must be in [0,1], got {self.alpha0}")
        if not is_rotation_matrix(R):
            raise InvalidParameterError("R must be orthonormal with det +1")
        if sh.ndim != 2 or sh.shape[0] != 3 or int(np.sqrt(sh.shape[1])) ** 2 != sh.shape[1]:
            raise ShapeError(f"sh block must be (3, (deg+1)^2), got {sh.shape}")
        object.__setattr__(self, "x0", x0)
        object.__setattr__(self, "R", R)
        object.__setattr__(self, "S", S)
        object.__setattr__(self, "sh", sh)

    @property
    def degree(self) -> int:
        return int(np.sqrt(self.sh.shape[1])) - 1


@dataclass(frozen=True)
class SkinnedGaussian:
    """A Gaussian primitive extended with skinning weights, displacement, AO."""

    base: GaussianPrimitive
    w: np.ndarray
    delta_x: np.ndarray
    ao: float

    def __post_init__(self):
        w = np.asarray(self.w, dtype=np.float64)
        dx = np.asarray(self.delta_x, dtype=np.float64)
        if w.ndim != 1 or np.any(w < 0):
            raise InvalidParameterError("weights must be a non-negative vector")
        s = w.sum()
        if s <= 0:
            raise InvalidParameterError("weights must not all be zero")
        if abs(s - 1.0) > 1e-6:
            w = w / s
        if dx.shape != (3,):
            raise ShapeError("delta_x must be a 3-vector")
        if not 0.0 <= self.ao <= 1.0:
            raise InvalidParameterError(f"ao must be in [0,1], got {self.ao}")
        object.__setattr__(self, "w", w)
        object.__setattr__(self, "delta_x", dx)


@dataclass(frozen=True)
class Covariance3:
    """3x3 symmetric positive-semidefinite covariance."""

    sigma: np.ndarray

    def __post_init__(self):
        s = np.asarray(self.sigma, dtype=np.float64)
        if s.shape != (3, 3):
            raise ShapeError("sigma must be 3x3")
        if np.max(np.abs(s - s.T)) > 1e-12:
            raise DegenerateCovarianceError("sigma must be symmetric")
        if np.min(np.linalg.eigvalsh(s)) < -1e-10:
            raise DegenerateCovarianceError("sigma must be positive semidefinite")
        object.__setattr__(self, "sigma", s)


def build_covariance(R: np.ndarray, S: np.ndarray) -> Covariance3:
    """Sigma = R diag(S) diag(S) R^T."""
    S = np.asarray(S, dtype=np.float64)
    if np.any(S <= 0):
        raise InvalidParameterError(f"scales must be strictly positive, got {S}")
    R = np.asarray(R, dtype=np.float64)
    M = R * S[np.newaxis, :]
    sig = M @ M.T
    return Covariance3(0.5 * (sig + sig.T))


def covariance_from_quat_scale(quat: np.ndarray, scale: np.ndarray) -> np.ndarray:
    """Batched Sigma_c for the cloud: (N,4),(N,3) -> (N,3,3)."""
    R = quat_to_rotmat(quat)
    M = R * scale[..., np.newaxis, :]
    return M @ np.swapaxes(M, -1, -2)


def covariance_backward(
    quat: np.ndarray, scale: np.ndarray, d_sigma: np.ndarray
) -> tuple[np.ndarray, np.ndarray]:
    """Gradients of Sigma = R D R^T (D = diag(scale^2)) w.r.t. raw quat and scale."""
    from .mathutil import quat_to_rotmat_backward

    R = quat_to_rotmat(quat)
    G = 0.5 * (d_sigma + np.swapaxes(d_sigma, -1, -2))
    D = scale**2
    # dSigma/dR: gR = 2 G R D
    gR = 2.0 * G @ (R * D[..., np.newaxis, :])
    g_quat = quat_to_rotmat_backward(quat, gR)
    # dSigma/ds_k = 2 s_k (R^T G R)_kk
    RtGR = np.swapaxes(R, -1, -2) @ G @ R
    g_scale = 2.0 * scale * np.einsum("...kk->...k", RtGR)
    return g_quat, g_scale


def eval_opacity(x: np.ndarray, g: GaussianPrimitive) -> float:
    """alpha0 * exp(-1/2 (x-x0)^T Sigma^-1 (x-x0))."""
    cov = build_covariance(g.R, g.S).sigma
    det = np.linalg.det(cov)
    if det <= 0 or not np.isfinite(det):
        raise DegenerateCovarianceError("covariance not invertible")
    d = np.asarray(x, dtype=np.float64) - g.x0
    q = d @ np.linalg.solve(cov, d)
    return float(g.alpha0 * np.exp(-0.5 * q))


def eval_sh(sh: np.ndarray, d: np.ndarray, basis: SHBasis | None = None) -> np.ndarray:
    """View-dependent color: clamp(sum_k sh[:,k] * Y_k(d) + 0.5, 0)."""
    sh = np.asarray(sh)
    d = np.asarray(d)
    nrm = np.linalg.norm(d, axis=-1)
    if np.any(np.abs(nrm - 1.0) > 1e-6):
        raise InvalidParameterError("direction must be unit length")
    if basis is None:
        deg = int(np.sqrt(sh.shape[-1])) - 1
        basis = SHBasis(deg)
    if sh.shape[-1] != basis.n_coeffs:
        raise ShapeError(
            f"sh block has {sh.shape[-1]} coeffs per channel, basis wants {basis.n_coeffs}"
        )
    Y = basis.evaluate(d)
    rgb = np.einsum("...ck,...k->...c", sh, Y) + 0.5
    return np.maximum(rgb, 0.0)


def modulate_ao(ao: float | np.ndarray, c: np.ndarray) -> np.ndarray:
    """Component-wise ambient-occlusion scaling of an rgb color."""
    return np.asarray(ao)[..., np.newaxis] * c if np.ndim(ao) else ao * np.asarray(c)


@dataclass
class GaussianCloud:
    """Struct-of-arrays canonical cloud, the renderer/optimizer currency.

    Raw (pre-activation) parameters are stored: quaternions unnormalized,
    ``log_scale`` mapped through scale_floor + exp, ``opacity_raw`` through a
    sigmoid.  Skinning weights and the region weight ``tau`` are frozen at
    initialization.
    """

    x0: np.ndarray  # (N, 3)
    quat: np.ndarray  # (N, 4) raw
    log_scale: np.ndarray  # (N, 3) raw
    opacity_raw: np.ndarray  # (N,) raw
    sh: np.ndarray  # (N, 3, n_coeffs)
    weights: np.ndarray  # (N, n_b)
    tau: np.ndarray  # (N,)
    labels: np.ndarray = field(default=None)  # (N,) uint8 region tag of parent vertex

    SCALE_FLOOR = 1e-7

    def __post_init__(self):
        n = self.x0.shape[0]
        if self.x0.shape != (n, 3) or self.quat.shape != (n, 4):
            raise ShapeError("x0 must be (N,3) and quat (N,4)")
        if self.log_scale.shape != (n, 3) or self.opacity_raw.shape != (n,):
            raise ShapeError("log_scale must be (N,3) and opacity_raw (N,)")
        if self.sh.ndim != 3 or self.sh.shape[0] != n or self.sh.shape[1] != 3:
            raise ShapeError("sh must be (N,3,n_coeffs)")
        if self.weights.ndim != 2 or self.weights.shape[0] != n:
            raise ShapeError("weights must be (N,n_b)")
        if self.tau.shape != (n,):
            raise ShapeError("tau must be (N,)")
        wsum = self.weights.sum(axis=1)
        if n and np.max(np.abs(wsum - 1.0)) > 1e-6:
            self.weights = self.weights / wsum[:, np.newaxis]
        if self.labels is None:
            self.labels = np.zeros(n, dtype=np.uint8)

    def __len__(self) -> int:
        return self.x0.shape[0]

    @property
    def n_joints(self) -> int:
        return self.weights.shape[1]

    @property
    def sh_degree(self) -> int:
        return int(np.sqrt(self.sh.shape[2])) - 1

    def scales(self) -> np.ndarray:
        return self.SCALE_FLOOR + np.exp(self.log_scale)

    def opacities(self) -> np.ndarray:
        from .mathutil import sigmoid

        return sigmoid(self.opacity_raw)

    def astype(self, dtype) -> "GaussianCloud":
        return GaussianCloud(
            x0=self.x0.astype(dtype),
            quat=self.quat.astype(dtype),
            log_scale=self.log_scale.astype(dtype),
            opacity_raw=self.opacity_raw.astype(dtype),
            sh=self.sh.astype(dtype),
            weights=self.weights.astype(dtype),
            tau=self.tau.astype(dtype),
            labels=self.labels.copy(),
        )

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(
            x0=self.x0.copy(),
            quat=self.quat.copy(),
            log_scale=self.log_scale.copy(),
            opacity_raw=self.opacity_raw.copy(),
            sh=self.sh.copy(),
            weights=self.weights.copy(),
            tau=self.tau.copy(),
            labels=self.labels.copy(),
        )
