"""Region-aware skinned 3D Gaussian avatars.

A CPU library for building, deforming, rendering, and fitting skinned
3D Gaussian human models: geodesic soft-mask initialization on a labeled
mesh, two-band multi-resolution hash parameter fields conditioned on
orthographic depth/normal priors, linear-blend-skinning deformation,
tiled EWA splatting with ambient occlusion, and analytic gradients for
optimization against rendered targets.
"""

import os

# BLAS reductions are not bitwise reproducible across thread counts; every
# matmul in this library is small, so pin BLAS to one thread before numpy
# spins up its pools.  The `--threads` knob only controls numba kernels.
for _var in ("OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS", "OMP_NUM_THREADS"):
    os.environ.setdefault(_var, "1")
# skip the TBB probe (noisy version warning in some environments)
os.environ.setdefault("NUMBA_THREADING_LAYER", "omp")

try:
    from threadpoolctl import threadpool_limits as _threadpool_limits

    _threadpool_limits(limits=1, user_api="blas")
except Exception:  # pragma: no cover - threadpoolctl is a hard dep, but stay usable
    pass

from .config import (
    BandConfig,
    FieldConfig,
    LossConfig,
    RegionProfile,
    RenderSettings,
    TrainConfig,
)
from .gaussians import (
    Covariance3,
    GaussianCloud,
    GaussianPrimitive,
    SHBasis,
    SkinnedGaussian,
    build_covariance,
    eval_opacity,
    eval_sh,
    modulate_ao,
)
from .skeleton import (
    BoneTransforms,
    PoseFrame,
    Rig,
    bone_transforms,
    lbs_point,
    lbs_rotation,
    warp_view_dir,
)
from .regions import (
    CanonicalMesh,
    GeodesicField,
    geodesic_distance,
    initialize_cloud,
    region_weight,
    sample_count,
)
from .fields import (
    HashGridBand,
    MultiScaleHashField,
    PriorPack,
    blended_query,
    decode_residuals,
    hash_query,
    query_ao,
    sample_depth_prior,
    sample_normal_prior,
    temporal_encoding,
)
from .render import (
    Camera,
    RenderTarget,
    project_gaussians,
    rasterize,
    rasterize_reference,
    render_avatar,
    render_priors,
)
from .training import (
    Adam,
    GradientSet,
    backward,
    dssim_loss,
    l1_loss,
    psnr,
    ssim,
    total_loss,
    train,
)
from .threads import get_num_threads, set_num_threads

__all__ = [
    "Adam",
    "BandConfig",
    "BoneTransforms",
    "Camera",
    "CanonicalMesh",
    "Covariance3",
    "FieldConfig",
    "GaussianCloud",
    "GaussianPrimitive",
    "GeodesicField",
    "GradientSet",
    "HashGridBand",
    "LossConfig",
    "MultiScaleHashField",
    "PoseFrame",
    "PriorPack",
    "RegionProfile",
    "RenderSettings",
    "RenderTarget",
    "Rig",
    "SHBasis",
    "SkinnedGaussian",
    "TrainConfig",
    "backward",
    "blended_query",
    "bone_transforms",
    "build_covariance",
    "decode_residuals",
    "dssim_loss",
    "eval_opacity",
    "eval_sh",
    "geodesic_distance",
    "get_num_threads",
    "hash_query",
    "initialize_cloud",
    "l1_loss",
    "lbs_point",
    "lbs_rotation",
    "modulate_ao",
    "project_gaussians",
    "psnr",
    "query_ao",
    "rasterize",
    "rasterize_reference",
    "region_weight",
    "render_avatar",
    "render_priors",
    "sample_count",
    "sample_depth_prior",
    "sample_normal_prior",
    "set_num_threads",
    "ssim",
    "temporal_encoding",
    "total_loss",
    "train",
    "warp_view_dir",
]
