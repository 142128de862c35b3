import numpy as np
import pytest

from gsavatar.config import BandConfig, FieldConfig, RenderSettings
from gsavatar.fields import MultiScaleHashField, PriorPack
from gsavatar.gaussians import GaussianCloud
from gsavatar.mathutil import look_at
from gsavatar.regions import CanonicalMesh
from gsavatar.render import Camera, RenderTarget, render_priors
from gsavatar.skeleton import PoseFrame, Rig

# settings for gradient checking: huge footprint cutoff and no early
# termination keep the forward free of (measure-zero) discontinuities that
# finite differences could straddle
GRADCHECK_SETTINGS = RenderSettings(sigma_cutoff=7.0, term_threshold=0.0)


def small_field_config(multiscale=True, **kw) -> FieldConfig:
    base = dict(
        low_band=BandConfig(n_levels=3, base_resolution=4, growth_factor=1.7, log2_table_size=8),
        high_band=BandConfig(n_levels=2, base_resolution=14, max_resolution=24, log2_table_size=8),
        pe_freqs=2,
        hidden_dim=16,
        ao_hidden_dim=8,
        use_multiscale=multiscale,
    )
    base.update(kw)
    return FieldConfig(**base)


def sample_inside_cells(rng, field: MultiScaleHashField, n: int, lo=-0.5, hi=0.5, margin=0.05):
    """Points at least ``margin`` of a cell away from every grid face at every
    level, so central differences never straddle a trilinear kink."""
    bands = [field.low] + ([field.high] if field.high is not None else [])
    pts = []
    span = field.bbox_max - field.bbox_min
    while len(pts) < n:
        x = rng.uniform(lo, hi, 3)
        ok = True
        for band in bands:
            for r in band.resolutions:
                f = ((x - field.bbox_min) / span * r) % 1.0
                if np.any(f < margin) or np.any(f > 1.0 - margin):
                    ok = False
                    break
            if not ok:
                break
        if ok:
            pts.append(x)
    return np.asarray(pts)


def make_scene(seed=0, n=12, n_joints=2, dtype=np.float64, multiscale=True,
               size=32, field_kw=None, ao_frozen=False):
    """Random small scene for gradient checks and renderer tests."""
    rng = np.random.default_rng(seed)
    cfg = small_field_config(multiscale, **(field_kw or {}))
    bbmin = np.array([-1.0, -1.0, -1.0])
    bbmax = np.array([1.0, 1.0, 1.0])
    field = MultiScaleHashField.create(cfg, bbmin, bbmax, seed=seed, dtype=dtype)
    for p in field.parameters().values():
        p[...] = rng.normal(0.0, 0.3, p.shape).astype(dtype)
    x0 = sample_inside_cells(rng, field, n)
    cloud = GaussianCloud(
        x0=x0,
        quat=rng.normal(0, 1, (n, 4)) + np.array([2.0, 0.0, 0.0, 0.0]),
        log_scale=rng.uniform(np.log(0.05), np.log(0.15), (n, 3)),
        opacity_raw=rng.uniform(-1.0, 1.5, n),
        sh=rng.normal(0, 0.2, (n, 3, (cfg.sh_degree + 1) ** 2)),
        weights=rng.dirichlet(np.ones(n_joints), n),
        tau=rng.uniform(0, 1, n),
    ).astype(dtype)
    rig = Rig(
        parents=np.arange(-1, n_joints - 1),
        rest_positions=np.stack(
            [np.zeros(n_joints), np.linspace(-0.3, 0.3, n_joints), np.zeros(n_joints)], axis=1
        ),
    )
    pose = PoseFrame(
        t=rng.uniform(0.1, 0.9),
        euler=rng.uniform(-0.4, 0.4, (n_joints, 3)),
        translation=rng.uniform(-0.05, 0.05, 3),
    )
    cam = Camera(
        W=look_at(np.array([0.3, 0.4, 2.2]) + rng.uniform(-0.1, 0.1, 3), [0, 0, 0]),
        fx=size * 1.25, fy=size * 1.25, cx=size / 2, cy=size / 2,
        width=size, height=size,
    )
    target = RenderTarget(height=size, width=size, background=rng.uniform(0, 1, 3))
    mesh = CanonicalMesh(
        vertices=np.array(
            [[-0.8, -0.8, 0.0], [0.8, -0.8, 0.0], [0.8, 0.8, 0.05], [-0.8, 0.8, 0.1]]
        ),
        faces=np.array([[0, 1, 2], [0, 2, 3]]),
        skin_weights=np.ones((4, n_joints)) / n_joints,
        labels=np.array([0, 0, 1, 1], dtype=np.uint8),
    )
    pack = render_priors(mesh, resolution=24, margin=0.3)
    return dict(
        cloud=cloud, field=field, rig=rig, pose=pose, cam=cam, target=target,
        pack=pack, settings=GRADCHECK_SETTINGS, ao_frozen=ao_frozen, rng=rng,
    )


def random_splats(rng, k, size, dtype=np.float64):
    """Random projected splats covering a size x size image."""
    from gsavatar.render import Splat2D

    mean2d = rng.uniform(-4.0, size + 4.0, (k, 2)).astype(dtype)
    # random PSD 2x2 with moderate anisotropy
    theta = rng.uniform(0, np.pi, k)
    l1 = rng.uniform(0.8, 18.0, k)
    l2 = rng.uniform(0.8, 18.0, k)
    ct, st = np.cos(theta), np.sin(theta)
    a = ct * ct * l1 + st * st * l2
    c = st * st * l1 + ct * ct * l2
    b = ct * st * (l1 - l2)
    cov2d = np.stack([a, b, c], axis=1).astype(dtype)
    return Splat2D(
        mean2d=mean2d,
        cov2d=cov2d,
        depth=rng.uniform(0.5, 10.0, k).astype(dtype),
        color=rng.uniform(0, 1, (k, 3)).astype(dtype),
        alpha0=rng.uniform(0.05, 0.95, k).astype(dtype),
    )


@pytest.fixture(scope="session", autouse=True)
def warm_kernels():
    """Compile the numba kernels once so timed tests measure algorithm cost."""
    from gsavatar.render import rasterize, rasterize_reference

    rng = np.random.default_rng(0)
    splats = random_splats(rng, 8, 16)
    target = RenderTarget(height=16, width=16)
    img, cache = rasterize(splats, target, RenderSettings(), want_cache=True)
    from gsavatar.render import rasterize_backward

    rasterize_backward(cache, np.ones_like(img))
    rasterize_reference(splats, target)
