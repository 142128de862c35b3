"""Configuration dataclasses shared across the pipeline.

Everything an end-to-end run needs is collected here so that a project file
round-trips losslessly: region profile for initialization, hash band layout,
render settings, loss weights, and the training schedule.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field


@dataclass(frozen=True)
class RegionProfile:
    """Controls the region-aware densification of the canonical mesh.

    ``sigma`` is the transition-band width of the geodesic soft mask in
    meters.  Per-vertex sample counts interpolate between ``k_base`` (plain
    body regions) and ``k_max`` (high-detail regions).  A
    ``neighborhood_radius`` of 0 means "use the mean incident edge length of
    each vertex" as the sampling radius.
    """

    sigma: float = 0.05
    k_base: int = 15
    k_max: int = 20
    neighborhood_radius: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.sigma <= 0:
            raise ValueError(f"sigma must be positive, got {self.sigma}")
        if not (self.k_max >= self.k_base >= 0):
            raise ValueError(
                f"need k_max >= k_base >= 0, got k_base={self.k_base} k_max={self.k_max}"
            )
        if self.neighborhood_radius < 0:
            raise ValueError("neighborhood_radius must be >= 0")


@dataclass(frozen=True)
class BandConfig:
    """One multi-resolution hash band: geometric level progression."""

    n_levels: int = 8
    base_resolution: int = 16
    max_resolution: int = 0  # 0: use growth_factor instead
    growth_factor: float = 1.38
    log2_table_size: int = 16
    feature_dim: int = 2

    def resolutions(self) -> list[int]:
        if self.n_levels < 1:
            raise ValueError("band needs at least one level")
        if self.max_resolution > 0 and self.n_levels > 1:
            import math

            g = math.exp(
                (math.log(self.max_resolution) - math.log(self.base_resolution))
                / (self.n_levels - 1)
            )
        else:
            g = self.growth_factor
        res = []
        prev = 0
        for lvl in range(self.n_levels):
            r = int(self.base_resolution * g**lvl)
            r = max(r, prev + 1)  # strictly increasing
            res.append(r)
            prev = r
        return res

    @property
    def table_size(self) -> int:
        return 1 << self.log2_table_size

    @property
    def output_dim(self) -> int:
        return self.n_levels * self.feature_dim


@dataclass(frozen=True)
class FieldConfig:
    """Layout of the multi-scale parameter field and its MLP decoders."""

    low_band: BandConfig = field(default_factory=BandConfig)
    high_band: BandConfig = field(
        default_factory=lambda: BandConfig(
            n_levels=4, base_resolution=256, max_resolution=1024, log2_table_size=16
        )
    )
    sh_degree: int = 3
    hidden_dim: int = 64
    ao_hidden_dim: int = 32
    pe_freqs: int = 4
    max_offset: float = 0.05
    init_scale: float = 1e-4  # uniform init range of hash table entries
    # ablation switches: each bypasses/zeroes one input or output block
    use_multiscale: bool = True
    use_hash_sh: bool = True
    use_hash_vd: bool = True
    use_depth_prior: bool = True
    use_normal_prior: bool = True
    use_time_in_decoder: bool = True

    def __post_init__(self):
        if not 0 <= self.sh_degree <= 3:
            raise ValueError(f"sh_degree must be in 0..3, got {self.sh_degree}")
        if self.pe_freqs < 0:
            raise ValueError("pe_freqs must be >= 0")

    @property
    def n_sh_coeffs(self) -> int:
        return (self.sh_degree + 1) ** 2

    @property
    def hash_dim(self) -> int:
        dim = self.low_band.output_dim
        if self.use_multiscale:
            dim += self.high_band.output_dim
        return dim

    @property
    def decoder_in_dim(self) -> int:
        return (
            self.hash_dim
            + 4  # four orthographic depth samples
            + 6  # front / back normal samples
            + (2 * self.pe_freqs if self.use_time_in_decoder else 0)
        )

    @property
    def decoder_out_dim(self) -> int:
        return 3 + 3 * self.n_sh_coeffs

    @property
    def ao_in_dim(self) -> int:
        return self.hash_dim + 2 * self.pe_freqs


@dataclass(frozen=True)
class RenderSettings:
    """Rasterizer knobs.

    ``sigma_cutoff`` bounds the splat footprint (Mahalanobis radius); the
    Gaussian is evaluated as exactly zero beyond it, in both the tiled and
    the reference path, so the two stay comparable.  ``term_threshold`` stops
    front-to-back blending once transmittance falls below it; the reference
    renderer ignores it.  Set it to 0 for an exact tiled render.
    """

    tile_size: int = 16
    sigma_cutoff: float = 3.0
    lowpass: float = 0.3
    term_threshold: float = 1e-4
    near_plane: float = 0.01

    def __post_init__(self):
        if self.tile_size < 1 or self.sigma_cutoff <= 0 or self.lowpass < 0:
            raise ValueError("invalid render settings")


@dataclass(frozen=True)
class LossConfig:
    """L1 / D-SSIM blend: total = (1-lam)*L1 + lam*D-SSIM."""

    lam: float = 0.2
    ssim_window: int = 11
    ssim_sigma: float = 1.5
    ssim_c1: float = 0.01**2
    ssim_c2: float = 0.03**2

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError(f"lambda must be in [0,1], got {self.lam}")


@dataclass(frozen=True)
class LearningRates:
    positions: float = 1.6e-4
    quaternions: float = 1e-3
    scales: float = 5e-3
    opacity: float = 5e-2
    hash_tables: float = 1e-2
    mlps: float = 1e-3
    skeleton: float = 1e-5
    sh: float = 2.5e-3  # only active when the SH hash field is disabled

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) <= 0:
                raise ValueError(f"learning rate {f.name} must be > 0")


@dataclass(frozen=True)
class TrainConfig:
    iterations: int = 2000
    lr: LearningRates = field(default_factory=LearningRates)
    ao_freeze_iters: int = 300
    ao_enabled: bool = True
    optimize_skeleton: bool = True
    seed: int = 0
    precision: str = "f32"  # "f32" | "f64"
    checkpoint_interval: int = 0  # 0: final checkpoint only

    def __post_init__(self):
        if self.ao_freeze_iters > self.iterations:
            raise ValueError("ao_freeze_iters must not exceed iterations")
        if self.precision not in ("f32", "f64"):
            raise ValueError(f"precision must be f32 or f64, got {self.precision}")


def _to_jsonable(obj):
    if dataclasses.is_dataclass(obj) and not isinstance(obj, type):
        return {f.name: _to_jsonable(getattr(obj, f.name)) for f in dataclasses.fields(obj)}
    if isinstance(obj, (list, tuple)):
        return [_to_jsonable(v) for v in obj]
    if isinstance(obj, dict):
        return {k: _to_jsonable(v) for k, v in obj.items()}
    return obj


def config_to_dict(cfg) -> dict:
    return _to_jsonable(cfg)


def config_from_dict(cls, data: dict):
    """Rebuild a (possibly nested) config dataclass from plain dicts."""
    kwargs = {}
    for f in dataclasses.fields(cls):
        if f.name not in data:
            continue
        val = data[f.name]
        ftype = f.type if isinstance(f.type, type) else None
        # nested dataclasses are resolved by name to keep this dependency-free
        nested = {
            "lr": LearningRates,
            "low_band": BandConfig,
            "high_band": BandConfig,
        }
        if f.name in nested and isinstance(val, dict):
            kwargs[f.name] = config_from_dict(nested[f.name], val)
        elif ftype is not None and dataclasses.is_dataclass(ftype) and isinstance(val, dict):
            kwargs[f.name] = config_from_dict(ftype, val)
        else:
            kwargs[f.name] = val
    return cls(**kwargs)


def config_hash(cfg) -> str:
    """Stable content hash of a config (used to stamp checkpoints)."""
    blob = json.dumps(config_to_dict(cfg), sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(blob.encode("utf-8")).hexdigest()
