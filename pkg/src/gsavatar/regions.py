"""Region-aware construction of the canonical Gaussian cloud.

High-detail regions (face, hands) are marked on the mesh; a geodesic
distance field to those vertices drives a soft mask ``tau`` that scales the
per-vertex sample count between a base and a maximum.  Every sampled point
duplicates its parent vertex's skinning weights, so the cloud deforms
exactly like the surface it came from.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import dijkstra

from .config import RegionProfile
from .gaussians import GaussianCloud, ShapeError

TORSO, FACE, HAND = 0, 1, 2
LABEL_NAMES = {TORSO: "torso", FACE: "face", HAND: "hand"}
LABEL_CODES = {v: k for k, v in LABEL_NAMES.items()}

_FALLBACK_SPACING = 0.01  # meters, for vertices without incident edges


@dataclass(frozen=True)
class CanonicalMesh:
    """Labeled triangle mesh with per-vertex skinning weights."""

    vertices: np.ndarray  # (V, 3)
    faces: np.ndarray  # (F, 3) int
    skin_weights: np.ndarray  # (V, n_b)
    labels: np.ndarray  # (V,) int region codes

    def __post_init__(self):
        v = np.asarray(self.vertices, dtype=np.float64)
        f = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        w = np.asarray(self.skin_weights, dtype=np.float64)
        lab = np.asarray(self.labels, dtype=np.uint8)
        nv = v.shape[0]
        if v.ndim != 2 or v.shape[1] != 3:
            raise ShapeError("vertices must be (V,3)")
        if f.size and (f.min() < 0 or f.max() >= nv):
            raise ValueError("face indices out of range")
        if w.shape[0] != nv or w.ndim != 2:
            raise ShapeError("skin_weights must be (V,n_b)")
        if lab.shape != (nv,):
            raise ShapeError("labels must be (V,)")
        if np.any(w < 0):
            raise ValueError("skinning weights must be non-negative")
        sums = w.sum(axis=1)
        if np.any(sums <= 0):
            raise ValueError("every vertex needs a nonzero weight row")
        w = w / sums[:, np.newaxis]
        if not set(np.unique(lab)).issubset({TORSO, FACE, HAND}):
            raise ValueError("labels must be torso/face/hand codes")
        object.__setattr__(self, "vertices", v)
        object.__setattr__(self, "faces", f)
        object.__setattr__(self, "skin_weights", w)
        object.__setattr__(self, "labels", lab)

    @property
    def n_vertices(self) -> int:
        return self.vertices.shape[0]

    @property
    def n_joints(self) -> int:
        return self.skin_weights.shape[1]

    def high_detail_vertices(self) -> np.ndarray:
        return np.flatnonzero(self.labels != TORSO)

    def edges(self) -> np.ndarray:
        """Unique undirected edges (E,2) from the triangle list."""
        if self.faces.size == 0:
            return np.zeros((0, 2), dtype=np.int64)
        f = self.faces
        e = np.concatenate([f[:, [0, 1]], f[:, [1, 2]], f[:, [2, 0]]], axis=0)
        e = np.sort(e, axis=1)
        return np.unique(e, axis=0)

    def mean_incident_edge_length(self) -> np.ndarray:
        """Per-vertex mean length of incident edges; fallback for isolated vertices."""
        out = np.full(self.n_vertices, _FALLBACK_SPACING)
        e = self.edges()
        if e.size == 0:
            return out
        lengths = np.linalg.norm(self.vertices[e[:, 0]] - self.vertices[e[:, 1]], axis=1)
        total = np.zeros(self.n_vertices)
        count = np.zeros(self.n_vertices)
        np.add.at(total, e[:, 0], lengths)
        np.add.at(total, e[:, 1], lengths)
        np.add.at(count, e[:, 0], 1.0)
        np.add.at(count, e[:, 1], 1.0)
        has = count > 0
        out[has] = total[has] / count[has]
        return out

    def bounds(self, margin: float = 0.0) -> tuple[np.ndarray, np.ndarray]:
        lo = self.vertices.min(axis=0)
        hi = self.vertices.max(axis=0)
        pad = (hi - lo) * margin
        return lo - pad, hi + pad


@dataclass(frozen=True)
class GeodesicField:
    """Per-vertex distance to the high-detail set and the soft region mask."""

    d: np.ndarray
    tau: np.ndarray

    def __post_init__(self):
        d = np.asarray(self.d, dtype=np.float64)
        tau = np.asarray(self.tau, dtype=np.float64)
        if d.shape != tau.shape:
            raise ShapeError("d and tau must match")
        if np.any(d < 0):
            raise ValueError("distances must be non-negative")
        if np.any((tau < 0) | (tau > 1)):
            raise ValueError("tau must lie in [0,1]")
        object.__setattr__(self, "d", d)
        object.__setattr__(self, "tau", tau)


def geodesic_distance(mesh: CanonicalMesh) -> np.ndarray:
    """Multi-source Dijkstra over the edge graph with Euclidean edge lengths.

    Sources are the face/hand vertices; unreachable vertices get +inf.
    """
    sources = mesh.high_detail_vertices()
    nv = mesh.n_vertices
    if sources.size == 0:
        return np.full(nv, np.inf)
    d = np.full(nv, np.inf)
    d[sources] = 0.0
    e = mesh.edges()
    if e.size == 0:
        return d
    lengths = np.linalg.norm(mesh.vertices[e[:, 0]] - mesh.vertices[e[:, 1]], axis=1)
    graph = coo_matrix((lengths, (e[:, 0], e[:, 1])), shape=(nv, nv)).tocsr()
    dist = dijkstra(graph, directed=False, indices=sources, min_only=True)
    return np.asarray(dist)


def region_weight(d: np.ndarray, sigma: float) -> np.ndarray:
    """Soft mask tau = exp(-d^2 / (2 sigma^2)); +inf distances map to 0."""
    if sigma <= 0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    d = np.asarray(d, dtype=np.float64)
    if np.any(d < 0):
        raise ValueError("distances must be non-negative")
    with np.errstate(over="ignore"):
        return np.exp(-(d * d) / (2.0 * sigma * sigma))


def geodesic_field(mesh: CanonicalMesh, sigma: float) -> GeodesicField:
    d = geodesic_distance(mesh)
    return GeodesicField(d=d, tau=region_weight(d, sigma))


def sample_count(tau, profile: RegionProfile):
    """K = round-half-up of K_b + (K_m - K_b) * tau."""
    tau = np.asarray(tau, dtype=np.float64)
    if np.any((tau < 0) | (tau > 1)):
        raise ValueError("tau must lie in [0,1]")
    k = np.floor(profile.k_base + (profile.k_max - profile.k_base) * tau + 0.5)
    k = k.astype(np.int64)
    return int(k) if k.ndim == 0 else k


def initialize_cloud(
    mesh: CanonicalMesh,
    profile: RegionProfile,
    n_joints: int | None = None,
    sh_degree: int = 3,
) -> GaussianCloud:
    """Builds the canonical skinned cloud: each vertex plus K(v) ball samples.

    Samples copy the parent vertex's skinning weights, region weight, and
    label.  Initial values: isotropic scale of a third of the local vertex
    spacing, opacity 0.5 (raw 0), zero SH, identity orientation.  Per-vertex
    RNG streams keyed on (seed, vertex) make the result independent of
    evaluation order.
    """
    if n_joints is not None and mesh.n_joints != n_joints:
        raise ShapeError(
            f"mesh weights cover {mesh.n_joints} joints, rig has {n_joints}"
        )
    field = geodesic_field(mesh, profile.sigma)
    counts = sample_count(field.tau, profile)
    spacing = mesh.mean_incident_edge_length()
    radius = (
        np.full(mesh.n_vertices, profile.neighborhood_radius)
        if profile.neighborhood_radius > 0
        else spacing
    )

    total = int(np.sum(1 + counts))
    x0 = np.zeros((total, 3))
    tau = np.zeros(total)
    labels = np.zeros(total, dtype=np.uint8)
    weights = np.zeros((total, mesh.n_joints))
    log_scale = np.zeros((total, 3))
    start = 0
    scale_raw = np.log(np.maximum(spacing / 3.0 - GaussianCloud.SCALE_FLOOR, 1e-12))
    for v in range(mesh.n_vertices):
        k = int(counts[v])
        end = start + 1 + k
        x0[start] = mesh.vertices[v]
        if k:
            rng = np.random.Generator(
                np.random.PCG64(np.random.SeedSequence((profile.seed, v)))
            )
            dirs = rng.standard_normal((k, 3))
            norms = np.linalg.norm(dirs, axis=1, keepdims=True)
            norms[norms < 1e-12] = 1.0
            rad = radius[v] * rng.uniform(0.0, 1.0, size=(k, 1)) ** (1.0 / 3.0)
            x0[start + 1 : end] = mesh.vertices[v] + dirs / norms * rad
        tau[start:end] = field.tau[v]
        labels[start:end] = mesh.labels[v]
        weights[start:end] = mesh.skin_weights[v]
        log_scale[start:end] = scale_raw[v]
        start = end

    n = total
    return GaussianCloud(
        x0=x0,
        quat=np.tile(np.array([1.0, 0.0, 0.0, 0.0]), (n, 1)),
        log_scale=log_scale,
        opacity_raw=np.zeros(n),
        sh=np.zeros((n, 3, (sh_degree + 1) ** 2)),
        weights=weights,
        tau=tau,
        labels=labels,
    )
