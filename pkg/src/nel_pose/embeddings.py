"""Surface models, an analytic key/query embedding oracle, and correspondence probabilities.

The oracle replaces learned query/key networks. Keys are smooth functions of
object coordinates: cos/sin features along the six icosahedral axes (a
conformal map, so key similarity decreases with surface distance the same
way in every direction), mixed by a seeded per-class orthogonal matrix.
Queries are ground-truth keys pushed off by tangent-space noise.
"""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping

import numpy as np

from . import _kernels
from .renderer import RenderOutput, TriangleMesh

_PHI = (1.0 + math.sqrt(5.0)) / 2.0
ICOSAHEDRAL_AXES = np.array(
    [[0, 1, _PHI], [0, -1, _PHI], [1, _PHI, 0], [-1, _PHI, 0], [_PHI, 0, 1], [_PHI, 0, -1]], dtype=np.float64
) / math.sqrt(1.0 + _PHI * _PHI)


@dataclass(frozen=True)
class OracleEmbedConfig:
    """Knobs of the analytic embedding oracle.

    ``temperature`` multiplies unit queries, so ``q . g`` is the softmax logit.
    ``symmetric_classes`` get keys that are invariant to spins about the
    object z axis (what a learned model converges to for such objects).
    """

    embed_dim: int = 12
    seed: int = 0
    query_noise: float = 0.03
    background_seed: int = 1
    temperature: float = 500.0
    wavelength: float = 250.0
    symmetric_classes: tuple[int, ...] = ()

    def __post_init__(self):
        if self.embed_dim < 2:
            raise ValueError("embed_dim must be >= 2")
        if self.query_noise < 0:
            raise ValueError("query_noise must be >= 0")
        if not (self.temperature > 0 and self.wavelength > 0):
            raise ValueError("temperature and wavelength must be > 0")
        object.__setattr__(self, "symmetric_classes", tuple(int(c) for c in self.symmetric_classes))


@lru_cache(maxsize=256)
def _mixing_matrix(seed: int, class_id: int, embed_dim: int) -> np.ndarray:
    n_feat = 2 * len(ICOSAHEDRAL_AXES)
    rng = np.random.default_rng([seed, class_id, 0x6B6579])
    a = rng.normal(size=(max(embed_dim, n_feat), min(embed_dim, n_feat)))
    q, r = np.linalg.qr(a)
    q = q * np.sign(np.diag(r))
    w = q if embed_dim >= n_feat else q.T
    w = np.ascontiguousarray(w)
    w.flags.writeable = False
    return w


def key_embed(class_id: int, x: np.ndarray, cfg: OracleEmbedConfig) -> np.ndarray:
    """Unit key embedding(s) for object-frame point(s) ``x``; deterministic."""
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = np.ascontiguousarray(x.reshape(-1, 3))
    out = _kernels.fourier_keys(
        pts,
        ICOSAHEDRAL_AXES,
        2.0 * math.pi / cfg.wavelength,
        _mixing_matrix(cfg.seed, int(class_id), cfg.embed_dim),
        int(class_id) in cfg.symmetric_classes,
    )
    return out[0] if single else out


@dataclass(eq=False)
class SurfaceModel:
    """Surface samples Z_t with their keys, plus hypothesis keypoints."""

    class_id: int
    points: np.ndarray
    keys: np.ndarray
    keypoints: np.ndarray
    embed: OracleEmbedConfig = field(default_factory=OracleEmbedConfig)

    def __post_init__(self):
        if len(self.points) < 1:
            raise ValueError("a surface model needs at least one sample")
        if len(self.points) != len(self.keys):
            raise ValueError("points and keys differ in length")

    @property
    def embed_dim(self) -> int:
        return self.keys.shape[1]

    def key_embed(self, x: np.ndarray) -> np.ndarray:
        return key_embed(self.class_id, x, self.embed)

    def to_bytes(self) -> bytes:
        """``NELS`` blob: int32 header (class, |Z|, E, n_k), float32 LE payload."""
        head = b"NELS" + struct.pack("<4i", self.class_id, len(self.points), self.embed_dim, len(self.keypoints))
        body = np.concatenate([self.points.ravel(), self.keys.ravel(), self.keypoints.ravel()])
        return head + body.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes, embed: OracleEmbedConfig | None = None) -> SurfaceModel:
        if blob[:4] != b"NELS":
            raise ValueError("not a surface-model blob")
        class_id, n, e, n_k = struct.unpack("<4i", blob[4:20])
        data = np.frombuffer(blob[20:], dtype="<f4").astype(np.float64)
        if data.size != n * 3 + n * e + n_k * 3:
            raise ValueError("surface-model blob has the wrong payload size")
        pts = data[: n * 3].reshape(n, 3)
        keys = data[n * 3 : n * 3 + n * e].reshape(n, e)
        kps = data[n * 3 + n * e :].reshape(n_k, 3)
        return cls(class_id, pts, keys, kps, embed or OracleEmbedConfig(embed_dim=e))


@dataclass(eq=False)
class QueryMaps:
    """Per-class query images (M, H, W, E) and their log-normalizers (M, H, W).

    Class ``t`` lives at index ``t - 1``.
    """

    queries: np.ndarray
    log_normalizers: np.ndarray

    def __post_init__(self):
        if self.queries.shape[:3] != self.log_normalizers.shape:
            raise ValueError("query and log-normalizer shapes disagree")
        if not np.all(np.isfinite(self.log_normalizers)):
            raise ValueError("log-normalizers must be finite")

    @property
    def num_classes(self) -> int:
        return self.queries.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.queries.shape[1:3]

    def for_class(self, class_id: int) -> np.ndarray:
        return self.queries[class_id - 1]

    def to_bytes(self) -> bytes:
        """``NELQ`` blob: int32 header (M, H, W, E), float32 LE payload."""
        m, h, w, e = self.queries.shape
        head = b"NELQ" + struct.pack("<4i", m, h, w, e)
        body = np.concatenate([self.queries.ravel(), self.log_normalizers.ravel()])
        return head + body.astype("<f4").tobytes()

    @classmethod
    def from_bytes(cls, blob: bytes) -> QueryMaps:
        if blob[:4] != b"NELQ":
            raise ValueError("not a query-map blob")
        m, h, w, e = struct.unpack("<4i", blob[4:20])
        data = np.frombuffer(blob[20:], dtype="<f4").astype(np.float64)
        if data.size != m * h * w * (e + 1):
            raise ValueError("query-map blob has the wrong payload size")
        q = data[: m * h * w * e].reshape(m, h, w, e)
        return cls(q, data[m * h * w * e :].reshape(m, h, w))


# ---------------------------------------------------------------------------
# surface sampling
# ---------------------------------------------------------------------------


def farthest_point_sample(
    mesh: TriangleMesh, count: int, seed: int = 0, pool_size: int = 4096, return_distances: bool = False
):
    """Greedy farthest point sampling over a dense uniform surface pool.

    Starts from the pool point nearest the pool centroid. With
    ``return_distances`` also returns, for each pick after the first, its
    distance to the previously chosen set (a non-increasing sequence).
    """
    if count < 1:
        raise ValueError("count must be >= 1")
    if count > pool_size:
        raise ValueError(f"cannot pick {count} points from a pool of {pool_size}")
    pool = mesh.sample_surface(pool_size, np.random.default_rng(seed))
    first = int(np.argmin(np.linalg.norm(pool - pool.mean(axis=0), axis=1)))
    chosen = [first]
    min_d = np.linalg.norm(pool - pool[first], axis=1)
    gaps = []
    for _ in range(count - 1):
        nxt = int(np.argmax(min_d))
        gaps.append(float(min_d[nxt]))
        chosen.append(nxt)
        min_d = np.minimum(min_d, np.linalg.norm(pool - pool[nxt], axis=1))
    pts = pool[chosen]
    return (pts, np.array(gaps)) if return_distances else pts


def build_surface_model(
    class_id: int,
    mesh: TriangleMesh,
    cfg: OracleEmbedConfig,
    n_samples: int = 1024,
    n_keypoints: int = 8,
    seed: int = 0,
) -> SurfaceModel:
    rng = np.random.default_rng([seed, class_id, 0x5A])
    pts = mesh.sample_surface(n_samples, rng)
    keypoints = farthest_point_sample(mesh, n_keypoints, seed=seed + 7919 * class_id)
    return SurfaceModel(class_id, pts, key_embed(class_id, pts, cfg), keypoints, cfg)


# ---------------------------------------------------------------------------
# queries and correspondences
# ---------------------------------------------------------------------------


def _random_unit(rng: np.random.Generator, shape: tuple[int, ...]) -> np.ndarray:
    v = rng.normal(size=shape)
    return v / np.linalg.norm(v, axis=-1, keepdims=True)


def perturb_on_sphere(g: np.ndarray, sigma: float, rng: np.random.Generator) -> np.ndarray:
    """Tangent-space Gaussian noise on unit vectors, then re-normalize."""
    if sigma == 0.0:
        return g.copy()
    n = rng.normal(0.0, sigma, size=g.shape)
    n -= np.sum(n * g, axis=-1, keepdims=True) * g
    out = g + n
    return out / np.linalg.norm(out, axis=-1, keepdims=True)


def make_query_maps(
    gt_render: RenderOutput,
    surface_models: Mapping[int, SurfaceModel],
    cfg: OracleEmbedConfig,
    rng: np.random.Generator,
    num_classes: int | None = None,
) -> QueryMaps:
    """Oracle query maps from a ground-truth render.

    Pixels of class t get a noisy copy of their true key in map t; every other
    pixel of map t holds a random unit vector drawn from
    ``cfg.background_seed``. All queries are scaled by the temperature and the
    log-normalizer is taken against Z_t.
    """
    h, w = gt_render.shape
    m = num_classes if num_classes is not None else max(surface_models)
    e = cfg.embed_dim
    queries = np.empty((m, h, w, e))
    lognorm = np.empty((m, h, w))
    for t in range(1, m + 1):
        q = _random_unit(np.random.default_rng([cfg.background_seed, t, h, w]), (h, w, e))
        if t in surface_models:
            sel = gt_render.segmentation == t
            if sel.any():
                true_keys = key_embed(t, gt_render.object_coords[sel], cfg)
                q[sel] = perturb_on_sphere(true_keys, cfg.query_noise, rng)
        q *= cfg.temperature
        queries[t - 1] = q
        if t in surface_models:
            ln, _, _ = _kernels.query_statistics(np.ascontiguousarray(q.reshape(-1, e)), surface_models[t].keys)
            lognorm[t - 1] = ln.reshape(h, w)
        else:
            lognorm[t - 1] = 0.0
    return QueryMaps(queries, lognorm)


def correspondence_prob(q: np.ndarray, model: SurfaceModel) -> np.ndarray:
    """Softmax of ``q . g_t(x)`` over the surface samples (max-shifted)."""
    q = np.asarray(q, dtype=np.float64)
    if q.shape[-1] != model.embed_dim:
        raise ValueError(f"query has dimension {q.shape[-1]}, model expects {model.embed_dim}")
    logits = model.keys @ q
    logits = logits - logits.max()
    p = np.exp(logits)
    return p / p.sum()
