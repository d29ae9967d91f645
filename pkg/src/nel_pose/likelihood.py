"""Per-pixel mixture likelihood of an observed point cloud given rendered scenes."""

from __future__ import annotations

import math
from functools import cached_property
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import _kernels
from .embeddings import QueryMaps, SurfaceModel
from .renderer import CameraIntrinsics, RenderOutput, SceneDescription, TriangleMesh, render

# renders evaluated per compiled call; bounds memory for large particle sets
_CHUNK = 32


@dataclass(frozen=True)
class LikelihoodConfig:
    """``patch=None`` lets every rendered pixel explain every observed pixel."""

    r: float = 5.0
    p_background: float = 1e-9
    epsilon: float = 0.1
    patch: tuple[int, int] | None = (10, 10)

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError("r must be > 0")
        if not 0 < self.epsilon < 1:
            raise ValueError("epsilon must lie in (0, 1)")
        if not self.p_background > 0:
            raise ValueError("p_background must be > 0")
        if self.patch is not None:
            ph, pw = self.patch
            if ph < 1 or pw < 1:
                raise ValueError("patch must be at least (1, 1)")
            object.__setattr__(self, "patch", (int(ph), int(pw)))

    def patch_for(self, shape: tuple[int, int]) -> tuple[int, int]:
        if self.patch is None:
            # centred windows of this size reach every pixel from every pixel
            return (2 * shape[0] - 1, 2 * shape[1] - 1)
        return self.patch


@dataclass(eq=False)
class Observation:
    point_cloud: np.ndarray
    query_maps: QueryMaps
    data_mask: np.ndarray | None = None

    def __post_init__(self):
        self.point_cloud = np.ascontiguousarray(self.point_cloud, dtype=np.float64)
        h, w = self.point_cloud.shape[:2]
        if self.point_cloud.shape != (h, w, 3):
            raise ValueError("point cloud must be H x W x 3")
        if tuple(self.query_maps.shape) != (h, w):
            raise ValueError(f"query maps are {self.query_maps.shape}, point cloud is {(h, w)}")
        if self.data_mask is None:
            self.data_mask = self.point_cloud[..., 2] > 0
        self.data_mask = np.ascontiguousarray(self.data_mask, dtype=np.bool_)
        if self.data_mask.shape != (h, w):
            raise ValueError("data mask shape does not match the point cloud")

    @property
    def shape(self) -> tuple[int, int]:
        return self.data_mask.shape

    @property
    def valid(self) -> np.ndarray:
        return self.point_cloud[..., 2] > 0

    @cached_property
    def points(self) -> np.ndarray:
        """Observed points that are valid and inside the data mask, row-major."""
        return self.point_cloud[self.data_mask & self.valid]

    @cached_property
    def tree(self) -> cKDTree:
        return cKDTree(self.points if len(self.points) else np.zeros((0, 3)))


def depth_kernel(c, c_tilde, r: float) -> float:
    """Uniform density on the radius-r ball around ``c_tilde``."""
    if not r > 0:
        raise ValueError("r must be > 0")
    dist = float(np.linalg.norm(np.asarray(c, dtype=np.float64) - np.asarray(c_tilde, dtype=np.float64)))
    return 1.0 / (4.0 / 3.0 * math.pi * r**3) if dist <= r else 0.0


def rendered_keys(rend: RenderOutput, surface_models: Mapping[int, SurfaceModel]) -> np.ndarray:
    """Key embedding of every rendered foreground pixel (zeros elsewhere)."""
    idx, _, _, keys = pack_render(rend, surface_models)
    out = np.zeros(idx.shape + (keys.shape[1],))
    out[idx >= 0] = keys
    return out


def pack_render(rend: RenderOutput, surface_models: Mapping[int, SurfaceModel]):
    """Compact foreground storage: (index map, points, classes, keys), rows in row-major pixel order."""
    seg = rend.segmentation
    flat = np.flatnonzero(seg > 0)
    idx = np.full(seg.shape, -1, dtype=np.int32)
    idx.flat[flat] = np.arange(len(flat), dtype=np.int32)
    xyz = rend.point_cloud.reshape(-1, 3)[flat]
    cls = seg.flat[flat].astype(np.int32)
    coords = rend.object_coords.reshape(-1, 3)[flat]
    dims = {m.embed_dim for m in surface_models.values()}
    if len(dims) != 1:
        raise ValueError("surface models disagree on the embedding dimension")
    keys = np.empty((len(flat), dims.pop()))
    for c in np.unique(cls):
        sel = cls == c
        keys[sel] = surface_models[int(c)].key_embed(coords[sel])
    return idx, xyz, cls, keys


def fg_log_weight(k_tilde: int, cfg: LikelihoodConfig) -> float:
    """log((1 - eps) / K~ * ball density); -inf when nothing is rendered."""
    if k_tilde == 0:
        return -math.inf
    return math.log1p(-cfg.epsilon) - math.log(k_tilde) - math.log(4.0 / 3.0 * math.pi * cfg.r**3)


def _check(obs: Observation, rend: RenderOutput):
    if rend.shape != obs.shape:
        raise ValueError(f"render is {rend.shape}, observation is {obs.shape}")


def _intrinsics(cam: CameraIntrinsics | None) -> np.ndarray:
    if cam is None:
        return np.zeros(4)
    return np.array([cam.fx, cam.fy, cam.cx, cam.cy], dtype=np.float64)


def log_likelihood(
    obs: Observation,
    rend: RenderOutput,
    surface_models: Mapping[int, SurfaceModel],
    cfg: LikelihoodConfig,
    cam: CameraIntrinsics | None = None,
) -> float:
    """Mixture log-likelihood of the observation under one render.

    Passing the render camera only speeds up the pixel scan.
    """
    _check(obs, rend)
    ph, pw = cfg.patch_for(obs.shape)
    qm = obs.query_maps
    idx, xyz, cls, keys = pack_render(rend, surface_models)
    return float(
        _kernels.log_likelihood_kernel(
            obs.point_cloud, obs.data_mask, qm.queries, qm.log_normalizers, idx, xyz, cls, keys,
            fg_log_weight(len(cls), cfg), math.log(cfg.p_background), float(cfg.r), ph, pw, _intrinsics(cam),
        )
    )


def batch_log_likelihood(
    obs: Observation,
    renders: Sequence[RenderOutput],
    surface_models: Mapping[int, SurfaceModel],
    cfg: LikelihoodConfig,
    cam: CameraIntrinsics | None = None,
) -> np.ndarray:
    """Log-likelihood of each render; each entry equals the single-render call bit for bit."""
    if len(renders) == 0:
        raise ValueError("empty batch")
    for rend in renders:
        _check(obs, rend)
    ph, pw = cfg.patch_for(obs.shape)
    qm = obs.query_maps
    out = np.empty(len(renders))
    for lo in range(0, len(renders), _CHUNK):
        packs = [pack_render(r, surface_models) for r in renders[lo : lo + _CHUNK]]
        offsets = np.zeros(len(packs) + 1, dtype=np.int64)
        offsets[1:] = np.cumsum([len(p[2]) for p in packs])
        out[lo : lo + len(packs)] = _kernels.batch_log_likelihood_kernel(
            obs.point_cloud,
            obs.data_mask,
            qm.queries,
            qm.log_normalizers,
            np.stack([p[0] for p in packs]),
            offsets,
            np.concatenate([p[1] for p in packs]),
            np.concatenate([p[2] for p in packs]),
            np.concatenate([p[3] for p in packs]),
            np.array([fg_log_weight(len(p[2]), cfg) for p in packs]),
            math.log(cfg.p_background),
            float(cfg.r),
            ph,
            pw,
            _intrinsics(cam),
        )
    return out


@dataclass(eq=False)
class SceneScorer:
    """Renders scene descriptions and scores them against a fixed observation."""

    obs: Observation
    meshes: Mapping[int, TriangleMesh]
    surface_models: Mapping[int, SurfaceModel]
    cam: CameraIntrinsics
    cfg: LikelihoodConfig = field(default_factory=LikelihoodConfig)

    def render(self, scene: SceneDescription) -> RenderOutput:
        return render(scene, self.meshes, self.cam)

    def score(self, scene: SceneDescription) -> float:
        return log_likelihood(self.obs, self.render(scene), self.surface_models, self.cfg, self.cam)

    def score_many(self, scenes: Sequence[SceneDescription]) -> np.ndarray:
        out = np.empty(len(scenes))
        for lo in range(0, len(scenes), _CHUNK):
            chunk = [self.render(s) for s in scenes[lo : lo + _CHUNK]]
            out[lo : lo + len(chunk)] = batch_log_likelihood(self.obs, chunk, self.surface_models, self.cfg, self.cam)
        return out
