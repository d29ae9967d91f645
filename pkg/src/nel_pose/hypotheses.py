"""Coarse pose hypotheses from spherical voting into voxel grids."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple

import numpy as np

from . import _kernels
from .embeddings import SurfaceModel
from .geometry import Pose, RotationGrid, quat_to_matrix


@dataclass(frozen=True)
class VoxelGridSpec:
    """``origin`` is the center of voxel (0, 0, 0); voxels are cubes of side ``d``."""

    origin: tuple[float, float, float] = (-350.0, -210.0, 530.0)
    dims: tuple[int, int, int] = (129, 87, 168)
    d: float = 5.0

    def __post_init__(self):
        if not self.d > 0:
            raise ValueError("voxel diameter must be > 0")
        if len(self.dims) != 3 or min(self.dims) < 1:
            raise ValueError("grid dims must be three positive integers")
        object.__setattr__(self, "origin", tuple(float(v) for v in self.origin))
        object.__setattr__(self, "dims", tuple(int(v) for v in self.dims))

    def center(self, index) -> np.ndarray:
        return np.asarray(self.origin) + self.d * np.asarray(index, dtype=np.float64)

    def index_of(self, points) -> np.ndarray:
        return np.rint((np.asarray(points, dtype=np.float64) - np.asarray(self.origin)) / self.d).astype(np.int64)


@dataclass(eq=False)
class VoxelGrid:
    spec: VoxelGridSpec
    values: np.ndarray

    @classmethod
    def zeros(cls, spec: VoxelGridSpec) -> VoxelGrid:
        return cls(spec, np.zeros(spec.dims))


class SphereVote(NamedTuple):
    center: np.ndarray
    radius: float
    weight: float


@dataclass(eq=False)
class SphereVotes:
    """Column-wise vote storage: centers (n, 3), radii (n,), weights (n,)."""

    centers: np.ndarray
    radii: np.ndarray
    weights: np.ndarray

    def __post_init__(self):
        self.centers = np.ascontiguousarray(self.centers, dtype=np.float64).reshape(-1, 3)
        self.radii = np.ascontiguousarray(self.radii, dtype=np.float64).reshape(-1)
        self.weights = np.ascontiguousarray(self.weights, dtype=np.float64).reshape(-1)
        if not len(self.centers) == len(self.radii) == len(self.weights):
            raise ValueError("vote arrays differ in length")
        if np.any(self.radii < 0) or np.any(self.weights < 0):
            raise ValueError("vote radii and weights must be >= 0")

    @classmethod
    def from_list(cls, votes) -> SphereVotes:
        votes = list(votes)
        if not votes:
            return cls(np.zeros((0, 3)), np.zeros(0), np.zeros(0))
        return cls(np.array([v.center for v in votes]), [v.radius for v in votes], [v.weight for v in votes])

    def __len__(self) -> int:
        return len(self.radii)

    def __iter__(self):
        for c, r, w in zip(self.centers, self.radii, self.weights):
            yield SphereVote(c, float(r), float(w))


@dataclass(frozen=True)
class HypothesesConfig:
    """``rotations_per_position`` keeps only that many best rotations per position."""

    n_keypoints: int = 8
    n_top_positions: int = 64
    n_hypotheses: int = 80
    nms_radius: int = 10
    grid: VoxelGridSpec = field(default_factory=VoxelGridSpec)
    n_axes: int = 200
    n_inplane: int = 32
    rotations_per_position: int | None = None

    def __post_init__(self):
        if self.n_top_positions < 1 or self.n_hypotheses < 1 or self.n_keypoints < 1:
            raise ValueError("n_keypoints, n_top_positions and n_hypotheses must be >= 1")
        per_pos = self.n_axes * self.n_inplane
        if self.rotations_per_position is not None:
            if self.rotations_per_position < 1:
                raise ValueError("rotations_per_position must be >= 1")
            per_pos = min(per_pos, self.rotations_per_position)
        if self.n_hypotheses > self.n_top_positions * per_pos:
            raise ValueError("n_hypotheses exceeds the number of scored candidates")
        if self.nms_radius < 0:
            raise ValueError("nms_radius must be >= 0")


class Hypothesis(NamedTuple):
    pose: Pose
    score: float


# ---------------------------------------------------------------------------
# voting
# ---------------------------------------------------------------------------


def shell_membership(offset, rho: float) -> bool:
    if rho < 0:
        raise ValueError("rho must be >= 0")
    n = math.sqrt(float(sum(int(o) * int(o) for o in offset)))
    return max(0.0, rho - 0.5) <= n < rho + 0.5


def spherical_vote(votes, spec: VoxelGridSpec) -> VoxelGrid:
    """Add each vote's weight onto its half-voxel shell; out-of-grid voxels are dropped."""
    if not isinstance(votes, SphereVotes):
        votes = SphereVotes.from_list(votes)
    grid = np.zeros(spec.dims)
    _kernels.spherical_vote_kernel(grid, votes.centers, votes.radii, votes.weights, np.asarray(spec.origin), spec.d)
    return VoxelGrid(spec, grid)


@dataclass(eq=False)
class VoteSources:
    """Per-pixel correspondence evidence shared by all voting targets."""

    centers: np.ndarray
    coords: np.ndarray
    weights: np.ndarray

    def votes_for(self, target) -> SphereVotes:
        radii = np.linalg.norm(self.coords - np.asarray(target, dtype=np.float64), axis=1)
        return SphereVotes(self.centers, radii, self.weights)


def vote_sources(obs, model: SurfaceModel, roi_mask=None) -> VoteSources:
    """Most likely surface sample and its probability at every usable pixel, row-major."""
    use = obs.data_mask & obs.valid
    if roi_mask is not None:
        use = use & np.asarray(roi_mask, dtype=bool)
    q = np.ascontiguousarray(obs.query_maps.for_class(model.class_id)[use])
    if len(q) == 0:
        return VoteSources(np.zeros((0, 3)), np.zeros((0, 3)), np.zeros(0))
    lognorm, best, best_dot = _kernels.query_statistics(q, model.keys)
    return VoteSources(obs.point_cloud[use], model.points[best], np.exp(best_dot - lognorm))


def votes_from_observation(obs, model: SurfaceModel, target, roi_mask=None) -> SphereVotes:
    return vote_sources(obs, model, roi_mask).votes_for(target)


# ---------------------------------------------------------------------------
# peaks and scoring
# ---------------------------------------------------------------------------


def top_positions(grid: VoxelGrid, n_t: int, nms_radius: int) -> tuple[np.ndarray, bool]:
    """Greedy peak picking with cubic suppression.

    Returns (positions (n, 3) in mm, degenerate). An all-zero grid yields the
    center of voxel (0, 0, 0) with ``degenerate`` set.
    """
    if n_t < 1:
        raise ValueError("n_t must be >= 1")
    work = grid.values.copy()
    dims = work.shape
    picks = []
    while len(picks) < n_t:
        flat = int(np.argmax(work))
        if not work.flat[flat] > 0:
            break
        idx = np.unravel_index(flat, dims)
        picks.append(idx)
        lo = [max(0, i - nms_radius) for i in idx]
        hi = [min(n, i + nms_radius + 1) for i, n in zip(idx, dims)]
        work[lo[0] : hi[0], lo[1] : hi[1], lo[2] : hi[2]] = -np.inf
    if not picks:
        return grid.spec.center((0, 0, 0))[None, :], True
    return grid.spec.center(np.array(picks)), False


def score_pose(location, rotation, keypoint_grids, keypoints) -> float:
    if len(keypoint_grids) != len(keypoints):
        raise ValueError("need one grid per keypoint")
    r = quat_to_matrix(rotation)
    total = 0.0
    for grid, kp in zip(keypoint_grids, np.asarray(keypoints, dtype=np.float64)):
        idx = grid.spec.index_of(r @ kp + np.asarray(location, dtype=np.float64))
        if np.all(idx >= 0) and np.all(idx < np.array(grid.spec.dims)):
            total += grid.values[tuple(idx)]
    return float(total)


def score_all(positions, rot_grid: RotationGrid, keypoint_grids, keypoints) -> np.ndarray:
    """Scores (n_positions, n_rotations) for every pairing."""
    spec = keypoint_grids[0].spec
    rot_kp = np.einsum("rab,kb->rka", rot_grid.matrices, np.asarray(keypoints, dtype=np.float64))
    grids = np.stack([g.values for g in keypoint_grids])
    return _kernels.score_poses_kernel(
        np.ascontiguousarray(positions, dtype=np.float64), np.ascontiguousarray(rot_kp), grids,
        np.asarray(spec.origin), spec.d,
    )


def rank_candidates(scores: np.ndarray, n_out: int, per_position: int | None = None) -> list[tuple[int, int]]:
    """(position, rotation) pairs by descending score, ties by position then rotation index."""
    n_pos, n_rot = scores.shape
    pos = np.repeat(np.arange(n_pos), n_rot)
    rot = np.tile(np.arange(n_rot), n_pos)
    flat = scores.ravel()
    if per_position is not None and per_position < n_rot:
        keep = np.zeros_like(flat, dtype=bool)
        for p in range(n_pos):
            row = np.lexsort((np.arange(n_rot), -scores[p]))[:per_position]
            keep[p * n_rot + row] = True
        pos, rot, flat = pos[keep], rot[keep], flat[keep]
    order = np.lexsort((rot, pos, -flat))[:n_out]
    return [(int(pos[k]), int(rot[k])) for k in order]


def generate_hypotheses(obs, model: SurfaceModel, cfg: HypothesesConfig, rot_grid: RotationGrid, roi_mask=None):
    """Ranked pose hypotheses for one object class (empty when nothing votes)."""
    if len(model.keypoints) != cfg.n_keypoints:
        raise ValueError(f"model has {len(model.keypoints)} keypoints, config expects {cfg.n_keypoints}")
    src = vote_sources(obs, model, roi_mask)
    if len(src.weights) == 0:
        return []
    center_grid = spherical_vote(src.votes_for(np.zeros(3)), cfg.grid)
    positions, degenerate = top_positions(center_grid, cfg.n_top_positions, cfg.nms_radius)
    if degenerate:
        return []
    kp_grids = [spherical_vote(src.votes_for(kp), cfg.grid) for kp in model.keypoints]
    scores = score_all(positions, rot_grid, kp_grids, model.keypoints)
    ranked = rank_candidates(scores, cfg.n_hypotheses, cfg.rotations_per_position)
    return [Hypothesis(Pose(rot_grid.orientations[r], positions[p]), float(scores[p, r])) for p, r in ranked]
