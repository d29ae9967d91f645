"""Likelihood-driven scene search, particle filtering and shared-motion camera tracking."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np
from scipy.special import logsumexp

from .geometry import GaussianVmfParams, Pose, icp_align, sample_gaussian_vmf
from .likelihood import SceneScorer
from .renderer import RenderOutput, SceneDescription

PROPOSAL_KINDS = ("hypotheses", "icp", "random_walk")
MIN_VISIBLE_PIXELS = 25


@dataclass(frozen=True)
class PhaseSpec:
    kind: str
    k: int
    sweeps: int = 1
    params: GaussianVmfParams = field(default_factory=GaussianVmfParams.point_mass)
    max_corr_dist: float = 20.0

    def __post_init__(self):
        if self.kind not in PROPOSAL_KINDS:
            raise ValueError(f"unknown proposal kind {self.kind!r}; choose from {PROPOSAL_KINDS}")
        if self.k < 1 or self.sweeps < 1:
            raise ValueError("k and sweeps must be >= 1")


@dataclass(frozen=True)
class SearchSchedule:
    phases: tuple[PhaseSpec, ...]
    object_order: str = "round_robin"

    def __post_init__(self):
        if not self.phases:
            raise ValueError("a schedule needs at least one phase")
        if self.object_order not in ("round_robin", "random"):
            raise ValueError("object_order must be 'round_robin' or 'random'")
        object.__setattr__(self, "phases", tuple(self.phases))


def default_schedule() -> SearchSchedule:
    return SearchSchedule(
        (
            PhaseSpec("hypotheses", 80),
            PhaseSpec("icp", 16, 3, GaussianVmfParams(1.0, 8000.0), 10.0),
            PhaseSpec("random_walk", 32, 3, GaussianVmfParams(2.0, 4000.0)),
            PhaseSpec("random_walk", 32, 3, GaussianVmfParams(0.5, 40000.0)),
        )
    )


class TraceEntry(NamedTuple):
    step: int
    phase: int
    obj: int
    old: float
    new: float


class SearchResult(NamedTuple):
    scene: SceneDescription
    log_likelihood: float
    trace: list


# ---------------------------------------------------------------------------
# proposals
# ---------------------------------------------------------------------------


def propose_hypotheses(class_id: int, hypothesis_sets: Mapping[int, Sequence[Pose]], k: int) -> list[Pose]:
    """First ``k`` stored hypotheses in rank order, cycled when there are fewer."""
    hyps = list(hypothesis_sets.get(class_id, ()))
    if not hyps:
        return []
    return [hyps[i % len(hyps)] for i in range(k)]


def propose_random_walk(pose: Pose, params: GaussianVmfParams, k: int, rng: np.random.Generator) -> list[Pose]:
    return [sample_gaussian_vmf(pose, params, rng) for _ in range(k)]


def _around(center: Pose, params: GaussianVmfParams, k: int, rng) -> list[Pose]:
    return [center] + [sample_gaussian_vmf(center, params, rng) for _ in range(k - 1)]


def propose_icp(
    index: int,
    scene: SceneDescription,
    obs,
    rend: RenderOutput,
    params: GaussianVmfParams,
    k: int,
    rng: np.random.Generator,
    max_corr_dist: float = 20.0,
) -> list[Pose]:
    """Align the object's visible rendered points to the observed cloud.

    Returns ``k`` poses: the aligned pose, then kernel samples around it.
    Empty when the object shows fewer than ``MIN_VISIBLE_PIXELS`` pixels.
    """
    pts = rend.point_cloud[rend.instance == index + 1]
    if len(pts) < MIN_VISIBLE_PIXELS or len(obs.points) == 0:
        return []
    res = icp_align(pts, obs.tree, max_corr_dist=max_corr_dist)
    center = scene.poses[index] if res.no_correspondences else res.pose @ scene.poses[index]
    return _around(center, params, k, rng)


# ---------------------------------------------------------------------------
# greedy search
# ---------------------------------------------------------------------------


def stochastic_search(
    init: SceneDescription,
    scorer: SceneScorer,
    schedule: SearchSchedule,
    hypothesis_sets: Mapping[int, Sequence[Pose]],
    rng: np.random.Generator,
) -> SearchResult:
    """Coordinate-wise hill climbing over object poses.

    Each step proposes ``k`` poses for one object, scores the substituted
    scenes as a batch and keeps the best only if it strictly improves the
    current log-likelihood.
    """
    scene = init
    current = scorer.score(scene)
    trace: list[TraceEntry] = []
    step = 0
    n_obj = len(scene)
    for p_idx, phase in enumerate(schedule.phases):
        for _ in range(phase.sweeps):
            for slot in range(n_obj):
                obj = slot if schedule.object_order == "round_robin" else int(rng.integers(n_obj))
                pose = scene.poses[obj]
                if phase.kind == "hypotheses":
                    cands = propose_hypotheses(scene.objects[obj].class_id, hypothesis_sets, phase.k)
                elif phase.kind == "icp":
                    cands = propose_icp(
                        obj, scene, scorer.obs, scorer.render(scene), phase.params, phase.k, rng, phase.max_corr_dist
                    )
                else:
                    cands = propose_random_walk(pose, phase.params, phase.k, rng)
                step += 1
                if not cands:
                    continue
                scores = scorer.score_many([scene.with_pose(obj, c) for c in cands])
                best = int(np.argmax(scores))
                if scores[best] > current:
                    trace.append(TraceEntry(step, p_idx, obj, current, float(scores[best])))
                    scene = scene.with_pose(obj, cands[best])
                    current = float(scores[best])
    return SearchResult(scene, current, trace)


# ---------------------------------------------------------------------------
# particle filter
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class ParticleSet:
    particles: list
    log_weights: np.ndarray
    t: int = 0

    def __post_init__(self):
        if not self.particles:
            raise ValueError("a particle set needs at least one particle")
        self.log_weights = np.asarray(self.log_weights, dtype=np.float64)
        if len(self.log_weights) != len(self.particles):
            raise ValueError("one log weight per particle")

    @classmethod
    def uniform(cls, scene: SceneDescription, n: int, t: int = 0) -> ParticleSet:
        return cls([scene] * n, np.full(n, -math.log(n)), t)

    def __len__(self) -> int:
        return len(self.particles)

    @property
    def weights(self) -> np.ndarray:
        return np.exp(self.log_weights)

    def ess(self) -> float:
        w = self.weights
        return float(w.sum() ** 2 / np.sum(w * w))

    def position_spread(self, obj: int) -> float:
        """Weighted standard deviation of one object's position (root of the summed variances)."""
        pos = np.array([p.poses[obj].translation for p in self.particles])
        w = self.weights / self.weights.sum()
        mean = w @ pos
        return float(math.sqrt(max(0.0, w @ np.sum((pos - mean) ** 2, axis=1))))


@dataclass(frozen=True)
class DynamicsParams:
    """Per-object motion kernels (one entry reused for every object) and an optional step cap."""

    per_object: tuple[GaussianVmfParams, ...]
    position_cap: float | None = None
    max_tries: int = 100

    def __post_init__(self):
        if not self.per_object:
            raise ValueError("at least one motion kernel is required")
        if self.position_cap is not None and not self.position_cap > 0:
            raise ValueError("position_cap must be > 0")
        object.__setattr__(self, "per_object", tuple(self.per_object))

    def for_object(self, i: int) -> GaussianVmfParams:
        return self.per_object[i] if len(self.per_object) > 1 else self.per_object[0]


def systematic_resample(log_weights: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Indices drawn with one uniform offset and evenly spaced pointers."""
    n = len(log_weights)
    w = np.exp(log_weights - logsumexp(log_weights))
    cdf = np.cumsum(w)
    cdf[-1] = 1.0
    pointers = (rng.uniform() + np.arange(n)) / n
    return np.searchsorted(cdf, pointers, side="right")


def propagate_pose(pose: Pose, params: GaussianVmfParams, cap: float | None, max_tries: int, rng) -> Pose:
    """One dynamics draw; with a cap, redraw until the step is short enough, then clamp."""
    new = sample_gaussian_vmf(pose, params, rng)
    if cap is None:
        return new
    for _ in range(max_tries - 1):
        if np.linalg.norm(new.translation - pose.translation) <= cap:
            return new
        new = sample_gaussian_vmf(pose, params, rng)
    step = new.translation - pose.translation
    dist = np.linalg.norm(step)
    if dist > cap:
        new = Pose(new.rotation, pose.translation + step * (cap / dist))
    return new


def particle_filter_step(
    ps: ParticleSet, scorer: SceneScorer, dyn: DynamicsParams, rng: np.random.Generator
) -> ParticleSet:
    """Resample, move every object of every particle, reweight by the frame likelihood."""
    idx = systematic_resample(ps.log_weights, rng)
    moved = []
    for i in idx:
        scene = ps.particles[i]
        poses = [
            propagate_pose(p, dyn.for_object(k), dyn.position_cap, dyn.max_tries, rng)
            for k, p in enumerate(scene.poses)
        ]
        moved.append(scene.with_poses(poses))
    loglik = scorer.score_many(moved)
    norm = logsumexp(loglik)
    assert math.isfinite(norm), "every particle has zero likelihood"
    return ParticleSet(moved, loglik - norm, ps.t + 1)


def filter_estimate(ps: ParticleSet) -> SceneDescription:
    return ps.particles[int(np.argmax(ps.log_weights))]


# ---------------------------------------------------------------------------
# static scene, moving camera
# ---------------------------------------------------------------------------


def pivot_delta(delta: Pose, pivot: np.ndarray) -> Pose:
    """Rigid motion rotating by ``delta`` about ``pivot`` and then translating by it."""
    r = delta.matrix
    return Pose(delta.rotation, pivot + delta.translation - r @ pivot)


def camera_track_step(
    scene: SceneDescription,
    scorer: SceneScorer,
    schedule: SearchSchedule,
    rng: np.random.Generator,
    position_cap: float | None = 30.0,
) -> SearchResult:
    """Search over one rigid motion shared by every object.

    ICP runs on the union of all rendered objects; random-walk deltas rotate
    about the scene centroid. Candidates moving any object farther than
    ``position_cap`` from its pose at the start of the frame are rejected.
    Hypothesis phases do not apply and are skipped.
    """
    start = scene.poses
    start_t = np.array([p.translation for p in start])

    def candidates_for(delta_list):
        out, ok = [], []
        for dlt in delta_list:
            poses = [dlt @ p for p in scene.poses]
            moved = np.array([p.translation for p in poses]) - start_t
            ok.append(position_cap is None or bool(np.all(np.linalg.norm(moved, axis=1) <= position_cap)))
            out.append(scene.with_poses(poses))
        return out, ok

    current = scorer.score(scene)
    trace: list[TraceEntry] = []
    step = 0
    for p_idx, phase in enumerate(schedule.phases):
        if phase.kind == "hypotheses":
            continue
        for _ in range(phase.sweeps):
            step += 1
            pivot = np.mean([p.translation for p in scene.poses], axis=0)
            if phase.kind == "icp":
                rend = scorer.render(scene)
                pts = rend.point_cloud[rend.segmentation > 0]
                if len(pts) < MIN_VISIBLE_PIXELS or len(scorer.obs.points) == 0:
                    continue
                res = icp_align(pts, scorer.obs.tree, max_corr_dist=phase.max_corr_dist)
                base = Pose.identity() if res.no_correspondences else res.pose
                deltas = [base] + [
                    pivot_delta(sample_gaussian_vmf(Pose.identity(), phase.params, rng), pivot) @ base
                    for _ in range(phase.k - 1)
                ]
            else:
                deltas = [
                    pivot_delta(sample_gaussian_vmf(Pose.identity(), phase.params, rng), pivot)
                    for _ in range(phase.k)
                ]
            cands, ok = candidates_for(deltas)
            scores = scorer.score_many(cands)
            scores[~np.array(ok)] = -np.inf
            best = int(np.argmax(scores))
            if scores[best] > current:
                trace.append(TraceEntry(step, p_idx, -1, current, float(scores[best])))
                scene = cands[best]
                current = float(scores[best])
    return SearchResult(scene, current, trace)
