"""Synthetic scenes and sequences, pose metrics, experiment drivers and result files."""

from __future__ import annotations

import csv
import io
import itertools
import json
import math
import os
import time
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .embeddings import OracleEmbedConfig, SurfaceModel, build_surface_model, make_query_maps
from .geometry import GaussianVmfParams, Pose, axis_angle_to_quat, build_rotation_grid, random_quaternion
from .hypotheses import HypothesesConfig, generate_hypotheses
from .inference import (
    DynamicsParams,
    ParticleSet,
    SearchSchedule,
    camera_track_step,
    default_schedule,
    filter_estimate,
    particle_filter_step,
    stochastic_search,
)
from .likelihood import LikelihoodConfig, Observation, SceneScorer
from .meshes import builtin_mesh, panel
from .renderer import CameraIntrinsics, RenderOutput, SceneDescription, TriangleMesh, load_mesh, render, unproject

RESULT_HEADER = [
    "run_id", "scene_id", "object_id/frame", "class", "rot_err_deg", "trans_err_mm", "add_mm", "mssd_mm",
    "loglik", "wall_ms",
]


def default_camera() -> CameraIntrinsics:
    return CameraIntrinsics(267.0, 267.0, 80.0, 60.0, 160, 120)


# ---------------------------------------------------------------------------
# experiment description
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SceneSpec:
    """Objects are given as 1-based indices into ``classes``."""

    classes: tuple[str, ...] = ("bracket",)
    objects: tuple[int, ...] = (1,)
    depth_range: tuple[float, float] = (600.0, 900.0)
    depth_noise: float = 2.0
    dropout: float = 0.02
    max_tries: int = 1000
    margin_px: float = 2.0

    def __post_init__(self):
        for c in self.objects:
            if not 1 <= c <= len(self.classes):
                raise ValueError(f"object class {c} outside 1..{len(self.classes)}")
        if not 0 < self.depth_range[0] < self.depth_range[1]:
            raise ValueError("depth_range must be increasing and positive")
        if self.depth_noise < 0 or not 0 <= self.dropout <= 1:
            raise ValueError("depth_noise must be >= 0 and dropout in [0, 1]")


@dataclass(frozen=True)
class TrackingSpec:
    """A box sliding along x behind a static panel nearer the camera."""

    n_particles: int = 400
    n_particles_small: int = 50
    n_seeds: int = 10
    start_x: float = -130.0
    end_x: float = 110.0
    speed: float = 5.0
    object_depth: float = 750.0
    object_y: float = 0.0
    occluder_depth: float = 650.0
    occluder_width: float = 80.0
    occluder_height: float = 110.0
    position_sigma: float = 6.0
    rotation_concentration: float = 20000.0
    reacquire_window: int = 10
    reacquire_tol: float = 10.0


@dataclass(frozen=True)
class CameraTrackSpec:
    """Static multi-object scenes watched by a drifting camera."""

    n_scenes: int = 5
    n_frames: int = 6
    classes: tuple[str, ...] = ("bracket", "wedge", "box")
    objects: tuple[int, ...] = (1, 2, 3)
    drift_translation: float = 6.0
    drift_rotation_deg: float = 1.5
    position_cap: float = 30.0


@dataclass(frozen=True)
class Experiment:
    run_id: str = "run"
    seed: int = 0
    n_scenes: int = 50
    timing: bool = False
    camera: CameraIntrinsics = field(default_factory=default_camera)
    scene: SceneSpec = field(default_factory=SceneSpec)
    mesh_paths: Mapping[str, str] = field(default_factory=dict)
    embed: OracleEmbedConfig = field(default_factory=OracleEmbedConfig)
    n_surface_samples: int = 1024
    likelihood: LikelihoodConfig = field(default_factory=LikelihoodConfig)
    hypotheses: HypothesesConfig = field(default_factory=HypothesesConfig)
    schedule: SearchSchedule = field(default_factory=default_schedule)
    tracking: TrackingSpec = field(default_factory=TrackingSpec)
    camera_track: CameraTrackSpec = field(default_factory=CameraTrackSpec)


class PoseErrors(NamedTuple):
    rotation_err: float
    translation_err: float
    add: float
    mssd: float


# ---------------------------------------------------------------------------
# assets
# ---------------------------------------------------------------------------


@dataclass(eq=False)
class World:
    """Meshes and surface models keyed by class id, plus the camera."""

    cam: CameraIntrinsics
    class_names: tuple[str, ...]
    meshes: dict
    models: dict
    embed: OracleEmbedConfig

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def scorer(self, obs: Observation, cfg: LikelihoodConfig) -> SceneScorer:
        return SceneScorer(obs, self.meshes, self.models, self.cam, cfg)


def resolve_mesh(name: str, mesh_paths: Mapping[str, str]) -> TriangleMesh:
    if name in mesh_paths:
        path = mesh_paths[name]
        if not os.path.exists(path):
            raise FileNotFoundError(f"mesh file for {name!r} not found: {path}")
        return load_mesh(path, name)
    return builtin_mesh(name)


def build_world(exp: Experiment, class_names: Sequence[str] | None = None, extra: Mapping[str, TriangleMesh] = {}):
    names = tuple(class_names or exp.scene.classes)
    meshes, models = {}, {}
    for cls, name in enumerate(names, start=1):
        meshes[cls] = extra[name] if name in extra else resolve_mesh(name, exp.mesh_paths)
        models[cls] = build_surface_model(
            cls, meshes[cls], exp.embed, exp.n_surface_samples, exp.hypotheses.n_keypoints, seed=exp.embed.seed
        )
    return World(exp.camera, names, meshes, models, exp.embed)


@lru_cache(maxsize=4)
def rotation_grid(n_axes: int, n_inplane: int):
    return build_rotation_grid(n_axes, n_inplane)


# ---------------------------------------------------------------------------
# scenes and observations
# ---------------------------------------------------------------------------


def sample_scene(spec: SceneSpec, world: World, rng: np.random.Generator) -> SceneDescription:
    """Random poses inside the view frustum with non-overlapping bounding spheres."""
    cam = world.cam
    placed: list[tuple[int, Pose]] = []
    for cls in spec.objects:
        radius = world.meshes[cls].radius
        for _ in range(spec.max_tries):
            q = random_quaternion(rng)
            z = rng.uniform(*spec.depth_range)
            px = radius * cam.fx / (z - radius) + spec.margin_px
            py = radius * cam.fy / (z - radius) + spec.margin_px
            u_lo, u_hi = px, cam.width - 1 - px
            v_lo, v_hi = py, cam.height - 1 - py
            u, v = rng.uniform(), rng.uniform()
            if u_lo >= u_hi or v_lo >= v_hi:
                continue
            u = u_lo + u * (u_hi - u_lo)
            v = v_lo + v * (v_hi - v_lo)
            t = np.array([(u - cam.cx) * z / cam.fx, (v - cam.cy) * z / cam.fy, z])
            if all(np.linalg.norm(t - p.translation) > radius + world.meshes[c].radius for c, p in placed):
                placed.append((cls, Pose(q, t)))
                break
        else:
            raise RuntimeError(f"could not place object of class {cls} after {spec.max_tries} tries")
    return SceneDescription(tuple(placed), world.num_classes)


def observe(
    scene: SceneDescription, world: World, depth_noise: float, dropout: float, rng: np.random.Generator
) -> tuple[Observation, RenderOutput]:
    """Noisy observed cloud and oracle query maps for a ground-truth scene."""
    gt = render(scene, world.meshes, world.cam)
    depth = gt.depth.copy()
    valid = depth > 0
    if depth_noise > 0:
        depth = np.where(valid, depth + rng.normal(0.0, depth_noise, depth.shape), 0.0)
    if dropout > 0:
        depth[rng.uniform(size=depth.shape) < dropout] = 0.0
    depth[depth < 0] = 0.0
    qm = make_query_maps(gt, world.models, world.embed, rng, world.num_classes)
    return Observation(unproject(depth, world.cam), qm), gt


def make_scene(spec: SceneSpec, world: World, rng: np.random.Generator):
    """Ground truth, its observation and its noiseless render."""
    scene = sample_scene(spec, world, rng)
    obs, gt = observe(scene, world, spec.depth_noise, spec.dropout, rng)
    return scene, obs, gt


# ---------------------------------------------------------------------------
# metrics
# ---------------------------------------------------------------------------


def pose_errors(est: Pose, gt: Pose, mesh: TriangleMesh) -> PoseErrors:
    v = mesh.vertices
    pe = est.apply(v)
    dev = np.linalg.norm(pe - gt.apply(v), axis=1)
    mssd = dev.max()
    for sym in mesh.symmetries:
        mssd = min(mssd, np.linalg.norm(pe - (gt @ sym).apply(v), axis=1).max())
    dot = min(1.0, abs(float(est.rotation @ gt.rotation)))
    return PoseErrors(
        math.degrees(2.0 * math.acos(dot)),
        float(np.linalg.norm(est.translation - gt.translation)),
        float(dev.mean()),
        float(mssd),
    )


def match_instances(est: SceneDescription, gt: SceneDescription, meshes) -> list[int]:
    """For each ground-truth object, the estimate index under the lowest-total-ADD assignment within its class."""
    out = list(range(len(gt)))
    for cls in set(gt.class_ids):
        idx = [i for i, c in enumerate(gt.class_ids) if c == cls]
        if len(idx) < 2:
            continue
        best, best_cost = None, math.inf
        for perm in itertools.permutations(idx):
            cost = sum(pose_errors(est.poses[p], gt.poses[i], meshes[cls]).add for i, p in zip(idx, perm))
            if cost < best_cost:
                best, best_cost = perm, cost
        for i, p in zip(idx, best):
            out[i] = p
    return out


# ---------------------------------------------------------------------------
# single-frame pipeline
# ---------------------------------------------------------------------------


class Timer:
    def __init__(self, enabled: bool):
        self.enabled = enabled
        self.stages: dict[str, float] = {}

    def __call__(self, stage: str):
        timer = self

        class _Ctx:
            def __enter__(self):
                self.t0 = time.perf_counter()

            def __exit__(self, *exc):
                timer.stages[stage] = timer.stages.get(stage, 0.0) + 1000.0 * (time.perf_counter() - self.t0)

        return _Ctx()

    def ms(self, stage: str | None = None) -> float:
        if not self.enabled:
            return 0.0
        return sum(self.stages.values()) if stage is None else self.stages.get(stage, 0.0)


def initial_scene(scene_classes: Sequence[int], hyps: Mapping[int, list], num_classes: int, fallback: Pose):
    """The j-th object of a class starts at the best hypothesis of the j-th distinct position."""
    seen: dict[int, int] = {}
    objs = []
    for cls in scene_classes:
        j = seen.get(cls, 0)
        seen[cls] = j + 1
        positions: list = []
        pick = None
        for h in hyps.get(cls, []):
            key = tuple(np.round(h.pose.translation, 6))
            if key not in positions:
                positions.append(key)
                if len(positions) == j + 1:
                    pick = h.pose
                    break
        if pick is None:
            pick = hyps[cls][0].pose if hyps.get(cls) else fallback
        objs.append((cls, pick))
    return SceneDescription(tuple(objs), num_classes)


class MsigpOutcome(NamedTuple):
    gt: SceneDescription
    init: SceneDescription
    result: object
    errors: list
    timer: Timer


def estimate_scene(
    obs: Observation, classes: Sequence[int], world: World, exp: Experiment, rng: np.random.Generator, timer: Timer
):
    """Hypotheses per class, top-ranked initialization, then the search schedule."""
    rg = rotation_grid(exp.hypotheses.n_axes, exp.hypotheses.n_inplane)
    hyps = {}
    with timer("hypotheses"):
        for cls in sorted(set(classes)):
            hyps[cls] = generate_hypotheses(obs, world.models[cls], exp.hypotheses, rg)
    fallback = Pose.from_translation([0.0, 0.0, float(np.mean(exp.scene.depth_range))])
    init = initial_scene(classes, hyps, world.num_classes, fallback)
    hyp_poses = {c: [h.pose for h in hs] for c, hs in hyps.items()}
    with timer("search"):
        result = stochastic_search(init, world.scorer(obs, exp.likelihood), exp.schedule, hyp_poses, rng)
    return init, result


def run_msigp(exp: Experiment, scene_index: int, world: World | None = None) -> MsigpOutcome:
    world = world or build_world(exp)
    rng = np.random.default_rng([exp.seed, scene_index])
    timer = Timer(exp.timing)
    gt, obs, _ = make_scene(exp.scene, world, rng)
    init, result = estimate_scene(obs, gt.class_ids, world, exp, rng, timer)
    match = match_instances(result.scene, gt, world.meshes)
    errors = [
        pose_errors(result.scene.poses[match[i]], gt.poses[i], world.meshes[c]) for i, c in enumerate(gt.class_ids)
    ]
    return MsigpOutcome(gt, init, result, errors, timer)


def msigp_records(exp: Experiment, scene_index: int, out: MsigpOutcome, world: World) -> list[dict]:
    return [
        result_record(
            exp.run_id, scene_index, i, world.class_names[c - 1], e, out.result.log_likelihood, out.timer.ms()
        )
        for i, (c, e) in enumerate(zip(out.gt.class_ids, out.errors))
    ]


def trace_is_increasing(trace) -> bool:
    return all(t.new > t.old for t in trace) and all(b.old == a.new for a, b in zip(trace, trace[1:]))


# ---------------------------------------------------------------------------
# tracking through occlusion
# ---------------------------------------------------------------------------


class TrackingOutcome(NamedTuple):
    errors: list
    spreads: list
    visible: list
    free_view: list
    full_occlusion: list
    reappear: int | None
    reacquired: bool
    max_weight_sum_err: float


def occlusion_sequence(spec: TrackingSpec) -> list[tuple[Pose, Pose]]:
    """(moving box pose, static occluder pose) per frame; the box faces the camera."""
    n = int(math.floor((spec.end_x - spec.start_x) / spec.speed)) + 1
    occluder = Pose.from_translation([0.0, spec.object_y, spec.occluder_depth])
    tilt = axis_angle_to_quat([0.0, 1.0, 0.0], math.radians(20.0))
    return [
        (Pose(tilt, [spec.start_x + f * spec.speed, spec.object_y, spec.object_depth]), occluder)
        for f in range(n)
    ]


def tracking_world(exp: Experiment) -> World:
    s = exp.tracking
    occ = panel(s.occluder_width, s.occluder_height, 10.0)
    return build_world(exp, ("box", "occluder"), extra={"occluder": occ})


def run_tracking(exp: Experiment, seed_index: int, n_particles: int | None = None, world: World | None = None):
    spec = exp.tracking
    world = world or tracking_world(exp)
    n_particles = n_particles or spec.n_particles
    rng = np.random.default_rng([exp.seed, 0x7472, seed_index])
    frames = occlusion_sequence(spec)
    dyn = DynamicsParams(
        (GaussianVmfParams(spec.position_sigma, spec.rotation_concentration), GaussianVmfParams.point_mass())
    )
    scenes = [SceneDescription(((1, b), (2, o)), 2) for b, o in frames]
    ps = ParticleSet.uniform(scenes[0], n_particles)
    errors, spreads, visible, free_view = [], [], [], []
    max_err = 0.0
    for scene in scenes:
        obs, gt = observe(scene, world, exp.scene.depth_noise, exp.scene.dropout, rng)
        alone = render(SceneDescription((scene.objects[0],), 2), world.meshes, world.cam)
        ps = particle_filter_step(ps, world.scorer(obs, exp.likelihood), dyn, rng)
        max_err = max(max_err, abs(float(np.exp(ps.log_weights).sum()) - 1.0))
        est = filter_estimate(ps)
        errors.append(pose_errors(est.poses[0], scene.poses[0], world.meshes[1]))
        spreads.append(ps.position_spread(0))
        n_vis = int(np.count_nonzero(gt.instance == 1))
        visible.append(n_vis)
        free_view.append(n_vis == alone.fg_count)
    full = [f for f, v in enumerate(visible) if v == 0]
    reappear = None
    if full:
        later = [f for f in range(full[-1] + 1, len(visible)) if visible[f] > 0]
        reappear = later[0] if later else None
    reacquired = False
    if reappear is not None:
        ok = [e.translation_err < spec.reacquire_tol for e in errors]
        for f in range(reappear, min(len(ok), reappear + spec.reacquire_window + 1)):
            if all(ok[f:]):
                reacquired = True
                break
    return TrackingOutcome(errors, spreads, visible, free_view, full, reappear, reacquired, max_err)


def spread_ratio(out: TrackingOutcome) -> float:
    pre_end = out.full_occlusion[0] if out.full_occlusion else len(out.spreads)
    pre = [s for f, s in enumerate(out.spreads[:pre_end]) if out.free_view[f] and f > 0]
    during = [out.spreads[f] for f in out.full_occlusion]
    if not pre or not during:
        return float("nan")
    return float(np.mean(during) / np.mean(pre))


def tracking_records(exp: Experiment, seed_index: int, out: TrackingOutcome) -> list[dict]:
    return [result_record(exp.run_id, seed_index, f, "box", e, 0.0, 0.0) for f, e in enumerate(out.errors)]


# ---------------------------------------------------------------------------
# drifting camera over a static scene
# ---------------------------------------------------------------------------


class CameraTrackOutcome(NamedTuple):
    tracked_rot: list
    single_rot: list
    tracked_errors: list
    single_errors: list
    labels: list  # (scene, frame, class name) per entry


def camera_path(spec: CameraTrackSpec, rng: np.random.Generator) -> list[Pose]:
    """Camera-to-world poses with a constant per-frame screw motion."""
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    direction = rng.normal(size=3)
    direction[2] *= 0.3
    direction /= np.linalg.norm(direction)
    step = Pose(axis_angle_to_quat(axis, math.radians(spec.drift_rotation_deg)), spec.drift_translation * direction)
    out = [Pose.identity()]
    for _ in range(spec.n_frames - 1):
        out.append(out[-1] @ step)
    return out


def run_camera_benchmark(exp: Experiment, seed_index: int) -> CameraTrackOutcome:
    """Per-frame single-shot estimates against shared-motion tracking from the first frame."""
    spec = exp.camera_track
    world = build_world(exp, spec.classes)
    scene_spec = SceneSpec(
        spec.classes, spec.objects, exp.scene.depth_range, exp.scene.depth_noise, exp.scene.dropout,
        exp.scene.max_tries, margin_px=12.0,
    )
    tracked_rot, single_rot, tracked_all, single_all, labels = [], [], [], [], []
    for s in range(spec.n_scenes):
        rng = np.random.default_rng([exp.seed, 0x6361, seed_index, s])
        world_scene = sample_scene(scene_spec, world, rng)
        path = camera_path(spec, rng)
        est = world_scene
        for f, cam_pose in enumerate(path):
            inv = cam_pose.inverse()
            gt = world_scene.with_poses([inv @ p for p in world_scene.poses])
            obs, _ = observe(gt, world, exp.scene.depth_noise, exp.scene.dropout, rng)
            if f == 0:
                est = gt
                continue
            tracked = camera_track_step(est, world.scorer(obs, exp.likelihood), exp.schedule, rng, spec.position_cap)
            est = tracked.scene
            _, single = estimate_scene(obs, gt.class_ids, world, exp, rng, Timer(False))
            match = match_instances(single.scene, gt, world.meshes)
            for i, c in enumerate(gt.class_ids):
                et = pose_errors(est.poses[i], gt.poses[i], world.meshes[c])
                es = pose_errors(single.scene.poses[match[i]], gt.poses[i], world.meshes[c])
                tracked_rot.append(et.rotation_err)
                single_rot.append(es.rotation_err)
                tracked_all.append(et)
                single_all.append(es)
                labels.append((s, f, world.class_names[c - 1]))
    return CameraTrackOutcome(tracked_rot, single_rot, tracked_all, single_all, labels)


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------


def result_record(run_id, scene_id, obj_or_frame, cls_name, err: PoseErrors, loglik, wall_ms) -> dict:
    return {
        "run_id": run_id,
        "scene_id": int(scene_id),
        "object_id/frame": int(obj_or_frame),
        "class": cls_name,
        "rot_err_deg": round(float(err.rotation_err), 6),
        "trans_err_mm": round(float(err.translation_err), 6),
        "add_mm": round(float(err.add), 6),
        "mssd_mm": round(float(err.mssd), 6),
        "loglik": round(float(loglik), 6),
        "wall_ms": round(float(wall_ms), 3),
    }


def records_csv(records: Sequence[Mapping]) -> str:
    buf = io.StringIO()
    w = csv.DictWriter(buf, fieldnames=RESULT_HEADER, lineterminator="\n")
    w.writeheader()
    for r in records:
        w.writerow({k: r[k] for k in RESULT_HEADER})
    return buf.getvalue()


def write_results(out_dir: str, records: Sequence[Mapping], manifest: Mapping, extra: Sequence[Mapping] = ()):
    """results.csv, records.jsonl (one line per record, plus any extra lines) and manifest.json."""
    os.makedirs(out_dir, exist_ok=True)
    with open(os.path.join(out_dir, "results.csv"), "w", newline="") as f:
        f.write(records_csv(records))
    with open(os.path.join(out_dir, "records.jsonl"), "w") as f:
        for r in list(records) + list(extra):
            f.write(json.dumps(r, sort_keys=True) + "\n")
    with open(os.path.join(out_dir, "manifest.json"), "w") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
