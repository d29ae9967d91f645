"""Fast paths checked against the slow reference implementations."""

from __future__ import annotations

import math

import numpy as np

from .embeddings import OracleEmbedConfig, SurfaceModel, build_surface_model, make_query_maps
from .geometry import Pose, random_quaternion
from .hypotheses import SphereVote, VoxelGridSpec, spherical_vote
from .likelihood import LikelihoodConfig, Observation, batch_log_likelihood, log_likelihood
from .meshes import builtin_mesh
from .oracles import naive_log_likelihood, naive_spherical_vote
from .renderer import CameraIntrinsics, SceneDescription, render

SMALL_CAM = CameraIntrinsics(60.0, 60.0, 23.5, 17.5, 48, 36)


def small_world(seed: int = 0, n_samples: int = 256):
    cfg = OracleEmbedConfig(seed=seed)
    meshes = {1: builtin_mesh("bracket"), 2: builtin_mesh("wedge")}
    models = {c: build_surface_model(c, m, cfg, n_samples=n_samples, seed=seed) for c, m in meshes.items()}
    return cfg, meshes, models


def small_scene(rng: np.random.Generator) -> SceneDescription:
    objs = (
        (1, Pose(random_quaternion(rng), [rng.uniform(-40, 0), rng.uniform(-20, 20), rng.uniform(550, 650)])),
        (2, Pose(random_quaternion(rng), [rng.uniform(20, 60), rng.uniform(-20, 20), rng.uniform(550, 650)])),
    )
    return SceneDescription(objs, 2)


def small_observation(scene, meshes, models, cfg, rng, noise: float = 1.0) -> Observation:
    gt = render(scene, meshes, SMALL_CAM)
    pc = gt.point_cloud.copy()
    valid = pc[..., 2] > 0
    pc[valid] += rng.normal(0.0, noise, size=(int(valid.sum()), 3))
    return Observation(pc, make_query_maps(gt, models, cfg, rng, num_classes=2))


def check_likelihood(seed: int, n_trials: int = 3) -> tuple[bool, str]:
    rng = np.random.default_rng([seed, 1])
    cfg, meshes, models = small_world(seed)
    worst = 0.0
    for _ in range(n_trials):
        scene = small_scene(rng)
        obs = small_observation(scene, meshes, models, cfg, rng)
        moved = scene.with_pose(0, Pose(scene.poses[0].rotation, scene.poses[0].translation + rng.normal(0, 3, 3)))
        rend = render(moved, meshes, SMALL_CAM)
        for lcfg in (LikelihoodConfig(patch=None), LikelihoodConfig(patch=(10, 10), r=8.0)):
            if lcfg.patch is None:
                ref = naive_log_likelihood(obs, rend, models, lcfg)
                worst = max(worst, abs(log_likelihood(obs, rend, models, lcfg) - ref) / abs(ref))
            fast = log_likelihood(obs, rend, models, lcfg)
            pruned = log_likelihood(obs, rend, models, lcfg, cam=SMALL_CAM)
            batch = batch_log_likelihood(obs, [rend, rend], models, lcfg, cam=SMALL_CAM)
            if pruned != fast or not np.all(batch == fast):
                return False, "pruned or batched score differs from the plain scan"
    return worst < 1e-9, f"max relative error {worst:.2e}"


def check_voting(seed: int, n_votes: int = 60) -> tuple[bool, str]:
    rng = np.random.default_rng([seed, 2])
    spec = VoxelGridSpec((0.0, 0.0, 0.0), (21, 17, 19), 5.0)
    centers = rng.uniform(-10, 110, size=(n_votes, 3))
    radii = rng.uniform(0, 40, size=n_votes)
    radii[:5] = 0.0
    weights = rng.uniform(0, 1, size=n_votes)
    fast = spherical_vote([SphereVote(*v) for v in zip(centers, radii, weights)], spec).values
    ref = naive_spherical_vote(centers, radii, weights, spec.origin, spec.dims, spec.d)
    diff = float(np.max(np.abs(fast - ref)))
    return diff == 0.0, f"max abs difference {diff:.1e} over {n_votes} votes"


def check_pose_algebra(seed: int, n: int = 50) -> tuple[bool, str]:
    rng = np.random.default_rng([seed, 3])
    worst = 0.0
    for _ in range(n):
        a = Pose(random_quaternion(rng), rng.normal(0, 100, 3))
        b = Pose(random_quaternion(rng), rng.normal(0, 100, 3))
        p = rng.normal(0, 50, size=(4, 3))
        worst = max(worst, float(np.abs((a @ b).apply(p) - a.apply(b.apply(p))).max()))
        worst = max(worst, float(np.abs((a @ a.inverse()).apply(p) - p).max()))
    return worst < 1e-9, f"max deviation {worst:.1e}"


def check_serialization(seed: int) -> tuple[bool, str]:
    _, _, models = small_world(seed, n_samples=64)
    for m in models.values():
        back = SurfaceModel.from_bytes(m.to_bytes(), m.embed)
        same = back.class_id == m.class_id and all(
            np.array_equal(np.float32(getattr(m, k)), np.float32(getattr(back, k))) for k in ("points", "keys", "keypoints")
        )
        if not same:
            return False, f"class {m.class_id} differs after a round trip"
    return True, f"{len(models)} surface models round-trip"


SUITES = (
    ("likelihood", check_likelihood),
    ("spherical-voting", check_voting),
    ("pose-algebra", check_pose_algebra),
    ("serialization", check_serialization),
)


def run_all(seed: int = 0) -> list[tuple[str, bool, str]]:
    out = []
    for name, fn in SUITES:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # noqa: BLE001 - a crash is a failed suite
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        out.append((name, bool(ok), detail))
    return out
