import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from scipy.special import logsumexp

from nel_pose import _kernels
from nel_pose.embeddings import OracleEmbedConfig, QueryMaps, SurfaceModel, key_embed
from nel_pose.geometry import Pose
from nel_pose.likelihood import (
    LikelihoodConfig,
    Observation,
    batch_log_likelihood,
    depth_kernel,
    fg_log_weight,
    log_likelihood,
    pack_render,
)
from nel_pose.oracles import naive_log_likelihood
from nel_pose.renderer import RenderOutput, SceneDescription, render
from nel_pose.selftest import SMALL_CAM, small_observation, small_scene

# log(1e-10 + 0.9 * (3 / (4 pi 125)) * 0.9), evaluated by hand
ONE_PIXEL_VALUE = -6.471446662277312
BALL_DENSITY_R5 = 1.909859317102744e-3


def test_depth_kernel_examples():
    assert depth_kernel([0, 0, 3], [0, 0, 0], 5.0) == pytest.approx(BALL_DENSITY_R5, rel=1e-12)
    assert depth_kernel([0, 0, 6], [0, 0, 0], 5.0) == 0.0
    assert LikelihoodConfig().r == 5.0
    with pytest.raises(ValueError):
        depth_kernel([0, 0, 0], [0, 0, 0], 0.0)


def test_config_validation():
    assert LikelihoodConfig().patch == (10, 10)
    for bad in (dict(r=0), dict(epsilon=1.0), dict(p_background=0.0), dict(patch=(0, 3))):
        with pytest.raises(ValueError):
            LikelihoodConfig(**bad)


def test_empty_scene_is_background_only(world, small_obs):
    _, meshes, models = world
    _, obs = small_obs
    obs = Observation(obs.point_cloud, obs.query_maps, np.ones(obs.shape, bool))
    rend = render(SceneDescription((), 2), meshes, SMALL_CAM)
    cfg = LikelihoodConfig()
    assert log_likelihood(obs, rend, models, cfg) == pytest.approx(48 * 36 * math.log(1e-9), rel=1e-12)
    assert fg_log_weight(0, cfg) == -math.inf


def test_single_pixel_hand_value():
    pts = np.array([[10.0, 0.0, 0.0], [-10.0, 5.0, 0.0]])
    keys = key_embed(1, pts, OracleEmbedConfig())
    model = SurfaceModel(1, pts, keys, pts[:1])
    diff = keys[0] - keys[1]
    q = math.log(9.0) * diff / (diff @ diff)
    lognorm = logsumexp(keys @ q)
    assert math.exp(keys[0] @ q - lognorm) == pytest.approx(0.9, abs=1e-12)
    qm = QueryMaps(q.reshape(1, 1, 1, -1), np.array([[[lognorm]]]))
    c = np.array([[[0.0, 0.0, 500.0]]])
    obs = Observation(c, qm)
    rend = RenderOutput(c.copy(), np.array([[1]]), pts[:1].reshape(1, 1, 3), np.array([[500.0]]), np.array([[1]]))
    cfg = LikelihoodConfig(r=5.0, p_background=0.1 / 1e9, epsilon=0.1)
    assert log_likelihood(obs, rend, {1: model}, cfg) == pytest.approx(ONE_PIXEL_VALUE, rel=1e-12)


def random_render(world, rng):
    _, meshes, _ = world
    scene = small_scene(rng)
    moved = scene.with_pose(0, Pose(scene.poses[0].rotation, scene.poses[0].translation + rng.normal(0, 3, 3)))
    return render(moved, meshes, SMALL_CAM)


def test_full_patch_matches_naive(world, small_obs):
    _, _, models = world
    _, obs = small_obs
    rng = np.random.default_rng(3)
    cfg = LikelihoodConfig(patch=None)
    for _ in range(3):
        rend = random_render(world, rng)
        ref = naive_log_likelihood(obs, rend, models, cfg)
        assert abs(log_likelihood(obs, rend, models, cfg) - ref) <= 1e-9 * abs(ref)


def test_patch_at_least_image_equals_full(world, small_obs):
    _, _, models = world
    _, obs = small_obs
    rend = random_render(world, np.random.default_rng(4))
    big = log_likelihood(obs, rend, models, LikelihoodConfig(patch=(2 * 36 - 1, 2 * 48 - 1)))
    assert big == log_likelihood(obs, rend, models, LikelihoodConfig(patch=None))


def test_batch_matches_sequential(world, small_obs):
    _, _, models = world
    _, obs = small_obs
    rng = np.random.default_rng(5)
    renders = [random_render(world, rng) for _ in range(64)]
    cfg = LikelihoodConfig()
    seq = np.array([log_likelihood(obs, r, models, cfg) for r in renders])
    batch = batch_log_likelihood(obs, renders, models, cfg)
    assert np.array_equal(seq, batch)
    assert np.array_equal(batch_log_likelihood(obs, renders[:1], models, cfg), seq[:1])
    perm = rng.permutation(64)
    assert np.array_equal(batch_log_likelihood(obs, [renders[i] for i in perm], models, cfg), seq[perm])
    assert np.array_equal(batch_log_likelihood(obs, renders, models, cfg, cam=SMALL_CAM), seq)


def test_background_floor_and_masked_pixels(world, small_obs):
    _, _, models = world
    _, obs = small_obs
    rend = random_render(world, np.random.default_rng(6))
    cfg = LikelihoodConfig()
    n = int(obs.data_mask.sum())
    assert log_likelihood(obs, rend, models, cfg) >= n * math.log(cfg.p_background)
    # masked-out pixels contribute nothing
    mask = obs.data_mask.copy()
    mask[:, 24:] = False
    half = Observation(obs.point_cloud, obs.query_maps, mask)
    left = Observation(obs.point_cloud, obs.query_maps, obs.data_mask & ~mask)
    total = log_likelihood(obs, rend, models, cfg)
    parts = log_likelihood(half, rend, models, cfg) + log_likelihood(left, rend, models, cfg)
    assert parts == pytest.approx(total, rel=1e-12)


def test_shape_mismatch_rejected(world, small_obs):
    _, meshes, models = world
    _, obs = small_obs
    other = render(SceneDescription((), 2), meshes, SMALL_CAM.__class__(60.0, 60.0, 10.0, 10.0, 20, 20))
    with pytest.raises(ValueError):
        log_likelihood(obs, other, models, LikelihoodConfig())


@given(st.integers(0, 2**32 - 1))
def test_patch_is_under_approximation(seed):
    from nel_pose.selftest import small_world

    cfg_e, meshes, models = small_world(0, n_samples=128)
    rng = np.random.default_rng(seed)
    obs = small_observation(small_scene(rng), meshes, models, cfg_e, rng)
    rend = render(small_scene(rng), meshes, SMALL_CAM)
    n = int(obs.data_mask.sum())
    patched = log_likelihood(obs, rend, models, LikelihoodConfig(patch=(3, 3)))
    full = log_likelihood(obs, rend, models, LikelihoodConfig(patch=None))
    assert patched <= full + 1e-9 * n


def test_extra_rendered_pixel_never_lowers_mixture(world, small_obs):
    """With the foreground weight held fixed, adding a rendered point can only add mass."""
    _, _, models = world
    _, obs = small_obs
    rend = random_render(world, np.random.default_rng(7))
    idx, xyz, cls, keys = pack_render(rend, models)
    qm = obs.query_maps
    lw = fg_log_weight(len(cls), LikelihoodConfig())
    args = (math.log(1e-9), 5.0, 71, 95, np.zeros(4))

    def value(idx, xyz, cls, keys):
        return _kernels.log_likelihood_kernel(
            obs.point_cloud, obs.data_mask, qm.queries, qm.log_normalizers, idx, xyz, cls, keys, lw, *args
        )

    base = value(idx, xyz, cls, keys)
    # put a rendered point exactly on an observed pixel that had none
    i, j = np.argwhere(obs.data_mask & (idx < 0))[0]
    idx2 = idx.copy()
    idx2[i, j] = len(cls)
    xyz2 = np.vstack([xyz, obs.point_cloud[i, j]])
    cls2 = np.append(cls, 1).astype(np.int32)
    keys2 = np.vstack([keys, models[1].keys[:1]])
    assert value(idx2, xyz2, cls2, keys2) >= base


@given(st.floats(-300, 300), st.floats(-300, 300), st.floats(-300, 300))
def test_translation_equivariance(dx, dy, dz):
    from nel_pose.selftest import small_world

    cfg_e, meshes, models = small_world(0, n_samples=128)
    rng = np.random.default_rng(8)
    obs = small_observation(small_scene(rng), meshes, models, cfg_e, rng)
    rend = render(small_scene(rng), meshes, SMALL_CAM)
    v = np.array([dx, dy, dz])
    pc = obs.point_cloud.copy()
    pc[obs.valid] += v
    rpc = rend.point_cloud.copy()
    rpc[rend.segmentation > 0] += v
    moved_obs = Observation(pc, obs.query_maps, obs.data_mask)
    moved = RenderOutput(rpc, rend.segmentation, rend.object_coords, rend.depth, rend.instance)
    cfg = LikelihoodConfig()
    assert log_likelihood(moved_obs, moved, models, cfg) == pytest.approx(
        log_likelihood(obs, rend, models, cfg), abs=1e-6
    )
