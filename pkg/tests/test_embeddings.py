import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nel_pose.embeddings import (
    OracleEmbedConfig,
    QueryMaps,
    SurfaceModel,
    build_surface_model,
    correspondence_prob,
    farthest_point_sample,
    key_embed,
    make_query_maps,
)
from nel_pose.meshes import bracket, box
from nel_pose.renderer import TriangleMesh, render
from nel_pose.selftest import SMALL_CAM, small_scene

CFG = OracleEmbedConfig()


def point_triangle_distance(p, a, b, c):
    """Distance from p to triangle abc by projecting and clamping to edges."""
    n = np.cross(b - a, c - a)
    n /= np.linalg.norm(n)
    q = p - np.dot(p - a, n) * n
    # barycentric inside test
    v0, v1, v2 = b - a, c - a, q - a
    d00, d01, d11, d20, d21 = v0 @ v0, v0 @ v1, v1 @ v1, v2 @ v0, v2 @ v1
    den = d00 * d11 - d01 * d01
    v = (d11 * d20 - d01 * d21) / den
    w = (d00 * d21 - d01 * d20) / den
    if v >= 0 and w >= 0 and v + w <= 1:
        return float(np.linalg.norm(p - q))

    def seg(p, x, y):
        t = np.clip(np.dot(p - x, y - x) / np.dot(y - x, y - x), 0, 1)
        return np.linalg.norm(p - (x + t * (y - x)))

    return float(min(seg(p, a, b), seg(p, b, c), seg(p, c, a)))


def test_fps_single_point_deterministic():
    a = farthest_point_sample(bracket(), 1, seed=3)
    b = farthest_point_sample(bracket(), 1, seed=3)
    assert a.shape == (1, 3) and np.array_equal(a, b)


def test_fps_thin_mesh_second_point_is_farthest():
    rod = box(200.0, 2.0, 2.0)
    pts = farthest_point_sample(rod, 2, seed=0, pool_size=2048)
    pool = rod.sample_surface(2048, np.random.default_rng(0))
    first = pool[np.argmin(np.linalg.norm(pool - pool.mean(axis=0), axis=1))]
    far = pool[np.argmax(np.linalg.norm(pool - first, axis=1))]
    assert np.array_equal(pts[0], first) and np.array_equal(pts[1], far)
    assert abs(abs(pts[1, 0]) - 100.0) < 2.0


def test_fps_gaps_non_increasing_and_pool_limit():
    _, gaps = farthest_point_sample(bracket(), 32, return_distances=True)
    assert np.all(np.diff(gaps) <= 0)
    with pytest.raises(ValueError):
        farthest_point_sample(bracket(), 10, pool_size=5)


def test_surface_model_invariants():
    mesh = bracket()
    m = build_surface_model(1, mesh, CFG, n_samples=256)
    assert len(m.keypoints) == 8
    assert np.abs(np.linalg.norm(m.keys, axis=1) - 1.0).max() < 1e-12
    tri = mesh.vertices[mesh.triangles]
    for kp in m.keypoints:
        assert min(point_triangle_distance(kp, *t) for t in tri) < 1e-6


@given(st.integers(1, 5), st.integers(0, 2**32 - 1))
def test_key_embed_unit_and_deterministic(class_id, seed):
    x = np.random.default_rng(seed).uniform(-60, 60, (8, 3))
    a, b = key_embed(class_id, x, CFG), key_embed(class_id, x, CFG)
    assert np.abs(np.linalg.norm(a, axis=1) - 1.0).max() < 1e-12
    assert np.array_equal(a, b)


def test_key_embed_separates_distant_points():
    pts = box(150.0, 100.0, 60.0).sample_surface(1500, np.random.default_rng(1))
    d = np.linalg.norm(pts[:, None] - pts[None], axis=2)
    i, j = np.nonzero(np.abs(d - 100.0) < 0.5)
    assert len(i) > 100
    g = key_embed(1, pts, CFG)
    assert np.max(np.sum(g[i] * g[j], axis=1)) < 0.99


def test_symmetric_class_keys_spin_invariant():
    cfg = OracleEmbedConfig(symmetric_classes=(2,))
    x = np.random.default_rng(0).normal(0, 30, (10, 3))
    a = 0.7
    spin = x @ np.array([[math.cos(a), -math.sin(a), 0], [math.sin(a), math.cos(a), 0], [0, 0, 1]]).T
    assert np.allclose(key_embed(2, x, cfg), key_embed(2, spin, cfg), atol=1e-12)
    assert not np.allclose(key_embed(1, x, cfg), key_embed(1, spin, cfg), atol=1e-3)


def small_setup(noise):
    cfg = OracleEmbedConfig(query_noise=noise)
    meshes = {1: bracket(), 2: box()}
    models = {c: build_surface_model(c, m, cfg, n_samples=512) for c, m in meshes.items()}
    gt = render(small_scene(np.random.default_rng(4)), meshes, SMALL_CAM)
    return cfg, models, gt


def test_noiseless_argmax_is_nearest_sample():
    cfg, models, gt = small_setup(0.0)
    qm = make_query_maps(gt, models, cfg, np.random.default_rng(0), num_classes=2)
    for t, m in models.items():
        sel = gt.segmentation == t
        best = np.argmax(qm.for_class(t)[sel] @ m.keys.T, axis=1)
        dist = np.linalg.norm(gt.object_coords[sel][:, None] - m.points[None], axis=2)
        assert sel.sum() > 20
        assert np.array_equal(best, np.argmin(dist, axis=1))


def test_query_maps_deterministic_and_normalizers():
    cfg, models, gt = small_setup(0.03)
    a = make_query_maps(gt, models, cfg, np.random.default_rng(5), num_classes=2)
    b = make_query_maps(gt, models, cfg, np.random.default_rng(5), num_classes=2)
    assert np.array_equal(a.queries, b.queries) and np.array_equal(a.log_normalizers, b.log_normalizers)
    for t, m in models.items():
        dots = a.for_class(t) @ m.keys.T
        assert np.all(a.log_normalizers[t - 1] >= dots.max(axis=-1))
        assert np.allclose(np.linalg.norm(a.for_class(t), axis=-1), cfg.temperature)


def test_query_map_round_trip():
    cfg, models, gt = small_setup(0.03)
    qm = make_query_maps(gt, models, cfg, np.random.default_rng(5), num_classes=2)
    back = QueryMaps.from_bytes(qm.to_bytes())
    assert np.array_equal(back.queries, qm.queries.astype(np.float32))
    assert np.array_equal(back.log_normalizers, qm.log_normalizers.astype(np.float32))
    with pytest.raises(ValueError):
        QueryMaps.from_bytes(b"XXXX" + qm.to_bytes()[4:])


def test_surface_model_round_trip():
    m = build_surface_model(3, bracket(), CFG, n_samples=64)
    blob = m.to_bytes()
    assert blob[:4] == b"NELS" and len(blob) == 20 + 4 * (64 * 3 + 64 * 12 + 8 * 3)
    back = SurfaceModel.from_bytes(blob, CFG)
    assert back.class_id == 3 and np.array_equal(back.keys, m.keys.astype(np.float32))


def fixed_model(keys):
    keys = np.asarray(keys, dtype=np.float64)
    return SurfaceModel(1, np.zeros((len(keys), 3)), keys, np.zeros((1, 3)), CFG)


def test_correspondence_prob_examples():
    m = fixed_model([[1.0, 0.0], [0.0, 1.0]])
    assert np.array_equal(correspondence_prob([1.0, 1.0], m), [0.5, 0.5])
    assert np.array_equal(correspondence_prob([3.0, -2.0], fixed_model([[1.0, 0.0]])), [1.0])
    # dots (ln 3, 0)
    p = correspondence_prob([math.log(3.0), 0.0], m)
    assert np.abs(p - [0.75, 0.25]).max() < 1e-12


def test_correspondence_prob_normalized():
    m = build_surface_model(1, bracket(), CFG, n_samples=1024)
    rng = np.random.default_rng(0)
    q = rng.normal(size=(10_000, 12))
    q *= CFG.temperature / np.linalg.norm(q, axis=1, keepdims=True)
    sums = np.array([correspondence_prob(v, m).sum() for v in q])
    assert np.abs(sums - 1.0).max() < 1e-9


@given(st.floats(-50, 50), st.integers(0, 1000))
def test_correspondence_prob_shift_invariant(shift, seed):
    rng = np.random.default_rng(seed)
    keys = rng.normal(size=(6, 3))
    # a constant offset on every dot product via an extra constant feature
    q = rng.normal(size=3)
    base = correspondence_prob(q, fixed_model(keys))
    ext = correspondence_prob(np.append(q, shift), fixed_model(np.column_stack([keys, np.ones(6)])))
    assert np.allclose(base, ext, atol=1e-12)
