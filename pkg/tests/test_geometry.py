import math

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from nel_pose.geometry import (
    GaussianVmfParams,
    Pose,
    align_z_to,
    build_rotation_grid,
    compose,
    fibonacci_sphere,
    icp_align,
    quat_angle,
    quat_to_matrix,
    random_quaternion,
    sample_gaussian_vmf,
)

# mean geodesic angle (deg) of a VMF(S^3) rotation with kappa = 1000, from
# 1-D quadrature of 2 acos(w) exp(kappa w) sqrt(1 - w^2) on [0, 1]
VMF_MEAN_ANGLE_K1000 = 5.782098419780033

seeds = st.integers(0, 2**32 - 1)


def rand_pose(seed):
    rng = np.random.default_rng(seed)
    return Pose(random_quaternion(rng), rng.normal(0, 200, 3))


def close(a: Pose, b: Pose, tol=1e-9):
    return quat_angle(a.rotation, b.rotation) < 1e-6 and np.allclose(a.translation, b.translation, atol=tol)


def test_compose_identity():
    p = rand_pose(1)
    assert close(compose(Pose.identity(), p), p)
    assert close(compose(p, Pose.identity()), p)


def test_compose_inverse_is_identity():
    p = rand_pose(2)
    q = p @ p.inverse()
    assert abs(abs(q.rotation[0]) - 1.0) < 1e-9
    assert np.abs(q.translation).max() < 1e-9


def test_commuting_translations():
    p = Pose.from_translation([1, 0, 0]) @ Pose.from_translation([0, 2, 0])
    assert np.allclose(p.translation, [1, 2, 0], atol=0, rtol=0)
    assert np.array_equal(p.rotation, [1, 0, 0, 0])


@given(seeds, seeds, seeds)
def test_composition_associative_and_unit(a, b, c):
    pa, pb, pc = rand_pose(a), rand_pose(b), rand_pose(c)
    left, right = (pa @ pb) @ pc, pa @ (pb @ pc)
    s = 1.0 if left.rotation @ right.rotation >= 0 else -1.0
    assert np.abs(left.rotation - s * right.rotation).max() < 1e-9
    assert np.abs(left.translation - right.translation).max() < 1e-9
    assert abs(np.linalg.norm(left.rotation) - 1.0) < 1e-9


@given(seeds)
def test_apply_matches_homogeneous(seed):
    p = rand_pose(seed)
    x = np.random.default_rng(seed).normal(0, 50, (5, 3))
    h = p.as_homogeneous()
    assert np.allclose(p.apply(x), x @ h[:3, :3].T + h[:3, 3], atol=1e-9)
    assert np.allclose(p.inverse().apply(p.apply(x)), x, atol=1e-9)


def test_point_mass_kernel_returns_center():
    p = rand_pose(3)
    out = sample_gaussian_vmf(p, GaussianVmfParams.point_mass(), np.random.default_rng(0))
    assert np.array_equal(out.rotation, p.rotation) and np.array_equal(out.translation, p.translation)


def test_translation_spread_matches_sigma():
    rng = np.random.default_rng(5)
    center = Pose.from_translation([10, -20, 500])
    params = GaussianVmfParams(2.0, 1e6)
    t = np.array([sample_gaussian_vmf(center, params, rng).translation for _ in range(10_000)])
    std = (t - center.translation).std(axis=0)
    assert np.all(np.abs(std - 2.0) < 0.2)


def test_rotation_spread_matches_quadrature():
    rng = np.random.default_rng(6)
    center = rand_pose(4)
    params = GaussianVmfParams(0.0, 1000.0)
    ang = [math.degrees(quat_angle(sample_gaussian_vmf(center, params, rng).rotation, center.rotation))
           for _ in range(10_000)]
    assert abs(np.mean(ang) - VMF_MEAN_ANGLE_K1000) < 0.1 * VMF_MEAN_ANGLE_K1000


def test_quadrature_constant():
    from scipy.integrate import quad

    k = 1000.0
    dens = lambda w: math.exp(k * (w - 1.0)) * math.sqrt(1.0 - w * w)
    num = quad(lambda w: 2.0 * math.acos(w) * dens(w), 0, 1, points=[0.99, 0.999], limit=200)[0]
    den = quad(dens, 0, 1, points=[0.99, 0.999], limit=200)[0]
    assert math.degrees(num / den) == pytest.approx(VMF_MEAN_ANGLE_K1000, rel=1e-9)


def test_kernel_deterministic_for_seed():
    p, params = rand_pose(7), GaussianVmfParams(3.0, 500.0)
    a = [sample_gaussian_vmf(p, params, np.random.default_rng(9)) for _ in range(3)]
    b = [sample_gaussian_vmf(p, params, np.random.default_rng(9)) for _ in range(3)]
    assert all(np.array_equal(x.rotation, y.rotation) and np.array_equal(x.translation, y.translation)
               for x, y in zip(a, b))


@pytest.mark.parametrize("kappa", [0.0, -1.0, math.inf])
def test_bad_concentration_rejected(kappa):
    with pytest.raises(ValueError):
        GaussianVmfParams(1.0, kappa)


@given(st.integers(1, 500))
def test_fibonacci_unit_norm(n):
    pts = fibonacci_sphere(n)
    assert pts.shape == (n, 3)
    assert np.abs(np.linalg.norm(pts, axis=1) - 1.0).max() < 1e-12


def test_fibonacci_200_min_angle():
    pts = fibonacci_sphere(200)
    d = pts @ pts.T
    np.fill_diagonal(d, -1.0)
    assert math.degrees(math.acos(d.max())) > 8.0


def test_fibonacci_small_and_empty():
    two = fibonacci_sphere(2)
    assert not np.allclose(two[0], two[1])
    with pytest.raises(ValueError):
        fibonacci_sphere(0)


def test_rotation_grid_size_and_axes():
    g = build_rotation_grid(200, 32)
    assert len(g) == 6400
    z = quat_to_matrix(g.orientations)[:, :, 2]
    assert np.abs(z - np.repeat(g.axes, 32, axis=0)).max() < 1e-9
    assert np.abs(np.linalg.norm(g.orientations, axis=1) - 1.0).max() < 1e-12


def test_rotation_grid_duplicate_free():
    o = build_rotation_grid(200, 32).orientations
    worst = 0.0
    for lo in range(0, len(o), 800):
        d = np.abs(o[lo : lo + 800] @ o.T)
        d[np.arange(len(d)), lo + np.arange(len(d))] = 0.0
        worst = max(worst, d.max())
    assert worst < 1.0 - 1e-9


def test_rotation_grid_single_axis():
    g = build_rotation_grid(1, 4)
    assert len(g) == 4
    for i in range(4):
        for j in range(i + 1, 4):
            d = math.degrees(quat_angle(g.orientations[i], g.orientations[j]))
            # in-plane turns of 90 degrees: neighbours at 90, opposite at 180
            assert d == pytest.approx(90.0 * min(j - i, 4 - (j - i)), abs=1e-9)


def test_align_z_antipodal_uses_x_axis():
    q = align_z_to(np.array([0.0, 0.0, -1.0]))
    assert np.allclose(np.abs(q), [0, 1, 0, 0], atol=1e-12)
    assert np.allclose(quat_to_matrix(q) @ [0, 0, 1], [0, 0, -1], atol=1e-12)


def test_rotation_grid_deterministic():
    assert np.array_equal(build_rotation_grid(20, 8).orientations, build_rotation_grid(20, 8).orientations)


def cloud(seed=0, n=400):
    return np.random.default_rng(seed).uniform(-40, 40, (n, 3))


def test_icp_already_aligned():
    x = cloud()
    res = icp_align(x, x, Pose.identity())
    assert np.abs(res.pose.translation).max() < 1e-6
    assert quat_angle(res.pose.rotation, [1, 0, 0, 0]) < 1e-6


def test_icp_recovers_small_shift():
    x = cloud(1)
    res = icp_align(x, x + [3.0, 0.0, 0.0], Pose.identity(), max_corr_dist=10.0)
    assert np.abs(res.pose.translation - [3.0, 0.0, 0.0]).max() < 0.1


def test_icp_no_correspondences():
    x = cloud(2)
    init = Pose.from_translation([1, 2, 3])
    res = icp_align(x, x + [1000.0, 0, 0], init, max_corr_dist=10.0)
    assert res.no_correspondences and res.pose is init


@given(seeds)
def test_icp_residuals_non_increasing(seed):
    rng = np.random.default_rng(seed)
    x = cloud(seed, 200)
    offset = Pose(random_quaternion(rng), rng.normal(0, 3, 3))
    tilt = Pose(np.array([1.0, 0, 0, 0]) + 0.05 * offset.rotation, offset.translation)
    res = icp_align(x, tilt.apply(x), Pose.identity(), max_corr_dist=15.0)
    r = np.array(res.residuals)
    assert np.all(np.diff(r) <= 0.0)
