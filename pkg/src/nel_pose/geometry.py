"""Rigid-body math, Gaussian-VMF sampling, rotation-space grids and ICP.

Quaternions are stored as ``(w, x, y, z)`` (Hamilton convention). All lengths
are millimeters.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from scipy.spatial import cKDTree

_GOLDEN_ANGLE = math.pi * (3.0 - math.sqrt(5.0))


# ---------------------------------------------------------------------------
# quaternion helpers
# ---------------------------------------------------------------------------


def quat_normalize(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q / np.linalg.norm(q, axis=-1, keepdims=True)


def quat_multiply(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Hamilton product ``a * b``; broadcasts over leading axes."""
    aw, ax, ay, az = np.moveaxis(np.asarray(a, dtype=np.float64), -1, 0)
    bw, bx, by, bz = np.moveaxis(np.asarray(b, dtype=np.float64), -1, 0)
    return np.stack(
        [
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ],
        axis=-1,
    )


def quat_conjugate(q: np.ndarray) -> np.ndarray:
    q = np.asarray(q, dtype=np.float64)
    return q * np.array([1.0, -1.0, -1.0, -1.0])


def quat_to_matrix(q: np.ndarray) -> np.ndarray:
    """Rotation matrix for unit quaternion(s) ``q``; shape (..., 3, 3)."""
    w, x, y, z = np.moveaxis(np.asarray(q, dtype=np.float64), -1, 0)
    m = np.stack(
        [
            1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
            2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
            2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
        ],
        axis=-1,
    )
    return m.reshape(m.shape[:-1] + (3, 3))


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Shepperd's method; picks the numerically largest pivot."""
    m = np.asarray(m, dtype=np.float64)
    tr = m[0, 0] + m[1, 1] + m[2, 2]
    pivots = (tr, m[0, 0], m[1, 1], m[2, 2])
    k = int(np.argmax(pivots))
    if k == 0:
        s = 2.0 * math.sqrt(max(1.0 + tr, 0.0))
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif k == 1:
        s = 2.0 * math.sqrt(max(1.0 + m[0, 0] - m[1, 1] - m[2, 2], 0.0))
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif k == 2:
        s = 2.0 * math.sqrt(max(1.0 - m[0, 0] + m[1, 1] - m[2, 2], 0.0))
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = 2.0 * math.sqrt(max(1.0 - m[0, 0] - m[1, 1] + m[2, 2], 0.0))
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = quat_normalize(np.array(q))
    return q if q[0] >= 0 else -q


def axis_angle_to_quat(axis, angle: float) -> np.ndarray:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return np.concatenate([[math.cos(half)], math.sin(half) * axis])


def quat_angle(a: np.ndarray, b: np.ndarray) -> float:
    """Geodesic angle in radians between the rotations ``a`` and ``b``."""
    d = abs(float(np.dot(quat_normalize(a), quat_normalize(b))))
    return 2.0 * math.acos(min(d, 1.0))


def random_quaternion(rng: np.random.Generator) -> np.ndarray:
    """Uniform (Haar) random rotation."""
    q = rng.normal(size=4)
    return quat_normalize(q)


# ---------------------------------------------------------------------------
# poses
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class Pose:
    """Rigid transform ``x -> R x + t`` with R stored as a unit quaternion."""

    rotation: np.ndarray = field(default_factory=lambda: np.array([1.0, 0.0, 0.0, 0.0]))
    translation: np.ndarray = field(default_factory=lambda: np.zeros(3))

    def __post_init__(self):
        q = np.array(self.rotation, dtype=np.float64).reshape(4)
        n = np.linalg.norm(q)
        if not np.isfinite(n) or n == 0.0:
            raise ValueError("rotation quaternion must be finite and non-zero")
        t = np.array(self.translation, dtype=np.float64).reshape(3)
        if not np.all(np.isfinite(t)):
            raise ValueError("translation must be finite")
        q = q / n
        q.flags.writeable = False
        t.flags.writeable = False
        object.__setattr__(self, "rotation", q)
        object.__setattr__(self, "translation", t)

    @classmethod
    def identity(cls) -> Pose:
        return cls()

    @classmethod
    def from_translation(cls, t) -> Pose:
        return cls(translation=t)

    @classmethod
    def from_matrix(cls, rot: np.ndarray, t=None) -> Pose:
        return cls(matrix_to_quat(rot), np.zeros(3) if t is None else t)

    @property
    def matrix(self) -> np.ndarray:
        return quat_to_matrix(self.rotation)

    def as_homogeneous(self) -> np.ndarray:
        h = np.eye(4)
        h[:3, :3] = self.matrix
        h[:3, 3] = self.translation
        return h

    def apply(self, points: np.ndarray) -> np.ndarray:
        points = np.asarray(points, dtype=np.float64)
        return points @ self.matrix.T + self.translation

    def inverse(self) -> Pose:
        q_inv = quat_conjugate(self.rotation)
        return Pose(q_inv, -(quat_to_matrix(q_inv) @ self.translation))

    def __matmul__(self, other: Pose) -> Pose:
        return compose(self, other)

    def __repr__(self) -> str:
        q = ", ".join(f"{v:.6f}" for v in self.rotation)
        t = ", ".join(f"{v:.3f}" for v in self.translation)
        return f"Pose(q=[{q}], t=[{t}])"


def compose(a: Pose, b: Pose) -> Pose:
    """Rigid composition ``a ∘ b`` (apply ``b`` first)."""
    q = quat_multiply(a.rotation, b.rotation)
    t = a.matrix @ b.translation + a.translation
    return Pose(q, t)


def rotation_error_deg(a: Pose, b: Pose) -> float:
    return math.degrees(quat_angle(a.rotation, b.rotation))


# ---------------------------------------------------------------------------
# Gaussian-VMF kernel
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class GaussianVmfParams:
    """Isotropic Gaussian on position times a von Mises-Fisher on orientation.

    The orientation part is a VMF on the unit-quaternion sphere S^3 with
    density proportional to ``exp(kappa * <mode, q>)``. ``degenerate=True``
    turns the rotation into a point mass at the mode (``rotation_concentration``
    is then ignored).
    """

    position_sigma: float = 0.0
    rotation_concentration: float = 1.0
    degenerate: bool = False

    def __post_init__(self):
        if not (self.position_sigma >= 0.0 and math.isfinite(self.position_sigma)):
            raise ValueError(f"position_sigma must be finite and >= 0, got {self.position_sigma}")
        if not self.degenerate:
            k = self.rotation_concentration
            if not (k > 0.0 and math.isfinite(k)):
                raise ValueError(f"rotation_concentration must be finite and > 0, got {k}")

    @classmethod
    def point_mass(cls) -> GaussianVmfParams:
        return cls(0.0, 1.0, degenerate=True)


def sample_vmf_cosine(kappa: float, rng: np.random.Generator, dim: int = 4) -> float:
    """Draw ``w = <mode, q>`` for a VMF on S^(dim-1) by Wood's rejection scheme.

    The marginal density of ``w`` is proportional to
    ``exp(kappa * w) * (1 - w^2)^((dim - 3) / 2)`` on [-1, 1].
    """
    if kappa <= 0:
        raise ValueError("kappa must be > 0")
    m1 = dim - 1.0
    # b = (-2k + sqrt(4k^2 + m1^2)) / m1, rearranged to avoid cancellation
    b = m1 / (2.0 * kappa + math.sqrt(4.0 * kappa * kappa + m1 * m1))
    x0 = (1.0 - b) / (1.0 + b)
    c = kappa * x0 + m1 * math.log(1.0 - x0 * x0)
    while True:
        z = rng.beta(0.5 * m1, 0.5 * m1)
        w = (1.0 - (1.0 + b) * z) / (1.0 - (1.0 - b) * z)
        u = rng.uniform()
        if kappa * w + m1 * math.log(1.0 - x0 * w) - c >= math.log(u):
            return w


def sample_vmf_quaternion(mode: np.ndarray, kappa: float, rng: np.random.Generator) -> np.ndarray:
    """Perturb ``mode`` by a VMF(S^3) draw: angle by rejection, axis uniform."""
    w = sample_vmf_cosine(kappa, rng)
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    s = math.sqrt(max(0.0, 1.0 - w * w))
    delta = np.array([w, s * axis[0], s * axis[1], s * axis[2]])
    return quat_normalize(quat_multiply(mode, delta))


def sample_gaussian_vmf(center: Pose, params: GaussianVmfParams, rng: np.random.Generator) -> Pose:
    """One draw from the Gaussian-VMF kernel centered at ``center``.

    The translation noise is drawn first (three normals), then the rotation.
    """
    if params.position_sigma > 0.0:
        t = center.translation + rng.normal(0.0, params.position_sigma, size=3)
    else:
        t = center.translation
    if params.degenerate:
        q = center.rotation
    else:
        q = sample_vmf_quaternion(center.rotation, params.rotation_concentration, rng)
    return Pose(q, t)


# ---------------------------------------------------------------------------
# rotation-space discretization
# ---------------------------------------------------------------------------


def fibonacci_sphere(n: int) -> np.ndarray:
    """``n`` roughly uniform unit vectors (golden-angle spiral), shape (n, 3)."""
    if n < 1:
        raise ValueError("fibonacci_sphere needs n >= 1")
    i = np.arange(n, dtype=np.float64)
    z = 1.0 - (2.0 * i + 1.0) / n
    r = np.sqrt(np.clip(1.0 - z * z, 0.0, None))
    theta = _GOLDEN_ANGLE * i
    pts = np.stack([r * np.cos(theta), r * np.sin(theta), z], axis=1)
    return pts / np.linalg.norm(pts, axis=1, keepdims=True)


def align_z_to(v: np.ndarray) -> np.ndarray:
    """Minimal-angle quaternion taking (0, 0, 1) onto unit vector ``v``.

    At ``v = -z`` the minimal rotation is not unique; the half turn about
    (1, 0, 0) is used.
    """
    v = np.asarray(v, dtype=np.float64)
    v = v / np.linalg.norm(v)
    c = float(v[2])
    if 1.0 + c < 1e-12:
        return np.array([0.0, 1.0, 0.0, 0.0])
    # q = (1 + c, z x v) normalized; z x v = (-v_y, v_x, 0)
    return quat_normalize(np.array([1.0 + c, -v[1], v[0], 0.0]))


@dataclass(frozen=True, eq=False)
class RotationGrid:
    orientations: np.ndarray  # (n_axes * n_inplane, 4)
    axes: np.ndarray  # (n_axes, 3)
    n_axes: int
    n_inplane: int

    def __len__(self) -> int:
        return len(self.orientations)

    @property
    def matrices(self) -> np.ndarray:
        return quat_to_matrix(self.orientations)

    def index(self, axis_index: int, inplane_index: int) -> int:
        return axis_index * self.n_inplane + inplane_index


def build_rotation_grid(n_axes: int = 200, n_inplane: int = 32) -> RotationGrid:
    """Fibonacci directions times uniform in-plane turns about each direction.

    Orientation ``a * n_inplane + k`` rotates z onto direction ``a`` and then
    spins by ``2 pi k / n_inplane`` about that direction.
    """
    if n_axes < 1 or n_inplane < 1:
        raise ValueError("n_axes and n_inplane must be >= 1")
    axes = fibonacci_sphere(n_axes)
    out = np.empty((n_axes * n_inplane, 4))
    for a, v in enumerate(axes):
        q_align = align_z_to(v)
        for k in range(n_inplane):
            q_spin = axis_angle_to_quat(v, 2.0 * math.pi * k / n_inplane)
            out[a * n_inplane + k] = quat_normalize(quat_multiply(q_spin, q_align))
    out.flags.writeable = False
    return RotationGrid(out, axes, n_axes, n_inplane)


# ---------------------------------------------------------------------------
# ICP
# ---------------------------------------------------------------------------


@dataclass
class IcpResult:
    pose: Pose
    residuals: list[float]
    no_correspondences: bool = False

    @property
    def iterations(self) -> int:
        return len(self.residuals)


def best_fit_transform(src: np.ndarray, dst: np.ndarray) -> Pose:
    """Least-squares rigid transform mapping ``src`` onto ``dst`` (Kabsch)."""
    cs = src.mean(axis=0)
    cd = dst.mean(axis=0)
    h = (src - cs).T @ (dst - cd)
    u, _, vt = np.linalg.svd(h)
    d = np.sign(np.linalg.det(vt.T @ u.T))
    rot = vt.T @ np.diag([1.0, 1.0, d]) @ u.T
    return Pose.from_matrix(rot, cd - rot @ cs)


def icp_align(
    source: np.ndarray,
    target: np.ndarray | cKDTree,
    init: Pose | None = None,
    max_iters: int = 20,
    max_corr_dist: float = 20.0,
    tol: float = 1e-6,
) -> IcpResult:
    """Point-to-point ICP of ``source`` onto ``target``, starting at ``init``.

    Correspondences are nearest neighbours capped at ``max_corr_dist``. The
    residual is the root of the mean truncated squared distance
    ``min(d^2, max_corr_dist^2)`` over all source points, which a Kabsch step
    followed by re-matching cannot increase; it is recorded before every
    update and the returned pose is the one that produced the last residual.
    """
    init = Pose.identity() if init is None else init
    source = np.asarray(source, dtype=np.float64)
    tree = target if isinstance(target, cKDTree) else cKDTree(np.asarray(target, dtype=np.float64))
    if len(source) == 0 or tree.n == 0:
        return IcpResult(init, [], no_correspondences=True)

    pose = init
    best = init
    residuals: list[float] = []
    for it in range(max_iters + 1):
        dist, idx = tree.query(pose.apply(source), distance_upper_bound=max_corr_dist)
        ok = np.isfinite(dist)
        if not ok.any():
            if it == 0:
                return IcpResult(init, [], no_correspondences=True)
            break
        res = math.sqrt(float(np.mean(np.where(ok, dist, max_corr_dist) ** 2)))
        if residuals and res > residuals[-1]:
            break
        residuals.append(res)
        best = pose
        if it == max_iters or ok.sum() < 3:
            break
        if len(residuals) > 1 and residuals[-2] - res < tol:
            break
        pose = best_fit_transform(source[ok], tree.data[idx[ok]])
    return IcpResult(best, residuals)
