"""Software rasterizer producing point-cloud, segmentation and object-coordinate images."""

from __future__ import annotations

import os
from dataclasses import dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import _kernels
from .geometry import Pose


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError("principal point must lie inside the image")

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    def project(self, points: np.ndarray) -> np.ndarray:
        """Camera-frame points (..., 3) to pixel coordinates (..., 2) as (u, v)."""
        points = np.asarray(points, dtype=np.float64)
        z = points[..., 2]
        return np.stack([self.fx * points[..., 0] / z + self.cx, self.fy * points[..., 1] / z + self.cy], axis=-1)


@dataclass(eq=False)
class TriangleMesh:
    vertices: np.ndarray
    triangles: np.ndarray
    symmetries: list[Pose] = field(default_factory=list)
    name: str = ""

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.triangles = np.ascontiguousarray(self.triangles, dtype=np.int64).reshape(-1, 3)
        if len(self.triangles) and (self.triangles.min() < 0 or self.triangles.max() >= len(self.vertices)):
            raise ValueError(f"mesh {self.name!r}: triangle index out of range")
        if np.any(self.triangle_areas() <= 1e-12):
            raise ValueError(f"mesh {self.name!r}: degenerate (zero-area) triangle")

    def triangle_areas(self) -> np.ndarray:
        tri = self.vertices[self.triangles]
        return 0.5 * np.linalg.norm(np.cross(tri[:, 1] - tri[:, 0], tri[:, 2] - tri[:, 0]), axis=1)

    @property
    def radius(self) -> float:
        """Bounding-sphere radius about the object origin."""
        return float(np.linalg.norm(self.vertices, axis=1).max())

    def sample_surface(self, count: int, rng: np.random.Generator) -> np.ndarray:
        """Area-weighted uniform samples on the surface."""
        areas = self.triangle_areas()
        tri_idx = rng.choice(len(areas), size=count, p=areas / areas.sum())
        r1 = np.sqrt(rng.uniform(size=count))
        r2 = rng.uniform(size=count)
        tri = self.vertices[self.triangles[tri_idx]]
        return (
            (1.0 - r1)[:, None] * tri[:, 0]
            + (r1 * (1.0 - r2))[:, None] * tri[:, 1]
            + (r1 * r2)[:, None] * tri[:, 2]
        )


class SceneObject(NamedTuple):
    class_id: int
    pose: Pose


@dataclass(frozen=True, eq=False)
class SceneDescription:
    """Object classes and poses; ``num_classes`` is the class-table size M."""

    objects: tuple[SceneObject, ...]
    num_classes: int

    def __post_init__(self):
        objs = tuple(SceneObject(int(c), p) for c, p in self.objects)
        for c, _ in objs:
            if not 1 <= c <= self.num_classes:
                raise ValueError(f"class id {c} outside 1..{self.num_classes}")
        object.__setattr__(self, "objects", objs)

    def __len__(self) -> int:
        return len(self.objects)

    @property
    def poses(self) -> list[Pose]:
        return [o.pose for o in self.objects]

    @property
    def class_ids(self) -> list[int]:
        return [o.class_id for o in self.objects]

    def with_pose(self, index: int, pose: Pose) -> SceneDescription:
        objs = list(self.objects)
        objs[index] = SceneObject(objs[index].class_id, pose)
        return SceneDescription(tuple(objs), self.num_classes)

    def with_poses(self, poses: Sequence[Pose]) -> SceneDescription:
        return SceneDescription(
            tuple(SceneObject(o.class_id, p) for o, p in zip(self.objects, poses)), self.num_classes
        )


@dataclass(eq=False)
class RenderOutput:
    """Render products; ``instance`` holds 1-based object indices (0 = none)."""

    point_cloud: np.ndarray
    segmentation: np.ndarray
    object_coords: np.ndarray
    depth: np.ndarray
    instance: np.ndarray

    @property
    def fg_count(self) -> int:
        return int(np.count_nonzero(self.segmentation > 0))

    @property
    def shape(self) -> tuple[int, int]:
        return self.segmentation.shape


def unproject(depth: np.ndarray, cam: CameraIntrinsics) -> np.ndarray:
    """Depth image (mm, 0 = invalid) to an organized camera-frame point cloud."""
    depth = np.ascontiguousarray(depth, dtype=np.float64)
    return _kernels.unproject_kernel(depth, cam.fx, cam.fy, cam.cx, cam.cy)


def _scene_triangles(scene: SceneDescription, meshes: Mapping[int, TriangleMesh]):
    cam_parts, obj_parts, cls_parts, inst_parts = [], [], [], []
    for k, (cls, pose) in enumerate(scene.objects):
        mesh = meshes[cls]
        obj_tris = mesh.vertices[mesh.triangles]
        cam_tris = pose.apply(mesh.vertices)[mesh.triangles]
        cam_parts.append(cam_tris)
        obj_parts.append(obj_tris)
        cls_parts.append(np.full(len(obj_tris), cls, dtype=np.int32))
        inst_parts.append(np.full(len(obj_tris), k + 1, dtype=np.int32))
    if not cam_parts:
        empty = np.zeros((0, 3, 3))
        return empty, empty, np.zeros(0, np.int32), np.zeros(0, np.int32)
    return (
        np.ascontiguousarray(np.concatenate(cam_parts)),
        np.ascontiguousarray(np.concatenate(obj_parts)),
        np.concatenate(cls_parts),
        np.concatenate(inst_parts),
    )


def render(scene: SceneDescription, meshes: Mapping[int, TriangleMesh], cam: CameraIntrinsics) -> RenderOutput:
    """Z-buffered perspective rasterization of ``scene``.

    A pixel is covered by a triangle when its center lies inside the projected
    triangle (top-left rule on shared edges); the nearest surface wins. Empty
    pixels have depth 0, segmentation 0 and a zero point.
    """
    missing = {c for c in scene.class_ids if c not in meshes}
    if missing:
        raise KeyError(f"no mesh for classes {sorted(missing)}")
    cam_tris, obj_tris, cls, inst = _scene_triangles(scene, meshes)
    depth, objxyz, seg, instance = _kernels.rasterize(
        cam_tris, obj_tris, cls, inst, cam.fx, cam.fy, cam.cx, cam.cy, cam.height, cam.width
    )
    return RenderOutput(unproject(depth, cam), seg, objxyz, depth, instance)


# ---------------------------------------------------------------------------
# mesh files
# ---------------------------------------------------------------------------


def save_mesh(mesh: TriangleMesh, path: str | os.PathLike) -> None:
    """Write the ASCII mesh format.

    ``V T`` header, V vertex lines (3 decimals), T index lines, then an
    optional ``symmetries S`` block of ``qw qx qy qz tx ty tz`` lines.
    """
    lines = [f"{len(mesh.vertices)} {len(mesh.triangles)}"]
    lines += [f"{x:.3f} {y:.3f} {z:.3f}" for x, y, z in mesh.vertices]
    lines += [f"{a} {b} {c}" for a, b, c in mesh.triangles]
    if mesh.symmetries:
        lines.append(f"symmetries {len(mesh.symmetries)}")
        for s in mesh.symmetries:
            vals = list(s.rotation) + list(s.translation)
            lines.append(" ".join(repr(float(v)) for v in vals))
    with open(path, "w") as f:
        f.write("\n".join(lines) + "\n")


def load_mesh(path: str | os.PathLike, name: str | None = None) -> TriangleMesh:
    with open(path) as f:
        rows = [ln.split() for ln in f if ln.strip()]
    try:
        n_v, n_t = int(rows[0][0]), int(rows[0][1])
        verts = np.array(rows[1 : 1 + n_v], dtype=np.float64)
        tris = np.array(rows[1 + n_v : 1 + n_v + n_t], dtype=np.int64)
        syms = []
        rest = rows[1 + n_v + n_t :]
        if rest:
            if rest[0][0] != "symmetries":
                raise ValueError(f"unexpected line {' '.join(rest[0])!r}")
            for row in rest[1 : 1 + int(rest[0][1])]:
                vals = [float(v) for v in row]
                syms.append(Pose(vals[:4], vals[4:7]))
    except (IndexError, ValueError) as exc:
        raise ValueError(f"malformed mesh file {os.fspath(path)}: {exc}") from exc
    if verts.shape != (n_v, 3) or tris.shape != (n_t, 3):
        raise ValueError(f"malformed mesh file {os.fspath(path)}: counts do not match header")
    return TriangleMesh(verts, tris, syms, name or os.path.splitext(os.path.basename(path))[0])
