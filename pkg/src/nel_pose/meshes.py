"""Procedural test objects, centered on their bounding-box center."""

from __future__ import annotations

import math

import numpy as np

from .geometry import Pose, axis_angle_to_quat
from .renderer import TriangleMesh


def _centered(vertices: np.ndarray) -> np.ndarray:
    lo, hi = vertices.min(axis=0), vertices.max(axis=0)
    return vertices - 0.5 * (lo + hi)


def _half_turns() -> list[Pose]:
    return [Pose(axis_angle_to_quat(a, math.pi)) for a in np.eye(3)]


def box(sx: float = 60.0, sy: float = 40.0, sz: float = 30.0, name: str = "box") -> TriangleMesh:
    x, y, z = sx / 2, sy / 2, sz / 2
    v = np.array(
        [[-x, -y, -z], [x, -y, -z], [x, y, -z], [-x, y, -z], [-x, -y, z], [x, -y, z], [x, y, z], [-x, y, z]]
    )
    f = [
        [0, 2, 1], [0, 3, 2],  # -z
        [4, 5, 6], [4, 6, 7],  # +z
        [0, 1, 5], [0, 5, 4],  # -y
        [3, 7, 6], [3, 6, 2],  # +y
        [0, 4, 7], [0, 7, 3],  # -x
        [1, 2, 6], [1, 6, 5],  # +x
    ]
    return TriangleMesh(v, f, _half_turns(), name)


def extrude(polygon: np.ndarray, cap_triangles, thickness: float, name: str) -> TriangleMesh:
    """Prism over a counter-clockwise 2-D polygon with a given cap triangulation."""
    polygon = np.asarray(polygon, dtype=np.float64)
    n = len(polygon)
    h = thickness / 2
    bottom = np.column_stack([polygon, np.full(n, -h)])
    top = np.column_stack([polygon, np.full(n, h)])
    verts = _centered(np.vstack([bottom, top]))
    tris = []
    for a, b, c in cap_triangles:
        tris.append([a, c, b])
        tris.append([a + n, b + n, c + n])
    for k in range(n):
        k2 = (k + 1) % n
        tris.append([k, k2, k2 + n])
        tris.append([k, k2 + n, k + n])
    return TriangleMesh(verts, tris, [], name)


def bracket(name: str = "bracket") -> TriangleMesh:
    """L-shaped block, 70 x 50 x 30 mm; no proper symmetries."""
    poly = np.array([[0, 0], [70, 0], [70, 20], [20, 20], [20, 50], [0, 50]], dtype=np.float64)
    caps = [(0, 1, 2), (0, 2, 3), (0, 3, 4), (0, 4, 5)]
    return extrude(poly, caps, 30.0, name)


def wedge(name: str = "wedge") -> TriangleMesh:
    """Right-triangle prism (scalene cross-section)."""
    poly = np.array([[0, 0], [70, 0], [0, 40]], dtype=np.float64)
    return extrude(poly, [(0, 1, 2)], 35.0, name)


def cylinder(radius: float = 25.0, height: float = 60.0, segments: int = 64, name: str = "cylinder") -> TriangleMesh:
    """Capped cylinder about the z axis.

    Declared symmetries are the spins by multiples of ``2 pi / segments``,
    which map the polygonal mesh onto itself.
    """
    ang = 2.0 * math.pi * np.arange(segments) / segments
    ring = np.column_stack([radius * np.cos(ang), radius * np.sin(ang)])
    h = height / 2
    verts = np.vstack([np.column_stack([ring, np.full(segments, -h)]), np.column_stack([ring, np.full(segments, h)])])
    verts = np.vstack([verts, [[0, 0, -h], [0, 0, h]]])
    cb, ct = 2 * segments, 2 * segments + 1
    tris = []
    for k in range(segments):
        k2 = (k + 1) % segments
        tris.append([k, k2, k2 + segments])
        tris.append([k, k2 + segments, k + segments])
        tris.append([cb, k2, k])
        tris.append([ct, k + segments, k2 + segments])
    syms = [Pose(axis_angle_to_quat([0, 0, 1], a)) for a in ang[1:]]
    return TriangleMesh(verts, tris, syms, name)


def panel(width: float = 100.0, height: float = 110.0, thickness: float = 10.0, name: str = "panel") -> TriangleMesh:
    """Thin slab used as an occluder."""
    return box(width, height, thickness, name)


BUILTIN = {
    "box": box,
    "bracket": bracket,
    "wedge": wedge,
    "cylinder": cylinder,
    "panel": panel,
}


def builtin_mesh(name: str) -> TriangleMesh:
    try:
        return BUILTIN[name]()
    except KeyError:
        raise KeyError(f"unknown built-in mesh {name!r}; choose from {sorted(BUILTIN)}") from None
