"""Slow, independent reference implementations used by selftest and the tests."""

from __future__ import annotations

import math
from typing import Mapping

import numpy as np

from .embeddings import SurfaceModel
from .renderer import RenderOutput


def naive_log_likelihood(obs, rend: RenderOutput, surface_models: Mapping[int, SurfaceModel], cfg) -> float:
    """Mixture likelihood where every rendered foreground pixel may explain every observed pixel.

    Plain numpy: the correspondence probabilities are the softmax over each
    surface-sample set, recomputed from scratch per class rather than taken
    from the stored log-normalizers.
    """
    fg = np.argwhere(rend.segmentation > 0)
    k_tilde = len(fg)
    mask = obs.data_mask
    n_obs = int(mask.sum())
    if k_tilde == 0:
        return n_obs * math.log(cfg.p_background)
    ball = 3.0 / (4.0 * math.pi * cfg.r**3)
    cls = rend.segmentation[fg[:, 0], fg[:, 1]]
    xyz = rend.point_cloud[fg[:, 0], fg[:, 1]]
    coords = rend.object_coords[fg[:, 0], fg[:, 1]]
    keys = np.zeros((k_tilde, next(iter(surface_models.values())).embed_dim))
    for c in np.unique(cls):
        keys[cls == c] = surface_models[int(c)].key_embed(coords[cls == c])
    total = 0.0
    for i, j in np.argwhere(mask):
        c = obs.point_cloud[i, j]
        near = np.linalg.norm(xyz - c, axis=1) <= cfg.r
        terms = [math.log(cfg.p_background)]
        for k in np.nonzero(near)[0]:
            q = obs.query_maps.queries[cls[k] - 1, i, j]
            logits = surface_models[int(cls[k])].keys @ q
            top = logits.max()
            log_z = top + math.log(np.exp(logits - top).sum())
            log_p = float(q @ keys[k]) - log_z
            terms.append(math.log((1.0 - cfg.epsilon) / k_tilde * ball) + log_p)
        terms = np.array(terms)
        top = terms.max()
        total += top + math.log(np.exp(terms - top).sum())
    return total


def shell_offsets(rho: float) -> np.ndarray:
    """Every integer offset in the half-voxel shell of radius ``rho``."""
    b = int(math.ceil(rho + 0.5))
    ax = np.arange(-b, b + 1)
    off = np.stack(np.meshgrid(ax, ax, ax, indexing="ij"), axis=-1).reshape(-1, 3)
    n = np.linalg.norm(off, axis=1)
    return off[(n >= max(0.0, rho - 0.5)) & (n < rho + 0.5)]


def naive_spherical_vote(centers, radii, weights, origin, dims, d) -> np.ndarray:
    """Visit every voxel of the grid for every vote and test shell membership."""
    grid = np.zeros(dims)
    idx = np.stack(np.meshgrid(*[np.arange(n) for n in dims], indexing="ij"), axis=-1)
    for c, r, w in zip(np.asarray(centers, float), np.asarray(radii, float), np.asarray(weights, float)):
        snap = np.rint((c - np.asarray(origin, float)) / d).astype(np.int64)
        rho = r / d
        n = np.sqrt(np.sum((idx - snap) ** 2, axis=-1).astype(np.float64))
        inside = (n >= max(0.0, rho - 0.5)) & (n < rho + 0.5)
        # same accumulation order as the fast path: one add per voxel per vote
        grid[inside] += w
    return grid
