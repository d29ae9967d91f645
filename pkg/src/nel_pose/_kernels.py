"""Compiled inner loops.

Every kernel either runs sequentially or parallelizes only over independent
outputs, so results are bit-identical for any thread count.
"""

import math

import numpy as np
from numba import njit, prange

_NEAR = 1e-3


@njit(cache=True)
def _top_left(du, dv):
    # an edge owns the pixel centers lying exactly on it iff it is a "top" or
    # "left" edge; opposite traversal directions never both qualify
    return dv > 0.0 or (dv == 0.0 and du < 0.0)


@njit(cache=True)
def rasterize(cam_tris, obj_tris, tri_class, tri_inst, fx, fy, cx, cy, height, width):
    """Z-buffered coverage of triangles given in camera frame.

    Pixel (i, j) has its center at image coordinates (u=j, v=i).
    Returns depth (0 = empty), object coordinates, class map and instance map.
    """
    depth = np.full((height, width), np.inf)
    objxyz = np.zeros((height, width, 3))
    seg = np.zeros((height, width), dtype=np.int32)
    inst = np.zeros((height, width), dtype=np.int32)
    n_tris = cam_tris.shape[0]
    us = np.empty(3)
    vs = np.empty(3)
    zs = np.empty(3)
    order = np.empty(3, dtype=np.int64)
    for t in range(n_tris):
        if cam_tris[t, 0, 2] <= _NEAR or cam_tris[t, 1, 2] <= _NEAR or cam_tris[t, 2, 2] <= _NEAR:
            continue
        for k in range(3):
            zs[k] = cam_tris[t, k, 2]
            us[k] = fx * cam_tris[t, k, 0] / zs[k] + cx
            vs[k] = fy * cam_tris[t, k, 1] / zs[k] + cy
        area = (us[1] - us[0]) * (vs[2] - vs[0]) - (vs[1] - vs[0]) * (us[2] - us[0])
        if area == 0.0:
            continue
        if area > 0.0:
            order[0], order[1], order[2] = 0, 1, 2
        else:
            order[0], order[1], order[2] = 0, 2, 1
            area = -area
        a0, a1, a2 = order[0], order[1], order[2]
        u0, v0 = us[a0], vs[a0]
        u1, v1 = us[a1], vs[a1]
        u2, v2 = us[a2], vs[a2]
        umin = max(0, int(math.ceil(min(u0, min(u1, u2)))))
        umax = min(width - 1, int(math.floor(max(u0, max(u1, u2)))))
        vmin = max(0, int(math.ceil(min(v0, min(v1, v2)))))
        vmax = min(height - 1, int(math.floor(max(v0, max(v1, v2)))))
        tl0 = _top_left(u2 - u1, v2 - v1)
        tl1 = _top_left(u0 - u2, v0 - v2)
        tl2 = _top_left(u1 - u0, v1 - v0)
        for i in range(vmin, vmax + 1):
            pv = float(i)
            for j in range(umin, umax + 1):
                pu = float(j)
                e0 = (u2 - u1) * (pv - v1) - (v2 - v1) * (pu - u1)
                e1 = (u0 - u2) * (pv - v2) - (v0 - v2) * (pu - u2)
                e2 = (u1 - u0) * (pv - v0) - (v1 - v0) * (pu - u0)
                if e0 < 0.0 or e1 < 0.0 or e2 < 0.0:
                    continue
                if (e0 == 0.0 and not tl0) or (e1 == 0.0 and not tl1) or (e2 == 0.0 and not tl2):
                    continue
                # perspective-correct barycentrics
                w0 = e0 / area / zs[a0]
                w1 = e1 / area / zs[a1]
                w2 = e2 / area / zs[a2]
                s = w0 + w1 + w2
                z = 1.0 / s
                if z < depth[i, j]:
                    depth[i, j] = z
                    b0 = w0 / s
                    b1 = w1 / s
                    b2 = w2 / s
                    for c in range(3):
                        objxyz[i, j, c] = (
                            b0 * obj_tris[t, a0, c] + b1 * obj_tris[t, a1, c] + b2 * obj_tris[t, a2, c]
                        )
                    seg[i, j] = tri_class[t]
                    inst[i, j] = tri_inst[t]
    for i in range(height):
        for j in range(width):
            if not np.isfinite(depth[i, j]):
                depth[i, j] = 0.0
    return depth, objxyz, seg, inst


@njit(cache=True)
def fourier_keys(points, directions, omega, weights, canonical_axis):
    """Unit key embeddings ``normalize(W f(x))``.

    ``f(x) = (cos(omega d_k . x), sin(omega d_k . x))_k / sqrt(n_dirs)``.
    With ``canonical_axis`` set, x is first replaced by
    ``(sqrt(x^2 + y^2), 0, z)`` so keys are invariant to spins about z.
    """
    n = points.shape[0]
    n_dirs = directions.shape[0]
    n_feat = 2 * n_dirs
    e = weights.shape[0]
    out = np.empty((n, e))
    feat = np.empty(n_feat)
    scale = 1.0 / math.sqrt(n_dirs)
    for p in range(n):
        x0 = points[p, 0]
        x1 = points[p, 1]
        x2 = points[p, 2]
        if canonical_axis:
            x0 = math.sqrt(x0 * x0 + x1 * x1)
            x1 = 0.0
        for k in range(n_dirs):
            a = omega * (directions[k, 0] * x0 + directions[k, 1] * x1 + directions[k, 2] * x2)
            feat[2 * k] = scale * math.cos(a)
            feat[2 * k + 1] = scale * math.sin(a)
        norm2 = 0.0
        for r in range(e):
            acc = 0.0
            for c in range(n_feat):
                acc += weights[r, c] * feat[c]
            out[p, r] = acc
            norm2 += acc * acc
        inv = 1.0 / math.sqrt(norm2)
        for r in range(e):
            out[p, r] *= inv
    return out


@njit(cache=True, parallel=True)
def query_statistics(queries, keys):
    """Per query row: log-sum-exp of ``q . k`` over keys, argmax and max.

    Ties in the argmax go to the lowest key index.
    """
    n = queries.shape[0]
    s = keys.shape[0]
    e = keys.shape[1]
    lognorm = np.empty(n)
    best = np.empty(n, dtype=np.int64)
    best_dot = np.empty(n)
    for p in prange(n):
        dots = np.empty(s)
        m = -np.inf
        arg = 0
        for k in range(s):
            acc = 0.0
            for c in range(e):
                acc += queries[p, c] * keys[k, c]
            dots[k] = acc
            if acc > m:
                m = acc
                arg = k
        tot = 0.0
        for k in range(s):
            tot += math.exp(dots[k] - m)
        lognorm[p] = m + math.log(tot)
        best[p] = arg
        best_dot[p] = m
    return lognorm, best, best_dot


@njit(cache=True)
def unproject_kernel(depth, fx, fy, cx, cy):
    h, w = depth.shape
    out = np.zeros((h, w, 3))
    for i in range(h):
        for j in range(w):
            z = depth[i, j]
            if z > 0.0:
                out[i, j, 0] = (j - cx) * z / fx
                out[i, j, 1] = (i - cy) * z / fy
                out[i, j, 2] = z
    return out


@njit(cache=True)
def _window(lo, hi, c, cz, r, f, center):
    # pixel range whose rendered points can lie within r of (c, cz) along one
    # image axis, given that rendered points sit on their pixel-center rays
    zl = cz - r
    if zl <= 0.0:
        return lo, hi
    zh = cz + r
    a = min((c - r) / zl, (c - r) / zh)
    b = max((c + r) / zl, (c + r) / zh)
    return max(lo, int(math.floor(center + f * a)) - 1), min(hi, int(math.ceil(center + f * b)) + 2)


@njit(cache=True)
def log_likelihood_kernel(
    obs_xyz, mask, queries, lognorm, r_idx, r_xyz, r_cls, r_keys, log_w_fg, log_p_bg, r, ph, pw, intr
):
    """Sum over masked-in observed pixels of the per-pixel mixture log-density.

    Rendered foreground pixels are stored compactly: ``r_idx[i, j]`` is the
    row of pixel (i, j) in ``r_xyz``, ``r_cls`` and ``r_keys``, or -1 for
    background. The rendered neighbourhood of pixel (i, j) spans rows
    ``i - ph//2 .. i + ph - ph//2 - 1`` (columns likewise); rendered pixels
    outside the image contribute nothing.

    ``intr = (fx, fy, cx, cy)`` of the render camera, when fx > 0, lets the
    scan skip pixels whose ray cannot pass within r of the observed point.
    Skipped pixels would fail the ball test anyway, so the result is unchanged.
    """
    prune = intr[0] > 0.0
    h = obs_xyz.shape[0]
    w = obs_xyz.shape[1]
    e = r_keys.shape[1]
    before_i = ph // 2
    after_i = ph - ph // 2 - 1
    before_j = pw // 2
    after_j = pw - pw // 2 - 1
    r2 = r * r
    total = 0.0
    terms = np.empty(min(ph * pw, h * w) + 1)
    for i in range(h):
        for j in range(w):
            if not mask[i, j]:
                continue
            n_terms = 1
            terms[0] = log_p_bg
            m = log_p_bg
            cx = obs_xyz[i, j, 0]
            cy = obs_xyz[i, j, 1]
            cz = obs_xyz[i, j, 2]
            i_lo, i_hi = max(0, i - before_i), min(h, i + after_i + 1)
            j_lo, j_hi = max(0, j - before_j), min(w, j + after_j + 1)
            if prune:
                i_lo, i_hi = _window(i_lo, i_hi, cy, cz, r, intr[1], intr[3])
                j_lo, j_hi = _window(j_lo, j_hi, cx, cz, r, intr[0], intr[2])
            for ii in range(i_lo, i_hi):
                for jj in range(j_lo, j_hi):
                    k = r_idx[ii, jj]
                    if k < 0:
                        continue
                    dx = cx - r_xyz[k, 0]
                    dy = cy - r_xyz[k, 1]
                    dz = cz - r_xyz[k, 2]
                    if dx * dx + dy * dy + dz * dz > r2:
                        continue
                    s = r_cls[k]
                    acc = 0.0
                    for c in range(e):
                        acc += queries[s - 1, i, j, c] * r_keys[k, c]
                    t = log_w_fg + acc - lognorm[s - 1, i, j]
                    terms[n_terms] = t
                    n_terms += 1
                    if t > m:
                        m = t
            tot = 0.0
            for k in range(n_terms):
                tot += math.exp(terms[k] - m)
            total += m + math.log(tot)
    return total


@njit(cache=True, parallel=True)
def batch_log_likelihood_kernel(
    obs_xyz, mask, queries, lognorm, r_idx, offsets, r_xyz, r_cls, r_keys, log_w_fg, log_p_bg, r, ph, pw, intr
):
    """One likelihood per render; render b owns compact rows offsets[b]..offsets[b+1]-1."""
    n = r_idx.shape[0]
    out = np.empty(n)
    for b in prange(n):
        lo = offsets[b]
        hi = offsets[b + 1]
        out[b] = log_likelihood_kernel(
            obs_xyz, mask, queries, lognorm, r_idx[b], r_xyz[lo:hi], r_cls[lo:hi], r_keys[lo:hi],
            log_w_fg[b], log_p_bg, r, ph, pw, intr,
        )
    return out


@njit(cache=True)
def spherical_vote_kernel(grid, centers, radii, weights, origin, d):
    """Accumulate each vote onto its half-voxel shell, votes in input order.

    Candidate offsets come from loose loop bounds; membership itself is the
    exact test ``max(0, rho - 0.5) <= |offset| < rho + 0.5``.
    """
    lx, ly, lz = grid.shape
    for v in range(centers.shape[0]):
        w = weights[v]
        cu = int(np.rint((centers[v, 0] - origin[0]) / d))
        cv = int(np.rint((centers[v, 1] - origin[1]) / d))
        cw = int(np.rint((centers[v, 2] - origin[2]) / d))
        rho = radii[v] / d
        outer = rho + 0.5
        inner = max(0.0, rho - 0.5)
        bound = int(math.ceil(outer))
        for ox in range(-bound, bound + 1):
            x = cu + ox
            if x < 0 or x >= lx:
                continue
            rem_x = outer * outer - ox * ox
            if rem_x < 0.0:
                continue
            by = int(math.floor(math.sqrt(rem_x))) + 1
            for oy in range(-by, by + 1):
                y = cv + oy
                if y < 0 or y >= ly:
                    continue
                rem = outer * outer - ox * ox - oy * oy
                if rem < 0.0:
                    continue
                zhi = int(math.floor(math.sqrt(rem))) + 1
                rin = inner * inner - ox * ox - oy * oy
                zlo = 0
                if rin > 0.0:
                    zlo = max(0, int(math.ceil(math.sqrt(rin))) - 1)
                for az in range(zlo, zhi + 1):
                    n = math.sqrt(float(ox * ox + oy * oy + az * az))
                    if n < inner or n >= outer:
                        continue
                    z = cw + az
                    if 0 <= z < lz:
                        grid[x, y, z] += w
                    if az != 0:
                        z = cw - az
                        if 0 <= z < lz:
                            grid[x, y, z] += w
    return grid


@njit(cache=True)
def score_poses_kernel(positions, rot_keypoints, grids, origin, d):
    """Heuristic score for every (position, rotation) pair.

    ``rot_keypoints[j, i]`` is keypoint i rotated by grid rotation j.
    """
    n_pos = positions.shape[0]
    n_rot = rot_keypoints.shape[0]
    n_kp = rot_keypoints.shape[1]
    lx = grids.shape[1]
    ly = grids.shape[2]
    lz = grids.shape[3]
    out = np.zeros((n_pos, n_rot))
    for p in range(n_pos):
        for j in range(n_rot):
            s = 0.0
            for i in range(n_kp):
                u = int(np.rint((rot_keypoints[j, i, 0] + positions[p, 0] - origin[0]) / d))
                v = int(np.rint((rot_keypoints[j, i, 1] + positions[p, 1] - origin[1]) / d))
                w = int(np.rint((rot_keypoints[j, i, 2] + positions[p, 2] - origin[2]) / d))
                if 0 <= u < lx and 0 <= v < ly and 0 <= w < lz:
                    s += grids[i, u, v, w]
            out[p, j] = s
    return out
