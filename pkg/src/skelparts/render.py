"""Differentiable camera projection and soft silhouette rasterization.

The rasterizer is a fused tape operation: the forward pass rasterizes every
triangle into a per-part soft coverage map (sigmoid of signed 2D pixel
distance), parts are aggregated with the soft union 1 - prod(1 - m_i), and
the backward pass routes silhouette gradients to the projected vertices
analytically (envelope form of the point-segment distance).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor

__all__ = [
    "CameraPose", "rodrigues", "camera_from_angles", "project",
    "soft_rasterize_part", "rasterize_soft", "RenderBuffer", "visibility",
    "part_box", "zoom_crop",
]

DEPTH_EPS = 1e-3
SDF_CUTOFF = 6.0  # in units of sigma; contributions beyond are dropped


@dataclass
class CameraPose:
    rvec: np.ndarray      # axis-angle (3,)
    tvec: np.ndarray      # (3,)
    focal: float = 2.0

    def __post_init__(self):
        self.rvec = np.asarray(self.rvec, dtype=np.float64)
        self.tvec = np.asarray(self.tvec, dtype=np.float64)
        if self.focal <= 0 or not np.isfinite(self.focal) \
                or not np.isfinite(self.rvec).all() \
                or not np.isfinite(self.tvec).all():
            raise ValueError("invalid camera parameters")


def rodrigues(rvec):
    """Axis-angle 3-vector -> rotation matrix, on the tape.

    Uses the series-stable form R = I + A*K + B*K^2 with A = sin(t)/t and
    B = (1 - cos(t))/t^2, finite at t -> 0.
    """
    r = as_tensor(rvec)
    sq = (r * r).sum() + 1e-24
    theta = sq ** 0.5
    a = ad.sin(theta) / theta
    b = (1.0 - ad.cos(theta)) / sq
    zero = r[0] * 0.0
    k = ad.stack([
        ad.stack([zero, -r[2], r[1]]),
        ad.stack([r[2], zero, -r[0]]),
        ad.stack([-r[1], r[0], zero]),
    ])
    eye = Tensor(np.eye(3))
    return eye + a * k + b * (k @ k)


def camera_from_angles(azimuth, elevation, distance=3.0, focal=2.0):
    """Orbit camera looking at the origin; angles in radians."""
    ry = np.array([[np.cos(azimuth), 0, np.sin(azimuth)],
                   [0, 1, 0],
                   [-np.sin(azimuth), 0, np.cos(azimuth)]])
    rx = np.array([[1, 0, 0],
                   [0, np.cos(elevation), -np.sin(elevation)],
                   [0, np.sin(elevation), np.cos(elevation)]])
    rot = rx @ ry
    # axis-angle from matrix
    cos_t = (np.trace(rot) - 1.0) / 2.0
    cos_t = np.clip(cos_t, -1.0, 1.0)
    t = np.arccos(cos_t)
    if t < 1e-12:
        rvec = np.zeros(3)
    else:
        axis = np.array([rot[2, 1] - rot[1, 2], rot[0, 2] - rot[2, 0],
                         rot[1, 0] - rot[0, 1]]) / (2.0 * np.sin(t))
        rvec = axis * t
    return CameraPose(rvec=rvec, tvec=np.array([0.0, 0.0, distance]),
                      focal=focal)


def project(rvec, tvec, focal, points, image_size, weak_perspective=False):
    """Perspective projection onto the pixel grid.

    Returns (pixels Tensor (k, 2) as (u, v), depth Tensor (k,), behind mask).
    Points at or behind the camera plane get depth clamped to DEPTH_EPS with
    zero gradient and are flagged in the mask.
    """
    h, w = image_size
    points = as_tensor(points)
    rot = rodrigues(rvec)
    xc = points @ rot.T + as_tensor(tvec)
    z = xc[:, 2]
    behind = z.value <= DEPTH_EPS
    z = ad.clamp(z, lo=DEPTH_EPS)
    denom = z.mean() if weak_perspective else z
    f = as_tensor(focal)
    u = (f * xc[:, 0] / denom * 0.5 + 0.5) * w
    v = (f * xc[:, 1] / denom * 0.5 + 0.5) * h
    return ad.stack([u, v], axis=1), z, behind


def _face_coverage(tri, p, sigma_px):
    """Soft coverage + gradient intermediates for faces x window pixels.

    tri: (F, 3, 2) projected triangles; p: (F, K, K, 2) pixel centers.
    Returns (coverage (F,K,K), d_cov/d_vertex (F,K,K,3,2)).
    """
    dist2 = np.full(p.shape[:3], np.inf)
    grads = np.zeros(p.shape[:3] + (3, 2))
    best_u = np.zeros(p.shape[:3] + (2,))
    best_t = np.zeros(p.shape[:3])
    best_e = np.zeros(p.shape[:3], dtype=np.int8)
    crosses = []

    for e in range(3):
        a = tri[:, e][:, None, None, :]
        b = tri[:, (e + 1) % 3][:, None, None, :]
        abv = b - a
        ab2 = (abv ** 2).sum(-1)
        t = ((p - a) * abv).sum(-1) / np.maximum(ab2, 1e-24)
        t = np.clip(t, 0.0, 1.0)
        c = a + t[..., None] * abv
        diff = p - c
        d2 = (diff ** 2).sum(-1)
        closer = d2 < dist2
        dist2 = np.where(closer, d2, dist2)
        dn = np.sqrt(np.maximum(d2, 1e-24))
        best_u = np.where(closer[..., None], diff / dn[..., None], best_u)
        best_t = np.where(closer, t, best_t)
        best_e = np.where(closer, e, best_e)
        crosses.append(abv[..., 0] * (p - a)[..., 1]
                       - abv[..., 1] * (p - a)[..., 0])

    crosses = np.stack(crosses)
    inside = (crosses > 0).all(axis=0) | (crosses < 0).all(axis=0)

    dist = np.sqrt(dist2)
    sign = np.where(inside, 1.0, -1.0)
    sd = sign * dist
    cov = 1.0 / (1.0 + np.exp(-np.clip(sd / sigma_px, -60, 60)))

    # degenerate projected faces contribute nothing
    area = 0.5 * np.abs(
        (tri[:, 1, 0] - tri[:, 0, 0]) * (tri[:, 2, 1] - tri[:, 0, 1])
        - (tri[:, 2, 0] - tri[:, 0, 0]) * (tri[:, 1, 1] - tri[:, 0, 1]))
    degen = area < 1e-12
    cov[degen] = 0.0

    # d cov / d sd, then envelope gradients to the two active edge endpoints
    dcov_dsd = cov * (1.0 - cov) / sigma_px
    gsd = sign * dcov_dsd  # d cov / d dist times sign
    for e in range(3):
        sel = best_e == e
        wa = np.where(sel, 1.0 - best_t, 0.0)[..., None] * (-best_u)
        wb = np.where(sel, best_t, 0.0)[..., None] * (-best_u)
        grads[..., e, :] += gsd[..., None] * wa
        grads[..., (e + 1) % 3, :] += gsd[..., None] * wb
    grads[degen] = 0.0

    # barycentric weights for depth interpolation (edge e's sub-area belongs
    # to the opposite vertex (e+2) % 3); only meaningful inside the face
    total = crosses.sum(axis=0)
    with np.errstate(divide="ignore", invalid="ignore"):
        bary = np.where(np.abs(total) > 1e-24, crosses / total, 1.0 / 3.0)
    return cov, grads, inside, bary


def soft_rasterize_part(verts2d, depth, faces, image_size, sigma_px,
                        chunk=512):
    """Soft mask of one triangle mesh; fused differentiable op.

    Returns (mask Tensor (h, w), zbuf ndarray (h, w) of nearest covered face
    depth, +inf where uncovered). Gradients flow to ``verts2d`` only.
    """
    h, w = image_size
    verts2d = as_tensor(verts2d)
    depth = as_tensor(depth)
    v2 = verts2d.value
    zv = depth.value
    faces = np.asarray(faces, dtype=np.int64)

    pad = SDF_CUTOFF * sigma_px + 1.0
    maxcov = np.zeros(h * w)  # per-pixel max face coverage
    zbuf = np.full((h, w), np.inf)
    saved = []

    tri_all = v2[faces]  # (F, 3, 2) as (u, v)
    for start in range(0, len(faces), chunk):
        tri = tri_all[start:start + chunk]
        fidx = faces[start:start + chunk]
        n = len(tri)
        lo = np.floor(tri.min(axis=1) - pad).astype(int)
        hi = np.ceil(tri.max(axis=1) + pad).astype(int)
        k = int(max((hi - lo).max(initial=1), 1))
        k = min(k, max(h, w))
        c0 = np.clip(lo[:, 0], 0, max(w - k, 0))
        r0 = np.clip(lo[:, 1], 0, max(h - k, 0))
        kr = min(k, h)
        kc = min(k, w)
        rows = r0[:, None] + np.arange(kr)[None, :]
        cols = c0[:, None] + np.arange(kc)[None, :]
        rows = np.minimum(rows, h - 1)
        cols = np.minimum(cols, w - 1)
        p = np.empty((n, kr, kc, 2))
        p[..., 0] = cols[:, None, :] + 0.5
        p[..., 1] = rows[:, :, None] + 0.5

        cov, grads, inside, bary = _face_coverage(tri, p, sigma_px)

        flat = (rows[:, :, None] * w + cols[:, None, :]).reshape(-1)
        np.maximum.at(maxcov, flat, cov.reshape(-1))

        # depth buffer: barycentric-interpolated depth where pixel is inside
        if inside.any():
            ztri = zv[fidx]  # (n, 3)
            zpix = (bary[0] * ztri[:, 2, None, None]
                    + bary[1] * ztri[:, 0, None, None]
                    + bary[2] * ztri[:, 1, None, None])
            fi, ri, ci = np.nonzero(inside)
            np.minimum.at(zbuf, (rows[fi, ri], cols[fi, ci]),
                          zpix[fi, ri, ci])
        saved.append((fidx, rows, cols, cov, grads))

    mask_val = maxcov.reshape(h, w)

    # exact ties at the argmax happen systematically (a pixel beyond a shared
    # edge is equidistant to both adjacent faces); split the subgradient
    ties = np.zeros(h * w)
    for fidx, rows, cols, cov, grads in saved:
        flat = (rows[:, :, None] * w + cols[:, None, :]).reshape(-1)
        np.add.at(ties, flat,
                  ((cov >= maxcov.reshape(h, w)[rows[:, :, None],
                                                cols[:, None, :]])
                   & (cov > 0.0)).reshape(-1).astype(np.float64))
    ties = np.maximum(ties, 1.0)

    out = Tensor(mask_val, parents=(verts2d, depth))

    def bw(g):
        gflat = g.reshape(-1)
        vgrad = np.zeros_like(v2)
        for fidx, rows, cols, cov, grads in saved:
            flat = rows[:, :, None] * np.int64(w) + cols[:, None, :]
            is_max = (cov >= maxcov[flat]) & (cov > 0.0)
            if not is_max.any():
                continue
            gcov = np.where(is_max, gflat[flat] / ties[flat], 0.0)
            gverts = gcov[..., None, None] * grads  # (n, kr, kc, 3, 2)
            contrib = gverts.sum(axis=(1, 2))       # (n, 3, 2)
            np.add.at(vgrad, fidx.reshape(-1), contrib.reshape(-1, 2))
        return (vgrad, None)
    out._backward = bw
    return out, zbuf


@dataclass
class RenderBuffer:
    silhouette: Tensor            # (h, w) in [0, 1]
    part_masks: list              # per part Tensor (h, w)
    depth: np.ndarray             # (h, w) nearest surface depth, inf if empty
    verts2d: list                 # per part Tensor (m, 2)
    vert_depth: list              # per part Tensor (m,)


def rasterize_soft(parts, rvec, tvec, focal, image_size, sigma,
                   weak_perspective=False) -> RenderBuffer:
    """Render part meshes into a soft silhouette.

    ``parts`` is a list of (vertices Tensor (m, 3), faces ndarray). ``sigma``
    is in normalized image units (fraction of the image height).
    """
    h, w = image_size
    sigma_px = max(sigma * h, 1e-6)
    part_masks, v2s, zs = [], [], []
    depth_all = np.full((h, w), np.inf)
    if not parts:
        zero = Tensor(np.zeros((h, w)))
        return RenderBuffer(zero, [], depth_all, [], [])
    for verts, faces in parts:
        v2, z, _ = project(rvec, tvec, focal, verts, image_size,
                           weak_perspective=weak_perspective)
        m, zbuf = soft_rasterize_part(v2, z, faces, image_size, sigma_px)
        part_masks.append(m)
        v2s.append(v2)
        zs.append(z)
        depth_all = np.minimum(depth_all, zbuf)
    inv = 1.0 - part_masks[0]
    for m in part_masks[1:]:
        inv = inv * (1.0 - m)
    sil = 1.0 - inv
    return RenderBuffer(silhouette=sil, part_masks=part_masks,
                        depth=depth_all, verts2d=v2s, vert_depth=zs)


def visibility(buffer: RenderBuffer, image_size, eps_z=0.05):
    """Per part, per surface sample: True iff the sample's depth is within
    ``eps_z`` of the depth buffer at its projected pixel (and on-screen)."""
    h, w = image_size
    out = []
    for v2, z in zip(buffer.verts2d, buffer.vert_depth):
        u = np.floor(v2.value[:, 0]).astype(int)
        v = np.floor(v2.value[:, 1]).astype(int)
        onscreen = (u >= 0) & (u < w) & (v >= 0) & (v < h)
        ui, vi = np.clip(u, 0, w - 1), np.clip(v, 0, h - 1)
        zb = buffer.depth[vi, ui]
        # inf depth means nothing rendered solidly at that pixel (grazing
        # sliver faces): no occluder, count the sample as visible
        vis = onscreen & (~np.isfinite(zb) | (z.value <= zb + eps_z))
        out.append(vis)
    return out


def part_box(mask_value, threshold=0.5, pad_frac=0.1):
    """Bounding box (r0, r1, c0, c1) of mask >= threshold, padded 10%.

    Returns None when the part is entirely below threshold (invisible).
    """
    ys, xs = np.nonzero(np.asarray(mask_value) >= threshold)
    if len(ys) == 0:
        return None
    h, w = np.asarray(mask_value).shape
    r0, r1 = ys.min(), ys.max() + 1
    c0, c1 = xs.min(), xs.max() + 1
    pr = int(np.ceil((r1 - r0) * pad_frac))
    pc = int(np.ceil((c1 - c0) * pad_frac))
    return (max(r0 - pr, 0), min(r1 + pr, h), max(c0 - pc, 0), min(c1 + pc, w))


def zoom_crop(grid, box, factor=4):
    """Crop ``box`` from a (h, w) grid and bilinearly upsample by ``factor``.

    Linear in the grid values, so it is a fixed-weight gather on the tape.
    The same box must be applied to both rendered and target masks.
    """
    grid = as_tensor(grid)
    h, w = grid.shape
    r0, r1, c0, c1 = box
    bh, bw_ = r1 - r0, c1 - c0
    oh, ow = int(round(bh * factor)), int(round(bw_ * factor))
    ys = r0 + (np.arange(oh) + 0.5) * (bh / oh) - 0.5
    xs = c0 + (np.arange(ow) + 0.5) * (bw_ / ow) - 0.5
    ys = np.clip(ys, 0, h - 1)
    xs = np.clip(xs, 0, w - 1)
    y0 = np.floor(ys).astype(int)
    x0 = np.floor(xs).astype(int)
    y1 = np.minimum(y0 + 1, h - 1)
    x1 = np.minimum(x0 + 1, w - 1)
    fy = (ys - y0)[:, None]
    fx = (xs - x0)[None, :]

    g = grid.value
    val = (g[np.ix_(y0, x0)] * (1 - fy) * (1 - fx)
           + g[np.ix_(y0, x1)] * (1 - fy) * fx
           + g[np.ix_(y1, x0)] * fy * (1 - fx)
           + g[np.ix_(y1, x1)] * fy * fx)
    out = Tensor(val, parents=(grid,))

    def bw(gout):
        gin = np.zeros_like(g)
        for yy, wy in ((y0, 1 - fy), (y1, fy)):
            for xx, wx in ((x0, 1 - fx), (x1, fx)):
                np.add.at(gin, np.ix_(yy, xx), gout * wy * wx)
        return (gin,)
    out._backward = bw
    return out
