"""Optimization objectives.

Silhouette, part (zoomed-crop), semantic Chamfer, rotation prior, joint
symmetry, Laplacian smoothness, and normal consistency terms, plus their
weighted combination. Every term is a pure function of tape Tensors and
returns a scalar Tensor; per-pixel and per-element means are used so weights
stay resolution independent.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor, as_tensor
from .render import zoom_crop

__all__ = [
    "LossBreakdown", "loss_sil", "loss_part", "semantic_distance", "loss_sem",
    "loss_rot", "loss_sym", "loss_lap", "loss_norm", "combine",
    "stratified_pixels", "subsample_rows", "log_breakdown",
]


@dataclass
class LossBreakdown:
    sil: float = 0.0
    part: float = 0.0
    sem: float = 0.0
    rot: float = 0.0
    sym: float = 0.0
    lap: float = 0.0
    norm: float = 0.0
    total: float = 0.0

    def as_dict(self):
        return {k: float(getattr(self, k)) for k in
                ("sil", "part", "sem", "rot", "sym", "lap", "norm", "total")}


def _is_grid(x):
    return isinstance(x, (Tensor, np.ndarray)) and np.ndim(
        x.value if isinstance(x, Tensor) else x) == 2


def loss_sil(rendered, target):
    """Mean squared silhouette difference (summed over instances for lists)."""
    if not _is_grid(rendered):
        total = None
        for m, t in zip(rendered, target, strict=True):
            term = loss_sil(m, t)
            total = term if total is None else total + term
        return total if total is not None else Tensor(0.0)
    rendered = as_tensor(rendered)
    tv = target.value if isinstance(target, Tensor) else np.asarray(target)
    if rendered.shape != tv.shape:
        raise ValueError(f"loss_sil: shape mismatch {rendered.shape} vs "
                         f"{tv.shape}")
    d = rendered - as_tensor(tv.astype(np.float64))
    return (d * d).mean()


def loss_part(part_masks, target, boxes, factor=4):
    """Zoomed per-part silhouette loss (Eq. crop-and-upsample).

    ``part_masks`` is a list of per-part (h, w) Tensors for one instance, or
    a list of such lists for an ensemble. ``boxes`` holds one box (or None
    for an invisible part) per part. Averaged over valid (part, instance)
    pairs.
    """
    if part_masks and not _is_grid(part_masks[0]):
        total, count = None, 0
        for masks, tgt, bxs in zip(part_masks, target, boxes, strict=True):
            t, c = _part_terms(masks, tgt, bxs, factor)
            if c:
                total = t if total is None else total + t
                count += c
        if count == 0:
            return Tensor(0.0)
        return total * (1.0 / count)
    t, c = _part_terms(part_masks, target, boxes, factor)
    return Tensor(0.0) if c == 0 else t * (1.0 / c)


def _part_terms(part_masks, target, boxes, factor):
    target = as_tensor(target)
    total, count = None, 0
    for mask, box in zip(part_masks, boxes, strict=True):
        if box is None:
            continue
        cm = zoom_crop(mask, box, factor)
        ct = zoom_crop(target, box, factor)
        d = cm - ct
        term = (d * d).mean()
        total = term if total is None else total + term
        count += 1
    return total, count


def semantic_distance(p, proj, k_p, q_x, alpha):
    """Joint 2D/semantic distance for a single pixel-point pair.

    ``p`` and ``proj`` are image coordinates normalized to [0, 1]; features
    are compared by squared euclidean gap scaled by ``alpha``.
    """
    proj = as_tensor(proj)
    q_x = as_tensor(q_x)
    dp = proj - as_tensor(np.asarray(p, dtype=np.float64))
    df = q_x - as_tensor(np.asarray(k_p, dtype=np.float64))
    return (dp * dp).sum() + alpha * (df * df).sum()


def _chamfer_instance(pixels, pix_feats, proj, point_feats, alpha):
    """mean_p min_x D + mean_x min_p D for one instance.

    pixels (P, 2) / pix_feats (P, d) are constants; proj (X, 2) and
    point_feats (X, d) ride the tape.
    """
    proj = as_tensor(proj)
    pixels = np.asarray(pixels, dtype=np.float64)
    # squared 2D distances: |proj|^2 + |p|^2 - 2 proj.p, (X, P)
    pn = (pixels ** 2).sum(axis=1)
    xn = (proj * proj).sum(axis=1)
    d2 = xn.reshape(-1, 1) + Tensor(pn) - 2.0 * (proj @ Tensor(pixels.T))
    if alpha != 0.0:
        point_feats = as_tensor(point_feats)
        pix_feats = np.asarray(pix_feats, dtype=np.float64)
        fn_p = (pix_feats ** 2).sum(axis=1)
        fn_x = (point_feats * point_feats).sum(axis=1)
        df = fn_x.reshape(-1, 1) + Tensor(fn_p) \
            - 2.0 * (point_feats @ Tensor(pix_feats.T))
        d2 = d2 + alpha * df
    to_pix = ad.hard_min(d2, axis=0).mean()    # per pixel, nearest point
    to_pts = ad.hard_min(d2, axis=1).mean()    # per point, nearest pixel
    return to_pix + to_pts


def loss_sem(pixel_sets, pixel_feats, proj_points, point_feats, alpha):
    """Bidirectional semantic Chamfer loss, summed over instances.

    Each element of the four lists describes one instance (subsampled
    foreground pixels, their features, projected surface points, their
    queried features). Instances without foreground pixels are skipped.
    """
    total = None
    for px, pf, xs, qf in zip(pixel_sets, pixel_feats, proj_points,
                              point_feats, strict=True):
        if len(px) == 0:
            warnings.warn("loss_sem: instance with empty foreground skipped")
            continue
        term = _chamfer_instance(px, pf, xs, qf, alpha)
        total = term if total is None else total + term
    return total if total is not None else Tensor(0.0)


def loss_rot(rotations, rest_rotations):
    """Mean squared Frobenius gap between posed and rest part rotations."""
    r = as_tensor(rotations)        # (P, 3, 3)
    d = r - as_tensor(np.asarray(
        rest_rotations.value if isinstance(rest_rotations, Tensor)
        else rest_rotations, dtype=np.float64))
    n_parts = d.shape[0]
    return (d * d).sum() * (1.0 / n_parts)


_REFLECT_Z = np.array([1.0, 1.0, -1.0])


def loss_sym(joints, sym_pairs):
    """Sum over pairs of squared distance between J_a and the z-reflection
    of J_b."""
    if not sym_pairs:
        return Tensor(0.0)
    joints = as_tensor(joints)
    ia = np.array([a for a, _ in sym_pairs])
    ib = np.array([b for _, b in sym_pairs])
    d = joints[ia] - joints[ib] * Tensor(_REFLECT_Z)
    return (d * d).sum()


def _vertex_adjacency(faces, n_verts):
    """Row-normalized neighbor-average operator (dense, cached by faces id)."""
    key = (id(faces), n_verts)
    cached = _vertex_adjacency._cache.get(key)
    if cached is not None:
        return cached
    adj = np.zeros((n_verts, n_verts))
    for a, b, c in faces:
        for u, v in ((a, b), (b, c), (c, a)):
            adj[u, v] = 1.0
            adj[v, u] = 1.0
    valence = adj.sum(axis=1)
    keep = valence > 0
    avg = np.where(keep[:, None], adj / np.maximum(valence, 1)[:, None], 0.0)
    _vertex_adjacency._cache[key] = (avg, keep)
    return avg, keep


_vertex_adjacency._cache = {}


def loss_lap(verts, faces):
    """Uniform-Laplacian smoothness: mean over (non-isolated) vertices of
    the squared gap to the neighbor centroid."""
    verts = as_tensor(verts)
    avg, keep = _vertex_adjacency(faces, verts.shape[0])
    delta = verts - Tensor(avg) @ verts
    sq = (delta * delta).sum(axis=1)
    n = int(keep.sum())
    if n == 0:
        return Tensor(0.0)
    return (sq * Tensor(keep.astype(np.float64))).sum() * (1.0 / n)


def _face_pairs(faces):
    """Indices of face pairs sharing an edge (cached by faces id)."""
    cached = _face_pairs._cache.get(id(faces))
    if cached is not None:
        return cached
    edge_owner = {}
    pairs = []
    for fi, (a, b, c) in enumerate(faces):
        for u, v in ((a, b), (b, c), (c, a)):
            key = (min(u, v), max(u, v))
            if key in edge_owner:
                pairs.append((edge_owner[key], fi))
            else:
                edge_owner[key] = fi
    out = np.asarray(pairs, dtype=np.int64)
    _face_pairs._cache[id(faces)] = out
    return out


_face_pairs._cache = {}


def _cross(a, b):
    ax, ay, az = a[:, 0], a[:, 1], a[:, 2]
    bx, by, bz = b[:, 0], b[:, 1], b[:, 2]
    return ad.stack([ay * bz - az * by,
                     az * bx - ax * bz,
                     ax * by - ay * bx], axis=1)


def loss_norm(verts, faces):
    """Normal consistency: mean over adjacent face pairs of 1 - cos angle.

    Degenerate (near-zero-area) faces are excluded from the pair set.
    """
    verts = as_tensor(verts)
    pairs = _face_pairs(faces)
    if len(pairs) == 0:
        return Tensor(0.0)
    a = verts[faces[:, 0]]
    b = verts[faces[:, 1]]
    c = verts[faces[:, 2]]
    n = _cross(b - a, c - a)
    mag = n.norm(axis=1)
    ok = mag.value > 1e-12
    unit = n / mag.reshape(-1, 1)
    valid = ok[pairs[:, 0]] & ok[pairs[:, 1]]
    if not valid.any():
        return Tensor(0.0)
    p = pairs[valid]
    cos = (unit[p[:, 0]] * unit[p[:, 1]]).sum(axis=1)
    return (1.0 - cos).mean()


def combine(terms, weights):
    """Weighted total over named loss Tensors.

    Returns (total Tensor, LossBreakdown of raw values + weighted total).
    """
    total = None
    bd = LossBreakdown()
    for name, term in terms.items():
        w = float(weights.get(name, 0.0))
        setattr(bd, name, float(term.value))
        wt = term * w
        total = wt if total is None else total + wt
    if total is None:
        total = Tensor(0.0)
    bd.total = float(total.value)
    return total, bd


def stratified_pixels(mask, n, rng):
    """Up to ``n`` foreground pixel coords (y, x), one per contiguous stratum
    of the row-major foreground ordering. Deterministic given the rng."""
    ys, xs = np.nonzero(np.asarray(mask))
    m = len(ys)
    if m == 0:
        return np.zeros((0, 2), dtype=np.int64)
    if m <= n:
        return np.stack([ys, xs], axis=1)
    edges = (np.arange(n + 1) * m) // n
    picks = np.array([int(rng.integers(lo, hi))
                      for lo, hi in zip(edges[:-1], edges[1:])])
    return np.stack([ys[picks], xs[picks]], axis=1)


def subsample_rows(n_total, m, rng):
    """Sorted choice of ``m`` distinct row indices (all rows if m >= total)."""
    if n_total <= m:
        return np.arange(n_total)
    return np.sort(rng.choice(n_total, size=m, replace=False))


def log_breakdown(fh, step, breakdown: LossBreakdown, stage=None):
    """Append one JSON line of the loss breakdown to an open file."""
    rec = {"step": int(step), **breakdown.as_dict()}
    if stage is not None:
        rec["stage"] = stage
    fh.write(json.dumps(rec) + "\n")
    fh.flush()
