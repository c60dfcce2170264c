"""Texture sampling, mesh export, and evaluation metrics.

Evaluation follows the keypoint-transfer protocol: attach a source-image
keypoint to its nearest visible surface sample, carry it through the shared
template to the target instance, and reproject. PCK and IOU are computed with
strict thresholds.
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .autodiff import Tensor
from .render import project

__all__ = [
    "TexturedMesh", "sample_texture", "transfer_keypoints", "pck",
    "iou", "part_iou", "export_obj", "import_obj",
]


@dataclass
class TexturedMesh:
    vertices: np.ndarray   # (n, 3)
    faces: np.ndarray      # (F, 3)
    colors: np.ndarray     # (n, 3) in [0, 1]
    part_ids: np.ndarray   # (n,)

    def validate(self):
        if not np.isfinite(self.colors).all() or \
                not np.isfinite(self.vertices).all():
            raise ValueError("textured mesh has non-finite values")
        if self.faces.size and self.faces.max() >= len(self.vertices):
            raise ValueError("face references missing vertex")


def _project_np(camera, points, image_size):
    px, z, _ = project(Tensor(camera.rvec), Tensor(camera.tvec), camera.focal,
                       Tensor(np.asarray(points, dtype=np.float64)),
                       image_size)
    return px.value, z.value


def _bilinear_rgb(rgb, uv):
    """Clamped bilinear sample of an (h, w, 3) image at float pixel coords."""
    h, w = rgb.shape[:2]
    u = np.clip(uv[:, 0] - 0.5, 0, w - 1)
    v = np.clip(uv[:, 1] - 0.5, 0, h - 1)
    u0 = np.floor(u).astype(int)
    v0 = np.floor(v).astype(int)
    u1 = np.minimum(u0 + 1, w - 1)
    v1 = np.minimum(v0 + 1, h - 1)
    fu = (u - u0)[:, None]
    fv = (v - v0)[:, None]
    return (rgb[v0, u0] * (1 - fv) * (1 - fu) + rgb[v0, u1] * (1 - fv) * fu
            + rgb[v1, u0] * fv * (1 - fu) + rgb[v1, u1] * fv * fu)


def sample_texture(surfaces, faces, camera, rgb, vis, bone_sym_pairs,
                   image_size) -> TexturedMesh:
    """Per-vertex colors for a list of posed part surfaces.

    Visible vertices sample the image bilinearly at their projection.
    Invisible ones copy their symmetric counterpart (same template index on
    the paired part) when that is visible, otherwise the nearest visible
    vertex in 3D.
    """
    if not any(v.any() for v in vis):
        raise ValueError("sample_texture: no visible vertices")
    sym = {a: b for a, b in bone_sym_pairs}
    sym.update({b: a for a, b in bone_sym_pairs})
    n_parts = len(surfaces)
    m = len(surfaces[0])
    colors = [None] * n_parts
    for i in range(n_parts):
        uv, _ = _project_np(camera, surfaces[i], image_size)
        colors[i] = _bilinear_rgb(rgb, uv)
    all_pts = np.concatenate(surfaces, axis=0)
    all_vis = np.concatenate(vis)
    vis_pts = all_pts[all_vis]
    vis_col = np.concatenate(colors, axis=0)[all_vis]
    out_colors = []
    for i in range(n_parts):
        col = colors[i].copy()
        hidden = ~vis[i]
        if hidden.any():
            partner = sym.get(i)
            if partner is not None:
                use = hidden & vis[partner]
                col[use] = colors[partner][use]
                hidden = hidden & ~use
        if hidden.any():
            idx = np.nonzero(hidden)[0]
            d = ((surfaces[i][idx][:, None, :] - vis_pts[None])
                 ** 2).sum(-1)
            col[idx] = vis_col[np.argmin(d, axis=1)]
        out_colors.append(col)
    verts = all_pts
    f_all = np.concatenate([np.asarray(faces) + i * m
                            for i in range(n_parts)], axis=0)
    part_ids = np.repeat(np.arange(n_parts), m)
    mesh = TexturedMesh(vertices=verts, faces=f_all,
                        colors=np.clip(np.concatenate(out_colors), 0, 1),
                        part_ids=part_ids)
    mesh.validate()
    return mesh


def transfer_keypoints(src_surfaces, dst_surfaces, src_camera, dst_camera,
                       keypoints, src_vis, image_size, rho=0.02):
    """Map normalized 2D keypoints from source to target view.

    Each keypoint snaps to the nearest visible surface sample (2D pixel
    distance under the source camera) within radius rho * max(h, w); the
    sample's template identity is reprojected under the target camera.
    Untransferable keypoints come back as None.
    """
    h, w = image_size
    radius = rho * max(h, w)
    src_uv = [(_project_np(src_camera, s, image_size)[0]) for s in
              src_surfaces]
    dst_uv = [(_project_np(dst_camera, s, image_size)[0]) for s in
              dst_surfaces]
    out = []
    for kp in np.asarray(keypoints, dtype=np.float64):
        px = np.array([kp[0] * w, kp[1] * h])
        best = None
        for i, uv in enumerate(src_uv):
            ok = src_vis[i]
            if not ok.any():
                continue
            d = np.linalg.norm(uv[ok] - px, axis=1)
            k = int(np.argmin(d))
            if best is None or d[k] < best[0]:
                best = (float(d[k]), i, np.nonzero(ok)[0][k])
        if best is None or best[0] > radius:
            out.append(None)
            continue
        _, part, idx = best
        uv2 = dst_uv[part][idx]
        out.append((float(uv2[0] / w), float(uv2[1] / h)))
    return out


def pck(transferred, truth, h, w, threshold=0.05):
    """Fraction of keypoints within threshold * max(h, w) pixels (strict <).

    Untransferable (None) predictions count as incorrect. Empty input
    returns None (metric absent).
    """
    truth = np.asarray(truth, dtype=np.float64)
    if len(truth) == 0:
        return None
    limit = threshold * max(h, w)
    hits = 0
    for pred, gt in zip(transferred, truth, strict=True):
        if pred is None:
            continue
        err = np.hypot((pred[0] - gt[0]) * w, (pred[1] - gt[1]) * h)
        if err < limit:
            hits += 1
    return hits / len(truth)


def iou(pred, gt):
    pred = np.asarray(pred).astype(bool)
    gt = np.asarray(gt).astype(bool)
    union = (pred | gt).sum()
    if union == 0:
        return 0.0
    return float((pred & gt).sum() / union)


def part_iou(pred_labels, gt_labels, mapping=None):
    """Per-part IOU under a greedy best-overlap label assignment.

    Returns (per-gt-part iou dict, mapping pred->gt). An explicit mapping
    skips the greedy step.
    """
    pred_labels = np.asarray(pred_labels)
    gt_labels = np.asarray(gt_labels)
    pids = [p for p in np.unique(pred_labels) if p != 0]
    gids = [g for g in np.unique(gt_labels) if g != 0]
    if mapping is None:
        overlaps = []
        for p in pids:
            for g in gids:
                ov = int(((pred_labels == p) & (gt_labels == g)).sum())
                overlaps.append((-ov, int(p), int(g)))
        overlaps.sort()
        mapping = {}
        taken = set()
        for negov, p, g in overlaps:
            if negov == 0 or p in mapping or g in taken:
                continue
            mapping[p] = g
            taken.add(g)
    scores = {}
    for p, g in mapping.items():
        scores[g] = iou(pred_labels == p, gt_labels == g)
    for g in gids:
        scores.setdefault(int(g), 0.0)
    return scores, mapping


def export_obj(mesh: TexturedMesh, path):
    """OBJ with per-vertex colors (``v x y z r g b``) plus a JSON sidecar of
    part ids. Byte-deterministic for a given mesh."""
    mesh.validate()
    lines = []
    for v, c in zip(mesh.vertices, mesh.colors):
        # %.17g keeps the float64 bit pattern through a parse round trip
        lines.append("v %.17g %.17g %.17g %.17g %.17g %.17g"
                     % (v[0], v[1], v[2], c[0], c[1], c[2]))
    for f in mesh.faces:
        lines.append("f %d %d %d" % (f[0] + 1, f[1] + 1, f[2] + 1))
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")
    with open(str(path) + ".json", "w") as fh:
        json.dump({"part_ids": mesh.part_ids.tolist()}, fh)


def import_obj(path) -> TexturedMesh:
    verts, colors, faces = [], [], []
    with open(path) as fh:
        for line in fh:
            tok = line.split()
            if not tok:
                continue
            if tok[0] == "v":
                vals = list(map(float, tok[1:7]))
                verts.append(vals[:3])
                colors.append(vals[3:6])
            elif tok[0] == "f":
                faces.append([int(t) - 1 for t in tok[1:4]])
    with open(str(path) + ".json") as fh:
        part_ids = np.asarray(json.load(fh)["part_ids"], dtype=np.int64)
    return TexturedMesh(vertices=np.asarray(verts),
                        faces=np.asarray(faces, dtype=np.int64),
                        colors=np.asarray(colors), part_ids=part_ids)
