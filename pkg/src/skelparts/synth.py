"""Procedural synthetic fixtures.

A side-view quadruped silhouette built from capsule strokes (torso, two leg
pairs forking from the shoulder and hip, neck/head, tail), with constant
per-stroke features so that left/right legs of a pair are feature-identical.
Also a small 3-instance ensemble whose masks are rendered from the model
itself at known cameras, used for end-to-end optimization tests.
"""

from __future__ import annotations

import numpy as np

from .autodiff import Tensor
from .ingest import EnsembleConfig, InstanceRecord
from .render import camera_from_angles
from .skeleton2d import extract_skeleton
from .skeleton3d import build_skeleton3d

__all__ = [
    "draw_capsule", "quadruped_scene", "make_quadruped_record",
    "make_e2e_ensemble",
]


def draw_capsule(mask, p0, p1, r):
    """Set mask pixels within distance r of segment p0-p1 ((x, y) coords)."""
    h, w = mask.shape
    ys, xs = np.mgrid[0:h, 0:w]
    p0 = np.asarray(p0, dtype=np.float64)
    p1 = np.asarray(p1, dtype=np.float64)
    d = p1 - p0
    denom = max(float(d @ d), 1e-12)
    t = np.clip(((xs - p0[0]) * d[0] + (ys - p0[1]) * d[1]) / denom, 0, 1)
    px = p0[0] + t * d[0]
    py = p0[1] + t * d[1]
    hit = (xs - px) ** 2 + (ys - py) ** 2 <= r * r
    mask |= hit
    return hit


# stroke list: (name, p0 (x, y), p1, radius, cluster label)
def _strokes(s):
    """Quadruped strokes for an s x s canvas (side view, +y down)."""
    u = s / 128.0
    return [
        ("torso", (40 * u, 62 * u), (88 * u, 62 * u), 11 * u, 1),
        ("leg_fl", (84 * u, 68 * u), (76 * u, 108 * u), 4.5 * u, 2),
        ("leg_fr", (84 * u, 68 * u), (94 * u, 108 * u), 4.5 * u, 2),
        ("leg_rl", (46 * u, 68 * u), (36 * u, 108 * u), 4.5 * u, 3),
        ("leg_rr", (46 * u, 68 * u), (56 * u, 108 * u), 4.5 * u, 3),
        ("neck", (88 * u, 58 * u), (104 * u, 38 * u), 5.5 * u, 4),
        ("head", (104 * u, 38 * u), (112 * u, 34 * u), 7 * u, 4),
        ("tail", (40 * u, 58 * u), (26 * u, 42 * u), 3 * u, 5),
    ]


def quadruped_scene(size=128, feat_dim=8, seed=11):
    """Mask, cluster labels, and unit feature map for the fixture animal."""
    rng = np.random.default_rng(seed)
    mask = np.zeros((size, size), dtype=bool)
    clusters = np.zeros((size, size), dtype=np.int64)
    n_labels = max(lbl for *_, lbl in _strokes(size))
    feats = rng.normal(size=(n_labels + 1, feat_dim))
    feats /= np.linalg.norm(feats, axis=1, keepdims=True)
    fmap = np.zeros((size, size, feat_dim))
    for name, p0, p1, r, lbl in _strokes(size):
        hit = draw_capsule(mask, p0, p1, r)
        paint = hit & (clusters == 0)
        clusters[paint] = lbl
        fmap[paint] = feats[lbl]
    return {"mask": mask, "clusters": clusters, "features": fmap,
            "label_features": feats}


def make_quadruped_record(index=0, size=128, feat_dim=8, seed=11):
    scene = quadruped_scene(size=size, feat_dim=feat_dim, seed=seed)
    rgb = np.zeros((size, size, 3))
    rgb[scene["mask"]] = [0.6, 0.45, 0.3]
    rec = InstanceRecord(index=index, rgb=rgb, pseudo_mask=scene["mask"],
                         feature_map=scene["features"],
                         part_clusters=scene["clusters"])
    rec.validate()
    return rec


def _e2e_config(size, n_instances, seed):
    return EnsembleConfig(
        n_instances=n_instances,
        image_size=(size, size),
        render_size=size,
        icosphere_level=2,
        pe_frequencies=[1.0, 2.0, 4.0],
        shared_depth=1,
        sem_pixels=128,
        sem_points=32,
        em_period=0,
        loss_weights={"sil": 1.0, "part": 0.0, "sem": 0.0, "rot": 0.1,
                      "sym": 0.1, "lap": 0.05, "norm": 0.05},
        stage_schedule=[["camera", 40, 2e-2], ["shared", 30, 5e-3],
                        ["instance", 10, 2e-3]],
        seed=seed,
    )


def make_e2e_ensemble(size=64, n_instances=3, seed=0,
                      azimuths=(0.2, 0.9, 5.4), elevation=0.0):
    """3-instance ensemble rendered from the fixture model itself.

    Discovery runs on the synthetic silhouette, the resulting skeleton is
    rendered (undeformed) at known cameras, and the thresholded silhouettes
    become pseudo masks. Features are constant per part. Returns
    (records, config, skeleton, gt_cameras).
    """
    from . import optimizer as opt  # deferred: optimizer imports nothing here

    scene = quadruped_scene(size=128)
    tree, _, _ = extract_skeleton(scene["mask"])
    skeleton = build_skeleton3d(tree, scene["features"], scene["mask"].shape)
    config = _e2e_config(size, n_instances, seed)
    model = opt.init_model(skeleton, config, feat_dim=8, rng=np.random.
                           default_rng(seed))
    rng = np.random.default_rng(seed + 1)
    part_feats = rng.normal(size=(skeleton.n_parts, 8))
    part_feats /= np.linalg.norm(part_feats, axis=1, keepdims=True)
    records, cameras = [], []
    for j in range(n_instances):
        cam = camera_from_angles(float(azimuths[j]), float(elevation),
                                 focal=config.focal)
        model.params[f"cam{j}.rvec"] = cam.rvec.copy()
        model.params[f"cam{j}.tvec"] = cam.tvec.copy()
        tp = opt._tensorize(model.params, set())
        # render targets at the final-stage (annealed) sigma so the sharp
        # level set the optimizer ends on matches the target masks
        buf, _, _, _ = opt.forward_instance(model, tp, j,
                                            depth=model.mlp.shared_depth,
                                            sigma=config.render_sigma * 0.25)
        mask = buf.silhouette.value > 0.5
        labels = np.zeros((size, size), dtype=np.int64)
        fmap = np.zeros((size, size, 8))
        stack = np.stack([m.value for m in buf.part_masks])
        best = np.argmax(stack, axis=0)
        labels[mask] = best[mask] + 1
        fmap[mask] = part_feats[best[mask]]
        rgb = np.zeros((size, size, 3))
        rgb[mask] = [0.5, 0.5, 0.5]
        rec = InstanceRecord(index=j, rgb=rgb, pseudo_mask=mask,
                             feature_map=fmap, part_clusters=labels)
        rec.validate()
        records.append(rec)
        cameras.append(cam)
    # reset cameras to the neutral start before handing the model back
    base = camera_from_angles(0.0, 0.0, focal=config.focal)
    for j in range(n_instances):
        model.params[f"cam{j}.rvec"] = base.rvec.copy()
        model.params[f"cam{j}.tvec"] = base.tvec.copy()
    return records, config, skeleton, cameras
