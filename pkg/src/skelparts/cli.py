"""Command-line pipeline: discover -> optimize -> eval.

Exit codes: 0 success, 2 validation error, 3 divergence, 4 I/O error.
Verbosity comes from the HILASSIE_LOG environment variable (logging levels).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import optimizer as opt
from .export_metrics import iou, pck, sample_texture, transfer_keypoints
from .ingest import EnsembleConfig, IngestError, load_ensemble, \
    select_reference
from .partmodel import load_checkpoint, save_checkpoint
from .render import visibility
from .skeleton2d import extract_skeleton
from .skeleton3d import Skeleton3D, build_skeleton3d

__all__ = ["main", "cmd_discover", "cmd_optimize", "cmd_eval"]

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_DIVERGENCE = 3
EXIT_IO = 4

log = logging.getLogger("skelparts")


def _setup_logging():
    level = os.environ.get("HILASSIE_LOG", "INFO").upper()
    logging.basicConfig(level=getattr(logging, level, logging.INFO),
                        format="%(levelname)s %(name)s: %(message)s")


def _load_config(args):
    path = args.config or (Path(args.ensemble) / "config.json")
    cfg = EnsembleConfig.from_json(path)
    if args.seed is not None:
        cfg.seed = args.seed
    if getattr(args, "reference_index", None) is not None:
        cfg.reference_index = args.reference_index
    return cfg


def _write_manifest(out_dir, config, seed, timings, outputs):
    payload = {
        "config": json.loads(json.dumps(config.__dict__, default=list)),
        "seed": seed,
        "stage_timings": timings,
        "outputs": sorted(outputs),
    }
    blob = json.dumps(payload, sort_keys=True, indent=2)
    payload["version_hash"] = hashlib.sha256(blob.encode()).hexdigest()
    tmp = Path(out_dir) / "manifest.json.tmp"
    with open(tmp, "w") as fh:
        json.dump(payload, fh, sort_keys=True, indent=2)
    os.replace(tmp, Path(out_dir) / "manifest.json")


def cmd_discover(args):
    cfg = _load_config(args)
    records = load_ensemble(args.ensemble, cfg)
    ref = select_reference(records, cfg)
    log.info("reference instance: %d", ref)
    rec = records[ref]
    tree, dfield, skel_px = extract_skeleton(rec.pseudo_mask)
    skeleton = build_skeleton3d(tree, rec.feature_map,
                                rec.pseudo_mask.shape,
                                lam=cfg.sym_lambda, tau=cfg.sym_tau)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    skeleton.to_json(out / "skeleton3d.json")
    overlay = np.where(skel_px, 255,
                       np.where(rec.pseudo_mask, 128, 0)).astype(np.uint8)
    from PIL import Image
    Image.fromarray(overlay).save(out / "skeleton_overlay.png")
    log.info("skeleton: %d joints, %d parts, %d symmetric pairs",
             len(skeleton.joints), skeleton.n_parts, len(skeleton.sym_pairs))
    _write_manifest(out, cfg, cfg.seed, {},
                    ["skeleton3d.json", "skeleton_overlay.png"])
    return EXIT_OK


def cmd_optimize(args):
    cfg = _load_config(args)
    records = load_ensemble(args.ensemble, cfg)
    skeleton = Skeleton3D.from_json(args.skeleton)
    feat_dim = records[0].feature_map.shape[-1]
    rng = np.random.default_rng(cfg.seed)
    model = opt.init_model(skeleton, cfg, feat_dim, rng=rng)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stages = args.stages.split(",") if args.stages else None
    timings = {}
    outputs = []
    with open(out / "loss_log.jsonl", "w") as log_fh:
        plan = opt.stage_plan(cfg, only=stages)
        run_rng = np.random.default_rng(cfg.seed)
        if any(s.name == "camera" for s in plan):
            t0 = time.time()
            opt.run_camera_search(model, records, run_rng)
            timings["camera_search"] = time.time() - t0
        for stage in plan:
            t0 = time.time()
            opt.run_stage(model, records, stage, rng=run_rng, log_fh=log_fh)
            timings[stage.name] = time.time() - t0
    save_checkpoint(out / "checkpoint.bin", model.params)
    outputs += ["checkpoint.bin", "loss_log.jsonl"]
    outputs += _export_meshes(model, records, cfg, out)
    _write_manifest(out, cfg, cfg.seed, timings, outputs)
    return EXIT_OK


def _final_buffers(model, records):
    """Final-sigma render of every instance (buffers, surfaces, vis)."""
    cfg = model.config
    tp = opt._tensorize(model.params, set())
    size = (cfg.render_size, cfg.render_size)
    out = []
    for j in range(model.n_instances):
        buf, canon, _, _ = opt.forward_instance(
            model, tp, j, sigma=cfg.render_sigma * 0.25)
        surfaces = []
        transforms, _, _ = opt.pose_parts(model, tp, j)
        for i in range(model.n_parts):
            svec, rot, t = transforms[i]
            world = (canon[i].value * svec.value) @ rot.value.T + t.value
            surfaces.append(world)
        vis = visibility(buf, size)
        out.append((buf, surfaces, vis))
    return out


def _export_meshes(model, records, cfg, out_dir):
    from .export_metrics import export_obj
    from .render import CameraPose
    names = []
    for j, (buf, surfaces, vis) in enumerate(_final_buffers(model, records)):
        cam = CameraPose(rvec=model.params[f"cam{j}.rvec"],
                         tvec=model.params[f"cam{j}.tvec"], focal=cfg.focal)
        rgb = records[j].rgb
        if rgb.shape[:2] != (cfg.render_size, cfg.render_size):
            rgb = np.stack([opt._resize_mask(rgb[..., c],
                                             (cfg.render_size,) * 2)
                            for c in range(3)], axis=-1)
        try:
            mesh = sample_texture(surfaces, model.template.faces, cam, rgb,
                                  vis, model.skeleton.bone_sym_pairs(),
                                  (cfg.render_size, cfg.render_size))
        except ValueError:
            log.warning("instance %d: no visible vertices, skipping export",
                        j)
            continue
        name = f"instance{j}.obj"
        export_obj(mesh, Path(out_dir) / name)
        names += [name, name + ".json"]
    return names


def cmd_eval(args):
    cfg = _load_config(args)
    records = load_ensemble(args.ensemble, cfg)
    run = Path(args.run)
    skeleton = Skeleton3D.from_json(run / "skeleton3d.json"
                                    if (run / "skeleton3d.json").exists()
                                    else args.skeleton)
    feat_dim = records[0].feature_map.shape[-1]
    model = opt.init_model(skeleton, cfg, feat_dim,
                           rng=np.random.default_rng(cfg.seed))
    model.params.update(load_checkpoint(run / "checkpoint.bin"))
    buffers = _final_buffers(model, records)
    size = (cfg.render_size, cfg.render_size)
    metrics = {"iou": {}}
    for j, (buf, _, _) in enumerate(buffers):
        tgt = opt._resize_mask(records[j].pseudo_mask, size)
        metrics["iou"][str(j)] = iou(buf.silhouette.value > 0.5, tgt > 0.5)
    if args.keypoints:
        with open(args.keypoints) as fh:
            kp_data = json.load(fh)
        from .render import CameraPose
        cams = [CameraPose(rvec=model.params[f"cam{j}.rvec"],
                           tvec=model.params[f"cam{j}.tvec"],
                           focal=cfg.focal)
                for j in range(model.n_instances)]
        pairs = {}
        for a in range(model.n_instances):
            kps_a = kp_data.get(str(a))
            if not kps_a:
                continue
            names = sorted(kps_a)
            src_pts = [kps_a[n] for n in names]
            for b in range(model.n_instances):
                kps_b = kp_data.get(str(b))
                if a == b or not kps_b:
                    continue
                moved = transfer_keypoints(
                    buffers[a][1], buffers[b][1], cams[a], cams[b],
                    src_pts, buffers[a][2], size)
                truth = [kps_b.get(n) for n in names]
                keep = [(m, t) for m, t in zip(moved, truth)
                        if t is not None]
                if keep:
                    score = pck([m for m, _ in keep],
                                [t for _, t in keep], *size)
                    pairs[f"{a}->{b}"] = score
        if pairs:
            metrics["pck"] = pairs
            metrics["mean_pck"] = float(np.mean(list(pairs.values())))
    with open(run / "metrics.json", "w") as fh:
        json.dump(metrics, fh, indent=2, sort_keys=True)
    return EXIT_OK


def build_parser():
    ap = argparse.ArgumentParser(prog="skelparts",
                                 description="Articulated part discovery "
                                 "and optimization from silhouettes")
    ap.add_argument("--config", default=None)
    ap.add_argument("--seed", type=int, default=None)
    ap.add_argument("--threads", type=int, default=None,
                    help="worker cap (renders are single-threaded numpy)")
    sub = ap.add_subparsers(dest="command", required=True)

    d = sub.add_parser("discover", help="2D/3D skeleton discovery")
    d.add_argument("ensemble")
    d.add_argument("--out", required=True)
    d.add_argument("--reference-index", type=int, default=None)

    o = sub.add_parser("optimize", help="multi-stage shape optimization")
    o.add_argument("ensemble")
    o.add_argument("--skeleton", required=True)
    o.add_argument("--out", required=True)
    o.add_argument("--stages", default=None,
                   help="comma list: camera,shared,instance")

    e = sub.add_parser("eval", help="metrics over an optimized run")
    e.add_argument("ensemble")
    e.add_argument("--run", required=True)
    e.add_argument("--skeleton", default=None)
    e.add_argument("--keypoints", default=None)
    return ap


def main(argv=None):
    _setup_logging()
    ap = build_parser()
    args = ap.parse_args(argv)
    handlers = {"discover": cmd_discover, "optimize": cmd_optimize,
                "eval": cmd_eval}
    try:
        return handlers[args.command](args)
    except opt.DivergenceError as exc:
        log.error("divergence: %s", exc)
        return EXIT_DIVERGENCE
    except (IngestError, ValueError) as exc:
        log.error("validation: %s", exc)
        return EXIT_VALIDATION
    except OSError as exc:
        log.error("i/o: %s", exc)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
