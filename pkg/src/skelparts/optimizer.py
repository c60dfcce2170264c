"""Multi-stage ensemble optimization.

Stages follow the coarse-to-fine schedule: camera viewpoints first, then part
transformations and the shared (shallow) deformation layers, finally the
instance-specific deep layers with the shared layers frozen. Feature MLPs are
refreshed by an EM loop that regresses them onto image features gathered at
the projections of visible surface points.
"""

from __future__ import annotations

import hashlib
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from . import autodiff as ad
from . import losses as lo
from .autodiff import Tensor
from .ingest import EnsembleConfig
from .partmodel import FeatureMLP, PartDeformMLP, PartTemplate
from .render import camera_from_angles, part_box, rasterize_soft, rodrigues, \
    visibility
from .skeleton3d import Skeleton3D

__all__ = [
    "AdamState", "adam_step", "Stage", "stage_plan", "Model", "init_model",
    "trainable_names", "pose_parts", "forward_instance", "compute_losses",
    "run_stage", "run_camera_search", "em_update_features",
    "optimize_ensemble", "hash_params", "DivergenceError",
]


class DivergenceError(RuntimeError):
    """Stage loss exceeded 10x its initial value."""


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    t: int = 0
    skipped: int = 0


def adam_step(state: AdamState, params, grads):
    """Standard bias-corrected Adam update of ``params`` in place.

    Parameters with non-finite gradients are left untouched (counted in
    ``state.skipped``); zero-gradient parameters do not move on step one.
    """
    state.t += 1
    t = state.t
    for name in sorted(grads):
        g = grads[name]
        if g is None:
            continue
        g = np.asarray(g, dtype=np.float64)
        if not np.isfinite(g).all():
            state.skipped += 1
            continue
        m = state.m.get(name, 0.0) * state.beta1 + (1 - state.beta1) * g
        v = state.v.get(name, 0.0) * state.beta2 + (1 - state.beta2) * g * g
        state.m[name] = m
        state.v[name] = v
        mhat = m / (1 - state.beta1 ** t)
        vhat = v / (1 - state.beta2 ** t)
        params[name] = params[name] - state.lr * mhat / (np.sqrt(vhat)
                                                         + state.eps)
    return params


@dataclass
class Stage:
    name: str      # "camera" | "shared" | "instance"
    steps: int
    lr: float


def stage_plan(config: EnsembleConfig, only=None):
    stages = [Stage(str(n), int(s), float(lr))
              for n, s, lr in config.stage_schedule]
    names = {s.name for s in stages}
    if names - {"camera", "shared", "instance"}:
        raise ValueError(f"unknown stage names in schedule: {sorted(names)}")
    if only is not None:
        stages = [s for s in stages if s.name in only]
    return stages


@dataclass
class Model:
    """Everything the optimizer owns: structure + the flat parameter dict."""
    config: EnsembleConfig
    skeleton: Skeleton3D
    template: PartTemplate
    mlp: PartDeformMLP
    fmlp: FeatureMLP
    params: dict
    n_instances: int

    @property
    def n_parts(self):
        return self.skeleton.n_parts


def init_model(skeleton: Skeleton3D, config: EnsembleConfig, feat_dim,
               rng=None) -> Model:
    rng = rng or np.random.default_rng(config.seed)
    template = PartTemplate.make(config.icosphere_level)
    omegas = np.asarray(config.pe_frequencies, dtype=np.float64)
    mlp = PartDeformMLP.create(omegas, width=config.mlp_width,
                               shared_depth=min(config.shared_depth,
                                                len(omegas) - 1), rng=rng)
    fmlp = FeatureMLP.create(feat_dim, width=config.feat_mlp_width, rng=rng)
    params = {"joints": skeleton.joints.copy()}
    for i in range(skeleton.n_parts):
        full = mlp.init_params(rng, prefix=f"part{i}/")
        for name, arr in full.items():
            layer = int(name.split("/l")[1].split(".")[0])
            if layer <= mlp.shared_depth:
                params[name] = arr
            else:
                # deep layers start identical across instances
                for j in range(config.n_instances):
                    params[f"inst{j}/{name}"] = arr.copy()
        params.update(fmlp.init_params(rng, prefix=f"part{i}/"))
    base_cam = camera_from_angles(0.0, 0.0, focal=config.focal)
    for j in range(config.n_instances):
        params[f"cam{j}.rvec"] = base_cam.rvec.copy()
        params[f"cam{j}.tvec"] = base_cam.tvec.copy()
        for bi in range(skeleton.n_parts):
            params[f"inst{j}/bone{bi}.rvec"] = np.zeros(3)
    return Model(config=config, skeleton=skeleton, template=template,
                 mlp=mlp, fmlp=fmlp, params=params,
                 n_instances=config.n_instances)


def _part_view(tp, inst, part, mlp):
    """Merged shared/instance weight view for one part's deform MLP."""
    view = {}
    for k in range(1, mlp.n_layers + 1):
        src = f"part{part}/l{k}." if k <= mlp.shared_depth \
            else f"inst{inst}/part{part}/l{k}."
        for suf in ("Wh", "bh", "Wo", "bo"):
            view[f"l{k}.{suf}"] = tp[src + suf]
    return view


def trainable_names(model: Model, stage_name):
    """Parameter names updated during a stage; everything else is frozen."""
    names = set()
    cams = {f"cam{j}.{f}" for j in range(model.n_instances)
            for f in ("rvec", "tvec")}
    if stage_name == "camera":
        return cams
    if stage_name == "shared":
        names |= cams | {"joints"}
        for j in range(model.n_instances):
            for bi in range(model.n_parts):
                names.add(f"inst{j}/bone{bi}.rvec")
        for i in range(model.n_parts):
            for k in range(1, model.mlp.shared_depth + 1):
                for suf in ("Wh", "bh", "Wo", "bo"):
                    names.add(f"part{i}/l{k}.{suf}")
        return names
    if stage_name == "instance":
        names |= cams
        for j in range(model.n_instances):
            for bi in range(model.n_parts):
                names.add(f"inst{j}/bone{bi}.rvec")
            for i in range(model.n_parts):
                for k in range(model.mlp.shared_depth + 1,
                               model.mlp.n_layers + 1):
                    for suf in ("Wh", "bh", "Wo", "bo"):
                        names.add(f"inst{j}/part{i}/l{k}.{suf}")
        return names
    raise ValueError(f"unknown stage {stage_name!r}")


def _tensorize(params, trainable):
    return {k: Tensor(v, requires_grad=k in trainable)
            for k, v in params.items()}


def pose_parts(model: Model, tp, inst, posed=True):
    """Forward kinematics: per-bone (scale vec, rotation, translation) on the
    tape, plus posed joint positions.

    Per-bone rotations accumulate root-down; a part's frame is its rest
    orientation composed with the accumulated articulation, scaled to half
    the current bone length along the bone axis and to the joint radius
    across it.
    """
    sk = model.skeleton
    joints = tp["joints"]
    radii = sk.joint_radii if sk.joint_radii is not None \
        else np.full(len(sk.joints), 0.1)
    children = defaultdict(list)
    for bi, (pa, ch) in enumerate(sk.bones):
        children[pa].append((ch, bi))
    r_acc = {sk.root: Tensor(np.eye(3))}
    pos = {sk.root: joints[sk.root]}
    transforms = [None] * len(sk.bones)
    rots = [None] * len(sk.bones)
    stack = [sk.root]
    while stack:
        j = stack.pop()
        for ch, bi in sorted(children[j]):
            if posed:
                rb = rodrigues(tp[f"inst{inst}/bone{bi}.rvec"])
                r = r_acc[j] @ rb
            else:
                r = r_acc[j]
            dvec = joints[ch] - joints[j]
            length = dvec.norm()
            pos[ch] = pos[j] + dvec @ r.T
            r_acc[ch] = r
            rrest = Tensor(model.skeleton.rest_transforms[bi][1])
            rot = r @ rrest
            width = 0.5 * float(radii[sk.bones[bi][0]] + radii[sk.bones[bi][1]])
            svec = ad.stack([Tensor(width) + 0.0 * length,
                             Tensor(width) + 0.0 * length,
                             0.5 * length])
            t = 0.5 * (pos[j] + pos[ch])
            transforms[bi] = (svec, rot, t)
            rots[bi] = rot
            stack.append(ch)
    posed_joints = ad.stack([pos[i] for i in range(len(sk.joints))], axis=0)
    return transforms, rots, posed_joints


def forward_instance(model: Model, tp, inst, depth=None, sigma=None,
                     posed=True):
    """Render one instance; returns (RenderBuffer, canonical part surfaces,
    part rotations, posed joints)."""
    cfg = model.config
    sigma = cfg.render_sigma if sigma is None else sigma
    transforms, rots, posed_joints = pose_parts(model, tp, inst, posed=posed)
    parts, canon = [], []
    x = Tensor(model.template.samples)
    for i in range(model.n_parts):
        view = _part_view(tp, inst, i, model.mlp)
        offset = model.mlp.deform(view, x, depth=depth)
        deformed = x + offset
        svec, rot, t = transforms[i]
        world = (deformed * svec) @ rot.T + t
        parts.append((world, model.template.faces))
        canon.append(deformed)
    size = (cfg.render_size, cfg.render_size)
    buf = rasterize_soft(parts, tp[f"cam{inst}.rvec"], tp[f"cam{inst}.tvec"],
                         cfg.focal, size, sigma,
                         weak_perspective=cfg.weak_perspective)
    return buf, canon, rots, posed_joints


def _resize_mask(mask, size):
    """Nearest-neighbor resize of a target mask to the render resolution."""
    h, w = mask.shape
    if (h, w) == size:
        return mask.astype(np.float64)
    rows = np.minimum((np.arange(size[0]) * h) // size[0], h - 1)
    cols = np.minimum((np.arange(size[1]) * w) // size[1], w - 1)
    return mask[rows][:, cols].astype(np.float64)


def compute_losses(model: Model, tp, records, rng, depth=None, sigma=None,
                   insts=None, terms_on=None):
    """Total weighted loss over the requested instances."""
    cfg = model.config
    weights = cfg.loss_weights
    on = terms_on or {k for k, wgt in weights.items() if wgt > 0}
    insts = range(model.n_instances) if insts is None else insts
    size = (cfg.render_size, cfg.render_size)
    scale = float(max(size))
    sils, tgts = [], []
    parts_terms, parts_count = None, 0
    sem_terms = None
    rot_terms = []
    lap_terms, norm_terms = [], []
    for j in insts:
        rec = records[j]
        buf, canon, rots, posed_joints = forward_instance(
            model, tp, j, depth=depth, sigma=sigma)
        tgt = _resize_mask(rec.pseudo_mask, size)
        sils.append(buf.silhouette)
        tgts.append(tgt)
        if "part" in on:
            boxes = [part_box(m.value) for m in buf.part_masks]
            t, c = lo._part_terms(buf.part_masks, Tensor(tgt), boxes,
                                  cfg.zoom_factor)
            if c:
                parts_terms = t if parts_terms is None else parts_terms + t
                parts_count += c
        if "sem" in on:
            fm = rec.feature_map
            sh, sw = rec.pseudo_mask.shape
            pix = lo.stratified_pixels(rec.pseudo_mask, cfg.sem_pixels, rng)
            if len(pix):
                pnorm = np.stack([(pix[:, 1] + 0.5) / sw,
                                  (pix[:, 0] + 0.5) / sh], axis=1)
                pfeat = fm[pix[:, 0], pix[:, 1]]
                projs, qfeats = [], []
                for i in range(model.n_parts):
                    idx = lo.subsample_rows(len(model.template.samples),
                                            cfg.sem_points, rng)
                    v2 = buf.verts2d[i][idx]
                    projs.append(v2 / Tensor(np.array([float(size[1]),
                                                       float(size[0])])))
                    q = model.fmlp.query(tp, model.template.samples[idx],
                                         prefix=f"part{i}/")
                    qfeats.append(q)
                term = lo._chamfer_instance(pnorm, pfeat,
                                            ad.concat(projs, axis=0),
                                            ad.concat(qfeats, axis=0),
                                            cfg.alpha_sem)
                sem_terms = term if sem_terms is None else sem_terms + term
        if "rot" in on:
            rest = np.stack([r for _, r, _ in model.skeleton.rest_transforms])
            rot_terms.append(lo.loss_rot(ad.stack(rots, axis=0), rest))
        if "lap" in on or "norm" in on:
            for surface in canon:
                if "lap" in on:
                    lap_terms.append(lo.loss_lap(surface,
                                                 model.template.faces))
                if "norm" in on:
                    norm_terms.append(lo.loss_norm(surface,
                                                   model.template.faces))
    terms = {"sil": lo.loss_sil(sils, tgts)}
    if "part" in on:
        terms["part"] = parts_terms * (1.0 / parts_count) if parts_count \
            else Tensor(0.0)
    if "sem" in on and sem_terms is not None:
        terms["sem"] = sem_terms
    if "rot" in on and rot_terms:
        total_rot = rot_terms[0]
        for t in rot_terms[1:]:
            total_rot = total_rot + t
        terms["rot"] = total_rot
    if "sym" in on:
        if cfg.sym_rest_joints:
            terms["sym"] = lo.loss_sym(tp["joints"],
                                       model.skeleton.sym_pairs)
        else:
            terms["sym"] = lo.loss_sym(posed_joints,
                                       model.skeleton.sym_pairs)
    n_surf = max(len(lap_terms), 1)
    if "lap" in on and lap_terms:
        s = lap_terms[0]
        for t in lap_terms[1:]:
            s = s + t
        terms["lap"] = s * (1.0 / n_surf)
    if "norm" in on and norm_terms:
        s = norm_terms[0]
        for t in norm_terms[1:]:
            s = s + t
        terms["norm"] = s * (1.0 / len(norm_terms))
    return lo.combine(terms, weights)


_SIGMA_ANNEAL = {"camera": 1.0, "shared": 0.5, "instance": 0.25}


def run_stage(model: Model, records, stage: Stage, rng=None, log_fh=None,
              window=50, em=True):
    """Optimize one stage to its step budget or trailing-window convergence.

    Raises DivergenceError when the total exceeds 10x its initial value.
    Returns the per-step total-loss history.
    """
    cfg = model.config
    rng = rng or np.random.default_rng(cfg.seed)
    trainable = trainable_names(model, stage.name)
    adam = AdamState(lr=stage.lr)
    depth = None if stage.name == "instance" else model.mlp.shared_depth
    sigma = cfg.render_sigma * _SIGMA_ANNEAL[stage.name]
    history = []
    for step in range(stage.steps):
        tp = _tensorize(model.params, trainable)
        total, bd = compute_losses(model, tp, records, rng, depth=depth,
                                   sigma=sigma)
        history.append(bd.total)
        if log_fh is not None:
            lo.log_breakdown(log_fh, step, bd, stage=stage.name)
        if step > 0 and bd.total > 10.0 * history[0]:
            raise DivergenceError(
                f"stage {stage.name}: loss {bd.total:.4g} exceeds 10x "
                f"initial {history[0]:.4g} at step {step}")
        ad.backward(total)
        grads = {k: tp[k].grad for k in trainable}
        adam_step(adam, model.params, grads)
        if em and stage.name != "camera" and cfg.em_period > 0 \
                and (step + 1) % cfg.em_period == 0:
            em_update_features(model, records, rng, depth=depth)
        if len(history) > window and \
                history[-window - 1] <= min(history[-window:]):
            break
    return history


def run_camera_search(model: Model, records, rng=None, insts=None):
    """Seeded azimuth/elevation grid search per instance; the best grid cell
    (ties to the lowest index) initializes that instance's camera."""
    cfg = model.config
    rng = rng or np.random.default_rng(cfg.seed)
    azimuths = np.linspace(0.0, 2 * np.pi, cfg.camera_azimuths,
                           endpoint=False)
    elevations = np.linspace(-np.pi / 6, np.pi / 6, cfg.camera_elevations)
    size = (cfg.render_size, cfg.render_size)
    insts = range(model.n_instances) if insts is None else insts
    chosen = {}
    for j in insts:
        tgt = _resize_mask(records[j].pseudo_mask, size)
        best = None
        for gi, (az, el) in enumerate((a, e) for a in azimuths
                                      for e in elevations):
            cam = camera_from_angles(float(az), float(el), focal=cfg.focal)
            model.params[f"cam{j}.rvec"] = cam.rvec
            model.params[f"cam{j}.tvec"] = cam.tvec
            tp = _tensorize(model.params, set())
            buf, _, _, _ = forward_instance(model, tp, j,
                                            depth=model.mlp.shared_depth)
            score = float(lo.loss_sil(buf.silhouette, tgt).value)
            if best is None or score < best[0]:
                best = (score, gi, cam)
        chosen[j] = best
        model.params[f"cam{j}.rvec"] = best[2].rvec.copy()
        model.params[f"cam{j}.tvec"] = best[2].tvec.copy()
    return chosen


def em_update_features(model: Model, records, rng, depth=None):
    """EM refresh of the per-part feature MLPs.

    E-step: project sampled surface points into every instance, gather the
    image feature under each visible projection, and average (visibility
    weighted, unit normalized). M-step: regress each part's FeatureMLP onto
    the targets for a fixed number of Adam steps.
    """
    cfg = model.config
    size = (cfg.render_size, cfg.render_size)
    tp = _tensorize(model.params, set())
    sums = [None] * model.n_parts
    counts = [None] * model.n_parts
    samples = []
    for i in range(model.n_parts):
        idx = lo.subsample_rows(len(model.template.samples), cfg.sem_points,
                                rng)
        samples.append(idx)
        d = records[0].feature_map.shape[-1]
        sums[i] = np.zeros((len(idx), d))
        counts[i] = np.zeros(len(idx))
    for j in range(model.n_instances):
        rec = records[j]
        buf, _, _, _ = forward_instance(model, tp, j, depth=depth)
        vis = visibility(buf, size)
        fh, fw = rec.feature_map.shape[:2]
        for i in range(model.n_parts):
            idx = samples[i]
            v2 = buf.verts2d[i].value[idx]
            ok = vis[i][idx]
            # map render pixels to feature-map pixels
            u = np.clip((v2[:, 0] * fw / size[1]).astype(int), 0, fw - 1)
            v = np.clip((v2[:, 1] * fh / size[0]).astype(int), 0, fh - 1)
            feats = rec.feature_map[v, u]
            sums[i][ok] += feats[ok]
            counts[i][ok] += 1.0
    for i in range(model.n_parts):
        idx = samples[i]
        have = counts[i] > 0
        if not have.any():
            continue
        target = sums[i][have] / counts[i][have, None]
        nrm = np.linalg.norm(target, axis=1, keepdims=True)
        target /= np.where(nrm > 1e-12, nrm, 1.0)
        xs = model.template.samples[idx][have]
        names = [f"part{i}/f{k}.{f}" for k in (1, 2) for f in ("W", "b")]
        adam = AdamState(lr=1e-2)
        for _ in range(cfg.em_inner_steps):
            tpf = {n: Tensor(model.params[n], requires_grad=True)
                   for n in names}
            q = model.fmlp.query(tpf, xs, prefix=f"part{i}/")
            d = q - Tensor(target)
            loss = (d * d).mean()
            ad.backward(loss)
            adam_step(adam, model.params, {n: tpf[n].grad for n in names})


def hash_params(params, names):
    """Deterministic digest of a named parameter subset (freeze checks)."""
    h = hashlib.sha256()
    for name in sorted(names):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


def optimize_ensemble(model: Model, records, stages=None, rng=None,
                      log_fh=None):
    """Camera search followed by the configured stage schedule."""
    cfg = model.config
    rng = rng or np.random.default_rng(cfg.seed)
    plan = stage_plan(cfg, only=stages)
    if any(s.name == "camera" for s in plan):
        run_camera_search(model, records, rng)
    histories = {}
    for stage in plan:
        histories[stage.name] = run_stage(model, records, stage, rng=rng,
                                          log_fh=log_fh)
    return histories
