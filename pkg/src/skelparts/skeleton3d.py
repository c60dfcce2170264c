"""Uplift of the 2D skeleton tree to an initial 3D skeleton.

Sibling joints with similar branch descriptors (length, radius, mean image
feature along the branch) are paired as left/right symmetric parts, shared
parents of exactly one pair are split in two, and paired joints are pushed to
opposite sides of the z = 0 symmetry plane by their average radius.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np

from .skeleton2d import Bone, Joint, SkeletonTree

__all__ = [
    "BoneDescriptor", "Skeleton3D", "describe_branches", "match_symmetric",
    "split_shared_parents", "uplift", "rotation_to_direction",
    "build_skeleton3d",
]


@dataclass
class BoneDescriptor:
    length: float
    mean_radius: float
    mean_feature: np.ndarray  # unit-normalized


@dataclass
class Skeleton3D:
    joints: np.ndarray                  # (p, 3), z = depth
    bones: list                         # (parent, child) joint index pairs
    sym_pairs: list                     # (joint_a, joint_b) pairs
    rest_transforms: list               # per bone (s, R 3x3, t 3-vector)
    root: int = 0
    joint_radii: np.ndarray | None = None  # normalized units, for part width

    @property
    def n_parts(self):
        return len(self.bones)

    def bone_sym_pairs(self):
        """Bone index pairs induced by the joint symmetry pairs."""
        swap = {a: b for a, b in self.sym_pairs}
        swap.update({b: a for a, b in self.sym_pairs})
        lookup = {tuple(b): i for i, b in enumerate(self.bones)}
        pairs = []
        for i, (pa, ch) in enumerate(self.bones):
            mirrored = (swap.get(pa, pa), swap.get(ch, ch))
            j = lookup.get(mirrored)
            if j is not None and j > i:
                pairs.append((i, j))
        return pairs

    def validate(self):
        p = len(self.joints)
        if len(self.bones) != p - 1:
            raise ValueError("skeleton3d: bones do not form a tree")
        for s, r, t in self.rest_transforms:
            if s <= 0:
                raise ValueError("skeleton3d: non-positive part scale")
            if not np.allclose(r @ r.T, np.eye(3), atol=1e-8) or \
                    np.linalg.det(r) < 0:
                raise ValueError("skeleton3d: invalid rotation")

    def to_json(self, path):
        data = {
            "joints": self.joints.tolist(),
            "bones": [list(b) for b in self.bones],
            "sym_pairs": [list(p) for p in self.sym_pairs],
            "rest_transforms": [
                {"s": s, "R": r.tolist(), "t": t.tolist()}
                for s, r, t in self.rest_transforms],
            "root": self.root,
            "joint_radii": None if self.joint_radii is None
                           else self.joint_radii.tolist(),
        }
        with open(path, "w") as fh:
            json.dump(data, fh, indent=2)

    @classmethod
    def from_json(cls, path):
        with open(path) as fh:
            data = json.load(fh)
        return cls(
            joints=np.array(data["joints"], dtype=np.float64),
            bones=[tuple(b) for b in data["bones"]],
            sym_pairs=[tuple(p) for p in data["sym_pairs"]],
            rest_transforms=[
                (t["s"], np.array(t["R"]), np.array(t["t"]))
                for t in data["rest_transforms"]],
            root=data["root"],
            joint_radii=None if data.get("joint_radii") is None
                        else np.array(data["joint_radii"]),
        )


def describe_branches(tree: SkeletonTree, feature_map) -> dict:
    """Per non-root joint: geometry + mean feature of its bone to the parent.

    Path pixels outside the feature grid are clamped to the nearest valid
    pixel before sampling.
    """
    h, w = feature_map.shape[:2]
    out = {}
    for bone in tree.bones:
        path = np.asarray(bone.path, dtype=np.int64)
        steps = np.diff(path, axis=0)
        length = float(np.sqrt((steps ** 2).sum(axis=1)).sum())
        ys = np.clip(path[:, 0], 0, h - 1)
        xs = np.clip(path[:, 1], 0, w - 1)
        feat = feature_map[ys, xs].mean(axis=0)
        nrm = np.linalg.norm(feat)
        if nrm > 1e-12:
            feat = feat / nrm
        out[bone.child] = BoneDescriptor(length=length,
                                         mean_radius=float(bone.mean_radius),
                                         mean_feature=feat)
    return out


def match_symmetric(descriptors: dict, tree: SkeletonTree,
                    lam=1.0, tau=0.5) -> list:
    """Greedily pair sibling joints with minimal symmetry distance.

    D_sym = |dL|/maxL + |dr|/maxr + lam * (1 - cos(features)); accepted while
    D_sym < tau, pairs disjoint, lowest score first (index tie-break).
    """
    by_parent = {}
    for bone in tree.bones:
        by_parent.setdefault(bone.parent, []).append(bone.child)
    candidates = []
    for parent, kids in sorted(by_parent.items()):
        kids = sorted(kids)
        for ai in range(len(kids)):
            for bi in range(ai + 1, len(kids)):
                a, b = kids[ai], kids[bi]
                da, db = descriptors[a], descriptors[b]
                max_len = max(da.length, db.length, 1e-12)
                max_rad = max(da.mean_radius, db.mean_radius, 1e-12)
                cossim = float(np.dot(da.mean_feature, db.mean_feature))
                score = (abs(da.length - db.length) / max_len
                         + abs(da.mean_radius - db.mean_radius) / max_rad
                         + lam * (1.0 - cossim))
                candidates.append((score, a, b))
    candidates.sort()
    used, pairs = set(), []
    for score, a, b in candidates:
        if score >= tau or a in used or b in used:
            continue
        used.update((a, b))
        pairs.append((a, b))
    return pairs


def split_shared_parents(tree: SkeletonTree, pairs: list):
    """Duplicate the parent of a symmetric pair when it has only those two
    children, so each side gets its own copy; repeated until fixpoint."""
    joints = [Joint(j.x, j.y, j.radius, j.kind) for j in tree.joints]
    bones = [Bone(b.parent, b.child, list(b.path), b.mean_radius)
             for b in tree.bones]
    pairs = list(pairs)
    root = tree.root

    changed = True
    while changed:
        changed = False
        for a, b in list(pairs):
            bone_a = next((bn for bn in bones if bn.child == a), None)
            bone_b = next((bn for bn in bones if bn.child == b), None)
            if bone_a is None or bone_b is None or bone_a.parent != bone_b.parent:
                continue
            q = bone_a.parent
            kids = [bn.child for bn in bones if bn.parent == q]
            if sorted(kids) != sorted([a, b]):
                continue
            if q == root:
                warnings.warn("split_shared_parents: refusing to split root")
                continue
            if any(q in pr for pr in pairs):
                continue  # already part of a symmetric pair
            inbone = next(bn for bn in bones if bn.child == q)
            qj = joints[q]
            qa = len(joints)
            joints.append(Joint(qj.x, qj.y, qj.radius, qj.kind))
            qb = len(joints)
            joints.append(Joint(qj.x, qj.y, qj.radius, qj.kind))
            bones.remove(inbone)
            bones.append(Bone(inbone.parent, qa, list(inbone.path),
                              inbone.mean_radius))
            bones.append(Bone(inbone.parent, qb, list(inbone.path),
                              inbone.mean_radius))
            bone_a.parent = qa
            bone_b.parent = qb
            # q becomes orphaned; remap indices to drop it
            pairs.append((qa, qb))
            remap = {}
            new_joints = []
            for old in range(len(joints)):
                if old == q:
                    continue
                remap[old] = len(new_joints)
                new_joints.append(joints[old])
            joints = new_joints
            for bn in bones:
                bn.parent = remap[bn.parent]
                bn.child = remap[bn.child]
            pairs = [(remap[x], remap[y]) for x, y in pairs]
            root = remap[root]
            changed = True
            break
    out = SkeletonTree(joints=joints, bones=bones, root=root)
    out.validate()
    return out, pairs


def rotation_to_direction(d):
    """Minimal-twist rotation mapping the canonical part axis (0,0,1) to the
    unit direction ``d``. Antiparallel input maps to a 180 deg turn about x."""
    d = np.asarray(d, dtype=np.float64)
    d = d / np.linalg.norm(d)
    z = np.array([0.0, 0.0, 1.0])
    c = float(np.dot(z, d))
    if c < -1.0 + 1e-12:
        return np.diag([1.0, -1.0, -1.0])
    v = np.cross(z, d)
    vx = np.array([[0, -v[2], v[1]], [v[2], 0, -v[0]], [-v[1], v[0], 0]])
    return np.eye(3) + vx + vx @ vx / (1.0 + c)


def uplift(tree: SkeletonTree, pairs: list, image_size) -> Skeleton3D:
    """Lift 2D joints into 3D: x,y scaled to [-1,1] (aspect preserved),
    paired joints offset to z = +/- average radius, rest rigid transforms
    derived per bone."""
    h, w = image_size
    scale = 2.0 / max(h, w)
    p = len(tree.joints)
    P = np.zeros((p, 3))
    radii = np.zeros(p)
    for i, j in enumerate(tree.joints):
        P[i, 0] = (j.x + 0.5 - w / 2.0) * scale
        P[i, 1] = (j.y + 0.5 - h / 2.0) * scale
        radii[i] = j.radius * scale
    for a, b in pairs:
        # exact mirror symmetry: shared (x, y), opposite z
        xy = 0.5 * (P[a, :2] + P[b, :2])
        P[a, :2] = xy
        P[b, :2] = xy
        r = 0.5 * (radii[a] + radii[b])
        P[a, 2] = +r
        P[b, 2] = -r

    bones = [(b.parent, b.child) for b in tree.bones]
    transforms = []
    for pa, ch in bones:
        vec = P[ch] - P[pa]
        s = float(np.linalg.norm(vec))
        if s < 1e-12:
            raise ValueError(f"uplift: zero-length bone {pa}->{ch}")
        t = 0.5 * (P[pa] + P[ch])
        transforms.append((s, rotation_to_direction(vec / s), t))
    sk = Skeleton3D(joints=P, bones=bones, sym_pairs=list(pairs),
                    rest_transforms=transforms, root=tree.root,
                    joint_radii=radii)
    sk.validate()
    return sk


def build_skeleton3d(tree: SkeletonTree, feature_map, image_size,
                     lam=1.0, tau=0.5) -> Skeleton3D:
    """Full 2D tree -> 3D skeleton pipeline."""
    desc = describe_branches(tree, feature_map)
    pairs = match_symmetric(desc, tree, lam=lam, tau=tau)
    tree2, pairs2 = split_shared_parents(tree, pairs)
    return uplift(tree2, pairs2, image_size)
