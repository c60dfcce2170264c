"""2D skeleton extraction from a binary silhouette.

Pipeline: exact Euclidean distance transform -> morphological thinning
(Zhang-Suen) -> point classification -> rooted tree construction ->
radius-based joint filtering.
"""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

__all__ = [
    "DistanceField", "Joint", "Bone", "SkeletonTree",
    "distance_transform", "thin", "classify_points", "build_tree",
    "filter_joints", "extract_skeleton",
]

ENDPOINT = 1
CONNECTION = 2
JUNCTION = 3


@dataclass(frozen=True)
class DistanceField:
    """Per-pixel Euclidean distance to the nearest background pixel.

    Pixels just outside the grid count as background, so an all-foreground
    grid still has a finite field.
    """
    values: np.ndarray

    def at(self, y, x):
        return float(self.values[y, x])


@dataclass
class Joint:
    x: int
    y: int
    radius: float
    kind: str  # "root" | "junction" | "endpoint"


@dataclass
class Bone:
    parent: int
    child: int
    path: list        # pixel (y, x) sequence from parent to child
    mean_radius: float


@dataclass
class SkeletonTree:
    joints: list = field(default_factory=list)
    bones: list = field(default_factory=list)
    root: int = 0

    def children(self, j):
        return [b.child for b in self.bones if b.parent == j]

    def bone_to(self, child):
        for b in self.bones:
            if b.child == child:
                return b
        return None

    def validate(self):
        n = len(self.joints)
        if len(self.bones) != n - 1:
            raise ValueError(f"not a tree: {len(self.bones)} bones, {n} joints")
        seen = {self.root}
        frontier = [self.root]
        while frontier:
            j = frontier.pop()
            for c in self.children(j):
                if c in seen:
                    raise ValueError("cycle detected in skeleton tree")
                seen.add(c)
                frontier.append(c)
        if len(seen) != n:
            raise ValueError("skeleton tree is not connected")


def distance_transform(mask) -> DistanceField:
    """Exact Euclidean distance transform with a virtual background border."""
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        raise ValueError("distance_transform: mask has no foreground")
    padded = np.pad(mask, 1, constant_values=False)
    dist = ndimage.distance_transform_edt(padded)[1:-1, 1:-1]
    return DistanceField(np.where(mask, dist, 0.0))


def _neighbors8(mask):
    """Stack of the 8 shifted copies p2..p9 (N, NE, E, SE, S, SW, W, NW)."""
    p = np.pad(mask, 1, constant_values=0)
    return np.stack([
        p[:-2, 1:-1], p[:-2, 2:], p[1:-1, 2:], p[2:, 2:],
        p[2:, 1:-1], p[2:, :-2], p[1:-1, :-2], p[:-2, :-2],
    ]).astype(np.uint8)


def largest_component(mask):
    """Keep only the largest 8-connected foreground component."""
    mask = np.asarray(mask).astype(bool)
    labels, n = ndimage.label(mask, structure=np.ones((3, 3), dtype=int))
    if n <= 1:
        return mask
    sizes = ndimage.sum_labels(mask, labels, index=np.arange(1, n + 1))
    return labels == (1 + int(np.argmax(sizes)))


def thin(mask):
    """Zhang-Suen parallel thinning to a one-pixel-wide 8-connected skeleton.

    Multi-component inputs are reduced to their largest component first.
    Iterates the two subpasses until a full pass removes nothing, which makes
    the operation idempotent by construction.
    """
    mask = np.asarray(mask).astype(bool)
    if not mask.any():
        return mask.copy()
    img = largest_component(mask).astype(np.uint8)

    while True:
        changed = False
        for phase in (0, 1):
            nb = _neighbors8(img)
            b = nb.sum(axis=0)
            ring = np.concatenate([nb, nb[:1]], axis=0)
            a = ((ring[:-1] == 0) & (ring[1:] == 1)).sum(axis=0)
            p2, p4, p6, p8 = nb[0], nb[2], nb[4], nb[6]
            if phase == 0:
                c1 = (p2 * p4 * p6) == 0
                c2 = (p4 * p6 * p8) == 0
            else:
                c1 = (p2 * p4 * p8) == 0
                c2 = (p2 * p6 * p8) == 0
            remove = (img == 1) & (b >= 2) & (b <= 6) & (a == 1) & c1 & c2
            if remove.any():
                img[remove] = 0
                changed = True
        if not changed:
            break
    return img.astype(bool)


def classify_points(skeleton):
    """Label each skeleton pixel by its 8-neighbor count.

    1 neighbor -> endpoint, 2 -> connection, >=3 -> junction. Isolated pixels
    (0 neighbors) are labeled endpoints so single-pixel skeletons still root.
    """
    skeleton = np.asarray(skeleton).astype(bool)
    counts = _neighbors8(skeleton.astype(np.uint8)).sum(axis=0)
    kinds = np.zeros(skeleton.shape, dtype=np.uint8)
    kinds[skeleton & (counts <= 1)] = ENDPOINT
    kinds[skeleton & (counts == 2)] = CONNECTION
    kinds[skeleton & (counts >= 3)] = JUNCTION
    return kinds


_OFFS = [(-1, -1), (-1, 0), (-1, 1), (0, -1), (0, 1), (1, -1), (1, 0), (1, 1)]


def _bfs_parents(skeleton, root):
    h, w = skeleton.shape
    parent = {root: None}
    q = deque([root])
    while q:
        y, x = q.popleft()
        for dy, dx in _OFFS:
            ny, nx = y + dy, x + dx
            if 0 <= ny < h and 0 <= nx < w and skeleton[ny, nx] \
                    and (ny, nx) not in parent:
                parent[(ny, nx)] = (y, x)
                q.append((ny, nx))
    return parent


def build_tree(skeleton, kinds, dfield: DistanceField) -> SkeletonTree:
    """Build a rooted joint/bone tree from a thin skeleton.

    Root = junction with the largest distance value (or the max-distance
    skeleton pixel if there is no junction). Paths root->endpoint follow
    breadth-first shortest hop paths; junctions and endpoints on those paths
    become joints, consecutive joints become bones.
    """
    skeleton = np.asarray(skeleton).astype(bool)
    dv = dfield.values
    endpoints = list(zip(*np.nonzero(kinds == ENDPOINT)))
    if not endpoints:
        raise ValueError("build_tree: skeleton has no endpoints (closed loop)")

    # Adjacent junction pixels form one logical joint: collapse each
    # 8-connected junction cluster to its max-distance representative.
    jmask = kinds == JUNCTION
    jlabels, n_clusters = ndimage.label(jmask, structure=np.ones((3, 3)))
    reps = {}
    for lbl in range(1, n_clusters + 1):
        pixels = list(zip(*np.nonzero(jlabels == lbl)))
        reps[lbl] = max(pixels, key=lambda p: (dv[p], -p[0], -p[1]))

    def rep_of(px):
        lbl = jlabels[px]
        return reps[lbl] if lbl else px

    def best(pixels):
        return max(pixels, key=lambda p: (dv[p], -p[0], -p[1]))

    if reps:
        root_px = best(list(reps.values()))
    else:
        root_px = best(list(zip(*np.nonzero(skeleton))))

    parent = _bfs_parents(skeleton, root_px)
    tree = SkeletonTree()
    index = {}

    def joint_index(px, kind):
        if px not in index:
            index[px] = len(tree.joints)
            tree.joints.append(Joint(x=px[1], y=px[0], radius=float(dv[px]),
                                     kind=kind))
        return index[px]

    joint_index(root_px, "root")
    tree.root = 0
    seen_bones = set()

    for ep in sorted(endpoints):
        if ep not in parent:
            continue  # disconnected stray (should not happen after thinning)
        raw = [ep]
        while raw[-1] != root_px:
            raw.append(parent[raw[-1]])
        raw.reverse()  # root -> endpoint
        # contract runs of same-cluster junction pixels to the cluster rep
        path = []
        for px in raw:
            lbl = jlabels[px]
            if lbl:
                r = reps[lbl]
                if path and path[-1] == r:
                    continue
                path.append(r)
            else:
                path.append(px)
        marks = [0]
        for i, px in enumerate(path[1:], start=1):
            if px == ep or jlabels[px]:
                marks.append(i)
        for a, b in zip(marks[:-1], marks[1:]):
            pa, pb = path[a], path[b]
            kind = "endpoint" if pb == ep else "junction"
            ja = joint_index(pa, "junction" if pa != root_px else "root")
            jb = joint_index(pb, kind)
            if (ja, jb) in seen_bones or ja == jb:
                continue
            seen_bones.add((ja, jb))
            seg = path[a:b + 1]
            tree.bones.append(Bone(parent=ja, child=jb, path=list(seg),
                                   mean_radius=float(np.mean([dv[p] for p in seg]))))
    tree.validate()
    return tree


def filter_joints(tree: SkeletonTree) -> SkeletonTree:
    """Remove joints lying within their parent joint's coverage radius.

    Traverses from the root; a removed joint's children re-attach to its
    parent with concatenated bone paths. Applied until fixpoint.
    """
    joints = [Joint(j.x, j.y, j.radius, j.kind) for j in tree.joints]
    bones = [Bone(b.parent, b.child, list(b.path), b.mean_radius)
             for b in tree.bones]
    root = tree.root

    def children_of(j):
        return [b for b in bones if b.parent == j]

    changed = True
    while changed:
        changed = False
        frontier = [root]
        while frontier:
            j = frontier.pop(0)
            pj = joints[j]
            for bone in list(children_of(j)):
                c = bone.child
                cj = joints[c]
                d = float(np.hypot(cj.x - pj.x, cj.y - pj.y))
                if d < pj.radius:
                    # delete child c, re-attach its children to j
                    bones.remove(bone)
                    for gb in children_of(c):
                        gb.parent = j
                        n1, n2 = len(bone.path), len(gb.path)
                        # exact mean of concatenated paths (joint pixel shared)
                        total = n1 * bone.mean_radius + n2 * gb.mean_radius \
                            - cj.radius
                        gb.path = bone.path[:-1] + gb.path
                        gb.mean_radius = total / (n1 + n2 - 1)
                    changed = True
                else:
                    frontier.append(c)
            if changed:
                break
        if changed:
            continue

    # compact joint indices (drop orphans)
    keep = {root}
    stack = [root]
    while stack:
        j = stack.pop()
        for b in bones:
            if b.parent == j and b.child not in keep:
                keep.add(b.child)
                stack.append(b.child)
    remap = {}
    new_joints = []
    for old in sorted(keep):
        remap[old] = len(new_joints)
        new_joints.append(joints[old])
    new_bones = [Bone(remap[b.parent], remap[b.child], b.path, b.mean_radius)
                 for b in bones if b.parent in keep and b.child in keep]
    out = SkeletonTree(joints=new_joints, bones=new_bones, root=remap[root])
    out.validate()
    return out


def extract_skeleton(mask):
    """Full silhouette -> filtered SkeletonTree pipeline."""
    dfield = distance_transform(mask)
    skel = thin(mask)
    kinds = classify_points(skel)
    tree = build_tree(skel, kinds, dfield)
    return filter_joints(tree), dfield, skel
