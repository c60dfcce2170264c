import numpy as np
import pytest

from skelparts.skeleton2d import Bone, Joint, SkeletonTree
from skelparts.skeleton3d import (Skeleton3D, build_skeleton3d,
                                  describe_branches, match_symmetric,
                                  rotation_to_direction, split_shared_parents,
                                  uplift)
from skelparts.synth import quadruped_scene
from skelparts.skeleton2d import extract_skeleton


def two_leg_tree():
    """Root with two sibling legs of equal geometry."""
    joints = [Joint(x=10, y=5, radius=4.0, kind="root"),
              Joint(x=6, y=15, radius=2.0, kind="endpoint"),
              Joint(x=14, y=15, radius=2.0, kind="endpoint")]
    bones = [Bone(0, 1, [(5, 10), (10, 8), (15, 6)], 3.0),
             Bone(0, 2, [(5, 10), (10, 12), (15, 14)], 3.0)]
    return SkeletonTree(joints=joints, bones=bones, root=0)


def const_features(h=20, w=20, d=4, value=None):
    f = np.zeros((h, w, d))
    v = value if value is not None else np.eye(d)[0]
    f[:] = v
    return f


def test_describe_branches_geometry():
    tree = two_leg_tree()
    desc = describe_branches(tree, const_features())
    seg = np.hypot(5, 2) * 2  # two steps of (5, 2)
    assert desc[1].length == pytest.approx(seg)
    assert desc[1].mean_radius == 3.0
    assert np.allclose(np.linalg.norm(desc[1].mean_feature), 1.0)


def test_match_symmetric_pairs_equal_legs():
    tree = two_leg_tree()
    desc = describe_branches(tree, const_features())
    assert match_symmetric(desc, tree) == [(1, 2)]


def test_match_symmetric_rejects_above_tau():
    tree = two_leg_tree()
    desc = describe_branches(tree, const_features())
    desc[2].length = desc[1].length * 10  # |dL|/maxL = 0.9 >= tau
    assert match_symmetric(desc, tree, tau=0.5) == []


def test_match_symmetric_feature_term():
    tree = two_leg_tree()
    f = const_features()
    desc = describe_branches(tree, f)
    desc[2].mean_feature = -desc[1].mean_feature  # 1 - cos = 2
    assert match_symmetric(desc, tree, lam=1.0) == []
    assert match_symmetric(desc, tree, lam=0.0) == [(1, 2)]


def test_match_symmetric_disjoint():
    joints = [Joint(10, 5, 4.0, "root")] + [
        Joint(6 + i, 15, 2.0, "endpoint") for i in range(3)]
    bones = [Bone(0, i + 1, [(5, 10), (15, 6 + i)], 3.0) for i in range(3)]
    tree = SkeletonTree(joints=joints, bones=bones, root=0)
    desc = describe_branches(tree, const_features())
    pairs = match_symmetric(desc, tree)
    used = [j for p in pairs for j in p]
    assert len(used) == len(set(used))
    assert len(pairs) == 1


def test_split_shared_parents_quadruped():
    scene = quadruped_scene()
    tree, _, _ = extract_skeleton(scene["mask"])
    desc = describe_branches(tree, scene["features"])
    pairs = match_symmetric(desc, tree)
    assert len(pairs) == 2
    tree2, pairs2 = split_shared_parents(tree, pairs)
    tree2.validate()
    # each leg pair's shared parent was split, adding one pair per fork
    assert len(pairs2) == 4
    assert len(tree2.joints) == len(tree.joints) + 2


def test_split_refuses_root(recwarn):
    tree = two_leg_tree()
    out, pairs = split_shared_parents(tree, [(1, 2)])
    assert len(out.joints) == 3  # unchanged
    assert any("root" in str(w.message) for w in recwarn.list)


def test_rotation_to_direction_properties():
    rng = np.random.default_rng(0)
    for _ in range(20):
        d = rng.normal(size=3)
        d /= np.linalg.norm(d)
        r = rotation_to_direction(d)
        assert np.allclose(r @ np.array([0, 0, 1.0]), d, atol=1e-12)
        assert np.allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


def test_rotation_to_direction_antiparallel():
    r = rotation_to_direction([0, 0, -1.0])
    assert np.allclose(r @ np.array([0, 0, 1.0]), [0, 0, -1])
    assert np.linalg.det(r) == pytest.approx(1.0)


def test_uplift_exact_mirror():
    tree = two_leg_tree()
    sk = uplift(tree, [(1, 2)], (20, 20))
    a, b = sk.sym_pairs[0]
    reflected = sk.joints[b] * np.array([1, 1, -1])
    assert np.abs(sk.joints[a] - reflected).max() < 1e-12
    assert sk.joints[a][2] > 0


def test_uplift_rest_transforms():
    tree = two_leg_tree()
    sk = uplift(tree, [], (20, 20))
    for (pa, ch), (s, r, t) in zip(sk.bones, sk.rest_transforms):
        vec = sk.joints[ch] - sk.joints[pa]
        assert s == pytest.approx(np.linalg.norm(vec))
        assert np.allclose(r @ [0, 0, 1], vec / s, atol=1e-12)
        assert np.allclose(t, 0.5 * (sk.joints[pa] + sk.joints[ch]))


def test_uplift_coordinate_normalization():
    tree = two_leg_tree()
    sk = uplift(tree, [], (20, 40))  # wide image
    # scale is 2/max(h, w); joint (10, 5) -> x = (10.5 - 20) / 20
    assert sk.joints[0][0] == pytest.approx((10.5 - 20) * 2 / 40)
    assert sk.joints[0][1] == pytest.approx((5.5 - 10) * 2 / 40)


def test_build_skeleton3d_quadruped():
    scene = quadruped_scene()
    tree, _, _ = extract_skeleton(scene["mask"])
    sk = build_skeleton3d(tree, scene["features"], scene["mask"].shape)
    sk.validate()
    assert len(sk.sym_pairs) == 4
    for a, b in sk.sym_pairs:
        assert np.abs(sk.joints[a] - sk.joints[b] * [1, 1, -1]).max() < 1e-12
    assert len(sk.bone_sym_pairs()) >= 2


def test_json_round_trip(tmp_path):
    scene = quadruped_scene()
    tree, _, _ = extract_skeleton(scene["mask"])
    sk = build_skeleton3d(tree, scene["features"], scene["mask"].shape)
    path = tmp_path / "s.json"
    sk.to_json(path)
    back = Skeleton3D.from_json(path)
    assert np.allclose(back.joints, sk.joints)
    assert back.bones == sk.bones
    assert back.sym_pairs == sk.sym_pairs
    for (s1, r1, t1), (s2, r2, t2) in zip(back.rest_transforms,
                                          sk.rest_transforms):
        assert s1 == s2 and np.allclose(r1, r2) and np.allclose(t1, t2)
