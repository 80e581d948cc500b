"""Procedural characters and their analytic occupancy/skinning oracles."""

import filecmp

import numpy as np
import pytest

from fieldrig.character import (PARENTS, Capsule, CharacterConfig, Pose,
                                RiggedCharacter, Skeleton, analytic_joints,
                                analytic_occupancy, analytic_skinning,
                                build_character, character_bounds,
                                character_height, character_mesh,
                                identity_pose, occupancy_grid, read_character,
                                read_pose, sample_pose, synthesize_clip,
                                write_character, write_pose)
from fieldrig.geomcore import Rotation


def single_capsule_character(r1=0.2, r2=0.2, length=1.0, beta=200.0):
    """Two-joint chain along +z carrying one capsule; closed forms are easy."""
    skel = Skeleton(["a", "b"], np.array([-1, 0]),
                    np.array([[0.0, 0.0, 0.0], [0.0, 0.0, length]]))
    return RiggedCharacter(skel, [Capsule(0, 1, r1, r2)], beta)


def chain3_character(r=0.15, beta=200.0):
    """Three joints along +z, two equal capsules meeting at the middle."""
    skel = Skeleton(["a", "b", "c"], np.array([-1, 0, 1]),
                    np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 1.0],
                              [0.0, 0.0, 2.0]]))
    return RiggedCharacter(skel, [Capsule(0, 1, r, r), Capsule(1, 2, r, r)],
                           beta)


# ---------------------------------------------------------------------------
# Topology and construction


def test_skeleton_topology():
    parents = np.asarray(PARENTS)
    assert parents[0] == -1
    assert np.all(parents[1:] < np.arange(1, len(parents)))
    leaves = set(range(len(parents))) - set(parents[1:].tolist())
    assert leaves == {2, 5, 8, 11, 14}


def test_build_character_heights_and_ground(char0):
    for seed in range(100):
        char = build_character(seed)
        h = character_height(char)
        assert 1.5 <= h <= 1.9
    # rest pose stands on the ground plane
    lo = min(char0.skeleton.rest_positions[c.child][2] - c.radius_tail
             for c in char0.capsules)
    lo = min(lo, min(char0.skeleton.rest_positions[c.joint][2] - c.radius_head
                     for c in char0.capsules))
    assert abs(lo) < 1e-9


def test_build_character_is_deterministic():
    a, b = build_character(7), build_character(7)
    assert np.array_equal(a.skeleton.rest_positions, b.skeleton.rest_positions)
    assert all(x.radius_head == y.radius_head
               for x, y in zip(a.capsules, b.capsules))


def test_character_validation_rejects_bad_rigs():
    skel = Skeleton(["a", "b"], np.array([-1, 0]),
                    np.array([[0.0, 0.0, 0.0], [0.0, 0.0, 0.5]]))
    with pytest.raises(ValueError):  # sphere-in-sphere: |r1 - r2| >= length
        RiggedCharacter(skel, [Capsule(0, 1, 0.8, 0.2)])
    with pytest.raises(ValueError):  # non-leaf joint without a capsule
        RiggedCharacter(skel, [])
    with pytest.raises(ValueError):  # wrong parentage
        RiggedCharacter(skel, [Capsule(1, 0, 0.1, 0.1)])
    with pytest.raises(ValueError):
        RiggedCharacter(skel, [Capsule(0, 1, 0.1, 0.1)], beta=0.0)


def test_config_validation():
    with pytest.raises(ValueError):
        CharacterConfig(height_range=(1.9, 1.5)).validate()
    with pytest.raises(ValueError):
        CharacterConfig(proportion_jitter=0.6).validate()


# ---------------------------------------------------------------------------
# Occupancy oracle


def test_occupancy_probes_straddle_capsule_wall():
    char = single_capsule_character(r1=0.2, r2=0.2)
    eps = 1e-6
    inside = [0.2 - eps, 0.0, 0.5]
    outside = [0.2 + eps, 0.0, 0.5]
    assert analytic_occupancy(char, inside) == 1.0
    assert analytic_occupancy(char, outside) == 0.0
    # boundary counts as inside
    assert analytic_occupancy(char, [0.2, 0.0, 0.5]) == 1.0


def test_occupancy_matches_sphere_distance_on_tapered_ends():
    # beyond the segment the round cone reduces to its end spheres
    char = single_capsule_character(r1=0.3, r2=0.1)
    rng = np.random.default_rng(0)
    for _ in range(200):
        p = rng.uniform(-0.8, 1.8, size=3)
        d_head = np.linalg.norm(p - [0.0, 0.0, 0.0])
        d_tail = np.linalg.norm(p - [0.0, 0.0, 1.0])
        if d_head <= 0.3 or d_tail <= 0.1:
            assert analytic_occupancy(char, p) == 1.0


def test_occupancy_equal_radii_matches_segment_distance():
    char = single_capsule_character(r1=0.2, r2=0.2)
    rng = np.random.default_rng(1)
    pts = rng.uniform([-0.7, -0.7, -0.7], [0.7, 0.7, 1.7], size=(500, 3))
    t = np.clip(pts[:, 2], 0.0, 1.0)
    seg = pts - np.stack([np.zeros(len(pts)), np.zeros(len(pts)), t], axis=1)
    inside = np.linalg.norm(seg, axis=1) <= 0.2
    assert np.array_equal(analytic_occupancy(char, pts), inside.astype(float))


def test_mesh_area_matches_capsule_closed_form():
    r, length = 0.25, 1.0
    char = single_capsule_character(r1=r, r2=r, length=length)
    mesh = character_mesh(char, resolution=96)
    analytic = 2 * np.pi * r * length + 4 * np.pi * r * r
    area = float(mesh.face_areas().sum())
    assert abs(area - analytic) / analytic < 0.05
    assert mesh.is_watertight() and mesh.is_oriented()


def test_occupancy_grid_is_binary_and_matches_oracle():
    char = build_character(2)
    grid = occupancy_grid(char, resolution=24)
    vals = grid.values.ravel()
    assert set(np.unique(vals)).issubset({0.0, 1.0})
    assert vals.sum() > 0
    expect = analytic_occupancy(char, grid.cell_centers())
    assert np.array_equal(vals, expect)


def test_posed_occupancy_follows_joints():
    char = chain3_character(r=0.15)
    rot = Rotation.from_axis_angle([1.0, 0.0, 0.0], np.pi / 2).matrix
    rots = np.tile(np.eye(3), (3, 1, 1))
    rots[1] = rot  # bend the middle joint 90 degrees
    pose = Pose(rots)
    joints = analytic_joints(char, pose)
    assert np.abs(joints[2] - [0.0, -1.0, 1.0]).max() < 1e-12
    # point near the posed distal bone is occupied, rest-location is not
    assert analytic_occupancy(char, [0.0, -0.5, 1.0], pose) == 1.0
    assert analytic_occupancy(char, [0.0, 0.0, 1.5], pose) == 0.0


# ---------------------------------------------------------------------------
# Skinning oracle


def test_skinning_rows_sum_to_one_and_leaves_zero():
    char = build_character(3)
    rng = np.random.default_rng(4)
    center, side = character_bounds(char)
    pts = center + rng.uniform(-0.5, 0.5, size=(400, 3)) * side
    w = analytic_skinning(char, pts)
    assert np.abs(w.sum(axis=1) - 1.0).max() < 1e-9
    assert np.all(w >= 0)
    assert np.all(w[:, list(char.leaf_mask().nonzero()[0])] == 0.0)


def test_skinning_deep_inside_bone_is_decisive():
    char = chain3_character(r=0.15)
    w = analytic_skinning(char, [0.0, 0.0, 0.25])  # well inside bone 0
    assert w[0] > 0.99
    w = analytic_skinning(char, [0.0, 0.0, 1.75])  # well inside bone 1
    assert w[1] > 0.99


def test_skinning_symmetric_at_equidistant_probe():
    char = chain3_character(r=0.15)
    # (x, 0, 1) is equidistant from both capsules for any x
    w = analytic_skinning(char, [0.4, 0.0, 1.0])
    assert abs(w[0] - w[1]) < 1e-12
    assert abs(w[0] - 0.5) < 1e-12


def test_skinning_far_points_still_normalize():
    char = build_character(5)
    w = analytic_skinning(char, [50.0, 50.0, 50.0])
    assert np.isfinite(w).all()
    assert abs(w.sum() - 1.0) < 1e-9


# ---------------------------------------------------------------------------
# Poses and clips


def test_sample_pose_is_roll_free_and_bounded():
    char = build_character(1)
    pose = sample_pose(char, seed=9, max_angle_deg=40.0)
    assert pose.n_joints == char.n_joints
    for k, m in enumerate(pose.rotations):
        ang = np.arccos(np.clip((np.trace(m) - 1) / 2, -1.0, 1.0))
        assert ang <= np.deg2rad(40.0) + 1e-9
    # leaves stay identity
    for k in np.nonzero(char.leaf_mask())[0]:
        assert np.array_equal(pose.rotations[k], np.eye(3))


def test_synthesize_clip_drifts_from_rest():
    char = build_character(1)
    clip = synthesize_clip(char, 30, seed=2)
    assert clip.n_frames == 30
    assert np.array_equal(clip.rotations[0], identity_pose(char.n_joints).rotations)
    drift = [np.abs(clip.rotations[f] - clip.rotations[0]).max()
             for f in range(30)]
    assert all(b >= a - 1e-12 for a, b in zip(drift, drift[1:]))


def test_bounds_contain_mesh():
    char = build_character(6)
    pose = sample_pose(char, seed=3)
    mesh = character_mesh(char, pose, resolution=48)
    center, side = character_bounds(char, pose)
    assert np.all(mesh.vertices >= center - side / 2 - 1e-9)
    assert np.all(mesh.vertices <= center + side / 2 + 1e-9)


# ---------------------------------------------------------------------------
# Serialization


def test_character_round_trip_bytes(tmp_path):
    char = build_character(11)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_character(char, p1)
    again = read_character(p1)
    write_character(again, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    assert np.array_equal(again.skeleton.rest_positions,
                          char.skeleton.rest_positions)
    assert again.beta == char.beta


def test_pose_round_trip_bytes(tmp_path):
    char = build_character(12)
    pose = sample_pose(char, seed=8, translate=0.3)
    p1, p2 = tmp_path / "a.json", tmp_path / "b.json"
    write_pose(pose, p1)
    again = read_pose(p1)
    write_pose(again, p2)
    assert filecmp.cmp(p1, p2, shallow=False)
    assert np.abs(again.rotations - pose.rotations).max() < 1e-9
    assert np.abs(again.root_translation - pose.root_translation).max() < 1e-15


def test_read_pose_rejects_bad_shape(tmp_path):
    path = tmp_path / "p.json"
    path.write_text('{"rotations": [[1, 0, 0]], "root_translation": [0, 0, 0]}')
    with pytest.raises(ValueError):
        read_pose(path)
