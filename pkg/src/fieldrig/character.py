"""Procedural capsule humanoids with closed-form ground truth.

A character is a 15-joint skeleton plus one tapered capsule per skeleton
edge.  Occupancy, skinning weights, and posed joint locations all have
analytic oracles, which is what makes the learned fields testable end to
end: every supervision target and every evaluation reference comes from
the closed forms here.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field as dc_field

import numpy as np

from . import animation
from .geomcore import (Rotation, TriangleMesh, VoxelGrid, quaternion_payload,
                       unit)

JOINT_NAMES = (
    "pelvis", "spine", "head",
    "l_shoulder", "l_elbow", "l_wrist",
    "r_shoulder", "r_elbow", "r_wrist",
    "l_hip", "l_knee", "l_ankle",
    "r_hip", "r_knee", "r_ankle",
)
PARENTS = (-1, 0, 1, 1, 3, 4, 1, 6, 7, 0, 9, 10, 0, 12, 13)
SKELETON_NAME = "humanoid15"

# Joint offsets from the parent as fractions of nominal height (T-pose,
# z up, arms along +-x).  Limb segments are collinear on purpose: a straight
# rest limb keeps the capsule union symmetric under roll about the limb axis.
_OFFSETS = {
    0: (0.0, 0.0, 0.54), 1: (0.0, 0.0, 0.26), 2: (0.0, 0.0, 0.14),
    3: (0.11, 0.0, -0.01), 4: (0.135, 0.0, 0.0), 5: (0.135, 0.0, 0.0),
    6: (-0.11, 0.0, -0.01), 7: (-0.135, 0.0, 0.0), 8: (-0.135, 0.0, 0.0),
    9: (0.06, 0.0, -0.04), 10: (0.0, 0.0, -0.23), 11: (0.0, 0.0, -0.225),
    12: (-0.06, 0.0, -0.04), 13: (0.0, 0.0, -0.23), 14: (0.0, 0.0, -0.225),
}
# (joint, child) -> (radius at joint end, radius at child end), height fractions.
_CAPSULE_RADII = {
    (0, 1): (0.085, 0.075), (1, 2): (0.035, 0.055),
    (1, 3): (0.045, 0.038), (3, 4): (0.034, 0.030), (4, 5): (0.028, 0.024),
    (1, 6): (0.045, 0.038), (6, 7): (0.034, 0.030), (7, 8): (0.028, 0.024),
    (0, 9): (0.050, 0.045), (9, 10): (0.052, 0.042), (10, 11): (0.040, 0.032),
    (0, 12): (0.050, 0.045), (12, 13): (0.052, 0.042), (13, 14): (0.040, 0.032),
}

DEFAULT_BETA = 200.0  # skinning falloff, 1/m^2


@dataclass
class Skeleton:
    names: list
    parents: np.ndarray
    rest_positions: np.ndarray

    def __post_init__(self):
        self.parents = np.asarray(self.parents, dtype=np.int64)
        self.rest_positions = np.asarray(self.rest_positions, dtype=np.float64)
        animation._check_topology(self.parents)
        k = len(self.parents)
        if len(self.names) != k or self.rest_positions.shape != (k, 3):
            raise ValueError("skeleton arrays disagree on joint count")
        if not np.all(np.isfinite(self.rest_positions)):
            raise ValueError("non-finite rest position")
        for j in range(1, k):
            if np.linalg.norm(self.rest_positions[j] - self.rest_positions[self.parents[j]]) < 1e-9:
                raise ValueError(f"zero-length bone at joint {j}")

    @property
    def n_joints(self) -> int:
        return len(self.parents)


@dataclass
class Pose:
    """Relative joint rotations (K, 3, 3) plus a root translation.

    `source_quaternions` carries the quaternions a reader parsed, so a
    rewrite can reproduce the document bytes; writers verify them against
    `rotations` before use and extract afresh when they no longer match.
    """

    rotations: np.ndarray
    root_translation: np.ndarray = dc_field(default_factory=lambda: np.zeros(3))
    source_quaternions: np.ndarray | None = None

    def __post_init__(self):
        self.rotations = np.asarray(self.rotations, dtype=np.float64)
        self.root_translation = np.asarray(self.root_translation, dtype=np.float64)
        if self.rotations.ndim != 3 or self.rotations.shape[1:] != (3, 3):
            raise ValueError("pose rotations must be (K, 3, 3)")
        if self.source_quaternions is not None:
            self.source_quaternions = np.asarray(self.source_quaternions,
                                                 dtype=np.float64)
            if self.source_quaternions.shape != (len(self.rotations), 4):
                raise ValueError("source quaternions must be (K, 4)")
        err = np.abs(np.einsum("kji,kjl->kil", self.rotations, self.rotations)
                     - np.eye(3)).max()
        if err > 1e-6:
            raise ValueError("pose rotations must be orthonormal")
        if np.any(np.linalg.det(self.rotations) < 0):
            raise ValueError("pose rotations must be proper (det +1)")

    @property
    def n_joints(self) -> int:
        return len(self.rotations)


def identity_pose(n_joints: int) -> Pose:
    return Pose(np.tile(np.eye(3), (n_joints, 1, 1)))


@dataclass
class Capsule:
    """Tapered capsule spanning the bone from `joint` to `child`."""

    joint: int
    child: int
    radius_head: float
    radius_tail: float


@dataclass
class RiggedCharacter:
    skeleton: Skeleton
    capsules: list
    beta: float = DEFAULT_BETA

    def __post_init__(self):
        if self.beta <= 0:
            raise ValueError("beta must be positive")
        k = self.skeleton.n_joints
        owners = set()
        for cap in self.capsules:
            if not (0 <= cap.joint < k and 0 <= cap.child < k):
                raise ValueError("capsule joint index out of range")
            if self.skeleton.parents[cap.child] != cap.joint:
                raise ValueError("capsule child is not a child of its joint")
            if cap.radius_head <= 0 or cap.radius_tail <= 0:
                raise ValueError("capsule radii must be positive")
            length = np.linalg.norm(self.skeleton.rest_positions[cap.child]
                                    - self.skeleton.rest_positions[cap.joint])
            if abs(cap.radius_head - cap.radius_tail) >= length:
                raise ValueError("capsule degenerates to a sphere-in-sphere")
            owners.add(cap.joint)
        leaves = {j for j in range(k) if j not in set(self.skeleton.parents[1:])}
        for j in range(k):
            if j not in leaves and j not in owners:
                raise ValueError(f"non-leaf joint {j} owns no capsule")

    @property
    def n_joints(self) -> int:
        return self.skeleton.n_joints

    def leaf_mask(self):
        k = self.skeleton.n_joints
        mask = np.ones(k, dtype=bool)
        mask[self.skeleton.parents[1:]] = False
        return mask


@dataclass
class CharacterConfig:
    height_range: tuple = (1.5, 1.9)
    proportion_jitter: float = 0.08
    radius_jitter: float = 0.10
    beta: float = DEFAULT_BETA

    def validate(self):
        lo, hi = self.height_range
        if not (0 < lo <= hi):
            raise ValueError("height range must be positive and ordered")
        if not (0 <= self.proportion_jitter < 0.5 and 0 <= self.radius_jitter < 0.5):
            raise ValueError("jitter fractions must be in [0, 0.5)")
        if self.beta <= 0:
            raise ValueError("beta must be positive")


def _character_height(rest, capsules):
    top, bottom = -np.inf, np.inf
    for cap in capsules:
        a, b = rest[cap.joint], rest[cap.child]
        top = max(top, a[2] + cap.radius_head, b[2] + cap.radius_tail)
        bottom = min(bottom, a[2] - cap.radius_head, b[2] - cap.radius_tail)
    return top - bottom, bottom


def build_character(seed: int, config: CharacterConfig = None) -> RiggedCharacter:
    """Seeded humanoid with jittered proportions, rescaled to a target height.

    The returned character stands on z = 0 in rest pose and its total height
    (capsule extremes included) lies inside config.height_range.
    """
    config = config or CharacterConfig()
    config.validate()
    rng = np.random.default_rng(seed)
    target_h = rng.uniform(*config.height_range)
    k = len(PARENTS)
    rest = np.zeros((k, 3))
    for j in range(k):
        off = np.array(_OFFSETS[j])
        scale = 1.0 + rng.uniform(-config.proportion_jitter, config.proportion_jitter)
        if j == 0:
            rest[j] = off  # root offset is absolute; rescaled below anyway
        else:
            rest[j] = rest[PARENTS[j]] + off * scale
    capsules = []
    for (j, c), (rh, rt) in _CAPSULE_RADII.items():
        jit = 1.0 + rng.uniform(-config.radius_jitter, config.radius_jitter)
        capsules.append(Capsule(j, c, rh * jit, rt * jit))
    height, bottom = _character_height(rest, capsules)
    s = target_h / height
    rest *= s
    rest[:, 2] -= bottom * s
    capsules = [Capsule(c.joint, c.child, c.radius_head * s, c.radius_tail * s)
                for c in capsules]
    skel = Skeleton(list(JOINT_NAMES), np.array(PARENTS), rest)
    return RiggedCharacter(skel, capsules, config.beta)


def character_height(char: RiggedCharacter) -> float:
    h, _ = _character_height(char.skeleton.rest_positions, char.capsules)
    return float(h)


# ---------------------------------------------------------------------------
# Analytic oracles


def _round_cone_sdf(points, a, b, r1, r2):
    """Exact signed distance to the convex hull of two spheres (a, r1), (b, r2)."""
    p = points
    ba = b - a
    l2 = float(np.dot(ba, ba))
    rr = r1 - r2
    a2 = l2 - rr * rr
    il2 = 1.0 / l2
    pa = p - a
    y = pa @ ba
    z = y - l2
    d = pa * l2 - np.outer(y, ba)
    x2 = np.einsum("ij,ij->i", d, d)
    y2 = y * y * l2
    z2 = z * z * l2
    k = np.sign(rr) * rr * rr * x2
    out = (np.sqrt(x2 * a2 * il2) + y * rr) * il2 - r1
    lower = np.sign(z) * a2 * z2 > k
    upper = np.sign(y) * a2 * y2 < k
    out = np.where(lower, np.sqrt(x2 + z2) * il2 - r2, out)
    out = np.where(~lower & upper, np.sqrt(x2 + y2) * il2 - r1, out)
    return out


def _posed_endpoints(char: RiggedCharacter, pose):
    rest = char.skeleton.rest_positions
    if pose is None:
        return [(rest[c.joint].copy(), rest[c.child].copy()) for c in char.capsules]
    tr = animation.forward_kinematics(char.skeleton, pose)
    ends = []
    for cap in char.capsules:
        # The whole capsule follows its owning joint's transform rigidly.
        ends.append((tr.apply(cap.joint, rest[cap.joint]),
                     tr.apply(cap.joint, rest[cap.child])))
    return ends


def capsule_distances(char: RiggedCharacter, points, pose=None):
    """Unsigned distance from each point to each joint's capsule union.

    Shape (n, K); +inf columns for leaf joints (no bone).  Distance is zero
    inside a capsule.
    """
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    k = char.n_joints
    dist = np.full((len(pts), k), np.inf)
    for cap, (a, b) in zip(char.capsules, _posed_endpoints(char, pose)):
        sdf = _round_cone_sdf(pts, a, b, cap.radius_head, cap.radius_tail)
        np.minimum(dist[:, cap.joint], np.maximum(sdf, 0.0), out=dist[:, cap.joint])
    return dist


def analytic_occupancy(char: RiggedCharacter, points, pose=None):
    """1.0 inside the posed capsule union (boundary counts as inside), else 0."""
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    pts = pts.reshape(-1, 3)
    inside = np.zeros(len(pts), dtype=bool)
    for cap, (a, b) in zip(char.capsules, _posed_endpoints(char, pose)):
        inside |= _round_cone_sdf(pts, a, b, cap.radius_head, cap.radius_tail) <= 0.0
    occ = inside.astype(np.float64)
    return float(occ[0]) if single else occ


def analytic_skinning(char: RiggedCharacter, points, pose=None):
    """Exact skinning weights, rows on the simplex.

    Weight of bone k falls off as exp(-beta d_k^2) with d_k the distance to
    the joint's capsule union; leaf joints carry no bone and get zero.  The
    shared minimum d^2 is subtracted before exponentiation so far-away
    points still normalize cleanly.
    """
    pts = np.asarray(points, dtype=np.float64)
    single = pts.ndim == 1
    d = capsule_distances(char, pts.reshape(-1, 3), pose)
    d2 = np.where(np.isinf(d), np.inf, d * d)
    d2min = d2.min(axis=1, keepdims=True)
    w = np.exp(-char.beta * (d2 - d2min))
    w[np.isinf(d)] = 0.0
    w /= w.sum(axis=1, keepdims=True)
    return w[0] if single else w


def analytic_joints(char: RiggedCharacter, pose=None):
    """Posed joint positions; the rest positions under the identity pose."""
    if pose is None:
        return char.skeleton.rest_positions.copy()
    return animation.posed_joints(char.skeleton, pose)


def character_bounds(char: RiggedCharacter, pose=None, margin: float = 0.06):
    """Cubical bounding box (center, side) of the posed capsule union."""
    lo = np.full(3, np.inf)
    hi = np.full(3, -np.inf)
    for cap, (a, b) in zip(char.capsules, _posed_endpoints(char, pose)):
        r = max(cap.radius_head, cap.radius_tail)
        lo = np.minimum(lo, np.minimum(a, b) - r)
        hi = np.maximum(hi, np.maximum(a, b) + r)
    side = float((hi - lo).max()) + 2 * margin
    return (lo + hi) / 2.0, side


def occupancy_grid(char: RiggedCharacter, pose=None, resolution: int = 64,
                   center=None, extent=None) -> VoxelGrid:
    """Binary occupancy sampled at cell centres of a cubical grid."""
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if center is None or extent is None:
        c, side = character_bounds(char, pose)
        center = c if center is None else np.asarray(center, dtype=np.float64)
        extent = side if extent is None else float(extent)
    center = np.asarray(center, dtype=np.float64)
    cell = float(extent) / resolution
    origin = center - 0.5 * float(extent)
    axes = [origin[i] + (np.arange(resolution) + 0.5) * cell for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    occ = np.empty(len(pts))
    chunk = 1 << 18
    for i in range(0, len(pts), chunk):
        occ[i:i + chunk] = analytic_occupancy(char, pts[i:i + chunk], pose)
    return VoxelGrid(origin, cell, occ.reshape(resolution, resolution, resolution, 1))


def depth_grid(char: RiggedCharacter, pose=None, resolution: int = 64,
               center=None, extent=None) -> VoxelGrid:
    """Penetration depth (negated signed distance) at cell centres.

    Positive inside the posed capsule union, negative outside, zero on the
    wall.  Marching this at iso 0 recovers the exact capsule surface up to
    interpolation error; marching binary occupancy instead leaves a
    staircase whose area overshoots by ~20% at any resolution.
    """
    if resolution < 2:
        raise ValueError("resolution must be at least 2")
    if center is None or extent is None:
        c, side = character_bounds(char, pose)
        center = c if center is None else np.asarray(center, dtype=np.float64)
        extent = side if extent is None else float(extent)
    center = np.asarray(center, dtype=np.float64)
    cell = float(extent) / resolution
    origin = center - 0.5 * float(extent)
    axes = [origin[i] + (np.arange(resolution) + 0.5) * cell for i in range(3)]
    gx, gy, gz = np.meshgrid(*axes, indexing="ij")
    pts = np.stack([gx, gy, gz], axis=-1).reshape(-1, 3)
    depth = np.full(len(pts), -np.inf)
    for cap, (a, b) in zip(char.capsules, _posed_endpoints(char, pose)):
        sdf = _round_cone_sdf(pts, a, b, cap.radius_head, cap.radius_tail)
        np.maximum(depth, -sdf, out=depth)
    return VoxelGrid(origin, cell,
                     depth.reshape(resolution, resolution, resolution, 1))


def character_mesh(char: RiggedCharacter, pose=None, resolution: int = 64,
                   center=None, extent=None) -> TriangleMesh:
    """Watertight surface of the posed capsule union at grid resolution."""
    from .extraction import marching_cubes
    grid = depth_grid(char, pose, resolution, center, extent)
    return marching_cubes(grid, iso=0.0, pad_value=-1.0)


# ---------------------------------------------------------------------------
# Pose and clip synthesis


def _roll_free_axes(char: RiggedCharacter, rng):
    """Per-joint random rotation axes orthogonal to the rest bone direction.

    Rotations about such axes are exactly recoverable by shortest-arc IK;
    adding roll about the bone itself would move off-axis children in a way
    joint positions cannot witness.
    """
    rest = char.skeleton.rest_positions
    child = animation.primary_children(char.skeleton.parents)
    axes = np.zeros((char.n_joints, 3))
    for k in range(char.n_joints):
        if child[k] < 0:
            continue
        b = unit(rest[child[k]] - rest[k])
        v = rng.standard_normal(3)
        v -= np.dot(v, b) * b
        while np.linalg.norm(v) < 1e-6:
            v = rng.standard_normal(3)
            v -= np.dot(v, b) * b
        axes[k] = v / np.linalg.norm(v)
    return axes, child


def sample_pose(char: RiggedCharacter, seed: int, max_angle_deg: float = 40.0,
                translate: float = 0.0) -> Pose:
    """Random roll-free pose: each non-leaf joint rotates about a random axis
    orthogonal to its rest bone direction; leaves stay at identity."""
    rng = np.random.default_rng(seed)
    axes, child = _roll_free_axes(char, rng)
    rots = np.tile(np.eye(3), (char.n_joints, 1, 1))
    for k in range(char.n_joints):
        if child[k] < 0:
            continue
        ang = np.deg2rad(rng.uniform(-max_angle_deg, max_angle_deg))
        rots[k] = Rotation.from_axis_angle(axes[k], ang).matrix
    t = rng.uniform(-translate, translate, size=3) if translate > 0 else np.zeros(3)
    return Pose(rots, t)


def synthesize_clip(char: RiggedCharacter, n_frames: int, seed: int,
                    deg_per_frame: float = 0.35, fps: float = 30.0) -> animation.AnimationClip:
    """Smooth clip whose pose drifts monotonically away from frame 0.

    Every non-leaf joint sweeps a fixed roll-free axis at a per-joint rate,
    so pose distance grows with frame offset (what the retarget sweep needs).
    """
    if n_frames < 1:
        raise ValueError("clip needs at least one frame")
    rng = np.random.default_rng(seed)
    axes, child = _roll_free_axes(char, rng)
    rates = np.deg2rad(deg_per_frame * rng.uniform(0.5, 1.0, size=char.n_joints))
    rotations = np.tile(np.eye(3), (n_frames, char.n_joints, 1, 1))
    for k in range(char.n_joints):
        if child[k] < 0:
            continue
        for f in range(n_frames):
            rotations[f, k] = Rotation.from_axis_angle(axes[k], rates[k] * f).matrix
    return animation.AnimationClip(SKELETON_NAME, fps, rotations,
                                   np.zeros((n_frames, 3)))


# ---------------------------------------------------------------------------
# Serialization


def skeleton_doc(skel: Skeleton) -> dict:
    return {"joints": [{"name": skel.names[j],
                        "parent": int(skel.parents[j]),
                        "rest_position": [float(x) for x in skel.rest_positions[j]]}
                       for j in range(skel.n_joints)]}


def skeleton_from_doc(doc: dict) -> Skeleton:
    joints = doc.get("joints")
    if not joints:
        raise ValueError("skeleton document has no joints")
    names = [j["name"] for j in joints]
    parents = [int(j["parent"]) for j in joints]
    rest = [j["rest_position"] for j in joints]
    return Skeleton(names, np.array(parents), np.array(rest, dtype=np.float64))


def write_character(char: RiggedCharacter, path) -> None:
    doc = {
        "skeleton": skeleton_doc(char.skeleton),
        "capsules": [{"joint": c.joint, "child": c.child,
                      "radius_head": c.radius_head, "radius_tail": c.radius_tail}
                     for c in char.capsules],
        "beta": char.beta,
    }
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_character(path) -> RiggedCharacter:
    with open(path) as fh:
        doc = json.load(fh)
    skel = skeleton_from_doc(doc["skeleton"])
    caps = [Capsule(int(c["joint"]), int(c["child"]),
                    float(c["radius_head"]), float(c["radius_tail"]))
            for c in doc["capsules"]]
    return RiggedCharacter(skel, caps, float(doc.get("beta", DEFAULT_BETA)))


def write_pose(pose: Pose, path) -> None:
    cache = pose.source_quaternions
    quats = [quaternion_payload(m, None if cache is None else cache[k])
             for k, m in enumerate(pose.rotations)]
    doc = {"rotations": [[float(x) for x in q] for q in quats],
           "root_translation": [float(x) for x in pose.root_translation]}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_pose(path) -> Pose:
    with open(path) as fh:
        doc = json.load(fh)
    quats = np.asarray(doc["rotations"], dtype=np.float64)
    if quats.ndim != 2 or quats.shape[1] != 4:
        raise ValueError("pose rotations must be (w, x, y, z) quaternions")
    rots = np.array([Rotation.from_quaternion(q).matrix for q in quats])
    return Pose(rots, np.asarray(doc["root_translation"], dtype=np.float64),
                source_quaternions=quats)
