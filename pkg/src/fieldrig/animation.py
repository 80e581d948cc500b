"""Skeleton animation: shortest-arc IK, forward kinematics, blend skinning.

Joint rotations are relative to the parent and act about the joint's rest
position, so the world transform of joint k is the ordered product of the
factors [R_p, (I - R_p) j_p] for every p on the root-to-k chain, k included,
with the root translation applied last.  IK recovers one rotation per
non-leaf joint by aligning its rest bone direction with the target bone
direction; rotation about the bone axis itself (roll) is unobservable from
joint positions and is left at zero.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .geomcore import Rotation, TriangleMesh, quaternion_payload, unit

# Up axis used to disambiguate the antiparallel shortest-arc case.
GLOBAL_UP = np.array([0.0, 0.0, 1.0])
ANTIPARALLEL_EPS = 1e-12
# Loose enough for float32-stored weight rows (sum drift ~1e-7), tight
# enough to catch rows that were never normalized.
WEIGHT_ROW_TOL = 1e-4


def shortest_arc_rotation(a, b):
    """Smallest rotation taking unit direction a to unit direction b.

    Inputs must be unit length within 1e-6 (they are renormalized before
    use so the Rodrigues identities hold exactly).  For antiparallel inputs
    any half-turn works; we pick the axis as the component of the global up
    orthogonal to a (x-axis fallback when a is itself near vertical) so the
    choice is deterministic.
    """
    for v in (a, b):
        if abs(float(np.linalg.norm(np.asarray(v, dtype=np.float64))) - 1.0) > 1e-6:
            raise ValueError("directions must be unit length")
    a = unit(a)
    b = unit(b)
    c = np.cross(a, b)
    d = float(np.dot(a, b))
    s2 = float(np.dot(c, c))
    if s2 < ANTIPARALLEL_EPS:
        if d > 0:
            return np.eye(3)
        axis = GLOBAL_UP - np.dot(GLOBAL_UP, a) * a
        if np.dot(axis, axis) < 1e-8:
            fallback = np.array([1.0, 0.0, 0.0])
            axis = fallback - np.dot(fallback, a) * a
        axis = unit(axis)
        return 2.0 * np.outer(axis, axis) - np.eye(3)
    # Rodrigues with K = [c]_x, using sin = |c| and cos = d.
    k = np.array([[0.0, -c[2], c[1]], [c[2], 0.0, -c[0]], [-c[1], c[0], 0.0]])
    return np.eye(3) + k + k @ k * ((1.0 - d) / s2)


def _check_topology(parents):
    parents = np.asarray(parents, dtype=np.int64)
    if parents.ndim != 1 or len(parents) < 2:
        raise ValueError("skeleton needs at least two joints")
    if parents[0] != -1:
        raise ValueError("joint 0 must be the root (parent -1)")
    for k in range(1, len(parents)):
        if not 0 <= parents[k] < k:
            raise ValueError("parents must be topologically ordered (parent < child)")
    return parents


def primary_children(parents):
    """Lowest-indexed child per joint, -1 for leaves."""
    parents = _check_topology(parents)
    child = np.full(len(parents), -1, dtype=np.int64)
    for k in range(len(parents) - 1, 0, -1):
        child[parents[k]] = k
    return child


@dataclass
class JointTransforms:
    """World transform per joint: x -> rotations[k] @ x + translations[k]."""

    rotations: np.ndarray     # (K, 3, 3)
    translations: np.ndarray  # (K, 3)

    def apply(self, k: int, points):
        points = np.asarray(points, dtype=np.float64)
        return points @ self.rotations[k].T + self.translations[k]


@dataclass
class IkSolution:
    rotations: np.ndarray         # (K, 3, 3) relative joint rotations
    root_translation: np.ndarray  # (3,)
    residuals: np.ndarray         # (K,) bone alignment residual angles, rad


def fk_transforms(parents, rest_positions, rotations, root_translation=None) -> JointTransforms:
    """Forward kinematics on raw arrays; see forward_kinematics."""
    parents = _check_topology(parents)
    rest = np.asarray(rest_positions, dtype=np.float64).reshape(-1, 3)
    rot = np.asarray(rotations, dtype=np.float64)
    k_n = len(parents)
    if rest.shape != (k_n, 3) or rot.shape != (k_n, 3, 3):
        raise ValueError("joint count mismatch between topology, rest pose, and rotations")
    t_root = (np.zeros(3) if root_translation is None
              else np.asarray(root_translation, dtype=np.float64))
    acc_r = np.empty((k_n, 3, 3))
    acc_t = np.empty((k_n, 3))
    for k in range(k_n):
        local_t = rest[k] - rot[k] @ rest[k]
        if parents[k] < 0:
            acc_r[k] = rot[k]
            acc_t[k] = local_t + t_root
        else:
            p = parents[k]
            acc_r[k] = acc_r[p] @ rot[k]
            acc_t[k] = acc_r[p] @ local_t + acc_t[p]
    return JointTransforms(acc_r, acc_t)


def forward_kinematics(skeleton, pose) -> JointTransforms:
    """World joint transforms for a skeleton in a pose.

    skeleton provides .parents and .rest_positions; pose provides .rotations
    (K, 3, 3) and .root_translation.
    """
    return fk_transforms(skeleton.parents, skeleton.rest_positions,
                         pose.rotations, pose.root_translation)


def posed_joints(skeleton, pose):
    """Joint positions under a pose (rest positions pushed through FK)."""
    tr = forward_kinematics(skeleton, pose)
    rest = np.asarray(skeleton.rest_positions, dtype=np.float64)
    return np.einsum("kij,kj->ki", tr.rotations, rest) + tr.translations


def solve_ik(skeleton, target_joints) -> IkSolution:
    """Per-joint shortest-arc IK from rest joints to target joint positions.

    Traverses joints in topological order; each non-leaf joint receives the
    rotation that, composed with its already-solved ancestors, maps its rest
    bone direction onto the target bone direction.  Leaves get the identity.
    """
    parents = _check_topology(skeleton.parents)
    rest = np.asarray(skeleton.rest_positions, dtype=np.float64).reshape(-1, 3)
    targets = np.asarray(target_joints, dtype=np.float64).reshape(-1, 3)
    k_n = len(parents)
    if targets.shape != (k_n, 3):
        raise ValueError("target joint count does not match the skeleton")
    child = primary_children(parents)
    rotations = np.tile(np.eye(3), (k_n, 1, 1))
    residuals = np.zeros(k_n)
    composed = np.tile(np.eye(3), (k_n, 1, 1))
    for k in range(k_n):
        cp = np.eye(3) if parents[k] < 0 else composed[parents[k]]
        c = child[k]
        if c < 0:
            composed[k] = cp
            continue
        rest_bone = rest[c] - rest[k]
        target_bone = targets[c] - targets[k]
        if np.linalg.norm(rest_bone) < 1e-9 or np.linalg.norm(target_bone) < 1e-9:
            raise ValueError(f"zero-length bone at joint {k}")
        b = unit(rest_bone)
        rotations[k] = shortest_arc_rotation(b, cp.T @ unit(target_bone))
        composed[k] = cp @ rotations[k]
        cos = float(np.clip(np.dot(composed[k] @ b, unit(target_bone)), -1.0, 1.0))
        residuals[k] = np.arccos(cos)
    return IkSolution(rotations, targets[0] - rest[0], residuals)


def lbs_deform(vertices, weights, transforms: JointTransforms):
    """Linear blend skinning: v' = sum_k w_k (R_k v + t_k)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 3)
    w = np.asarray(weights, dtype=np.float64)
    k_n = len(transforms.rotations)
    if w.shape != (len(v), k_n):
        raise ValueError("weights must be (n_vertices, n_joints)")
    row_err = np.abs(w.sum(axis=1) - 1.0).max() if len(w) else 0.0
    if row_err > WEIGHT_ROW_TOL or (len(w) and w.min() < -WEIGHT_ROW_TOL):
        raise ValueError("skinning weight rows must lie on the simplex")
    out = np.zeros_like(v)
    for k in range(k_n):
        out += w[:, k:k + 1] * (v @ transforms.rotations[k].T + transforms.translations[k])
    return out


class _RestSkeleton:
    def __init__(self, parents, rest_positions):
        self.parents = parents
        self.rest_positions = rest_positions


def retarget(model, target_joints) -> TriangleMesh:
    """Re-pose an animatable model so its joints meet target positions.

    model provides .mesh, .parents, .joints (treated as the rest pose of the
    model) and .weights; the result is the LBS-deformed mesh.
    """
    skel = _RestSkeleton(model.parents, model.joints)
    ik = solve_ik(skel, target_joints)
    tr = fk_transforms(model.parents, model.joints, ik.rotations, ik.root_translation)
    return TriangleMesh(lbs_deform(model.mesh.vertices, model.weights, tr),
                        model.mesh.faces.copy())


# ---------------------------------------------------------------------------
# Clip serialization


@dataclass
class AnimationClip:
    """A pose track: per-frame relative joint rotations plus root motion.

    `source_quaternions` (F, K, 4) carries the quaternions a reader parsed
    so a rewrite reproduces the document bytes; writers verify each against
    the rotation it came from and extract afresh on mismatch.
    """

    skeleton_name: str
    fps: float
    rotations: np.ndarray          # (F, K, 3, 3)
    root_translations: np.ndarray  # (F, 3)
    source_quaternions: np.ndarray | None = None

    @property
    def n_frames(self) -> int:
        return len(self.rotations)


def write_clip(clip: AnimationClip, path) -> None:
    import json
    cache = clip.source_quaternions
    frames = []
    for f in range(clip.n_frames):
        quats = [[float(x) for x in
                  quaternion_payload(m, None if cache is None else cache[f][k])]
                 for k, m in enumerate(clip.rotations[f])]
        frames.append({"rotations": quats,
                       "root_translation": [float(x) for x in clip.root_translations[f]]})
    doc = {"skeleton": clip.skeleton_name, "fps": clip.fps, "frames": frames}
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True)
        fh.write("\n")


def read_clip(path) -> AnimationClip:
    import json
    with open(path) as fh:
        doc = json.load(fh)
    for key in ("skeleton", "fps", "frames"):
        if key not in doc:
            raise ValueError(f"clip document missing {key!r}")
    frames = doc["frames"]
    if not frames:
        raise ValueError("clip has no frames")
    rots, trans, sources = [], [], []
    for i, frame in enumerate(frames):
        quats = np.asarray(frame["rotations"], dtype=np.float64)
        if quats.ndim != 2 or quats.shape[1] != 4:
            raise ValueError(f"frame {i}: rotations must be (w, x, y, z) quaternions")
        norms = np.linalg.norm(quats, axis=1)
        if np.any(np.abs(norms - 1.0) > 1e-3):
            raise ValueError(f"frame {i}: non-unit quaternion")
        rots.append([Rotation.from_quaternion(q).matrix for q in quats])
        trans.append(np.asarray(frame["root_translation"], dtype=np.float64))
        sources.append(quats)
    if len({s.shape for s in sources}) > 1:
        raise ValueError("inconsistent joint counts across frames")
    return AnimationClip(doc["skeleton"], float(doc["fps"]),
                         np.asarray(rots), np.asarray(trans),
                         source_quaternions=np.asarray(sources))
