"""Animatable model extraction from trained fields.

Dense occupancy evaluation on a cell-centre lattice, isosurface meshing,
joint localization by per-channel argmax of the heatmap grid, and skinning
weights sampled at mesh vertices.

Meshing runs marching tetrahedra over a Freudenthal 6-tet split of the
cubes spanned by neighbouring cell centres.  Inside each tet the field is
linear, so its iso-set is planar and every tet face is triangulated the
same way from both sides; together with a one-ring zero pad around the
lattice this makes the output watertight by construction, which the classic
single-pass cube lookup cannot guarantee on its ambiguous faces.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass

import numpy as np

from .character import JOINT_NAMES, PARENTS, SKELETON_NAME
from .fields import (FieldParams, branch_flags, encode_image,
                     encode_volumetric, eval_occupancy, eval_pose,
                     eval_skinning, point_encoding)
from .geomcore import TriangleMesh, VoxelGrid, read_obj, write_obj

SKIN_MAGIC = b"S3SW"
DEFAULT_ISO = 0.5
DEFAULT_CHUNK = 65536
S_CLAMP = 1e-2  # crossings stay this far (in edge fractions) from grid nodes

# Freudenthal split: six tets around the main diagonal 0-7.  Corner c of a
# cube sits at offset (c & 1, c >> 1 & 1, c >> 2 & 1).
_TETS = ((0, 1, 3, 7), (0, 1, 5, 7), (0, 2, 3, 7),
         (0, 2, 6, 7), (0, 4, 5, 7), (0, 4, 6, 7))
_CORNER_OFFSETS = np.array([(c & 1, c >> 1 & 1, c >> 2 & 1) for c in range(8)],
                           dtype=np.float64)


class EmptyReconstructionError(ValueError):
    """Occupancy never crosses the iso level: nothing to mesh."""


class InvalidModelError(ValueError):
    """An extracted model violated a structural invariant."""


def _tet_case_table():
    """mask -> triangles, each a triple of (inside_corner, outside_corner)
    local tet edges; bit i of mask marks tet corner i inside."""
    table = []
    for mask in range(16):
        ins = [i for i in range(4) if mask >> i & 1]
        outs = [i for i in range(4) if not mask >> i & 1]
        if len(ins) == 1:
            a, (b, c, d) = ins[0], outs
            tris = [((a, b), (a, c), (a, d))]
        elif len(ins) == 3:
            a, (b, c, d) = outs[0], ins
            tris = [((b, a), (c, a), (d, a))]
        elif len(ins) == 2:
            (a, b), (c, d) = ins, outs
            tris = [((a, c), (a, d), (b, d)), ((a, c), (b, d), (b, c))]
        else:
            tris = []
        table.append(tris)
    return table


_CASES = _tet_case_table()

# Per tet, inverse of the edge matrix rows (corner_i - corner_0): maps corner
# value differences to the (unscaled) field gradient inside the tet.
_TET_GRAD = [np.linalg.inv(_CORNER_OFFSETS[list(t[1:])] - _CORNER_OFFSETS[t[0]])
             for t in _TETS]


def marching_cubes(grid: VoxelGrid, iso: float = DEFAULT_ISO,
                   pad_value: float = 0.0) -> TriangleMesh:
    """Isosurface of a scalar grid as a watertight, outward-oriented mesh.

    Values sit at cell centres; v >= iso counts as inside, and the lattice
    is padded with one ring of `pad_value` (strictly below iso) so the
    surface closes across the grid boundary.  Vertices are welded by the
    node pair of the edge they split.
    """
    if grid.channels != 1:
        raise ValueError("isosurface extraction needs a single-channel grid")
    iso = float(iso)
    if not pad_value < iso:
        raise ValueError("padding value must lie strictly below the iso level")
    nx, ny, nz = grid.resolution
    vp = np.full((nx + 2, ny + 2, nz + 2), float(pad_value))
    vp[1:-1, 1:-1, 1:-1] = grid.values[..., 0]
    nyp, nzp = ny + 2, nz + 2
    n_nodes = (nx + 2) * nyp * nzp

    ii, jj = np.meshgrid(np.arange(nx + 1), np.arange(ny + 1), indexing="ij")
    base_ij = ((ii * nyp + jj) * nzp).ravel()
    corner_off = np.array([int((c & 1) * nyp * nzp + (c >> 1 & 1) * nzp
                               + (c >> 2 & 1)) for c in range(8)])

    e_in, e_out, grads = [], [], []
    for k in range(nz + 1):
        vals8 = np.stack([
            vp[c & 1:nx + 1 + (c & 1),
               (c >> 1 & 1):ny + 1 + (c >> 1 & 1),
               k + (c >> 2 & 1)].ravel()
            for c in range(8)])
        ins8 = vals8 >= iso
        act = np.where(ins8.any(axis=0) & ~ins8.all(axis=0))[0]
        if not len(act):
            continue
        vals8 = vals8[:, act]
        ins8 = ins8[:, act]
        ids8 = base_ij[act][None, :] + k + corner_off[:, None]
        for t_i, tet in enumerate(_TETS):
            mask = np.zeros(len(act), dtype=np.int64)
            for bit, corner in enumerate(tet):
                mask |= ins8[corner].astype(np.int64) << bit
            for case in range(1, 15):
                rows = np.where(mask == case)[0]
                if not len(rows):
                    continue
                dv = np.stack([vals8[tet[i], rows] - vals8[tet[0], rows]
                               for i in (1, 2, 3)], axis=1)
                g = dv @ _TET_GRAD[t_i].T
                for tri in _CASES[case]:
                    e_in.append(np.stack([ids8[tet[u], rows] for u, _ in tri],
                                         axis=1))
                    e_out.append(np.stack([ids8[tet[v], rows] for _, v in tri],
                                          axis=1))
                    grads.append(g)

    if not e_in:
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))
    e_in = np.concatenate(e_in)
    e_out = np.concatenate(e_out)
    grads = np.concatenate(grads)

    keys = e_in * n_nodes + e_out
    uniq, faces = np.unique(keys, return_inverse=True)
    faces = faces.reshape(-1, 3)
    id_in, id_out = uniq // n_nodes, uniq % n_nodes
    flat = vp.ravel()
    v_in, v_out = flat[id_in], flat[id_out]

    def node_pos(idx):
        i, rem = np.divmod(idx, nyp * nzp)
        j, k = np.divmod(rem, nzp)
        return grid.origin + (np.stack([i, j, k], axis=1) - 0.5) * grid.cell_size

    p_in, p_out = node_pos(id_in), node_pos(id_out)
    # Interpolation parameters are clamped away from the nodes.  The tet
    # triangulation is a closed 2-manifold by construction, but a node value
    # within ~1e-6 of iso puts crossings so close to the node that incident
    # micro-triangles dip under the degenerate-face cleanup, and dropping a
    # distinct-vertex face opens the surface.  With s in [S_CLAMP, 1-S_CLAMP]
    # every face keeps three distinct vertices and its area is bounded below
    # by ~0.29 (S_CLAMP * cell)^2, clear of the cleanup threshold for any
    # cell above ~0.2 mm, at the cost of <= 1% of a cell in vertex placement.
    s = (iso - v_in) / (v_out - v_in)
    s = np.clip(s, S_CLAMP, 1.0 - S_CLAMP)
    verts = p_in + s[:, None] * (p_out - p_in)

    a, b, c = (verts[faces[:, i]] for i in range(3))
    flip = np.einsum("ij,ij->i", np.cross(b - a, c - a), grads) > 0
    faces[flip] = faces[flip][:, [0, 2, 1]]
    return TriangleMesh(verts, faces)


# ---------------------------------------------------------------------------
# Dense field evaluation


@dataclass
class FieldGrids:
    """Occupancy and joint-heatmap fields on a shared cell-centre lattice."""

    occupancy: VoxelGrid
    heatmaps: VoxelGrid


def _encoded_features(params: FieldParams, sample):
    feat_vox = encode_volumetric(sample.voxels, params.vox_enc)
    feat_im = (encode_image(sample.image, params.im_enc)
               if sample.image is not None else None)
    return feat_vox, feat_im


def _chunks(n, chunk):
    chunk = max(int(chunk), 1)
    return [(s, min(s + chunk, n)) for s in range(0, n, chunk)]


def evaluate_field_grid(params: FieldParams, sample, resolution: int = 128,
                        chunk: int = DEFAULT_CHUNK,
                        features=None) -> FieldGrids:
    """Evaluate occupancy and heatmaps at cell centres over the sample's
    sensor volume.  Results are independent of chunk size, bit for bit."""
    if resolution < 1:
        raise ValueError("resolution must be positive")
    feat_vox, feat_im = features if features is not None else \
        _encoded_features(params, sample)
    side = sample.voxels.cell_size * sample.voxels.resolution[0]
    out = VoxelGrid(sample.voxels.origin, side / resolution,
                    np.zeros((resolution,) * 3 + (1,)))
    heat = VoxelGrid(sample.voxels.origin, side / resolution,
                     np.zeros((resolution,) * 3 + (params.n_joints,)))
    centers = out.cell_centers()
    occ_flat = out.values.reshape(-1)
    heat_flat = heat.values.reshape(-1, params.n_joints)
    for s, e in _chunks(len(centers), chunk):
        phi, _ = point_encoding(centers[s:e], sample, feat_vox, feat_im,
                                im_channels=params.im_enc.channels,
                                **branch_flags(params))
        occ_flat[s:e] = eval_occupancy(params, phi)
        heat_flat[s:e] = eval_pose(params, phi)
    return FieldGrids(out, heat)


def extract_joints(heatmaps: VoxelGrid) -> np.ndarray:
    """Cell centre of each channel's maximum; ties resolve to the smallest
    C-order linear index."""
    m = heatmaps.channels
    flat = heatmaps.values.reshape(-1, m)
    centers = heatmaps.cell_centers()
    return centers[np.argmax(flat, axis=0)]


def extract_skinning(params: FieldParams, sample, points,
                     chunk: int = DEFAULT_CHUNK, features=None) -> np.ndarray:
    """Skinning weight rows at arbitrary points (softmax, simplex exact)."""
    feat_vox, feat_im = features if features is not None else \
        _encoded_features(params, sample)
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    out = np.zeros((len(pts), params.n_bones))
    for s, e in _chunks(len(pts), chunk):
        phi, _ = point_encoding(pts[s:e], sample, feat_vox, feat_im,
                                im_channels=params.im_enc.channels,
                                **branch_flags(params))
        out[s:e] = eval_skinning(params, phi)
    return out


# ---------------------------------------------------------------------------
# Animatable model


@dataclass
class AnimatableModel:
    """Reconstructed character: surface, joints, and per-vertex skinning."""

    mesh: TriangleMesh
    joints: np.ndarray
    weights: np.ndarray
    parents: tuple
    names: tuple = ()
    skeleton_name: str = SKELETON_NAME

    def __post_init__(self):
        self.joints = np.asarray(self.joints, dtype=np.float64).reshape(-1, 3)
        self.weights = np.asarray(self.weights, dtype=np.float64)
        self.parents = tuple(int(p) for p in self.parents)
        if not self.names:
            self.names = (JOINT_NAMES if len(self.parents) == len(JOINT_NAMES)
                          else tuple(f"joint_{i:02d}"
                                     for i in range(len(self.parents))))
        self.names = tuple(self.names)


def validate_model(model: AnimatableModel) -> None:
    k = len(model.parents)
    if model.joints.shape != (k, 3) or not np.isfinite(model.joints).all():
        raise InvalidModelError("joints must be finite, one per bone")
    w = model.weights
    if w.shape != (model.mesh.n_vertices, k):
        raise InvalidModelError("one weight row per mesh vertex required")
    if not np.isfinite(w).all() or w.min() < 0 \
            or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6:
        raise InvalidModelError("weight rows must lie on the simplex")
    if not model.mesh.is_watertight():
        raise InvalidModelError("reconstructed mesh is not watertight")
    if not model.mesh.is_oriented():
        raise InvalidModelError("reconstructed mesh is not consistently oriented")


def extract_animatable_model(params: FieldParams, sample, parents=PARENTS,
                             resolution: int = 128, iso: float = DEFAULT_ISO,
                             chunk: int = DEFAULT_CHUNK) -> AnimatableModel:
    """Full reconstruction: mesh the occupancy field, localize joints,
    sample skinning at the vertices, and validate the result."""
    if len(parents) != params.n_bones:
        raise ValueError("parent table length must match the skinning head")
    features = _encoded_features(params, sample)
    grids = evaluate_field_grid(params, sample, resolution, chunk, features)
    occ = grids.occupancy.values
    if bool((occ >= iso).all()) or bool((occ < iso).all()):
        raise EmptyReconstructionError(
            "occupancy never crosses the iso level on the sample volume")
    mesh = marching_cubes(grids.occupancy, iso)
    if not mesh.n_faces:
        raise EmptyReconstructionError("isosurface is empty")
    joints = extract_joints(grids.heatmaps)
    weights = extract_skinning(params, sample, mesh.vertices, chunk, features)
    model = AnimatableModel(mesh, joints, weights, tuple(parents))
    validate_model(model)
    return model


# ---------------------------------------------------------------------------
# Serialization


def write_skinning_weights(weights, path) -> None:
    """Binary weight rows: magic 'S3SW', u32 vertex count, u32 bone count,
    float32 little-endian rows."""
    w = np.asarray(weights, dtype=np.float64)
    if w.ndim != 2:
        raise ValueError("weights must be (n_vertices, n_bones)")
    if w.size and (not np.isfinite(w).all() or w.min() < 0
                   or np.abs(w.sum(axis=1) - 1.0).max() > 1e-6):
        raise ValueError("weight rows must lie on the simplex")
    with open(path, "wb") as fh:
        fh.write(SKIN_MAGIC)
        fh.write(struct.pack("<II", w.shape[0], w.shape[1]))
        fh.write(np.ascontiguousarray(w, dtype="<f4").tobytes())


def read_skinning_weights(path) -> np.ndarray:
    with open(path, "rb") as fh:
        if fh.read(4) != SKIN_MAGIC:
            raise ValueError("bad skinning weight magic")
        raw = fh.read(8)
        if len(raw) != 8:
            raise ValueError("truncated skinning weight header")
        n, k = struct.unpack("<II", raw)
        payload = fh.read()
    if len(payload) != 4 * n * k:
        raise ValueError("skinning weight payload does not match its header")
    w = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(n, k)
    if not np.isfinite(w).all() or (w.size and w.min() < 0):
        raise ValueError("skinning weights must be finite and nonnegative")
    # Rows come back exactly as stored, so read-then-write reproduces the
    # file's bytes.  Row sums drift from 1 by float32 rounding only (~1e-7
    # for 15 bones), far inside every consumer's simplex tolerance; nobody
    # renormalizes, because rescaling would flip ulps on the next write.
    return w


def _skeleton_doc(model: AnimatableModel):
    return {
        "name": model.skeleton_name,
        "joints": [{"name": model.names[i], "parent": model.parents[i],
                    "position": [float(x) for x in model.joints[i]]}
                   for i in range(len(model.parents))],
    }


def write_model(model: AnimatableModel, out_dir) -> None:
    """Model directory: mesh.obj, skeleton.json, weights.s3sw."""
    import os
    os.makedirs(out_dir, exist_ok=True)
    write_obj(model.mesh, os.path.join(out_dir, "mesh.obj"))
    with open(os.path.join(out_dir, "skeleton.json"), "w") as fh:
        json.dump(_skeleton_doc(model), fh, indent=2, sort_keys=True)
        fh.write("\n")
    write_skinning_weights(model.weights, os.path.join(out_dir, "weights.s3sw"))


def read_model(model_dir) -> AnimatableModel:
    import os
    mesh = read_obj(os.path.join(model_dir, "mesh.obj"))
    with open(os.path.join(model_dir, "skeleton.json")) as fh:
        doc = json.load(fh)
    joints = np.array([j["position"] for j in doc["joints"]], dtype=np.float64)
    parents = tuple(int(j["parent"]) for j in doc["joints"])
    names = tuple(j["name"] for j in doc["joints"])
    weights = read_skinning_weights(os.path.join(model_dir, "weights.s3sw"))
    return AnimatableModel(mesh, joints, weights, parents, names,
                           doc.get("name", SKELETON_NAME))
